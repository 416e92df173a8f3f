import numbers

# Dataset presets
# Map preset name to the (min, max) number of simultaneously active events
PRESETS = {
    "single": (1, 1),
    "multi": (2, 4),
}

# Enumerated configuration values
WINNER_MODES = ("ground_truth", "best_generated")
LOSS_MODES = ("avp_rpo", "dpo_fm_only")
FINETUNE_MODES = ("freeze_top", "full")
REWARD_MODES = ("order_stat", "mean")
SCHEDULES = ("cosine", "constant")

# Pipeline stages in dependency order
STAGES = ("synth", "pretrain-avp", "train-base", "rpo", "eval", "report")

# File format versions
CHECKPOINT_VERSION = 1
MANIFEST_VERSION = 1
RUN_MANIFEST_VERSION = 1

# Default configuration
# Every key is documented in config.example.yaml.
DEFAULTS = {
    "seed": 0,
    "data": {
        "clip_len": 8.0,
        "n_classes": 8,
        "min_simultaneous": 2,
        "max_simultaneous": 4,
        "rate": 0.75,
        "min_duration": 0.5,
        "max_duration": 2.0,
        "min_gap": 0.25,
        "min_intensity": 0.5,
        "segments": 8,
        "frames": 128,
        "height": 32,
        "width": 32,
        "spec_bins": 512,
        "mel_bins": 32,
        "noise_floor": 0.0,
        "n_clips": 200,
        "held_out": 20,
    },
    "avp": {
        "alpha": 4,
        "beta": 8,
        "slow_base_channels": 32,
        "stage_depths": [1, 1, 1],
        "expansion": 1,
        "slow_temporal_kernels": [1, 3, 3],
        "fast_temporal_kernels": [3, 3, 3],
        "lateral_ratio": 2,
        "tau_init": 0.07,
        "lr": 1.0e-3,
        "steps": 200,
        "batch_size": 4,
    },
    "backbone": {
        "latent_len": 64,
        "latent_dim": 16,
        "cond_dim": 32,
        "hidden": 64,
        "heads": 4,
        "mm_blocks": 2,
        "sm_blocks": 2,
        "lr": 1.0e-3,
        "steps": 2000,
        "batch_size": 8,
        "grad_clip": 1.0,
    },
    "rpo": {
        "iterations": 5,
        "steps_per_iter": 1000,
        "candidates": 5,
        "lr": 5.0e-6,
        "weight_decay": 1.0e-4,
        "warmup_steps": 100,
        "schedule": "cosine",
        "grad_accum": 2,
        "grad_clip": 1.0,
        "beta_w": 2000.0,
        "batch_size": 4,
        "winner_mode": "ground_truth",
        "loss_mode": "avp_rpo",
        "finetune_mode": "freeze_top",
        "reward": "order_stat",
        "sampling_steps": 25,
    },
    "eval": {
        "sampling_steps": 25,
    },
}


def _positive(n):
    return n > 0


def _non_negative(n):
    return n >= 0


def _int_list(value):
    return (
        isinstance(value, list)
        and len(value) > 0
        and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    )


def _not_bool(value):
    return not isinstance(value, bool)


# Configuration checks
# Keys map to type (and contract) checks, mirroring the layout of DEFAULTS.
# A check can be a:
# - Type class (e.g. int), checked with isinstance
# - Function taking one argument and returning True or False
# - String interpreted as a regular expression (for string values)
# - List or tuple containing an arbitrary combination of the above.
#
# Note: The checks are evaluated in their specified order.
Real = numbers.Real
CONFIG_CHECKS = {
    "seed": (int, _not_bool, _non_negative),
    "data": {
        "clip_len": (Real, _not_bool, _positive),
        "n_classes": (int, _not_bool, _positive),
        "min_simultaneous": (int, _not_bool, _positive),
        "max_simultaneous": (int, _not_bool, _positive),
        "rate": (Real, _not_bool, _non_negative),
        "min_duration": (Real, _not_bool, _positive),
        "max_duration": (Real, _not_bool, _positive),
        "min_gap": (Real, _not_bool, _non_negative),
        "min_intensity": (Real, _not_bool, lambda x: 0 < x <= 1),
        "segments": (int, _not_bool, _positive),
        "frames": (int, _not_bool, _positive),
        "height": (int, _not_bool, _positive),
        "width": (int, _not_bool, _positive),
        "spec_bins": (int, _not_bool, _positive),
        "mel_bins": (int, _not_bool, _positive),
        "noise_floor": (Real, _not_bool, _non_negative),
        "n_clips": (int, _not_bool, _non_negative),
        "held_out": (int, _not_bool, _non_negative),
    },
    "avp": {
        "alpha": (int, _not_bool, lambda n: n >= 2),
        "beta": (int, _not_bool, lambda n: n >= 2),
        "slow_base_channels": (int, _not_bool, _positive),
        "stage_depths": (_int_list, lambda v: all(n > 0 for n in v)),
        "expansion": (int, _not_bool, _positive),
        "slow_temporal_kernels": (_int_list, lambda v: all(n % 2 == 1 for n in v)),
        "fast_temporal_kernels": (_int_list, lambda v: all(n % 2 == 1 for n in v)),
        "lateral_ratio": (int, _not_bool, _positive),
        "tau_init": (Real, _not_bool, lambda x: 0.01 <= x <= 1.0),
        "lr": (Real, _not_bool, _positive),
        "steps": (int, _not_bool, _non_negative),
        "batch_size": (int, _not_bool, _positive),
    },
    "backbone": {
        "latent_len": (int, _not_bool, _positive),
        "latent_dim": (int, _not_bool, _positive),
        "cond_dim": (int, _not_bool, _positive),
        "hidden": (int, _not_bool, _positive),
        "heads": (int, _not_bool, _positive),
        "mm_blocks": (int, _not_bool, _non_negative),
        "sm_blocks": (int, _not_bool, _positive),
        "lr": (Real, _not_bool, _positive),
        "steps": (int, _not_bool, _non_negative),
        "batch_size": (int, _not_bool, _positive),
        "grad_clip": (Real, _not_bool, _positive),
    },
    "rpo": {
        "iterations": (int, _not_bool, _positive),
        "steps_per_iter": (int, _not_bool, _positive),
        "candidates": (int, _not_bool, lambda n: n >= 1),
        "lr": (Real, _not_bool, _positive),
        "weight_decay": (Real, _not_bool, _non_negative),
        "warmup_steps": (int, _not_bool, _non_negative),
        "schedule": (str, lambda s: s in SCHEDULES),
        "grad_accum": (int, _not_bool, _positive),
        "grad_clip": (Real, _not_bool, _positive),
        "beta_w": (Real, _not_bool, _positive),
        "batch_size": (int, _not_bool, _positive),
        "winner_mode": (str, lambda s: s in WINNER_MODES),
        "loss_mode": (str, lambda s: s in LOSS_MODES),
        "finetune_mode": (str, lambda s: s in FINETUNE_MODES),
        "reward": (str, lambda s: s in REWARD_MODES),
        "sampling_steps": (int, _not_bool, _positive),
    },
    "eval": {
        "sampling_steps": (int, _not_bool, _positive),
    },
}

# Keys holding real values (integers in the YAML file are promoted to float)
FLOAT_KEYS = {
    ("data", "clip_len"),
    ("data", "rate"),
    ("data", "min_duration"),
    ("data", "max_duration"),
    ("data", "min_gap"),
    ("data", "min_intensity"),
    ("data", "noise_floor"),
    ("avp", "tau_init"),
    ("avp", "lr"),
    ("backbone", "lr"),
    ("backbone", "grad_clip"),
    ("rpo", "lr"),
    ("rpo", "weight_decay"),
    ("rpo", "grad_clip"),
    ("rpo", "beta_w"),
}
