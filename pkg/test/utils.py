import contextlib
import copy
import io
import sys

import yaml


@contextlib.contextmanager
def capture(command, *args, **kwargs):
    out, sys.stdout = sys.stdout, io.StringIO()
    err, sys.stderr = sys.stderr, io.StringIO()
    commandException = None
    contextException = None
    ret = None
    try:
        try:
            ret = command(*args, **kwargs)
        except BaseException as e:
            # Catch any exception, store it for now, and first capture
            # all the output, before re-raising the exception.
            commandException = e
        sys.stdout.seek(0)
        sys.stderr.seek(0)
        out_data = sys.stdout.read()
        err_data = sys.stderr.read()
        sys.stdout = out
        sys.stderr = err
        try:
            yield out_data, err_data, ret
        except BaseException as e:
            # Catch any exception thrown from within the context manager
            # (often unittest assertions), and re-raise it later unmodified.
            contextException = e
    finally:
        # Do not ignore exceptions from within the context manager,
        # in case of a deliberately failing command.
        # Thus, prioritize contextException over commandException
        if contextException:
            raise contextException
        elif commandException:
            raise commandException


# Smallest geometry satisfying all configuration checks:
# 4 segments of 8 frames (16 x 16) and 32 spectrogram bins (16 mel bins).
TINY = {
    "seed": 0,
    "data": {
        "clip_len": 4.0,
        "n_classes": 4,
        "min_simultaneous": 2,
        "max_simultaneous": 3,
        "max_duration": 1.0,
        "segments": 4,
        "frames": 32,
        "height": 16,
        "width": 16,
        "spec_bins": 128,
        "mel_bins": 16,
        "n_clips": 6,
        "held_out": 2,
    },
    "avp": {
        "slow_base_channels": 16,
        "steps": 2,
        "batch_size": 2,
    },
    "backbone": {
        "latent_len": 16,
        "latent_dim": 16,
        "cond_dim": 16,
        "hidden": 32,
        "heads": 4,
        "steps": 2,
        "batch_size": 2,
    },
    "rpo": {
        "iterations": 1,
        "steps_per_iter": 2,
        "candidates": 3,
        "lr": 1.0e-4,
        "warmup_steps": 1,
        "batch_size": 2,
        "sampling_steps": 2,
    },
    "eval": {
        "sampling_steps": 2,
    },
}


def _update(tree, overrides):
    for key, value in overrides.items():
        if isinstance(value, dict):
            _update(tree.setdefault(key, {}), value)
        else:
            tree[key] = value
    return tree


def tiny_config(**overrides):
    """Validated configuration with the tiny test geometry."""
    from foleyforge.config import default_config

    return default_config(**_update(copy.deepcopy(TINY), overrides))


def write_tiny_config(path, **overrides):
    """Store the tiny configuration (plus overrides) as YAML file."""
    with open(path, "w") as f:
        yaml.safe_dump(_update(copy.deepcopy(TINY), overrides), f)
    return path


def tiny_clips(cfg, n=4):
    from foleyforge.synthdata import make_clip

    return [make_clip(cfg["data"], seed, f"clip-{seed:05d}") for seed in range(n)]


def tiny_avp(cfg, seed=0):
    """Untrained, frozen audio-visual encoder."""
    from foleyforge.sfcavp import build_model, slowfast_config

    model = build_model(slowfast_config(cfg), seed)
    model.eval()
    model.requires_grad_(False)
    return model


def tiny_backbone(cfg, avp_model, seed=0):
    from foleyforge.genbackbone import backbone_config, build_velocity_field

    return build_velocity_field(backbone_config(cfg, avp_model.embed_dim), seed)
