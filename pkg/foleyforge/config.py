import copy
import hashlib
import json
import re

import yaml

from .errors import ConfigError, IngestionError
from .settings import CONFIG_CHECKS, DEFAULTS, FLOAT_KEYS, PRESETS


def load_config(path=None, *, seed=None, preset=None):
    """Load, merge and validate a configuration file.

    Values from the file override `DEFAULTS`. A `seed` or `preset` given on
    the command line overrides the file. Returns the merged configuration
    tree (a plain dict).
    """
    data = {}
    if path is not None:
        try:
            with open(path) as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise IngestionError(f"Cannot read config file '{path}': {e.strerror}")
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse config file '{path}': {e}")
        if not isinstance(data, dict):
            raise ConfigError("Config file must contain a mapping at the top level")

    errors = []
    cfg = _merge(DEFAULTS, data, (), errors)
    if errors:
        raise ConfigError(errors)

    if seed is not None:
        cfg["seed"] = seed
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset: {preset}")
        cfg["data"]["min_simultaneous"], cfg["data"]["max_simultaneous"] = PRESETS[
            preset
        ]

    check_config(cfg)
    return cfg


def default_config(**overrides):
    """Return a validated copy of the defaults with section overrides.

    >>> cfg = default_config(data={"n_clips": 4})
    >>> cfg["data"]["n_clips"], cfg["data"]["segments"]
    (4, 8)
    """
    errors = []
    cfg = _merge(DEFAULTS, overrides, (), errors)
    if errors:
        raise ConfigError(errors)
    check_config(cfg)
    return cfg


def _merge(defaults, data, path, errors):
    merged = copy.deepcopy(defaults)
    for key, value in data.items():
        full = path + (key,)
        if key not in defaults:
            errors.append(f"Unknown key: {'.'.join(map(str, full))}")
        elif isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                errors.append(f"Section expected: {'.'.join(full)}")
            else:
                merged[key] = _merge(defaults[key], value, full, errors)
        else:
            if full in FLOAT_KEYS and isinstance(value, int):
                if not isinstance(value, bool):
                    value = float(value)
            merged[key] = copy.deepcopy(value)
    return merged


def check_config(cfg):
    """Validate a merged configuration tree.

    Enforce the type and contract checks of `CONFIG_CHECKS` and the
    cross-field geometry constraints. All problems are collected and
    raised together.
    """
    errors = []
    _check_tree(cfg, CONFIG_CHECKS, (), errors)
    if not errors:
        errors.extend(_geometry_errors(cfg))
    if errors:
        raise ConfigError(errors)


def _check_tree(values, checks, path, errors):
    for key, check in checks.items():
        full = path + (key,)
        if key not in values:
            errors.append(f"Missing key: {'.'.join(full)}")
        elif isinstance(check, dict):
            _check_tree(values[key], check, full, errors)
        else:
            message = _check_value(".".join(full), values[key], check)
            if message:
                errors.append(message)


def _check_value(key, val, checks):
    if not isinstance(checks, (list, tuple)):
        checks = (checks,)
    for check in checks:
        if isinstance(check, type):
            if not isinstance(val, check):
                return (
                    f"Invalid value for '{key}': Type error "
                    f"(expected {check.__name__}, got {type(val).__name__})."
                )
        elif callable(check):
            if not check(val):
                return f"Invalid value for '{key}': Check failed (value: {val!r})."
        elif isinstance(check, str):
            if not isinstance(val, str) or re.match(check, val) is None:
                return (
                    f"Invalid value for '{key}': Regex check failed "
                    f"(value: {val!r}, regex: '{check}')."
                )
        else:
            raise NotImplementedError()  # pragma: no cover
    return None


def _geometry_errors(cfg):  # noqa: C901
    data, avp, bb = cfg["data"], cfg["avp"], cfg["backbone"]
    errors = []
    S = data["segments"]

    if data["min_simultaneous"] > data["max_simultaneous"]:
        errors.append(
            "data.min_simultaneous > data.max_simultaneous "
            f"({data['min_simultaneous']} > {data['max_simultaneous']})"
        )
    if data["n_classes"] < data["max_simultaneous"]:
        errors.append("data.n_classes must be >= data.max_simultaneous")
    if data["min_duration"] > data["max_duration"]:
        errors.append("data.min_duration > data.max_duration")
    if data["clip_len"] < 2 * data["max_duration"]:
        errors.append("data.clip_len must be >= 2 * data.max_duration")
    if data["mel_bins"] < data["n_classes"]:
        errors.append("data.mel_bins must be >= data.n_classes")
    if data["frames"] % S:
        errors.append(f"data.frames ({data['frames']}) not divisible by segments {S}")
    if data["spec_bins"] % S:
        errors.append(
            f"data.spec_bins ({data['spec_bins']}) not divisible by segments {S}"
        )
    if data["spec_bins"] % data["frames"]:
        errors.append("data.spec_bins must be a multiple of data.frames")
    if data["frames"] % S == 0 and (data["frames"] // S) % avp["alpha"]:
        errors.append("segment frame count not divisible by avp.alpha")
    if data["spec_bins"] % S == 0 and (data["spec_bins"] // S) % avp["alpha"]:
        errors.append("segment spectrogram bin count not divisible by avp.alpha")
    if data["held_out"] > data["n_clips"]:
        errors.append("data.held_out must be <= data.n_clips")

    n_stages = len(avp["stage_depths"])
    for key in ("slow_temporal_kernels", "fast_temporal_kernels"):
        if len(avp[key]) != n_stages:
            errors.append(f"avp.{key} needs one entry per stage ({n_stages})")
    if avp["slow_base_channels"] % avp["beta"]:
        errors.append("avp.slow_base_channels not divisible by avp.beta")

    if data["spec_bins"] % bb["latent_len"]:
        errors.append("data.spec_bins not divisible by backbone.latent_len")
    else:
        patch = data["spec_bins"] // bb["latent_len"] * data["mel_bins"]
        if patch % bb["latent_dim"] or bb["latent_dim"] > patch:
            errors.append(
                f"latent patch size {patch} not divisible by backbone.latent_dim"
            )
    if bb["hidden"] % bb["heads"]:
        errors.append("backbone.hidden not divisible by backbone.heads")
    if (bb["hidden"] // bb["heads"]) % 2:
        errors.append("backbone attention head width must be even")
    return errors


def config_hash(cfg):
    """SHA-256 of the canonical JSON representation."""
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def derive_seed(seed, *names):
    """Split a seed into an independent stream per name.

    >>> derive_seed(0, "synth") == derive_seed(0, "synth")
    True
    >>> derive_seed(0, "synth") == derive_seed(0, "pretrain-avp")
    False
    """
    key = "/".join([str(seed)] + [str(name) for name in names])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def dump_config(cfg, path):
    """Write a configuration tree as YAML."""
    from .storage import atomic_write

    with atomic_write(path) as f:
        yaml.safe_dump(cfg, f, sort_keys=True, default_flow_style=False)
