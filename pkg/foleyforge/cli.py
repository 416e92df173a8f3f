import copy
import hashlib
import json
import os
import sys
import time

import docopt
import torch

from .avprpo import REWARDS, run_rpo, score_candidate, score_spectrogram
from .config import check_config, config_hash, derive_seed, dump_config, load_config
from .errors import (
    ConfigError,
    ContractViolation,
    DependencyError,
    IngestionError,
    NumericalAbort,
    check_shape,
)
from .evaluation import evaluate_model, make_report
from .genbackbone import (
    build_conditions,
    latent_to_spectrogram,
    load_backbone,
    sample,
    save_backbone,
    train_base,
)
from .settings import REWARD_MODES, RUN_MANIFEST_VERSION, STAGES
from .sfcavp import load_avp, pretrain_avp, retrieval_accuracy, save_avp
from .storage import file_hash, load_array, read_json, save_array, write_json
from .synthdata import build_dataset, load_dataset, load_manifest

FORGE_ERRORS = (
    ConfigError,
    ContractViolation,
    DependencyError,
    IngestionError,
    NumericalAbort,
)

# Segments per retrieval batch
RETRIEVAL_BATCH = 16


def stage_seed(cfg, stage):
    return derive_seed(cfg["seed"], stage)


def _dataset_config(cfg, data_dir):
    """Adopt the data section a dataset was generated with."""
    manifest = load_manifest(data_dir)
    cfg = copy.deepcopy(cfg)
    cfg["data"] = copy.deepcopy(manifest["config"])
    check_config(cfg)
    return cfg, manifest


def _write_log(path, log):
    write_json(path + ".log.json", log)


def _tree_hash(path):
    """Content hash of a file or of all files below a directory."""
    if os.path.isfile(path):
        return file_hash(path)
    digest = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            digest.update(os.path.relpath(full, path).encode("utf-8") + b"\0")
            digest.update(file_hash(full).encode("ascii"))
    return digest.hexdigest()


############
# Commands #
############
def synth_cmd(cfg, out_dir, progress=True):
    """Entry point for `synth` command."""
    manifest = build_dataset(cfg, cfg["data"]["n_clips"], out_dir, progress=progress)
    print(f"Wrote {len(manifest['clips'])} clips to '{out_dir}'.")
    return manifest


def pretrain_avp_cmd(cfg, data_dir, out, progress=True):
    """Entry point for `pretrain-avp` command."""
    cfg, _ = _dataset_config(cfg, data_dir)
    clips = load_dataset(data_dir, "train")
    model, log = pretrain_avp(
        clips, cfg, seed=stage_seed(cfg, "pretrain-avp"), progress=progress
    )
    save_avp(out, model, cfg)
    _write_log(out, log)

    held_out = load_dataset(data_dir, "held_out")
    if len(held_out) * cfg["data"]["segments"] >= RETRIEVAL_BATCH:
        accuracy = retrieval_accuracy(
            model, held_out, cfg["data"]["segments"], RETRIEVAL_BATCH
        )
        print(f"Held-out retrieval accuracy: {accuracy:.4f}")
    return model


def train_base_cmd(cfg, data_dir, avp_path, out, progress=True):
    """Entry point for `train-base` command."""
    cfg, _ = _dataset_config(cfg, data_dir)
    avp_model, _ = load_avp(avp_path)
    clips = load_dataset(data_dir, "train")
    model, log = train_base(
        clips, avp_model, cfg, seed=stage_seed(cfg, "train-base"), progress=progress
    )
    save_backbone(out, model, cfg, meta={"iteration": 0})
    _write_log(out, log)
    return model


def _find_clip(data_dir, clip_id):
    clips = [clip for clip in load_dataset(data_dir) if clip.clip_id == clip_id]
    if not clips:
        raise IngestionError(f"Clip '{clip_id}' not in dataset '{data_dir}'")
    return clips[0]


def _load_video(data, data_dir, video):
    """Video frames of a dataset clip, or of a directory with `video.npy`."""
    if not os.path.isdir(video):
        return video, _find_clip(data_dir, video).video
    frames = load_array(os.path.join(video, "video.npy"))
    check_shape(
        f"video of '{video}'",
        frames.shape,
        (data["frames"], data["height"], data["width"]),
    )
    return os.path.basename(os.path.normpath(video)), frames


def generate_cmd(cfg, model_path, avp_path, data_dir, video, n, steps, out_dir):
    """Entry point for `generate` command."""
    cfg, _ = _dataset_config(cfg, data_dir)
    model, _ = load_backbone(model_path)
    avp_model, _ = load_avp(avp_path)
    data = cfg["data"]
    clip_id, frames = _load_video(data, data_dir, video)

    cond = build_conditions(avp_model, frames, data["segments"], model.cfg.latent_len)
    seeds = [derive_seed(cfg["seed"], "generate", clip_id, j) for j in range(n)]
    latents = sample(model, cond, steps, seeds)
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    for j, (seed, latent) in enumerate(zip(seeds, latents)):
        base = os.path.join(out_dir, f"{clip_id}.{j}")
        latent = latent.numpy()
        save_array(base + ".latent.npy", latent)
        save_array(
            base + ".audio.npy",
            latent_to_spectrogram(latent, data["spec_bins"], data["mel_bins"]),
        )
        outputs.append({"index": j, "seed": seed, "latent": base + ".latent.npy"})
    print(json.dumps(outputs, indent=2))
    return outputs


def score_cmd(avp_path, data_dir, clip_id, latent_path=None, reward="order_stat"):
    """Entry point for `score` command."""
    if reward not in REWARD_MODES:
        raise ConfigError(f"Unknown reward: {reward}")
    avp_model, _ = load_avp(avp_path)
    cfg = {"data": load_manifest(data_dir)["config"]}
    clip = _find_clip(data_dir, clip_id)
    if latent_path is None:
        score = score_spectrogram(avp_model, clip.video, clip.audio, cfg, reward)
    else:
        latent = load_array(latent_path)
        score = score_candidate(avp_model, clip.video, latent, cfg, reward)
    result = {
        "clip_id": clip_id,
        "source": latent_path or "ground_truth",
        "reward": reward,
        "per_segment": score.per_segment,
        "s_fs": score.s_fs,
        "alignment": REWARDS["mean"](score.per_segment),
    }
    print(json.dumps(result, indent=2))
    return result


def rpo_cmd(cfg, base_path, avp_path, data_dir, out_dir, iterations, progress=True):
    """Entry point for `rpo` command."""
    cfg, _ = _dataset_config(cfg, data_dir)
    model, _ = load_backbone(base_path)
    avp_model, _ = load_avp(avp_path)
    _, reports = run_rpo(
        model,
        avp_model,
        load_dataset(data_dir, "train"),
        load_dataset(data_dir, "held_out"),
        cfg,
        out_dir,
        iterations=iterations,
        seed=stage_seed(cfg, "rpo"),
        progress=progress,
    )
    for report in reports:
        print(
            f"Iteration {report['iteration']}: mean s_fs {report['mean_s_fs']:.4f}, "
            f"alignment {report['alignment']:.4f}"
        )
    return reports


def eval_cmd(cfg, model_path, avp_path, data_dir, out):
    """Entry point for `eval` command."""
    cfg, manifest = _dataset_config(cfg, data_dir)
    model, _ = load_backbone(model_path)
    avp_model, _ = load_avp(avp_path)
    report = evaluate_model(model, avp_model, load_dataset(data_dir, "held_out"), cfg)
    report.update(
        model_hash=file_hash(model_path),
        avp_hash=file_hash(avp_path),
        dataset_hash=manifest["content_hash"],
        seed=cfg["seed"],
    )
    write_json(out, report)
    return report


def report_cmd(run_dir, data_dir=None):
    """Entry point for `report` command."""
    report = make_report(run_dir, data_dir)
    print(f"Wrote report for {len(report['iterations'])} iterations to '{run_dir}'.")
    return report


def serve_cmd(address, port, avp_path, data_dir, reward):  # pragma: no cover
    """Entry point for `serve` command.

    Run a local stand-alone scoring server.
    """
    from werkzeug.serving import run_simple

    from .api import scoring_api

    app = scoring_api(avp_path, data_dir, reward)
    run_simple(address, port, app, threaded=True)


############
# Pipeline #
############
def _run_paths(run_dir):
    return {
        "data": os.path.join(run_dir, "data"),
        "avp": os.path.join(run_dir, "avp.ckpt"),
        "base": os.path.join(run_dir, "base.ckpt"),
        "rpo": os.path.join(run_dir, "rpo"),
        "eval": os.path.join(run_dir, "eval.json"),
        "report": os.path.join(run_dir, "report.json"),
        "curves": os.path.join(run_dir, "curves.csv"),
    }


def _require(stage, *paths):
    for path in paths:
        if not os.path.exists(path):
            raise DependencyError(stage, path)


def _final_model(cfg, paths):
    final = os.path.join(paths["rpo"], f"iter_{cfg['rpo']['iterations']}.ckpt")
    return final if os.path.isfile(final) else paths["base"]


def _run_stage(stage, cfg, paths, progress):  # noqa: C901
    """Run one pipeline stage; returns its inputs and outputs."""
    data_manifest = os.path.join(paths["data"], "manifest.json")
    if stage == "synth":
        synth_cmd(cfg, paths["data"], progress)
        return {}, {"data": paths["data"]}
    _require(stage, data_manifest)
    if stage == "pretrain-avp":
        pretrain_avp_cmd(cfg, paths["data"], paths["avp"], progress)
        return {"data": paths["data"]}, {"avp": paths["avp"]}
    _require(stage, paths["avp"])
    if stage == "train-base":
        train_base_cmd(cfg, paths["data"], paths["avp"], paths["base"], progress)
        return {"data": paths["data"], "avp": paths["avp"]}, {"base": paths["base"]}
    if stage == "rpo":
        _require(stage, paths["base"])
        rpo_cmd(
            cfg,
            paths["base"],
            paths["avp"],
            paths["data"],
            paths["rpo"],
            None,
            progress,
        )
        inputs = {"data": paths["data"], "avp": paths["avp"], "base": paths["base"]}
        return inputs, {"rpo": paths["rpo"]}
    if stage == "eval":
        model = _final_model(cfg, paths)
        _require(stage, model)
        eval_cmd(cfg, model, paths["avp"], paths["data"], paths["eval"])
        inputs = {"data": paths["data"], "avp": paths["avp"], "model": model}
        return inputs, {"eval": paths["eval"]}
    if stage == "report":
        _require(stage, os.path.join(paths["rpo"], "iter_0.json"))
        make_report(os.path.dirname(paths["report"]), paths["data"])
        return (
            {"rpo": paths["rpo"]},
            {"report": paths["report"], "curves": paths["curves"]},
        )
    raise ConfigError(f"Unknown stage: {stage}")  # pragma: no cover


def manifest_hash(manifest):
    """Content hash of a run manifest, ignoring wall times."""
    content = {
        "format_version": manifest["format_version"],
        "config_hash": manifest["config_hash"],
        "stages": [
            {key: value for key, value in record.items() if key != "wall_time"}
            for record in manifest["stages"]
        ],
    }
    return config_hash(content)


def run_pipeline(
    config_path, stages=None, *, out_dir, seed=None, preset=None, progress=True
):
    """Run pipeline stages in dependency order and record them in `run.json`.

    Records of stages run earlier with the same configuration are kept.
    """
    cfg = load_config(config_path, seed=seed, preset=preset)
    stages = list(STAGES) if not stages else list(stages)
    unknown = [stage for stage in stages if stage not in STAGES]
    if unknown:
        raise ConfigError([f"Unknown stage: {stage}" for stage in unknown])

    os.makedirs(out_dir, exist_ok=True)
    paths = _run_paths(out_dir)
    manifest_path = os.path.join(out_dir, "run.json")
    cfg_hash = config_hash(cfg)
    records = {}
    if os.path.isfile(manifest_path):
        previous = read_json(manifest_path)
        if previous.get("config_hash") == cfg_hash:
            records = {record["stage"]: record for record in previous["stages"]}
    dump_config(cfg, os.path.join(out_dir, "config.yaml"))

    for stage in STAGES:
        if stage not in stages:
            continue
        started = time.monotonic()
        inputs, outputs = _run_stage(stage, cfg, paths, progress)
        records[stage] = {
            "stage": stage,
            "seed": stage_seed(cfg, stage),
            "inputs": {name: _tree_hash(path) for name, path in inputs.items()},
            "outputs": {
                name: os.path.relpath(path, out_dir) for name, path in outputs.items()
            },
            "output_hashes": {
                name: _tree_hash(path) for name, path in outputs.items()
            },
            "wall_time": time.monotonic() - started,
        }

    manifest = {
        "format_version": RUN_MANIFEST_VERSION,
        "config_hash": cfg_hash,
        "seed": cfg["seed"],
        "stages": [records[stage] for stage in STAGES if stage in records],
    }
    manifest["content_hash"] = manifest_hash(manifest)
    write_json(manifest_path, manifest)
    return manifest


def pipeline_cmd(config_path, stages, out_dir, seed, preset, progress=True):
    """Entry point for `pipeline` command."""
    manifest = run_pipeline(
        config_path,
        stages,
        out_dir=out_dir,
        seed=seed,
        preset=preset,
        progress=progress,
    )
    print(f"Run manifest content hash: {manifest['content_hash']}")
    return manifest


def _int(args, key, default=None):
    value = args.get(key)
    if value is None:
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"Invalid value for '{key}': integer expected ({value!r})")


def main():
    """Desk-scale video-to-audio generation with preference optimization.

    Usage:
      forge (--help | --version)
      forge synth [-c FILE] [--seed=N] [--preset=NAME] [-q] --out=DIR
                  [--n=N | --clips=N]
      forge pretrain-avp [-c FILE] [--seed=N] [-q] --data=DIR --out=FILE
      forge train-base [-c FILE] [--seed=N] [-q] --data=DIR --avp=FILE --out=FILE
      forge generate --model=FILE --avp=FILE --data=DIR --video=VIDEO --out=DIR
                     [-c FILE] [--seed=N] [--n=N] [--steps=N]
      forge score --avp=FILE --data=DIR --clip=CLIP [--latent=FILE]
                  [--reward=MODE]
      forge rpo --base=FILE --avp=FILE --data=DIR --out=DIR
                [-c FILE] [--seed=N] [-q] [--iters=N]
      forge eval --model=FILE --avp=FILE --data=DIR --out=FILE
                 [-c FILE] [--seed=N]
      forge report --run=DIR [--data=DIR]
      forge pipeline [-c FILE] [--seed=N] [--preset=NAME] [-q] --out=DIR
                     [STAGE...]
      forge serve --avp=FILE --data=DIR [--port=PORT] [--bind=ADDRESS]
                  [--reward=MODE]

    Options:
      -h, --help
            Show this help message and exit.
      --version
            Show version and exit.
      -c FILE, --config=FILE
            Read configuration from a YAML file (defaults otherwise).
      --seed=N
            Override the global seed.
      --preset=NAME
            Event simultaneity preset: single or multi.
      -q, --quiet
            Hide progress bars.
      --n=N
            Number of clips (synth, overrides data.n_clips) or of samples
            (generate, 1 by default).
      --clips=N
            Same as --n for synth.
      --video=VIDEO
            Clip id in the dataset, or a directory holding a `video.npy`
            array with the dataset's frame geometry.
      --steps=N
            Euler integration steps (defaults to eval.sampling_steps).
      --iters=N
            Number of preference optimization iterations
            (defaults to rpo.iterations).
      --reward=MODE
            Segment reward aggregation: order_stat or mean
            [default: order_stat].
      -p PORT, --port=PORT
            Specify alternate port [default: 5000].
      -b ADDRESS, --bind=ADDRESS
            Specify alternate bind address [default: localhost].

    Stages: synth, pretrain-avp, train-base, rpo, eval, report.
    Exit codes: 0 success, 1 invalid input, 2 configuration error,
    3 missing stage input, 4 numerical abort.
    """
    from . import __version__

    args = docopt.docopt(main.__doc__, version=f"foleyforge {__version__}")
    torch.use_deterministic_algorithms(True)
    progress = not args["--quiet"]

    try:
        seed = _int(args, "--seed")
        if args["pipeline"]:
            pipeline_cmd(
                args["--config"],
                args["STAGE"],
                args["--out"],
                seed,
                args["--preset"],
                progress,
            )
        elif args["report"]:
            report_cmd(args["--run"], args["--data"])
        elif args["score"]:
            score_cmd(
                args["--avp"],
                args["--data"],
                args["--clip"],
                args["--latent"],
                args["--reward"],
            )
        elif args["serve"]:  # pragma: no cover
            serve_cmd(
                args["--bind"],
                _int(args, "--port"),
                args["--avp"],
                args["--data"],
                args["--reward"],
            )
        else:
            cfg = load_config(args["--config"], seed=seed, preset=args["--preset"])
            if args["synth"]:
                clips = _int(args, "--n", _int(args, "--clips"))
                if clips is not None:
                    cfg["data"]["n_clips"] = clips
                    check_config(cfg)
                synth_cmd(cfg, args["--out"], progress)
            elif args["pretrain-avp"]:
                pretrain_avp_cmd(cfg, args["--data"], args["--out"], progress)
            elif args["train-base"]:
                train_base_cmd(
                    cfg, args["--data"], args["--avp"], args["--out"], progress
                )
            elif args["generate"]:
                generate_cmd(
                    cfg,
                    args["--model"],
                    args["--avp"],
                    args["--data"],
                    args["--video"],
                    _int(args, "--n", 1),
                    _int(args, "--steps", cfg["eval"]["sampling_steps"]),
                    args["--out"],
                )
            elif args["rpo"]:
                rpo_cmd(
                    cfg,
                    args["--base"],
                    args["--avp"],
                    args["--data"],
                    args["--out"],
                    _int(args, "--iters"),
                    progress,
                )
            elif args["eval"]:
                eval_cmd(
                    cfg, args["--model"], args["--avp"], args["--data"], args["--out"]
                )
    except ConfigError as e:
        print("ERROR: Invalid configuration:", file=sys.stderr)
        for error in e.errors:
            print(f"  - {error}", file=sys.stderr)
        sys.exit(e.exit_code)
    except FORGE_ERRORS as e:
        print(f"ERROR: {e.description}", file=sys.stderr)
        sys.exit(e.exit_code)
