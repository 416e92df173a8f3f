import csv
import glob
import io
import os
import re
import sys

import numpy as np
import torch

from .avprpo import mean_score, score_candidate
from .config import derive_seed
from .errors import ContractViolation, IngestionError
from .genbackbone import build_conditions, latent_to_spectrogram, sample
from .sfcavp import embed_segments, segment_similarities
from .storage import atomic_write, read_json, write_json
from .synthdata import class_band, load_manifest

# Diagonal jitter for singular covariance matrices
COVARIANCE_JITTER = 1e-6

# Onset detection threshold relative to the weakest event of a class
ONSET_THRESHOLD = 0.5

CURVE_FIELDS = ("iteration", "mean_s_fs", "alignment", "fed", "onset_err")

# All metrics are proxies computed with the audio-visual encoder and the
# rendered event tracks.
METRIC_KIND = "proxy"


def alignment_score(avp_model, video, spectrogram, segments):
    """Plain mean of the segment cosine similarities."""
    return mean_score(segment_similarities(avp_model, video, spectrogram, segments))


def embed_audio(avp_model, spectrogram, segments):
    """Mean of the per-segment audio embeddings of a spectrogram."""
    embs = embed_segments(avp_model, spectrogram, "audio", segments)
    return embs.double().mean(dim=0).numpy()


#####################
# Frechet distances #
#####################
def _moments(embeddings):
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractViolation(f"Embedding set of shape (N, D) expected: {x.shape}")
    n, dim = x.shape
    mu = x.mean(axis=0)
    if n < dim + 1:
        cov = np.diag(x.var(axis=0, ddof=1 if n > 1 else 0))
    else:
        cov = np.cov(x, rowvar=False)
    return mu, cov


def _sqrtm_psd(matrix):
    values, vectors = np.linalg.eigh((matrix + matrix.T) / 2)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def _is_singular(cov):
    values = np.linalg.eigvalsh(cov)
    return values.min() <= 1e-12 * max(1.0, abs(values.max()))


def frechet_distance(mu_a, cov_a, mu_b, cov_b):
    """Frechet distance between two Gaussians.

    Tr((cov_a cov_b)^1/2) is computed as the trace of the square root of the
    symmetric matrix sqrt(cov_a) cov_b sqrt(cov_a).
    """
    if _is_singular(cov_a) or _is_singular(cov_b):
        print(
            f"WARNING: Singular covariance, adding {COVARIANCE_JITTER} to the "
            "diagonal.",
            file=sys.stderr,
        )
        eye = np.eye(cov_a.shape[0])
        cov_a = cov_a + COVARIANCE_JITTER * eye
        cov_b = cov_b + COVARIANCE_JITTER * eye
    root_a = _sqrtm_psd(cov_a)
    product = root_a @ cov_b @ root_a
    values = np.linalg.eigvalsh((product + product.T) / 2)
    trace_root = np.sqrt(np.clip(values, 0.0, None)).sum()
    diff = mu_a - mu_b
    distance = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * trace_root
    return float(max(distance, 0.0))


def frechet_embedding_distance(set_a, set_b, avp_model=None, segments=None):
    """Frechet distance between two sets.

    The sets are either embedding arrays (N x D) or, with an encoder, lists
    of spectrograms that get embedded first.
    """
    if avp_model is not None:
        set_a = [embed_audio(avp_model, spec, segments) for spec in set_a]
        set_b = [embed_audio(avp_model, spec, segments) for spec in set_b]
    return frechet_distance(*_moments(set_a), *_moments(set_b))


##################
# Onset accuracy #
##################
def detect_onsets(energy, threshold):
    """Indices where the energy crosses the threshold from below."""
    above = np.asarray(energy) >= threshold
    rising = above & ~np.concatenate([[False], above[:-1]])
    return np.flatnonzero(rising)


def onset_sync_error(spectrogram, track, segments):
    """Mean onset misalignment in seconds.

    Onsets are detected per class band and matched greedily (closest first)
    to the track onsets of that class. Every unmatched track onset counts
    one segment duration.
    """
    if not track.events:
        raise ContractViolation("Onset error of an empty track")
    spectrogram = np.asarray(spectrogram, dtype=np.float64)
    spec_bins, mel_bins = spectrogram.shape
    bin_len = track.clip_len / spec_bins
    penalty = track.clip_len / segments

    errors = []
    for class_id in sorted({event.class_id for event in track.events}):
        events = [e for e in track.events if e.class_id == class_id]
        low, high = class_band(class_id, track.n_classes, mel_bins)
        energy = spectrogram[:, low:high].mean(axis=1)
        threshold = ONSET_THRESHOLD * min(e.intensity for e in events)
        detected = detect_onsets(energy, threshold) * bin_len

        candidates = sorted(
            (abs(event.onset - onset), i, j)
            for i, event in enumerate(events)
            for j, onset in enumerate(detected)
        )
        matched, used = {}, set()
        for delta, i, j in candidates:
            if i not in matched and j not in used:
                matched[i] = delta
                used.add(j)
        errors.extend(matched.get(i, penalty) for i in range(len(events)))
    return float(np.mean(errors))


##############
# Evaluation #
##############
def evaluate_model(model, avp_model, clips, cfg):
    """Generate one sample per clip and compute the proxy metrics.

    The sample seed is derived from the clip id.
    """
    if not clips:
        raise ContractViolation("No clips to evaluate")
    data = cfg["data"]
    segments = data["segments"]
    n_steps = cfg["eval"]["sampling_steps"]

    records, generated, reference = [], [], []
    for clip in clips:
        cond = build_conditions(
            avp_model, clip.video, segments, cfg["backbone"]["latent_len"]
        )
        seed = derive_seed(cfg["seed"], "eval", clip.clip_id)
        latent = sample(model, cond, n_steps, [seed])[0]
        score = score_candidate(avp_model, clip.video, latent, cfg)
        spectrogram = latent_to_spectrogram(
            latent.numpy(), data["spec_bins"], data["mel_bins"]
        )
        records.append(
            {
                "clip_id": clip.clip_id,
                "seed": seed,
                "s_fs": score.s_fs,
                "alignment": mean_score(score.per_segment),
                "onset_err": onset_sync_error(spectrogram, clip.track, segments),
            }
        )
        generated.append(embed_audio(avp_model, spectrogram, segments))
        reference.append(embed_audio(avp_model, clip.audio, segments))

    s_fs = [record["s_fs"] for record in records]
    return {
        "metric_kind": METRIC_KIND,
        "n_clips": len(records),
        "clips": records,
        "mean_s_fs": float(np.mean(s_fs)),
        "min_s_fs": float(np.min(s_fs)),
        "max_s_fs": float(np.max(s_fs)),
        "alignment": float(np.mean([r["alignment"] for r in records])),
        "onset_err": float(np.mean([r["onset_err"] for r in records])),
        "fed": frechet_embedding_distance(generated, reference),
    }


def ground_truth_alignment(avp_model, clips, cfg):
    """Alignment of each clip's own audio against audio of another clip."""
    if len(clips) < 2:
        raise ContractViolation("At least two clips needed")
    segments = cfg["data"]["segments"]
    generator = torch.Generator().manual_seed(derive_seed(cfg["seed"], "mismatch"))
    wins = []
    for i, clip in enumerate(clips):
        offset = 1 + int(torch.randint(len(clips) - 1, (1,), generator=generator))
        other = clips[(i + offset) % len(clips)]
        own = alignment_score(avp_model, clip.video, clip.audio, segments)
        foreign = alignment_score(avp_model, clip.video, other.audio, segments)
        wins.append(own > foreign)
    return sum(wins) / len(wins)


###########
# Reports #
###########
_ITERATION_FILE = re.compile(r"iter_(\d+)\.json$")


def _iteration_dir(run_dir):
    rpo_dir = os.path.join(run_dir, "rpo")
    return rpo_dir if os.path.isdir(rpo_dir) else run_dir


def load_iteration_reports(run_dir):
    """Iteration reports 0..N of a run directory (or its `rpo` directory)."""
    iter_dir = _iteration_dir(run_dir)
    reports = {}
    for path in glob.glob(os.path.join(iter_dir, "iter_*.json")):
        match = _ITERATION_FILE.search(os.path.basename(path))
        if match:
            reports[int(match.group(1))] = read_json(path)
    if not reports:
        raise IngestionError(f"No iteration reports in '{iter_dir}'")
    missing = sorted(set(range(max(reports) + 1)) - set(reports))
    if missing:
        raise IngestionError(
            f"Missing iteration reports in '{iter_dir}': "
            + ", ".join(f"iter_{k}.json" for k in missing)
        )
    return [reports[k] for k in sorted(reports)]


def _check_clips(reports, data_dir):
    expected = [
        entry["clip_id"]
        for entry in load_manifest(data_dir)["clips"]
        if entry["split"] == "held_out"
    ]
    for report in reports:
        present = {record["clip_id"] for record in report["clips"]}
        absent = [clip_id for clip_id in expected if clip_id not in present]
        if absent:
            raise IngestionError(
                f"Iteration {report['iteration']} misses held-out clips: "
                + ", ".join(absent)
            )


def curves_csv(reports):
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=CURVE_FIELDS, lineterminator="\n")
    writer.writeheader()
    for report in reports:
        writer.writerow(
            {
                key: report[key] if key == "iteration" else repr(float(report[key]))
                for key in CURVE_FIELDS
            }
        )
    return out.getvalue()


def make_report(run_dir, data_dir=None):
    """Write `report.json` and `curves.csv` into `run_dir`.

    When a dataset is available (`data_dir`, or `data` inside the run
    directory) every iteration must cover all held-out clips.
    """
    reports = load_iteration_reports(run_dir)
    if data_dir is None and os.path.isdir(os.path.join(run_dir, "data")):
        data_dir = os.path.join(run_dir, "data")
    if data_dir is not None:
        _check_clips(reports, data_dir)

    report = {
        "metric_kind": METRIC_KIND,
        "iterations": [
            {key: report[key] for key in CURVE_FIELDS} for report in reports
        ],
        "final": reports[-1],
    }
    write_json(os.path.join(run_dir, "report.json"), report)
    try:
        with atomic_write(os.path.join(run_dir, "curves.csv")) as f:
            f.write(curves_csv(reports))
    except OSError as e:
        raise IngestionError(f"Cannot write curves to '{run_dir}': {e.strerror}")
    return report
