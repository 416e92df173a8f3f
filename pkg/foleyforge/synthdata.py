import collections
import hashlib
import json
import math
import os

import numpy as np
from tqdm import tqdm

from .config import config_hash, derive_seed
from .errors import ConfigError, ContractViolation, IngestionError
from .settings import MANIFEST_VERSION, PRESETS
from .storage import load_array, read_json, save_array, write_json

#########
# Types #
#########
Event = collections.namedtuple("Event", ("onset", "duration", "class_id", "intensity"))
EventTrack = collections.namedtuple("EventTrack", ("events", "clip_len", "n_classes"))
SyntheticClip = collections.namedtuple(
    "SyntheticClip", ("clip_id", "seed", "track", "video", "audio")
)
SegmentPair = collections.namedtuple(
    "SegmentPair", ("clip_id", "index", "video", "audio")
)

# Tolerance when mapping event boundaries onto frame and bin grids
_GRID_EPS = 1e-9


def check_track(track):
    """Validate the invariants of an event track."""
    previous = -math.inf
    for event in track.events:
        onset, duration, class_id, intensity = event
        if onset < 0 or onset + duration > track.clip_len + _GRID_EPS:
            raise ContractViolation(f"Event outside of clip: {event}")
        if duration <= 0:
            raise ContractViolation(f"Event with non-positive duration: {event}")
        if not 0 < intensity <= 1:
            raise ContractViolation(f"Event intensity out of range: {event}")
        if not 0 <= class_id < track.n_classes:
            raise ContractViolation(f"Event class out of range: {event}")
        if onset < previous:
            raise ContractViolation("Events are not sorted by onset")
        previous = onset


def max_simultaneous(track):
    """Peak number of concurrently active events (half-open intervals)."""
    boundaries = []
    for event in track.events:
        boundaries.append((event.onset, 1))
        boundaries.append((event.onset + event.duration, -1))
    # Ends sort before starts at the same instant
    active = peak = 0
    for _, delta in sorted(boundaries):
        active += delta
        peak = max(peak, active)
    return peak


################
# Event tracks #
################
def _check_track_config(cfg):
    errors = []
    if cfg["min_simultaneous"] > cfg["max_simultaneous"]:
        errors.append(
            "min_simultaneous > max_simultaneous "
            f"({cfg['min_simultaneous']} > {cfg['max_simultaneous']})"
        )
    if cfg["min_simultaneous"] < 1:
        errors.append("min_simultaneous must be >= 1")
    if cfg["n_classes"] < cfg["max_simultaneous"]:
        errors.append("n_classes must be >= max_simultaneous")
    if cfg["clip_len"] < 2 * cfg["max_duration"]:
        errors.append("clip_len must be >= 2 * max_duration")
    if cfg["min_duration"] > cfg["max_duration"]:
        errors.append("min_duration > max_duration")
    if errors:
        raise ConfigError(errors)


def gen_event_track(seed, cfg):
    """Generate a random multi-event track.

    Events live on the video frame grid. The first `min_simultaneous` events
    share a common instant; further events (Poisson distributed count with
    `rate` events per second) are accepted as long as no more than
    `max_simultaneous` events overlap and same-class events keep `min_gap`.
    """
    _check_track_config(cfg)
    rng = np.random.default_rng(seed)

    frames = cfg["frames"]
    frame_len = cfg["clip_len"] / frames
    min_dur = max(1, round(cfg["min_duration"] / frame_len))
    max_dur = max(min_dur, round(cfg["max_duration"] / frame_len))
    gap = math.ceil(cfg["min_gap"] / frame_len - _GRID_EPS)
    n_classes = cfg["n_classes"]
    lo, hi = cfg["min_simultaneous"], cfg["max_simultaneous"]

    # (onset, duration, class, intensity) in frame units
    events = []
    centre = int(rng.integers(max_dur, frames - max_dur + 1))
    for class_id in rng.choice(n_classes, size=lo, replace=False):
        duration = int(rng.integers(min_dur, max_dur + 1))
        onset = int(rng.integers(max(0, centre - duration + 1), centre + 1))
        intensity = float(rng.uniform(cfg["min_intensity"], 1.0))
        events.append((onset, duration, int(class_id), intensity))

    wanted = max(0, int(rng.poisson(cfg["rate"] * cfg["clip_len"])) - lo)
    tries = 20 * wanted
    while wanted > 0 and tries > 0:
        tries -= 1
        duration = int(rng.integers(min_dur, max_dur + 1))
        onset = int(rng.integers(0, frames - duration + 1))
        class_id = int(rng.integers(0, n_classes))
        intensity = float(rng.uniform(cfg["min_intensity"], 1.0))
        candidate = (onset, duration, class_id, intensity)
        if _fits(events, candidate, frames, hi, gap):
            events.append(candidate)
            wanted -= 1

    events.sort(key=lambda e: (e[0], e[2]))
    return EventTrack(
        events=tuple(
            Event(onset * frame_len, duration * frame_len, class_id, intensity)
            for onset, duration, class_id, intensity in events
        ),
        clip_len=float(cfg["clip_len"]),
        n_classes=n_classes,
    )


def _fits(events, candidate, frames, max_simul, gap):
    onset, duration, class_id, _ = candidate
    for other_onset, other_duration, other_class, _ in events:
        if other_class == class_id:
            if not (
                onset >= other_onset + other_duration + gap
                or onset + duration + gap <= other_onset
            ):
                return False
    counts = np.zeros(frames, dtype=np.int64)
    for other_onset, other_duration, _, _ in events + [candidate]:
        counts[other_onset : other_onset + other_duration] += 1
    return counts.max() <= max_simul


#############
# Rendering #
#############
def class_location(class_id, n_classes, height, width):
    """Blob centre (row, column) and width of a class in the video frame."""
    grid = math.ceil(math.sqrt(n_classes))
    row, col = divmod(class_id, grid)
    return (
        (row + 0.5) * height / grid,
        (col + 0.5) * width / grid,
        height / (3 * grid),
    )


def class_band(class_id, n_classes, mel_bins):
    """Half-open range of spectrogram rows energized by a class."""
    width = mel_bins // n_classes
    return class_id * width, (class_id + 1) * width


def active_range(onset, duration, clip_len, n_bins):
    """Half-open index range of bins overlapping [onset, onset + duration)."""
    bin_len = clip_len / n_bins
    first = math.floor(onset / bin_len + _GRID_EPS)
    last = math.ceil((onset + duration) / bin_len - _GRID_EPS)
    return max(0, first), min(n_bins, last)


def render_clip(track, cfg, *, clip_id="", seed=0):
    """Render the video frames and the spectrogram of an event track."""
    check_track(track)
    frames, height, width = cfg["frames"], cfg["height"], cfg["width"]
    spec_bins, mel_bins = cfg["spec_bins"], cfg["mel_bins"]

    video = np.zeros((frames, height, width), dtype=np.float64)
    audio = np.zeros((spec_bins, mel_bins), dtype=np.float64)
    rows = np.arange(height)[:, None] + 0.5
    cols = np.arange(width)[None, :] + 0.5

    for event in track.events:
        cy, cx, sigma = class_location(event.class_id, track.n_classes, height, width)
        blob = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * sigma**2))
        start, stop = active_range(event.onset, event.duration, track.clip_len, frames)
        video[start:stop] += event.intensity * blob

        low, high = class_band(event.class_id, track.n_classes, mel_bins)
        start, stop = active_range(
            event.onset, event.duration, track.clip_len, spec_bins
        )
        audio[start:stop, low:high] += event.intensity

    if cfg["noise_floor"] > 0:
        rng = np.random.default_rng((seed, 1))
        video += rng.normal(0.0, cfg["noise_floor"], size=video.shape)
        audio = np.maximum(
            audio + rng.normal(0.0, cfg["noise_floor"], size=audio.shape), 0.0
        )

    return SyntheticClip(
        clip_id=clip_id,
        seed=seed,
        track=track,
        video=video.astype(np.float32),
        audio=audio.astype(np.float32),
    )


def make_clip(cfg, seed, clip_id):
    return render_clip(gen_event_track(seed, cfg), cfg, clip_id=clip_id, seed=seed)


def split_segments(clip, segments):
    """Split a clip into equally long, time-aligned video and audio segments."""
    frames, spec_bins = clip.video.shape[0], clip.audio.shape[0]
    if segments < 1 or frames % segments or spec_bins % segments:
        raise ConfigError(
            f"Cannot split {frames} frames and {spec_bins} spectrogram bins "
            f"into {segments} segments"
        )
    return [
        SegmentPair(clip.clip_id, index, video, audio)
        for index, (video, audio) in enumerate(
            zip(
                np.split(clip.video, segments, axis=0),
                np.split(clip.audio, segments, axis=0),
            )
        )
    ]


###########
# Dataset #
###########
def build_dataset(cfg, n_clips, out_dir, *, progress=False):
    """Generate `n_clips` clips and store them in `out_dir`.

    The last `held_out` clips form the held-out split. Returns the manifest.
    """
    data_cfg = cfg["data"]
    clips_dir = os.path.join(out_dir, "clips")
    try:
        os.makedirs(clips_dir, exist_ok=True)
    except OSError as e:
        raise IngestionError(f"Cannot create '{clips_dir}': {e.strerror}")

    held_out = min(data_cfg["held_out"], n_clips)
    digest = hashlib.sha256(config_hash(data_cfg).encode("ascii"))
    entries = []
    for index in tqdm(range(n_clips), desc="synth", disable=not progress):
        seed = derive_seed(cfg["seed"], "synth", index)
        clip_id = f"clip-{index:05d}"
        clip = make_clip(data_cfg, seed, clip_id)
        save_array(os.path.join(clips_dir, clip_id + ".video.npy"), clip.video)
        save_array(os.path.join(clips_dir, clip_id + ".audio.npy"), clip.audio)

        track = track_to_json(clip.track)
        digest.update(f"{clip_id}:{seed}:".encode("ascii"))
        digest.update(json.dumps(track, sort_keys=True).encode("utf-8"))
        digest.update(clip.video.astype("<f4").tobytes())
        digest.update(clip.audio.astype("<f4").tobytes())
        entries.append(
            {
                "clip_id": clip_id,
                "seed": seed,
                "split": "held_out" if index >= n_clips - held_out else "train",
                "track": track,
            }
        )

    simultaneity = (data_cfg["min_simultaneous"], data_cfg["max_simultaneous"])
    presets = [name for name, value in PRESETS.items() if value == simultaneity]
    manifest = {
        "format_version": MANIFEST_VERSION,
        "preset": presets[0] if presets else None,
        "config": data_cfg,
        "config_hash": config_hash(data_cfg),
        "clips": entries,
        "content_hash": digest.hexdigest(),
    }
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def load_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.isfile(path):
        raise IngestionError(f"Dataset manifest does not exist: {path}")
    manifest = read_json(path)
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise IngestionError(f"Unsupported manifest version in '{path}'")
    return manifest


def load_dataset(data_dir, split=None):
    """Load the clips of a dataset, optionally restricted to one split."""
    manifest = load_manifest(data_dir)
    clips = []
    for entry in manifest["clips"]:
        if split is not None and entry["split"] != split:
            continue
        base = os.path.join(data_dir, "clips", entry["clip_id"])
        clips.append(
            SyntheticClip(
                clip_id=entry["clip_id"],
                seed=entry["seed"],
                track=track_from_json(entry["track"]),
                video=load_array(base + ".video.npy"),
                audio=load_array(base + ".audio.npy"),
            )
        )
    return clips


def track_to_json(track):
    return {
        "clip_len": track.clip_len,
        "n_classes": track.n_classes,
        "events": [list(event) for event in track.events],
    }


def track_from_json(data):
    return EventTrack(
        events=tuple(
            Event(float(on), float(dur), int(cls), float(inten))
            for on, dur, cls, inten in data["events"]
        ),
        clip_len=float(data["clip_len"]),
        n_classes=int(data["n_classes"]),
    )
