import collections
import copy
import math
import os

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from .config import derive_seed
from .errors import ContractViolation, NumericalAbort
from .genbackbone import (
    DEFAULT_SAMPLING_STEPS,
    audio_to_latent,
    build_conditions,
    interpolate_path,
    latent_to_spectrogram,
    sample,
    save_backbone,
    stack_conditions,
)
from .settings import FINETUNE_MODES, LOSS_MODES, REWARD_MODES, WINNER_MODES
from .sfcavp import segment_similarities
from .storage import write_json

# Running bounds of the loss normalizer
BOUNDS_DECAY = 0.99
BOUNDS_WARMUP = 10
BOUNDS_MIN_RANGE = 1e-8

# Name prefixes of the velocity field parameters
PARAMETER_GROUPS = (
    "audio_in",
    "video_in",
    "time_embed",
    "global_embed",
    "frame_embed",
    "mm_blocks",
    "sm_blocks",
    "final_adaln",
    "head",
)

#########
# Types #
#########
CandidateSet = collections.namedtuple(
    "CandidateSet", ("clip_id", "ground_truth", "candidates", "seeds")
)
RewardScore = collections.namedtuple("RewardScore", ("per_segment", "s_fs"))
PreferencePair = collections.namedtuple(
    "PreferencePair",
    ("clip_id", "winner", "loser", "cond", "winner_index", "loser_index"),
)
PreferenceBatch = collections.namedtuple(
    "PreferenceBatch", ("winner", "loser", "cond")
)
RPOConfig = collections.namedtuple(
    "RPOConfig",
    (
        "iterations",
        "steps_per_iter",
        "candidates",
        "lr",
        "weight_decay",
        "warmup_steps",
        "schedule",
        "grad_accum",
        "grad_clip",
        "beta_w",
        "batch_size",
        "winner_mode",
        "loss_mode",
        "finetune_mode",
        "reward",
        "sampling_steps",
    ),
)


def rpo_config(cfg):
    return RPOConfig(**cfg["rpo"])


#######################
# Candidates & reward #
#######################
def generate_candidates(model, cond, clip, seeds, cfg, n_steps=DEFAULT_SAMPLING_STEPS):
    """Sample one candidate latent per seed for a clip's video conditions."""
    if len(set(seeds)) != len(seeds):
        raise ContractViolation(f"Candidate seeds collide for {clip.clip_id}: {seeds}")
    bb = cfg["backbone"]
    return CandidateSet(
        clip_id=clip.clip_id,
        ground_truth=torch.as_tensor(
            audio_to_latent(clip.audio, bb["latent_len"], bb["latent_dim"]),
            dtype=torch.float32,
        ),
        candidates=sample(model, cond, n_steps, seeds),
        seeds=list(seeds),
    )


def order_stat_score(sims):
    """Mean of the max(1, S // 4) smallest segment similarities.

    >>> round(order_stat_score([0.9, 0.1, 0.5, 0.2, 0.8, 0.3, 0.7, 0.6]), 12)
    0.15
    """
    if len(sims) == 0:
        raise ContractViolation("No segment similarities to score")
    k = max(1, len(sims) // 4)
    return sum(sorted(sims)[:k]) / k


def mean_score(sims):
    if len(sims) == 0:
        raise ContractViolation("No segment similarities to score")
    return sum(sims) / len(sims)


REWARDS = {"order_stat": order_stat_score, "mean": mean_score}


def score_candidate(avp_model, video, latent, cfg, reward="order_stat"):
    """Reward of an audio latent for a clip's video.

    The latent is decoded to a spectrogram and split into segments, which
    are compared with the time-aligned video segments.
    """
    data = cfg["data"]
    latent = latent.detach().cpu().numpy() if hasattr(latent, "detach") else latent
    spectrogram = latent_to_spectrogram(latent, data["spec_bins"], data["mel_bins"])
    return score_spectrogram(avp_model, video, spectrogram, cfg, reward)


def score_spectrogram(avp_model, video, spectrogram, cfg, reward="order_stat"):
    if reward not in REWARD_MODES:
        raise ContractViolation(f"Unknown reward: {reward}")
    sims = segment_similarities(avp_model, video, spectrogram, cfg["data"]["segments"])
    return RewardScore(per_segment=sims, s_fs=REWARDS[reward](sims))


def create_preference_pair(candidate_set, scores, winner_mode, cond=None):
    """Pick the loser (lowest reward) and the winner of a candidate set.

    Ties go to the lowest candidate index. The winner is the ground truth
    or, with `best_generated`, the highest scoring candidate.
    """
    if winner_mode not in WINNER_MODES:
        raise ContractViolation(f"Unknown winner mode: {winner_mode}")
    values = [getattr(score, "s_fs", score) for score in scores]
    if len(values) != len(candidate_set.candidates):
        raise ContractViolation(
            f"{len(values)} scores for {len(candidate_set.candidates)} candidates"
        )
    loser = min(range(len(values)), key=values.__getitem__)
    if winner_mode == "ground_truth":
        winner, winner_latent = None, candidate_set.ground_truth
    else:
        winner = max(range(len(values)), key=values.__getitem__)
        winner_latent = candidate_set.candidates[winner]
    return PreferencePair(
        clip_id=candidate_set.clip_id,
        winner=winner_latent,
        loser=candidate_set.candidates[loser],
        cond=cond,
        winner_index=winner,
        loser_index=loser,
    )


def collate_pairs(pairs):
    return PreferenceBatch(
        winner=torch.stack([pair.winner for pair in pairs]),
        loser=torch.stack([pair.loser for pair in pairs]),
        cond=stack_conditions([pair.cond for pair in pairs]),
    )


##########
# Losses #
##########
def dpo_objective(err_w, err_l, ref_err_w, ref_err_l, beta_w):
    """-log sigmoid(-beta_w * ((e_w - e_ref_w) - (e_l - e_ref_l))), batch mean."""
    if beta_w <= 0:
        raise ContractViolation(f"beta_w must be positive, got {beta_w}")
    gap = (err_w - ref_err_w) - (err_l - ref_err_l)
    return -F.logsigmoid(-beta_w * gap).mean()


def _errors(model, t, cond, x0, x1):
    x_t, u_t = interpolate_path(x0, x1, t)
    return ((model(t, cond, x_t) - u_t) ** 2).flatten(1).mean(dim=1)


def pair_errors(model, ref_model, batch, t, x0_w, x0_l):
    """Per-pair flow matching errors of winner and loser under both models."""
    err_w = _errors(model, t, batch.cond, x0_w, batch.winner)
    err_l = _errors(model, t, batch.cond, x0_l, batch.loser)
    with torch.no_grad():
        ref_err_w = _errors(ref_model, t, batch.cond, x0_w, batch.winner)
        ref_err_l = _errors(ref_model, t, batch.cond, x0_l, batch.loser)
    return err_w, err_l, ref_err_w, ref_err_l


def dpo_fm_loss(model, ref_model, batch, t, x0_w, x0_l, beta_w):
    """Preference loss on flow matching errors against a frozen reference."""
    loss = dpo_objective(*pair_errors(model, ref_model, batch, t, x0_w, x0_l), beta_w)
    if not torch.isfinite(loss):
        raise NumericalAbort("preference loss")
    return loss


class RunningBounds:
    """Running min/max of a loss term.

    The first observations set the bounds directly. Afterwards a bound moves
    to a value outside of it at once and decays towards values inside it.
    """

    def __init__(self, decay=BOUNDS_DECAY, warmup=BOUNDS_WARMUP):
        self.decay = decay
        self.warmup = warmup
        self.count = 0
        self.low = math.inf
        self.high = -math.inf

    def observe(self, value):
        value = float(value)
        self.count += 1
        if self.count <= self.warmup:
            self.low = min(self.low, value)
            self.high = max(self.high, value)
            return
        if value < self.low:
            self.low = value
        else:
            self.low = self.decay * self.low + (1 - self.decay) * value
        if value > self.high:
            self.high = value
        else:
            self.high = self.decay * self.high + (1 - self.decay) * value

    def state(self):
        if self.count == 0:
            return {"count": 0, "low": None, "high": None}
        return {"count": self.count, "low": self.low, "high": self.high}


def normalize_term(value, bounds, update=True):
    """Map a loss term to [0, 1] with running bounds (gradient preserved)."""
    value = torch.as_tensor(value)
    if update:
        bounds.observe(value.detach())
    span = bounds.high - bounds.low
    if not span >= BOUNDS_MIN_RANGE:
        return value - value.detach() + 0.5
    return ((value - bounds.low) / span).clamp(0.0, 1.0)


def avp_rpo_loss(model, ref_model, batch, draws, rpo, normalizers=None):
    """Combined objective of a preference batch.

    `draws` holds (t, x0_w, x0_l). In `avp_rpo` mode the result is the sum of
    the normalized preference loss and the normalized winner flow matching
    loss; `dpo_fm_only` returns the raw preference loss. Returns the loss and
    its raw parts.
    """
    if rpo.loss_mode not in LOSS_MODES:
        raise ContractViolation(f"Unknown loss mode: {rpo.loss_mode}")
    t, x0_w, x0_l = draws
    errors = pair_errors(model, ref_model, batch, t, x0_w, x0_l)
    dpo = dpo_objective(*errors, rpo.beta_w)
    fm_win = errors[0].mean()
    if rpo.loss_mode == "dpo_fm_only":
        loss = dpo
    else:
        if normalizers is None:
            normalizers = {"dpo": RunningBounds(), "fm_win": RunningBounds()}
        loss = normalize_term(dpo, normalizers["dpo"]) + normalize_term(
            fm_win, normalizers["fm_win"]
        )
    return loss, {"dpo": dpo.item(), "fm_win": fm_win.item()}


###############
# Fine-tuning #
###############
def build_freeze_mask(model, finetune_mode):
    """Names of the trainable parameters.

    `freeze_top` trains the last single-modal block, the final adaLN and the
    output head; `full` trains everything.
    """
    if finetune_mode not in FINETUNE_MODES:
        raise ContractViolation(f"Unknown finetune mode: {finetune_mode}")
    names = [name for name, _ in model.named_parameters()]
    for name in names:
        if name.split(".", 1)[0] not in PARAMETER_GROUPS:
            raise ContractViolation(f"Unknown parameter: {name}")
    if finetune_mode == "full":
        return set(names)
    last = len(model.sm_blocks) - 1
    top = (f"sm_blocks.{last}.", "final_adaln.", "head.")
    return {name for name in names if name.startswith(top)}


def apply_freeze_mask(model, trainable):
    params = []
    for name, param in model.named_parameters():
        param.requires_grad_(name in trainable)
        if name in trainable:
            params.append(param)
    return params


def lr_factor(step, warmup_steps, total_steps, schedule="cosine"):
    """Learning rate multiplier: linear warmup, then cosine decay to 0."""
    if step < warmup_steps:
        return (step + 1) / warmup_steps
    if schedule == "constant":
        return 1.0
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def collect_preferences(model, avp_model, clips, cfg, k, seed, progress=False):
    """Generate candidates for every clip, score them and build the pairs."""
    rpo = rpo_config(cfg)
    data = cfg["data"]
    pairs = []
    for clip in tqdm(clips, desc=f"candidates {k}", disable=not progress):
        cond = build_conditions(
            avp_model, clip.video, data["segments"], cfg["backbone"]["latent_len"]
        )
        seeds = [
            derive_seed(seed, "candidates", clip.clip_id, j)
            for j in range(rpo.candidates)
        ]
        candidates = generate_candidates(
            model, cond, clip, seeds, cfg, rpo.sampling_steps
        )
        scores = [
            score_candidate(avp_model, clip.video, latent, cfg, rpo.reward)
            for latent in candidates.candidates
        ]
        pairs.append(create_preference_pair(candidates, scores, rpo.winner_mode, cond))
    return pairs


def rpo_iterate(model, avp_model, clips, cfg, k, *, seed=None, progress=False):
    """One preference optimization iteration.

    The reference is a frozen snapshot of the incoming model. Returns the
    updated model, the per-step log and the iteration summary.
    """
    rpo = rpo_config(cfg)
    if k >= rpo.iterations:
        raise ContractViolation(f"Iteration {k} beyond {rpo.iterations} iterations")
    seed = cfg["seed"] if seed is None else seed
    iter_seed = derive_seed(seed, "rpo", k)

    ref_model = copy.deepcopy(model).eval().requires_grad_(False)
    pairs = collect_preferences(
        ref_model, avp_model, clips, cfg, k, iter_seed, progress
    )
    if not pairs:
        raise ContractViolation("No preference pairs")

    model = copy.deepcopy(model)
    model.train()
    trainable = build_freeze_mask(model, rpo.finetune_mode)
    params = apply_freeze_mask(model, trainable)
    optimizer = torch.optim.AdamW(params, lr=rpo.lr, weight_decay=rpo.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer,
        lambda step: lr_factor(
            step, rpo.warmup_steps, rpo.steps_per_iter, rpo.schedule
        ),
    )
    normalizers = {"dpo": RunningBounds(), "fm_win": RunningBounds()}
    generator = torch.Generator().manual_seed(derive_seed(iter_seed, "shuffle"))
    order = []
    batch_size = min(rpo.batch_size, len(pairs))
    shape = pairs[0].winner.shape

    log = []
    for step in tqdm(range(rpo.steps_per_iter), desc=f"rpo {k}", disable=not progress):
        lr = optimizer.param_groups[0]["lr"]
        optimizer.zero_grad()
        totals = {"loss": 0.0, "dpo": 0.0, "fm_win": 0.0}
        for _ in range(rpo.grad_accum):
            if len(order) < batch_size:
                order.extend(torch.randperm(len(pairs), generator=generator).tolist())
            index, order = order[:batch_size], order[batch_size:]
            batch = collate_pairs([pairs[i] for i in index])
            draws = (
                torch.rand(batch_size, generator=generator),
                torch.randn((batch_size,) + shape, generator=generator),
                torch.randn((batch_size,) + shape, generator=generator),
            )
            loss, parts = avp_rpo_loss(model, ref_model, batch, draws, rpo, normalizers)
            if not torch.isfinite(loss):
                raise NumericalAbort("preference loss", step)
            (loss / rpo.grad_accum).backward()
            totals["loss"] += loss.item() / rpo.grad_accum
            totals["dpo"] += parts["dpo"] / rpo.grad_accum
            totals["fm_win"] += parts["fm_win"] / rpo.grad_accum
        nn.utils.clip_grad_norm_(params, rpo.grad_clip)
        optimizer.step()
        scheduler.step()
        log.append(dict(totals, step=step, lr=lr))

    model.eval()
    model.requires_grad_(True)
    summary = {
        "iteration": k + 1,
        "seed": iter_seed,
        "n_pairs": len(pairs),
        "trainable": sorted(trainable),
        "loss_mean": _mean(entry["loss"] for entry in log),
        "dpo_mean": _mean(entry["dpo"] for entry in log),
        "fm_win_mean": _mean(entry["fm_win"] for entry in log),
        "normalizers": {name: b.state() for name, b in normalizers.items()},
    }
    return model, log, summary


def _mean(values):
    values = list(values)
    return sum(values) / len(values) if values else None


def run_rpo(
    model,
    avp_model,
    train_clips,
    held_out,
    cfg,
    out_dir,
    *,
    iterations=None,
    seed=None,
    progress=False,
):
    """Run the iteration protocol and store its artifacts in `out_dir`.

    Writes `iter_0.json` for the incoming model and, for every iteration k,
    `iter_<k>.ckpt`, `iter_<k>.json` and `iter_<k>.log.json`. Returns the
    iteration reports.
    """
    from .evaluation import evaluate_model

    rpo = rpo_config(cfg)
    iterations = rpo.iterations if iterations is None else iterations
    if not 0 <= iterations <= rpo.iterations:
        raise ContractViolation(
            f"Iterations must be within [0, {rpo.iterations}], got {iterations}"
        )
    os.makedirs(out_dir, exist_ok=True)

    report = evaluate_model(model, avp_model, held_out, cfg)
    reports = [dict(report, iteration=0)]
    write_json(os.path.join(out_dir, "iter_0.json"), reports[0])

    for k in range(iterations):
        model, log, summary = rpo_iterate(
            model, avp_model, train_clips, cfg, k, seed=seed, progress=progress
        )
        name = f"iter_{k + 1}"
        save_backbone(
            os.path.join(out_dir, name + ".ckpt"),
            model,
            cfg,
            meta={
                "iteration": k + 1,
                "finetune_mode": rpo.finetune_mode,
                "trainable": summary["trainable"],
            },
        )
        write_json(os.path.join(out_dir, name + ".log.json"), log)
        report = evaluate_model(model, avp_model, held_out, cfg)
        summary.pop("trainable")
        reports.append(dict(report, **summary))
        write_json(os.path.join(out_dir, name + ".json"), reports[-1])
    return model, reports
