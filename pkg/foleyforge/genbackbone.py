import collections
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from .config import derive_seed
from .errors import ContractViolation, NumericalAbort, check_shape
from .sfcavp import embed_segments
from .storage import load_checkpoint, save_checkpoint

DEFAULT_SAMPLING_STEPS = 25

#########
# Types #
#########
BackboneConfig = collections.namedtuple(
    "BackboneConfig",
    (
        "latent_len",
        "latent_dim",
        "cond_dim",
        "hidden",
        "heads",
        "mm_blocks",
        "sm_blocks",
        "embed_dim",
        "segments",
    ),
)
ConditionSet = collections.namedtuple(
    "ConditionSet", ("global_feat", "video_tokens", "frame_feat")
)
FlowBatch = collections.namedtuple("FlowBatch", ("x0", "x1", "t", "cond"))


def backbone_config(cfg, embed_dim):
    bb = cfg["backbone"]
    return BackboneConfig(
        latent_len=bb["latent_len"],
        latent_dim=bb["latent_dim"],
        cond_dim=bb["cond_dim"],
        hidden=bb["hidden"],
        heads=bb["heads"],
        mm_blocks=bb["mm_blocks"],
        sm_blocks=bb["sm_blocks"],
        embed_dim=embed_dim,
        segments=cfg["data"]["segments"],
    )


##############
# Latent map #
##############
def _patch_geometry(spec_bins, mel_bins, latent_len, latent_dim):
    if spec_bins % latent_len:
        raise ContractViolation(
            f"{spec_bins} spectrogram bins not divisible into {latent_len} tokens"
        )
    patch_len = spec_bins // latent_len
    patch = patch_len * mel_bins
    if patch % latent_dim or latent_dim > patch:
        raise ContractViolation(
            f"Patch of {patch} values cannot be mapped to {latent_dim} channels"
        )
    return patch_len, patch // latent_dim


def audio_to_latent(spectrogram, latent_len, latent_dim):
    """Map a spectrogram (T x F) to a latent sequence (L x d).

    Every token covers a patch of T / L time bins. The patch is flattened
    frequency-major and cut into d groups of adjacent values; a latent channel
    is the group sum divided by the square root of the group size. The rows of
    this map are orthonormal, `latent_to_spectrogram` is its transpose.
    """
    spectrogram = np.asarray(spectrogram)
    if spectrogram.ndim != 2:
        raise ContractViolation(
            f"Spectrogram of shape (T, F) expected, got {spectrogram.shape}"
        )
    spec_bins, mel_bins = spectrogram.shape
    patch_len, group = _patch_geometry(spec_bins, mel_bins, latent_len, latent_dim)
    patches = spectrogram.reshape(latent_len, patch_len, mel_bins).swapaxes(1, 2)
    groups = patches.reshape(latent_len, latent_dim, group)
    return groups.sum(axis=2) / math.sqrt(group)


def latent_to_spectrogram(latent, spec_bins, mel_bins):
    """Reconstruct a spectrogram from a latent sequence (L x d)."""
    latent = np.asarray(latent)
    if latent.ndim != 2:
        raise ContractViolation(f"Latent of shape (L, d) expected, got {latent.shape}")
    latent_len, latent_dim = latent.shape
    patch_len, group = _patch_geometry(spec_bins, mel_bins, latent_len, latent_dim)
    values = np.repeat(latent[:, :, None] / math.sqrt(group), group, axis=2)
    patches = values.reshape(latent_len, mel_bins, patch_len).swapaxes(1, 2)
    return patches.reshape(spec_bins, mel_bins)


##############
# Conditions #
##############
def build_conditions(avp_model, video, segments, latent_len):
    """Video conditions from the frozen audio-visual encoder.

    The per-segment video embeddings form the video token stream; their mean
    is the global feature and repeating them to the latent token rate gives
    the frame-aligned features.
    """
    tokens = embed_segments(avp_model, video, "video", segments).float()
    index = torch.arange(latent_len) * segments // latent_len
    return ConditionSet(
        global_feat=tokens.mean(dim=0),
        video_tokens=tokens,
        frame_feat=tokens[index],
    )


def stack_conditions(conditions):
    """Batch a sequence of unbatched condition sets."""
    return ConditionSet(*(torch.stack(field) for field in zip(*conditions)))


def repeat_conditions(cond, n):
    """Batch of `n` copies of an unbatched condition set."""
    return ConditionSet(*(field.unsqueeze(0).expand(n, *field.shape) for field in cond))


def select_conditions(cond, index):
    return ConditionSet(*(field[index] for field in cond))


#################
# Flow matching #
#################
def _check_time(t):
    t = torch.as_tensor(t)
    if t.numel() and (t.min() < 0 or t.max() > 1):
        raise ContractViolation(f"Time outside of [0, 1]: {t.tolist()}")
    return t


def _broadcast_time(t, x):
    t = torch.as_tensor(t, dtype=x.dtype)
    if t.dim() == 0:
        return t
    return t.reshape(t.shape + (1,) * (x.dim() - t.dim()))


def interpolate_path(x0, x1, t):
    """Point and velocity on the straight path from noise `x0` to data `x1`."""
    if x0.shape != x1.shape:
        raise ContractViolation(
            f"Path endpoints differ in shape: {tuple(x0.shape)} != {tuple(x1.shape)}"
        )
    t = _broadcast_time(_check_time(t), x0)
    return t * x1 + (1 - t) * x0, x1 - x0


def timestep_features(t, width):
    """Sinusoidal features of the flow time (scaled to [0, 1000])."""
    half = width // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _sinusoid_table(length, width):
    position = torch.arange(length, dtype=torch.float32)[:, None]
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(0, width, 2, dtype=torch.float32) / width
    )
    table = torch.zeros(length, width)
    table[:, 0::2] = torch.sin(position * freqs)
    table[:, 1::2] = torch.cos(position * freqs)
    return table


def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


class _Stream(nn.Module):
    """Per-stream weights of a transformer block (attention input/output, MLP).

    A `pre_only` stream takes part in the joint attention but is not updated.
    """

    def __init__(self, hidden, pre_only=False):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(hidden, 3 * hidden)
        if pre_only:
            return
        self.proj = nn.Linear(hidden, hidden)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, 4 * hidden),
            nn.GELU(approximate="tanh"),
            nn.Linear(4 * hidden, hidden),
        )


class _AdaLN(nn.Module):
    """Modulation from the global condition (all tokens) and, optionally,
    the frame-aligned condition (per token)."""

    def __init__(self, hidden, cond_dim, chunks):
        super().__init__()
        self.chunks = chunks
        self.global_mod = nn.Linear(hidden, chunks * hidden)
        self.frame_mod = nn.Linear(cond_dim, chunks * hidden) if cond_dim else None
        for layer in (self.global_mod, self.frame_mod):
            if layer is not None:
                nn.init.zeros_(layer.weight)
                nn.init.zeros_(layer.bias)

    def forward(self, g, f=None):
        mod = self.global_mod(F.silu(g))[:, None]
        if self.frame_mod is not None:
            mod = mod + self.frame_mod(F.silu(f))
        return mod.chunk(self.chunks, dim=-1)


def _attention(qkv, heads):
    batch, tokens, width = qkv.shape
    q, k, v = (
        qkv.reshape(batch, tokens, 3, heads, width // (3 * heads))
        .permute(2, 0, 3, 1, 4)
        .unbind(0)
    )
    out = F.scaled_dot_product_attention(q, k, v)
    return out.transpose(1, 2).reshape(batch, tokens, width // 3)


class JointBlock(nn.Module):
    """Two-stream block: separate weights per stream, attention over the
    joined audio and video token sequence.

    With `context_pre_only` (the last joint block) the video stream is not
    updated and the block returns None in its place.
    """

    def __init__(self, hidden, heads, cond_dim, context_pre_only=False):
        super().__init__()
        self.heads = heads
        self.context_pre_only = context_pre_only
        self.audio = _Stream(hidden)
        self.video = _Stream(hidden, pre_only=context_pre_only)
        self.audio_adaln = _AdaLN(hidden, cond_dim, 6)
        self.video_adaln = _AdaLN(hidden, 0, 2 if context_pre_only else 6)

    def forward(self, a, v, g, f):
        a_mod = self.audio_adaln(g, f)
        v_mod = self.video_adaln(g)
        qkv = torch.cat(
            [
                self.audio.qkv(_modulate(self.audio.norm1(a), a_mod[0], a_mod[1])),
                self.video.qkv(_modulate(self.video.norm1(v), v_mod[0], v_mod[1])),
            ],
            dim=1,
        )
        out = _attention(qkv, self.heads)
        out_a, out_v = out[:, : a.shape[1]], out[:, a.shape[1] :]

        a = a + a_mod[2] * self.audio.proj(out_a)
        a = a + a_mod[5] * self.audio.mlp(
            _modulate(self.audio.norm2(a), a_mod[3], a_mod[4])
        )
        if self.context_pre_only:
            return a, None
        v = v + v_mod[2] * self.video.proj(out_v)
        v = v + v_mod[5] * self.video.mlp(
            _modulate(self.video.norm2(v), v_mod[3], v_mod[4])
        )
        return a, v


class SingleBlock(nn.Module):
    """Audio-only transformer block."""

    def __init__(self, hidden, heads, cond_dim):
        super().__init__()
        self.heads = heads
        self.audio = _Stream(hidden)
        self.adaln = _AdaLN(hidden, cond_dim, 6)

    def forward(self, a, g, f):
        mod = self.adaln(g, f)
        out = _attention(
            self.audio.qkv(_modulate(self.audio.norm1(a), mod[0], mod[1])), self.heads
        )
        a = a + mod[2] * self.audio.proj(out)
        return a + mod[5] * self.audio.mlp(
            _modulate(self.audio.norm2(a), mod[3], mod[4])
        )


class FinalAdaLN(nn.Module):
    def __init__(self, hidden, cond_dim):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.adaln = _AdaLN(hidden, cond_dim, 2)

    def forward(self, a, g, f):
        shift, scale = self.adaln(g, f)
        return _modulate(self.norm(a), shift, scale)


class VelocityField(nn.Module):
    """Conditional velocity field v(t, C, x_t) over audio latent sequences.

    Audio latents and video tokens pass `mm_blocks` joint-attention blocks,
    then the audio stream alone passes `sm_blocks` blocks. The global
    condition (time embedding plus pooled video feature) modulates every
    token, the frame-aligned features modulate each audio token. A 1-D
    convolution over the token axis produces the velocity.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        hidden = cfg.hidden
        self.audio_in = nn.Linear(cfg.latent_dim, hidden)
        self.video_in = nn.Linear(cfg.embed_dim, hidden)
        self.time_embed = nn.Sequential(
            nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden)
        )
        self.global_embed = nn.Linear(cfg.embed_dim, hidden)
        self.frame_embed = nn.Linear(cfg.embed_dim, cfg.cond_dim)
        self.register_buffer(
            "audio_pos", _sinusoid_table(cfg.latent_len, hidden), persistent=False
        )
        self.register_buffer(
            "video_pos", _sinusoid_table(cfg.segments, hidden), persistent=False
        )
        self.mm_blocks = nn.ModuleList(
            JointBlock(
                hidden, cfg.heads, cfg.cond_dim, context_pre_only=i == cfg.mm_blocks - 1
            )
            for i in range(cfg.mm_blocks)
        )
        self.sm_blocks = nn.ModuleList(
            SingleBlock(hidden, cfg.heads, cfg.cond_dim) for _ in range(cfg.sm_blocks)
        )
        self.final_adaln = FinalAdaLN(hidden, cfg.cond_dim)
        self.head = nn.Conv1d(hidden, cfg.latent_dim, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, t, cond, x):
        cfg = self.cfg
        batch = x.shape[0]
        check_shape("latent batch", x.shape, (None, cfg.latent_len, cfg.latent_dim))
        check_shape(
            "frame-aligned condition",
            cond.frame_feat.shape,
            (batch, cfg.latent_len, cfg.embed_dim),
        )
        check_shape(
            "video tokens",
            cond.video_tokens.shape,
            (batch, cfg.segments, cfg.embed_dim),
        )
        check_shape("global condition", cond.global_feat.shape, (batch, cfg.embed_dim))
        t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
        if t.dim() == 0:
            t = t.expand(batch)

        g = self.time_embed(timestep_features(t, cfg.hidden)) + self.global_embed(
            cond.global_feat
        )
        f = self.frame_embed(cond.frame_feat)
        a = self.audio_in(x) + self.audio_pos.to(x.dtype)
        v = self.video_in(cond.video_tokens) + self.video_pos.to(x.dtype)
        for block in self.mm_blocks:
            a, v = block(a, v, g, f)
        for block in self.sm_blocks:
            a = block(a, g, f)
        a = self.final_adaln(a, g, f)
        return self.head(a.transpose(1, 2)).transpose(1, 2)


def build_velocity_field(cfg, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return VelocityField(cfg)


def velocity_forward(model, t, cond, x_t):
    """Evaluate the velocity field; unbatched inputs give unbatched output."""
    _check_time(t)
    if x_t.dim() == 2:
        return model(
            torch.as_tensor(t).reshape(1), repeat_conditions(cond, 1), x_t[None]
        )[0]
    return model(t, cond, x_t)


def cfm_loss(model, batch, step=None):
    """Conditional flow matching loss, mean over batch and elements."""
    x_t, u_t = interpolate_path(batch.x0, batch.x1, batch.t)
    v = model(batch.t, batch.cond, x_t)
    loss = ((v - u_t) ** 2).mean()
    if not torch.isfinite(loss):
        raise NumericalAbort("flow matching loss", step)
    return loss


############
# Sampling #
############
def euler_integrate(field, x0, n_steps, cond=None):
    """Integrate dx/dt = field(t, cond, x) from t=0 to t=1 with Euler steps."""
    if n_steps < 1:
        raise ContractViolation(f"n_steps must be >= 1, got {n_steps}")
    x = x0
    dt = 1.0 / n_steps
    for i in range(n_steps):
        t = torch.full((x.shape[0],), i * dt, dtype=x.dtype)
        x = x + dt * field(t, cond, x)
    return x


def noise(seeds, latent_len, latent_dim, dtype=torch.float32):
    """Standard normal starting points, one independent stream per seed."""
    return torch.stack(
        [
            torch.randn(
                (latent_len, latent_dim),
                generator=torch.Generator().manual_seed(int(seed)),
                dtype=dtype,
            )
            for seed in seeds
        ]
    )


def sample(model, cond, n_steps=DEFAULT_SAMPLING_STEPS, seeds=(0,)):
    """Generate one latent sequence per seed for a single (unbatched)
    condition set. Returns an (N, L, d) tensor."""
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    x0 = noise(seeds, cfg.latent_len, cfg.latent_dim, dtype)
    batch = ConditionSet(
        *(field.to(dtype) for field in repeat_conditions(cond, len(seeds)))
    )
    with torch.no_grad():
        x = euler_integrate(model, x0, n_steps, batch)
    if not torch.isfinite(x).all():
        raise NumericalAbort("sample")
    return x


############
# Training #
############
def clip_latents(clips, cfg):
    bb = cfg["backbone"]
    return torch.as_tensor(
        np.stack(
            [
                audio_to_latent(clip.audio, bb["latent_len"], bb["latent_dim"])
                for clip in clips
            ]
        ),
        dtype=torch.float32,
    )


def clip_conditions(avp_model, clips, cfg):
    segments = cfg["data"]["segments"]
    latent_len = cfg["backbone"]["latent_len"]
    return stack_conditions(
        [
            build_conditions(avp_model, clip.video, segments, latent_len)
            for clip in clips
        ]
    )


def train_base(clips, avp_model, cfg, *, seed=None, progress=False):
    """Train the velocity field with conditional flow matching.

    Returns the model and the per-step log.
    """
    hyper = cfg["backbone"]
    seed = cfg["seed"] if seed is None else seed
    model = build_velocity_field(
        backbone_config(cfg, avp_model.embed_dim), derive_seed(seed, "backbone-init")
    )
    log = []
    if hyper["steps"] == 0:
        return model, log
    if not clips:
        raise ContractViolation("No clips to train on")

    latents = clip_latents(clips, cfg)
    conditions = clip_conditions(avp_model, clips, cfg)
    batch_size = min(hyper["batch_size"], len(clips))
    generator = torch.Generator().manual_seed(derive_seed(seed, "backbone-batches"))
    optimizer = torch.optim.AdamW(model.parameters(), lr=hyper["lr"], weight_decay=0.0)

    model.train()
    for step in tqdm(range(hyper["steps"]), desc="train-base", disable=not progress):
        index = torch.randperm(len(clips), generator=generator)[:batch_size]
        x1 = latents[index]
        batch = FlowBatch(
            x0=torch.randn(x1.shape, generator=generator),
            x1=x1,
            t=torch.rand(batch_size, generator=generator),
            cond=select_conditions(conditions, index),
        )
        loss = cfm_loss(model, batch, step)
        optimizer.zero_grad()
        loss.backward()
        grad_norm = nn.utils.clip_grad_norm_(model.parameters(), hyper["grad_clip"])
        optimizer.step()
        log.append({"step": step, "loss": loss.item(), "grad_norm": float(grad_norm)})
    model.eval()
    return model, log


###############
# Checkpoints #
###############
def save_backbone(path, model, cfg, meta=None):
    return save_checkpoint(
        path,
        "backbone",
        model.state_dict(),
        {"data": cfg["data"], "backbone": cfg["backbone"]},
        meta=dict(meta or {}, D=model.cfg.embed_dim),
    )


def load_backbone(path):
    header, tensors = load_checkpoint(path, "backbone")
    model = VelocityField(backbone_config(header["config"], header["meta"]["D"]))
    model.load_state_dict({name: torch.from_numpy(v) for name, v in tensors.items()})
    model.eval()
    return model, header
