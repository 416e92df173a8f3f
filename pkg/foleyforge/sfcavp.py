import collections
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from .config import derive_seed
from .errors import ContractViolation, NumericalAbort, check_shape
from .storage import load_checkpoint, save_checkpoint
from .synthdata import split_segments

# Learnable temperature range
TAU_MIN = 0.01
TAU_MAX = 1.0

# Temporal kernel of the time-strided lateral convolution
LATERAL_KERNEL = 5

#########
# Types #
#########
SlowFastConfig = collections.namedtuple(
    "SlowFastConfig",
    (
        "alpha",
        "beta",
        "slow_base_channels",
        "stage_depths",
        "expansion",
        "slow_temporal_kernels",
        "fast_temporal_kernels",
        "lateral_ratio",
        "tau_init",
        "segment_frames",
        "height",
        "width",
        "segment_bins",
        "mel_bins",
    ),
)
SegmentEmbedding = collections.namedtuple(
    "SegmentEmbedding", ("vector", "modality", "segment_index", "clip_id")
)

MODALITIES = ("audio", "video")


def slowfast_config(cfg):
    """Build the encoder configuration from a run configuration tree."""
    data, avp = cfg["data"], cfg["avp"]
    if avp["slow_base_channels"] % avp["beta"]:
        raise ContractViolation("slow_base_channels must be divisible by beta")
    return SlowFastConfig(
        alpha=avp["alpha"],
        beta=avp["beta"],
        slow_base_channels=avp["slow_base_channels"],
        stage_depths=tuple(avp["stage_depths"]),
        expansion=avp["expansion"],
        slow_temporal_kernels=tuple(avp["slow_temporal_kernels"]),
        fast_temporal_kernels=tuple(avp["fast_temporal_kernels"]),
        lateral_ratio=avp["lateral_ratio"],
        tau_init=avp["tau_init"],
        segment_frames=data["frames"] // data["segments"],
        height=data["height"],
        width=data["width"],
        segment_bins=data["spec_bins"] // data["segments"],
        mel_bins=data["mel_bins"],
    )


############
# Networks #
############
def _kernel(dims, temporal, spatial):
    """Kernel (or stride) tuple: (T, S, S) for video, (T, F) for audio."""
    return (temporal,) + (spatial,) * (dims - 1)


def _conv(dims):
    return nn.Conv3d if dims == 3 else nn.Conv2d


class Bottleneck(nn.Module):
    """Residual bottleneck block.

    The first convolution is temporal (kernel `kt` x 1), the second spatial
    (1 x 3) and carries the spatial stride. Time is never downsampled.
    """

    def __init__(self, dims, in_channels, inner, out_channels, kt, stride):
        super().__init__()
        Conv = _conv(dims)
        self.conv_a = Conv(
            in_channels,
            inner,
            _kernel(dims, kt, 1),
            padding=_kernel(dims, kt // 2, 0),
            bias=False,
        )
        self.norm_a = nn.GroupNorm(1, inner)
        self.conv_b = Conv(
            inner,
            inner,
            _kernel(dims, 1, 3),
            stride=_kernel(dims, 1, stride),
            padding=_kernel(dims, 0, 1),
            bias=False,
        )
        self.norm_b = nn.GroupNorm(1, inner)
        self.conv_c = Conv(inner, out_channels, 1, bias=False)
        self.norm_c = nn.GroupNorm(1, out_channels)
        if in_channels != out_channels or stride != 1:
            self.shortcut = nn.Sequential(
                Conv(
                    in_channels,
                    out_channels,
                    1,
                    stride=_kernel(dims, 1, stride),
                    bias=False,
                ),
                nn.GroupNorm(1, out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.norm_a(self.conv_a(x)))
        out = F.relu(self.norm_b(self.conv_b(out)))
        out = self.norm_c(self.conv_c(out))
        return F.relu(out + self.shortcut(x))


class Pathway(nn.Module):
    """One stream of a SlowFast encoder: stem followed by residual stages."""

    def __init__(self, dims, widths, stem_kt, temporal_kernels, depths, extra):
        super().__init__()
        stem, stages = widths[0], widths[1:]
        Conv = _conv(dims)
        self.stem = nn.Sequential(
            Conv(
                1,
                stem,
                _kernel(dims, stem_kt, 7),
                stride=_kernel(dims, 1, 2),
                padding=_kernel(dims, stem_kt // 2, 3),
                bias=False,
            ),
            nn.GroupNorm(1, stem),
            nn.ReLU(),
        )
        self.pool = (nn.MaxPool3d if dims == 3 else nn.MaxPool2d)(
            _kernel(dims, 1, 3), stride=_kernel(dims, 1, 2), padding=_kernel(dims, 0, 1)
        )
        self.stages = nn.ModuleList()
        in_channels = stem + extra[0]
        for i, ((inner, out), kt, depth) in enumerate(
            zip(stages, temporal_kernels, depths)
        ):
            blocks = []
            for j in range(depth):
                stride = 2 if i > 0 and j == 0 else 1
                blocks.append(Bottleneck(dims, in_channels, inner, out, kt, stride))
                in_channels = out
            self.stages.append(nn.Sequential(*blocks))
            in_channels = out + extra[i + 1]


class SlowFastEncoder(nn.Module):
    """Two-pathway encoder for video segments (T x H x W) or spectrogram
    segments (T x F).

    The slow pathway sees every alpha-th time step with wide channels, the
    fast pathway the full temporal resolution with channels / beta. After the
    stem and after every stage but the last, a time-strided convolution
    injects fast features into the slow pathway (fused by concatenation).
    Both pathways are globally average pooled and concatenated.
    """

    def __init__(self, cfg, modality):
        super().__init__()
        if modality not in MODALITIES:
            raise ContractViolation(f"Unknown modality: {modality}")
        self.modality = modality
        self.alpha = cfg.alpha
        self.beta = cfg.beta
        if modality == "video":
            self.dims = 3
            self.input_shape = (cfg.segment_frames, cfg.height, cfg.width)
        else:
            self.dims = 2
            self.input_shape = (cfg.segment_bins, cfg.mel_bins)

        base = cfg.slow_base_channels
        slow = [base] + [
            (base * 2**i, base * 2**i * cfg.expansion)
            for i in range(len(cfg.stage_depths))
        ]
        fast = [base // cfg.beta] + [
            (inner // cfg.beta, out // cfg.beta) for inner, out in slow[1:]
        ]
        fast_outs = [fast[0]] + [out for _, out in fast[1:]]
        lateral_widths = [cfg.lateral_ratio * c for c in fast_outs[:-1]] + [0]

        self.slow = Pathway(
            self.dims,
            slow,
            1,
            cfg.slow_temporal_kernels,
            cfg.stage_depths,
            lateral_widths,
        )
        self.fast = Pathway(
            self.dims,
            fast,
            LATERAL_KERNEL,
            cfg.fast_temporal_kernels,
            cfg.stage_depths,
            [0] * len(lateral_widths),
        )
        Conv = _conv(self.dims)
        self.laterals = nn.ModuleList(
            Conv(
                channels,
                cfg.lateral_ratio * channels,
                _kernel(self.dims, LATERAL_KERNEL, 1),
                stride=_kernel(self.dims, cfg.alpha, 1),
                padding=_kernel(self.dims, LATERAL_KERNEL // 2, 0),
                bias=False,
            )
            for channels in fast_outs[:-1]
        )
        self.slow_out = slow[-1][1]
        self.fast_out = fast_outs[-1]

    @property
    def embed_dim(self):
        return self.slow_out + self.fast_out

    def forward(self, x):
        return self._run(x)[0]

    def stage_shapes(self, x):
        """Shapes (slow, fast) after the stem and after every stage."""
        return self._run(x)[1]

    def _run(self, x):
        check_shape(
            f"{self.modality} segment batch", x.shape, (None,) + self.input_shape
        )
        x = x.unsqueeze(1)
        slow = self.slow.pool(self.slow.stem(x[:, :, :: self.alpha]))
        fast = self.fast.pool(self.fast.stem(x))
        shapes = [(tuple(slow.shape), tuple(fast.shape))]

        n_stages = len(self.slow.stages)
        for i in range(n_stages):
            slow = torch.cat([slow, self.laterals[i](fast)], dim=1)
            slow = self.slow.stages[i](slow)
            fast = self.fast.stages[i](fast)
            shapes.append((tuple(slow.shape), tuple(fast.shape)))

        pooled = torch.cat(
            [slow.flatten(2).mean(dim=2), fast.flatten(2).mean(dim=2)], dim=1
        )
        return pooled, shapes


class SFCAVP(nn.Module):
    """Audio and video SlowFast encoders with a shared learnable temperature."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.video = SlowFastEncoder(cfg, "video")
        self.audio = SlowFastEncoder(cfg, "audio")
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))

    @property
    def embed_dim(self):
        return self.video.embed_dim

    @property
    def tau(self):
        return self.log_tau.exp().clamp(TAU_MIN, TAU_MAX)

    def encode(self, x, modality):
        """L2-normalized embeddings of a batch of segments."""
        encoder = self.video if modality == "video" else self.audio
        return F.normalize(encoder(x), dim=-1)


def build_model(cfg, seed):
    """Create a freshly initialized model; initialization is seeded."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SFCAVP(cfg)


##############
# Operations #
##############
def encode_segment(model, segment, modality, *, clip_id="", segment_index=0):
    """Embed a single audio or video segment."""
    if modality not in MODALITIES:
        raise ContractViolation(f"Unknown modality: {modality}")
    x = torch.as_tensor(np.asarray(segment), dtype=_dtype(model)).unsqueeze(0)
    with torch.no_grad():
        vector = model.encode(x, modality)[0]
    return SegmentEmbedding(vector.double().numpy(), modality, segment_index, clip_id)


def infonce_directional(audio_embs, video_embs, tau):
    """One direction of the symmetric InfoNCE loss.

    Row i of `audio_embs` and `video_embs` form the positive pair; every other
    video embedding of the batch is a negative.
    """
    if audio_embs.shape != video_embs.shape or audio_embs.dim() != 2:
        raise ContractViolation(
            "Index-aligned embedding batches expected, got "
            f"{tuple(audio_embs.shape)} and {tuple(video_embs.shape)}"
        )
    if audio_embs.shape[0] == 0:
        raise ContractViolation("Empty contrastive batch")
    if float(tau) <= 0:
        raise ContractViolation(f"Temperature must be positive: {float(tau)}")
    logits = audio_embs @ video_embs.T / tau
    targets = torch.arange(logits.shape[0], device=logits.device)
    return F.cross_entropy(logits, targets)


def cavp_loss(audio_embs, video_embs, tau):
    """Symmetric segment-level contrastive loss (mean of both directions)."""
    return (
        infonce_directional(audio_embs, video_embs, tau)
        + infonce_directional(video_embs, audio_embs, tau)
    ) / 2


def cosine_similarity(a, v):
    a = np.asarray(getattr(a, "vector", a), dtype=np.float64)
    v = np.asarray(getattr(v, "vector", v), dtype=np.float64)
    if a.shape != v.shape:
        raise ContractViolation(f"Dimension mismatch: {a.shape} != {v.shape}")
    norm_a, norm_v = np.linalg.norm(a), np.linalg.norm(v)
    if norm_a == 0 or norm_v == 0:
        raise ContractViolation("Cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, v) / (norm_a * norm_v), -1.0, 1.0))


def segment_tensors(clips, segments, dtype=torch.float32):
    """Stack the segments of clips into (N, S, ...) video and audio tensors."""
    videos, audios = [], []
    for clip in clips:
        pairs = split_segments(clip, segments)
        videos.append(np.stack([pair.video for pair in pairs]))
        audios.append(np.stack([pair.audio for pair in pairs]))
    return (
        torch.as_tensor(np.stack(videos), dtype=dtype),
        torch.as_tensor(np.stack(audios), dtype=dtype),
    )


def embed_segments(model, data, modality, segments):
    """Normalized per-segment embeddings (S x D) of a clip's video or of a
    spectrogram."""
    if data.shape[0] % segments:
        raise ContractViolation(
            f"{modality} length {data.shape[0]} not divisible by {segments} segments"
        )
    x = torch.as_tensor(np.asarray(data), dtype=_dtype(model))
    x = x.reshape((segments, x.shape[0] // segments) + tuple(x.shape[1:]))
    with torch.no_grad():
        return model.encode(x, modality)


def segment_similarities(model, video, spectrogram, segments):
    """Cosine similarity of every (audio segment, video segment) pair."""
    if video.shape[0] % segments or spectrogram.shape[0] % segments:
        raise ContractViolation(
            "Segment count mismatch between modalities: "
            f"{video.shape[0]} frames, {spectrogram.shape[0]} bins, {segments} segments"
        )
    video_embs = embed_segments(model, video, "video", segments)
    audio_embs = embed_segments(model, spectrogram, "audio", segments)
    return (audio_embs * video_embs).sum(dim=1).double().clamp(-1, 1).tolist()


def pretrain_avp(clips, cfg, *, seed=None, progress=False):
    """Contrastive pretraining of the audio and video encoders.

    Each step draws `batch_size` clips; all their segments form one batch of
    B * S index-aligned pairs. Returns the model and the per-step log.
    """
    hyper = cfg["avp"]
    segments = cfg["data"]["segments"]
    seed = cfg["seed"] if seed is None else seed
    model = build_model(slowfast_config(cfg), derive_seed(seed, "avp-init"))
    log = []
    if hyper["steps"] == 0:
        return model, log
    if not clips:
        raise ContractViolation("No clips to train on")

    videos, audios = segment_tensors(clips, segments)
    batch = min(hyper["batch_size"], len(clips))
    generator = torch.Generator().manual_seed(derive_seed(seed, "avp-batches"))
    optimizer = torch.optim.Adam(model.parameters(), lr=hyper["lr"])

    model.train()
    for step in tqdm(range(hyper["steps"]), desc="pretrain-avp", disable=not progress):
        index = torch.randperm(len(clips), generator=generator)[:batch]
        video = videos[index].flatten(0, 1)
        audio = audios[index].flatten(0, 1)

        loss = cavp_loss(
            model.encode(audio, "audio"), model.encode(video, "video"), model.tau
        )
        if not torch.isfinite(loss):
            raise NumericalAbort("contrastive loss", step)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        log.append({"step": step, "loss": loss.item(), "tau": model.tau.item()})
    model.eval()
    return model, log


def retrieval_accuracy(model, clips, segments, batch=16):
    """Top-1 audio to video retrieval accuracy among batches of segments.

    Segments of all clips are taken in order and chunked into batches of
    `batch` pairs; the last incomplete chunk is dropped.
    """
    videos, audios = segment_tensors(clips, segments, dtype=_dtype(model))
    videos, audios = videos.flatten(0, 1), audios.flatten(0, 1)
    n_batches = videos.shape[0] // batch
    if n_batches == 0:
        raise ContractViolation(f"Not enough segments for a batch of {batch}")
    correct = 0
    with torch.no_grad():
        for i in range(n_batches):
            chunk = slice(i * batch, (i + 1) * batch)
            sims = model.encode(audios[chunk], "audio") @ model.encode(
                videos[chunk], "video"
            ).T
            correct += (sims.argmax(dim=1) == torch.arange(batch)).sum().item()
    return correct / (n_batches * batch)


def _dtype(model):
    return next(model.parameters()).dtype


###############
# Checkpoints #
###############
def save_avp(path, model, cfg):
    """Store a pretrained model with its geometry and temperature."""
    return save_checkpoint(
        path,
        "avp",
        model.state_dict(),
        {"data": cfg["data"], "avp": cfg["avp"]},
        meta={
            "D": model.embed_dim,
            "alpha": model.cfg.alpha,
            "beta": model.cfg.beta,
            "tau": float(model.tau),
        },
    )


def load_avp(path):
    """Load a frozen model from a checkpoint."""
    header, tensors = load_checkpoint(path, "avp")
    model = SFCAVP(slowfast_config(header["config"]))
    model.load_state_dict({name: torch.from_numpy(v) for name, v in tensors.items()})
    model.eval()
    model.requires_grad_(False)
    return model, header
