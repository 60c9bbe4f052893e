"""Volumetric encoder-decoder with four sigmoid heads.

The network follows V-Net: residual convolution stages, strided-convolution
downsampling, transposed-convolution upsampling with skip concatenation,
instance normalisation and PReLU. Four independent 1x1x1 heads produce
``p_a_t1, p_a_t2, p_n_t2, p_v_t2``.

The first-timepoint all-lesion map must not depend on the ``y_a_t1`` input
channel. Every prediction therefore runs two passes with shared weights: one
with the label channel zeroed, which supplies ``p_a_t1``, and one on the full
input, which supplies the other three heads.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .assembly import CHANNELS, InputBundle, RangeError
from .core import ConfigError, ValidationError, Volume3D
from .losses import HEADS

CHECKPOINT_FORMAT = "hetseg-checkpoint"
CHECKPOINT_VERSION = 1
_Y_CHANNEL = CHANNELS.index("y_a_t1")


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 3
    base_width: int = 8
    patch_size: tuple[int, int, int] = (32, 32, 32)
    max_width: int = 256
    in_channels: int = 4
    heads: int = 4
    prior: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if self.in_channels != 4 or self.heads != 4:
            raise ConfigError("the network has exactly 4 input channels and 4 heads")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if not 0 < self.prior < 1:
            raise ConfigError("prior must lie in (0, 1)")
        if self.base_width < 1:
            raise ConfigError("base_width must be >= 1")
        step = 2**self.depth
        if any(p % step for p in self.patch_size):
            raise ConfigError(f"patch size {self.patch_size} not divisible by 2**depth = {step}")

    @classmethod
    def paper(cls) -> ModelConfig:
        return cls(depth=5, base_width=16, patch_size=(96, 96, 96))

    def widths(self) -> list[int]:
        return [min(self.base_width * 2**k, self.max_width) for k in range(self.depth + 1)]


class _ConvStage(nn.Module):
    """``n`` conv-norm-PReLU layers with a residual connection."""

    def __init__(self, c_in: int, c_out: int, n: int):
        super().__init__()
        layers = []
        for k in range(n):
            layers += [
                nn.Conv3d(c_in if k == 0 else c_out, c_out, 3, padding=1),
                nn.InstanceNorm3d(c_out, affine=True),
                nn.PReLU(c_out),
            ]
        self.body = nn.Sequential(*layers)
        self.skip = nn.Identity() if c_in == c_out else nn.Conv3d(c_in, c_out, 1)

    def forward(self, x):
        return self.body(x) + self.skip(x)


def _down(c_in, c_out):
    return nn.Sequential(nn.Conv3d(c_in, c_out, 2, stride=2), nn.InstanceNorm3d(c_out, affine=True), nn.PReLU(c_out))


def _up(c_in, c_out):
    return nn.Sequential(nn.ConvTranspose3d(c_in, c_out, 2, stride=2), nn.InstanceNorm3d(c_out, affine=True), nn.PReLU(c_out))


class SegNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths()
        self.encoder = nn.ModuleList([_ConvStage(cfg.in_channels, w[0], 1)])
        self.down = nn.ModuleList()
        for k in range(1, cfg.depth + 1):
            self.down.append(_down(w[k - 1], w[k]))
            self.encoder.append(_ConvStage(w[k], w[k], min(k + 1, 3)))
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for k in range(cfg.depth, 0, -1):
            self.up.append(_up(w[k], w[k - 1]))
            self.decoder.append(_ConvStage(2 * w[k - 1], w[k - 1], min(k, 3)))
        self.heads = nn.ModuleList([nn.Conv3d(w[0], 1, 1) for _ in range(cfg.heads)])
        # lesions are sparse: start every head at a low foreground probability
        for head in self.heads:
            nn.init.constant_(head.bias, math.log(cfg.prior / (1.0 - cfg.prior)))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        h = self.encoder[0](x)
        for down, stage in zip(self.down, self.encoder[1:]):
            skips.append(h)
            h = stage(down(h))
        for up, stage in zip(self.up, self.decoder):
            h = stage(torch.cat([up(h), skips.pop()], dim=1))
        return torch.cat([head(h) for head in self.heads], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Probabilities ``(B, 4, D, H, W)``; head 0 never sees channel ``y_a_t1``."""
        b = x.shape[0]
        blind = x.clone()
        blind[:, _Y_CHANNEL] = 0
        out = torch.sigmoid(self.logits(torch.cat([blind, x], dim=0)))
        return torch.cat([out[:b, :1], out[b:, 1:]], dim=1)

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_network(cfg: ModelConfig, seed: int = 0) -> SegNet:
    """Deterministically initialised network for ``(cfg, seed)``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = SegNet(cfg)
    return net


@dataclass(frozen=True)
class PredictionBundle:
    p_a_t1: Volume3D
    p_a_t2: Volume3D
    p_n_t2: Volume3D
    p_v_t2: Volume3D

    def __post_init__(self):
        ref = self.p_a_t1
        for v in self.volumes():
            if not v.same_grid(ref):
                raise ValidationError("prediction heads must share shape and spacing")
            if v.data.min() < 0 or v.data.max() > 1:
                raise ValidationError("predictions must lie in [0, 1]")

    def volumes(self) -> tuple[Volume3D, ...]:
        return tuple(getattr(self, h) for h in HEADS)

    def arrays(self) -> dict[str, np.ndarray]:
        return {h: getattr(self, h).data for h in HEADS}

    @property
    def shape(self):
        return self.p_a_t1.shape

    @classmethod
    def from_array(cls, arr: np.ndarray, spacing) -> PredictionBundle:
        return cls(*(Volume3D(np.asarray(arr[k], dtype=np.float32), spacing) for k in range(len(HEADS))))

    @classmethod
    def mean(cls, bundles) -> PredictionBundle:
        bundles = list(bundles)
        stack = np.stack([np.stack([v.data for v in b.volumes()]) for b in bundles])
        return cls.from_array(stack.astype(np.float64).mean(axis=0), bundles[0].p_a_t1.spacing)


def _to_tensor(bundle: InputBundle) -> torch.Tensor:
    return torch.from_numpy(bundle.channels())[None]


def forward(network: SegNet, bundle: InputBundle) -> PredictionBundle:
    """Evaluation-mode prediction for a bundle whose shape is a valid patch."""
    step = 2**network.cfg.depth
    if any(s % step for s in bundle.shape):
        raise ValidationError(f"input shape {bundle.shape} not divisible by {step}")
    network.eval()
    with torch.no_grad():
        out = network(_to_tensor(bundle))[0].numpy()
    return PredictionBundle.from_array(out, bundle.spacing)


def _starts(n: int, p: int, overlap: float) -> list[int]:
    if n <= p:
        return [0]
    stride = max(1, int(round(p * (1.0 - overlap))))
    starts = list(range(0, n - p + 1, stride))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def tile_origins(shape, patch, overlap: float) -> list[tuple[int, int, int]]:
    axes = [_starts(n, p, overlap) for n, p in zip(shape, patch)]
    return [(i, j, k) for i in axes[0] for j in axes[1] for k in axes[2]]


def sliding_inference(
    network: SegNet,
    bundle: InputBundle,
    patch=None,
    overlap: float = 0.5,
    pad: bool = False,
) -> PredictionBundle:
    """Tile the volume with patches, averaging predictions where tiles overlap."""
    from .assembly import extract_patch

    patch = tuple(int(p) for p in (patch or network.cfg.patch_size))
    if not 0 <= overlap < 1:
        raise ValidationError("overlap must lie in [0, 1)")
    shape = bundle.shape
    if any(n < p for n, p in zip(shape, patch)) and not pad:
        raise RangeError(f"volume {shape} smaller than patch {patch}; enable padding")
    acc = np.zeros((len(HEADS),) + shape, dtype=np.float64)
    count = np.zeros(shape, dtype=np.float64)
    for origin in tile_origins(shape, patch, overlap):
        tile = forward(network, extract_patch(bundle, origin, patch, pad=True))
        region = tuple(slice(o, min(o + p, n)) for o, p, n in zip(origin, patch, shape))
        local = tuple(slice(0, r.stop - r.start) for r in region)
        acc[(slice(None),) + region] += np.stack([v.data for v in tile.volumes()])[(slice(None),) + local]
        count[region] += 1
    return PredictionBundle.from_array(acc / count, bundle.spacing)


def save_checkpoint(path, network: SegNet, seed: int, epoch: int, extra: dict | None = None) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": asdict(network.cfg),
            "seed": int(seed),
            "epoch": int(epoch),
            "extra": extra or {},
            "state_dict": network.state_dict(),
        },
        Path(path),
    )


def load_checkpoint(path) -> tuple[SegNet, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a checkpoint file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    cfg = ModelConfig(**blob["model_config"])
    net = SegNet(cfg)
    net.load_state_dict(blob["state_dict"])
    net.eval()
    meta = {k: v for k, v in blob.items() if k != "state_dict"}
    return net, meta
