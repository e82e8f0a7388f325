"""Feedback-attention segmentation network.

Encoder-decoder with squeeze-and-excitation residual blocks and MixPool
hard-attention blocks. A MixPool block unions the max-pool-downscaled
previous-epoch mask with a learned binary spatial map and gates the
stage features with the union; the gated and ungated features are each
transformed and concatenated, doubling the channel count.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "NetworkConfig",
    "SELayer",
    "SEResidualBlock",
    "MixPoolBlock",
    "FANet",
    "count_parameters",
    "channel_table",
]

PLACEMENTS = ("none", "all_stages", "E1_D4")

ABLATIONS = {
    "B1": dict(mixpool_placement="none", feedback_at_inference=False),
    "B2": dict(mixpool_placement="all_stages", feedback_at_inference=False),
    "B3": dict(mixpool_placement="E1_D4", feedback_at_inference=True),
    "B4": dict(mixpool_placement="all_stages", feedback_at_inference=True),
}


@dataclass
class NetworkConfig:
    """Architecture knobs, including the ablation switches B1-B4."""

    depth: int = 4
    base_widths: tuple[int, ...] = (24, 48, 96, 192)
    in_channels: int = 3
    se_reduction: int = 16
    se_blocks_per_stage: int = 2
    mixpool_placement: str = "all_stages"
    mixpool_use_fl_branch: bool = True
    feedback_at_inference: bool = True
    binarize_threshold: float = 0.5

    def __post_init__(self):
        self.base_widths = tuple(int(w) for w in self.base_widths)
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.base_widths) != self.depth:
            raise ValueError(
                f"base_widths has {len(self.base_widths)} entries for depth {self.depth}"
            )
        if any(w < 1 for w in self.base_widths):
            raise ValueError("base_widths must be positive")
        if self.mixpool_placement not in PLACEMENTS:
            raise ValueError(
                f"mixpool_placement must be one of {PLACEMENTS}, got {self.mixpool_placement!r}"
            )
        if not 1 <= self.se_blocks_per_stage <= 4:
            raise ValueError("se_blocks_per_stage must be in 1..4")
        if self.se_reduction < 1:
            raise ValueError("se_reduction must be >= 1")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ValueError("binarize_threshold must lie in (0, 1)")

    @classmethod
    def for_ablation(cls, label: str, **overrides) -> "NetworkConfig":
        if label not in ABLATIONS:
            raise ValueError(f"unknown ablation {label!r}, expected one of {sorted(ABLATIONS)}")
        kwargs = dict(ABLATIONS[label])
        kwargs.update(overrides)
        return cls(**kwargs)

    @property
    def ablation_label(self) -> str | None:
        """B1..B4 when the switches match a canonical configuration."""
        if not self.mixpool_use_fl_branch:
            return None
        for label, kwargs in ABLATIONS.items():
            if all(getattr(self, k) == v for k, v in kwargs.items()):
                return label
        return None

    def mixpool_at(self, side: str, stage: int) -> bool:
        """Whether a MixPool block sits after encoder/decoder ``stage`` (1-based)."""
        if self.mixpool_placement == "none":
            return False
        if self.mixpool_placement == "all_stages":
            return True
        return (side, stage) in {("E", 1), ("D", self.depth)}

    @property
    def uses_mask(self) -> bool:
        return self.mixpool_placement != "none"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_widths"] = list(self.base_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


class SELayer(nn.Module):
    """Channel re-weighting: global average pool, bottleneck MLP, sigmoid gates."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        b, c = x.shape[:2]
        gate = x.mean(dim=(2, 3))
        gate = torch.sigmoid(self.fc2(F.relu(self.fc1(gate))))
        return x * gate.view(b, c, 1, 1)


class SEResidualBlock(nn.Module):
    """Two 3x3 conv-BN stages with an SE gate and an identity shortcut.

    The second ReLU is applied after the residual addition; the shortcut
    is a 1x1 conv projection whenever the channel counts differ.
    """

    def __init__(self, in_channels: int, out_channels: int, se_reduction: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.se = SELayer(out_channels, se_reduction)
        if in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        y = self.se(y)
        return F.relu(y + self.shortcut(x))


class MixPoolBlock(nn.Module):
    """Hard-attention block gating features with a mask union.

    The previous-epoch mask is max-pool downscaled to the feature
    resolution and ORed with a learned binary spatial map; the features
    multiplied by the union and the raw features each pass through a
    conv-BN-ReLU transform and are concatenated along channels. The
    learned map is a hard 0/1 gate, so no gradient flows through its
    binarization.
    """

    def __init__(self, channels: int, use_feature_branch: bool = True):
        super().__init__()
        self.use_feature_branch = use_feature_branch
        self.attn_conv = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.attn_bn = nn.BatchNorm2d(channels)
        self.attn_out = nn.Conv2d(channels, 1, 1)
        if use_feature_branch:
            self.feature_transform = nn.Sequential(
                nn.Conv2d(channels, channels, 3, padding=1, bias=False),
                nn.BatchNorm2d(channels),
                nn.ReLU(inplace=True),
            )
        self.attended_transform = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )

    @property
    def out_multiplier(self) -> int:
        return 2 if self.use_feature_branch else 1

    def attention_map(self, f: torch.Tensor) -> torch.Tensor:
        """Learned binary spatial map: sigmoid of a conv stack, cut at 0.5 (inclusive)."""
        logits = self.attn_out(F.relu(self.attn_bn(self.attn_conv(f))))
        return (torch.sigmoid(logits) >= 0.5).to(f.dtype)

    def unified_attention(self, f: torch.Tensor, prev_mask: torch.Tensor):
        """Return (union, gated features) before the output transforms."""
        h, w = f.shape[-2:]
        mh, mw = prev_mask.shape[-2:]
        if mh % h != 0 or mw % w != 0:
            raise ValueError(
                f"mask {mh}x{mw} does not downscale to feature map {h}x{w}"
            )
        m_prev = F.max_pool2d(prev_mask.to(f.dtype), kernel_size=(mh // h, mw // w))
        m_learned = self.attention_map(f)
        union = torch.maximum(m_prev, m_learned)
        return union, f * union

    def forward(self, f: torch.Tensor, prev_mask: torch.Tensor) -> torch.Tensor:
        _, attended = self.unified_attention(f, prev_mask)
        attended = self.attended_transform(attended)
        if not self.use_feature_branch:
            return attended
        return torch.cat([self.feature_transform(f), attended], dim=1)


class _EncoderStage(nn.Module):
    def __init__(self, cfg: NetworkConfig, stage: int, in_channels: int):
        super().__init__()
        width = cfg.base_widths[stage - 1]
        blocks = [SEResidualBlock(in_channels, width, cfg.se_reduction)]
        blocks += [
            SEResidualBlock(width, width, cfg.se_reduction)
            for _ in range(cfg.se_blocks_per_stage - 1)
        ]
        self.blocks = nn.Sequential(*blocks)
        self.mixpool = (
            MixPoolBlock(width, cfg.mixpool_use_fl_branch)
            if cfg.mixpool_at("E", stage)
            else None
        )
        self.out_channels = width * (self.mixpool.out_multiplier if self.mixpool else 1)

    def forward(self, x, prev_mask):
        skip = self.blocks(x)
        out = self.mixpool(skip, prev_mask) if self.mixpool is not None else skip
        return skip, F.max_pool2d(out, 2)


class _DecoderStage(nn.Module):
    def __init__(self, cfg: NetworkConfig, stage: int, in_channels: int, skip_channels: int):
        super().__init__()
        width = skip_channels
        self.up = nn.ConvTranspose2d(in_channels, width, kernel_size=4, stride=2, padding=1)
        blocks = [SEResidualBlock(2 * width, width, cfg.se_reduction)]
        blocks += [
            SEResidualBlock(width, width, cfg.se_reduction)
            for _ in range(cfg.se_blocks_per_stage - 1)
        ]
        self.blocks = nn.Sequential(*blocks)
        self.mixpool = (
            MixPoolBlock(width, cfg.mixpool_use_fl_branch)
            if cfg.mixpool_at("D", stage)
            else None
        )
        self.out_channels = width * (self.mixpool.out_multiplier if self.mixpool else 1)

    def forward(self, x, skip, prev_mask):
        y = self.up(x)
        y = self.blocks(torch.cat([y, skip], dim=1))
        return self.mixpool(y, prev_mask) if self.mixpool is not None else y


class FANet(nn.Module):
    """Four-encoder/four-decoder segmentation network with feedback attention.

    ``forward(image, prev_mask)`` consumes the full-resolution binary mask
    carried over from the previous epoch (or refinement iteration) and
    returns a per-pixel sigmoid probability map of the input resolution.
    The baseline configuration (no MixPool) ignores the mask entirely.
    """

    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        cfg = self.cfg

        self.encoders = nn.ModuleList()
        c = cfg.in_channels
        skip_channels = []
        for i in range(1, cfg.depth + 1):
            stage = _EncoderStage(cfg, i, c)
            self.encoders.append(stage)
            skip_channels.append(cfg.base_widths[i - 1])
            c = stage.out_channels

        self.decoders = nn.ModuleList()
        for j in range(1, cfg.depth + 1):
            stage = _DecoderStage(cfg, j, c, skip_channels[cfg.depth - j])
            self.decoders.append(stage)
            c = stage.out_channels

        self.head = nn.Conv2d(c + (1 if cfg.uses_mask else 0), 1, kernel_size=1)

    def _check_shapes(self, image: torch.Tensor, prev_mask: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4:
            raise ValueError(f"expected (batch, channels, H, W) image, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        stride = 2 ** self.cfg.depth
        if h % stride or w % stride:
            raise ValueError(f"spatial dims {h}x{w} must be divisible by {stride}")
        if prev_mask.ndim == 3:
            prev_mask = prev_mask.unsqueeze(1)
        if prev_mask.shape[-2:] != (h, w):
            raise ValueError(
                f"mask {tuple(prev_mask.shape[-2:])} must match image {h}x{w}"
            )
        return prev_mask.to(image.dtype)

    def forward(self, image: torch.Tensor, prev_mask: torch.Tensor) -> torch.Tensor:
        prev_mask = self._check_shapes(image, prev_mask)
        x = image
        skips = []
        for enc in self.encoders:
            skip, x = enc(x, prev_mask)
            skips.append(skip)
        for j, dec in enumerate(self.decoders):
            x = dec(x, skips[self.cfg.depth - 1 - j], prev_mask)
        if self.cfg.uses_mask:
            x = torch.cat([x, prev_mask], dim=1)
        return torch.sigmoid(self.head(x))


def channel_table(cfg: NetworkConfig) -> list[dict]:
    """Declared per-stage channel flow, for bookkeeping checks.

    Each row records input channels, the stage width (= skip width for
    encoders), and output channels after the optional MixPool doubling.
    """
    rows = []
    mult = 2 if cfg.mixpool_use_fl_branch else 1
    c = cfg.in_channels
    for i in range(1, cfg.depth + 1):
        w = cfg.base_widths[i - 1]
        out = w * (mult if cfg.mixpool_at("E", i) else 1)
        rows.append({"stage": f"E{i}", "in": c, "width": w, "out": out})
        c = out
    for j in range(1, cfg.depth + 1):
        w = cfg.base_widths[cfg.depth - j]
        out = w * (mult if cfg.mixpool_at("D", j) else 1)
        rows.append({"stage": f"D{j}", "in": c, "width": w, "out": out})
        c = out
    rows.append({"stage": "head", "in": c + (1 if cfg.uses_mask else 0), "width": 1, "out": 1})
    return rows


def count_parameters(cfg: NetworkConfig) -> int:
    """Total trainable scalar count of the assembled model."""
    model = FANet(cfg)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
