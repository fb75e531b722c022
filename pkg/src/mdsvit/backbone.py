"""Swin-style hierarchical feature extractor producing six multi-scale maps."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from . import tensor as T
from .exceptions import ConfigError, ShapeError
from .layers import LayerNorm, Module, PatchEmbed, PatchMerging, SwinBlock, _rng, nchw
from .tensor import Tensor

# stages (0-based) that are tapped twice: mid-stage and at stage output
TAPPED_STAGES = (1, 2)


@dataclass
class BackboneConfig:
    patch_size: int = 4
    embed_dim: int = 96
    depths: list[int] = field(default_factory=lambda: [2, 2, 6, 2])
    num_heads: list[int] = field(default_factory=lambda: [3, 6, 12, 24])
    window_size: int = 7
    mlp_ratio: int = 4
    in_chans: int = 3
    use_shift: bool = True
    pad_input: bool = True

    @classmethod
    def paper(cls) -> "BackboneConfig":
        return cls()

    @classmethod
    def toy(cls) -> "BackboneConfig":
        return cls(embed_dim=16, depths=[1, 2, 2, 1], num_heads=[2, 2, 4, 4], window_size=4)

    @property
    def stage_dims(self) -> list[int]:
        return [self.embed_dim * 2**i for i in range(4)]

    @property
    def reduction(self) -> int:
        return self.patch_size * 8

    def validate(self) -> None:
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ConfigError("backbone needs exactly four stages (depths and num_heads of length 4)")
        if any(d < 1 for d in self.depths):
            raise ConfigError(f"all stage depths must be >= 1, got {self.depths}")
        for i in TAPPED_STAGES:
            if self.depths[i] < 2:
                raise ConfigError(
                    f"stage {i + 1} is tapped twice and needs depth >= 2, got {self.depths[i]}"
                )
        for dim, heads in zip(self.stage_dims, self.num_heads):
            if dim % heads:
                raise ConfigError(f"stage dim {dim} not divisible by {heads} heads")
        if self.window_size < 1 or self.patch_size < 1:
            raise ConfigError("window_size and patch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeaturePyramid:
    """Six backbone maps in (N, C, H, W) layout, finest first."""

    x1: Tensor
    x2: Tensor
    x3: Tensor
    x4: Tensor
    x5: Tensor
    x6: Tensor

    def as_list(self) -> list[Tensor]:
        return [self.x1, self.x2, self.x3, self.x4, self.x5, self.x6]

    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.as_list()]


class SwinStage(Module):
    def __init__(self, dim, depth, num_heads, window_size, mlp_ratio, use_shift, downsample, seed):
        rng = _rng(seed)
        self.downsample = PatchMerging(dim // 2, seed=rng) if downsample else None
        self.blocks = [
            SwinBlock(
                dim,
                num_heads,
                window_size,
                shift=(window_size // 2 if use_shift and i % 2 else 0),
                mlp_ratio=mlp_ratio,
                seed=rng,
            )
            for i in range(depth)
        ]

    def forward(self, x: Tensor, tap_after: int | None = None):
        """Run the stage on (N, H, W, C) tokens; optionally also return a mid-stage tap."""
        if self.downsample is not None:
            x = self.downsample.forward_tokens(x)
        tap = None
        for i, block in enumerate(self.blocks):
            x = block(x)
            if tap_after is not None and i + 1 == tap_after:
                tap = x
        return x, tap


class SwinBackbone(Module):
    def __init__(self, config: BackboneConfig, seed=0):
        config.validate()
        rng = _rng(seed)
        self.config = config
        dims = config.stage_dims
        self.patch_embed = PatchEmbed(config.patch_size, config.in_chans, dims[0], seed=rng)
        self.stages = [
            SwinStage(
                dims[i],
                config.depths[i],
                config.num_heads[i],
                config.window_size,
                config.mlp_ratio,
                config.use_shift,
                downsample=i > 0,
                seed=rng,
            )
            for i in range(4)
        ]
        self.norm = LayerNorm(dims[3])

    def prepare(self, image: Tensor) -> Tensor:
        """Zero-pad the image bottom/right to a multiple of the total stride."""
        if image.ndim != 4 or image.shape[1] != self.config.in_chans:
            raise ShapeError(f"backbone expects (N, {self.config.in_chans}, H, W), got {image.shape}")
        r = self.config.reduction
        h, w = image.shape[2:]
        ph, pw = (-h) % r, (-w) % r
        if not (ph or pw):
            return image
        if not self.config.pad_input:
            raise ShapeError(f"input {h}x{w} is not divisible by {r} and padding is disabled")
        return T.pad(image, [(0, 0), (0, 0), (0, ph), (0, pw)])

    def forward(self, image: Tensor) -> FeaturePyramid:
        x = self.patch_embed(self.prepare(image))
        taps = []
        for i, stage in enumerate(self.stages):
            mid = len(stage.blocks) // 2 if i in TAPPED_STAGES else None
            x, tap = stage(x, tap_after=mid)
            if tap is not None:
                taps.append(tap)
            taps.append(self.norm(x) if i == 3 else x)
        return FeaturePyramid(*[nchw(t) for t in taps])


def build_backbone(config: BackboneConfig, seed=0) -> SwinBackbone:
    return SwinBackbone(config, seed=seed)


def backbone_forward(bb: SwinBackbone, image: Tensor) -> FeaturePyramid:
    return bb(image)


def feature_shapes(config: BackboneConfig, n: int, h: int, w: int) -> list[tuple[int, int, int, int]]:
    """Expected FeaturePyramid shapes for an (n, 3, h, w) input (after padding)."""
    r = config.reduction
    hp, wp = -(-h // r) * r, -(-w // r) * r
    d = config.stage_dims
    p = config.patch_size
    scales = [(d[0], p), (d[1], 2 * p), (d[1], 2 * p), (d[2], 4 * p), (d[2], 4 * p), (d[3], 8 * p)]
    return [(n, c, hp // s, wp // s) for c, s in scales]

