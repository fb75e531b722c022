"""Full model assembly: backbone, six transformer encoders, two decoders, merge head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, FeaturePyramid, SwinBackbone, feature_shapes
from .exceptions import ConfigError, ShapeError
from .layers import (
    BatchNorm2d,
    Conv2d,
    LayerNorm,
    Mlp,
    Module,
    MultiHeadSelfAttention,
    Parameter,
    _rng,
    trunc_normal,
)
from .tensor import Tensor

PRESETS = ("paper", "toy")


@dataclass
class ModelConfig:
    """Every architecture hyperparameter; build via :meth:`preset_config`."""

    preset: str = "toy"
    input_hw: tuple[int, int] = (96, 128)
    scale: float = 1 / 16
    backbone: BackboneConfig = field(default_factory=BackboneConfig.toy)
    encoder_dims: list[int] = field(default_factory=lambda: [32, 32, 48, 48, 48, 48])
    encoder_heads: list[int] = field(default_factory=lambda: [2, 2, 4, 4, 4, 4])
    encoder_layers: int = 2
    mlp_ratio: int = 4
    decoder_channels: list[int] = field(default_factory=lambda: [48, 32, 16, 16, 8, 8, 1])
    merge_channels: list[int] = field(default_factory=lambda: [16, 32, 32, 16, 8, 4, 1])

    @classmethod
    def preset_config(cls, name: str, input_hw=None) -> "ModelConfig":
        if name == "paper":
            cfg = cls(
                preset="paper",
                input_hw=(288, 384),
                scale=1.0,
                backbone=BackboneConfig.paper(),
                encoder_dims=[512, 512, 768, 768, 768, 768],
                encoder_heads=[8, 8, 12, 12, 12, 12],
                decoder_channels=[768, 512, 256, 128, 64, 32, 1],
                merge_channels=[64, 128, 128, 96, 64, 32, 1],
            )
        elif name == "toy":
            cfg = cls()
        else:
            raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
        if input_hw is not None:
            cfg.input_hw = (int(input_hw[0]), int(input_hw[1]))
        cfg.validate()
        return cfg

    @property
    def decoder1_upsamples(self) -> int:
        return int(round(math.log2(self.backbone.reduction)))

    @property
    def decoder2_upsamples(self) -> int:
        return self.decoder1_upsamples - 1

    def encoder_grids(self) -> list[tuple[int, int]]:
        h, w = self.input_hw
        return [s[2:] for s in feature_shapes(self.backbone, 1, h, w)]

    def validate(self) -> None:
        self.backbone.validate()
        h, w = self.input_hw
        r = self.backbone.reduction
        if h % r or w % r:
            raise ConfigError(f"input size {h}x{w} must be divisible by {r}")
        if 2 ** self.decoder1_upsamples != r:
            raise ConfigError(f"backbone reduction {r} must be a power of two")
        if len(self.encoder_dims) != 6 or len(self.encoder_heads) != 6:
            raise ConfigError("six encoder dims and six head counts are required")
        for d, hd in zip(self.encoder_dims, self.encoder_heads):
            if d % hd:
                raise ConfigError(f"encoder dim {d} not divisible by {hd} heads")
        for name, chans in (("decoder", self.decoder_channels), ("merge", self.merge_channels)):
            if len(chans) != 7 or chans[-1] != 1:
                raise ConfigError(f"{name} needs 7 conv layers ending in 1 channel, got {chans}")
        if self.decoder1_upsamples > 6:
            raise ConfigError("too many upsampling steps for a 7-layer decoder")
        e = self.encoder_dims
        # decoder 1: x6 -> (* x4) -> (* x2); decoder 2: x5 -> (* x3) -> (* x1)
        for deep, skip_a, skip_b in ((5, 3, 1), (4, 2, 0)):
            c = self.decoder_channels
            if c[0] != e[skip_a] or c[1] != e[skip_b]:
                raise ConfigError(
                    f"decoder on x{deep + 1} needs layer-1/2 widths equal to encoder dims "
                    f"{e[skip_a]}/{e[skip_b]}, got {c[0]}/{c[1]}"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d["backbone"])
        d["input_hw"] = tuple(d["input_hw"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class EncoderLayer(Module):
    """z' = MSA(LN(z)) + z ;  z = MLP(LN(z')) + z'."""

    def __init__(self, dim, heads, mlp_ratio, seed):
        rng = _rng(seed)
        self.norm1 = LayerNorm(dim)
        self.msa = MultiHeadSelfAttention(dim, heads, seed=rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio, seed=rng)

    def forward(self, z: Tensor) -> Tensor:
        z = z + self.msa(self.norm1(z))
        return z + self.mlp(self.norm2(z))


class TransformerEncoder(Module):
    """1x1 projection + learned absolute positions, then a stack of encoder layers."""

    def __init__(self, in_ch, dim, heads, grid, num_layers=2, mlp_ratio=4, seed=None):
        rng = _rng(seed)
        self.grid = tuple(grid)
        self.proj = Conv2d(in_ch, dim, kernel_size=1, seed=rng)
        self.pos = Parameter(trunc_normal((grid[0] * grid[1], dim), 0.02, rng))
        self.layers = [EncoderLayer(dim, heads, mlp_ratio, rng) for _ in range(num_layers)]

    @property
    def dim(self) -> int:
        return self.pos.shape[1]

    def embed(self, x: Tensor) -> Tensor:
        """z0: projected tokens (N, h*w, dim) plus positions, row-major token order."""
        n, _, h, w = x.shape
        if (h, w) != self.grid:
            raise ShapeError(f"encoder grid {self.grid} does not match input {h}x{w}; rebuild for this resolution")
        z = self.proj(x).reshape(n, self.dim, h * w).transpose(0, 2, 1)
        return z + self.pos.broadcast_to(z.shape)

    def forward(self, x: Tensor) -> Tensor:
        n, _, h, w = x.shape
        z = self.embed(x)
        for layer in self.layers:
            z = layer(z)
        return z.transpose(0, 2, 1).reshape(n, self.dim, h, w)


def encoder_forward(enc: TransformerEncoder, x: Tensor) -> Tensor:
    return enc(x)


# ---------------------------------------------------------------------------
# decoders and merge
# ---------------------------------------------------------------------------

class ConvStack(Module):
    """Seven 3x3 convs; BN+ReLU after the first six, sigmoid after the last."""

    def __init__(self, in_ch, channels, seed=None):
        rng = _rng(seed)
        chans = [in_ch] + list(channels)
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, seed=rng) for i in range(len(channels))]
        self.bns = [BatchNorm2d(c) for c in channels[:-1]]

    def block(self, i: int, x: Tensor) -> Tensor:
        x = self.convs[i](x)
        if i < len(self.bns):
            return T.relu(self.bns[i](x))
        return T.sigmoid(x)


class DecoderHead(ConvStack):
    """CNN decoder with x2 bilinear upsampling after the first ``num_upsamples``
    layers and multiplicative skips after layers 1 and 2."""

    def __init__(self, in_ch, channels, num_upsamples, seed=None):
        super().__init__(in_ch, channels, seed)
        self.num_upsamples = int(num_upsamples)

    def forward(self, deep: Tensor, skip1: Tensor, skip2: Tensor, trace: list | None = None) -> Tensor:
        """``trace``, when given, collects each layer's input tensor."""
        x = deep
        skips = {0: skip1, 1: skip2}
        for i in range(len(self.convs)):
            if trace is not None:
                trace.append(x)
            x = self.block(i, x)
            if i < self.num_upsamples:
                x = T.upsample_bilinear(x, 2)
            if i in skips:
                s = skips[i]
                if s.shape != x.shape:
                    raise ShapeError(f"skip map after layer {i + 1} has shape {s.shape}, expected {x.shape}")
                x = x * s
        return x


def decoder_forward(dec: DecoderHead, e_a: Tensor, e_b: Tensor, e_c: Tensor) -> Tensor:
    return dec(e_a, e_b, e_c)


class MergeNet(ConvStack):
    def __init__(self, channels, seed=None):
        super().__init__(2, channels, seed)

    def forward(self, m1: Tensor, m2: Tensor) -> Tensor:
        if m1.shape != m2.shape or m1.ndim != 4 or m1.shape[1] != 1:
            raise ShapeError(f"merge inputs must both be (N, 1, H, W); got {m1.shape} and {m2.shape}")
        x = T.concat([m1, m2], axis=1)
        for i in range(len(self.convs)):
            x = self.block(i, x)
        return x


def merge_forward(mn: MergeNet, m1: Tensor, m2: Tensor) -> Tensor:
    return mn(m1, m2)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

class MDSViTNet(Module):
    def __init__(self, config: ModelConfig, seed=0):
        config.validate()
        rng = _rng(seed)
        self.config = config
        self.backbone = SwinBackbone(config.backbone, seed=rng)
        d = config.backbone.stage_dims
        in_chs = [d[0], d[1], d[1], d[2], d[2], d[3]]
        grids = config.encoder_grids()
        self.encoders = [
            TransformerEncoder(
                in_chs[i],
                config.encoder_dims[i],
                config.encoder_heads[i],
                grids[i],
                config.encoder_layers,
                config.mlp_ratio,
                seed=rng,
            )
            for i in range(6)
        ]
        e = config.encoder_dims
        self.decoder1 = DecoderHead(e[5], config.decoder_channels, config.decoder1_upsamples, seed=rng)
        self.decoder2 = DecoderHead(e[4], config.decoder_channels, config.decoder2_upsamples, seed=rng)
        self.merge = MergeNet(config.merge_channels, seed=rng)

    def encode(self, image: Tensor) -> list[Tensor]:
        h, w = self.config.input_hw
        if image.ndim != 4 or image.shape[1:] != (3, h, w):
            raise ShapeError(
                f"model expects (N, 3, {h}, {w}) images, got {image.shape}; "
                "changing resolution requires rebuilding the model"
            )
        feats = self.backbone(image)
        return [enc(x) for enc, x in zip(self.encoders, feats.as_list())]

    def forward(self, image: Tensor, mode: str = "dual") -> dict[str, Tensor]:
        if mode not in ("dual", "merged"):
            raise ValueError(f"mode must be 'dual' or 'merged', got {mode!r}")
        e1, e2, e3, e4, e5, e6 = self.encode(image)
        out = {"map1": self.decoder1(e6, e4, e2), "map2": self.decoder2(e5, e3, e1)}
        if mode == "merged":
            out["merged"] = self.merge(out["map1"], out["map2"])
        return out

    def features(self, image: Tensor) -> FeaturePyramid:
        return self.backbone(image)


def build_model(config: ModelConfig | str = "toy", seed=0) -> MDSViTNet:
    if isinstance(config, str):
        config = ModelConfig.preset_config(config)
    return MDSViTNet(config, seed=seed)


def model_forward(model: MDSViTNet, image: Tensor, mode: str = "dual") -> dict[str, Tensor]:
    return model(image, mode)


def count_parameters(model: MDSViTNet) -> dict[str, int]:
    parts = {
        "backbone": model.backbone.num_parameters(),
        "encoders": int(sum(e.num_parameters() for e in model.encoders)),
        "decoders": model.decoder1.num_parameters() + model.decoder2.num_parameters(),
        "merge": model.merge.num_parameters(),
    }
    parts["total"] = int(sum(parts.values()))
    return parts


def parameter_norms(model: MDSViTNet) -> dict[str, float]:
    """Gradient L2 norm per top-level component (0.0 where no gradient exists)."""
    def norm(mod):
        sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in mod.parameters() if p.grad is not None)
        return math.sqrt(sq)

    out = {
        "backbone": norm(model.backbone),
        "patch_embed": norm(model.backbone.patch_embed),
        "decoder1": norm(model.decoder1),
        "decoder2": norm(model.decoder2),
        "merge": norm(model.merge),
    }
    for i, enc in enumerate(model.encoders, start=1):
        out[f"pos{i}"] = 0.0 if enc.pos.grad is None else float(np.linalg.norm(enc.pos.grad))
    return out
