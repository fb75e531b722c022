"""Neural-network layers built on :mod:`mdsvit.tensor`.

Token tensors inside the Swin machinery are channel-last (N, H, W, C); the
public ``*_forward`` helpers accept and return channel-first (N, C, H, W)
maps so they compose with the convolutional parts of the model.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DegenerateInputError, ShapeError
from .tensor import Tensor

MASK_VALUE = -1e9


class Parameter(Tensor):
    """A trainable leaf tensor owned by a :class:`Module`."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.asarray(data), requires_grad=requires_grad)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def trunc_normal(shape, std: float, rng, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def fan_in_uniform(shape, fan_in: int, rng, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal module base: parameter discovery, train/eval mode, state dicts."""

    training = True
    _buffer_names: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "Module", str]]:
        for name in self._buffer_names:
            yield prefix + name, self, name
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, owner, attr in self.named_buffers():
            setattr(owner, attr, getattr(owner, attr).astype(dtype))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, owner, attr in self.named_buffers():
            state[name] = np.array(getattr(owner, attr), copy=True)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        expected = set()
        for name, p in self.named_parameters():
            expected.add(name)
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
                p.data = arr.astype(p.dtype).copy()
        for name, owner, attr in self.named_buffers():
            expected.add(name)
            if name in state:
                current = getattr(owner, attr)
                setattr(owner, attr, np.asarray(state[name]).astype(current.dtype).copy())
        if strict:
            missing = expected - set(state)
            unexpected = set(state) - expected
            if missing or unexpected:
                raise KeyError(f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")


# ---------------------------------------------------------------------------
# basic layers
# ---------------------------------------------------------------------------

class Linear(Module):
    """``y = x W + b`` with W stored as (in_features, out_features)."""

    def __init__(self, in_features, out_features, bias=True, init="trunc_normal", seed=None):
        rng = _rng(seed)
        if init == "trunc_normal":
            w = trunc_normal((in_features, out_features), 0.02, rng)
            b = np.zeros(out_features, np.float32)
        else:
            w = fan_in_uniform((in_features, out_features), in_features, rng)
            b = fan_in_uniform((out_features,), in_features, rng)
        self.weight = Parameter(w)
        self.bias = Parameter(b) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Square 1x1 or 3x3 convolution; 3x3 kernels use padding 1 so size is kept."""

    def __init__(self, in_ch, out_ch, kernel_size=3, stride=1, padding=None, bias=True, seed=None):
        if kernel_size not in (1, 3):
            raise ConfigError(f"kernel_size must be 1 or 3, got {kernel_size}")
        rng = _rng(seed)
        fan_in = in_ch * kernel_size * kernel_size
        self.weight = Parameter(fan_in_uniform((out_ch, in_ch, kernel_size, kernel_size), fan_in, rng))
        self.bias = Parameter(fan_in_uniform((out_ch,), fan_in, rng)) if bias else None
        self.stride = int(stride)
        self.padding = kernel_size // 2 if padding is None else int(padding)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


def conv2d_forward(layer: Conv2d, x: Tensor) -> Tensor:
    return layer(x)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, num_channels, eps=1e-5, momentum=0.1):
        if not 0.0 < momentum < 1.0:
            raise ConfigError(f"momentum must be in (0, 1), got {momentum}")
        self.gamma = Parameter(np.ones(num_channels, np.float32))
        self.beta = Parameter(np.zeros(num_channels, np.float32))
        self.running_mean = np.zeros(num_channels, np.float32)
        self.running_var = np.ones(num_channels, np.float32)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(f"BatchNorm2d({self.gamma.shape[0]}) got input {x.shape}")
        use_batch = self.training
        if use_batch and x.shape[0] * x.shape[2] * x.shape[3] == 1:
            raise DegenerateInputError("batch norm in train mode needs more than one value per channel")
        out, mu, var = T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps, use_batch
        )
        if use_batch:
            m = self.momentum
            # biased variance keeps eval output identical to train output on the same batch
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(self.running_var.dtype)
        return out


def batchnorm2d_forward(layer: BatchNorm2d, x: Tensor, mode: str | None = None) -> Tensor:
    if mode is not None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        layer.train(mode == "train")
    return layer(x)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Parameter(np.ones(dim, np.float32))
        self.beta = Parameter(np.zeros(dim, np.float32))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.gamma.shape[0]:
            raise ShapeError(f"LayerNorm({self.gamma.shape[0]}) got input {x.shape}")
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


_ACTIVATIONS = {"relu": T.relu, "sigmoid": T.sigmoid, "gelu": T.gelu}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    return T.upsample_bilinear(x, factor)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

# above this many score entries, inference attends one (batch, head) slice at a time
_CHUNK_ELEMENTS = 1 << 24


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention with separate q/k/v/out projections."""

    def __init__(self, dim, num_heads, qkv_bias=True, seed=None):
        if dim % num_heads:
            raise ConfigError(f"dim {dim} is not divisible by num_heads {num_heads}")
        rng = _rng(seed)
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.q = Linear(dim, dim, qkv_bias, seed=rng)
        self.k = Linear(dim, dim, qkv_bias, seed=rng)
        self.v = Linear(dim, dim, qkv_bias, seed=rng)
        self.proj = Linear(dim, dim, seed=rng)

    def _heads(self, x: Tensor) -> Tensor:
        n, t, _ = x.shape
        return x.reshape(n, t, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, tokens: Tensor, bias: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        """Attend over (N, T, dim) tokens.

        ``bias`` is a learned additive term of shape (heads, T, T); ``mask`` is
        a constant additive array broadcastable to (N, heads, T, T).
        """
        if tokens.ndim != 3 or tokens.shape[-1] != self.dim:
            raise ShapeError(f"MSA expects (N, T, {self.dim}) tokens, got {tokens.shape}")
        n, t, _ = tokens.shape
        if t == 0:
            raise ShapeError("MSA got an empty token sequence")
        q = self._heads(self.q(tokens) * self.scale)
        k = self._heads(self.k(tokens))
        v = self._heads(self.v(tokens))
        big = n * self.num_heads * t * t > _CHUNK_ELEMENTS
        if not T.is_grad_enabled() and big:
            ctx = self._attend_chunked(q, k, v, bias, mask)
        else:
            ctx = self._attend(q, k, v, bias, mask)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(n, t, self.dim)
        return self.proj(ctx)

    @staticmethod
    def _attend(q, k, v, bias, mask):
        scores = q @ k.transpose(0, 1, 3, 2)
        if bias is not None:
            scores = scores + bias.broadcast_to(scores.shape)
        if mask is not None:
            scores = scores + np.broadcast_to(mask, scores.shape).astype(scores.dtype)
        return T.softmax(scores, axis=-1) @ v

    def _attend_chunked(self, q, k, v, bias, mask):
        n, h, t, d = q.shape
        out = np.empty((n, h, t, d), dtype=q.dtype)
        full_mask = None if mask is None else np.broadcast_to(mask, (n, h, t, t))
        for i in range(n):
            for j in range(h):
                sl = (slice(i, i + 1), slice(j, j + 1))
                b = None if bias is None else bias[j : j + 1]
                m = None if full_mask is None else full_mask[sl]
                out[i, j] = self._attend(q[sl], k[sl], v[sl], b, m).data[0, 0]
        return Tensor(out)


def msa_forward(layer: MultiHeadSelfAttention, tokens: Tensor) -> Tensor:
    return layer(tokens)


class Mlp(Module):
    def __init__(self, dim, expansion=4, seed=None):
        rng = _rng(seed)
        self.fc1 = Linear(dim, expansion * dim, seed=rng)
        self.fc2 = Linear(expansion * dim, dim, seed=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def relative_position_index(ws: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(ws), np.arange(ws), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (ws - 1)
    return rel[0] * (2 * ws - 1) + rel[1]


def _region_ids(size: int, ws: int, shift: int) -> np.ndarray:
    ids = np.zeros(size, dtype=np.int64)
    if shift:
        ids[size - ws : size - shift] = 1
        ids[size - shift :] = 2
    return ids


def window_partition(x: Tensor, ws: int) -> Tensor:
    n, h, w, c = x.shape
    x = x.reshape(n, h // ws, ws, w // ws, ws, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n * (h // ws) * (w // ws), ws * ws, c)


def window_reverse(windows: Tensor, ws: int, n: int, h: int, w: int) -> Tensor:
    c = windows.shape[-1]
    x = windows.reshape(n, h // ws, w // ws, ws, ws, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h, w, c)


def shifted_window_mask(h: int, w: int, ws: int, shift: tuple[int, int], valid_hw: tuple[int, int]) -> np.ndarray | None:
    """Additive mask (num_windows, ws*ws, ws*ws) for a padded, rolled grid.

    Keys are blocked when they come from a different pre-roll region (wrapped
    content) or from zero padding. Returns None when nothing needs masking.
    """
    sh, sw = shift
    vh, vw = valid_hw
    if not sh and not sw and (vh, vw) == (h, w):
        return None
    region = _region_ids(h, ws, sh)[:, None] * 3 + _region_ids(w, ws, sw)[None, :]
    valid = np.zeros((h, w), dtype=bool)
    valid[:vh, :vw] = True
    valid = np.roll(valid, (-sh, -sw), axis=(0, 1))
    def part(a):
        return a.reshape(h // ws, ws, w // ws, ws).transpose(0, 2, 1, 3).reshape(-1, ws * ws)
    reg_w, valid_w = part(region), part(valid)
    blocked = (reg_w[:, :, None] != reg_w[:, None, :]) | ~valid_w[:, None, :]
    return np.where(blocked, MASK_VALUE, 0.0)


class WindowAttention(Module):
    """(Shifted) window multi-head attention with a relative position bias table."""

    def __init__(self, dim, num_heads, window_size, shift=0, seed=None):
        if not 0 <= shift < window_size:
            raise ConfigError(f"shift must be in [0, window_size), got {shift}")
        rng = _rng(seed)
        self.window_size = int(window_size)
        self.shift = int(shift)
        self.msa = MultiHeadSelfAttention(dim, num_heads, seed=rng)
        self.relative_position_bias = Parameter(
            trunc_normal(((2 * window_size - 1) ** 2, num_heads), 0.02, rng)
        )
        self._rel_index = relative_position_index(window_size)

    def effective_shift(self, hp: int, wp: int) -> tuple[int, int]:
        ws = self.window_size
        return (0 if ws >= hp else self.shift, 0 if ws >= wp else self.shift)

    def position_bias(self) -> Tensor:
        t = self.window_size ** 2
        table = self.relative_position_bias[self._rel_index.reshape(-1)]
        return table.reshape(t, t, -1).transpose(2, 0, 1)

    def forward_tokens(self, x: Tensor) -> Tensor:
        """(N, H, W, C) -> (N, H, W, C); pads to window multiples internally."""
        n, h, w, c = x.shape
        ws = self.window_size
        ph, pw = (-h) % ws, (-w) % ws
        if ph or pw:
            x = T.pad(x, [(0, 0), (0, ph), (0, pw), (0, 0)])
        hp, wp = h + ph, w + pw
        sh, sw = self.effective_shift(hp, wp)
        if sh or sw:
            x = T.roll(x, (-sh, -sw), (1, 2))
        windows = window_partition(x, ws)
        mask = shifted_window_mask(hp, wp, ws, (sh, sw), (h, w))
        if mask is not None:
            n_win = mask.shape[0]
            mask = np.broadcast_to(mask[None, :, None], (n, n_win, 1, ws * ws, ws * ws)).reshape(
                n * n_win, 1, ws * ws, ws * ws
            )
        out = self.msa(windows, bias=self.position_bias(), mask=mask)
        x = window_reverse(out, ws, n, hp, wp)
        if sh or sw:
            x = T.roll(x, (sh, sw), (1, 2))
        if ph or pw:
            x = x[:, :h, :w, :]
        return x

    def forward(self, x: Tensor) -> Tensor:
        return nchw(self.forward_tokens(nhwc(x)))


def window_attention_forward(layer: WindowAttention, x: Tensor, pad: bool = False) -> Tensor:
    """(N, C, H, W) window attention; H and W must be window multiples unless ``pad``."""
    ws = layer.window_size
    if not pad and (x.shape[2] % ws or x.shape[3] % ws):
        raise ShapeError(f"spatial size {x.shape[2:]} is not divisible by window size {ws}")
    return layer(x)


def nhwc(x: Tensor) -> Tensor:
    return x.transpose(0, 2, 3, 1)


def nchw(x: Tensor) -> Tensor:
    return x.transpose(0, 3, 1, 2)


class SwinBlock(Module):
    """Pre-norm window-attention block followed by a pre-norm MLP."""

    def __init__(self, dim, num_heads, window_size, shift=0, mlp_ratio=4, seed=None):
        rng = _rng(seed)
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size, shift, seed=rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio, seed=rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn.forward_tokens(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchMerging(Module):
    """2x2 neighbourhood concat (4C) -> LayerNorm -> linear 4C -> 2C without bias."""

    def __init__(self, dim, seed=None):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, bias=False, seed=seed)

    def forward_tokens(self, x: Tensor) -> Tensor:
        _, h, w, _ = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"patch merging needs even H and W, got {h}x{w}")
        parts = [x[:, 0::2, 0::2, :], x[:, 1::2, 0::2, :], x[:, 0::2, 1::2, :], x[:, 1::2, 1::2, :]]
        return self.reduction(self.norm(T.concat(parts, axis=-1)))

    def forward(self, x: Tensor) -> Tensor:
        return nchw(self.forward_tokens(nhwc(x)))


def patch_merging_forward(layer: PatchMerging, x: Tensor) -> Tensor:
    return layer(x)


class PatchEmbed(Module):
    """Non-overlapping p x p patches -> linear embedding -> LayerNorm.

    Equivalent to a stride-p convolution with a p x p kernel.
    """

    def __init__(self, patch_size, in_ch, dim, seed=None):
        self.patch_size = int(patch_size)
        self.proj = Linear(in_ch * patch_size * patch_size, dim, seed=seed)
        self.norm = LayerNorm(dim)

    def forward(self, image: Tensor) -> Tensor:
        n, c, h, w = image.shape
        p = self.patch_size
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} is not divisible by patch size {p}")
        x = image.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
        x = x.reshape(n, h // p, w // p, c * p * p)
        return self.norm(self.proj(x))
