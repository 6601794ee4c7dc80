"""The invertible conversion stack: 1x1 invertible convolutions, then FLOW blocks.

A FLOW block is two affine couplings.  The first rescales and shifts the
lower channel half using a conversion net fed with the upper half, the
second does the mirror image, so every channel is transformed once per
block.  Each conversion net pre-encodes with two convolutions and then runs
a stack of attention + convolution blocks.

Feature matrices are ``(T, C)`` or batched ``(B, T, C)``; a frame's channel
vector is a row.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.linalg

from .tensor import (
    Tensor,
    concat,
    conv1d,
    layer_norm,
    matmul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    split,
    transpose,
)

MAX_CONDITION = 1e8
_MASKED_SCORE = -1e9


class SingularWeightError(ArithmeticError):
    """An invertible convolution's weight is singular or too ill-conditioned to invert."""


@dataclass(frozen=True)
class NetConfig:
    n_blocks: int = 4
    d_h: int = 512
    pre_kernel: int = 3
    attn_heads: int = 2
    block_inner_channels: int = 1032
    block_kernels: tuple[int, int] = (9, 1)
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "block_kernels", tuple(self.block_kernels))
        if min(self.n_blocks, self.d_h, self.attn_heads, self.block_inner_channels) < 1:
            raise ValueError("NetConfig counts and widths must be >= 1")
        if len(self.block_kernels) != 2:
            raise ValueError("block_kernels needs exactly two kernel sizes")
        for k in (self.pre_kernel, *self.block_kernels):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel size {k} must be odd for same padding")


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = 80
    n_invconv: int = 2
    n_flows: int = 4
    net: NetConfig = field(default_factory=NetConfig)
    coupling_eps: float = 2.0

    def __post_init__(self):
        if isinstance(self.net, dict):
            object.__setattr__(self, "net", NetConfig(**self.net))
        if self.n_channels < 2 or self.n_channels % 2:
            raise ValueError(f"n_channels must be even, got {self.n_channels}")
        if self.n_invconv < 1 or self.n_flows < 1:
            raise ValueError("n_invconv and n_flows must be >= 1")
        if not np.isfinite(self.coupling_eps):
            raise ValueError("coupling_eps must be finite")
        if self.n_channels % self.net.attn_heads:
            raise ValueError(
                f"attention width {self.n_channels} not divisible by {self.net.attn_heads} heads"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"]["block_kernels"] = list(self.net.block_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        net = NetConfig(**d.pop("net", {}))
        return cls(net=net, **d)

    def with_net(self, **kw) -> ModelConfig:
        return replace(self, net=replace(self.net, **kw))


def _param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Conv1d:
    def __init__(self, cin, cout, kernel, rng, dtype, zero=False):
        if zero:
            w = np.zeros((kernel, cin, cout))
        else:
            bound = np.sqrt(6.0 / (cin * kernel))
            w = rng.uniform(-bound, bound, size=(kernel, cin, cout))
        self.weight = _param(w, dtype)
        self.bias = _param(np.zeros(cout), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, padding="same")

    def named_parameters(self, prefix):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class LayerNorm:
    def __init__(self, c, dtype, eps, zero=False):
        self.gamma = _param(np.zeros(c) if zero else np.ones(c), dtype)
        self.beta = _param(np.zeros(c), dtype)
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def named_parameters(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class MultiHeadAttention:
    """Unmasked multi-head self-attention without positional encoding.

    ``key_bias`` (broadcastable to the score shape) only exists to hide
    padded frames in a batch.
    """

    def __init__(self, c, heads, rng, dtype):
        self.heads = heads
        bound = np.sqrt(6.0 / (2 * c))
        self.proj = {}
        for name in ("q", "k", "v", "o"):
            w = _param(rng.uniform(-bound, bound, size=(c, c)), dtype)
            b = _param(np.zeros(c), dtype)
            self.proj[name] = (w, b)

    def _linear(self, x, name):
        w, b = self.proj[name]
        return matmul(x, w) + b

    def __call__(self, x: Tensor, key_bias: Tensor | None = None) -> Tensor:
        bsz, t, c = x.shape
        dk = c // self.heads

        def heads(z):
            return transpose(reshape(z, (bsz, t, self.heads, dk)), (0, 2, 1, 3))

        q = heads(self._linear(x, "q"))
        k = heads(self._linear(x, "k"))
        v = heads(self._linear(x, "v"))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
        if key_bias is not None:
            scores = scores + key_bias
        ctx = matmul(softmax(scores, axis=-1), v)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, t, c))
        return self._linear(ctx, "o")

    def named_parameters(self, prefix):
        for name, (w, b) in self.proj.items():
            yield f"{prefix}.{name}.weight", w
            yield f"{prefix}.{name}.bias", b


class TransformerBlock:
    def __init__(self, c, cfg: NetConfig, rng, dtype, last=False):
        k1, k2 = cfg.block_kernels
        self.attn = MultiHeadAttention(c, cfg.attn_heads, rng, dtype)
        self.norm1 = LayerNorm(c, dtype, cfg.ln_eps)
        self.ffn = [
            Conv1d(c, cfg.block_inner_channels, k1, rng, dtype),
            Conv1d(cfg.block_inner_channels, c, k2, rng, dtype, zero=last),
        ]
        # zero gain on the net's very last normalization makes a fresh coupling emit u = t = 0
        self.norm2 = LayerNorm(c, dtype, cfg.ln_eps, zero=last)

    def __call__(self, x, mask=None, key_bias=None):
        h = self.norm1(x + self.attn(x, key_bias))
        f = relu(self.ffn[0](_masked(h, mask)))
        f = self.ffn[1](_masked(f, mask))
        return self.norm2(h + f)

    def named_parameters(self, prefix):
        yield from self.attn.named_parameters(f"{prefix}.attn")
        yield from self.norm1.named_parameters(f"{prefix}.norm1")
        for i, conv in enumerate(self.ffn):
            yield from conv.named_parameters(f"{prefix}.ffn.{i}")
        yield from self.norm2.named_parameters(f"{prefix}.norm2")


def _masked(x, mask):
    return x if mask is None else x * mask


class ConversionNet:
    """Maps a C/2-channel half to (u, t), each C/2 channels."""

    def __init__(self, n_channels: int, cfg: NetConfig, rng, dtype):
        half = n_channels // 2
        self.n_in = half
        self.pre = [
            Conv1d(half, cfg.d_h, cfg.pre_kernel, rng, dtype),
            Conv1d(cfg.d_h, n_channels, cfg.pre_kernel, rng, dtype),
        ]
        self.blocks = [
            TransformerBlock(n_channels, cfg, rng, dtype, last=(i == cfg.n_blocks - 1))
            for i in range(cfg.n_blocks)
        ]

    def __call__(self, h: Tensor, mask=None, key_bias=None) -> tuple[Tensor, Tensor]:
        if h.shape[-1] != self.n_in:
            raise ValueError(f"net expects {self.n_in} channels, got {h.shape[-1]}")
        x = relu(self.pre[0](_masked(h, mask)))
        x = self.pre[1](_masked(x, mask))
        for blk in self.blocks:
            x = blk(x, mask, key_bias)
        return split(x, axis=-1)

    def named_parameters(self, prefix):
        for i, conv in enumerate(self.pre):
            yield from conv.named_parameters(f"{prefix}.pre.{i}")
        for i, blk in enumerate(self.blocks):
            yield from blk.named_parameters(f"{prefix}.blocks.{i}")


class AffineCoupling:
    """``which='a'`` transforms the first channel half from the second;
    ``which='b'`` the reverse."""

    def __init__(self, net: ConversionNet, which: str, eps: float):
        if which not in ("a", "b"):
            raise ValueError("which must be 'a' or 'b'")
        self.net = net
        self.which = which
        self.eps = eps

    def _halves(self, x):
        if x.shape[-1] % 2:
            raise ValueError(f"coupling needs an even channel count, got {x.shape[-1]}")
        first, second = split(x, axis=-1)
        return (first, second) if self.which == "a" else (second, first)

    def _join(self, changed, kept):
        return concat([changed, kept] if self.which == "a" else [kept, changed], axis=-1)

    def scale_shift(self, kept, mask=None, key_bias=None):
        u, t = self.net(kept, mask, key_bias)
        return sigmoid(u + self.eps), t

    def forward(self, x: Tensor, mask=None, key_bias=None) -> Tensor:
        x_change, x_keep = self._halves(x)
        s, t = self.scale_shift(x_keep, mask, key_bias)
        return self._join(s * x_change + t, x_keep)

    def inverse(self, y: Tensor, mask=None, key_bias=None) -> Tensor:
        y_change, y_keep = self._halves(y)
        s, t = self.scale_shift(y_keep, mask, key_bias)
        return self._join((y_change - t) / s, y_keep)


class Flow:
    def __init__(self, n_channels, cfg: NetConfig, eps, rng, dtype):
        self.a = AffineCoupling(ConversionNet(n_channels, cfg, rng, dtype), "a", eps)
        self.b = AffineCoupling(ConversionNet(n_channels, cfg, rng, dtype), "b", eps)

    def forward(self, x, mask=None, key_bias=None):
        return self.b.forward(self.a.forward(x, mask, key_bias), mask, key_bias)

    def inverse(self, y, mask=None, key_bias=None):
        return self.a.inverse(self.b.inverse(y, mask, key_bias), mask, key_bias)

    def named_parameters(self, prefix):
        yield from self.a.net.named_parameters(f"{prefix}.a")
        yield from self.b.net.named_parameters(f"{prefix}.b")


class InvConv1x1:
    def __init__(self, weight, dtype):
        self.W = _param(weight, dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.W.shape[0]:
            raise ValueError(f"invconv expects {self.W.shape[0]} channels, got {x.shape[-1]}")
        return matmul(x, transpose(self.W, (1, 0)))

    def inverse(self, y) -> np.ndarray:
        """Multiply every frame by W^-1 using a fresh pivoted LU factorization."""
        y = y.data if isinstance(y, Tensor) else np.asarray(y)
        w = self.W.data
        if y.shape[-1] != w.shape[0]:
            raise ValueError(f"invconv expects {w.shape[0]} channels, got {y.shape[-1]}")
        cond = np.linalg.cond(w.astype(np.float64))
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise SingularWeightError(f"invconv weight condition number {cond:.3g} exceeds 1e8")
        lu = scipy.linalg.lu_factor(w, check_finite=True)
        flat = y.reshape(-1, w.shape[0]).T.astype(w.dtype)
        return scipy.linalg.lu_solve(lu, flat).T.reshape(y.shape)

    def named_parameters(self, prefix):
        yield f"{prefix}.W", self.W


def orthonormal(n: int, rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class InvvcModel:
    """N1 invertible 1x1 convolutions followed by N2 FLOW blocks."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = config.n_channels
        self.invconvs = [InvConv1x1(orthonormal(c, rng), dtype) for _ in range(config.n_invconv)]
        self.flows = [
            Flow(c, config.net, config.coupling_eps, rng, dtype) for _ in range(config.n_flows)
        ]

    # -- parameters ---------------------------------------------------------
    def named_parameters(self):
        for i, conv in enumerate(self.invconvs):
            yield from conv.named_parameters(f"invconv.{i}")
        for i, flow in enumerate(self.flows):
            yield from flow.named_parameters(f"flow.{i}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape}, model expects {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    def astype(self, dtype) -> InvvcModel:
        clone = InvvcModel(self.config, seed=0, dtype=dtype)
        clone.load_state_dict(self.state_dict())
        return clone

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- maps ---------------------------------------------------------------
    def _prepare(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        elif x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        if x.shape[-1] != self.config.n_channels:
            raise ValueError(
                f"model expects {self.config.n_channels} channels, got {x.shape[-1]}"
            )
        squeeze = x.ndim == 2
        if squeeze:
            x = reshape(x, (1, *x.shape))
        return x, squeeze

    def _mask_terms(self, mask, shape):
        if mask is None:
            return None, None
        m = np.asarray(mask, dtype=self.dtype).reshape(shape[0], shape[1], 1)
        key_bias = ((1.0 - m) * _MASKED_SCORE).reshape(shape[0], 1, 1, shape[1])
        return Tensor(m), Tensor(key_bias.astype(self.dtype))

    def forward(self, x, mask=None) -> Tensor:
        """Source -> target direction.  Differentiable.

        ``mask`` (``(B, T)`` of 0/1) hides padded frames from every
        convolution and attention so that real frames are unaffected by
        padding.
        """
        x, squeeze = self._prepare(x)
        m, kb = self._mask_terms(mask, x.shape)
        for conv in self.invconvs:
            x = conv.forward(x)
        for flow in self.flows:
            x = flow.forward(x, m, kb)
        return reshape(x, x.shape[1:]) if squeeze else x

    __call__ = forward

    def convert(self, mel) -> np.ndarray:
        with no_grad():
            return self.forward(mel).data

    def invert(self, mel) -> np.ndarray:
        """Target -> source direction with the same parameters."""
        with no_grad():
            y, squeeze = self._prepare(mel)
            for flow in reversed(self.flows):
                y = flow.inverse(y)
            out = y.data
            for conv in reversed(self.invconvs):
                out = conv.inverse(out)
        return out[0] if squeeze else out


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float64) -> InvvcModel:
    return InvvcModel(config, seed=seed, dtype=dtype)


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes implied by ``config`` (no allocation of real weights)."""
    c = config.n_channels
    net = config.net
    half = c // 2
    k1, k2 = net.block_kernels
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(config.n_invconv):
        shapes[f"invconv.{i}.W"] = (c, c)
    for i in range(config.n_flows):
        for side in ("a", "b"):
            p = f"flow.{i}.{side}"
            shapes[f"{p}.pre.0.weight"] = (net.pre_kernel, half, net.d_h)
            shapes[f"{p}.pre.0.bias"] = (net.d_h,)
            shapes[f"{p}.pre.1.weight"] = (net.pre_kernel, net.d_h, c)
            shapes[f"{p}.pre.1.bias"] = (c,)
            for j in range(net.n_blocks):
                b = f"{p}.blocks.{j}"
                for proj in "qkvo":
                    shapes[f"{b}.attn.{proj}.weight"] = (c, c)
                    shapes[f"{b}.attn.{proj}.bias"] = (c,)
                shapes[f"{b}.norm1.gamma"] = (c,)
                shapes[f"{b}.norm1.beta"] = (c,)
                shapes[f"{b}.ffn.0.weight"] = (k1, c, net.block_inner_channels)
                shapes[f"{b}.ffn.0.bias"] = (net.block_inner_channels,)
                shapes[f"{b}.ffn.1.weight"] = (k2, net.block_inner_channels, c)
                shapes[f"{b}.ffn.1.bias"] = (c,)
                shapes[f"{b}.norm2.gamma"] = (c,)
                shapes[f"{b}.norm2.beta"] = (c,)
    return shapes
