"""Composite mel loss, Adam, crop batching, the training loop and checkpoints."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import container
from .alignment import AlignedPair
from .container import ShapeMismatchError
from .model import InvvcModel, ModelConfig, expected_shapes
from .tensor import Tensor, reshape, tabs, tsqrt, tsum

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
_DTYPES = {"float32": np.float32, "float64": np.float64}


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    crop_length: int = 200
    batch_size: int = 8
    max_steps: int = 2000
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 500

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0 <= b < 1:
                raise ValueError("Adam betas must lie in [0, 1)")
        if self.crop_length < 1 or self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("crop_length and batch_size must be >= 1, max_steps >= 0")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# loss


def mel_loss(pred: Tensor, tgt, mask=None) -> Tensor:
    """MSE + L1 between per-channel temporal means + L1 between per-channel
    temporal standard deviations.

    Accepts ``(T, C)`` or ``(B, T, C)``.  With a ``(B, T)`` mask the
    statistics of each crop only see its real frames, and the batch loss is
    the mean of the per-crop losses.
    """
    tgt_data = tgt.data if isinstance(tgt, Tensor) else np.asarray(tgt)
    if pred.shape != tgt_data.shape:
        raise ValueError(f"loss: prediction {pred.shape} vs target {tgt_data.shape}")
    if pred.ndim == 2:
        pred = reshape(pred, (1, *pred.shape))
        tgt_data = tgt_data[None]
        if mask is not None:
            mask = np.asarray(mask)[None]
    b, t, c = pred.shape
    tgt = Tensor(tgt_data.astype(pred.dtype))
    if mask is None:
        m = np.ones((b, t, 1), dtype=pred.dtype)
    else:
        m = np.asarray(mask, dtype=pred.dtype).reshape(b, t, 1)
    count = m.sum(axis=1, keepdims=True)  # (B, 1, 1)
    if (count <= 0).any():
        raise ValueError("loss: a crop has no unmasked frames")
    m_t = Tensor(m)
    inv_n = Tensor((1.0 / count).astype(pred.dtype))

    diff = (pred - tgt) * m_t
    mse = tsum(diff * diff, axis=(1, 2), keepdims=True) * inv_n * (1.0 / c)

    def stats(x):
        mean = tsum(x * m_t, axis=1, keepdims=True) * inv_n
        dev = (x - mean) * m_t
        return mean, tsqrt(tsum(dev * dev, axis=1, keepdims=True) * inv_n)

    pm, ps = stats(pred)
    tm, ts = stats(tgt)
    mean_term = tsum(tabs(pm - tm), axis=2, keepdims=True) * (1.0 / c)
    std_term = tsum(tabs(ps - ts), axis=2, keepdims=True) * (1.0 / c)
    per_crop = mse + mean_term + std_term
    return reshape(tsum(per_crop), ()) * (1.0 / b)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class Adam:
    """Bias-corrected Adam over named parameter tensors."""

    def __init__(self, named_params, cfg: TrainConfig, state: AdamState | None = None):
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.lr = cfg.learning_rate
        self.beta1 = cfg.adam_beta1
        self.beta2 = cfg.adam_beta2
        self.eps = cfg.adam_eps
        self.state = state or AdamState()
        for name, p in self.params:
            for buf in (self.state.m, self.state.v):
                if name not in buf:
                    buf[name] = np.zeros_like(p.data)
                elif buf[name].shape != p.shape:
                    raise ValueError(f"Adam moment for {name} has shape {buf[name].shape}")
                else:
                    buf[name] = buf[name].astype(p.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        for name, p in self.params:
            g = p.grad
            if g is not None:
                if g.shape != p.shape:
                    raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
                if not np.isfinite(g).all():
                    raise FloatingPointError(f"non-finite gradient for parameter {name}")
        self.state.step += 1
        t = self.state.step
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.state.m[name]
            v = self.state.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(named_params, state: AdamState, cfg: TrainConfig) -> AdamState:
    """Functional form of a single Adam update using each parameter's ``.grad``."""
    opt = Adam(named_params, cfg, state)
    opt.step()
    return opt.state


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    source: np.ndarray  # (B, crop, C)
    target: np.ndarray
    mask: np.ndarray  # (B, crop), 1.0 for real frames


def make_batches(
    pairs: Sequence[AlignedPair], cfg: TrainConfig, seed: int | None = None
) -> Iterator[Batch]:
    """Endless stream of fixed-size batches of random crops.

    Pairs are reshuffled every epoch; a batch may straddle two epochs.
    Pairs shorter than ``crop_length`` are zero-padded at the end and the
    padding is marked in ``mask``.
    """
    if not pairs:
        raise ValueError("cannot batch an empty dataset")
    if any(len(p) < 1 for p in pairs):
        raise ValueError("aligned pairs must hold at least one frame")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    crop = cfg.crop_length
    c = pairs[0].source.shape[1]
    src, tgt, msk = [], [], []
    while True:
        for idx in rng.permutation(len(pairs)):
            p = pairs[idx]
            n = len(p)
            s = np.zeros((crop, c))
            t = np.zeros((crop, c))
            m = np.zeros(crop)
            if n >= crop:
                start = int(rng.integers(0, n - crop + 1))
                s[:] = p.source[start : start + crop]
                t[:] = p.target[start : start + crop]
                m[:] = 1.0
            else:
                s[:n] = p.source
                t[:n] = p.target
                m[:n] = 1.0
            src.append(s)
            tgt.append(t)
            msk.append(m)
            if len(src) == cfg.batch_size:
                yield Batch(np.stack(src), np.stack(tgt), np.stack(msk))
                src, tgt, msk = [], [], []


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    step: int = 0
    adam: AdamState | None = None

    def build_model(self, dtype=None) -> InvvcModel:
        dtype = dtype or self.train_config.dtype
        model = InvvcModel(self.model_config, seed=0, dtype=dtype)
        model.load_state_dict(self.params)
        return model


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "format_version": CHECKPOINT_FORMAT,
        "model": ckpt.model_config.to_dict(),
        "train": ckpt.train_config.to_dict(),
        "step": ckpt.step,
        "adam_step": None if ckpt.adam is None else ckpt.adam.step,
    }
    tensors = dict(ckpt.params)
    if ckpt.adam is not None:
        for name in ckpt.params:
            tensors[f"adam.m.{name}"] = ckpt.adam.m[name]
            tensors[f"adam.v.{name}"] = ckpt.adam.v[name]
    return container.encode(meta, tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    meta, tensors = container.load(path)
    if meta.get("format_version") != CHECKPOINT_FORMAT:
        raise container.UnsupportedVersionError(
            f"unsupported checkpoint format {meta.get('format_version')!r}"
        )
    try:
        model_cfg = ModelConfig.from_dict(meta["model"])
        train_cfg = TrainConfig(**meta["train"])
    except (KeyError, TypeError, ValueError) as exc:
        raise container.IntegrityError(f"checkpoint config is invalid: {exc}") from None
    shapes = expected_shapes(model_cfg)
    params = {}
    for name, shape in shapes.items():
        if name not in tensors:
            raise ShapeMismatchError(f"config requires tensor {name!r}, not in file")
        if tensors[name].shape != shape:
            raise ShapeMismatchError(
                f"{name}: stored shape {tensors[name].shape}, config implies {shape}"
            )
        params[name] = tensors[name]
    adam = None
    if meta.get("adam_step") is not None:
        adam = AdamState(step=int(meta["adam_step"]))
        for name, shape in shapes.items():
            for kind, buf in (("m", adam.m), ("v", adam.v)):
                key = f"adam.{kind}.{name}"
                if key not in tensors or tensors[key].shape != shape:
                    raise ShapeMismatchError(f"Adam moment {key!r} missing or misshapen")
                buf[name] = tensors[key]
    known = set(params) | {f"adam.{k}.{n}" for n in params for k in "mv"}
    unknown = sorted(set(tensors) - known)
    if unknown:
        raise ShapeMismatchError(f"tensor {unknown[0]!r} is not part of the configured model")
    return Checkpoint(model_cfg, train_cfg, params, int(meta.get("step", 0)), adam)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float]
    model: InvvcModel


def train(
    pairs: Sequence[AlignedPair],
    model: InvvcModel,
    cfg: TrainConfig,
    out_dir=None,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Optimize ``model`` in place (after casting to ``cfg.precision``)."""
    if model.dtype != np.dtype(cfg.dtype):
        model = model.astype(cfg.dtype)
    for p in pairs:
        if p.source.shape[1] != model.config.n_channels:
            raise ValueError(
                f"pair has {p.source.shape[1]} channels, model expects {model.config.n_channels}"
            )
    opt = Adam(model.named_parameters(), cfg)
    batches = make_batches(pairs, cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    losses: list[float] = []

    def snapshot(step):
        return Checkpoint(
            model.config,
            cfg,
            model.state_dict(),
            step,
            AdamState(
                {k: v.copy() for k, v in opt.state.m.items()},
                {k: v.copy() for k, v in opt.state.v.items()},
                opt.state.step,
            ),
        )

    for step in range(1, cfg.max_steps + 1):
        batch = next(batches)
        opt.zero_grad()
        pred = model.forward(batch.source, mask=batch.mask)
        loss = mel_loss(pred, batch.target.astype(cfg.dtype), batch.mask)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergedError(step, value)
        loss.backward()
        opt.step()
        losses.append(value)
        if callback is not None:
            callback(step, value)
        if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(snapshot(step), out_dir / f"step_{step:06d}.ivvc")
    final = snapshot(cfg.max_steps)
    if out_dir is not None:
        save_checkpoint(final, out_dir / "final.ivvc")
    return TrainResult(final, losses, model)
