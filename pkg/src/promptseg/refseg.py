"""Reference voxel segmenter: a two-layer perceptron on 5^3 intensity patches.

Each voxel is described by the z-normalised intensities of its
``(2r + 1)^3`` neighbourhood (normalisation statistics are taken per volume
over the brain mask). The network is ``sigmoid(w2 . tanh(W1 x + b1) + b2)``,
trained with voxelwise binary cross-entropy and Adam under a poly learning
rate schedule ``base * (1 - t / T) ** 0.9``.

Checkpoint layout (little-endian)::

    bytes 0-7    magic b"PSEGMLP\\0"
    uint32       format version (1)
    uint32       patch radius r
    uint32       hidden width H
    uint32       feature count F = (2r + 1)^3
    float64[H * (F + 1)]   W1 with the bias as last column, row-major
    float64[H + 1]         w2 with the bias last
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .seeding import derive_seed, make_rng
from .selection import MetricCurve
from .volume import BinaryMask, Volume

MAGIC = b"PSEGMLP\x00"
FORMAT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RefModel:
    radius: int
    w1: np.ndarray  # (H, F + 1)
    w2: np.ndarray  # (H + 1,)

    def __post_init__(self):
        f = (2 * self.radius + 1) ** 3
        w1 = np.array(self.w1, dtype=np.float64)
        w2 = np.array(self.w2, dtype=np.float64)
        if w1.ndim != 2 or w1.shape[1] != f + 1 or w2.shape != (w1.shape[0] + 1,):
            raise ValueError(f"inconsistent weight shapes {w1.shape}, {w2.shape} for radius {self.radius}")
        if not (np.isfinite(w1).all() and np.isfinite(w2).all()):
            raise ValueError("weights must be finite")
        w1.setflags(write=False)
        w2.setflags(write=False)
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def n_features(self) -> int:
        return self.w1.shape[1] - 1

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "w2": self.w2}


@dataclass(frozen=True)
class TrainConfig:
    budget: int = 20
    base_lr: float = 1e-2
    poly_exponent: float = 0.9
    batch_size: int = 4096
    class_ratio: tuple[int, int] = (1, 3)  # foreground : background voxels
    voxels_per_sample: int = 2048
    fine_tune_epochs: int = 10
    patch_radius: int = 2
    hidden: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if not self.base_lr > 0:
            raise ValueError("learning rate must be positive")
        if min(self.class_ratio) <= 0:
            raise ValueError("class ratio entries must be positive")
        if self.batch_size < 1 or self.voxels_per_sample < 1 or self.hidden < 1:
            raise ValueError("batch size, voxels per sample and hidden width must be >= 1")
        if self.fine_tune_epochs < 0 or self.patch_radius < 0:
            raise ValueError("fine_tune_epochs and patch_radius must be non-negative")


def lr_schedule(t: int, cfg: TrainConfig, budget: int | None = None) -> float:
    T = cfg.budget if budget is None else budget
    if not 0 <= t <= T:
        raise ValueError(f"epoch index {t} outside [0, {T}]")
    return cfg.base_lr * (1.0 - t / T) ** cfg.poly_exponent


def init_model(cfg: TrainConfig) -> RefModel:
    rng = make_rng(derive_seed(cfg.seed, "refseg-init"))
    f = (2 * cfg.patch_radius + 1) ** 3
    w1 = np.zeros((cfg.hidden, f + 1))
    w1[:, :f] = rng.normal(0.0, 1.0 / math.sqrt(f), size=(cfg.hidden, f))
    w2 = np.zeros(cfg.hidden + 1)
    w2[:-1] = rng.normal(0.0, 1.0 / math.sqrt(cfg.hidden), size=cfg.hidden)
    return RefModel(cfg.patch_radius, w1, w2)


# --------------------------------------------------------------------------
# features


@dataclass(frozen=True, eq=False)
class FeatureVolume:
    windows: np.ndarray  # (X, Y, Z, k, k, k) view into a padded, normalised volume
    radius: int

    def patches(self, index: np.ndarray) -> np.ndarray:
        """Features at flat voxel indices, shape (n, (2r + 1)^3)."""
        dims = self.windows.shape[:3]
        ijk = np.unravel_index(index, dims)
        return self.windows[ijk].reshape(len(index), -1)


def normalise(volume: Volume, brain: BinaryMask | None) -> np.ndarray:
    x = volume.data.astype(np.float64)
    region = x[brain.data] if brain is not None and brain.count > 1 else x.ravel()
    mu = region.mean()
    sd = region.std()
    return (x - mu) / (sd if sd > 0 else 1.0)


def feature_volume(volume: Volume, brain: BinaryMask | None, radius: int) -> FeatureVolume:
    z = normalise(volume, brain)
    k = 2 * radius + 1
    padded = np.pad(z, radius, mode="edge")
    return FeatureVolume(sliding_window_view(padded, (k, k, k)), radius)


# --------------------------------------------------------------------------
# network


def forward(params: dict[str, np.ndarray], x: np.ndarray):
    w1, w2 = params["w1"], params["w2"]
    h = np.tanh(x @ w1[:, :-1].T + w1[:, -1])
    logit = h @ w2[:-1] + w2[-1]
    return h, logit


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_loss(logit: np.ndarray, y: np.ndarray) -> float:
    # mean of softplus(z) - y z, computed stably
    return float(np.mean(np.logaddexp(0.0, logit) - y * logit))


def loss_and_grads(params: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradients w.r.t. ``w1`` and ``w2``."""
    w2 = params["w2"]
    h, logit = forward(params, x)
    n = x.shape[0]
    dz = (sigmoid(logit) - y) / n
    g2 = np.empty_like(w2)
    g2[:-1] = h.T @ dz
    g2[-1] = dz.sum()
    dh = np.outer(dz, w2[:-1]) * (1.0 - h * h)
    g1 = np.empty_like(params["w1"])
    g1[:, :-1] = dh.T @ x
    g1[:, -1] = dh.sum(axis=0)
    return bce_loss(logit, y), {"w1": g1, "w2": g2}


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            params[k] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --------------------------------------------------------------------------
# training


@dataclass
class _Prepared:
    features: FeatureVolume
    fg: np.ndarray
    bg: np.ndarray


def _prepare(sample, radius: int) -> _Prepared:
    brain = getattr(sample, "brain", None)
    if brain is None:
        brain = BinaryMask(sample.image.data != 0, sample.image.spacing)
    fv = feature_volume(sample.image, brain, radius)
    y = sample.mask.data
    fg = np.flatnonzero(y)
    bg = np.flatnonzero(brain.data & ~y)
    if bg.size == 0:
        bg = np.flatnonzero(~y)
    return _Prepared(fv, fg, bg)


def _draw(index: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if n == 0 or index.size == 0:
        return index[:0]
    return index[rng.integers(index.size, size=n)]


def _epoch_batch(prepared: list[_Prepared], cfg: TrainConfig, rng: np.random.Generator):
    a, b = cfg.class_ratio
    n_fg_target = int(round(cfg.voxels_per_sample * a / (a + b)))
    xs, ys = [], []
    for p in prepared:
        n_fg = n_fg_target if p.fg.size else 0
        n_bg = cfg.voxels_per_sample - n_fg
        fg = _draw(p.fg, n_fg, rng)
        bg = _draw(p.bg, n_bg, rng)
        xs.append(p.features.patches(np.concatenate([fg, bg])))
        ys.append(np.concatenate([np.ones(fg.size), np.zeros(bg.size)]))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    order = rng.permutation(y.size)
    return x[order], y[order]


@dataclass
class TrainResult:
    model: RefModel
    curve: MetricCurve | None
    losses: list[float]


EpochHook = Callable[[RefModel, int], float]


def train(
    samples: Sequence,
    cfg: TrainConfig,
    per_epoch_hook: EpochHook | None = None,
    init: RefModel | None = None,
    stream: str = "train",
) -> TrainResult:
    """Train for ``cfg.budget`` epochs.

    ``per_epoch_hook(model, epoch)`` is called after every epoch (1-based)
    and must return the mean validation-task Dice for that model; the values
    form the returned curve.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("training set is empty")
    model = init if init is not None else init_model(cfg)
    radius = model.radius
    params = {k: v.copy() for k, v in model.params().items()}
    prepared = [_prepare(s, radius) for s in samples]
    opt = Adam(params)
    losses, dice = [], []
    for epoch in range(cfg.budget):
        rng = make_rng(derive_seed(cfg.seed, f"{stream}-epoch", epoch))
        x, y = _epoch_batch(prepared, cfg, rng)
        lr = lr_schedule(epoch, cfg)
        total = 0.0
        for start in range(0, y.size, cfg.batch_size):
            xb, yb = x[start : start + cfg.batch_size], y[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(params, xb, yb)
            if not math.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch + 1}")
            opt.step(params, grads, lr)
            total += loss * yb.size
        losses.append(total / y.size)
        model = RefModel(radius, params["w1"], params["w2"])
        if per_epoch_hook is not None:
            dice.append(float(per_epoch_hook(model, epoch + 1)))
    curve = None
    if per_epoch_hook is not None:
        curve = MetricCurve(cfg.budget, range(1, cfg.budget + 1), dice, losses)
    return TrainResult(model, curve, losses)


def fine_tune(model: RefModel, plus_set: Sequence, cfg: TrainConfig) -> RefModel:
    """Continue training ``model`` for ``cfg.fine_tune_epochs`` epochs."""
    if cfg.fine_tune_epochs == 0:
        return model
    ft_cfg = replace(cfg, budget=cfg.fine_tune_epochs)
    return train(plus_set, ft_cfg, init=model, stream="finetune").model


# --------------------------------------------------------------------------
# inference


def _brain_probabilities(model: RefModel, volume: Volume, brain: BinaryMask, chunk: int = 16384):
    if volume.dims != brain.dims:
        raise ValueError("volume and brain mask dims differ")
    fv = feature_volume(volume, brain, model.radius)
    idx = np.flatnonzero(brain.data)
    prob = np.empty(idx.size)
    params = model.params()
    for start in range(0, idx.size, chunk):
        _, logit = forward(params, fv.patches(idx[start : start + chunk]))
        prob[start : start + chunk] = sigmoid(logit)
    return idx, prob


def probability(model: RefModel, volume: Volume, brain: BinaryMask) -> Volume:
    idx, prob = _brain_probabilities(model, volume, brain)
    out = np.zeros(volume.data.size)
    out[idx] = prob
    return Volume(out.reshape(volume.dims), volume.spacing)


def predict(model: RefModel, volume: Volume, brain: BinaryMask, prob_threshold: float = 0.5) -> BinaryMask:
    """Voxels with probability >= ``prob_threshold``; zero outside the brain."""
    idx, prob = _brain_probabilities(model, volume, brain)
    out = np.zeros(volume.data.size, dtype=bool)
    out[idx[prob >= prob_threshold]] = True
    return BinaryMask(out.reshape(volume.dims), volume.spacing)


# --------------------------------------------------------------------------
# checkpoints


def model_to_bytes(model: RefModel) -> bytes:
    head = MAGIC + struct.pack("<4I", FORMAT_VERSION, model.radius, model.hidden, model.n_features)
    return head + model.w1.astype("<f8").tobytes() + model.w2.astype("<f8").tobytes()


def model_from_bytes(buf: bytes) -> RefModel:
    if buf[:8] != MAGIC:
        raise ModelFormatError("not a reference-segmenter checkpoint (bad magic)")
    if len(buf) < 24:
        raise ModelFormatError("truncated checkpoint header")
    version, radius, hidden, f = struct.unpack_from("<4I", buf, 8)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    if f != (2 * radius + 1) ** 3:
        raise ModelFormatError(f"feature count {f} inconsistent with radius {radius}")
    n1, n2 = hidden * (f + 1), hidden + 1
    if len(buf) != 24 + 8 * (n1 + n2):
        raise ModelFormatError(f"checkpoint has {len(buf)} bytes, expected {24 + 8 * (n1 + n2)}")
    w1 = np.frombuffer(buf, "<f8", n1, 24).reshape(hidden, f + 1)
    w2 = np.frombuffer(buf, "<f8", n2, 24 + 8 * n1)
    return RefModel(radius, w1, w2)


def save_model(model: RefModel, path) -> Path:
    path = Path(path)
    path.write_bytes(model_to_bytes(model))
    return path


def load_model(path) -> RefModel:
    return model_from_bytes(Path(path).read_bytes())
