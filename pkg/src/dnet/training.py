"""Adam optimizer, poly learning-rate schedule, the mini-batch training
loop, and a synthetic vessel-image generator for desk-scale experiments.

The generator draws bright quadratic Bezier polylines (widths 1 to 4 px,
with optional side branches) on a dark noisy background and returns the
exact rasterized support as the binary mask, so ground truth is perfect by
construction. Everything is a pure function of its seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, backward, default_dtype, recording, tensor
from .losses import LossConfig, total_loss
from .metrics import ConfusionCounts, MetricsReport, confusion, metrics

__all__ = [
    "TrainConfig",
    "AdamState",
    "poly_lr",
    "adam_step",
    "train",
    "evaluate",
    "predict_probs",
    "synth_vessels",
    "save_loss_trace",
]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters.

    ``lr`` is the initial learning rate of the poly schedule
    lr * (1 - iter/max_iter)^power. A zero ``lr`` is accepted and freezes
    the model, which is occasionally useful in tests.
    """

    lr: float = 1e-4
    power: float = 0.9
    max_iter: int = 1000
    batch: int = 4
    seed: int = 0
    lam: float = 1e-4
    beta: float = 1.0
    ce_weight: float = 1.0
    augment_flips: bool = False

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.power <= 0:
            raise ConfigError(f"power must be > 0, got {self.power}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")

    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, beta=self.beta, ce_weight=self.ce_weight)


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """lr * (1 - iter/max_iter)^power; defined on 0 <= iter <= max_iter."""
    if iteration < 0 or iteration > cfg.max_iter:
        raise ConfigError(
            f"poly_lr: iteration {iteration} outside [0, {cfg.max_iter}]"
        )
    return cfg.lr * (1.0 - iteration / cfg.max_iter) ** cfg.power


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(
        cls,
        params: Sequence[Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            t=0,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One Adam update, in place on the parameter buffers.

    The step counter increments first, then bias-corrected moments drive
    p -= lr * m_hat / (sqrt(v_hat) + eps), with eps added outside the root.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"adam_step: {len(params)} params vs {len(grads)} grads vs "
            f"{len(state.m)} state slots"
        )
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: gradient shape {g.shape} does not match parameter "
                f"shape {p.data.shape}"
            )
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class _BatchSampler:
    """Seeded epoch-shuffled index stream; reshuffles when exhausted."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.queue: list[int] = []

    def take(self, count: int) -> list[int]:
        out: list[int] = []
        while len(out) < count:
            if not self.queue:
                self.queue = list(self.rng.permutation(self.n))
            out.append(self.queue.pop(0))
        return out


def _stack_batch(dataset, indices, flip_draws=None):
    images, masks = [], []
    for pos, i in enumerate(indices):
        img, mask = dataset[i][0], dataset[i][1]
        if flip_draws is not None:
            fh, fv = flip_draws[pos]
            if fh:
                img, mask = img[:, ::-1], mask[:, ::-1]
            if fv:
                img, mask = img[::-1], mask[::-1]
        images.append(img)
        masks.append(mask)
    x = np.stack(images).astype(default_dtype())
    y = np.stack(masks).astype(default_dtype())
    if y.ndim == 3:
        y = y[..., None]
    return Tensor(x), Tensor(y)


def train(
    dataset,
    model,
    cfg: TrainConfig,
    on_step: Callable[[int, float], bool] | None = None,
) -> list[tuple[int, float, float]]:
    """Run max_iter optimization steps and return the (step, lr, loss) trace.

    ``on_step(step, loss)`` may return True to stop early (the trace keeps
    whatever was run). Deterministic given the seed: batch order, flips and
    arithmetic all derive from it.
    """
    if len(dataset) == 0:
        raise ConfigError("train: dataset is empty")
    params = list(model.parameters().values())
    reg_params = model.kernel_parameters()
    state = AdamState.for_params(params)
    loss_cfg = cfg.loss_config()
    rng = np.random.default_rng(cfg.seed)
    sampler = _BatchSampler(len(dataset), rng)
    trace: list[tuple[int, float, float]] = []

    for step in range(cfg.max_iter):
        indices = sampler.take(cfg.batch)
        flips = rng.integers(0, 2, size=(cfg.batch, 2)) if cfg.augment_flips else None
        xb, yb = _stack_batch(dataset, indices, flips)
        with recording() as graph:
            probs = model.forward(xb)
            loss = total_loss(probs, yb, reg_params, loss_cfg)
            grad_map = backward(loss, graph)
        grads = [grad_map.get(p, np.zeros_like(p.data)) for p in params]
        lr = poly_lr(step, cfg)
        adam_step(params, grads, state, lr)
        loss_value = loss.item()
        trace.append((step, lr, loss_value))
        if on_step is not None and on_step(step, loss_value):
            break
    return trace


def predict_probs(model, image: np.ndarray) -> np.ndarray:
    """Probability map (H, W) for one (H, W, C) image, without recording."""
    x = Tensor(np.asarray(image, dtype=default_dtype())[None])
    return model.forward(x).data[0, :, :, 0]


def evaluate(
    model, dataset, threshold: float = 0.5
) -> tuple[MetricsReport, ConfusionCounts]:
    """Threshold metrics over a dataset, confusion summed across images."""
    if len(dataset) == 0:
        raise ConfigError("evaluate: dataset is empty")
    counts = ConfusionCounts(0, 0, 0, 0)
    for sample in dataset:
        img, mask = sample[0], sample[1]
        probs = predict_probs(model, img)
        counts = counts + confusion(probs >= threshold, np.asarray(mask).squeeze())
    return metrics(counts), counts


def save_loss_trace(path, trace: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for step, lr, loss in trace:
            writer.writerow([step, f"{lr:.12g}", f"{loss:.12g}"])


# --- synthetic vessel images -------------------------------------------------

_CHANNEL_GAINS = np.array([1.0, 0.82, 0.70])  # reddish tint, fundus-like


def _raster_bezier(mask: np.ndarray, p0, p1, p2, width: int) -> None:
    """Mark the support of a quadratic Bezier stroke of the given width."""
    h, w = mask.shape
    approx_len = np.hypot(*(p1 - p0)) + np.hypot(*(p2 - p1))
    steps = max(8, int(3 * approx_len))
    t = np.linspace(0.0, 1.0, steps)[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2
    radius = width / 2.0
    r_int = int(np.ceil(radius))
    for y, x in pts:
        yi, xi = int(round(y)), int(round(x))
        y0, y1 = max(0, yi - r_int), min(h, yi + r_int + 1)
        x0, x1 = max(0, xi - r_int), min(w, xi + r_int + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        mask[y0:y1, x0:x1] |= (yy - y) ** 2 + (xx - x) ** 2 <= radius * radius


def _random_curve(rng: np.random.Generator, h: int, w: int):
    """Endpoints near opposite borders with a random interior control point."""
    side = rng.integers(0, 2)
    if side == 0:  # roughly top to bottom
        p0 = np.array([rng.uniform(0, 0.15 * h), rng.uniform(0, w - 1)])
        p2 = np.array([rng.uniform(0.85 * h, h - 1), rng.uniform(0, w - 1)])
    else:  # roughly left to right
        p0 = np.array([rng.uniform(0, h - 1), rng.uniform(0, 0.15 * w)])
        p2 = np.array([rng.uniform(0, h - 1), rng.uniform(0.85 * w, w - 1)])
    p1 = np.array([rng.uniform(0, h - 1), rng.uniform(0, w - 1)])
    return p0, p1, p2


def _bezier_point(p0, p1, p2, t: float):
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def synth_vessels(
    seed: int,
    n: int,
    h: int,
    w: int,
    noise: float = 0.05,
    background: float = 0.15,
    foreground: float = 0.75,
    distractors: int = 0,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Generate n (image, mask) pairs of bright curves on a dark background.

    Images are (h, w, 3) floats in [0, 1]; masks are (h, w, 1) exact binary
    supports of the drawn curves. ``distractors`` adds that many bright
    blobs per image to the image only, so telling vessel from blob requires
    shape context rather than brightness. The vessel-pixel fraction is kept
    within a few percent to a quarter of the image by adding or withholding
    curves.
    """
    if h < 16 or w < 16:
        raise ConfigError(f"synth_vessels: image size must be at least 16, got {h}x{w}")
    rng = np.random.default_rng(seed)
    dataset = []
    area = h * w
    base_curves = max(2, round(area / 1800))
    for _ in range(n):
        mask = np.zeros((h, w), dtype=bool)
        curves = 0
        while curves < base_curves + 3:
            p0, p1, p2 = _random_curve(rng, h, w)
            width = int(rng.integers(1, 5))
            _raster_bezier(mask, p0, p1, p2, width)
            for _ in range(int(rng.integers(0, 3))):
                if mask.mean() > 0.18:
                    break
                t0 = rng.uniform(0.2, 0.8)
                start = _bezier_point(p0, p1, p2, t0)
                end = np.array([rng.uniform(0, h - 1), rng.uniform(0, w - 1)])
                ctrl = (start + end) / 2 + rng.uniform(-0.2, 0.2, 2) * [h, w]
                _raster_bezier(mask, start, ctrl, end, max(1, width - int(rng.integers(0, 2))))
            curves += 1
            if curves >= base_curves and mask.mean() > 0.06:
                break
            if mask.mean() > 0.20:
                break

        level = np.where(mask, foreground, background)
        image = level[:, :, None] * _CHANNEL_GAINS
        if distractors > 0:
            blob = np.zeros((h, w), dtype=bool)
            for _ in range(distractors):
                cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
                r = rng.uniform(2.0, 5.0)
                yy, xx = np.mgrid[0:h, 0:w]
                blob |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            blob &= ~mask  # vessels keep their own intensity
            image = np.where(blob[:, :, None], foreground * _CHANNEL_GAINS, image)
        if noise > 0:
            image = image + noise * rng.standard_normal((h, w, 3))
        image = np.clip(image, 0.0, 1.0)
        dataset.append((image, mask.astype(np.float64)[:, :, None]))
    return dataset
