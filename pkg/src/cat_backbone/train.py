"""Desk-scale training: AdamW, warmup + cosine schedule, a separable synthetic task."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Model, build, forward_classify
from .config import CatConfig
from .errors import GradError, NonFiniteError
from .tensor import Tensor

log = logging.getLogger(__name__)

_NO_DECAY_SUFFIXES = ("gamma", "beta", "bias", "b_q", "b_k", "b_v", "b_o", "b1", "b2",
                      "rel_pos_table", "abs_pos")


def decays(name: str, t: Tensor) -> bool:
    """Weight decay applies to weight matrices only, not norms, biases or position tables."""
    return t.ndim >= 2 and not name.endswith(_NO_DECAY_SUFFIXES)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], st: OptimizerState,
               lr: float | None = None, decay_mask: dict[str, bool] | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``st``."""
    lr = st.lr if lr is None else lr
    b1, b2 = st.betas
    st.step += 1
    c1 = 1.0 - b1 ** st.step
    c2 = 1.0 - b2 ** st.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise GradError(f"no gradient for parameter {name!r}")
        g = np.asarray(g, dtype=p.dtype)
        if name not in st.m:
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        m, v = st.m[name], st.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        wd = st.weight_decay if (decay_mask is None or decay_mask.get(name, True)) else 0.0
        if wd and lr:
            p.data -= (lr * wd) * p.data
        if lr:
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + st.eps)).astype(p.dtype)


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup from 0 to ``peak_lr``, then half-cosine down to ``min_lr``."""
    if not 0 <= warmup_steps < total_steps:
        raise ValueError(f"need 0 <= warmup_steps < total_steps, got {warmup_steps}, {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


class SyntheticDataset:
    """Class ``k`` is a fixed pattern plus Gaussian noise.

    The class patterns are mutually orthogonal with unit per-pixel RMS, so the
    task is linearly separable. Sample ``i`` has label ``i % classes`` and its
    noise depends only on ``(seed, i)``; disjoint index ranges give disjoint
    train/held-out splits.
    """

    def __init__(self, seed: int = 0, size: int = 64, classes: int = 2, channels: int = 3,
                 noise: float = 0.5, dtype=np.float32):
        if classes < 2:
            raise ValueError("need at least two classes")
        self.seed, self.size, self.classes, self.channels = seed, size, classes, channels
        self.noise, self.dtype = noise, dtype
        dim = size * size * channels
        gauss = np.random.default_rng([seed, 0x5EED]).standard_normal((dim, classes))
        q, _ = np.linalg.qr(gauss)
        self.patterns = (q.T * math.sqrt(dim)).reshape(classes, size, size, channels)

    def sample(self, i: int) -> tuple[np.ndarray, int]:
        label = i % self.classes
        rng = np.random.default_rng([self.seed, i])
        img = self.patterns[label] + self.noise * rng.standard_normal(self.patterns.shape[1:])
        return img.astype(self.dtype), label

    def batch(self, start: int, count: int) -> tuple[np.ndarray, np.ndarray]:
        items = [self.sample(i) for i in range(start, start + count)]
        return np.stack([x for x, _ in items]), np.array([y for _, y in items], dtype=np.int64)


HELD_OUT_OFFSET = 10 ** 9


@dataclass
class TrainResult:
    model: Model
    trace: list[dict] = field(default_factory=list)
    eval_accuracy: float = float("nan")
    eval_loss: float = float("nan")

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.trace]


def evaluate(m: Model, data: SyntheticDataset, count: int = 256, batch_size: int = 64) -> tuple[float, float]:
    """Eval-mode (loss, accuracy) on held-out samples."""
    was_training = m.training
    m.eval()
    correct, total_loss = 0, 0.0
    for start in range(0, count, batch_size):
        k = min(batch_size, count - start)
        x, y = data.batch(HELD_OUT_OFFSET + start, k)
        logits = forward_classify(m, x)
        total_loss += T.cross_entropy(logits, y).item() * k
        correct += int((logits.data.argmax(axis=1) == y).sum())
    m.training = was_training
    return total_loss / count, correct / count


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = math.sqrt(float(np.sum([np.vdot(g, g) for g in grads.values()])))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm


def train_toy(cfg: CatConfig, steps: int = 200, seed: int = 0, *, batch_size: int = 32,
              peak_lr: float = 1e-3, min_lr: float = 1e-5, warmup_steps: int | None = None,
              weight_decay: float = 0.05, clip_grad_norm: float | None = None,
              eval_samples: int = 256, noise: float = 0.5, dtype=np.float32) -> TrainResult:
    """Cross-entropy training on :class:`SyntheticDataset` with dropout and drop path active.

    Model init, data and dropout noise all derive from ``seed``. The defaults
    are desk-scale choices, not an ImageNet recipe.
    """
    model = build(cfg, seed=seed, dtype=dtype)
    data = SyntheticDataset(seed, size=cfg.base_input[0], classes=cfg.num_classes,
                            channels=cfg.in_chans, noise=noise, dtype=dtype)
    result = TrainResult(model)
    if steps == 0:
        return result
    if warmup_steps is None:
        warmup_steps = max(1, steps // 10) if steps > 1 else 0
    params = model.params
    mask = {k: decays(k, v) for k, v in params.items()}
    opt = OptimizerState(lr=peak_lr, weight_decay=weight_decay)
    noise_rng = np.random.default_rng([seed, 1])
    model.train()
    for step in range(steps):
        lr = lr_at(step + 1, steps, warmup_steps, peak_lr, min_lr)
        x, y = data.batch(step * batch_size, batch_size)
        model.zero_grad()
        with T.Tape() as tape:
            logits = forward_classify(model, x, noise_rng)
            loss = T.cross_entropy(logits, y)
        if not math.isfinite(loss.item()):
            raise NonFiniteError(f"loss became non-finite at step {step}")
        T.backward(loss)
        tape.clear()  # drop intermediates now rather than at the next gc cycle
        grads = {k: p.grad.data for k, p in params.items() if p.grad is not None}
        if clip_grad_norm is not None:
            _clip(grads, clip_grad_norm)
        adamw_step(params, grads, opt, lr=lr, decay_mask=mask)
        acc = float((logits.data.argmax(axis=1) == y).mean())
        result.trace.append({"step": step, "lr": lr, "loss": loss.item(), "acc": acc})
        log.debug("step %d lr %.2e loss %.4f acc %.3f", step, lr, loss.item(), acc)
    model.eval()
    result.eval_loss, result.eval_accuracy = evaluate(model, data, eval_samples)
    return result


def write_metrics_csv(path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "lr", "loss", "acc"])
        w.writeheader()
        for row in trace:
            w.writerow({k: row[k] for k in ("step", "lr", "loss", "acc")})
