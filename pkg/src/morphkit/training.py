"""Losses, mini-batch SGD, gradient checking and SE evaluation metrics."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .grid import DomainError
from .layers import NetworkSpec, network_backward, network_forward, softmax
from .soft import SmoothSign, smooth_sign

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    """Loss became non-finite or exceeded the divergence limit."""

    def __init__(self, msg, epoch=None, step=None, layer=None):
        super().__init__(msg)
        self.epoch, self.step, self.layer = epoch, step, layer


# -- losses -----------------------------------------------------------------

def mse_loss(pred, target):
    """Mean squared error over every element, and its gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DomainError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    return float(np.mean(d * d)), 2.0 * d / d.size


def cross_entropy_loss(probs, labels):
    """Mean negative log-likelihood; gradient is w.r.t. the pre-softmax logits."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n, k = probs.shape
    if labels.shape != (n,):
        raise DomainError(f"need {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise DomainError(f"labels must lie in [0, {k})")
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, np.finfo(float).tiny))))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def sgd_update(param, grad, lr: float):
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise DomainError(f"shape mismatch: {param.shape} vs {grad.shape}")
    return param - lr * grad


def apply_sgd(states, grads, lr: float) -> None:
    """In-place SGD step on every tensor of every layer."""
    for st, gr in zip(states, grads):
        for k in st:
            st[k] -= lr * gr[k]


# -- forward + loss + backward ----------------------------------------------

def _ends_in_softmax(spec: NetworkSpec) -> bool:
    return bool(spec.layers) and spec.layers[-1].kind == "softmax"


def loss_and_grads(spec: NetworkSpec, states, x, target, loss: str = "mse", training: bool = False,
                   rng=None, denom: int | None = None):
    """Forward, loss and backward for one batch.

    ``denom`` overrides the normalising count (samples for cross-entropy,
    elements for MSE) so shards of a batch combine into the batch gradient.
    """
    if loss == "cross_entropy":
        upto = len(spec.layers) - 1 if _ends_in_softmax(spec) else None
        logits, trace = network_forward(spec, states, x, training, rng, upto=upto)
        probs = softmax(logits)
        value, g = cross_entropy_loss(probs, target)
        if denom is not None:
            n = probs.shape[0]
            value, g = value * n / denom, g * n / denom
    elif loss == "mse":
        pred, trace = network_forward(spec, states, x, training, rng)
        value, g = mse_loss(pred, np.asarray(target, dtype=np.float64).reshape(pred.shape))
        if denom is not None:
            value, g = value * pred.size / denom, g * pred.size / denom
    else:
        raise ValueError(f"unknown loss {loss!r}")
    grads, _ = network_backward(spec, states, trace, g)
    return value, grads


def evaluate_loss(spec, states, x, target, loss: str = "mse", chunk: int = 256) -> float:
    total = 0.0
    n = len(x)
    for k in range(0, n, chunk):
        xb, tb = x[k:k + chunk], target[k:k + chunk]
        if loss == "mse":
            pred, _ = network_forward(spec, states, xb)
            total += float(np.sum((pred - np.asarray(tb).reshape(pred.shape)) ** 2)) / pred[0].size
        else:
            probs, _ = network_forward(spec, states, xb)
            total += cross_entropy_loss(probs, tb)[0] * len(xb)
    return total / n


def predict(spec, states, x, chunk: int = 256) -> np.ndarray:
    return np.concatenate([network_forward(spec, states, x[k:k + chunk])[0] for k in range(0, len(x), chunk)])


def accuracy(spec, states, x, labels, chunk: int = 256) -> float:
    return float(np.mean(predict(spec, states, x, chunk).argmax(axis=1) == np.asarray(labels)))


# -- training loop ----------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float
    batch_size: int = 64
    epochs: int = 20
    loss: str = "mse"
    seed: int = 0
    smooth: str = SmoothSign.TANH.value
    shuffle: bool = True
    workers: int = 1
    shard_size: int = 16  # fixed, so results do not depend on ``workers``

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1 or self.shard_size < 1:
            raise ValueError("batch_size, epochs and shard_size must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.loss not in ("mse", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")
        SmoothSign(self.smooth)


@dataclass
class TrainReport:
    epoch_losses: list[float]
    initial_loss: float
    final_loss: float
    steps: int
    wall_clock: float = 0.0
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self, timing: bool = True) -> dict[str, Any]:
        d = asdict(self)
        if not timing:
            d.pop("wall_clock")
        return d


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    """Per-epoch sample order from a counter-based generator keyed by seed + epoch."""
    if not shuffle:
        return np.arange(n)
    return np.random.Generator(np.random.Philox(seed + epoch)).permutation(n)


def _first_bad_layer(spec, states, grads) -> str:
    for i, (st, gr) in enumerate(zip(states, grads)):
        for k in st:
            if not np.all(np.isfinite(st[k])) or not np.all(np.isfinite(gr.get(k, 0.0))):
                return f"{i}:{spec.layers[i].kind}.{k}"
    return f"{len(spec.layers) - 1}:{spec.layers[-1].kind}" if spec.layers else "input"


def _add_into(acc, grads):
    for a, g in zip(acc, grads):
        for k in a:
            a[k] += g[k]


def train(spec: NetworkSpec, states, inputs, targets, cfg: TrainConfig, pool=None) -> TrainReport:
    """Mini-batch SGD; mutates ``states`` in place.

    Each batch is cut into fixed-size shards whose gradients are summed in
    shard order, so the result is bitwise identical for any worker count.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 3:
        inputs = inputs[:, None]
    targets = np.asarray(targets)
    n = len(inputs)
    if n == 0:
        raise DomainError("training set is empty")
    if len(targets) != n:
        raise DomainError(f"{n} inputs but {len(targets)} targets")
    per_sample = 1 if cfg.loss == "cross_entropy" else int(np.prod(spec.output_shape))
    t0 = time.perf_counter()
    initial = evaluate_loss(spec, states, inputs, targets, cfg.loss)
    own_pool = pool is None and cfg.workers > 1
    if own_pool:
        pool = ThreadPoolExecutor(cfg.workers)
    epoch_losses = []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = epoch_order(n, cfg.seed, epoch, cfg.shuffle)
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                denom = len(idx) * per_sample
                shards = [idx[k:k + cfg.shard_size] for k in range(0, len(idx), cfg.shard_size)]

                def work(j, shards=shards, denom=denom, epoch=epoch, step=step):
                    sh = shards[j]
                    rng = np.random.default_rng([cfg.seed, epoch, step, j])
                    return loss_and_grads(spec, states, inputs[sh], targets[sh], cfg.loss,
                                          training=True, rng=rng, denom=denom)

                jobs = range(len(shards))
                results = list(pool.map(work, jobs)) if pool else [work(j) for j in jobs]
                grads = results[0][1]
                for v, g in results[1:]:
                    _add_into(grads, g)
                value = float(sum(v for v, _ in results))
                if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
                    where = _first_bad_layer(spec, states, grads)
                    raise TrainingDiverged(f"loss {value!r} at epoch {epoch} step {step} (layer {where})",
                                           epoch, step, where)
                apply_sgd(states, grads, cfg.learning_rate)
                total += value * len(idx)
                step += 1
            epoch_losses.append(total / n)
            log.debug("epoch %d loss %.6g", epoch, epoch_losses[-1])
    finally:
        if own_pool:
            pool.shutdown()
    final = evaluate_loss(spec, states, inputs, targets, cfg.loss)
    return TrainReport(epoch_losses, initial, final, step, time.perf_counter() - t0)


# -- gradient check ---------------------------------------------------------

def _rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_diff_check(spec: NetworkSpec, states, sample, loss: str = "mse", step: float = 1e-5,
                      max_params: int = 10_000, seed: int = 0, training: bool = False,
                      per_tensor: bool = False):
    """Worst relative error between analytic and central-difference gradients.

    ``sample`` is ``(x, target)``.  Above ``max_params`` scalars a seeded
    random subset is checked.  With ``per_tensor`` a dict keyed by
    ``"layer:kind.tensor"`` is returned instead of the overall maximum.
    """
    x, target = sample

    def run():
        rng = np.random.default_rng(seed) if training else None
        return loss_and_grads(spec, states, x, target, loss, training=training, rng=rng)

    _, grads = run()
    coords = [(i, k, j) for i, st in enumerate(states) for k in sorted(st) for j in range(st[k].size)]
    if len(coords) > max_params:
        pick = np.random.default_rng(seed).choice(len(coords), max_params, replace=False)
        coords = [coords[p] for p in sorted(pick)]
    worst: dict[str, float] = {}
    for i, k, j in coords:
        flat = states[i][k].reshape(-1)
        old = flat[j]
        flat[j] = old + step
        up = run()[0]
        flat[j] = old - step
        down = run()[0]
        flat[j] = old
        fd = (up - down) / (2 * step)
        name = f"{i}:{spec.layers[i].kind}.{k}"
        worst[name] = max(worst.get(name, 0.0), _rel_err(fd, grads[i][k].reshape(-1)[j]))
    if per_tensor:
        return worst
    return max(worst.values(), default=0.0)


# -- SE metrics and operation decision ---------------------------------------

def binarize_se(weights, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(weights, dtype=np.float64) >= threshold).astype(np.float64)


def se_exact_match(learned, truth) -> bool:
    learned, truth = np.asarray(learned), np.asarray(truth)
    if learned.shape != truth.shape:
        raise DomainError(f"shape mismatch: {learned.shape} vs {truth.shape}")
    return bool(np.array_equal(learned, truth))


def offset_aligned_taxicab(learned, truth) -> float:
    """Taxicab distance after removing the best constant offset (the L1 median)."""
    d = np.asarray(learned, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return float(np.sum(np.abs(d - np.median(d))))


class Decision(str, Enum):
    DILATION = "dilation"
    EROSION = "erosion"
    UNDECIDED = "undecided"


def decide_operation(a: float, kind: SmoothSign | str) -> Decision:
    v = float(smooth_sign(a, kind))
    if v > 0.5:
        return Decision.DILATION
    if v < -0.5:
        return Decision.EROSION
    return Decision.UNDECIDED
