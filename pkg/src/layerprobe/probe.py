"""Weighted-average-layer probe: softmax layer weights, shared ReLU trunk, per-task heads.

Inputs are per-layer pooled vectors, arrays of shape ``(batch, n_layers, dim)``.
Layer indices are 0-based.
"""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus_io import _atomic_write_bytes

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
PROBE_MAGIC = b"LPRB"
PROBE_VERSION = 1


class ProbeError(ValueError):
    pass


class UnknownTaskError(ProbeError, KeyError):
    pass


class ProbeDivergedError(ProbeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class WaProbe:
    theta: np.ndarray  # (L,) pre-softmax layer logits
    w1: np.ndarray  # (dim, hidden)
    b1: np.ndarray  # (hidden,)
    heads: dict  # task -> (w2 (hidden, C), b2 (C,))
    layer_mask: np.ndarray = None  # (L,) bool

    def __post_init__(self):
        if self.layer_mask is None:
            self.layer_mask = np.ones(len(self.theta), dtype=bool)
        self.layer_mask = np.asarray(self.layer_mask, dtype=bool)
        if self.layer_mask.shape != self.theta.shape or not self.layer_mask.any():
            raise ProbeError("layer_mask must be a non-empty boolean mask over layers")

    @property
    def n_layers(self) -> int:
        return self.theta.shape[0]

    @property
    def tasks(self) -> list[str]:
        return list(self.heads)

    def copy(self) -> "WaProbe":
        return WaProbe(self.theta.copy(), self.w1.copy(), self.b1.copy(),
                       {t: (w.copy(), b.copy()) for t, (w, b) in self.heads.items()},
                       self.layer_mask.copy())

    def param_arrays(self) -> dict[str, np.ndarray]:
        """Named views onto every trainable array (shared with the probe)."""
        out = {"theta": self.theta, "w1": self.w1, "b1": self.b1}
        for t, (w, b) in self.heads.items():
            out[f"{t}.w2"] = w
            out[f"{t}.b2"] = b
        return out


def mask_from_layers(n_layers: int, layers: Iterable[int] | None) -> np.ndarray:
    if layers is None:
        return np.ones(n_layers, dtype=bool)
    mask = np.zeros(n_layers, dtype=bool)
    for i in layers:
        if not 0 <= i < n_layers:
            raise ProbeError(f"layer {i} out of range 0..{n_layers - 1}")
        mask[i] = True
    return mask


def init_probe(n_layers: int, dim: int, tasks: Mapping[str, int], hidden: int = 256,
               seed: int = 0, layers: Iterable[int] | None = None) -> WaProbe:
    """He-initialized trunk, Glorot-initialized heads, uniform layer logits."""
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, math.sqrt(2.0 / dim), size=(dim, hidden))
    heads = {}
    for task in sorted(tasks):
        c = tasks[task]
        if c < 2:
            raise ProbeError(f"task {task!r} needs at least 2 classes")
        heads[task] = (rng.normal(0.0, math.sqrt(2.0 / (hidden + c)), size=(hidden, c)), np.zeros(c))
    return WaProbe(np.zeros(n_layers), w1, np.zeros(hidden), heads, mask_from_layers(n_layers, layers))


def extract_layer_weights(probe: WaProbe) -> np.ndarray:
    """Softmax of the layer logits over the mask; masked-out layers get exactly 0."""
    th = np.where(probe.layer_mask, probe.theta, -np.inf)
    e = np.exp(th - th[probe.layer_mask].max())
    return e / e.sum()


def select_best_k_layers(weights: Sequence[float], k: int = 3) -> list[int]:
    """Indices of the ``k`` largest weights (ties to the lower index), sorted ascending."""
    w = np.asarray(weights, dtype=np.float64)
    if not 1 <= k <= w.size:
        raise ProbeError(f"k must be in 1..{w.size}")
    order = sorted(range(w.size), key=lambda i: (-w[i], i))
    return sorted(order[:k])


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(probe: WaProbe, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != probe.n_layers or x.shape[2] != probe.w1.shape[0]:
        raise ProbeError(f"expected input (batch, {probe.n_layers}, {probe.w1.shape[0]}), got {x.shape}")
    return x


def _trunk(probe: WaProbe, x: np.ndarray):
    w = extract_layer_weights(probe)
    z = np.einsum("l,bld->bd", w, x)
    pre = z @ probe.w1 + probe.b1
    return w, z, pre, np.maximum(pre, 0.0)


def forward(probe: WaProbe, x, task: str) -> np.ndarray:
    """Class probabilities, shape ``(batch, C)`` (or ``(C,)`` for a single ``L x dim`` input)."""
    if task not in probe.heads:
        raise UnknownTaskError(task)
    single = np.ndim(x) == 2
    x = _check_input(probe, x)
    _, _, _, h = _trunk(probe, x)
    w2, b2 = probe.heads[task]
    p = _softmax(h @ w2 + b2)
    return p[0] if single else p


def predict(probe: WaProbe, x, task: str) -> np.ndarray:
    return np.argmax(forward(probe, x, task), axis=-1)


def _nonempty(batches: Mapping[str, tuple]) -> dict:
    out = {t: b for t, b in batches.items() if len(b[1]) > 0}
    if not out:
        raise ProbeError("all task batches are empty")
    return out


def loss_multitask(probe: WaProbe, batches: Mapping[str, tuple]) -> float:
    """Mean over non-empty tasks of the mean cross-entropy; ``batches[task] = (x, y)``."""
    active = _nonempty(batches)
    total = 0.0
    for task, (x, y) in active.items():
        p = forward(probe, x, task)
        y = np.asarray(y, dtype=np.int64)
        total += float(np.mean(-np.log(np.maximum(p[np.arange(len(y)), y], PROB_FLOOR))))
    return total / len(active)


def gradient(probe: WaProbe, batches: Mapping[str, tuple]) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients of :func:`loss_multitask`, keyed like ``param_arrays``."""
    active = _nonempty(batches)
    grads = {k: np.zeros_like(v) for k, v in probe.param_arrays().items()}
    w = extract_layer_weights(probe)
    g_w = np.zeros_like(w)
    n_tasks = len(active)
    total = 0.0
    for task, (x, y) in active.items():
        if task not in probe.heads:
            raise UnknownTaskError(task)
        x = _check_input(probe, x)
        y = np.asarray(y, dtype=np.int64)
        b = len(y)
        _, z, pre, h = _trunk(probe, x)
        w2, b2 = probe.heads[task]
        p = _softmax(h @ w2 + b2)
        py = p[np.arange(b), y]
        total += float(np.mean(-np.log(np.maximum(py, PROB_FLOOR))))
        g_logits = p.copy()
        g_logits[np.arange(b), y] -= 1.0
        # clamped probabilities have zero derivative
        g_logits[py < PROB_FLOOR] = 0.0
        g_logits /= b * n_tasks
        grads[f"{task}.w2"] += h.T @ g_logits
        grads[f"{task}.b2"] += g_logits.sum(axis=0)
        g_pre = (g_logits @ w2.T) * (pre > 0)
        grads["w1"] += z.T @ g_pre
        grads["b1"] += g_pre.sum(axis=0)
        g_z = g_pre @ probe.w1.T
        g_w += np.einsum("bd,bld->l", g_z, x)
    m = probe.layer_mask
    g_theta = np.zeros_like(w)
    g_theta[m] = w[m] * (g_w[m] - np.dot(w[m], g_w[m]))
    grads["theta"] = g_theta
    return total / n_tasks, grads


def numerical_gradient(probe: WaProbe, batches, h: float = 1e-4) -> dict[str, np.ndarray]:
    """Central finite differences of the loss; for checking :func:`gradient`."""
    out = {}
    for name, arr in probe.param_arrays().items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_multitask(probe, batches)
            flat[i] = old - h
            down = loss_multitask(probe, batches)
            flat[i] = old
            gf[i] = (up - down) / (2 * h)
        out[name] = g
    return out


# --------------------------------------------------------------------------
# Evaluation


def classification_scores(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> tuple[float, float]:
    """Accuracy and unweighted (macro) F1; classes absent from both sides score F1 = 0."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ProbeError("empty evaluation set")
    acc = float(np.mean(y_true == y_pred))
    f1s = []
    for c in range(n_classes):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return acc, float(np.mean(f1s))


def evaluate(probe: WaProbe, x, y, task: str) -> tuple[float, float]:
    if len(y) == 0:
        raise ProbeError("empty evaluation set")
    n_classes = probe.heads[task][0].shape[1] if task in probe.heads else None
    if n_classes is None:
        raise UnknownTaskError(task)
    return classification_scores(y, predict(probe, x, task), n_classes)


# --------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class NewBob:
    factor: float = 0.5
    improvement_threshold: float = 0.0025


@dataclass(frozen=True)
class TrainConfig:
    tasks: dict = field(default_factory=dict)  # task id -> class count
    lr: float = 1e-3
    epochs: int = 10
    batch: int = 32  # 0 = full batch
    seed: int = 0
    hidden: int = 256
    newbob: NewBob = NewBob()
    layers: tuple | None = None  # restrict the WA layer to these indices

    def __post_init__(self):
        if not self.lr > 0:
            raise ProbeError("lr must be positive")
        if self.epochs < 1:
            raise ProbeError("epochs must be >= 1")
        if self.batch < 0:
            raise ProbeError("batch must be >= 0")


def newbob_update(lr: float, prev_metric: float | None, metric: float, nb: NewBob) -> float:
    """Anneal ``lr`` when the relative dev improvement (higher is better) falls below threshold."""
    if prev_metric is None:
        return lr
    improvement = (metric - prev_metric) / max(abs(prev_metric), 1e-12)
    return lr * nb.factor if improvement < nb.improvement_threshold else lr


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    dev_metric: float
    dev_scores: dict  # task -> {"accuracy", "macro_f1"}


def _dev_metric(probe: WaProbe, dev: Mapping[str, tuple]) -> tuple[float, dict]:
    scores = {}
    for task, (x, y) in dev.items():
        if len(y) == 0:
            continue
        acc, f1 = evaluate(probe, x, y, task)
        scores[task] = {"accuracy": acc, "macro_f1": f1}
    if not scores:
        raise ProbeError("development set is empty")
    return float(np.mean([s["macro_f1"] for s in scores.values()])), scores


def train_probe(train: Mapping[str, tuple], dev: Mapping[str, tuple], cfg: TrainConfig,
                probe: WaProbe | None = None) -> tuple[WaProbe, list[EpochRecord]]:
    """Mini-batch gradient descent with new-bob annealing; returns the best-dev-epoch probe.

    ``train`` and ``dev`` map task id to ``(x, y)`` with ``x`` shaped
    ``(n, L, dim)`` and integer labels ``y``. The dev metric is the mean
    macro F1 over tasks.
    """
    train = {t: (np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)) for t, (x, y) in train.items()}
    if not any(len(y) for _, y in train.values()):
        raise ProbeError("training set is empty")
    tasks = dict(cfg.tasks) or {t: int(max(y.max(), dev[t][1].max() if t in dev else 0)) + 1
                                for t, (_, y) in train.items()}
    x0 = next(x for x, y in train.values() if len(y))
    if probe is None:
        probe = init_probe(x0.shape[1], x0.shape[2], tasks, hidden=cfg.hidden, seed=cfg.seed,
                           layers=cfg.layers)
    rng = np.random.default_rng(cfg.seed + 1)
    lr = cfg.lr
    prev = None
    best, best_metric = probe.copy(), -math.inf
    history = []
    for epoch in range(1, cfg.epochs + 1):
        # one permutation per task per epoch; steps interleave tasks batch-by-batch
        orders = {t: rng.permutation(len(y)) for t, (_, y) in train.items()}
        n_steps = max(1 if cfg.batch == 0 else math.ceil(len(y) / cfg.batch) for _, y in train.values())
        losses = []
        for step in range(n_steps):
            batches = {}
            for t, (x, y) in train.items():
                bs = len(y) if cfg.batch == 0 else cfg.batch
                idx = orders[t][step * bs:(step + 1) * bs]
                batches[t] = (x[idx], y[idx])
            if not any(len(b[1]) for b in batches.values()):
                continue
            loss, grads = gradient(probe, batches)
            if not math.isfinite(loss):
                raise ProbeDivergedError(epoch, loss)
            losses.append(loss)
            for name, arr in probe.param_arrays().items():
                arr -= lr * grads[name]
        if not all(np.all(np.isfinite(a)) for a in probe.param_arrays().values()):
            raise ProbeDivergedError(epoch, math.nan)
        metric, scores = _dev_metric(probe, dev)
        history.append(EpochRecord(epoch, lr, float(np.mean(losses)), metric, scores))
        log.info("epoch %d lr %.3g loss %.4f dev %.4f", epoch, lr, history[-1].train_loss, metric)
        if metric > best_metric:
            best, best_metric = probe.copy(), metric
        lr = newbob_update(lr, prev, metric, cfg.newbob)
        prev = metric
    return best, history


# --------------------------------------------------------------------------
# Serialization: "LPRB" | version | L | dim | hidden | n_tasks | mask u8[L] | theta | w1 | b1
#                | per task: name_len u32, utf-8 name, C u32, w2, b2   (float64 LE)

_PRB_HEADER = struct.Struct("<4sIIIII")


def encode_probe(probe: WaProbe) -> bytes:
    L, (dim, hidden) = probe.n_layers, probe.w1.shape
    parts = [_PRB_HEADER.pack(PROBE_MAGIC, PROBE_VERSION, L, dim, hidden, len(probe.heads)),
             probe.layer_mask.astype(np.uint8).tobytes()]
    for a in (probe.theta, probe.w1, probe.b1):
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    for task in sorted(probe.heads):
        w2, b2 = probe.heads[task]
        name = task.encode("utf-8")
        parts.append(struct.pack("<I", len(name)) + name + struct.pack("<I", w2.shape[1]))
        parts.append(np.ascontiguousarray(w2, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b2, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_probe(data: bytes) -> WaProbe:
    if data[:4] != PROBE_MAGIC:
        raise ProbeError(f"bad probe magic {bytes(data[:4])!r}")
    if len(data) < _PRB_HEADER.size:
        raise ProbeError("truncated probe header")
    _, version, L, dim, hidden, n_tasks = _PRB_HEADER.unpack_from(data)
    if version != PROBE_VERSION:
        raise ProbeError(f"unsupported probe version {version}")
    off = _PRB_HEADER.size

    def take(nbytes):
        nonlocal off
        if off + nbytes > len(data):
            raise ProbeError("truncated probe payload")
        chunk = data[off:off + nbytes]
        off += nbytes
        return chunk

    def arr(*shape):
        count = int(np.prod(shape))
        return np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    mask = np.frombuffer(take(L), dtype=np.uint8).astype(bool)
    theta, w1, b1 = arr(L), arr(dim, hidden), arr(hidden)
    heads = {}
    for _ in range(n_tasks):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (c,) = struct.unpack("<I", take(4))
        heads[name] = (arr(hidden, c), arr(c))
    if off != len(data):
        raise ProbeError("trailing bytes after probe payload")
    return WaProbe(theta, w1, b1, heads, mask)


def write_probe(path: str | os.PathLike, probe: WaProbe) -> None:
    _atomic_write_bytes(path, encode_probe(probe))


def read_probe(path: str | os.PathLike) -> WaProbe:
    with open(path, "rb") as fh:
        return decode_probe(fh.read())
