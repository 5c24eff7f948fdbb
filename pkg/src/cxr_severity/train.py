"""Adam, the balanced-batch training loop, evaluation and severity metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.manifest import Manifest, SampleRecord
from .data.pgm import read_pgm
from .data.sampling import balanced_batches
from .data.transforms import augment, preprocess, random_draw
from .errors import ConfigurationError, EvaluationError, TrainingError
from .model import NetworkGraph, level_from_probs
from .rng import substream
from .tensor import Tape, Tensor, backward, cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.0001
    epochs: int = 137
    batch_size: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-7
    seed: int = 0
    image_size: int = 480
    freeze_backbone: bool = False
    augment: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}",
                                     module="train")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}", module="train")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigurationError(f"batch_size must be even, got {self.batch_size}",
                                     module="train")


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 0.0001, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-7) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Parameters without a gradient are left as is."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        m_prev = m.get(name, np.zeros_like(p))
        v_prev = v.get(name, np.zeros_like(p))
        m[name] = beta1 * m_prev + (1.0 - beta1) * g
        v[name] = beta2 * v_prev + (1.0 - beta2) * (g * g)
        m_hat = m[name] / bc1
        v_hat = v[name] / bc2
        new_params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return new_params, AdamState(m, v, t)


# --------------------------------------------------------------------------
# data loading


class ImageStore:
    """Loads and preprocesses manifest images once, keyed by image_path."""

    def __init__(self, manifest: Manifest, size: int):
        self.manifest = manifest
        self.size = size
        self._cache: dict[str, np.ndarray] = {}

    def put(self, image_path: str, image: np.ndarray) -> None:
        self._cache[image_path] = np.asarray(image, dtype=np.float64).reshape(1, self.size, self.size)

    def get(self, record: SampleRecord) -> np.ndarray:
        img = self._cache.get(record.image_path)
        if img is None:
            raster, maxval = read_pgm(self.manifest.resolve(record))
            img = preprocess(raster, self.size, maxval).data
            self._cache[record.image_path] = img
        return img


def _onehot(levels, dtype) -> np.ndarray:
    y = np.zeros((len(levels), 2), dtype=dtype)
    y[np.arange(len(levels)), np.asarray(levels) - 1] = 1
    return y


def train_step(graph: NetworkGraph, state: AdamState, batch: np.ndarray, levels,
               config: TrainConfig) -> tuple[NetworkGraph, AdamState, float]:
    dtype = next(iter(graph.params.values())).dtype
    with Tape() as tape:
        watched = {k: tape.watch(v, trainable=k not in graph.frozen)
                   for k, v in graph.params.items()}
        logits = graph.forward(Tensor._wrap(batch.astype(dtype)), watched)
        loss = cross_entropy(logits, Tensor._wrap(_onehot(levels, dtype)))
    leaf_grads = backward(tape, loss)
    grads = {k: leaf_grads[t.node].data for k, t in watched.items() if t.node in leaf_grads}
    params, state = adam_step(graph.params, grads, state, config.learning_rate,
                              config.adam_beta1, config.adam_beta2, config.adam_eps)
    new = NetworkGraph(graph.spec, graph.input_dims, graph.layers, params, set(graph.frozen))
    return new, state, loss.item()


def train(config: TrainConfig, manifest: Manifest, network: NetworkGraph,
          images: ImageStore | None = None):
    """Train on the manifest's train split. Returns (network, history).

    history holds one dict per epoch: epoch, mean_loss (mean batch loss) and
    train_accuracy (unaugmented accuracy on the full train split after the epoch).
    """
    images = images or ImageStore(manifest, config.image_size)
    if tuple(network.input_dims) != (1, config.image_size, config.image_size):
        raise ConfigurationError(
            f"network input dims {list(network.input_dims)} do not match image_size "
            f"{config.image_size}", module="train")
    state = AdamState()
    history = []
    bs = config.batch_size
    for epoch in range(config.epochs):
        losses = []
        for b, batch in enumerate(balanced_batches(manifest, bs, config.seed, epoch)):
            xs = []
            for j, rec in enumerate(batch):
                img = images.get(rec)
                if config.augment:
                    draw = random_draw(substream(config.seed, 0xA06, epoch, b * bs + j),
                                       config.image_size)
                    img = augment(Tensor._wrap(img), draw).data
                xs.append(img)
            network, state, loss = train_step(network, state, np.stack(xs),
                                              [r.level for r in batch], config)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            losses.append(loss)
        cm = evaluate(network, manifest, "train", images)
        history.append({"epoch": epoch + 1, "mean_loss": float(np.mean(losses)),
                        "train_accuracy": cm.accuracy})
        log.info("epoch %d loss %.4f train_acc %.4f", epoch + 1, history[-1]["mean_loss"],
                 cm.accuracy)
    return network, history


def write_history(history, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "train_accuracy"])
        for row in history:
            w.writerow([row["epoch"], repr(row["mean_loss"]), repr(row["train_accuracy"])])


# --------------------------------------------------------------------------
# evaluation


@dataclass
class ConfusionMatrix:
    """counts[true_level - 1][predicted_level - 1]."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), dtype=np.int64))

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64).reshape(2, 2)
        if np.any(self.counts < 0):
            raise EvaluationError("confusion matrix counts must be non-negative", module="train")

    @classmethod
    def from_levels(cls, true_levels, predicted_levels) -> ConfusionMatrix:
        cm = np.zeros((2, 2), dtype=np.int64)
        for t, p in zip(true_levels, predicted_levels):
            cm[t - 1, p - 1] += 1
        return cls(cm)

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else float("nan")

    def tolist(self) -> list[list[int]]:
        return self.counts.tolist()


def evaluate(network, manifest: Manifest, split: str | None = "test",
             images: ImageStore | None = None, chunk: int = 64) -> ConfusionMatrix:
    """Confusion matrix of unaugmented predictions on ``split`` (None = every record).

    ``network`` is a NetworkGraph or any callable mapping an (N,1,S,S) batch
    to (N,2) probabilities; a plain callable needs ``images`` to fix S.
    """
    records = manifest.split(split)
    if not records:
        raise EvaluationError(f"split {split!r} is empty", module="train")
    if images is None:
        images = ImageStore(manifest, network.input_dims[-1])
    predicted = []
    for i in range(0, len(records), chunk):
        batch = np.stack([images.get(r) for r in records[i:i + chunk]])
        predicted.extend(level_from_probs(p) for p in network(batch))
    return ConfusionMatrix.from_levels([r.level for r in records], predicted)


@dataclass
class MetricsReport:
    """Per-level sensitivity and PPV plus accuracy; ``None`` marks an undefined ratio."""

    sensitivity: dict[int, float | None]
    ppv: dict[int, float | None]
    accuracy: float


def _ratio(num, den):
    return None if den == 0 else num / den


def metrics_from_confusion(cm: ConfusionMatrix) -> MetricsReport:
    c = cm.counts
    if cm.total == 0:
        raise EvaluationError("confusion matrix is empty", module="train")
    rows, cols = c.sum(axis=1), c.sum(axis=0)
    return MetricsReport(
        sensitivity={lvl: _ratio(int(c[lvl - 1, lvl - 1]), int(rows[lvl - 1])) for lvl in (1, 2)},
        ppv={lvl: _ratio(int(c[lvl - 1, lvl - 1]), int(cols[lvl - 1])) for lvl in (1, 2)},
        accuracy=int(np.trace(c)) / cm.total,
    )


def format_metrics(report: MetricsReport, name: str = "model") -> str:
    headers = ["Network", "Sensitivity (Level 1)", "Sensitivity (Level 2)",
               "PPV (Level 1)", "PPV (Level 2)", "Accuracy"]
    vals = [report.sensitivity[1], report.sensitivity[2], report.ppv[1], report.ppv[2],
            report.accuracy]
    cells = [name] + ["n/a" if v is None else f"{100 * v:.2f}%" for v in vals]
    widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
    line = lambda xs: "  ".join(x.ljust(w) for x, w in zip(xs, widths))  # noqa: E731
    return line(headers) + "\n" + line(cells)


def format_confusion(cm: ConfusionMatrix) -> str:
    c = cm.counts
    return ("true\\pred  Level 1  Level 2\n"
            f"Level 1    {c[0, 0]:<7}  {c[0, 1]:<7}\n"
            f"Level 2    {c[1, 0]:<7}  {c[1, 1]:<7}")
