"""SGD training loop, evaluation metrics, confusion matrix and the
cross-validation driver.

Defaults follow the reference protocol: learning rate 1e-3, mini-batch 35,
200 epochs, plain SGD (momentum 0).  Everything is seeded; two runs with
the same seed produce identical epoch logs in single-threaded mode.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import model as model_mod
from .data import Dataset
from .errors import NumericError, ShapeError
from .ops import softmax_xent_batch
from .tensor import SeededRng

EVAL_BATCH = 64


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 35
    epochs: int = 200
    momentum: float = 0.0
    seed: int = 0
    shuffle: bool = True
    checkpoint_every: int = 0  # epochs between checkpoints, 0 disables

    def __post_init__(self):
        # lr 0 is allowed: it freezes the optimizer, which some checks rely on.
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be at least 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint cadence must be non-negative")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class Metrics:
    epochs: list = field(default_factory=list)
    test_acc: float = float("nan")

    def log_lines(self):
        for row in self.epochs:
            yield (f"{row.epoch}\t{row.train_loss:.6f}\t"
                   f"{row.train_acc:.2f}\t{row.val_acc:.2f}")


class ConfusionMatrix:
    """C x C counts; rows are true classes, columns predictions."""

    def __init__(self, num_classes):
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, true_label, predicted):
        self.counts[true_label, predicted] += 1

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def correct(self):
        return int(np.trace(self.counts))

    @property
    def accuracy(self):
        return 100.0 * self.correct / self.total

    def render(self, class_names):
        width = max(len(n) for n in class_names)
        width = max(width, len(str(int(self.counts.max(initial=1)))))
        head = " " * (width + 2) + " ".join(f"{n:>{width}}" for n in class_names)
        lines = [head]
        for i, name in enumerate(class_names):
            cells = " ".join(f"{int(c):>{width}}" for c in self.counts[i])
            lines.append(f"{name:>{width}}: {cells}")
        return "\n".join(lines)


def sgd_step(params, grads, velocity, config):
    """One SGD update, in place: v <- momentum v + g; w <- w - lr v."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeError("params, grads and velocity lists differ in length")
    for weights, grad, vel in zip(params, grads, velocity):
        if weights.shape != grad.shape or weights.shape != vel.shape:
            raise ShapeError(f"update shape mismatch: {weights.shape} vs "
                             f"{grad.shape} vs {vel.shape}")
        if config.momentum:
            vel *= config.momentum
            vel += grad
        else:
            vel[...] = grad
        weights -= config.lr * vel


def _stack(samples, dtype):
    images = np.stack([s.image for s in samples]).astype(dtype, copy=False)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, labels


def evaluate(network, samples, batch_size=EVAL_BATCH):
    """Accuracy percent and confusion matrix over a sample list.

    Prediction is the argmax logit, lowest class index on exact ties.
    Accuracy = correctly predicted / total * 100.
    """
    if not samples:
        raise ValueError("no samples to evaluate")
    num_classes = network.config.num_classes
    matrix = ConfusionMatrix(num_classes)
    images, labels = _stack(samples, network.dtype)
    if labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} out of range for "
                         f"{num_classes}-class network")
    for start in range(0, len(samples), batch_size):
        chunk = images[start:start + batch_size]
        logits, _ = network.forward(chunk)
        preds = np.argmax(logits, axis=1)
        for true_label, pred in zip(labels[start:start + batch_size], preds):
            matrix.add(int(true_label), int(pred))
    return matrix.accuracy, matrix


def train_loop(network, dataset, config, log_path=None, checkpoint_path=None):
    """Mini-batch SGD over the train split; returns per-epoch Metrics.

    Each epoch reshuffles the train split (seeded), walks mini-batches of
    the configured size (last batch may be short), and records mean train
    loss, train accuracy (from the pre-update batch logits) and validation
    accuracy.  The optional log receives one tab-separated line per epoch.
    """
    train_idx = dataset.indices("train")
    if not train_idx:
        raise ValueError("dataset has no train-tagged samples")
    val_samples = dataset.subset("val")
    images, labels = _stack([dataset.samples[i] for i in train_idx], network.dtype)
    count = len(train_idx)

    rng = SeededRng(config.seed)
    params = network.parameters()
    velocity = [np.zeros_like(p) for p in params]
    metrics = Metrics()

    log = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        if log:
            log.write(f"# lr={config.lr} batch={config.batch_size} "
                      f"epochs={config.epochs} momentum={config.momentum} "
                      f"seed={config.seed}\n")
            log.write("# epoch\ttrain_loss\ttrain_acc\tval_acc\n")
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(count) if config.shuffle else np.arange(count)
            loss_sum = 0.0
            correct = 0
            for start in range(0, count, config.batch_size):
                picked = order[start:start + config.batch_size]
                batch_images = images[picked]
                batch_labels = labels[picked]
                logits, tape = network.forward_tape(batch_images)
                loss, grad_logits = softmax_xent_batch(logits, batch_labels)
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch}, "
                                       f"batch starting {start}")
                loss_sum += loss * len(picked)
                correct += int((np.argmax(logits, axis=1) == batch_labels).sum())
                grads = network.backward(tape, grad_logits)
                sgd_step(params, grads, velocity, config)
            val_acc = evaluate(network, val_samples)[0] if val_samples else float("nan")
            row = EpochStats(epoch, loss_sum / count, 100.0 * correct / count, val_acc)
            metrics.epochs.append(row)
            if log:
                log.write(f"{row.epoch}\t{row.train_loss:.6f}\t"
                          f"{row.train_acc:.2f}\t{row.val_acc:.2f}\n")
                log.flush()
            if (checkpoint_path and config.checkpoint_every
                    and epoch % config.checkpoint_every == 0):
                with open(checkpoint_path, "wb") as handle:
                    handle.write(model_mod.save_model(network))
    finally:
        if log:
            log.close()
    return metrics


def crossvalidate(model_config, dataset, n_folds, train_config):
    """N-fold cross-validation: fresh network per fold, seed offset by the
    fold index; returns (per-fold (Metrics, accuracy) list, mean, stddev).
    """
    from .data import kfold_partition

    folds = kfold_partition(dataset, n_folds, train_config.seed)
    results = []
    for fold, (train_idx, test_idx) in enumerate(folds):
        tags = [""] * len(dataset.samples)
        for i in train_idx:
            tags[i] = "train"
        for i in test_idx:
            tags[i] = "test"
        fold_ds = Dataset(dataset.samples, dataset.class_names, tags)
        net = model_mod.build_network(
            model_config, rng=SeededRng(model_config.seed + fold),
            dtype=np.dtype("float32"))
        fold_cfg = replace(train_config, seed=train_config.seed + fold)
        metrics = train_loop(net, fold_ds, fold_cfg)
        accuracy, _ = evaluate(net, fold_ds.subset("test"))
        metrics.test_acc = accuracy
        results.append((metrics, accuracy))
    accs = np.array([acc for _, acc in results])
    return results, float(accs.mean()), float(accs.std())
