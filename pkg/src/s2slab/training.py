"""Two-stage defense training plus plain classifier training and evaluation.

Stage 1 trains the autoencoder unsupervised on pixel-domain reconstruction.
Stage 2 fine-tunes only the decoder by backpropagating the frozen
classifier's cross-entropy through the reconstruction; encoder and
classifier bytes are snapshot-checked so the post-hoc contract cannot be
violated silently.

All loops shuffle with a counter-based generator keyed by the config seed,
so fixed (seed, data) reproduces bit-identical parameters.
"""

import dataclasses
import json
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, make_rng, mse, softmax_cross_entropy
from .data import Dataset
from .models import Composite, forward_logits, reconstruct


class TrainingError(RuntimeError):
    """A training contract was violated (bad config, wrong model kind, ...)."""


class DivergenceError(RuntimeError):
    """Loss became non-finite; `epoch` records where."""

    def __init__(self, epoch: int, value: float):
        super().__init__(f"loss diverged to {value} in epoch {epoch}")
        self.epoch = int(epoch)


_OPTIMIZERS = ("adam", "sgd")
_LOSSES = ("cross_entropy", "mse")
_SHUFFLE_TAG = 0x5F0E


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 128
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    # None picks the loss the stage requires; setting it is a cross-check only
    loss: str | None = None
    frozen_prefixes: tuple = ()
    # stage 2 only: fit the classifier's own clean-input predictions instead
    # of ground-truth labels
    distill: bool = False

    def __post_init__(self):
        if self.lr <= 0.0:
            raise TrainingError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise TrainingError(f"epochs must be >= 0, got {self.epochs}")
        if self.optimizer not in _OPTIMIZERS:
            raise TrainingError(f"unknown optimizer {self.optimizer!r}, want one of {_OPTIMIZERS}")
        if self.loss is not None and self.loss not in _LOSSES:
            raise TrainingError(f"unknown loss {self.loss!r}, want one of {_LOSSES}")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainingError(f"momentum must be in [0, 1), got {self.momentum}")
        if not (0.0 <= self.betas[0] < 1.0 and 0.0 <= self.betas[1] < 1.0):
            raise TrainingError(f"betas must be in [0, 1), got {self.betas}")


@dataclass(frozen=True)
class TrainReport:
    epoch_losses: tuple
    final_accuracy: float | None
    seconds: float
    config: TrainConfig


def save_report(report: TrainReport, path) -> None:
    payload = {
        "epoch_losses": list(report.epoch_losses),
        "final_accuracy": report.final_accuracy,
        "seconds": report.seconds,
        "config": dataclasses.asdict(report.config),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class SGD:
    """Plain momentum SGD over an explicit parameter list."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        for p in self.params:
            if p.frozen:
                p.grad = None
                continue
            if p.grad is None:
                raise TrainingError(f"parameter {p.name!r} has no gradient")
            v = self._velocity[id(p)]
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad = None


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.t = 0
        self._m = {id(p): np.zeros_like(p.data) for p in self.params}
        self._v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in self.params:
            if p.frozen:
                p.grad = None
                continue
            if p.grad is None:
                raise TrainingError(f"parameter {p.name!r} has no gradient")
            m = self._m[id(p)]
            v = self._v[id(p)]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    return SGD(params, lr=cfg.lr, momentum=cfg.momentum)


# ---------------------------------------------------------------------------
# shared epoch loop
# ---------------------------------------------------------------------------


def _trainable(params, cfg: TrainConfig):
    out = []
    for p in params:
        if p.frozen:
            continue
        if any(p.name.startswith(pref) for pref in cfg.frozen_prefixes):
            continue
        out.append(p)
    return out


def _run_epochs(batch_loss, params, dataset: Dataset, cfg: TrainConfig):
    """Drive the optimizer; returns per-epoch mean losses.

    batch_loss(idx) must build the scalar loss tensor for the given sample
    indices inside the active tape.
    """
    n = len(dataset)
    trainable = _trainable(params, cfg)
    opt = _make_optimizer(trainable, cfg)
    losses = []
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, _SHUFFLE_TAG, epoch).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with Tape() as tape:
                loss = batch_loss(idx)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise DivergenceError(epoch, value)
                tape.backward(loss, wrt=trainable)
            opt.step()
            total += value * len(idx)
        losses.append(total / n)
    return tuple(losses)


def _require_loss(cfg: TrainConfig, kind: str) -> None:
    if cfg.loss is not None and cfg.loss != kind:
        raise TrainingError(f"this stage uses {kind!r} loss, config says {cfg.loss!r}")


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def train_classifier(model, dataset: Dataset, cfg: TrainConfig) -> TrainReport:
    """Clean supervised training; no adversarial augmentation of any kind."""
    if model.kind != "classifier":
        raise TrainingError(f"train_classifier needs a classifier, got {model.kind!r}")
    _require_loss(cfg, "cross_entropy")
    t0 = time.perf_counter()

    def batch_loss(idx):
        logits = forward_logits(model, Tensor(dataset.images[idx]))
        return softmax_cross_entropy(logits, dataset.labels[idx])

    losses = _run_epochs(batch_loss, model.parameters(), dataset, cfg)
    acc = evaluate_accuracy(model, dataset)
    return TrainReport(losses, acc, time.perf_counter() - t0, cfg)


def train_ae_stage1(ae, dataset: Dataset, cfg: TrainConfig) -> TrainReport:
    """Unsupervised reconstruction training; labels in the dataset are ignored."""
    if ae.kind != "autoencoder":
        raise TrainingError(f"train_ae_stage1 needs an autoencoder, got {ae.kind!r}")
    _require_loss(cfg, "mse")
    t0 = time.perf_counter()

    def batch_loss(idx):
        x = Tensor(dataset.images[idx])
        return mse(reconstruct(ae, x), x)

    losses = _run_epochs(batch_loss, ae.parameters(), dataset, cfg)
    return TrainReport(losses, None, time.perf_counter() - t0, cfg)


def finetune_decoder_stage2(ae, classifier, dataset: Dataset, cfg: TrainConfig) -> TrainReport:
    """Fine-tune only the decoder through the frozen classifier's loss.

    The classifier must arrive fully frozen; encoder parameters are held
    fixed here regardless of their flags.  Both constraints are verified by
    byte comparison after the run.
    """
    if ae.kind != "autoencoder":
        raise TrainingError(f"finetune_decoder_stage2 needs an autoencoder, got {ae.kind!r}")
    if classifier.kind != "classifier":
        raise TrainingError(
            f"finetune_decoder_stage2 needs a classifier, got {classifier.kind!r}"
        )
    unfrozen = [p.name for p in classifier.parameters() if not p.frozen]
    if unfrozen:
        raise TrainingError(f"classifier must be fully frozen, unfrozen: {unfrozen}")
    _require_loss(cfg, "cross_entropy")
    t0 = time.perf_counter()

    fixed = {
        p.name: p.data.tobytes()
        for p in list(ae.parameters()) + list(classifier.parameters())
        if not p.name.startswith("decoder.")
    }
    decoder_params = [p for p in ae.parameters() if p.name.startswith("decoder.")]

    if cfg.distill:
        targets = _predict_labels(classifier, dataset)
    else:
        targets = dataset.labels

    def batch_loss(idx):
        recon = reconstruct(ae, Tensor(dataset.images[idx]))
        logits = forward_logits(classifier, recon)
        return softmax_cross_entropy(logits, targets[idx])

    losses = _run_epochs(batch_loss, decoder_params, dataset, cfg)

    for p in list(ae.parameters()) + list(classifier.parameters()):
        if not p.name.startswith("decoder.") and p.data.tobytes() != fixed[p.name]:
            raise TrainingError(f"frozen parameter {p.name!r} changed during stage 2")

    acc = evaluate_accuracy(Composite(ae, classifier), dataset)
    return TrainReport(losses, acc, time.perf_counter() - t0, cfg)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _forward_any(model, x: Tensor) -> Tensor:
    if model.kind not in ("classifier", "composite"):
        raise TrainingError(f"cannot score kind {model.kind!r}")
    return model.forward(x)


def _predict_labels(model, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    preds = np.empty(len(dataset), dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        xb = Tensor(dataset.images[start : start + batch_size])
        logits = _forward_any(model, xb)
        preds[start : start + batch_size] = np.argmax(logits.data, axis=1)
    return preds


def evaluate_accuracy(model, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy of a classifier or defended composite."""
    if len(dataset) == 0:
        raise TrainingError("cannot evaluate on an empty dataset")
    preds = _predict_labels(model, dataset, batch_size)
    return float(np.mean(preds == dataset.labels))


def mean_abs_reconstruction_error(ae, dataset: Dataset, batch_size: int = 256) -> float:
    """Mean absolute pixel error of the autoencoder over the dataset."""
    if ae.kind != "autoencoder":
        raise TrainingError(f"need an autoencoder, got {ae.kind!r}")
    if len(dataset) == 0:
        raise TrainingError("cannot evaluate on an empty dataset")
    total = 0.0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.images[start : start + batch_size]
        recon = reconstruct(ae, Tensor(xb))
        total += float(np.abs(recon.data - xb).sum())
    return total / dataset.images.size
