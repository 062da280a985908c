"""FGSM, BIM and CW-L2 attacks, all emitted as x_hat = x + eps * delta.

The finalize step clips to the continuous [0, 255] interval; optional
integer rounding is available for the single-step attacks as a sensitivity
study.  The CW perturbation direction is optimized once in tanh space and
rescaled per sample to a unit max-norm before eps is applied, which makes
eps mean the same thing for all three methods.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    add,
    margin_loss,
    mul,
    scale,
    softmax_cross_entropy,
    sub,
    tanh,
    tsum,
)


class AttackError(ValueError):
    """Bad attack arguments or a violated batch invariant."""


class BatchIOError(RuntimeError):
    """Adversarial batch file unreadable or inconsistent."""


BATCH_MAGIC = b"S2SA"
BATCH_VERSION = 1

_METHODS = ("fgsm", "bim", "cw")
_DEFAULT_EPSILONS = {
    "fgsm": (0.5, 1.0, 2.0, 4.0, 8.0, 16.0),
    "bim": (0.5, 1.0, 2.0, 4.0, 8.0),
    "cw": (0.5, 1.0, 2.0, 4.0),
}
# keeps arctanh finite at pixel values 0 and 255
_ATANH_MARGIN = 1e-6


@dataclass(frozen=True)
class AttackConfig:
    method: str
    epsilons: tuple | None = None
    bim_iterations: int = 10
    cw_iterations: int = 100
    cw_kappa: float = 0.0
    cw_lambda_f: float = 10.0
    cw_learning_rate: float = 0.01
    quantize: bool = False

    def __post_init__(self):
        if self.method not in _METHODS:
            raise AttackError(f"unknown method {self.method!r}, want one of {_METHODS}")
        if self.epsilons is None:
            object.__setattr__(self, "epsilons", _DEFAULT_EPSILONS[self.method])
        else:
            object.__setattr__(self, "epsilons", tuple(float(e) for e in self.epsilons))
        if any(e < 0 for e in self.epsilons):
            raise AttackError(f"epsilons must be >= 0, got {self.epsilons}")
        if self.bim_iterations < 1:
            raise AttackError(f"bim_iterations must be >= 1, got {self.bim_iterations}")
        if self.cw_iterations < 1:
            raise AttackError(f"cw_iterations must be >= 1, got {self.cw_iterations}")
        if self.cw_kappa < 0:
            raise AttackError(f"cw_kappa must be >= 0, got {self.cw_kappa}")
        if self.cw_learning_rate <= 0:
            raise AttackError(f"cw_learning_rate must be > 0, got {self.cw_learning_rate}")
        if self.quantize and self.method == "cw":
            raise AttackError("cw emits continuous adversaries; quantize applies to fgsm/bim")


@dataclass
class AdversarialBatch:
    method: str
    gradient_source: str
    epsilon: float
    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    failed: np.ndarray | None = None
    nl2: np.ndarray | None = None
    linf: np.ndarray | None = None
    trace: np.ndarray | None = None

    def __post_init__(self):
        self.originals = np.ascontiguousarray(self.originals, dtype=np.float32)
        self.adversarials = np.ascontiguousarray(self.adversarials, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.adversarials.shape != self.originals.shape:
            raise AttackError(
                f"adversarials shape {self.adversarials.shape} != originals "
                f"{self.originals.shape}"
            )
        n = self.originals.shape[0]
        if self.labels.shape != (n,):
            raise AttackError(f"{n} samples but {self.labels.shape} labels")
        for name, arr in (("originals", self.originals), ("adversarials", self.adversarials)):
            if arr.size and (arr.min() < 0.0 or arr.max() > 255.0):
                raise AttackError(f"{name} outside [0, 255]")
        if self.failed is None:
            self.failed = np.zeros(n, dtype=bool)
        else:
            self.failed = np.ascontiguousarray(self.failed, dtype=bool)
            if self.failed.shape != (n,):
                raise AttackError(f"failed mask shape {self.failed.shape}, want ({n},)")
        delta = (self.adversarials - self.originals).reshape(n, -1)
        norms = np.linalg.norm(self.originals.reshape(n, -1), axis=1)
        dn = np.linalg.norm(delta, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.nl2 = np.where(norms > 0, dn / norms, np.where(dn > 0, np.inf, 0.0))
        self.linf = np.abs(delta).max(axis=1) / 255.0

    def __len__(self) -> int:
        return self.originals.shape[0]


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _num_classes(model) -> int:
    if model.kind == "classifier":
        return model.spec.num_classes
    if model.kind == "composite":
        return model.classifier.spec.num_classes
    raise AttackError(f"attacks need a classifier or composite, got {model.kind!r}")


def _model_id(model) -> str:
    if model.kind == "composite":
        return f"composite-{model.defense.rng_seed}-{model.classifier.rng_seed}"
    return f"{model.kind}-{model.rng_seed}"


def _as_labels(model, x: np.ndarray, y) -> np.ndarray:
    k = _num_classes(model)
    y = np.asarray(y, dtype=np.int64)
    if y.ndim == 0:
        y = np.full(x.shape[0], int(y), dtype=np.int64)
    if y.shape != (x.shape[0],):
        raise AttackError(f"labels shape {y.shape}, want ({x.shape[0]},)")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise AttackError(f"label out of range [0, {k})")
    return y


def gradient_wrt_input(model, x, y) -> np.ndarray:
    """d mean-cross-entropy / dx for a classifier or defended composite."""
    arr = np.asarray(getattr(x, "data", x))
    dtype = np.float64 if arr.dtype == np.float64 else np.float32
    x = np.ascontiguousarray(arr, dtype=dtype)
    y = _as_labels(model, x, y)
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = softmax_cross_entropy(model.forward(xt), y)
        tape.backward(loss, wrt=[xt])
    return xt.grad


# ---------------------------------------------------------------------------
# attacks
# ---------------------------------------------------------------------------


def _cast(adv: np.ndarray, quantize: bool) -> np.ndarray:
    adv = np.clip(adv, 0.0, 255.0)
    if quantize:
        adv = np.round(adv)
    return adv.astype(np.float32)


def fgsm(model, x, y, eps: float, quantize: bool = False, source: str | None = None) -> AdversarialBatch:
    """Single signed-gradient step of size eps pixels."""
    if eps < 0:
        raise AttackError(f"epsilon must be >= 0, got {eps}")
    x = np.ascontiguousarray(getattr(x, "data", x), dtype=np.float32)
    y = _as_labels(model, x, y)
    g = gradient_wrt_input(model, x, y)
    adv = _cast(x + np.float32(eps) * np.sign(g), quantize)
    return AdversarialBatch(
        method="fgsm",
        gradient_source=source or _model_id(model),
        epsilon=float(eps),
        originals=x.copy(),
        adversarials=adv,
        labels=y,
    )


def bim(
    model,
    x,
    y,
    eps: float,
    iterations: int = 10,
    quantize: bool = False,
    source: str | None = None,
) -> AdversarialBatch:
    """Iterated FGSM: `iterations` rounds of step eps, cast after each round.

    There is no per-pixel ball clamp, so the total budget is iterations*eps.
    """
    if eps < 0:
        raise AttackError(f"epsilon must be >= 0, got {eps}")
    if iterations < 1:
        raise AttackError(f"iterations must be >= 1, got {iterations}")
    x = np.ascontiguousarray(getattr(x, "data", x), dtype=np.float32)
    y = _as_labels(model, x, y)
    cur = x.copy()
    for _ in range(iterations):
        g = gradient_wrt_input(model, cur, y)
        cur = _cast(cur + np.float32(eps) * np.sign(g), quantize)
    return AdversarialBatch(
        method="bim",
        gradient_source=source or _model_id(model),
        epsilon=float(eps),
        originals=x.copy(),
        adversarials=cur,
        labels=y,
    )


def cw_direction(model, x, y, cfg: AttackConfig | None = None, collect_trace: bool = False):
    """Converged CW perturbation before any eps shaping.

    Returns (delta, failed, trace): the raw tanh-space optimum of
    ||x_adv - x||_2^2 + lambda_f * margin(logits, y; kappa), a non-finite
    flag per sample, and the optional per-iteration objective trace.  The
    result is eps-independent, so sweeps can reuse one optimization.
    """
    if cfg is None:
        cfg = AttackConfig("cw")
    x = np.ascontiguousarray(getattr(x, "data", x), dtype=np.float32)
    y = _as_labels(model, x, y)
    n = x.shape[0]

    x01 = np.clip(x / 255.0, _ATANH_MARGIN, 1.0 - _ATANH_MARGIN).astype(np.float32)
    w = np.arctanh(2.0 * x01 - 1.0).astype(np.float32)
    x0 = Tensor(x01)
    ones = Tensor(np.ones_like(x01))
    lam = float(cfg.cw_lambda_f)
    kappa = float(cfg.cw_kappa)
    lr = np.float32(cfg.cw_learning_rate)
    trace = np.empty((cfg.cw_iterations, n), dtype=np.float32) if collect_trace else None

    for it in range(cfg.cw_iterations):
        wt = Tensor(w, requires_grad=True)
        with Tape() as tape:
            xa01 = scale(add(tanh(wt), ones), 0.5)
            logits = model.forward(scale(xa01, 255.0))
            obj = add(
                tsum(mul(sub(xa01, x0), sub(xa01, x0))),
                scale(margin_loss(logits, y, kappa), lam),
            )
            tape.backward(obj, wrt=[wt])
        if collect_trace:
            l2 = ((xa01.data - x01).reshape(n, -1) ** 2).sum(axis=1)
            z = logits.data
            z_true = z[np.arange(n), y]
            masked = z.copy()
            masked[np.arange(n), y] = -np.inf
            margin = np.maximum(z_true - masked.max(axis=1), -kappa)
            trace[it] = l2 + lam * margin
        w = w - lr * wt.grad

    xa = ((np.tanh(w) + 1.0) * 0.5 * 255.0).astype(np.float32)
    delta = xa - x
    failed = ~np.isfinite(w.reshape(n, -1)).all(axis=1) | ~np.isfinite(
        np.abs(delta.reshape(n, -1)).max(axis=1)
    )
    return delta, failed, trace


def cw_l2(
    model,
    x,
    y,
    eps: float,
    cfg: AttackConfig | None = None,
    collect_trace: bool = False,
    source: str | None = None,
) -> AdversarialBatch:
    """Carlini-Wagner L2 direction, rescaled per sample to the eps shell.

    The optimization runs in tanh space with a fixed-step gradient descent
    and is independent of eps: the converged perturbation is normalized to
    unit max-norm and the emitted adversary is cast(x + eps * delta).
    Samples whose optimization went non-finite are flagged and passed
    through unmodified.
    """
    if eps < 0:
        raise AttackError(f"epsilon must be >= 0, got {eps}")
    x = np.ascontiguousarray(getattr(x, "data", x), dtype=np.float32)
    delta, failed, trace = cw_direction(model, x, y, cfg, collect_trace)
    return cw_rescale(model, x, y, delta, failed, eps, trace=trace, source=source)


def cw_rescale(
    model,
    x,
    y,
    delta: np.ndarray,
    failed: np.ndarray,
    eps: float,
    trace=None,
    source: str | None = None,
) -> AdversarialBatch:
    """Shape a converged CW perturbation onto the eps shell (unit L-inf)."""
    if eps < 0:
        raise AttackError(f"epsilon must be >= 0, got {eps}")
    x = np.ascontiguousarray(getattr(x, "data", x), dtype=np.float32)
    y = _as_labels(model, x, y)
    n = x.shape[0]
    mx = np.abs(delta.reshape(n, -1)).max(axis=1)
    safe = np.where((mx > 0) & ~failed, mx, 1.0)
    unit = delta / safe[:, None, None, None]
    adv = _cast(x + np.float32(eps) * unit, quantize=False)
    if failed.any():
        adv[failed] = x[failed]
    return AdversarialBatch(
        method="cw",
        gradient_source=source or _model_id(model),
        epsilon=float(eps),
        originals=x.copy(),
        adversarials=adv,
        labels=y,
        failed=failed,
        trace=trace,
    )


# ---------------------------------------------------------------------------
# persistence (same container conventions as model checkpoints)
# ---------------------------------------------------------------------------


def _write_str(f, s: str) -> None:
    raw = s.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read(f, n: int) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise BatchIOError(f"truncated batch file: wanted {n} bytes, got {len(raw)}")
    return raw


def _read_u32(f) -> int:
    return struct.unpack("<I", _read(f, 4))[0]


def _read_str(f) -> str:
    return _read(f, _read_u32(f)).decode("utf-8")


def save_adversarial_batch(batch: AdversarialBatch, path) -> None:
    n = len(batch)
    c, h, w = batch.originals.shape[1:]
    with open(path, "wb") as f:
        f.write(BATCH_MAGIC)
        f.write(struct.pack("<I", BATCH_VERSION))
        _write_str(f, batch.method)
        _write_str(f, batch.gradient_source)
        f.write(struct.pack("<d", batch.epsilon))
        f.write(struct.pack("<IIII", n, c, h, w))
        f.write(batch.labels.astype("<i8").tobytes())
        f.write(batch.failed.astype(np.uint8).tobytes())
        f.write(batch.originals.astype("<f4").tobytes())
        f.write(batch.adversarials.astype("<f4").tobytes())


def load_adversarial_batch(path) -> AdversarialBatch:
    with open(path, "rb") as f:
        magic = _read(f, 4)
        if magic != BATCH_MAGIC:
            raise BatchIOError(f"bad magic {magic!r}, expected {BATCH_MAGIC!r}")
        version = _read_u32(f)
        if version != BATCH_VERSION:
            raise BatchIOError(f"unsupported batch version {version}")
        method = _read_str(f)
        source = _read_str(f)
        epsilon = struct.unpack("<d", _read(f, 8))[0]
        n, c, h, w = struct.unpack("<IIII", _read(f, 16))
        shape = (n, c, h, w)
        labels = np.frombuffer(_read(f, 8 * n), dtype="<i8").copy()
        failed = np.frombuffer(_read(f, n), dtype=np.uint8).astype(bool)
        count = n * c * h * w
        originals = np.frombuffer(_read(f, 4 * count), dtype="<f4").reshape(shape).copy()
        adversarials = np.frombuffer(_read(f, 4 * count), dtype="<f4").reshape(shape).copy()
        if f.read(1):
            raise BatchIOError("trailing bytes after batch payload")
    return AdversarialBatch(
        method=method,
        gradient_source=source,
        epsilon=epsilon,
        originals=originals,
        adversarials=adversarials,
        labels=labels,
        failed=failed,
    )
