"""Measurement machinery: norms, gradient-map SSIM, NMI, membership report.

Everything here is a pure function of its inputs; the gradient maps are the
only place a model forward/backward runs, and those never touch parameter
gradients.
"""

import dataclasses
import math
import warnings

import numpy as np

from .autodiff import Tape, Tensor, mse, softmax_cross_entropy
from .data import make_rng
from .models import reconstruct


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------


def normalized_l2(x1, x2) -> float:
    """||x1 - x2|| / ||x1||, the asymmetric dissimilarity."""
    a = np.asarray(getattr(x1, "data", x1), dtype=np.float64)
    b = np.asarray(getattr(x2, "data", x2), dtype=np.float64)
    if a.shape != b.shape:
        raise AnalysisError(f"shape mismatch {a.shape} vs {b.shape}")
    ref = float(np.linalg.norm(a.ravel()))
    if ref == 0.0:
        raise AnalysisError("zero reference norm")
    return float(np.linalg.norm((a - b).ravel())) / ref


def linf_255(x1, x2) -> float:
    a = np.asarray(getattr(x1, "data", x1), dtype=np.float64)
    b = np.asarray(getattr(x2, "data", x2), dtype=np.float64)
    if a.shape != b.shape:
        raise AnalysisError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.abs(a - b).max()) / 255.0


def defense_strength(model, dataset, adversaries) -> float:
    """Mean nL2 between originals and adversaries over the true positives."""
    adv = np.asarray(getattr(adversaries, "data", adversaries), dtype=np.float32)
    if adv.shape != dataset.images.shape:
        raise AnalysisError(
            f"adversaries {adv.shape} not aligned with dataset {dataset.images.shape}"
        )
    preds = _predict(model, dataset.images)
    tp = np.flatnonzero(preds == dataset.labels)
    if tp.size == 0:
        raise AnalysisError("no true positives to measure over")
    return math.fsum(
        normalized_l2(dataset.images[i], adv[i]) for i in tp
    ) / tp.size


def _predict(model, images, batch_size: int = 256) -> np.ndarray:
    preds = np.empty(images.shape[0], dtype=np.int64)
    for start in range(0, images.shape[0], batch_size):
        logits = model.forward(Tensor(images[start : start + batch_size]))
        preds[start : start + batch_size] = np.argmax(logits.data, axis=1)
    return preds


# ---------------------------------------------------------------------------
# SSIM over 2-D maps
# ---------------------------------------------------------------------------

_SSIM_WINDOW = 8
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def ssim(a, b) -> float:
    """Mean local SSIM, 8x8 uniform sliding window, unit dynamic range."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise AnalysisError("ssim wants 2-D maps")
    if a.shape != b.shape:
        raise AnalysisError(f"shape mismatch {a.shape} vs {b.shape}")
    w = _SSIM_WINDOW
    if a.shape[0] < w or a.shape[1] < w:
        raise AnalysisError(f"map {a.shape} smaller than the {w}x{w} window")
    wa = np.lib.stride_tricks.sliding_window_view(a, (w, w))
    wb = np.lib.stride_tricks.sliding_window_view(b, (w, w))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float((num / den).mean())


# ---------------------------------------------------------------------------
# gradient-magnitude maps
# ---------------------------------------------------------------------------


def gradient_magnitude_map(model, x, target) -> np.ndarray:
    """Per-pixel gradient magnitude, max-normalized to [0, 1].

    target is a class label for classifiers and composites, or the string
    "reconstruction" for autoencoders (output compared to the input).
    """
    arr = np.asarray(getattr(x, "data", x), dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise AnalysisError(f"one image expected, got shape {arr.shape}")
    if isinstance(target, str):
        if target != "reconstruction":
            raise AnalysisError(f"unknown gradient target {target!r}")
        if model.kind != "autoencoder":
            raise AnalysisError(f"reconstruction gradients need an autoencoder, got {model.kind!r}")
    elif model.kind == "autoencoder":
        raise AnalysisError("autoencoder gradients use target='reconstruction'")

    xt = Tensor(arr, requires_grad=True)
    with Tape() as tape:
        if isinstance(target, str):
            loss = mse(reconstruct(model, xt), Tensor(arr))
        else:
            logits = model.forward(xt)
            labels = np.array([int(target)], dtype=np.int64)
            loss = softmax_cross_entropy(logits, labels)
        tape.backward(loss, wrt=[xt])
    g = xt.grad[0].astype(np.float64)
    mag = np.sqrt((g * g).sum(axis=0))
    peak = mag.max()
    if peak > 0:
        mag /= peak
    return mag


@dataclasses.dataclass
class GradientReport:
    """Pairwise mean SSIM of gradient-magnitude maps plus per-model maps."""

    names: tuple
    matrix: np.ndarray
    maps: dict
    sensitivity: dict

    def __post_init__(self):
        m = self.matrix
        if m.shape != (len(self.names), len(self.names)):
            raise AnalysisError("matrix shape does not match the model list")
        if not np.allclose(m, m.T, atol=1e-6):
            raise AnalysisError("SSIM matrix must be symmetric")
        if not np.allclose(np.diag(m), 1.0, atol=1e-6):
            raise AnalysisError("SSIM matrix diagonal must be 1")


def _map_for(model, image, label):
    if model.kind == "autoencoder":
        return gradient_magnitude_map(model, image, "reconstruction")
    return gradient_magnitude_map(model, image, int(label))


def gradient_ssim_matrix(models, dataset, limit=None, names=None) -> GradientReport:
    """Mean pairwise SSIM between per-image gradient maps of the models."""
    if len(models) < 2:
        raise AnalysisError("need at least two models to compare")
    ds = dataset.subset(limit)
    if len(ds) == 0:
        raise AnalysisError("empty sample set")
    if names is None:
        names = tuple(f"m{i}" for i in range(len(models)))
    if len(names) != len(models):
        raise AnalysisError("one name per model")
    k = len(models)
    maps = {
        name: np.stack([
            _map_for(model, ds.images[i], ds.labels[i]) for i in range(len(ds))
        ])
        for name, model in zip(names, models)
    }
    matrix = np.eye(k)
    for a in range(k):
        for b in range(a + 1, k):
            pair = math.fsum(
                ssim(maps[names[a]][i], maps[names[b]][i]) for i in range(len(ds))
            ) / len(ds)
            matrix[a, b] = matrix[b, a] = pair
    sens = {}
    for name, model in zip(names, models):
        sens[name] = None if model.kind == "autoencoder" else label_sensitivity(model, ds, seed=0)
    return GradientReport(tuple(names), matrix, maps, sens)


_LABEL_TAG = 0x1AB5


def label_sensitivity(model, dataset, seed: int) -> float:
    """Mean SSIM between true-label and random-other-label gradient maps."""
    if model.kind == "autoencoder":
        raise AnalysisError("label sensitivity needs a label-driven model")
    if dataset.num_classes < 2:
        raise AnalysisError("label sensitivity needs at least two classes")
    if len(dataset) == 0:
        raise AnalysisError("empty sample set")
    total = []
    for i in range(len(dataset)):
        y = int(dataset.labels[i])
        other = int(make_rng(seed, i, _LABEL_TAG).integers(dataset.num_classes - 1))
        if other >= y:
            other += 1
        m_true = gradient_magnitude_map(model, dataset.images[i], y)
        m_other = gradient_magnitude_map(model, dataset.images[i], other)
        total.append(ssim(m_true, m_other))
    return math.fsum(total) / len(total)


# ---------------------------------------------------------------------------
# normalized mutual information
# ---------------------------------------------------------------------------


def nmi(x1, x2, bins: int = 64) -> float:
    """NMI of the joint intensity histogram, arithmetic-mean normalization."""
    if bins < 2:
        raise AnalysisError(f"bins must be >= 2, got {bins}")
    a = np.asarray(getattr(x1, "data", x1), dtype=np.float64).ravel()
    b = np.asarray(getattr(x2, "data", x2), dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise AnalysisError("shape mismatch")
    if a.size == 0:
        raise AnalysisError("empty images")
    joint, _, _ = np.histogram2d(a, b, bins=bins, range=[[0.0, 255.0], [0.0, 255.0]])
    p = joint / joint.sum()
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    hx = -math.fsum(float(v) * math.log(v) for v in px if v > 0)
    hy = -math.fsum(float(v) * math.log(v) for v in py if v > 0)
    if hx == 0.0 or hy == 0.0:
        warnings.warn("constant image: NMI undefined, returning 0", RuntimeWarning)
        return 0.0
    nz = p[p > 0]
    hxy = -math.fsum(float(v) * math.log(v) for v in nz)
    mi = hx + hy - hxy
    return mi / ((hx + hy) / 2.0)


# ---------------------------------------------------------------------------
# perturbation-space membership
# ---------------------------------------------------------------------------

_VERDICTS = ("subset", "not_subset", "inconclusive")


@dataclasses.dataclass
class MembershipReport:
    """Numeric premises and verdict of the perturbation-space case analysis."""

    baseline_acc: float
    wb_plus_acc: float
    gb_minus_acc: float
    clean_acc: float
    whitebox_acc: float | None
    num_classes: int
    fooling: dict
    simplified: dict
    verdict: str
    cases: dict

    def __post_init__(self):
        for name, v in self.fooling.items():
            if not 0.0 <= v <= 1.0 + 1e-9:
                raise AnalysisError(f"fuzzy membership {name} out of [0, 1]: {v}")
        for name, v in self.simplified.items():
            if v not in (0, 1, None):
                raise AnalysisError(f"simplified membership {name} must be 0/1: {v}")
        if self.verdict not in _VERDICTS:
            raise AnalysisError(f"unknown verdict {self.verdict!r}")


def _simplify(fooling: float, num_classes: int):
    # 1 when the attack fools at least 80% of the (relative) mass; 0 when the
    # model keeps at least 80% of its clean accuracy or the fooling ratio is
    # within random chance; anything between stays fuzzy
    if fooling >= 0.8:
        return 1
    if fooling <= max(1.0 / num_classes, 0.2):
        return 0
    return None


def membership_report(
    baseline_acc: float,
    wb_plus_acc: float,
    gb_minus_acc: float,
    clean_acc: float,
    whitebox_acc: float | None = None,
    num_classes: int = 10,
) -> MembershipReport:
    """Case analysis on whether f's perturbation space sits inside f∘g's.

    The three reference experiments instantiate the axioms: the baseline
    shows bare-gradient attacks land in P(x, f); wb_plus shows they also
    land in P(x, f∘g); gb_minus shows composite-gradient attacks stay out
    of P(x, f).  All three holding (1, 1, 0 after simplification) entails
    the subset verdict; bare-gradient attacks that miss P(x, f∘g) refute
    it; anything else leaves the analysis inconclusive.
    """
    accs = {
        "baseline": baseline_acc,
        "wb_plus": wb_plus_acc,
        "gb_minus": gb_minus_acc,
        "clean": clean_acc,
    }
    for name, v in accs.items():
        if not 0.0 <= v <= 1.0:
            raise AnalysisError(f"{name} accuracy out of [0, 1]: {v}")
    if whitebox_acc is not None and not 0.0 <= whitebox_acc <= 1.0:
        raise AnalysisError(f"whitebox accuracy out of [0, 1]: {whitebox_acc}")
    if clean_acc == 0.0:
        raise AnalysisError("clean accuracy must be positive")
    if num_classes < 2:
        raise AnalysisError("need at least two classes")

    fooling = {
        "baseline": max(0.0, 1.0 - baseline_acc / clean_acc),
        "wb_plus": max(0.0, 1.0 - wb_plus_acc / clean_acc),
        "gb_minus": max(0.0, 1.0 - gb_minus_acc / clean_acc),
    }
    if whitebox_acc is not None:
        fooling["whitebox"] = max(0.0, 1.0 - whitebox_acc / clean_acc)
    simplified = {k: _simplify(v, num_classes) for k, v in fooling.items() if k != "whitebox"}

    s_base = simplified["baseline"]
    s_wbp = simplified["wb_plus"]
    s_gbm = simplified["gb_minus"]
    if s_base == 1 and s_wbp == 1 and s_gbm == 0:
        verdict = "subset"
    elif s_base == 1 and s_wbp == 0:
        verdict = "not_subset"
    else:
        verdict = "inconclusive"

    # narrative case masses: A-D for composite-gradient attacks, E-H for
    # bare-gradient ones; under the subset verdict the P(x,f) mass measured
    # by gb_minus is all overlap (case B)
    in_pf = fooling["gb_minus"]
    in_pfog = fooling.get("whitebox", 0.0)
    if verdict == "subset":
        case_a, case_b = 0.0, in_pf
    else:
        case_a, case_b = in_pf, 0.0
    case_c = max(in_pfog - in_pf, 0.0) if whitebox_acc is not None else 0.0
    case_d = max(1.0 - max(in_pf, in_pfog), 0.0) if whitebox_acc is not None else 0.0
    cases = {
        "A": case_a,
        "B": case_b,
        "C": case_c,
        "D": case_d,
        "E": max(fooling["baseline"] - fooling["wb_plus"], 0.0),
        "F": min(fooling["baseline"], fooling["wb_plus"]),
        "G": max(fooling["wb_plus"] - fooling["baseline"], 0.0),
        "H": max(1.0 - max(fooling["baseline"], fooling["wb_plus"]), 0.0),
    }
    return MembershipReport(
        baseline_acc=baseline_acc,
        wb_plus_acc=wb_plus_acc,
        gb_minus_acc=gb_minus_acc,
        clean_acc=clean_acc,
        whitebox_acc=whitebox_acc,
        num_classes=num_classes,
        fooling=fooling,
        simplified=simplified,
        verdict=verdict,
        cases=cases,
    )


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------


def format_membership_report(rep: MembershipReport) -> str:
    lines = [
        "perturbation-space membership report",
        f"  accuracies: baseline {rep.baseline_acc:.6f}  wb_plus {rep.wb_plus_acc:.6f}  "
        f"gb_minus {rep.gb_minus_acc:.6f}  clean {rep.clean_acc:.6f}",
    ]
    if rep.whitebox_acc is not None:
        lines.append(f"  whitebox: {rep.whitebox_acc:.6f}")
    lines.append(
        "  fooling ratios: "
        + "  ".join(f"{k} {v:.6f}" for k, v in sorted(rep.fooling.items()))
    )
    lines.append(
        "  simplified memberships: "
        + "  ".join(
            f"{k} {'fuzzy' if v is None else v}" for k, v in sorted(rep.simplified.items())
        )
    )
    lines.append("  case masses: " + "  ".join(f"{k} {rep.cases[k]:.4f}" for k in "ABCDEFGH"))
    if rep.whitebox_acc is None:
        lines.append("  (no whitebox run given: cases C and D left unassigned)")
    lines.append(f"  verdict: {rep.verdict}")
    return "\n".join(lines) + "\n"


def format_gradient_report(rep: GradientReport) -> str:
    lines = ["pairwise mean SSIM of input gradient magnitudes"]
    width = max(max(len(n) for n in rep.names), 6)
    header = " " * (width + 4) + "  ".join(f"{n:>{width}}" for n in rep.names)
    lines.append(header)
    for i, name in enumerate(rep.names):
        row = "  ".join(f"{rep.matrix[i, j]:>{width}.4f}" for j in range(len(rep.names)))
        lines.append(f"  {name:>{width}}  {row}")
    lines.append("label sensitivity (mean SSIM true-vs-random label)")
    for name in rep.names:
        v = rep.sensitivity[name]
        lines.append(f"  {name:>{width}}  " + ("n/a" if v is None else f"{v:.4f}"))
    return "\n".join(lines) + "\n"


def write_gradient_csv(rep: GradientReport, path) -> None:
    """Table-1 layout: model per row, pairwise mean SSIM columns."""
    lines = ["Model, " + ", ".join(rep.names)]
    for i, name in enumerate(rep.names):
        lines.append(
            f"{name}, " + ", ".join(f"{rep.matrix[i, j]:.6f}" for j in range(len(rep.names)))
        )
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
