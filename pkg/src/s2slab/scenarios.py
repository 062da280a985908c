"""Attack/defense scenario runners.

Four wirings of gradient source vs evaluation target:

  whitebox   craft on f∘g, evaluate on f∘g   (attacker sees the defense)
  wb_plus    craft on f,   evaluate on f∘g   (defense unknown to attacker)
  gb_minus   craft on f∘g, evaluate on f     (defense known but bypassed)
  transfer   craft on f_a, evaluate on f_b   (independent bare classifiers)

wb_plus optionally injects noise between the attack and the defense.
Adversaries are crafted for every sample of the (limited) split; accuracy
columns cover the full split while the true-positive restricted numbers
ride along in ``tp_top1_adv``.
"""

import dataclasses
import json
import math

import numpy as np

from .attacks import (
    AttackConfig,
    bim,
    cw_direction,
    cw_rescale,
    fgsm,
    _model_id,
)
from .autodiff import Tensor
from .data import Dataset, make_rng


class ScenarioError(ValueError):
    pass


_SCENARIOS = ("whitebox", "wb_plus", "gb_minus", "transfer")
_NOISE_TAGS = {"gaussian": 0x6E01, "uniform": 0x6E02, "sign": 0x6E03}

# mitigation sweep levels for the noise study
NOISE_LEVELS = (0.5, 4.0, 8.0, 12.0, 15.0, 20.0, 30.0)

DEFAULT_LIMIT = 2000


@dataclasses.dataclass(frozen=True)
class ScenarioSpec:
    """Declarative description of one scenario run."""

    scenario: str
    gradient_source: str
    eval_target: str
    attack: AttackConfig
    noise: tuple | None = None
    split: str = "test"
    limit: int | None = DEFAULT_LIMIT
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in _SCENARIOS:
            raise ScenarioError(f"unknown scenario {self.scenario!r}")
        src_comp = self.gradient_source.startswith("composite")
        tgt_comp = self.eval_target.startswith("composite")
        if self.scenario == "whitebox":
            if self.gradient_source != self.eval_target or not src_comp:
                raise ScenarioError("whitebox needs gradient_source == eval_target == composite")
        elif self.scenario == "wb_plus":
            if src_comp or not tgt_comp:
                raise ScenarioError("wb_plus crafts on the bare classifier, evaluates the composite")
        elif self.scenario == "gb_minus":
            if not src_comp or tgt_comp:
                raise ScenarioError("gb_minus crafts on the composite, evaluates the bare classifier")
        else:
            if src_comp or tgt_comp or self.gradient_source == self.eval_target:
                raise ScenarioError("transfer needs two distinct bare classifiers")
        if self.noise is not None:
            kind, eta = self.noise
            if kind not in _NOISE_TAGS:
                raise ScenarioError(f"unknown noise kind {kind!r}")
            if not float(eta) >= 0:
                raise ScenarioError(f"noise level must be >= 0, got {eta}")
        if self.limit is not None and self.limit < 1:
            raise ScenarioError(f"sample limit must be positive, got {self.limit}")
        if self.split not in ("train", "test"):
            raise ScenarioError(f"unknown split {self.split!r}")


@dataclasses.dataclass
class ScenarioResult:
    """One (network, epsilon[, eta]) row of a scenario sweep."""

    network: str
    epsilon: float
    top1_clean: float
    top1_adv: float
    nl2: float
    linf: float
    count: int
    eta: float | None = None
    source: str | None = None
    relative_top1: float | None = None
    tp_top1_adv: float | None = None

    def __post_init__(self):
        for name in ("top1_clean", "top1_adv"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ScenarioError(f"{name} out of [0, 1]: {v}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _predict(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = np.empty(images.shape[0], dtype=np.int64)
    for start in range(0, images.shape[0], batch_size):
        logits = model.forward(Tensor(images[start : start + batch_size]))
        preds[start : start + batch_size] = np.argmax(logits.data, axis=1)
    return preds


def _accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    if preds.size == 0:
        return 0.0
    return int((preds == labels).sum()) / preds.size


def _mean(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    return math.fsum(float(v) for v in values) / values.size


def _check_dataset(model, dataset: Dataset) -> None:
    spec = model.classifier.spec if model.kind == "composite" else model.spec
    if dataset.images.shape[1:] != spec.input_shape:
        raise ScenarioError(
            f"dataset images {dataset.images.shape[1:]} do not match model input "
            f"{spec.input_shape}"
        )


def _check_wrapping(composite, classifier) -> None:
    if composite.kind != "composite":
        raise ScenarioError(f"expected a composite, got {composite.kind!r}")
    if classifier.kind != "classifier":
        raise ScenarioError(f"expected a bare classifier, got {classifier.kind!r}")
    if composite.classifier is classifier:
        return
    ours = composite.classifier.parameters()
    theirs = classifier.parameters()
    same = len(ours) == len(theirs) and all(
        a.name == b.name and np.array_equal(a.data, b.data) for a, b in zip(ours, theirs)
    )
    if not same:
        raise ScenarioError("composite does not wrap this classifier")


def apply_noise(x, kind: str, eta: float, seed: int) -> np.ndarray:
    """Additive pixel noise, fresh stream per image, clipped to [0, 255]."""
    if kind not in _NOISE_TAGS:
        raise ScenarioError(f"unknown noise kind {kind!r}")
    eta = float(eta)
    if not eta >= 0:
        raise ScenarioError(f"noise level must be >= 0, got {eta}")
    x = np.ascontiguousarray(getattr(x, "data", x), dtype=np.float32)
    if x.ndim != 4:
        raise ScenarioError(f"noise expects a (n, c, h, w) batch, got shape {x.shape}")
    if eta == 0.0:
        return x.copy()
    out = x.astype(np.float64)
    tag = _NOISE_TAGS[kind]
    for i in range(x.shape[0]):
        rng = make_rng(seed, i, tag)
        if kind == "gaussian":
            out[i] += rng.normal(0.0, eta, size=x.shape[1:])
        elif kind == "uniform":
            out[i] += eta * rng.uniform(-1.0, 1.0, size=x.shape[1:])
        else:
            out[i] += eta * np.sign(rng.uniform(-0.5, 0.5, size=x.shape[1:]))
    return np.clip(out, 0.0, 255.0).astype(np.float32)


def _sweep(craft_model, eval_model, attack: AttackConfig, dataset: Dataset,
           noise=None, limit=DEFAULT_LIMIT, seed=0, network=None) -> list:
    """Craft per epsilon on craft_model, score on eval_model."""
    ds = dataset.subset(limit)
    x, y = ds.images, ds.labels
    n = x.shape[0]
    clean_preds = _predict(eval_model, x)
    top1_clean = _accuracy(clean_preds, y)
    tp = clean_preds == y
    label = network or _model_id(eval_model)
    kind, eta = (noise if noise is not None else (None, None))

    direction = None
    if attack.method == "cw":
        direction = cw_direction(craft_model, x, y, attack)

    results = []
    for eps in attack.epsilons:
        if attack.method == "fgsm":
            batch = fgsm(craft_model, x, y, eps, quantize=attack.quantize)
        elif attack.method == "bim":
            batch = bim(craft_model, x, y, eps, iterations=attack.bim_iterations,
                        quantize=attack.quantize)
        else:
            delta, failed, _ = direction
            batch = cw_rescale(craft_model, x, y, delta, failed, eps)
        adv = batch.adversarials
        if kind is not None:
            adv = apply_noise(adv, kind, eta, seed)
        adv_preds = _predict(eval_model, adv)
        results.append(
            ScenarioResult(
                network=label,
                epsilon=float(eps),
                top1_clean=top1_clean,
                top1_adv=_accuracy(adv_preds, y),
                nl2=_mean(batch.nl2),
                linf=_mean(batch.linf),
                count=n,
                eta=None if kind is None else float(eta),
                tp_top1_adv=_accuracy(adv_preds[tp], y[tp]),
            )
        )
    return results


# ---------------------------------------------------------------------------
# the four scenarios
# ---------------------------------------------------------------------------


def run_whitebox(composite, attack: AttackConfig, dataset: Dataset,
                 limit=DEFAULT_LIMIT, seed=0, network=None) -> list:
    """Attacker crafts on, and is scored against, the defended pipeline."""
    if composite.kind != "composite":
        raise ScenarioError(f"whitebox runs on a composite, got {composite.kind!r}")
    _check_dataset(composite, dataset)
    return _sweep(composite, composite, attack, dataset, limit=limit, seed=seed,
                  network=network)


def run_undefended(classifier, attack: AttackConfig, dataset: Dataset,
                   limit=DEFAULT_LIMIT, seed=0, network=None) -> list:
    """White-box baseline on the bare classifier (no defense in the loop)."""
    if classifier.kind != "classifier":
        raise ScenarioError(f"undefended runs on a classifier, got {classifier.kind!r}")
    _check_dataset(classifier, dataset)
    return _sweep(classifier, classifier, attack, dataset, limit=limit, seed=seed,
                  network=network)


def run_wb_plus(classifier, composite, attack: AttackConfig, dataset: Dataset,
                noise=None, limit=DEFAULT_LIMIT, seed=0, network=None) -> list:
    """Craft on the bare classifier, evaluate through the defense.

    Noise, when given as (kind, eta), lands on the adversarial images after
    the attack and before the defense sees them.
    """
    _check_wrapping(composite, classifier)
    _check_dataset(composite, dataset)
    if noise is not None:
        kind, eta = noise
        if kind not in _NOISE_TAGS:
            raise ScenarioError(f"unknown noise kind {kind!r}")
    return _sweep(classifier, composite, attack, dataset, noise=noise, limit=limit,
                  seed=seed, network=network)


def run_gb_minus(composite, classifier, attack: AttackConfig, dataset: Dataset,
                 limit=DEFAULT_LIMIT, seed=0, network=None) -> list:
    """Craft on the defended pipeline, evaluate on the bare classifier."""
    _check_wrapping(composite, classifier)
    _check_dataset(composite, dataset)
    return _sweep(composite, classifier, attack, dataset, limit=limit, seed=seed,
                  network=network)


def run_transfer(source_model, target_model, attack: AttackConfig, dataset: Dataset,
                 limit=DEFAULT_LIMIT, seed=0, source_name=None, target_name=None) -> list:
    """FGSM perturbations from one bare classifier applied to another."""
    if attack.method != "fgsm":
        raise ScenarioError(f"transfer runs use fgsm, got {attack.method!r}")
    for m in (source_model, target_model):
        if m.kind != "classifier":
            raise ScenarioError(f"transfer needs bare classifiers, got {m.kind!r}")
    if source_model is target_model or _model_id(source_model) == _model_id(target_model):
        raise ScenarioError("transfer needs distinct source and target models")
    _check_dataset(source_model, dataset)
    _check_dataset(target_model, dataset)
    results = _sweep(source_model, target_model, attack, dataset, limit=limit,
                     seed=seed, network=target_name or _model_id(target_model))
    src = source_name or _model_id(source_model)
    for r in results:
        r.source = src
        r.relative_top1 = r.top1_adv / r.top1_clean if r.top1_clean > 0 else 0.0
    return results


# ---------------------------------------------------------------------------
# table output
# ---------------------------------------------------------------------------


def write_scenario_csv(results, path) -> None:
    """Appendix-style table, one row per (network, epsilon[, eta])."""
    if not results:
        raise ScenarioError("no results to write")
    transfer = any(r.source is not None for r in results)
    if transfer and not all(r.source is not None for r in results):
        raise ScenarioError("cannot mix transfer and plain rows in one table")
    with_eta = any(r.eta is not None for r in results)
    lines = []
    if transfer:
        lines.append("Source, Target, epsilon, top1_clean, top1_adv")
        for r in results:
            lines.append(
                f"{r.source}, {r.network}, {r.epsilon:g}, "
                f"{r.top1_clean:.6f}, {r.top1_adv:.6f}"
            )
    else:
        header = "Network, epsilon, top1_clean, top1_adv, nL2, Linf"
        if with_eta:
            header += ", eta"
        lines.append(header)
        for r in results:
            row = (
                f"{r.network}, {r.epsilon:g}, {r.top1_clean:.6f}, "
                f"{r.top1_adv:.6f}, {r.nl2:.6f}, {r.linf:.6f}"
            )
            if with_eta:
                row += f", {0.0 if r.eta is None else r.eta:g}"
            lines.append(row)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def write_scenario_json(results, path) -> None:
    """Full records, the true-positive convention included."""
    payload = [dataclasses.asdict(r) for r in results]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
