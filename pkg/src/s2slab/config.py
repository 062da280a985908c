"""Experiment configuration: flat INI sections -> validated dataclasses.

Schema (all keys optional unless noted; unknown sections or keys are errors):

    [data]
    train = synthetic:8000:100          ; synthetic:<count>:<seed>
    test  = synthetic:2000:101          ; idx:<images>,<labels>
                                        ; cifar:<bin>[,<bin>...]
    [models]
    classifier = c-b                    ; c-a | c-b | c-c
    classifier_seed = 100
    ae_seed = 100
    transfer_source = c-c               ; required only for transfer runs
    transfer_source_seed = 107

    [train.classifier] / [train.ae] / [train.decoder]
    epochs = 5
    batch_size = 128
    optimizer = adam                    ; adam | sgd
    lr = 1e-3
    momentum = 0.9
    seed = 100
    distill = false                     ; train.decoder only

    [attack]
    method = fgsm                       ; fgsm | bim | cw
    epsilons = 0.5, 1, 2, 4             ; method default when omitted
    bim_iterations = 10
    cw_iterations = 100
    cw_kappa = 0.0
    cw_lambda_f = 10.0
    cw_learning_rate = 0.01
    quantize = false

    [scenario]
    run = whitebox, wb_plus             ; any of whitebox, undefended,
                                        ; wb_plus, gb_minus, transfer
    limit = 2000
    seed = 0
    noise = gaussian:8                  ; <kind>:<eta>, wb_plus only

    [out]
    dir = results

Relative dataset paths resolve against the config file's directory.
"""

import configparser
import dataclasses
import os

from .attacks import AttackConfig, AttackError
from .data import Dataset, load_cifar_bin, load_idx, synthetic_digits
from .training import TrainConfig, TrainingError

_CLASSIFIERS = ("c-a", "c-b", "c-c")
_SCENARIO_NAMES = ("whitebox", "undefended", "wb_plus", "gb_minus", "transfer")
_NOISE_KINDS = ("gaussian", "uniform", "sign")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Everything one reference run needs, resolved and validated."""

    train_data: str
    test_data: str
    classifier: str
    classifier_seed: int
    ae_seed: int
    transfer_source: str | None
    transfer_source_seed: int
    train_classifier: TrainConfig
    train_ae: TrainConfig
    train_decoder: TrainConfig
    attack: AttackConfig
    scenarios: tuple
    limit: int | None
    seed: int
    noise: tuple | None
    out_dir: str
    base_dir: str

    def __post_init__(self):
        if self.classifier not in _CLASSIFIERS:
            raise ConfigError(f"unknown classifier {self.classifier!r}")
        if self.transfer_source is not None and self.transfer_source not in _CLASSIFIERS:
            raise ConfigError(f"unknown transfer_source {self.transfer_source!r}")
        for s in self.scenarios:
            if s not in _SCENARIO_NAMES:
                raise ConfigError(f"unknown scenario {s!r}")
        if "transfer" in self.scenarios:
            if self.transfer_source is None:
                raise ConfigError("transfer scenario needs models.transfer_source")
            if (
                self.transfer_source == self.classifier
                and self.transfer_source_seed == self.classifier_seed
            ):
                raise ConfigError("transfer_source must differ from the classifier")
        if not self.attack.epsilons:
            raise ConfigError("attack epsilon list is empty")
        if self.limit is not None and self.limit < 1:
            raise ConfigError(f"limit must be positive, got {self.limit}")


def _to_int(section, key, raw):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} wants an integer, got {raw!r}") from None


def _to_float(section, key, raw):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} wants a number, got {raw!r}") from None


def _to_bool(section, key, raw):
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{section}] {key} wants a boolean, got {raw!r}")


def _take(items: dict, section: str, known: dict):
    """Pop every known key, convert it, and reject anything left over."""
    out = {}
    for key, conv in known.items():
        if key in items:
            out[key] = conv(section, key, items.pop(key))
    if items:
        stray = sorted(items)[0]
        raise ConfigError(f"unknown key {stray!r} in section [{section}]")
    return out


def _train_section(parser, name: str, defaults: dict, decoder: bool = False) -> TrainConfig:
    items = dict(parser.items(name)) if parser.has_section(name) else {}
    known = {
        "epochs": _to_int,
        "batch_size": _to_int,
        "optimizer": lambda s, k, v: v.strip(),
        "lr": _to_float,
        "momentum": _to_float,
        "seed": _to_int,
    }
    if decoder:
        known["distill"] = _to_bool
    got = _take(items, name, known)
    merged = dict(defaults)
    merged.update(got)
    try:
        return TrainConfig(**merged)
    except TrainingError as e:
        raise ConfigError(f"[{name}] {e}") from e


def parse_noise(raw: str):
    """'kind:eta' -> (kind, float eta); shared by config files and --noise."""
    if ":" not in raw:
        raise ConfigError(f"noise wants <kind>:<eta>, got {raw!r}")
    kind, _, eta_raw = raw.partition(":")
    kind = kind.strip()
    if kind not in _NOISE_KINDS:
        raise ConfigError(f"unknown noise kind {kind!r}, want one of {_NOISE_KINDS}")
    try:
        eta = float(eta_raw)
    except ValueError:
        raise ConfigError(f"noise level must be a number, got {eta_raw!r}") from None
    if eta < 0:
        raise ConfigError(f"noise level must be >= 0, got {eta}")
    return kind, eta


def parse_config(path) -> ExperimentConfig:
    """Read and validate one experiment INI file."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e

    known_sections = (
        "data", "models", "train.classifier", "train.ae", "train.decoder",
        "attack", "scenario", "out",
    )
    for section in parser.sections():
        if section not in known_sections:
            raise ConfigError(f"unknown section [{section}]")

    data = dict(parser.items("data")) if parser.has_section("data") else {}
    text = lambda s, k, v: v.strip()
    data_got = _take(data, "data", {"train": text, "test": text})

    models = dict(parser.items("models")) if parser.has_section("models") else {}
    models_got = _take(
        models,
        "models",
        {
            "classifier": text,
            "classifier_seed": _to_int,
            "ae_seed": _to_int,
            "transfer_source": text,
            "transfer_source_seed": _to_int,
        },
    )

    # the reference desk recipe is the default everywhere
    train_clf = _train_section(
        parser, "train.classifier",
        dict(epochs=5, batch_size=128, optimizer="adam", lr=1e-3, seed=100),
    )
    train_ae = _train_section(
        parser, "train.ae",
        dict(epochs=5, batch_size=128, optimizer="adam", lr=1e-3, seed=100),
    )
    train_dec = _train_section(
        parser, "train.decoder",
        dict(epochs=3, batch_size=128, optimizer="adam", lr=1e-4, seed=100),
        decoder=True,
    )

    attack_items = dict(parser.items("attack")) if parser.has_section("attack") else {}
    attack_got = _take(
        attack_items,
        "attack",
        {
            "method": text,
            "epsilons": lambda s, k, v: _parse_float_list(s, k, v),
            "bim_iterations": _to_int,
            "cw_iterations": _to_int,
            "cw_kappa": _to_float,
            "cw_lambda_f": _to_float,
            "cw_learning_rate": _to_float,
            "quantize": _to_bool,
        },
    )
    attack_got.setdefault("method", "fgsm")
    try:
        attack = AttackConfig(**attack_got)
    except AttackError as e:
        raise ConfigError(f"[attack] {e}") from e

    scenario_items = dict(parser.items("scenario")) if parser.has_section("scenario") else {}
    scenario_got = _take(
        scenario_items,
        "scenario",
        {
            "run": lambda s, k, v: tuple(p.strip() for p in v.split(",") if p.strip()),
            "limit": _to_int,
            "seed": _to_int,
            "noise": lambda s, k, v: parse_noise(v),
        },
    )

    out_items = dict(parser.items("out")) if parser.has_section("out") else {}
    out_got = _take(out_items, "out", {"dir": text})

    base_dir = os.path.dirname(os.path.abspath(path))
    return ExperimentConfig(
        train_data=data_got.get("train", "synthetic:8000:100"),
        test_data=data_got.get("test", "synthetic:2000:101"),
        classifier=models_got.get("classifier", "c-b"),
        classifier_seed=models_got.get("classifier_seed", 100),
        ae_seed=models_got.get("ae_seed", 100),
        transfer_source=models_got.get("transfer_source"),
        transfer_source_seed=models_got.get("transfer_source_seed", 107),
        train_classifier=train_clf,
        train_ae=train_ae,
        train_decoder=train_dec,
        attack=attack,
        scenarios=scenario_got.get("run", ("whitebox",)),
        limit=scenario_got.get("limit", 2000),
        seed=scenario_got.get("seed", 0),
        noise=scenario_got.get("noise"),
        out_dir=out_got.get("dir", "results"),
        base_dir=base_dir,
    )


def default_config(base_dir: str = ".") -> ExperimentConfig:
    """The reference desk recipe with no config file at all."""
    return ExperimentConfig(
        train_data="synthetic:8000:100",
        test_data="synthetic:2000:101",
        classifier="c-b",
        classifier_seed=100,
        ae_seed=100,
        transfer_source=None,
        transfer_source_seed=107,
        train_classifier=TrainConfig(epochs=5, batch_size=128, optimizer="adam", lr=1e-3, seed=100),
        train_ae=TrainConfig(epochs=5, batch_size=128, optimizer="adam", lr=1e-3, seed=100),
        train_decoder=TrainConfig(epochs=3, batch_size=128, optimizer="adam", lr=1e-4, seed=100),
        attack=AttackConfig(method="fgsm"),
        scenarios=("whitebox",),
        limit=2000,
        seed=0,
        noise=None,
        out_dir="results",
        base_dir=os.path.abspath(base_dir),
    )


def _parse_float_list(section, key, raw):
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"[{section}] {key} is empty")
    return tuple(_to_float(section, key, p) for p in parts)


def load_dataset(spec: str, split: str, base_dir: str = ".") -> Dataset:
    """Resolve one [data] entry to a loaded Dataset."""
    scheme, _, rest = spec.partition(":")
    if scheme == "synthetic":
        parts = rest.split(":")
        if len(parts) != 2:
            raise ConfigError(f"synthetic wants synthetic:<count>:<seed>, got {spec!r}")
        count = _to_int("data", split, parts[0])
        seed = _to_int("data", split, parts[1])
        return synthetic_digits(count, seed=seed, split=split)
    if scheme == "idx":
        parts = [p.strip() for p in rest.split(",")]
        if len(parts) != 2:
            raise ConfigError(f"idx wants idx:<images>,<labels>, got {spec!r}")
        paths = [p if os.path.isabs(p) else os.path.join(base_dir, p) for p in parts]
        return load_idx(paths[0], paths[1], split=split)
    if scheme == "cifar":
        parts = [p.strip() for p in rest.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"cifar wants at least one path, got {spec!r}")
        paths = [p if os.path.isabs(p) else os.path.join(base_dir, p) for p in parts]
        return load_cifar_bin(paths, split=split)
    raise ConfigError(f"unknown dataset scheme {scheme!r} in {spec!r}")
