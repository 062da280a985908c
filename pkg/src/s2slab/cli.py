"""Command-line orchestration of the train/attack/analyze pipeline.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
Checkpoints land in the output directory under stable names, so the
commands compose:

    s2slab train-classifier --config ref.cfg
    s2slab train-ae --config ref.cfg
    s2slab finetune-decoder --config ref.cfg
    s2slab scenario --config ref.cfg --scenario whitebox
    s2slab membership --from results
    s2slab report --out results
"""

import argparse
import dataclasses
import os
import sys

from .analysis import (
    AnalysisError,
    format_gradient_report,
    format_membership_report,
    gradient_ssim_matrix,
    membership_report,
    write_gradient_csv,
)
from .attacks import AttackError, BatchIOError
from .autodiff import TapeError
from .config import ConfigError, default_config, load_dataset, parse_config, parse_noise
from .data import DataError
from .models import (
    CheckpointError,
    Composite,
    SpecError,
    build,
    desk_spec,
    freeze,
    load_checkpoint,
    save_checkpoint,
)
from .plots import plot_scenarios
from .scenarios import (
    ScenarioError,
    run_gb_minus,
    run_transfer,
    run_undefended,
    run_wb_plus,
    run_whitebox,
    write_scenario_csv,
    write_scenario_json,
)
from .training import (
    DivergenceError,
    TrainingError,
    evaluate_accuracy,
    finetune_decoder_stage2,
    train_ae_stage1,
    train_classifier,
)

_CONFIG_ERRORS = (ConfigError, SpecError)
_RUNTIME_ERRORS = (
    TrainingError,
    DivergenceError,
    AttackError,
    BatchIOError,
    TapeError,
    ScenarioError,
    AnalysisError,
    CheckpointError,
    DataError,
    OSError,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="s2slab", description="adversarial attack/defense laboratory"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment INI file (defaults are the reference recipe)")
        p.add_argument("--seed", type=int, help="override the command's governing seed")
        p.add_argument("--limit", type=int, help="sample limit for sweeps and analyses")
        p.add_argument("--out", help="output directory (checkpoints, tables, plots)")

    p = sub.add_parser("train-classifier", help="train a desk classifier, save checkpoint")
    common(p)
    p.add_argument("--model", help="architecture override: c-a | c-b | c-c")

    p = sub.add_parser("train-ae", help="stage-1 autoencoder training, save checkpoint")
    common(p)

    p = sub.add_parser("finetune-decoder", help="stage-2 decoder fine-tune against the frozen classifier")
    common(p)

    p = sub.add_parser("attack", help="undefended attack sweep, write the per-epsilon table")
    common(p)
    p.add_argument("--quantize", action="store_true", help="round fgsm/bim adversaries to integers")

    p = sub.add_parser("scenario", help="run attack/defense scenario sweeps")
    common(p)
    p.add_argument("--scenario", action="append", dest="scenario_names",
                   help="scenario to run (repeatable); default comes from the config")
    p.add_argument("--quantize", action="store_true")
    p.add_argument("--noise", help="wb_plus noise as <kind>:<eta>")

    p = sub.add_parser("analyze-gradients", help="pairwise gradient-map SSIM report")
    common(p)

    p = sub.add_parser("membership", help="perturbation-space membership verdict from scenario tables")
    common(p)
    p.add_argument("--from", dest="from_dir", help="directory with the scenario CSVs (default: --out)")
    p.add_argument("--epsilon", type=float, help="epsilon row to use (default: largest shared)")

    p = sub.add_parser("report", help="regenerate plots from the CSV tables")
    common(p)

    return parser


def run_cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = _load_config(args)
    except _CONFIG_ERRORS as e:
        print(f"s2slab: config error: {e}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args, cfg)
    except _CONFIG_ERRORS as e:
        print(f"s2slab: config error: {e}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as e:
        print(f"s2slab: error: {e}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_cli())


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _load_config(args):
    if args.config:
        cfg = parse_config(args.config)
    else:
        cfg = default_config()
    if args.out:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    if args.limit is not None:
        if args.limit < 1:
            raise ConfigError(f"--limit must be positive, got {args.limit}")
        cfg = dataclasses.replace(cfg, limit=args.limit)
    if getattr(args, "quantize", False):
        try:
            cfg = dataclasses.replace(
                cfg, attack=dataclasses.replace(cfg.attack, quantize=True)
            )
        except AttackError as e:
            raise ConfigError(str(e)) from e
    if getattr(args, "noise", None):
        cfg = dataclasses.replace(cfg, noise=parse_noise(args.noise))
    if getattr(args, "scenario_names", None):
        names = []
        for entry in args.scenario_names:
            names.extend(p.strip() for p in entry.split(",") if p.strip())
        # replace() re-runs validation, catching bad names and missing models
        cfg = dataclasses.replace(cfg, scenarios=tuple(names))
    return cfg


def _out_dir(cfg) -> str:
    path = cfg.out_dir
    if not os.path.isabs(path):
        path = os.path.join(cfg.base_dir, path)
    os.makedirs(path, exist_ok=True)
    return path


def _ckpt_path(out: str, stem: str) -> str:
    return os.path.join(out, f"{stem}.ckpt")


def _datasets(cfg):
    train = load_dataset(cfg.train_data, "train", cfg.base_dir)
    test = load_dataset(cfg.test_data, "test", cfg.base_dir)
    return train, test


def _load_ckpt(out: str, stem: str, produced_by: str):
    path = _ckpt_path(out, stem)
    if not os.path.exists(path):
        raise CheckpointError(
            f"checkpoint {path} not found; run `s2slab {produced_by}` first"
        )
    return load_checkpoint(path)


def _classifier_stem(cfg, seed=None) -> str:
    return f"{cfg.classifier}-{cfg.classifier_seed if seed is None else seed}"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_train_classifier(args, cfg) -> int:
    out = _out_dir(cfg)
    name = args.model or cfg.classifier
    seed = args.seed if args.seed is not None else (
        cfg.transfer_source_seed if name == cfg.transfer_source and name != cfg.classifier
        else cfg.classifier_seed
    )
    train, test = _datasets(cfg)
    model = build(desk_spec(name, input_shape=train.images.shape[1:],
                            num_classes=train.num_classes), seed=seed)
    tcfg = dataclasses.replace(cfg.train_classifier, seed=seed)
    report = train_classifier(model, train, tcfg)
    acc = evaluate_accuracy(model, test)
    path = _ckpt_path(out, f"{name}-{seed}")
    save_checkpoint(model, path)
    print(f"{name}-{seed}: train loss {report.epoch_losses[-1]:.4f}  test acc {acc:.4f}  -> {path}")
    return 0


def _cmd_train_ae(args, cfg) -> int:
    out = _out_dir(cfg)
    seed = args.seed if args.seed is not None else cfg.ae_seed
    train, test = _datasets(cfg)
    ae = build(desk_spec("ae", input_shape=train.images.shape[1:],
                         num_classes=train.num_classes), seed=seed)
    tcfg = dataclasses.replace(cfg.train_ae, seed=seed)
    report = train_ae_stage1(ae, train, tcfg)
    path = _ckpt_path(out, f"ae-{seed}-s1")
    save_checkpoint(ae, path)
    print(f"ae-{seed} stage 1: loss {report.epoch_losses[0]:.3f} -> {report.epoch_losses[-1]:.3f}  -> {path}")
    return 0


def _cmd_finetune_decoder(args, cfg) -> int:
    out = _out_dir(cfg)
    seed = args.seed if args.seed is not None else cfg.ae_seed
    train, test = _datasets(cfg)
    clf = _load_ckpt(out, _classifier_stem(cfg), "train-classifier")
    ae = _load_ckpt(out, f"ae-{seed}-s1", "train-ae")
    freeze(clf)
    tcfg = dataclasses.replace(cfg.train_decoder, seed=seed)
    finetune_decoder_stage2(ae, clf, train, tcfg)
    path = _ckpt_path(out, f"ae-{seed}-s2s")
    save_checkpoint(ae, path)
    comp = Composite(defense=ae, classifier=clf)
    acc_f = evaluate_accuracy(clf, test)
    acc_fog = evaluate_accuracy(comp, test)
    print(
        f"ae-{seed} stage 2: acc(f) {acc_f:.4f}  acc(f.g) {acc_fog:.4f}  "
        f"gap {abs(acc_f - acc_fog):.4f}  -> {path}"
    )
    return 0


def _cmd_attack(args, cfg) -> int:
    out = _out_dir(cfg)
    _, test = _datasets(cfg)
    clf = _load_ckpt(out, _classifier_stem(cfg), "train-classifier")
    seed = args.seed if args.seed is not None else cfg.seed
    rows = run_undefended(clf, cfg.attack, test, limit=cfg.limit, seed=seed,
                          network=_classifier_stem(cfg))
    csv_path = os.path.join(out, f"attack-{cfg.attack.method}.csv")
    write_scenario_csv(rows, csv_path)
    write_scenario_json(rows, csv_path[:-4] + ".json")
    for r in rows:
        print(f"{r.network} eps {r.epsilon:g}: clean {r.top1_clean:.4f} adv {r.top1_adv:.4f}")
    print(f"-> {csv_path}")
    return 0


def _scenario_models(cfg, out, needed):
    clf = _load_ckpt(out, _classifier_stem(cfg), "train-classifier")
    comp = None
    if needed & {"whitebox", "wb_plus", "gb_minus"}:
        ae = _load_ckpt(out, f"ae-{cfg.ae_seed}-s2s", "finetune-decoder")
        comp = Composite(defense=ae, classifier=clf)
    source = None
    if "transfer" in needed:
        source = _load_ckpt(
            out, f"{cfg.transfer_source}-{cfg.transfer_source_seed}", "train-classifier --model"
        )
    return clf, comp, source


def _cmd_scenario(args, cfg) -> int:
    out = _out_dir(cfg)
    _, test = _datasets(cfg)
    seed = args.seed if args.seed is not None else cfg.seed
    names = tuple(cfg.scenarios)
    clf, comp, source = _scenario_models(cfg, out, set(names))
    bare = _classifier_stem(cfg)
    defended = bare + "+s2s"
    for name in names:
        if name == "whitebox":
            rows = run_whitebox(comp, cfg.attack, test, limit=cfg.limit, seed=seed,
                                network=defended)
        elif name == "undefended":
            rows = run_undefended(clf, cfg.attack, test, limit=cfg.limit, seed=seed,
                                  network=bare)
        elif name == "wb_plus":
            rows = run_wb_plus(clf, comp, cfg.attack, test, noise=cfg.noise,
                               limit=cfg.limit, seed=seed, network=defended)
        elif name == "gb_minus":
            rows = run_gb_minus(comp, clf, cfg.attack, test, limit=cfg.limit, seed=seed,
                                network=bare)
        else:
            rows = run_transfer(source, clf, cfg.attack, test, limit=cfg.limit, seed=seed,
                                source_name=f"{cfg.transfer_source}-{cfg.transfer_source_seed}",
                                target_name=bare)
        csv_path = os.path.join(out, f"{name}.csv")
        write_scenario_csv(rows, csv_path)
        write_scenario_json(rows, os.path.join(out, f"{name}.json"))
        span = ", ".join(f"{r.top1_adv:.3f}" for r in rows)
        print(f"{name}: adv acc per eps [{span}] -> {csv_path}")
    return 0


def _cmd_analyze_gradients(args, cfg) -> int:
    out = _out_dir(cfg)
    _, test = _datasets(cfg)
    clf = _load_ckpt(out, _classifier_stem(cfg), "train-classifier")
    ae = _load_ckpt(out, f"ae-{cfg.ae_seed}-s2s", "finetune-decoder")
    comp = Composite(defense=ae, classifier=clf)
    limit = cfg.limit if cfg.limit is not None else 50
    # gradient maps are one backward pass per image per model; keep it desk-sized
    limit = min(limit, 200)
    rep = gradient_ssim_matrix([clf, comp, ae], test, limit=limit, names=("f", "fog", "g"))
    csv_path = os.path.join(out, "gradients.csv")
    write_gradient_csv(rep, csv_path)
    text = format_gradient_report(rep)
    with open(os.path.join(out, "gradients.txt"), "w", encoding="utf-8") as f:
        f.write(text)
    print(text, end="")
    print(f"-> {csv_path}")
    return 0


def _read_rows(path):
    from .plots import read_scenario_csv

    if not os.path.exists(path):
        raise ScenarioError(f"missing scenario table {path}; run `s2slab scenario` first")
    return read_scenario_csv(path)


def _cmd_membership(args, cfg) -> int:
    out = _out_dir(cfg)
    src = args.from_dir or out
    tables = {
        name: _read_rows(os.path.join(src, f"{name}.csv"))
        for name in ("undefended", "wb_plus", "gb_minus")
    }
    shared = None
    for rows in tables.values():
        eps = {r["epsilon"] for r in rows}
        shared = eps if shared is None else shared & eps
    if not shared:
        raise ScenarioError("the three scenario tables share no epsilon")
    eps = args.epsilon if args.epsilon is not None else max(shared)
    if eps not in shared:
        raise ScenarioError(f"epsilon {eps:g} missing from one of the tables")

    def at(name):
        return next(r for r in tables[name] if r["epsilon"] == eps)

    whitebox_path = os.path.join(src, "whitebox.csv")
    whitebox_acc = None
    if os.path.exists(whitebox_path):
        wrows = [r for r in _read_rows(whitebox_path) if r["epsilon"] == eps]
        if wrows:
            whitebox_acc = wrows[0]["top1_adv"]
    # the composite's clean accuracy normalizes every fooling ratio
    clean = at("wb_plus")["top1_clean"]
    _, test = _datasets(cfg)
    rep = membership_report(
        baseline_acc=at("undefended")["top1_adv"],
        wb_plus_acc=at("wb_plus")["top1_adv"],
        gb_minus_acc=at("gb_minus")["top1_adv"],
        clean_acc=clean,
        whitebox_acc=whitebox_acc,
        num_classes=test.num_classes,
    )
    text = f"epsilon {eps:g}\n" + format_membership_report(rep)
    path = os.path.join(out, "membership.txt")
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    print(text, end="")
    print(f"-> {path}")
    return 0


def _cmd_report(args, cfg) -> int:
    out = _out_dir(cfg)
    skip = {"gradients.csv"}
    candidates = sorted(
        os.path.join(out, f)
        for f in os.listdir(out)
        if f.endswith(".csv") and f not in skip
    )
    plotted = []
    for path in candidates:
        with open(path, encoding="utf-8") as f:
            header = f.readline()
        if header.startswith("Source, Target") or not header.startswith("Network,"):
            continue
        stem = os.path.splitext(os.path.basename(path))[0]
        svg = os.path.join(out, f"{stem}.svg")
        plot_scenarios([path], svg, title=stem)
        plotted.append(path)
        print(f"{path} -> {svg}")
    if not plotted:
        raise ScenarioError(f"no scenario tables found in {out}")
    combined = os.path.join(out, "scenarios.svg")
    plot_scenarios(plotted, combined, title="accuracy vs nL2")
    print(f"-> {combined}")
    return 0


_COMMANDS = {
    "train-classifier": _cmd_train_classifier,
    "train-ae": _cmd_train_ae,
    "finetune-decoder": _cmd_finetune_decoder,
    "attack": _cmd_attack,
    "scenario": _cmd_scenario,
    "analyze-gradients": _cmd_analyze_gradients,
    "membership": _cmd_membership,
    "report": _cmd_report,
}


if __name__ == "__main__":
    main()
