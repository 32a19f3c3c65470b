"""Command-line driver: synth, train, plan, prune, baseline, eval, report.

Every command writes files into ``--out-dir`` and prints a one-line JSON
result on stdout. Failures print ``error code=<tag>: <message>`` on a single
stderr line and exit 2 (usage), 3 (numeric) or 4 (infeasible plan).

Configuration files are flat ``key = value`` text with the same keys as the
long flags (dashes or underscores). Flags given on the command line win.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, fields, replace

from .baselines import baseline_prune, filter_plan_for_speedup
from .data import SyntheticDatasetSpec, load_dataset, synth_data
from .errors import PruneError, UsageError
from .experiment import ToyExperimentConfig
from .flops_report import emit_report, network_profile, speedup
from .groups import shrink_network
from .manifest import load_model, save_model
from .network import TrainConfig, build_toy_net, evaluate, train
from .ratio_planner import PruningPlan, plan_for_network, write_error_curves_csv
from .reg_pruner import PruneConfig, RunLog, run_pruning

DATA_KEYS = {f.name for f in fields(SyntheticDatasetSpec)} - {"seed"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
PRUNE_KEYS = {f.name for f in fields(PruneConfig)}


def read_config(path):
    """Parse a flat ``key = value`` file. ``#`` starts a comment."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path!r}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(value, like):
    if value is None or not isinstance(value, str):
        return value
    if value.lower() in ("none", "null", ""):
        return None
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    try:
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float) or like is None:
            return float(value)
    except ValueError as exc:
        raise UsageError(f"cannot parse {value!r}: {exc}") from exc
    return value


def _override(obj, settings, keys):
    changes = {}
    for k in keys & set(settings):
        changes[k] = _coerce(settings[k], getattr(obj, k))
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def resolve_settings(args):
    """Config file values overlaid by explicitly given flags."""
    settings = read_config(args.config) if args.config else {}
    for key in ("seed", "pr", "mode", "criterion", "out_dir"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        settings[k.strip().replace("-", "_")] = v.strip()
    return settings


def experiment_config(settings):
    """Toy experiment defaults with any matching settings applied.

    Fine-tuning after regularization pruning defaults to the length of the
    prune phase here, rather than the fixed budget of the toy experiment.
    Plain training keys apply to both baseline training and pruning, while
    ``pretrain_<key>`` only affects baseline training.
    Returns ``(data, pretrain, train, prune, seed)``.
    """
    cfg = ToyExperimentConfig()
    seed = int(settings.get("seed", 0))
    cfg = cfg.for_seed(seed)
    cfg = replace(cfg, prune=replace(cfg.prune, finetune_iterations=None))
    pretrain = _override(cfg.pretrain, settings, TRAIN_KEYS)
    prefixed = {k[len("pretrain_"):]: v for k, v in settings.items() if k.startswith("pretrain_")}
    return (_override(cfg.data, settings, DATA_KEYS),
            _override(pretrain, prefixed, TRAIN_KEYS),
            _override(cfg.train, settings, TRAIN_KEYS),
            _override(cfg.prune, settings, PRUNE_KEYS),
            seed)


def _require(settings, key):
    if settings.get(key) in (None, ""):
        raise UsageError(f"missing required setting --{key.replace('_', '-')}")
    return settings[key]


def _emit(result):
    print(json.dumps(result, sort_keys=True))
    return result


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _dataset(settings, split):
    path = _require(settings, "data")
    return load_dataset(path, split)


def cmd_synth(settings):
    spec, _, _, _, seed = experiment_config(settings)
    spec = replace(spec, seed=seed)
    out = _require(settings, "out_dir")
    tr, va = synth_data(spec, out)
    return _emit({"command": "synth", "out_dir": out, "train": len(tr), "val": len(va)})


def cmd_train(settings):
    spec, tcfg, _, _, seed = experiment_config(settings)
    out = _require(settings, "out_dir")
    if settings.get("data"):
        tr, va = load_dataset(settings["data"], "train"), load_dataset(settings["data"], "val")
        data_path = settings["data"]
    else:
        data_path = os.path.join(out, "data")
        tr, va = synth_data(replace(spec, seed=seed), data_path)
    filters = tuple(int(f) for f in str(settings.get("filters", "8,16,32")).split(","))
    net = build_toy_net(tr.x.shape[1:], tr.num_classes, filters, seed=seed)
    losses = train(net, tr, tcfg)
    acc = evaluate(net, va)
    meta = {"accuracy": acc, "train": asdict(tcfg), "data": data_path, "final_loss": losses[-1]}
    save_model(net, os.path.join(out, "model"), meta=meta)
    _write_json(os.path.join(out, "train.json"), meta)
    return _emit({"command": "train", "accuracy": acc, "model": os.path.join(out, "model")})


def cmd_plan(settings):
    net, _, _, _ = load_model(_require(settings, "model"))
    mode = settings.get("mode", "dpr").lower()
    pr = float(_require(settings, "pr"))
    w = float(settings.get("w_gflops", ToyExperimentConfig.w_gflops))
    out = _require(settings, "out_dir")
    os.makedirs(out, exist_ok=True)
    plan, curves = plan_for_network(net, pr, mode, w)
    path = os.path.join(out, f"plan_{mode}.json")
    plan.save(path)
    if curves:
        write_error_curves_csv(curves, os.path.join(out, "error_curves.csv"))
    return _emit({"command": "plan", "plan": path, "ratios": plan.ratios, "v": plan.v})


def _finish_run(settings, method, base_net, base_meta, masked, log, shrunk, records, plan, val):
    out = _require(settings, "out_dir")
    os.makedirs(out, exist_ok=True)
    acc = evaluate(shrunk, val)
    sp = speedup(network_profile(base_net), network_profile(shrunk))
    meta = {"method": method, "accuracy": acc, "speedup": sp, "baseline_model": settings["model"],
            "baseline_accuracy": base_meta.get("accuracy"), "targets": log.targets,
            "counts": {n: m.n_pruned for n, m in log.masks.items()}}
    save_model(shrunk, os.path.join(out, "model"), records=records, meta=meta)
    if masked is not None:
        save_model(masked, os.path.join(out, "masked"), masks=log.masks, meta={"method": method})
    log.to_csv(os.path.join(out, f"loss_{method}.csv"))
    plan.save(os.path.join(out, "plan.json"))
    _write_json(os.path.join(out, "run.json"), meta)
    command = "baseline" if method in ("tp", "fp") else "prune"
    return _emit({"command": command, "method": method, "accuracy": acc, "speedup": sp,
                  "events": len(log.events), "out_dir": out})


def cmd_prune(settings):
    criterion = settings.get("criterion", "reg").lower()
    if criterion in ("tp", "fp"):
        return cmd_baseline(settings)
    if criterion != "reg":
        raise UsageError(f"unknown criterion {criterion!r}")
    _, _, tcfg, pcfg, seed = experiment_config(settings)
    base, _, _, base_meta = load_model(_require(settings, "model"))
    plan = PruningPlan.load(_require(settings, "plan"))
    tr, va = _dataset(settings, "train"), _dataset(settings, "val")
    method = settings.get("method") or plan.mode
    masked, log = run_pruning(base.copy(), plan, tr, replace(tcfg, seed=seed + 1), pcfg, method=method)
    shrunk, records = shrink_network(masked, log.masks)
    return _finish_run(settings, method, base, base_meta, masked, log, shrunk, records, plan, va)


def cmd_baseline(settings):
    criterion = settings.get("criterion", "fp").lower()
    if criterion not in ("tp", "fp"):
        raise UsageError(f"baseline criterion must be tp or fp, got {criterion!r}")
    _, _, tcfg, pcfg, seed = experiment_config(settings)
    base, _, _, base_meta = load_model(_require(settings, "model"))
    if settings.get("plan"):
        plan = PruningPlan.load(settings["plan"])
    else:
        pr = float(_require(settings, "pr"))
        if not 0.0 < pr < 1.0:
            raise UsageError(f"pr must lie in (0, 1), got {pr}")
        plan = filter_plan_for_speedup(base, 1.0 / (1.0 - pr))
    tr, va = _dataset(settings, "train"), _dataset(settings, "val")
    ft = pcfg.finetune_iterations if pcfg.finetune_iterations is not None else 200
    shrunk, log = baseline_prune(base, plan, criterion, tr, replace(tcfg, seed=seed + 1), ft)
    return _finish_run(settings, criterion, base, base_meta, None, log, shrunk, log.records, plan, va)


def cmd_eval(settings):
    net, _, _, _ = load_model(_require(settings, "model"))
    split = settings.get("split", "val")
    ds = load_dataset(_require(settings, "data"), None if split == "all" else split)
    acc = evaluate(net, ds)
    result = {"command": "eval", "accuracy": acc, "split": split, "count": len(ds)}
    if settings.get("out_dir"):
        os.makedirs(settings["out_dir"], exist_ok=True)
        _write_json(os.path.join(settings["out_dir"], "eval.json"), result)
    return _emit(result)


def cmd_report(settings):
    """Collect every ``run.json`` under ``--run-dir`` into the report files."""
    root = _require(settings, "run_dir")
    out = settings.get("out_dir") or root
    logs, plans, profiles, methods = {}, {}, {}, {}
    baseline_acc = None
    curves = None
    for dirpath, _, files in sorted(os.walk(root)):
        if "run.json" not in files:
            continue
        with open(os.path.join(dirpath, "run.json")) as fh:
            run = json.load(fh)
        m = run["method"]
        logs[m] = RunLog.from_csv(os.path.join(dirpath, f"loss_{m}.csv"), m)
        plans[m] = PruningPlan.load(os.path.join(dirpath, "plan.json"))
        profiles[m] = network_profile(load_model(os.path.join(dirpath, "model"))[0])
        if "baseline" not in profiles:
            profiles["baseline"] = network_profile(load_model(run["baseline_model"])[0])
        methods[m] = {"accuracy": run["accuracy"]}
        baseline_acc = run.get("baseline_accuracy", baseline_acc)
    plan_curves = os.path.join(root, "error_curves.csv")
    if os.path.exists(plan_curves):
        from .ratio_planner import read_error_curves_csv
        curves = read_error_curves_csv(plan_curves)
    summary = {"baseline_accuracy": baseline_acc, "methods": methods} if methods else None
    written = emit_report(logs, plans, profiles, out, summary, curves)
    with open(os.path.join(out, "summary.json")) as fh:
        doc = json.load(fh)
    return _emit({"command": "report", "files": written, "methods": doc["methods"]})


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "plan": cmd_plan,
    "prune": cmd_prune,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    """Reports bad command lines as :class:`UsageError` instead of printing usage."""

    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="prune3d", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        s.add_argument("--pr", type=float)
        s.add_argument("--mode", choices=("dpr", "spr"))
        s.add_argument("--criterion", choices=("reg", "tp", "fp"))
        s.add_argument("--out-dir", dest="out_dir")
        s.add_argument("--model")
        s.add_argument("--data")
        s.add_argument("--plan")
        s.add_argument("--run-dir", dest="run_dir")
        s.add_argument("--split", choices=("train", "val", "all"))
        s.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key, e.g. --set iterations=200")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help
        return exc.code or 0
    except UsageError as exc:
        print(f"error code=usage: {exc}", file=sys.stderr)
        return 2
    try:
        settings = resolve_settings(args)
        for key in ("model", "data", "plan", "run_dir", "split"):
            if getattr(args, key) is not None:
                settings[key] = getattr(args, key)
        COMMANDS[args.command](settings)
    except PruneError as exc:
        msg = " ".join(str(exc).split())
        print(f"error code={exc.code}: {msg}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, OverflowError) as exc:
        print(f"error code=numeric: {' '.join(str(exc).split())}", file=sys.stderr)
        return 3
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error code=usage: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
