"""Experiment runner and command-line entry point.

``run`` trains a base model on the full dataset, unlearns the forget split
with every configured method and writes metrics plus per-method artifacts.
``verify`` runs the quadratic lemma checks, ``udi`` the per-sample
difficulty/utility-drop coupling study and ``report`` re-renders CSV/JSON
from a finished run directory.

Every JSON report is deterministic for a fixed config and seed; the only
wall-clock information lives in a separate ``run_info.json``.
"""

import argparse
import copy
import csv
import datetime
import json
import os
import platform
import sys
import zlib
from dataclasses import fields
from importlib import resources

import jsonschema
import numpy as np
import yaml

from . import __version__, baselines, data, diffcore, metrics, verify
from .errors import ConfigError, DivergenceError, OfmuError, PreconditionError, UndefinedCorrelation
from .optimizer import MinibatchSampler, OfmuConfig, Trajectory, run_ofmu

OFMU = "ofmu"
METHOD_NAMES = (OFMU,) + baselines.METHODS

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

CHECKS = ("lemma1", "lemma2", "lemma3")


# -- configuration ---------------------------------------------------------

def _schema():
    return json.loads(resources.files("ofmu").joinpath("config_schema.json").read_text())


def derive_seed(seed, tag):
    """Stable 32-bit seed for a named sub-component."""
    seq = np.random.SeedSequence([int(seed), zlib.crc32(tag.encode())])
    return int(seq.generate_state(1)[0])


def load_config(path, seed=None):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = validate_config(raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def validate_config(raw):
    """Schema check plus defaults; returns a normalized deep copy."""
    try:
        jsonschema.validate(raw, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    cfg = copy.deepcopy(raw)
    cfg.setdefault("seed", 0)
    cfg.setdefault("output_dir", "ofmu-run")
    cfg.setdefault("model", {"family": diffcore.LOGISTIC_REGRESSION})
    cfg["model"].setdefault("hidden", [])
    cfg.setdefault("base", {})
    base = cfg["base"]
    base.setdefault("eta", 0.1)
    base.setdefault("max_steps", 5000)
    base.setdefault("target_accuracy", 0.95)
    base.setdefault("check_every", 10)
    base.setdefault("B", 64)
    cfg.setdefault("metrics", {})
    cfg["metrics"].setdefault("udi", {})
    cfg["metrics"].setdefault("mia_seed", None)
    cfg.setdefault("udi_study", {})
    cfg["udi_study"].setdefault("budget", 5)
    cfg["udi_study"].setdefault("max_samples", 50)
    labels = set()
    for entry in cfg["methods"]:
        entry.setdefault("config", {})
        entry.setdefault("label", entry["name"])
        # duplicate labels get a numeric suffix so artifacts never collide
        label, n = entry["label"], 2
        while label in labels:
            label = f"{entry['label']}-{n}"
            n += 1
        entry["label"] = label
        labels.add(label)
        _method_config(entry, cfg["seed"])
    return cfg


def _method_config(entry, seed):
    name = entry["name"]
    params = dict(entry["config"])
    # the seed tag is the method name, so duplicated entries stay identical
    params.setdefault("seed", derive_seed(seed, f"method:{name}"))
    try:
        if name == OFMU:
            allowed = {f.name for f in fields(OfmuConfig)}
            _reject_unknown(params, allowed, name)
            return OfmuConfig(**params)
        allowed = {f.name for f in fields(baselines.BaselineConfig)} - {"method"}
        _reject_unknown(params, allowed, name)
        return baselines.BaselineConfig(method=name, **params)
    except (TypeError, OfmuError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"method {entry['label']!r}: {exc}") from exc


def _reject_unknown(params, allowed, name):
    unknown = sorted(set(params) - allowed)
    if unknown:
        raise ConfigError(f"method {name!r}: unknown option(s) {unknown}")


# -- experiment pieces -----------------------------------------------------

def build_data(cfg):
    """``(train, test)`` datasets, z-scored with training statistics if requested."""
    spec = cfg["dataset"]
    seed = cfg["seed"]
    if "file" in spec:
        train = data.load_dataset(spec["file"], spec.get("class_count"))
        if "test_file" not in spec:
            raise ConfigError("file datasets need a test_file for test accuracy")
        test = data.load_dataset(spec["test_file"], train.class_count)
    else:
        params = {k: spec[k] for k in ("class_count", "samples_per_class", "feature_dim", "separation")}
        params["noise"] = spec.get("noise", 1.0)
        train = data.gen_blobs(derive_seed(seed, "data"), **params)
        test_params = dict(params, samples_per_class=spec.get("test_samples_per_class", params["samples_per_class"] // 4 or 1))
        test = data.gen_blobs(derive_seed(seed, "test"), **test_params)
    if spec.get("standardize", False):
        mean, scale = data.feature_stats(train)
        train = data.standardize(train, mean, scale)
        test = data.standardize(test, mean, scale)
    return train, test


def build_split(cfg, dataset):
    spec = cfg["split"]
    if spec["mode"] == data.CLASS_WISE:
        return data.split_classwise(dataset, spec["classes"])
    return data.split_random(dataset, spec["fraction"], spec.get("seed", derive_seed(cfg["seed"], "split")))


def build_problem(cfg, dataset):
    model = cfg["model"]
    try:
        return diffcore.make_problem(model["family"], dataset.feature_dim, dataset.class_count, tuple(model["hidden"]))
    except OfmuError as exc:
        raise ConfigError(f"model: {exc}") from exc


def train_base(problem, dataset, cfg):
    """Minibatch descent on the full dataset until the accuracy target or the step cap.

    A null target trains for exactly ``max_steps`` steps.
    """
    base = cfg["base"]
    theta = problem.init_params(np.random.default_rng(derive_seed(cfg["seed"], "init")))
    sampler = MinibatchSampler(dataset, None, base["B"], derive_seed(cfg["seed"], "base"))
    target = base["target_accuracy"]
    steps = 0
    acc = metrics.accuracy(problem, theta, dataset)
    while (target is None or acc < target) and steps < base["max_steps"]:
        theta = theta - base["eta"] * problem.grad(theta, sampler.retain_batch())
        steps += 1
        if steps % base["check_every"] == 0 or steps == base["max_steps"]:
            acc = metrics.accuracy(problem, theta, dataset)
    return theta, {"steps": steps, "train_accuracy": acc, "reached_target": target is None or bool(acc >= target)}


def run_method(problem, split, theta0, entry, seed):
    mcfg = _method_config(entry, seed)
    if entry["name"] == OFMU:
        return run_ofmu(problem, split, theta0, mcfg)
    return baselines.run_baseline(problem, split, theta0, mcfg)


def evaluate(problem, theta, split, test, mia_seed):
    return {
        "UA": metrics.unlearning_accuracy(problem, theta, split.forget),
        "RA": metrics.accuracy(problem, theta, split.retain),
        "TA": metrics.accuracy(problem, theta, test),
        "MIA": metrics.mia_efficacy(problem, theta, split.retain, test, split.forget, mia_seed),
    }


def environment():
    return {
        "ofmu": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
    }


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _write_run_info(out_dir, command):
    _write_json(os.path.join(out_dir, "run_info.json"), {
        "command": command,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    })


def write_curves(path, trajectories):
    """Plot-ready per-iteration losses for every method."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "k", "rho", "grad_phi_norm", "retain_loss", "forget_loss", "sim"])
        for label, traj in trajectories.items():
            for r in traj.records:
                w.writerow([label, r.k, *(repr(float(v)) for v in (r.rho, r.grad_phi_norm, r.retain_loss, r.forget_loss, r.sim))])


def run_experiment(cfg):
    """Full pipeline; returns the report dict also written to ``report.json``."""
    out = _ensure_dir(cfg["output_dir"])
    traj_dir = _ensure_dir(os.path.join(out, "trajectories"))
    ckpt_dir = _ensure_dir(os.path.join(out, "checkpoints"))
    train, test = build_data(cfg)
    split = build_split(cfg, train)
    problem = build_problem(cfg, train)
    theta_base, base_info = train_base(problem, train, cfg)
    diffcore.save_params(os.path.join(ckpt_dir, "base.theta"), theta_base)
    mia_seed = cfg["metrics"]["mia_seed"]
    if mia_seed is None:
        mia_seed = derive_seed(cfg["seed"], "mia")

    report = metrics.MetricsReport()
    summaries, failures, trajectories = {}, {}, {}
    for entry in cfg["methods"]:
        label = entry["label"]
        try:
            traj = run_method(problem, split, theta_base, entry, cfg["seed"])
        except DivergenceError as exc:
            failures[label] = {"error": "divergence", "step": exc.step, "message": str(exc)}
            continue
        trajectories[label] = traj
        ckpt = os.path.join(ckpt_dir, f"{label}.theta")
        diffcore.save_params(ckpt, traj.final_theta)
        traj.to_jsonl(os.path.join(traj_dir, f"{label}.jsonl"), theta_ref=os.path.relpath(ckpt, out))
        summaries[label] = traj.summary()
        report.methods[label] = evaluate(problem, traj.final_theta, split, test, mia_seed)
    report.refresh_overall()
    report.to_csv(os.path.join(out, "metrics.csv"))
    write_curves(os.path.join(out, "curves.csv"), trajectories)

    result = {
        "config": cfg,
        "environment": environment(),
        "data": {
            "train_size": len(train),
            "test_size": len(test),
            "retain_size": len(split.retain),
            "forget_size": len(split.forget),
            "split": {"mode": split.mode, **split.parameters},
        },
        "base": {**base_info, **evaluate(problem, theta_base, split, test, mia_seed)},
        "trajectories": summaries,
        "failures": failures,
        "metrics": report.to_dict(),
    }
    _write_json(os.path.join(out, "report.json"), result)
    _write_run_info(out, "run")
    return result


def _in_order(mapping, order):
    head = {k: mapping[k] for k in order if k in mapping}
    return head | {k: v for k, v in mapping.items() if k not in head}


def rerender_report(run_dir):
    """Rebuild ``metrics.csv``/``curves.csv`` and the overall column from stored artifacts."""
    path = os.path.join(run_dir, "report.json")
    with open(path) as fh:
        stored = json.load(fh)
    report = metrics.MetricsReport.from_dict(stored["metrics"])
    # report.json is key-sorted; restore the config's method order for the CSVs
    order = [m["label"] for m in stored.get("config", {}).get("methods", [])]
    report.methods = _in_order(report.methods, order)
    report.refresh_overall()
    stored["metrics"] = report.to_dict()
    report.to_csv(os.path.join(run_dir, "metrics.csv"))
    traj_dir = os.path.join(run_dir, "trajectories")
    trajectories = {}
    if os.path.isdir(traj_dir):
        for name in sorted(os.listdir(traj_dir)):
            if name.endswith(".jsonl"):
                trajectories[name[:-len(".jsonl")]] = Trajectory.from_jsonl(os.path.join(traj_dir, name))
    write_curves(os.path.join(run_dir, "curves.csv"), _in_order(trajectories, order))
    _write_json(path, stored)
    return stored


# -- lemma suite -----------------------------------------------------------

def run_verify_suite(selection=CHECKS, bank=None):
    """Run the selected checks; precondition violations are skipped, not failed."""
    unknown = sorted(set(selection) - set(CHECKS))
    if unknown:
        raise ConfigError(f"unknown checks {unknown}; expected a subset of {list(CHECKS)}")
    bank = verify.canonical_bank() if bank is None else bank
    results = {}
    counts = {"passed": 0, "failed": 0, "skipped": 0}
    for name in CHECKS:
        if name not in selection:
            continue
        rows = []
        for check in bank.get(name, []):
            try:
                row = check()
                row["status"] = "passed" if row["pass"] else "failed"
            except PreconditionError as exc:
                row = {"check": name, "status": "skipped", "reason": str(exc), "pass": None}
            counts[row["status"]] += 1
            rows.append(row)
        results[name] = rows
    return {"selection": [c for c in CHECKS if c in selection], "results": results, **counts, "pass": counts["failed"] == 0}


# -- UDI coupling ----------------------------------------------------------

def _single_sample_split(split, i):
    """Split whose forget set is the single forget sample ``i``."""
    idx = split.forget_idx[i:i + 1]
    return data.UnlearnSplit(split.source, split.retain_idx, idx, split.mode, {"sample": int(idx[0])})


def _budgeted(entry, budget):
    entry = copy.deepcopy(entry)
    key = "K" if entry["name"] == OFMU else "steps"
    entry["config"][key] = budget
    return entry


def udi_coupling_study(cfg, methods=None):
    """Spearman coupling between per-sample UDI and per-sample utility drop.

    Each of the first ``udi_study.max_samples`` forget samples is unlearned
    alone from the base parameters with a budget of ``udi_study.budget``
    steps (outer iterations for OFMU); its drop is the retain-accuracy loss.
    """
    train, _ = build_data(cfg)
    split = build_split(cfg, train)
    problem = build_problem(cfg, train)
    theta_base, base_info = train_base(problem, train, cfg)
    study = cfg["udi_study"]
    n = min(study["max_samples"], len(split.forget_idx))
    if n < 20:
        raise ConfigError(f"UDI coupling needs at least 20 forget samples, got {n}")
    entries = cfg["methods"] if methods is None else methods
    if any(e["name"] == baselines.RETRAIN for e in entries):
        raise ConfigError("retrain does not target individual samples; drop it from the UDI study")

    ucfg = metrics.UdiConfig(**cfg["metrics"]["udi"])
    retain = split.retain
    retain_batch = retain.as_batch()
    forget = split.forget
    udis = [metrics.udi(problem, theta_base, forget.take([i]), retain_batch, ucfg) for i in range(n)]
    ra_before = metrics.accuracy(problem, theta_base, retain)

    table, rows = {}, []
    for entry in entries:
        budgeted = _budgeted(entry, study["budget"])
        drops = []
        for i in range(n):
            try:
                traj = run_method(problem, _single_sample_split(split, i), theta_base, budgeted, cfg["seed"])
                drop = ra_before - metrics.accuracy(problem, traj.final_theta, retain)
            except DivergenceError:
                drop = ra_before
            drops.append(drop)
            rows.append((entry["label"], int(split.forget_idx[i]), udis[i], drop))
        try:
            tau = metrics.spearman(udis, drops)
            table[entry["label"]] = {"tau": tau, "error": None}
        except UndefinedCorrelation as exc:
            table[entry["label"]] = {"tau": None, "error": f"undefined-correlation: {exc}"}
    return {
        "config": cfg,
        "environment": environment(),
        "base": base_info,
        "samples": n,
        "budget": study["budget"],
        "ra_before": ra_before,
        "udi_values": udis,
        "tau": table,
    }, rows


def write_udi_outputs(cfg, result, rows):
    out = _ensure_dir(cfg["output_dir"])
    _write_json(os.path.join(out, "udi_report.json"), result)
    with open(os.path.join(out, "udi.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "sample_index", "udi", "drop"])
        for label, idx, u, d in rows:
            w.writerow([label, idx, repr(float(u)), repr(float(d))])
    _write_run_info(out, "udi")


# -- CLI -------------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="ofmu", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="train, unlearn with every method, write metrics")
    r.add_argument("config")
    v = sub.add_parser("verify", help="run the quadratic lemma checks")
    v.add_argument("--only", default=",".join(CHECKS), help="comma-separated subset of " + ",".join(CHECKS))
    v.add_argument("--out", default=None, help="write the JSON report here")
    u = sub.add_parser("udi", help="UDI vs utility-drop coupling study")
    u.add_argument("config")
    rep = sub.add_parser("report", help="re-render CSV/JSON from a run directory")
    rep.add_argument("run_dir")
    return p


def _print_verify(report):
    for name, rows in report["results"].items():
        for row in rows:
            inst = row.get("instance", "-")
            print(f"{name:7s} {inst:20s} {row['status'].upper()}")
    print(f"passed={report['passed']} failed={report['failed']} skipped={report['skipped']}")


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config, args.seed)
            result = run_experiment(cfg)
            for label, row in result["metrics"]["methods"].items():
                print(f"{label:14s} " + " ".join(f"{c}={row[c]:.4f}" for c in metrics.METRIC_COLUMNS))
            for label, fail in result["failures"].items():
                print(f"{label:14s} FAILED ({fail['error']} at step {fail['step']})")
            return EXIT_OK
        if args.command == "verify":
            selection = [s for s in args.only.split(",") if s]
            report = run_verify_suite(selection)
            if args.out:
                _write_json(args.out, report)
            _print_verify(report)
            return EXIT_OK if report["pass"] else EXIT_CHECK_FAILED
        if args.command == "udi":
            cfg = load_config(args.config, args.seed)
            result, rows = udi_coupling_study(cfg)
            write_udi_outputs(cfg, result, rows)
            for label, row in result["tau"].items():
                print(f"{label:14s} tau={row['tau']}" if row["error"] is None else f"{label:14s} {row['error']}")
            return EXIT_OK
        rerender_report(args.run_dir)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OfmuError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
