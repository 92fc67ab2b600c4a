"""``cryda`` command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 missing
dependency (for example a required checkpoint or baseline run).
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, load_config, to_ini
from .data import DataError, load_experiment_data
from .dsp import read_wav
from .evaldiag import (ReportError, build_report, domain_id_experiment, pitch_distribution, wasserstein1d,
                       xgen_experiment)
from .experiments import SWEEP_PARAMS, run_sweep
from .metrics import UndefinedMetricError
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .synthcorpus import ConfigError, generate_corpus, read_manifest
from .uda import METHODS, TrainHistory, evaluate, train_bn, train_method

EXIT_OK, EXIT_USAGE, EXIT_MISSING = 0, 2, 3
log = logging.getLogger("cryda")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _meta() -> dict:
    return {"created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"), "version": __version__}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory {out} is not writable: {exc}") from None
    return out


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _corpus_dir(args, cfg: ExperimentConfig) -> Path:
    d = Path(args.corpus) if getattr(args, "corpus", None) else cfg.resolved_corpus_dir()
    if not (d / "manifest.csv").is_file():
        raise CliError(f"no corpus at {d} (run `cryda synth` first)", EXIT_MISSING)
    return d


def _load_data(args, cfg: ExperimentConfig):
    return load_experiment_data(_corpus_dir(args, cfg), cfg.features, cfg.window_s)


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    seed = cfg.corpus_seed if args.seed is None else args.seed
    manifest = generate_corpus(cfg.corpus, seed, out)
    digest = hashlib.sha256((out / "manifest.csv").read_bytes()).hexdigest()
    _write_json(out / "corpus.json", {"config": cfg.to_dict(), "seed": seed, "n_clips": len(manifest),
                                      "manifest_sha256": digest, "meta": _meta()})
    print(f"wrote {len(manifest)} clips to {out} (manifest sha256 {digest[:12]})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.method not in METHODS:
        raise CliError(f"unknown method {args.method!r}; valid methods: {', '.join(METHODS)}")
    run_cfg = cfg.run_config(args.method, args.seed)
    if args.method == "bn" and not args.from_checkpoint:
        raise CliError("method 'bn' adapts a trained baseline: pass --from-checkpoint <baseline model.ckpt>",
                       EXIT_MISSING)
    data = _load_data(args, cfg)
    out = _out_dir(args.out)
    if args.method == "bn":
        ckpt = Path(args.from_checkpoint)
        if not ckpt.is_file():
            raise CliError(f"checkpoint not found: {ckpt}", EXIT_MISSING)
        base = load_checkpoint(ckpt)
        hist_path = ckpt.parent / "history.jsonl"
        base_hist = TrainHistory.from_jsonl(hist_path) if hist_path.is_file() else None
        state, history = train_bn(data, run_cfg, baseline_state=base, baseline_history=base_hist)
    else:
        progress = (lambda r: log.info("epoch %d source-valid AUC %.4f", r["epoch"], r["source_valid_auc"]))
        state, history = train_method(data, run_cfg, progress=progress)
    save_checkpoint(state, out / "model.ckpt")
    history.to_jsonl(out / "history.jsonl")
    metrics = {"method": args.method, "seed": args.seed, **evaluate(state, data), "best_epoch": history.best_epoch,
               "config": run_cfg.to_dict()}
    _write_json(out / "metrics.json", metrics)
    # wall-clock details live apart from the metrics so reruns stay byte-identical
    _write_json(out / "run.json", _meta())
    print(f"{args.method} seed {args.seed}: source test AUC {metrics['source_test_auc']:.4f}, "
          f"target test AUC {metrics['target_test_auc']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.method != "tni":
        raise CliError(f"sweeps are defined for method 'tni' only, got {args.method!r}")
    if args.param not in SWEEP_PARAMS:
        raise CliError(f"unsupported sweep parameter {args.param!r}; choose from {', '.join(sorted(SWEEP_PARAMS))}")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    if not values:
        raise CliError("--values is empty")
    n_seeds = args.seeds or cfg.n_seeds
    base = cfg.run_config("tni", 0)
    data = _load_data(args, cfg)
    out = _out_dir(args.out)
    try:
        rows = run_sweep(data, args.param, values, range(n_seeds), base)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    name = args.param.replace("-", "_")
    _write_csv(out / f"sweep_{name}.csv", ["value", "mean_auc_target", "stderr"],
               [[repr(r["value"]), repr(r["mean_auc_target"]), repr(r["stderr"])] for r in rows])
    _write_json(out / f"sweep_{name}.json", {"param": args.param, "rows": rows, "seeds": list(range(n_seeds)),
                                            "config": base.to_dict(), "meta": _meta()})
    for r in rows:
        print(f"{args.param}={r['value']:g}: target AUC {r['mean_auc_target']:.4f} ± {r['stderr']:.4f}")
    return EXIT_OK


def _diagnose_pitch(args, cfg, out: Path) -> None:
    root = _corpus_dir(args, cfg)
    manifest = read_manifest(root / "manifest.csv")
    hists = {}
    for domain in ("source", "target"):
        clips = [read_wav(root / r.path) for r in manifest.rows if r.domain == domain]
        hists[domain] = pitch_distribution(clips)
        _write_csv(out / f"pitch_{domain}.csv", ["x", "y"], hists[domain].to_rows())
    try:
        w1 = wasserstein1d(hists["source"], hists["target"])
    except UndefinedMetricError as exc:
        raise CliError(str(exc)) from None
    _write_json(out / "pitch_distance.json", {"wasserstein1_hz": w1, "bin_hz": 10.0,
                                              "voiced_frames": {d: h.total for d, h in hists.items()}})
    print(f"pitch W1 between domains: {w1:.2f} Hz")


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    if args.task == "pitch-dist":
        _diagnose_pitch(args, cfg, out)
        return EXIT_OK
    data = _load_data(args, cfg)
    run_cfg = cfg.run_config("baseline", args.seed)
    if args.task == "domain-id":
        res = domain_id_experiment(data, run_cfg)
        _write_csv(out / "domain_confusion.csv", ["true", "pred_source", "pred_target"],
                   [[d, *map(repr, row)] for d, row in zip(res.domains, res.confusion.tolist())])
        _write_json(out / "domain_id.json", res.to_dict())
        print(f"domain-id test accuracy: {res.accuracy:.4f}")
    else:
        res = xgen_experiment(data, run_cfg)
        _write_json(out / "xgen.json", res)
        print(json.dumps(res, sort_keys=True, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.runs)
    if not root.is_dir():
        raise CliError(f"runs directory not found: {root}")
    runs = []
    for p in sorted(root.rglob("metrics.json")):
        m = json.loads(p.read_text(encoding="utf-8"))
        runs.append({k: m[k] for k in ("method", "seed", "source_test_auc", "target_test_auc")})
    if not any(r["method"] == "baseline" for r in runs):
        raise CliError(f"no baseline runs under {root}", EXIT_MISSING)
    report = build_report(runs)
    table = report.format_table()
    out = _out_dir(args.out) if args.out else root
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    _write_json(out / "report.json", report.to_dict())
    print(table)
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cryda", description="Domain-shift experiments on synthetic infant cries.")
    p.add_argument("--version", action="version", version=f"cryda {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus=True):
        sp.add_argument("--config", help="experiment config file (INI); defaults apply when omitted")
        sp.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
        if corpus:
            sp.add_argument("--corpus", help="corpus directory (default: [paths] corpus_dir)")

    sp = sub.add_parser("synth", help="generate the two-domain corpus")
    common(sp, corpus=False)
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--seed", type=int, default=None, help="corpus seed (default: [corpus] seed)")
    sp.set_defaults(func=cmd_synth, needs_out=True)

    sp = sub.add_parser("train", help="train one method for one seed")
    common(sp)
    sp.add_argument("--method", default="baseline", help=f"one of: {', '.join(METHODS)}")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="run output directory")
    sp.add_argument("--from-checkpoint", help="baseline checkpoint (required for --method bn)")
    sp.set_defaults(func=cmd_train, needs_out=True)

    sp = sub.add_parser("sweep", help="sweep a TNI parameter over several values")
    common(sp)
    sp.add_argument("--method", default="tni")
    sp.add_argument("--param", required=False, help="alpha or noise-fraction")
    sp.add_argument("--values", required=False, help="comma-separated values")
    sp.add_argument("--seeds", type=int, default=None, help="number of seeds (default: [eval] n_seeds)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep, needs_out=True, needs=("param", "values"))

    sp = sub.add_parser("diagnose", help="domain-shift diagnostics")
    common(sp)
    sp.add_argument("--task", required=False, help="domain-id, pitch-dist or xgen")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_diagnose, needs_out=True, needs=("task",))

    sp = sub.add_parser("report", help="aggregate run directories into a results table")
    sp.add_argument("--runs", required=True, help="directory searched recursively for metrics.json")
    sp.add_argument("--out", help="where to write report.txt/report.json (default: the runs directory)")
    sp.set_defaults(func=cmd_report, needs_out=False)
    return p


DIAGNOSE_TASKS = ("domain-id", "pitch-dist", "xgen")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if getattr(args, "print_config", False):
            sys.stdout.write(to_ini(_config(args)))
            return EXIT_OK
        if args.needs_out and not args.out:
            parser.error(f"{args.command}: --out is required")
        for name in getattr(args, "needs", ()):
            if getattr(args, name) in (None, ""):
                parser.error(f"{args.command}: --{name} is required")
        if args.command == "diagnose" and args.task not in DIAGNOSE_TASKS:
            raise CliError(f"unknown task {args.task!r}; choose from {', '.join(DIAGNOSE_TASKS)}")
        return args.func(args)
    except CliError as exc:
        print(f"cryda: error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ReportError) as exc:
        print(f"cryda: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DataError) as exc:
        print(f"cryda: error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
