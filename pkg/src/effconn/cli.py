"""Command-line entry point: simulate, fit, evaluate, export, compare.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import io as fio
from .data import ValidationError
from .gibbs import MAX_COEFFICIENTS, ChainConfig, fit_gibbs
from .simulate import (SimulationConfig, generate, large_config, oracle_config,
                       sensitivity_config, table1_config)
from .vb import FitResult, Hyperparameters, NumericalError, fit

log = logging.getLogger("effconn")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
PRESETS = {"table1": table1_config, "sensitivity": sensitivity_config,
           "large": large_config, "oracle": oracle_config}


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{p}: config file not found")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ValidationError(f"{p}:{err.lineno}: invalid JSON ({err.msg})") from None
    if not isinstance(cfg, dict):
        raise ValidationError(f"{p}: config must be a JSON object")
    return cfg


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def simulation_config(cfg: dict) -> SimulationConfig:
    cfg = dict(cfg)
    preset = cfg.pop("preset", "table1")
    if preset not in PRESETS:
        raise ValidationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    known = {f.name for f in fields(SimulationConfig)}
    unknown = set(cfg) - known
    if unknown:
        raise ValidationError(f"unknown simulation settings: {sorted(unknown)}")
    return PRESETS[preset](**{k: _tuplify(v) for k, v in cfg.items()})


def hyperparameters(cfg: dict, args) -> tuple[Hyperparameters, ChainConfig | None]:
    cfg = dict(cfg)
    chain = cfg.pop("chain", None)
    if args.threshold is not None:
        cfg["selection_threshold"] = args.threshold
    if args.max_iters is not None:
        cfg["max_iters"] = args.max_iters
    hyper = Hyperparameters.from_dict(cfg)
    chain_cfg = None
    if args.backend == "gibbs" or chain is not None:
        chain = dict(chain or {})
        if args.max_iters is not None:
            chain.setdefault("n_iters", args.max_iters)
            chain.setdefault("burn_in", args.max_iters // 4)
        chain_cfg = ChainConfig(**{**chain, "seed": args.seed})
    return hyper, chain_cfg


def _out_dir(args) -> Path:
    d = Path(args.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path: Path, obj):
    path.write_text(fio.dumps(obj))


# -- subcommands ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    config = simulation_config(_read_config(args.config))
    rng = np.random.default_rng(args.seed)
    data, truth, prior = generate(config, rng)
    out = _out_dir(args)
    fio.write_dataset(out, data, prior)
    cfg = asdict(config)
    _write_json(out / "truth.json", {**truth.to_dict(), "seed": args.seed, "simulation": cfg})
    log.info("wrote %d subjects to %s", data.n, out)
    return EXIT_OK


def _run_fit(data, prior, smoothing, hyper, chain_cfg, backend, seed) -> FitResult:
    if backend == "gibbs":
        return fit_gibbs(data, prior, smoothing, hyper, chain_cfg)
    return fit(data, prior, smoothing, hyper, seed=seed)


def cmd_fit(args) -> int:
    data, prior, smoothing = fio.load_dataset(args.manifest)
    hyper, chain_cfg = hyperparameters(_read_config(args.config), args)
    out = _out_dir(args)
    try:
        result = _run_fit(data, prior, smoothing, hyper, chain_cfg, args.backend, args.seed)
    except NumericalError as err:
        _write_json(out / "diagnostics.json", {"error": str(err), "details": err.details,
                                               "last_good_state": _state_summary(err.state)})
        raise
    result.config["roi_names"] = list(data.roi_names)
    fio.write_fit(out / "fit.json", result)
    fio.export_edges(out / "edges.csv", result, data.roi_names)
    _write_json(out / "timing.json", {"wall_time": result.wall_time})
    log.info("%s fit: %d sweeps, %s edges", args.backend, result.iterations,
             [int(s.sum()) for s in result.selected])
    return EXIT_OK


def _state_summary(state) -> dict:
    if state is None:
        return {}
    out = {}
    for name, v in vars(state).items():
        a = np.asarray(v, dtype=float)
        if a.size:
            out[name] = {"min": float(np.nanmin(a)), "max": float(np.nanmax(a)),
                         "finite": bool(np.all(np.isfinite(a)))}
    return out


def cmd_evaluate(args) -> int:
    result = fio.read_fit(args.fit)
    rows = fio.score_rows(result, fio.read_truth(args.truth))
    out = _out_dir(args)
    fio.write_scores(out / "scores.csv", rows)
    for r in rows:
        log.info("group %d: FPR %.4f FNR %.4f Acc %.4f F1 %.4f MSE %.2e",
                 r["group"], r["fpr"], r["fnr"], r["accuracy"], r["f1"], r["mse"])
    return EXIT_OK


def cmd_export(args) -> int:
    results = [fio.read_fit(p) for p in args.fits]
    out = _out_dir(args)
    n = fio.export_edges(out / "edges.csv", results, mode=args.mode)
    log.info("exported %d edges", n)
    return EXIT_OK


def compare_backends(data, prior, smoothing, hyper, chain_cfg, seed, truth=None) -> dict:
    """Fit both backends (Gibbs only within its size limit) and summarise agreement."""
    report = {"R": data.R, "L": data.lag, "backends": {}, "warnings": []}
    runs = {"vb": fit(data, prior, smoothing, hyper, seed=seed)}
    if data.K > MAX_COEFFICIENTS:
        report["warnings"].append(
            f"L*R^2 = {data.K} exceeds the Gibbs limit of {MAX_COEFFICIENTS}; VB-only report")
        report["vb_only"] = True
    else:
        runs["gibbs"] = fit_gibbs(data, prior, smoothing, hyper, chain_cfg or ChainConfig(seed=seed))
        report["vb_only"] = False
    for name, r in runs.items():
        entry = {"wall_time": r.wall_time, "selected_counts": [int(s.sum()) for s in r.selected]}
        if truth is not None:
            entry["scores"] = fio.score_rows(r, truth)
        report["backends"][name] = entry
    if "gibbs" in runs:
        vb, gb = runs["vb"], runs["gibbs"]
        report["mpp_pairs"] = [[[float(a), float(b)] for a, b in zip(vb.mpp[g], gb.mpp[g])]
                               for g in range(vb.mpp.shape[0])]
        report["selection_agrees"] = bool(np.array_equal(vb.selected, gb.selected))
        report["max_mpp_gap"] = float(np.max(np.abs(vb.mpp - gb.mpp)))
    return report


def cmd_compare(args) -> int:
    data, prior, smoothing = fio.load_dataset(args.manifest)
    hyper, chain_cfg = hyperparameters(_read_config(args.config), args)
    truth = fio.read_truth(args.truth) if args.truth else None
    report = compare_backends(data, prior, smoothing, hyper, chain_cfg, args.seed, truth)
    for w in report["warnings"]:
        log.warning(w)
    _write_json(_out_dir(args) / "comparison.json", report)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="effconn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, backend=False):
        sp.add_argument("--config", help="JSON settings file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--output-dir", default=".")
        if backend:
            sp.add_argument("--backend", choices=("vb", "gibbs"), default="vb")
            sp.add_argument("--threshold", type=float)
            sp.add_argument("--max-iters", type=int)

    sp = sub.add_parser("simulate", help="simulate a study with known connectivity")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit a dataset manifest")
    sp.add_argument("manifest")
    common(sp, backend=True)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("evaluate", help="score a fit against simulation truth")
    sp.add_argument("fit")
    sp.add_argument("truth")
    sp.add_argument("--output-dir", default=".")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("export", help="write the selected-edge table")
    sp.add_argument("fits", nargs="+")
    sp.add_argument("--mode", default="all",
                    help="all, unique, shared or a combination such as groups:1+3")
    sp.add_argument("--output-dir", default=".")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("compare", help="fit with both backends and compare")
    sp.add_argument("manifest")
    sp.add_argument("--truth")
    common(sp, backend=True)
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as err:
        log.error("%s", err)
        return EXIT_INVALID
    except NumericalError as err:
        log.error("numerical failure: %s", err)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
