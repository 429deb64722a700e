"""Command line entry point: ``audit``, ``demo`` and ``bench``.

Exit codes: 0 success, 1 a suite did not meet its expectation, 2 bad
configuration or arguments.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from . import harness
from .attention import AttentionParams, gsa_poly, window_attention_poly
from .conv import ConvFilter
from .models import Model, ModelSpec
from .polyphase import anchor
from .tensor import Rng, Shift2D, circular_shift, rng_normal

MODEL_SUITES = ("invariance", "logits_variance", "feature_equivariance", "worst_of_n")
KNOWN_SUITES = tuple(harness.SUITES) + MODEL_SUITES
MODEL_TOL = {"invariance": 1e-9, "feature_equivariance": 1e-9, "logits_variance": 1e-18}
DEFAULT_INPUTS = 8
FEATURE_INPUTS = 2


class ConfigError(ValueError):
    pass


def _env_seed() -> int:
    raw = os.environ.get("SHIFTEQ_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"SHIFTEQ_SEED must be an integer, got {raw!r}")


def load_config(path) -> dict:
    """Read and validate a run config; returns a normalized dict."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"model", "suites", "sampler", "output", "tolerances", "seed", "trials", "inputs"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    seed = raw.get("seed")
    seed = _env_seed() if seed is None else int(seed)
    try:
        model = ModelSpec.from_dict({"seed": seed, **raw.get("model", {})})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model spec: {exc}")
    suites = raw.get("suites", ["lemma1", "corollary1", "lemma2", "lemma3", "lemma4"])
    if not isinstance(suites, list) or not suites:
        raise ConfigError("suites must be a non-empty list")
    bad = [s for s in suites if s not in KNOWN_SUITES]
    if bad:
        raise ConfigError(f"unknown suite(s) {bad}; known: {list(KNOWN_SUITES)}")
    try:
        sampler = harness.ShiftSampler(**{
            "mode": "uniform_random", "range": ((-15, 15), (-15, 15)), "count": 20, "seed": seed,
            **raw.get("sampler", {}),
        })
        sampler.check_bounds(*model.image[1:])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad sampler: {exc}")
    output = {"path": None, "format": "json", **raw.get("output", {})}
    if output["format"] not in ("json", "csv"):
        raise ConfigError(f"output format must be json or csv, got {output['format']!r}")
    tolerances = raw.get("tolerances", {})
    if not isinstance(tolerances, dict) or any(k not in KNOWN_SUITES for k in tolerances):
        raise ConfigError("tolerances must map known suite names to numbers")
    if any(float(v) < 0 for v in tolerances.values()):
        raise ConfigError("tolerances must be non-negative")
    trials = raw.get("trials")
    inputs = int(raw.get("inputs", DEFAULT_INPUTS))
    if (trials is not None and int(trials) < 1) or inputs < 1:
        raise ConfigError("trials and inputs must be positive")
    return {
        "model": model, "suites": suites, "sampler": sampler, "output": output,
        "tolerances": {k: float(v) for k, v in tolerances.items()}, "seed": seed,
        "trials": None if trials is None else int(trials), "inputs": inputs,
    }


def _model_inputs(spec: ModelSpec, n: int, seed: int):
    root = Rng(seed).child("inputs")
    seeds, xs = [], []
    for i in range(n):
        r = root.child(str(i))
        seeds.append(r.seed)
        xs.append(rng_normal(r, spec.image))
    return xs, seeds


def _model_suite(name: str, model: Model, cfg: dict) -> harness.AuditReport:
    spec = model.spec
    tol = cfg["tolerances"].get(name, MODEL_TOL.get(name, 0.0))
    xs, seeds = _model_inputs(spec, cfg["inputs"], cfg["seed"])
    sampler = cfg["sampler"]
    if name == "invariance":
        report = harness.invariance_audit(model, xs, sampler.shifts(), tol, seeds)
    elif name == "feature_equivariance":
        shifts = sampler.shifts()[:4]
        report = harness.feature_audit(model, xs[:FEATURE_INPUTS], shifts, tol, seeds)
    elif name == "logits_variance":
        window = harness.ShiftSampler("exhaustive", ((-5, 5), (-5, 5)))
        tests = []
        for x, s in zip(xs, seeds):
            v = harness.logits_variance(model, x, window)
            tests.append(harness.EquivarianceVerdict(v <= tol, v, Shift2D(0, 0) if v <= tol else None,
                                                     "logits_variance", s))
        passed = sum(t.passed for t in tests)
        report = harness.AuditReport(name, tests, {
            "trials": len(tests), "trials_passed": passed, "trials_failed": len(tests) - passed,
            "logits_variance": [t.residual for t in tests],
            "variance_reduction": harness.VARIANCE_REDUCTION,
        }, {"tolerance": tol, "sampler": window.to_dict()})
    else:
        n = sampler.count if sampler.mode == "uniform_random" else 30
        g, frac = harness.worst_of_n_shift(model, xs, n, sampler.range, sampler.seed)
        report = harness.AuditReport(name, [], {
            "trials": 1, "trials_passed": int(frac == 1.0), "trials_failed": int(frac != 1.0),
            "worst_shift": list(g), "worst_fraction": frac, "n": n,
        }, {"sampler": sampler.to_dict()})
    report.expect_equivariant = spec.is_poly
    report.env.setdefault("model", spec.to_dict())
    return report


def run_audit(cfg: dict) -> tuple:
    """Run every configured suite; returns ``(reports, exit_code)``."""
    reports: List[harness.AuditReport] = []
    model = None
    for name in cfg["suites"]:
        if name in harness.SUITES:
            reports.append(harness.lemma_suite(name, cfg["trials"], cfg["seed"],
                                               cfg["tolerances"].get(name)))
        else:
            model = model or Model(cfg["model"])
            reports.append(_model_suite(name, model, cfg))
    return reports, (0 if all(r.ok for r in reports) else 1)


def render_report(cfg: dict, reports, code: int, fmt: str) -> str:
    if fmt == "csv":
        return harness.reports_to_csv(reports)
    doc = {
        "config": {
            "model": cfg["model"].to_dict(), "suites": cfg["suites"],
            "sampler": cfg["sampler"].to_dict(), "tolerances": cfg["tolerances"],
            "seed": cfg["seed"], "trials": cfg["trials"], "inputs": cfg["inputs"],
        },
        "summary": {r.suite: {"ok": r.ok, "expect_equivariant": r.expect_equivariant} for r in reports},
        "exit_code": code,
        "reports": [r.to_dict() for r in reports],
        "env": {"timestamp": datetime.now(timezone.utc).isoformat(), "version": __version__},
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def cmd_audit(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    fmt = args.format or cfg["output"]["format"]
    path = args.out or cfg["output"]["path"]
    reports, code = run_audit(cfg)
    for r in reports:
        status = "ok" if r.ok else "FAILED"
        kind = "equivariant" if r.expect_equivariant else "expected-fail"
        m = r.metrics
        extra = f"max_residual={m['max_residual']:.3g}" if "max_residual" in m else ""
        if "worst_fraction" in m:
            extra = f"worst_fraction={m['worst_fraction']:.4f}"
        print(f"{r.suite:28s} {kind:13s} {m.get('trials_passed')}/{m.get('trials')} passed  "
              f"{extra:24s} {status}")
    text = render_report(cfg, reports, code, fmt)
    if path:
        Path(path).write_text(text)
        print(f"report written to {path}")
    return code


def _family(variant: str) -> str:
    fam = variant.replace("_poly", "")
    if fam not in ("vit", "twins"):
        raise ConfigError(f"unknown variant {variant!r}")
    return fam


def cmd_demo(args) -> int:
    try:
        fam = _family(args.variant)
        specs = [ModelSpec(variant=v, seed=args.seed, image=tuple(args.image),
                           patch_stride=args.patch_stride)
                 for v in (fam, fam + "_poly")]
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    g = Shift2D(*args.shift)
    x = rng_normal(Rng(args.seed).child("demo-input"), specs[0].image)
    gx = circular_shift(x, g)
    np.set_printoptions(precision=5, suppress=True, linewidth=120)
    print(f"input {specs[0].image}, seed {args.seed}, shift (dy, dx) = {tuple(g)}")
    for spec in specs:
        m = Model(spec)
        lx, lg = m.logits(x), m.logits(gx)
        res = float(np.max(np.abs(lx - lg)))
        print(f"\n[{spec.variant}]")
        print(f"  logits(x)   = {lx}")
        print(f"  logits(g.x) = {lg}")
        print(f"  max |logits residual| = {res:.3e}")
        print(f"  predicted class: x -> {int(np.argmax(lx))}, g.x -> {int(np.argmax(lg))}")
    return 0


def _best_time(fn, repeats: int = 5) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_rows(sizes, channels: int = 16, stride: int = 2, seed: int = 0):
    r = Rng(seed)
    theta = AttentionParams(*(rng_normal(r.child(n), (channels, channels)) / 4 for n in "qkv"))
    h = ConvFilter(rng_normal(r.child("h"), (channels, channels, stride, stride)) / 8, stride)
    rows = []
    for n in sizes:
        x = rng_normal(r.child(f"x{n}"), (channels, n, n))
        window_attention_poly(x, stride, theta)
        gsa_poly(x, stride, h, theta)
        rows.append({
            "size": n,
            "anchor": _best_time(lambda: anchor(x, stride)),
            "window_attention_poly": _best_time(lambda: window_attention_poly(x, stride, theta)),
            "gsa_poly": _best_time(lambda: gsa_poly(x, stride, h, theta), 3 if n < 64 else 1),
        })
    return rows


def cmd_bench(args) -> int:
    try:
        sizes = [int(v) for v in args.sizes.split(",") if v.strip()]
        if not sizes or any(n < 2 or n % 2 for n in sizes):
            raise ValueError
    except ValueError:
        print("error: --sizes must be a comma-separated list of even integers", file=sys.stderr)
        return 2
    rows = bench_rows(sizes)
    print(f"{'size':>6} {'anchor [ms]':>12} {'window_poly [ms]':>17} {'gsa_poly [ms]':>14}")
    ok = True
    for row in rows:
        print(f"{row['size']:>6} {1e3 * row['anchor']:12.3f} "
              f"{1e3 * row['window_attention_poly']:17.3f} {1e3 * row['gsa_poly']:14.3f}")
        ok &= row["anchor"] < min(row["window_attention_poly"], row["gsa_poly"])
    if not ok:
        print("anchoring cost exceeded the full operator cost", file=sys.stderr)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shifteq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit", help="run equivariance suites from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--format", choices=("json", "csv"))
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("demo", help="compare baseline and anchored logits on a shifted input")
    p.add_argument("--variant", default="vit")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--shift", type=int, nargs=2, default=(1, 2), metavar=("DY", "DX"))
    p.add_argument("--image", type=int, nargs=3, default=(3, 32, 32), metavar=("C", "H", "W"))
    p.add_argument("--patch-stride", type=int, default=4)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("bench", help="time anchoring against the anchored operators")
    p.add_argument("--sizes", default="8,16,32")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "seed", 0) is None:
        try:
            args.seed = _env_seed()
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
