"""Shift-equivariance measurement: the feature test, logit metrics and proof suites.

The feature test searches every circular translation ``g'`` of the output
grid for the one closest to ``F(g x)`` and reports that minimum L2 residual,
so "equivariant up to some output shift" is decided exactly rather than
assumed. Outputs without spatial axes (logit vectors) are only compared
against ``g' = identity``, i.e. tested for invariance.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .attention import (
    AttentionParams,
    RelBias,
    abs_pos_embed,
    attention_with_bias,
    gsa,
    gsa_poly,
    window_attention,
    window_attention_poly,
)
from .conv import ConvFilter, DepthwiseFilter, depthwise_conv_circular, patch_embed_poly, strided_conv
from .polyphase import anchor, has_unique_max
from .tensor import Rng, Shift2D, circular_shift, rng_lattice, rng_normal

EXACT_TOL = 1e-10
FLOAT_TOL = 1e-6
NEGATIVE_FLOOR = 1e-3
VARIANCE_REDUCTION = "mean over classes of the per-class variance across shifted copies"


# --------------------------------------------------------------------------
# Data types
# --------------------------------------------------------------------------

@dataclass
class ShiftSampler:
    """Shift generator: every shift in ``range`` or ``count`` uniform draws from it.

    ``range`` holds inclusive ``(lo, hi)`` bounds for ``dy`` then ``dx``.
    Random draws are taken as interleaved ``(dy, dx)`` pairs from one stream,
    so the first ``n`` shifts never depend on ``count``.
    """

    mode: str = "exhaustive"
    range: Tuple[Tuple[int, int], Tuple[int, int]] = ((-5, 5), (-5, 5))
    count: int = 20
    seed: int = 0

    def __post_init__(self):
        self.range = tuple(tuple(int(v) for v in r) for r in self.range)
        if self.mode not in ("exhaustive", "uniform_random"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if len(self.range) != 2 or any(lo > hi for lo, hi in self.range):
            raise ValueError(f"bad shift range {self.range}")
        if self.count < 1:
            raise ValueError("sampler count must be >= 1")

    @classmethod
    def full(cls, h: int, w: int) -> "ShiftSampler":
        return cls("exhaustive", ((0, h - 1), (0, w - 1)))

    def check_bounds(self, h: int, w: int) -> None:
        (ylo, yhi), (xlo, xhi) = self.range
        if ylo < -h or yhi > h or xlo < -w or xhi > w:
            raise ValueError(f"shift range {self.range} exceeds image {h}x{w}")

    def shifts(self) -> List[Shift2D]:
        (ylo, yhi), (xlo, xhi) = self.range
        if self.mode == "exhaustive":
            return [Shift2D(dy, dx) for dy in range(ylo, yhi + 1) for dx in range(xlo, xhi + 1)]
        raw = Rng(self.seed).child("shifts").raw(2 * self.count).reshape(-1, 2)
        dys = (raw[:, 0] % np.uint64(yhi - ylo + 1)).astype(np.int64) + ylo
        dxs = (raw[:, 1] % np.uint64(xhi - xlo + 1)).astype(np.int64) + xlo
        return [Shift2D(int(a), int(b)) for a, b in zip(dys, dxs)]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "range": [list(r) for r in self.range],
                "count": self.count, "seed": self.seed}


@dataclass
class EquivarianceVerdict:
    passed: bool
    residual: float
    matched_shift: Optional[Shift2D]
    op_name: str = ""
    input_seed: Optional[int] = None
    shift: Optional[Shift2D] = None

    def to_dict(self) -> dict:
        return {
            "op_name": self.op_name,
            "input_seed": self.input_seed,
            "shift": None if self.shift is None else list(self.shift),
            "passed": bool(self.passed),
            "residual": float(self.residual),
            "matched_shift": None if self.matched_shift is None else list(self.matched_shift),
        }


@dataclass
class AuditReport:
    suite: str
    tests: List[EquivarianceVerdict] = field(default_factory=list)
    metrics: Dict[str, object] = field(default_factory=dict)
    env: Dict[str, object] = field(default_factory=dict)
    expect_equivariant: bool = True

    @property
    def ok(self) -> bool:
        """Positive suites: every trial passed. Counterexample suites: every trial failed."""
        if self.expect_equivariant:
            return self.metrics.get("trials_passed") == self.metrics.get("trials")
        return self.metrics.get("trials_failed") == self.metrics.get("trials")

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "expect_equivariant": self.expect_equivariant,
            "tests": [t.to_dict() for t in self.tests],
            "metrics": self.metrics,
            "env": self.env,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def csv_rows(self) -> List[dict]:
        rows = []
        for t in self.tests:
            d = t.to_dict()
            rows.append({
                "suite": self.suite,
                "op_name": d["op_name"],
                "input_seed": d["input_seed"],
                "shift_dy": None if t.shift is None else t.shift.dy,
                "shift_dx": None if t.shift is None else t.shift.dx,
                "passed": d["passed"],
                "residual": repr(d["residual"]),
                "matched_dy": None if t.matched_shift is None else t.matched_shift.dy,
                "matched_dx": None if t.matched_shift is None else t.matched_shift.dx,
            })
        return rows


CSV_FIELDS = ["suite", "op_name", "input_seed", "shift_dy", "shift_dx", "passed",
              "residual", "matched_dy", "matched_dx"]


def reports_to_csv(reports: Iterable[AuditReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerows(r.csv_rows())
    return buf.getvalue()


# --------------------------------------------------------------------------
# The feature shift-equivariance test
# --------------------------------------------------------------------------

def _all_rolls(y: np.ndarray) -> np.ndarray:
    """``out[a, b] = circular_shift(y, (a, b))`` for every output-grid shift."""
    h, w = y.shape[-2:]
    ri = (np.arange(h)[None, :] - np.arange(h)[:, None]) % h  # [a, i]
    ci = (np.arange(w)[None, :] - np.arange(w)[:, None]) % w  # [b, j]
    rolled = y[..., ri[:, None, :, None], ci[None, :, None, :]]  # [..., a, b, i, j]
    return np.moveaxis(rolled, (-4, -3), (0, 1))


def best_output_shift(fgx: np.ndarray, fx: np.ndarray, prefer=None):
    """Exhaustive search for ``g'`` minimising ``||fgx - g' fx||``.

    Returns ``(residual, g')``. Among equal minima ``prefer`` wins if it is one
    of them, otherwise the first in row-major order.
    """
    if fgx.shape != fx.shape:
        return float("inf"), None
    h, w = fx.shape[-2:]
    diff = _all_rolls(fx) - fgx[None, None]
    res = np.sqrt((diff * diff).reshape(h, w, -1).sum(axis=-1))
    best = res.min()
    if prefer is not None:
        a, b = int(prefer[0]) % h, int(prefer[1]) % w
        if res[a, b] == best:
            return float(best), Shift2D(a, b)
    flat = int(np.argmin(res))
    return float(best), Shift2D(flat // w, flat % w)


def _residual_at(fgx, fx, g) -> float:
    if fgx.shape != fx.shape:
        return float("inf")
    d = fgx - (circular_shift(fx, g) if fx.ndim >= 2 else fx)
    return float(np.sqrt(np.sum(d * d)))


def _verdict_for(fgx, fx, g, candidates, tol, op_name, input_seed) -> EquivarianceVerdict:
    fgx = np.asarray(fgx, dtype=np.float64)
    fx = np.asarray(fx, dtype=np.float64)
    if fx.ndim < 2 or candidates == "identity":
        res, match = _residual_at(fgx, fx, (0, 0)), Shift2D(0, 0)
    elif candidates == "exhaustive":
        prefer = g if fx.shape[-2:] == fgx.shape[-2:] else None
        res, match = best_output_shift(fgx, fx, prefer)
    else:
        if candidates == "same":
            options = [Shift2D(*g)]
        else:
            options = [Shift2D(*c) for c in candidates(g)]
        scored = [(_residual_at(fgx, fx, c), c) for c in options]
        res, match = min(scored, key=lambda t: t[0])
        h, w = fx.shape[-2:]
        match = match.mod(h, w)
    passed = bool(res <= tol)
    return EquivarianceVerdict(passed, res, match if passed else None, op_name,
                               input_seed, Shift2D(int(g[0]), int(g[1])))


def equivariance_test(F: Callable, x, g, candidates="exhaustive", tol: float = EXACT_TOL,
                      op_name: str = "", input_seed=None, fx=None) -> EquivarianceVerdict:
    """Compare ``F(g x)`` with ``g' F(x)``.

    ``candidates`` is ``"exhaustive"`` (every output-grid shift), ``"same"``
    (``g' = g``), ``"identity"`` (invariance) or a callable mapping ``g`` to
    a list of candidate output shifts. ``fx`` may carry a precomputed ``F(x)``.
    """
    x = np.asarray(x, dtype=np.float64)
    fx = F(x) if fx is None else fx
    fgx = F(circular_shift(x, g))
    return _verdict_for(fgx, fx, g, candidates, tol, op_name, input_seed)


def shift_sweep(F: Callable, x, shifts: Sequence, candidates="exhaustive", tol: float = EXACT_TOL,
                op_name: str = "", input_seed=None) -> List[EquivarianceVerdict]:
    x = np.asarray(x, dtype=np.float64)
    fx = F(x)
    return [equivariance_test(F, x, g, candidates, tol, op_name, input_seed, fx=fx) for g in shifts]


# --------------------------------------------------------------------------
# Model-level metrics
# --------------------------------------------------------------------------

def _shifted_stack(x, shifts) -> np.ndarray:
    return np.stack([circular_shift(x, g) for g in shifts])


def logits_variance(model, x, sampler: Optional[ShiftSampler] = None) -> float:
    """Mean over classes of the variance of the logits across shifted copies of ``x``."""
    sampler = sampler or ShiftSampler()
    L = np.asarray(model.logits(_shifted_stack(x, sampler.shifts())))
    return float(np.mean(np.mean((L - L.mean(axis=0)) ** 2, axis=0)))


def consistency(model, inputs, sampler: ShiftSampler) -> float:
    """Fraction of (input, shift) pairs whose predicted class matches the unshifted one."""
    shifts = sampler.shifts()
    agree = total = 0
    for x in inputs:
        preds = np.asarray(model.predict(_shifted_stack(x, [Shift2D(0, 0)] + shifts)))
        agree += int(np.sum(preds[1:] == preds[0]))
        total += len(shifts)
    return agree / total


def worst_of_n_shift(model, inputs, n: int = 30, range=((-15, 15), (-15, 15)), seed: int = 0):
    """Worst single shift, applied to the whole batch, by agreement with clean predictions.

    Returns ``(worst_shift, worst_fraction)``; ties keep the earliest sample.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    X = np.stack([np.asarray(x, dtype=np.float64) for x in inputs])
    clean = np.asarray(model.predict(X))
    shifts = ShiftSampler("uniform_random", range, n, seed).shifts()
    worst, worst_frac = None, 2.0
    for g in shifts:
        moved = np.stack([circular_shift(x, g) for x in X])
        frac = float(np.mean(np.asarray(model.predict(moved)) == clean))
        if frac < worst_frac:
            worst, worst_frac = g, frac
    return worst, worst_frac


def invariance_audit(model, inputs, shifts, tol: float = 1e-9, seeds=None,
                     name: str = "invariance") -> AuditReport:
    """Logit invariance, consistency and logits variance over a fixed shift list."""
    shifts = [Shift2D(*g) for g in shifts]
    tests, variances = [], []
    agree = 0
    for i, x in enumerate(inputs):
        L = np.asarray(model.logits(_shifted_stack(x, [Shift2D(0, 0)] + shifts)))
        seed = None if seeds is None else seeds[i]
        for g, lg in zip(shifts, L[1:]):
            tests.append(_verdict_for(lg, L[0], g, "identity", tol, name, seed))
        pred = np.argmax(L, axis=1)
        agree += int(np.sum(pred[1:] == pred[0]))
        variances.append(float(np.mean(np.mean((L - L.mean(axis=0)) ** 2, axis=0))))
    n_inputs = len(variances)
    trials_passed = sum(
        all(t.passed for t in tests[i * len(shifts):(i + 1) * len(shifts)]) for i in range(n_inputs)
    )
    metrics = {
        "trials": n_inputs,
        "trials_passed": trials_passed,
        "trials_failed": n_inputs - trials_passed,
        "max_residual": max((t.residual for t in tests), default=0.0),
        "consistency": agree / (n_inputs * len(shifts)),
        "logits_variance": variances,
        "max_logits_variance": max(variances, default=0.0),
        "variance_reduction": VARIANCE_REDUCTION,
    }
    env = {"tolerance": tol, "shifts": [list(g) for g in shifts], "version": __version__,
           "model": model.spec.to_dict() if hasattr(model, "spec") else repr(model)}
    return AuditReport(name, tests, metrics, env)


def feature_audit(model, inputs, shifts, tol: float = 1e-9, seeds=None) -> AuditReport:
    """Exhaustive output-shift test on every intermediate feature map of ``model``."""
    tests = []
    trials_passed = 0
    for i, x in enumerate(inputs):
        seed = None if seeds is None else seeds[i]
        base = model.features(x)
        ok = True
        for g in shifts:
            moved = model.features(circular_shift(x, g))
            for k, (fx, fgx) in enumerate(zip(base, moved)):
                v = _verdict_for(fgx, fx, g, "exhaustive", tol, f"feature[{k}]", seed)
                ok &= v.passed
                tests.append(v)
        trials_passed += ok
    n = len(inputs)
    metrics = {"trials": n, "trials_passed": trials_passed, "trials_failed": n - trials_passed,
               "max_residual": max((t.residual for t in tests), default=0.0)}
    env = {"tolerance": tol, "version": __version__,
           "model": model.spec.to_dict() if hasattr(model, "spec") else repr(model)}
    return AuditReport("feature_equivariance", tests, metrics, env)


# --------------------------------------------------------------------------
# Proof suites
# --------------------------------------------------------------------------

GRID = 8
STRIDE = 2
CHANNELS = 3
WIDTH = 4
LATTICE_BITS = 4
TOKENS = 4
TOKEN_WIDTH = 8


def _unique_max_lattice(r: Rng, shape, s: int) -> np.ndarray:
    while True:
        x = rng_lattice(r, shape, LATTICE_BITS)
        if has_unique_max(x, s):
            return x


def _params(r: Rng, d: int, dk: int) -> AttentionParams:
    scale = 1.0 / np.sqrt(d)
    return AttentionParams(scale * rng_normal(r.child("wq"), (d, dk)),
                           scale * rng_normal(r.child("wk"), (d, dk)),
                           scale * rng_normal(r.child("wv"), (d, dk)))


def _conv(r: Rng, c_out: int, c_in: int, k: int, s: int) -> ConvFilter:
    w = rng_normal(r.child("conv"), (c_out, c_in, k, k)) / np.sqrt(c_in * k * k)
    return ConvFilter(w, s, 0.1 * rng_normal(r.child("bias"), (c_out,)))


def _full_shifts(h: int = GRID, w: int = GRID) -> List[Shift2D]:
    return ShiftSampler.full(h, w).shifts()


def _trial_anchor(r, tol):
    x = _unique_max_lattice(r.child("x"), (CHANNELS, GRID, GRID), STRIDE)
    return [("lemma1", lambda a: anchor(a, STRIDE).anchored, x, _full_shifts(), tol)]


def _trial_patch_embed(r, tol):
    x = _unique_max_lattice(r.child("x"), (CHANNELS, GRID, GRID), STRIDE)
    f = _conv(r, WIDTH, CHANNELS, STRIDE, STRIDE)
    return [("lemma2", lambda a: patch_embed_poly(a, f, STRIDE)[0], x, _full_shifts(), tol)]


def _trial_window(r, tol):
    x = _unique_max_lattice(r.child("x"), (WIDTH, GRID, GRID), STRIDE)
    theta = _params(r, WIDTH, WIDTH)
    return [("lemma3", lambda a: window_attention_poly(a, STRIDE, theta)[0], x, _full_shifts(), tol)]


def _trial_gsa(r, tol):
    x = _unique_max_lattice(r.child("x"), (WIDTH, GRID, GRID), STRIDE)
    theta = _params(r, WIDTH, WIDTH)
    h = _conv(r, WIDTH, WIDTH, STRIDE, STRIDE)
    return [("lemma4", lambda a: gsa_poly(a, STRIDE, h, theta)[0], x, _full_shifts(), tol)]


def _trial_composition(r, tol, index):
    """Two individually equivariant maps and their composite, alternating pairs by trial."""
    theta = _params(r, WIDTH, WIDTH)
    x = _unique_max_lattice(r.child("x"), (WIDTH, GRID, GRID), STRIDE)
    if index % 2 == 0:
        dw = DepthwiseFilter(rng_normal(r.child("dw"), (WIDTH, 3, 3)) / 3.0)
        f = lambda a: window_attention_poly(a, STRIDE, theta, restore=True)[0]
        h = lambda a: depthwise_conv_circular(a, dw)
        names = ("window_attention_poly+restore", "depthwise_conv_circular")
        hx = _unique_max_lattice(r.child("hx"), (WIDTH, GRID, GRID), STRIDE)
    else:
        emb = _conv(r, WIDTH, WIDTH, STRIDE, STRIDE)
        sub = _conv(r.child("sub"), WIDTH, WIDTH, STRIDE, STRIDE)
        f = lambda a: patch_embed_poly(a, emb, STRIDE)[0]
        h = lambda a: gsa_poly(a, STRIDE, sub, theta, restore=True)[0]
        names = ("patch_embed_poly", "gsa_poly+restore")
        hx = _unique_max_lattice(r.child("hx"), (WIDTH, GRID // STRIDE, GRID // STRIDE), STRIDE)
    comp = lambda a: h(f(a))
    return [
        (names[0], f, x, _full_shifts(), tol),
        (names[1], h, hx, _full_shifts(*hx.shape[-2:]), tol),
        (f"{names[1]}∘{names[0]}", comp, x, _full_shifts(), tol),
    ]


def _tokens_as_grid(F):
    # a token matrix [n, d] is viewed as a 1 x n grid with d channels, so a
    # cyclic token shift is the circular shift (0, k)
    return lambda g: F(g[:, 0, :].T).T[:, None, :]


def _trial_relpe(r, tol, circulant: bool):
    X = rng_normal(r.child("x"), (TOKENS, TOKEN_WIDTH))
    theta = _params(r, TOKEN_WIDTH, TOKEN_WIDTH)
    if circulant:
        B = RelBias.circulant(rng_normal(r.child("b"), (TOKENS,)))
        shifts = [Shift2D(0, k) for k in range(TOKENS)]
    else:
        B = RelBias.basis_pair(TOKENS)
        shifts = [Shift2D(0, 1)]
    F = _tokens_as_grid(lambda t: attention_with_bias(t, theta, B, scale=True))
    name = "relpe_circulant" if circulant else "relpe_counterexample"
    return [(name, F, X.T[:, None, :], shifts, tol)]


def _trial_abspe(r, tol):
    x = rng_lattice(r.child("x"), (CHANNELS, GRID, GRID), LATTICE_BITS)
    E = rng_normal(r.child("E"), (CHANNELS, GRID, GRID))
    return [("abs_pos_embed", lambda a: abs_pos_embed(a, E), x, _full_shifts(), tol)]


def _trial_negative(r, tol, op: str):
    x = rng_normal(r.child("x"), (WIDTH, GRID, GRID))
    theta = _params(r, WIDTH, WIDTH)
    f = _conv(r, WIDTH, WIDTH, STRIDE, STRIDE)
    F = {
        "strided_conv": lambda a: strided_conv(a, f, STRIDE),
        "window_attention": lambda a: window_attention(a, STRIDE, theta),
        "gsa": lambda a: gsa(a, STRIDE, f, theta),
    }[op]
    return [(op, F, x, _full_shifts(), tol)]


# name -> (trial builder, expect_equivariant, default tolerance, default trials)
SUITES: Dict[str, Tuple[Callable, bool, float, int]] = {
    "lemma1": (lambda r, tol, i: _trial_anchor(r, tol), True, EXACT_TOL, 50),
    "corollary1": (lambda r, tol, i: _trial_anchor(r, tol), True, EXACT_TOL, 50),
    "lemma2": (lambda r, tol, i: _trial_patch_embed(r, tol), True, EXACT_TOL, 50),
    "lemma3": (lambda r, tol, i: _trial_window(r, tol), True, EXACT_TOL, 50),
    "lemma4": (lambda r, tol, i: _trial_gsa(r, tol), True, EXACT_TOL, 50),
    "composition": (_trial_composition, True, EXACT_TOL, 20),
    "relpe_counterexample": (lambda r, tol, i: _trial_relpe(r, tol, False), False, 1e-12, 50),
    "relpe_circulant": (lambda r, tol, i: _trial_relpe(r, tol, True), True, 1e-12, 50),
    "abspe_counterexample": (lambda r, tol, i: _trial_abspe(r, tol), False, NEGATIVE_FLOOR, 20),
    "negative_strided_conv": (lambda r, tol, i: _trial_negative(r, tol, "strided_conv"), False, NEGATIVE_FLOOR, 20),
    "negative_window_attention": (lambda r, tol, i: _trial_negative(r, tol, "window_attention"), False, NEGATIVE_FLOOR, 20),
    "negative_gsa": (lambda r, tol, i: _trial_negative(r, tol, "gsa"), False, NEGATIVE_FLOOR, 20),
}


def lemma_suite(which: str, trials: Optional[int] = None, seed: int = 0,
                tol: Optional[float] = None) -> AuditReport:
    """Run one exhaustive-shift proof suite on seeded inputs.

    Positive suites pass a trial when every shift matches some output shift
    within ``tol``. Counterexample suites use ``tol`` as the failure floor:
    a trial "fails equivariance" when some shift leaves a residual above it.
    """
    if which not in SUITES:
        raise KeyError(f"unknown suite {which!r}; known: {sorted(SUITES)}")
    build, expect, default_tol, default_trials = SUITES[which]
    tol = default_tol if tol is None else float(tol)
    trials = default_trials if trials is None else int(trials)
    root = Rng(seed).child(which)
    tests: List[EquivarianceVerdict] = []
    passed = failed = 0
    stride_hits = stride_total = 0
    for i in range(trials):
        r = root.child(str(i))
        trial_ok = True
        for name, F, x, shifts, t in build(r, tol, i):
            verdicts = shift_sweep(F, x, shifts, "exhaustive", t, name, r.seed)
            tests.extend(verdicts)
            trial_ok &= all(v.passed for v in verdicts)
            if which == "corollary1":
                for v in verdicts:
                    stride_total += 1
                    m = v.matched_shift
                    if m is not None and m.dy % STRIDE == 0 and m.dx % STRIDE == 0:
                        stride_hits += 1
                trial_ok &= all(
                    v.matched_shift is not None
                    and v.matched_shift.dy % STRIDE == 0
                    and v.matched_shift.dx % STRIDE == 0
                    for v in verdicts
                )
        passed += trial_ok
        failed += not trial_ok
    metrics = {
        "trials": trials,
        "trials_passed": passed,
        "trials_failed": failed,
        "max_residual": max((v.residual for v in tests), default=0.0),
    }
    if not expect:
        per_trial_worst = {}
        for v in tests:
            per_trial_worst[v.input_seed] = max(per_trial_worst.get(v.input_seed, 0.0), v.residual)
        metrics["min_worst_residual"] = min(per_trial_worst.values(), default=0.0)
    if which == "corollary1":
        metrics["matched_multiple_of_stride"] = stride_hits
        metrics["matched_total"] = stride_total
    env = {"seed": seed, "tolerance": tol, "stride": STRIDE, "grid": GRID, "version": __version__}
    return AuditReport(which, tests, metrics, env, expect)
