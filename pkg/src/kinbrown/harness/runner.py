"""Config-driven experiment runner: dispatch, CSV tables, JSON manifest.

Tables are rendered with ``repr`` floats so reruns with the same config and
seed are byte-identical whatever the number of worker threads.  Output is
staged in a scratch directory and moved into place only after every table
has been written; the manifest is written last, atomically.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Optional

import numpy as np

from .. import __version__, gradients, oscillate
from ..catalog import get
from ..kbm import KineticState
from ..malliavin import limits
from ..paths import KL, Schauder, TimeGrid, sample_batch, sample_kl_path
from ..rng import SeedSpec
from ..stats import compare_moments, estimate
from .config import MAX_SEED, ExperimentConfig

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class Outcome:
    """What an operation produced, before anything touches the disk."""
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    checks: list = field(default_factory=list)
    singular: int = 0
    resamples: int = 0

    def table(self, name: str, rows: list, header: Optional[list] = None) -> None:
        if header is None:
            header = list(rows[0]) if rows else []
        self.tables[name] = (header, rows)


@dataclass(frozen=True)
class RunResult:
    manifest: dict
    out_dir: str
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1


# ---------------------------------------------------------------- formatting

def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def render_csv(header: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(r.get(h)) for h in header])
    return buf.getvalue()


def _state(d: dict) -> KineticState:
    return KineticState(d["u"], complex(*d["z"]), d.get("circle", False))


def _steps_for(T: float, per_unit: Optional[int]) -> Optional[int]:
    return None if per_unit is None else max(2, int(math.ceil(per_unit * T)))


def _norm_row(est, key: str) -> dict:
    """sqrt of a second-moment estimate with a delta-method s.e."""
    val = math.sqrt(est.mean)
    se = est.stderr / (2 * val) if val > 0 else math.inf
    return {key: val, f"{key}_stderr": se}


def _fit_row(label: str, fit) -> dict:
    return {"series": label, "slope": fit.slope, "stderr": fit.stderr,
            "ci_lo": fit.ci[0], "ci_hi": fit.ci[1], "intercept": fit.intercept}


def _interval_check(name: str, fit, bounds) -> Check:
    lo, hi = bounds
    return Check(name, fit.within(lo, hi),
                 f"slope {fit.slope:.3f} (95% CI {fit.ci[0]:.3f}, {fit.ci[1]:.3f}) "
                 f"vs ({lo}, {hi})")


# ---------------------------------------------------------------- operations

def op_ibp_check(cfg: ExperimentConfig, mapper) -> Outcome:
    p, ck = cfg.params, cfg.checks
    x = _state(p["x"])
    out = Outcome()
    rows = []
    fd_seed = (cfg.seed + 1) & MAX_SEED
    fs = [get(name) for name in p["functions"]]
    ibps = {T: gradients.grad_ibp_many(fs, x, p["directions"], T, p["paths"], cfg.seed,
                                       _steps_for(T, p["grid"]), mapper)
            for T in p["T"]}
    for name, f in zip(p["functions"], fs):
        for j, v in enumerate(p["directions"]):
            for T in p["T"]:
                steps = _steps_for(T, p["grid"])
                ibp = ibps[T][(name, j)]
                fd = gradients.grad_fd(f, x, v, T, p["eps"], p["paths"], fd_seed,
                                       steps, mapper)
                se = math.hypot(ibp.stderr, fd.stderr)
                diff = ibp.mean - fd.mean
                out.singular += ibp.meta["singular"]
                rows.append({
                    "function": name, "v_R": v[0], "v_re": v[1], "v_im": v[2],
                    "T": T, "ibp": ibp.mean, "ibp_stderr": ibp.stderr,
                    "fd": fd.mean, "fd_stderr": fd.stderr, "fd_eps": fd.meta["eps"],
                    "halving_gap": fd.meta["halving_gap"],
                    "halving_stderr": fd.meta["halving_stderr"],
                    "diff": diff, "combined_stderr": se,
                    "z": diff / se if se > 0 else 0.0,
                    "singular": ibp.meta["singular"], "paths": p["paths"]})
    out.table("ibp_vs_fd", rows)
    if ck:
        k = ck["k_sigma"]
        bad = [r for r in rows if abs(r["diff"]) > k * r["combined_stderr"]]
        worst = max(rows, key=lambda r: abs(r["z"]))
        out.checks.append(Check(
            "ibp_fd_agreement", not bad,
            f"{len(rows) - len(bad)}/{len(rows)} within {k:g} s.e.; "
            f"worst z={worst['z']:.2f} ({worst['function']}, T={worst['T']:g})"))
        biased = [r for r in rows if abs(r["halving_gap"]) > r["combined_stderr"]]
        out.checks.append(Check(
            "fd_halving_bias", not biased,
            f"{len(rows) - len(biased)}/{len(rows)} eps-halving gaps below one "
            "combined s.e."))
    return out


_ENTRIES = [(i, j) for i in range(3) for j in range(i, 3)]


def _entries(G: np.ndarray) -> np.ndarray:
    return np.stack([G[:, i, j] for i, j in _ENTRIES], axis=-1)


def _moment_rows(a, b, labels, orders, resamples, seed, allowance=None) -> list:
    rows = []
    for r in compare_moments(a, b, orders, resamples, seed, labels):
        row = {"entry": r.label, "order": r.order, "moment_T": r.moment_a,
               "moment_limit": r.moment_b, "diff": r.diff, "stderr": r.stderr,
               "z": r.z if math.isfinite(r.z) else 0.0}
        if allowance is not None:
            row["allowance"] = allowance[(r.label, r.order)]
        rows.append(row)
    return rows


def op_matrix_limit(cfg: ExperimentConfig, mapper) -> Outcome:
    p, ck = cfg.params, cfg.checks
    out = Outcome()
    T, refine = p["T"], p["refine"]
    scan = limits.renormalized_scan([T / refine, T], p["paths"], cfg.seed, p["grid"],
                                    dual=False, mapper=mapper)
    hi, lo = scan[T], scan[T / refine]
    lim = limits.limit_batch(p["limit_paths"] or p["paths"], cfg.seed,
                             p["limit_grid"], mapper=mapper)
    labels = [f"C{i}{j}" for i, j in _ENTRIES]
    a, a_lo = _entries(hi.G), _entries(lo.G)
    allowance = {(lab, k): abs(float(np.mean(a[:, c] ** k) - np.mean(a_lo[:, c] ** k)))
                 for c, lab in enumerate(labels) for k in (1, 2)}
    rows = _moment_rows(a, _entries(lim.G), labels, (1, 2), p["resamples"],
                        cfg.seed, allowance)
    for r in rows:
        r["T"] = T
    out.resamples += 2 * p["resamples"]
    out.singular += hi.singular + lo.singular
    out.table("moments", rows, ["T", "entry", "order", "moment_T", "moment_limit",
                                "diff", "stderr", "allowance", "z"])
    inv = limits.inverse_moment_probe(p["inverse_T"], p["inverse_p"],
                                      p["inverse_paths"], cfg.seed, mapper=mapper)
    out.singular += sum(r["singular"] for r in inv if r["p"] == p["inverse_p"][0])
    out.table("inverse_moments", inv)
    if ck:
        k = ck["k_sigma"]
        bad = [r for r in rows if abs(r["diff"]) > k * r["stderr"] + r["allowance"]]
        c11 = next(r for r in rows if r["entry"] == "C11" and r["order"] == 1)
        out.checks.append(Check(
            "matrix_limit_moments", not bad,
            f"{len(rows) - len(bad)}/{len(rows)} moments within {k:g} s.e. + "
            f"allowance; mean C11 = {c11['moment_T']:.4f} (limit "
            f"{c11['moment_limit']:.4f})"))
        e11 = estimate(a[:, labels.index("C11")])
        slack = allowance[("C11", 1)]
        out.checks.append(Check(
            "C11_mean", e11.agrees(1.0, k, slack),
            f"mean C11 = {e11.mean:.4f} +- {e11.stderr:.4f}, allowance {slack:.4f}, "
            "target 1"))
        for q in p["inverse_p"]:
            vals = [r["mean"] for r in inv if r["p"] == q]
            finite = all(math.isfinite(v) for v in vals)
            ratio = max(vals) / min(vals) if finite else math.inf
            out.checks.append(Check(
                f"inverse_moment_p{q:g}", finite and ratio <= ck["max_ratio"],
                f"max/min over T = {ratio:.3g} (limit {ck['max_ratio']:g})"))
        worst = max(r["singular"] / r["paths"] if r["paths"] else 1.0 for r in inv)
        out.checks.append(Check(
            "singular_rate", worst < ck["singular_rate"],
            f"worst singular fraction {worst:.2e} (limit {ck['singular_rate']:g})"))
    return out


def op_dual_limit(cfg: ExperimentConfig, mapper) -> Outcome:
    p, ck = cfg.params, cfg.checks
    out = Outcome()
    scan = limits.renormalized_scan(p["T"], p["paths"], cfg.seed, p["grid"],
                                    mapper=mapper)
    rows, vert, horiz = [], [], []
    for T, s in scan.items():
        row = {"T": T, "steps": s.steps, "paths": s.N.shape[0], "singular": s.singular}
        ev = estimate(s.delta([0.0, 0.0, 1.0]) ** 2)
        eh = estimate(s.delta([1.0, 0.0, 0.0]) ** 2)
        row.update(_norm_row(ev, "vertical"))
        row.update(_norm_row(eh, "horizontal"))
        vert.append(row["vertical"])
        horiz.append(row["horizontal"])
        out.singular += s.singular
        rows.append(row)
    out.table("dual_norms", rows)
    Ts = list(scan)
    fv = gradients.rate_fit(Ts, vert)
    fh = gradients.rate_fit(Ts, horiz)
    out.table("rate_fits", [_fit_row("vertical", fv), _fit_row("horizontal", fh)])
    top = scan[Ts[-1]]
    lim = limits.limit_batch(p["limit_paths"] or p["paths"], cfg.seed,
                             p["limit_grid"], mapper=mapper)
    mrows = _moment_rows(top.N, lim.N, ["N0", "N1", "N2"], (1, 2),
                         p["resamples"], cfg.seed)
    for r in mrows:
        r["T"] = Ts[-1]
    out.resamples += 2 * p["resamples"]
    out.table("N_moments", mrows, ["T", "entry", "order", "moment_T",
                                   "moment_limit", "diff", "stderr", "z"])
    if ck:
        out.checks.append(_interval_check("vertical_slope", fv, ck["vertical_slope"]))
        out.checks.append(_interval_check("horizontal_slope", fh,
                                          ck["horizontal_slope"]))
        k = ck["k_sigma"]
        second = [r for r in mrows if r["order"] == 2]
        bad = [r for r in second if abs(r["diff"]) > k * r["stderr"]]
        out.checks.append(Check(
            "N_second_moments", not bad,
            f"{len(second) - len(bad)}/{len(second)} second moments within "
            f"{k:g} s.e."))
    return out


def op_rates(cfg: ExperimentConfig, mapper) -> Outcome:
    p, ck = cfg.params, cfg.checks
    out = Outcome()
    x = _state(p["x"])
    f = get(p["function"])
    rows, vert, mixed = [], [], []
    for T in p["T"]:
        steps = _steps_for(T, p["grid"])
        gv, wv = gradients.weighted_gradient(f, x, T, p["paths"], cfg.seed,
                                             v=[0.0, 1.0, 0.0], steps=steps,
                                             mapper=mapper)
        gm, wm = gradients.weighted_gradient(f, x, T, p["paths"], cfg.seed,
                                             steps=steps, mapper=mapper)
        row = {"T": T, "function": f.name,
               "grad_vertical": gv.mean, "grad_vertical_stderr": gv.stderr,
               "grad_horizontal": gm.mean, "grad_horizontal_stderr": gm.stderr,
               "lam": gm.meta["lam"]}
        row.update(_norm_row(wv, "weight_vertical"))
        row.update(_norm_row(wm, "weight_mixed"))
        row["singular"] = gv.meta["singular"] + gm.meta["singular"]
        out.singular += row["singular"]
        vert.append(row["weight_vertical"])
        mixed.append(row["weight_mixed"])
        rows.append(row)
    out.table("rates", rows)
    fv = gradients.rate_fit(p["T"], vert)
    fm = gradients.rate_fit(p["T"], mixed)
    out.table("rate_fits", [_fit_row("weight_vertical", fv),
                            _fit_row("weight_mixed", fm)])
    if ck:
        out.checks.append(_interval_check("vertical_slope", fv, ck["vertical_slope"]))
        out.checks.append(_interval_check("mixed_slope", fm, ck["mixed_slope"]))
    return out


_LLN_F = {"sin2": lambda y: np.sin(y) ** 2, "cos": np.cos, "sin": np.sin}
_LLN_G = {"one": lambda s: np.ones_like(s), "s": lambda s: s,
          "sin2pi": lambda s: np.sin(2 * math.pi * s)}


def op_lln(cfg: ExperimentConfig, mapper) -> Outcome:
    p, ck = cfg.params, cfg.checks
    out = Outcome()
    rows = oscillate.lln_probe(_LLN_F[p["f"]], _LLN_G[p["g"]], p["lam"], p["paths"],
                               cfg.seed, p["grid"], mapper=mapper)
    for r in rows:
        r["f"], r["g"] = p["f"], p["g"]
    out.table("lln", rows, ["f", "g", "lam", "steps", "mean", "stderr", "paths", "limit"])
    if ck:
        last = rows[-1]
        if ck["max_deviation"] is not None:
            out.checks.append(Check(
                "lln_deviation", last["mean"] <= ck["max_deviation"],
                f"mean sup deviation {last['mean']:.4g} at lam={last['lam']:g} "
                f"(limit {ck['max_deviation']:g})"))
        if ck["decreasing"]:
            k = ck["k_sigma"]
            ok = all(a["mean"] - b["mean"] > k * math.hypot(a["stderr"], b["stderr"])
                     for a, b in zip(rows, rows[1:]))
            out.checks.append(Check(
                "lln_decreasing", ok,
                "deviations " + ", ".join(f"{r['mean']:.4g}" for r in rows)
                + f" strictly decreasing by > {k:g} s.e."))
    return out


def op_coupling(cfg: ExperimentConfig, mapper) -> Outcome:
    p, ck = cfg.params, cfg.checks
    out = Outcome()
    f = get(p["function"])
    rows, fits, checks = [], [], []
    for mode in p["modes"]:
        recs = gradients.coupling_experiment(
            f, p["u0"], complex(*p["z"]), p["T"], p["paths"], cfg.seed, mode,
            p["center"], p["grid"], mapper=mapper)
        for r in recs:
            rows.append({
                "mode": mode, "T": r.T, "u0": r.u0,
                "difference": r.difference.mean,
                "difference_stderr": r.difference.stderr,
                "statistic": r.statistic,
                "survival": r.survival.mean, "survival_stderr": r.survival.stderr,
                "survival_exact": r.survival_exact,
                "reflection_envelope": r.reflection_envelope,
                "A": r.A.mean, "A_stderr": r.A.stderr, "A_bound": r.A_bound,
                "A_ok": r.A_ok, "exit_pi": r.exit_pi, "paths": p["paths"]})
        fit = None
        if len(recs) >= 4 and all(r.statistic > 0 for r in recs):
            fit = gradients.rate_fit([r.T for r in recs], [r.statistic for r in recs])
            fits.append(_fit_row(mode, fit))
        if ck:
            k = ck["k_sigma"]
            if mode == "line":
                bad = [r for r in recs if not r.survival.agrees(r.survival_exact, k)]
                checks.append(Check(
                    "hitting_law", not bad,
                    f"{len(recs) - len(bad)}/{len(recs)} survival probabilities "
                    f"within {k:g} s.e. of 2 Phi(u0/sqrt(T/2)) - 1"))
            else:
                checks.append(Check(
                    "circle_rate", fit is not None and fit.slope <= ck["max_slope"],
                    "no fit" if fit is None else
                    f"slope {fit.slope:.3f} (95% CI {fit.ci[0]:.3f}, {fit.ci[1]:.3f})"
                    f" vs <= {ck['max_slope']:g}"))
            viol = [r for r in recs if not r.A_ok]
            checks.append(Check(
                f"bound_A_{mode}", not viol,
                f"{len(recs) - len(viol)}/{len(recs)} horizons respect "
                "|A| <= 2||f|| u0 / sqrt(pi T)"))
    out.table("coupling", rows)
    out.table("rate_fits", fits, ["series", "slope", "stderr", "ci_lo", "ci_hi",
                                  "intercept"])
    out.checks.extend(checks)
    return out


def op_tails(cfg: ExperimentConfig, mapper) -> Outcome:
    p, ck = cfg.params, cfg.checks
    out = Outcome()
    rows, slopes = [], []
    for t in p["t"]:
        prof = oscillate.subgaussian_tail_probe(
            p["theta"], t, p["paths"], p["thresholds"], cfg.seed,
            steps_per_unit=p["grid"], mapper=mapper)
        for x, pr, se in zip(prof.thresholds, prof.prob, prof.stderr):
            rows.append({"t": t, "theta": p["theta"], "threshold": float(x),
                         "prob": float(pr), "stderr": float(se), "paths": prof.paths})
        slopes.append({"t": t, "slope": prof.slope})
    out.table("tails", rows)
    out.table("tail_slopes", slopes)
    if ck:
        s = [r["slope"] for r in slopes]
        neg = all(math.isfinite(v) and v < 0 for v in s)
        ratio = max(s) / min(s) if neg else math.inf
        ratio = max(ratio, 1 / ratio) if neg else ratio
        out.checks.append(Check(
            "tail_slopes", neg and ratio <= ck["max_ratio"],
            "slopes " + ", ".join(f"{v:.3f}" for v in s)
            + f"; spread {ratio:.2f}x (limit {ck['max_ratio']:g}x)"))
    return out


def op_negmom(cfg: ExperimentConfig, mapper) -> Outcome:
    p, ck = cfg.params, cfg.checks
    out = Outcome()
    alpha, t = p["alpha"], p["t"]
    rows = oscillate.negative_moment_monotonicity(alpha, t, p["a"])
    exact = oscillate.gaussian_negative_moment(alpha, t)
    for r in rows:
        r["alpha"], r["t"] = alpha, t
        r["closed_form_a0"] = exact
    out.table("negative_moments", rows,
              ["alpha", "t", "a", "value", "abserr", "closed_form_a0", "monotone"])
    if ck:
        at0 = oscillate.negative_moment(alpha, t, 0.0)[0]
        gap = abs(at0 - exact)
        out.checks.append(Check("closed_form", gap <= ck["closed_form_tol"],
                                f"|E|B_t|^-alpha - closed form| = {gap:.2e}"))
        out.checks.append(Check("monotone", bool(rows and rows[0]["monotone"]),
                                "nonincreasing in |a|"))
    return out


def op_paths_debug(cfg: ExperimentConfig, mapper) -> Outcome:
    p = cfg.params
    out = Outcome()
    grid = TimeGrid(p["T"], p["grid"])
    if p["basis"] == "increments":
        vals = sample_batch(grid, cfg.seed, range(p["paths"])).values
    else:
        basis = KL if p["basis"] == "kl" else Schauder()
        vals = np.stack([sample_kl_path(grid, p["K"], SeedSpec(cfg.seed, i), basis).values
                         for i in range(p["paths"])])
    cols = ["B"] if p["paths"] == 1 else [f"B{i}" for i in range(p["paths"])]
    rows = [dict(t=float(t), **{c: float(vals[j, i]) for j, c in enumerate(cols)})
            for i, t in enumerate(grid.nodes)]
    out.table("paths", rows, ["t"] + cols)
    return out


OPERATIONS: dict = {
    "ibp-check": op_ibp_check,
    "matrix-limit": op_matrix_limit,
    "dual-limit": op_dual_limit,
    "rates": op_rates,
    "lln": op_lln,
    "coupling": op_coupling,
    "tails": op_tails,
    "negmom": op_negmom,
    "paths-debug": op_paths_debug,
}


# ---------------------------------------------------------------- persistence

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_atomic(path: str, text: str) -> None:
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None,
                   threads: Optional[int] = None) -> RunResult:
    """Run one configured operation and persist tables plus manifest."""
    out_dir = out_dir or cfg.output or os.path.join("runs", cfg.experiment)
    threads = threads or cfg.threads
    created = not os.path.exists(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    staging = tempfile.mkdtemp(dir=out_dir, prefix=".staging-")
    started, t0 = _now(), time.perf_counter()
    try:
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                outcome = OPERATIONS[cfg.operation](cfg, pool.map)
        else:
            outcome = OPERATIONS[cfg.operation](cfg, map)
        files = {}
        for name, (header, rows) in outcome.tables.items():
            fname = f"{name}.csv"
            with open(os.path.join(staging, fname), "w", encoding="utf-8",
                      newline="") as fh:
                fh.write(render_csv(header, rows))
            files[name] = {"file": fname, "rows": len(rows)}
        for meta in files.values():
            os.replace(os.path.join(staging, meta["file"]),
                       os.path.join(out_dir, meta["file"]))
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        if created and not os.listdir(out_dir):
            os.rmdir(out_dir)
        raise
    shutil.rmtree(staging, ignore_errors=True)
    manifest = {
        "experiment": cfg.experiment,
        "operation": cfg.operation,
        "config_hash": cfg.digest(),
        "config": json.loads(cfg.serialized()),
        "artifact_version": __version__,
        "seed": cfg.seed,
        "threads": threads,
        "started": started,
        "finished": _now(),
        "wall_seconds": round(time.perf_counter() - t0, 3),
        "tables": files,
        "counters": {"singular": outcome.singular, "resamples": outcome.resamples},
        "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail}
                   for c in outcome.checks],
        "passed": all(c.passed for c in outcome.checks),
    }
    _write_atomic(os.path.join(out_dir, MANIFEST),
                  json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return RunResult(manifest, out_dir, list(outcome.checks))
