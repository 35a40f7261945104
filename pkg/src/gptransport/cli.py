"""Experiment runner: validated JSON configs in, reproducible artifacts out.

Every run writes a manifest (resolved config, seed, content hashes) that can
itself be re-run to reproduce byte-identical data files, a summary with the
pass/fail status of the run's invariant checks, and CSV/NDJSON data.  Unknown
config keys are rejected with the offending field path.

Exit codes: 0 ok, 1 a run-level check failed, 2 invalid config, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import dissipation, ensemble, moments, twoscale
from .kernels import (
    BrownianMotion,
    DampedFractionalKernel,
    FractionalBrownianMotion,
    TabulatedGammaKernel,
)
from .sampling import dump_paths, sample_paths
from .spectral import GaussianBump, SpectralProblem

EXPERIMENTS = ("veps", "mean", "covariance", "asymptotics", "ensemble", "twoscale")


class ConfigError(ValueError):
    """Invalid configuration; the message carries the field path."""


def _fail(path, msg):
    raise ConfigError(f"{path}: {msg}")


def _expect_keys(block, path, required, optional=()):
    if not isinstance(block, dict):
        _fail(path, "must be an object")
    for key in block:
        if key not in required and key not in optional:
            _fail(f"{path}.{key}", "unknown key")
    for key in required:
        if key not in block:
            _fail(f"{path}.{key}", "missing required key")


def _number(block, path, key, default=None, minimum=None, strict_min=False):
    if key not in block:
        if default is None:
            _fail(f"{path}.{key}", "missing required key")
        return default
    val = block[key]
    if not isinstance(val, (int, float)) or isinstance(val, bool):
        _fail(f"{path}.{key}", f"must be a number, got {val!r}")
    if minimum is not None and (val <= minimum if strict_min else val < minimum):
        _fail(f"{path}.{key}", f"must be {'>' if strict_min else '>='} {minimum}")
    return float(val)


def build_kernel(block, path="kernel"):
    _expect_keys(block, path, ("variant",), ("hurst", "lam", "alpha", "grid", "values"))
    variant = block["variant"]
    if variant == "bm":
        return BrownianMotion()
    if variant == "fbm":
        return FractionalBrownianMotion(_number(block, path, "hurst"))
    if variant == "damped_fbm":
        return DampedFractionalKernel(
            hurst=_number(block, path, "hurst"),
            lam=_number(block, path, "lam", minimum=0.0, strict_min=True),
            alpha=_number(block, path, "alpha", default=1.0, minimum=0.0, strict_min=True),
        )
    if variant == "tabulated":
        if "grid" not in block or "values" not in block:
            _fail(path, "tabulated kernel needs grid and values arrays")
        return TabulatedGammaKernel(np.asarray(block["grid"], float), np.asarray(block["values"], float))
    _fail(f"{path}.variant", f"unknown variant {variant!r} (bm|fbm|damped_fbm|tabulated)")


def build_problem(block, path="problem"):
    _expect_keys(block, path, (), ("kappa", "sigmas", "theta0_a", "xi_max", "dxi"))
    sigmas = block.get("sigmas", [[1.0, 0.0]])
    return SpectralProblem(
        kappa=_number(block, path, "kappa", default=0.0, minimum=0.0),
        sigmas=np.asarray(sigmas, dtype=float),
        theta0=GaussianBump(_number(block, path, "theta0_a", default=1.0, minimum=0.0, strict_min=True)),
        xi_max=_number(block, path, "xi_max", default=8.0, minimum=0.0, strict_min=True),
        dxi=_number(block, path, "dxi", default=1.0 / 16.0, minimum=0.0, strict_min=True),
    )


def _t_grid(block, path="t_grid"):
    if isinstance(block, list):
        grid = np.asarray(block, dtype=float)
    else:
        _expect_keys(block, path, ("t_max", "n"))
        grid = np.linspace(0.0, float(block["t_max"]), int(block["n"]))
    if grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        _fail(path, "grid must increase strictly from 0")
    return grid


_TOP_KEYS = {
    "veps": (("experiment", "seed", "kernel", "epsilons", "t_grid"), ("tolerances",)),
    "mean": (("experiment", "seed", "kernel", "problem", "epsilons", "t_grid", "xis"), ("tolerances",)),
    "covariance": (("experiment", "seed", "kernel", "problem", "t_grid", "pairs"), ("tolerances",)),
    "asymptotics": (("experiment", "seed", "problem", "hursts", "t_seq"), ("tolerances",)),
    "ensemble": (
        ("experiment", "seed", "kernel", "problem", "epsilon", "replicas", "times", "xis"),
        ("pairs", "workers", "chunk_size", "emit_paths", "dt", "tolerances"),
    ),
    "twoscale": (("experiment", "seed", "twoscale"), ("tolerances",)),
}


def validate_config(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config: must be a JSON object")
    if "experiment" not in raw:
        _fail("experiment", "missing required key")
    exp = raw["experiment"]
    if exp not in EXPERIMENTS:
        _fail("experiment", f"unknown experiment {exp!r}; one of {EXPERIMENTS}")
    required, optional = _TOP_KEYS[exp]
    _expect_keys(raw, "config", required, optional)
    if not isinstance(raw.get("seed"), int) or isinstance(raw.get("seed"), bool) or raw["seed"] < 0:
        _fail("seed", "must be a nonnegative integer")
    if "kernel" in raw:
        build_kernel(raw["kernel"])
    if "problem" in raw:
        build_problem(raw["problem"])
    if "t_grid" in raw:
        _t_grid(raw["t_grid"])
    if "twoscale" in raw:
        _validate_twoscale(raw["twoscale"])
    return raw


def _validate_twoscale(block, path="twoscale"):
    required = ("n_grid", "kappa", "kappa_t", "shells", "dt", "t_final", "epsilon", "kernel", "replicas")
    optional = ("sigmas", "theta0_terms", "phi_terms", "budget_replicas", "cfl_limit")
    _expect_keys(block, path, required, optional)
    build_kernel(block["kernel"], f"{path}.kernel")
    if not isinstance(block["shells"], list) or not block["shells"]:
        _fail(f"{path}.shells", "must be a nonempty list of scale indices")


def _terms(raw, default):
    if raw is None:
        return default
    return tuple((float(a), int(m1), int(m2), str(kind)) for a, m1, m2, kind in raw)


# ---------------------------------------------------------------------------
# output helpers


def _fmt(x):
    if isinstance(x, (np.floating, float)):
        return repr(float(x))
    if isinstance(x, (np.integer, int)):
        return str(int(x))
    return str(x)


def write_csv(path: Path, header, rows, units=""):
    with open(path, "w", newline="") as fh:
        if units:
            fh.write(f"# units: {units}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_ndjson(path: Path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def git_blob_sha1(data: bytes) -> str:
    h = hashlib.sha1()
    h.update(b"blob %d\x00" % len(data))
    h.update(data)
    return h.hexdigest()


def _check(name, passed, value, tolerance=None):
    entry = {"name": name, "passed": bool(passed), "value": value}
    if tolerance is not None:
        entry["tolerance"] = tolerance
    return entry


# ---------------------------------------------------------------------------
# experiments


def _run_veps(cfg, out: Path):
    kernel = build_kernel(cfg["kernel"])
    grid = _t_grid(cfg["t_grid"])
    checks, files, metrics = [], [], {}
    sups = []
    for eps in cfg["epsilons"]:
        curve = dissipation.dissipation_curve(kernel, float(eps), grid)
        gam = kernel.gamma(grid)
        resid = np.abs(curve.cumulative - 0.5 * gam)
        rows = zip(grid, curve.density, curve.cumulative, 0.5 * gam, resid)
        name = f"veps_eps{eps}.csv"
        write_csv(out / name, ["t", "vdot", "v", "gamma_half", "residual"],
                  rows, units="t in drive time units; others dimensionless")
        files.append(name)
        sups.append(float(resid.max()))
        metrics[f"sup_residual_eps{eps}"] = sups[-1]
        metrics[f"sup_residual_full_gamma_eps{eps}"] = float(np.abs(curve.cumulative - gam).max())
        if isinstance(kernel, BrownianMotion):
            plateau = grid >= 2.0 * eps
            gap = float(np.abs(curve.density[plateau] - 0.5).max()) if plateau.any() else 0.0
            checks.append(_check(f"bm_plateau_eps{eps}", gap <= 1e-10, gap, 1e-10))
    if len(sups) > 1:
        mono = all(a > b for a, b in zip(sups, sups[1:]))
        checks.append(_check("sup_residual_monotone", mono, sups))
    return checks, files, metrics


def _run_mean(cfg, out: Path):
    kernel = build_kernel(cfg["kernel"])
    problem = build_problem(cfg["problem"])
    grid = _t_grid(cfg["t_grid"])
    tol = float(cfg.get("tolerances", {}).get("ode_vs_closed", 1e-10))
    checks, files, metrics = [], [], {}
    rows = []
    gaps = []
    for eps in cfg["epsilons"]:
        curve = dissipation.dissipation_curve(kernel, float(eps), grid)
        worst = 0.0
        for xi in cfg["xis"]:
            xi = np.asarray(xi, dtype=float)
            traj = moments.mean_mode_mollified(problem, kernel, float(eps), grid, xi, curve=curve, agree_tol=tol)
            closed = np.asarray(moments.mean_mode(problem, kernel, grid, xi))
            for t, ode_v, cl in zip(grid, traj, closed):
                rows.append([xi[0], xi[1], eps, t, ode_v.real, ode_v.imag, cl.real, cl.imag])
            worst = max(worst, float(np.abs(traj[-1] - closed[-1])))
        gaps.append(worst)
        metrics[f"final_gap_eps{eps}"] = worst
    write_csv(out / "mean_modes.csv",
              ["xi1", "xi2", "epsilon", "t", "re_window", "im_window", "re_limit", "im_limit"],
              rows, units="frequencies per paper lattice; values share theta0_hat units")
    files.append("mean_modes.csv")
    if len(gaps) > 1:
        checks.append(_check("window_to_limit_monotone", all(a > b for a, b in zip(gaps, gaps[1:])), gaps))
    return checks, files, metrics


def _run_covariance(cfg, out: Path):
    kernel = build_kernel(cfg["kernel"])
    problem = build_problem(cfg["problem"])
    grid = _t_grid(cfg["t_grid"])
    tol = float(cfg.get("tolerances", {}).get("ode_vs_closed", 1e-6))
    rows, checks, files = [], [], []
    worst = 0.0
    for xi, eta in cfg["pairs"]:
        xi, eta = np.asarray(xi, float), np.asarray(eta, float)
        ode_traj = moments.covariance_mode_ode(problem, kernel, grid, xi, eta)
        closed = np.asarray(moments.covariance_mode(problem, kernel, grid, xi, eta))
        err = float(np.abs(ode_traj - closed).max())
        worst = max(worst, err)
        rows.append([xi[0], xi[1], eta[0], eta[1], ode_traj[-1].real, ode_traj[-1].imag,
                     closed[-1].real, closed[-1].imag, err])
    write_csv(out / "covariance_pairs.csv",
              ["xi1", "xi2", "eta1", "eta2", "re_quadrature", "im_quadrature", "re_closed", "im_closed", "max_abs_err"],
              rows, units="frequencies per lattice; covariances share |theta0_hat|^2 units")
    files.append("covariance_pairs.csv")
    checks.append(_check("ode_matches_closed", worst <= tol, worst, tol))
    return checks, files, {"max_abs_err": worst}


def _run_asymptotics(cfg, out: Path):
    problem = build_problem(cfg["problem"])
    t_seq = np.asarray(cfg["t_seq"], dtype=float)
    tol = float(cfg.get("tolerances", {}).get("slope", 0.05))
    rows, checks, files = [], [], []
    for hurst in cfg["hursts"]:
        kernel = BrownianMotion() if hurst == 0.5 else FractionalBrownianMotion(float(hurst))
        sm, ssd = moments.smalltime_exponents(problem, kernel, t_seq)
        ok = abs(sm - 2 * hurst) <= tol and abs(ssd - hurst) <= tol
        rows.append([hurst, sm, ssd, 2 * hurst, hurst, tol])
        checks.append(_check(f"slopes_h{hurst}", ok, [sm, ssd], tol))
    write_csv(out / "exponents.csv",
              ["hurst", "slope_mean", "slope_sd", "target_mean", "target_sd", "ci"],
              rows, units="slopes of log-norm versus log-time fits, dimensionless")
    files.append("exponents.csv")
    return checks, files, {"rows": len(rows)}


def _run_ensemble(cfg, out: Path, emit_paths=False):
    kernel = build_kernel(cfg["kernel"])
    problem = build_problem(cfg["problem"])
    eps = float(cfg["epsilon"])
    times = np.asarray(cfg["times"], dtype=float)
    xis = np.asarray(cfg["xis"], dtype=float)
    pairs = tuple(tuple(p) for p in cfg.get("pairs", ()))
    stats = ensemble.run_ensemble(
        problem, kernel, eps, int(cfg["replicas"]), int(cfg["seed"]), times, xis,
        pairs=pairs, dt=cfg.get("dt"), chunk_size=int(cfg.get("chunk_size", 2048)),
        workers=int(cfg.get("workers", 1)),
    )
    rows, records, checks = [], [], []
    worst_z = 0.0
    for i, xi in enumerate(xis):
        for j, t in enumerate(times):
            closed = moments.mean_mode(problem, kernel, float(t), xi)
            se = stats.se_mean[i, j]
            gap = abs(stats.mean[i, j] - closed)
            z = gap / se if se > 0 else 0.0
            worst_z = max(worst_z, z)
            rows.append([xi[0], xi[1], t, stats.mean[i, j].real, stats.mean[i, j].imag,
                         stats.variance[i, j], se, closed.real, closed.imag, z])
            records.append({
                "kind": "mode_mean", "xi": [float(xi[0]), float(xi[1])], "t": float(t),
                "n": stats.n_replicas, "re": stats.mean[i, j].real, "im": stats.mean[i, j].imag,
                "var": float(stats.variance[i, j]), "se": float(se), "z": float(z),
            })
    write_csv(out / "ensemble_summary.csv",
              ["xi1", "xi2", "t", "re_mean", "im_mean", "var", "se", "re_closed", "im_closed", "z_score"],
              rows, units="mode values share theta0_hat units; z dimensionless")
    write_ndjson(out / "ensemble_stats.ndjson", records)
    files = ["ensemble_summary.csv", "ensemble_stats.ndjson"]
    checks.append(_check("mean_within_3se", worst_z <= 3.0, worst_z, 3.0))
    if emit_paths:
        n_steps = int(np.ceil((times.max() + eps) / (cfg.get("dt") or eps) - 1e-9))
        with open(out / "paths.ndjson", "w") as fh:
            for r in range(int(cfg["replicas"])):
                path = sample_paths(kernel, cfg.get("dt") or eps, n_steps,
                                    problem.sigmas.shape[0], int(cfg["seed"]), replica=r)
                dump_paths(path, fh)
        files.append("paths.ndjson")
    return checks, files, {"worst_z": float(worst_z)}


def _run_twoscale(cfg, out: Path):
    block = cfg["twoscale"]
    kernel = build_kernel(block["kernel"], "twoscale.kernel")
    theta0_terms = _terms(block.get("theta0_terms"), ((1.0, 1, 0, "cos"), (0.5, 0, 1, "sin")))
    phi_terms = _terms(block.get("phi_terms"), ((1.0, 1, 0, "cos"),))
    n_grid = int(block["n_grid"])
    rows, checks, files, records = [], [], [], []
    lhss = []
    for shell in block["shells"]:
        family = twoscale.SmallScaleFamily.build(int(shell), float(block["kappa_t"]), max_abs=n_grid // 2 - 1)
        problem = twoscale.TorusProblem(
            n_grid=n_grid,
            kappa=float(block["kappa"]),
            kappa_t=float(block["kappa_t"]),
            family=family,
            sigmas=np.asarray(block.get("sigmas", [[0.5, 0.0]]), dtype=float),
            kernel=kernel,
            epsilon=float(block["epsilon"]),
            dt=float(block["dt"]),
            t_final=float(block["t_final"]),
            theta0_terms=theta0_terms,
            cfl_limit=float(block.get("cfl_limit", 1.0)),
        )
        res = twoscale.theorem_bound_check(
            problem, phi_terms, int(block["replicas"]), w_seed=int(cfg["seed"]) + shell,
            drive_seed=int(cfg["seed"]), budget_replicas=int(block.get("budget_replicas", 8)),
        )
        rows.append([shell, family.n_wavevectors, res.q_norm, res.lhs, res.lhs_se, res.rhs,
                     res.budget_dt, res.budget_dx, res.lhs_alt, res.passed])
        for i, ob in enumerate(res.observables):
            records.append({"kind": "observable", "shell": shell, "replica": i, "value": float(ob)})
        checks.append(_check(f"bound_shell{shell}", res.passed, res.lhs, res.rhs + 3 * res.lhs_se + res.budget))
        lhss.append(res.lhs)
    if len(lhss) > 1:
        dec = all(a / b >= 1.5 for a, b in zip(lhss, lhss[1:]))
        checks.append(_check("lhs_decreasing", dec, lhss))
    write_csv(out / "bound_table.csv",
              ["shell", "n_wavevectors", "q_norm", "lhs", "lhs_se", "rhs", "budget_dt", "budget_dx",
               "lhs_half_corrector", "passed"],
              rows, units="lhs/rhs in squared observable units")
    write_ndjson(out / "twoscale_observables.ndjson", records)
    files = ["bound_table.csv", "twoscale_observables.ndjson"]
    return checks, files, {"lhs": lhss}


_RUNNERS = {
    "veps": _run_veps,
    "mean": _run_mean,
    "covariance": _run_covariance,
    "asymptotics": _run_asymptotics,
    "twoscale": _run_twoscale,
}


def run(config_path, out_dir, seed=None, workers=None, emit_paths=False) -> int:
    """Execute one experiment; returns the process exit code."""
    try:
        raw = json.loads(Path(config_path).read_text())
        if "config" in raw and "experiment" not in raw:
            raw = raw["config"]  # manifests are accepted as configs
        if seed is not None:
            raw["seed"] = seed
        if workers is not None and raw.get("experiment") == "ensemble":
            raw["workers"] = workers
        cfg = validate_config(raw)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if cfg["experiment"] == "ensemble":
            checks, files, metrics = _run_ensemble(cfg, out, emit_paths=emit_paths or cfg.get("emit_paths", False))
        else:
            checks, files, metrics = _RUNNERS[cfg["experiment"]](cfg, out)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    ok = all(c["passed"] for c in checks)
    summary = {"experiment": cfg["experiment"], "ok": ok, "checks": checks, "metrics": metrics}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    outputs = {}
    for name in sorted(files + ["summary.json"]):
        data = (out / name).read_bytes()
        outputs[name] = {"git_blob_sha1": git_blob_sha1(data), "bytes": len(data)}
    combined = git_blob_sha1(json.dumps(outputs, sort_keys=True).encode())
    manifest = {"config": cfg, "seed": cfg["seed"], "outputs": outputs, "content_hash": combined}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return 0 if ok else 1


def _set_dotted(cfg, key, value):
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"{key}: no such config path")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"{key}: no such config path")
    node[parts[-1]] = value


def sweep(config_path, out_dir, key, values, seed=None, workers=None) -> int:
    """Run the experiment once per value of a dotted config key; combine metrics."""
    worst = 0
    rows = []
    for value in values:
        raw = json.loads(Path(config_path).read_text())
        if "config" in raw and "experiment" not in raw:
            raw = raw["config"]
        try:
            _set_dotted(raw, key, value)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        sub = Path(out_dir) / f"{key.replace('.', '_')}={value}"
        sub.mkdir(parents=True, exist_ok=True)
        tmp = sub / "_config.json"
        tmp.write_text(json.dumps(raw, sort_keys=True))
        code = run(tmp, sub, seed=seed, workers=workers)
        tmp.unlink()
        worst = max(worst, code)
        if code in (0, 1):
            summary = json.loads((sub / "summary.json").read_text())
            for mk, mv in sorted(summary["metrics"].items()):
                rows.append([value, mk, json.dumps(mv)])
            rows.append([value, "ok", json.dumps(summary["ok"])])
    write_csv(Path(out_dir) / "sweep_combined.csv", ["value", "metric", "result"], rows,
              units="metric-dependent; see per-run summaries")
    return worst


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gptransport", description=__doc__)
    parser.add_argument("--config", required=True, help="JSON config or manifest path")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--workers", type=int, default=None, help="worker pool size")
    parser.add_argument("--sweep", default=None, metavar="KEY=V1,V2",
                        help="run once per value of a dotted config key")
    parser.add_argument("--emit-paths", action="store_true", help="dump sampled paths as NDJSON")
    args = parser.parse_args(argv)
    if args.sweep:
        if "=" not in args.sweep:
            print("config error: --sweep expects KEY=V1,V2,...", file=sys.stderr)
            return 2
        key, _, raw_vals = args.sweep.partition("=")
        values = [json.loads(v) for v in raw_vals.split(",")]
        return sweep(args.config, args.out, key, values, seed=args.seed, workers=args.workers)
    return run(args.config, args.out, seed=args.seed, workers=args.workers, emit_paths=args.emit_paths)


if __name__ == "__main__":
    sys.exit(main())
