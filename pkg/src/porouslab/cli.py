"""Command-line front end.

Every subcommand writes CSV data, a JSON report with per-check verdicts,
the effective configuration (``config.txt``) and ``manifest.json`` into
``--out``. Exit status is 0 iff every verdict is "pass".
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy.stats

from porouslab import __version__, control, dissipative, kolmogorov, sde, spectral
from porouslab._validation import ConfigError, ConventionMismatchError, SolverError
from porouslab.config import RunConfig, load_config, parse_config_text

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_CONVENTION = 3
EXIT_MISSING_SAMPLES = 4
EXIT_SOLVER = 5

EPILOG = """exit codes:
  0  every verdict passed
  1  at least one verdict failed (named in the JSON report and on stderr)
  2  invalid configuration or usage
  3  sample set noise_convention differs from the configured one
  4  sample set file missing or unreadable
  5  nonlinear solver failure
"""


class MissingSamples(RuntimeError):
    pass


# -- deterministic writers ----------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    return obj


def write_json(path: Path, obj):
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return v


def write_csv(path: Path, header, rows, comments=None):
    buf = io.StringIO()
    for line in comments or ():
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    path.write_text(buf.getvalue(), newline="")


def _verdict(ok) -> str:
    return "pass" if ok else "fail"


# -- sample-set handling --------------------------------------------------------

def _samples_for(rc: RunConfig, key: str, out: Path):
    """Load the sample set named by ``key`` or simulate it inline."""
    path = rc[key]
    cfg = rc.sampler()
    if path:
        p = Path(path)
        if not p.is_file():
            raise MissingSamples(f"sample set not found: {path}")
        try:
            steps, X, header = sde.read_samples(p)
        except (OSError, ValueError, StopIteration) as err:
            raise MissingSamples(f"cannot read sample set {path}: {err}") from None
        conv = header.get("sde.noise_convention")
        if conv is None:
            raise MissingSamples(f"sample set {path} has no sde.noise_convention header")
        if conv != cfg.noise_convention:
            raise ConventionMismatchError(
                f"sample set {path} uses noise_convention={conv}, config has {cfg.noise_convention}")
        if X.shape[1] != cfg.n_modes:
            raise ConfigError(f"sample set has {X.shape[1]} modes, config has sde.n_modes={cfg.n_modes}")
        return X, {"source": str(path)}
    result = sde.sample_invariant(rc.psi(), cfg, rc.resolvent())
    return result.samples, {"source": "inline"}


# -- subcommands ----------------------------------------------------------------

def cmd_check_operators(rc: RunConfig, out: Path) -> dict:
    psi = rc.psi()
    domain = rc.domain()
    rcfg = rc.resolvent()
    n = rc["battery.n_modes"]
    rep = dissipative.property_battery(psi, rc["battery.seed"], rc["battery.trials"], domain, n, rcfg)
    verdicts = {f"battery.{k}": _verdict(k not in rep.failures) for k in sorted(rep.worst)}
    # spectral invariants on seeded fields
    rng = sde.make_rng(rc["battery.seed"], 0)
    L = domain.length
    g = rng.standard_normal((100, domain.grid_points))
    coef = spectral.dst_forward(g, domain, domain.grid_points, fast=True)
    parseval = float(np.max(np.abs(np.sqrt(np.sum(coef**2, axis=1))
                                   - np.sqrt(domain.spacing * np.sum(g**2, axis=1)))))
    x, y = rng.standard_normal((2, 100, n))
    mu = spectral.eigenvalues(n, L)
    lap = float(np.max(np.abs(spectral.inner(-mu * x, y, "Hminus1", L) + spectral.inner(x, y, "L2", L))))
    cov = rc.covariance()
    tail_gap = cov.K() - cov.partial_K(1000)
    spec_rows = [("parseval_max_error", parseval, 1e-12), ("laplacian_identity_max_error", lap, 1e-12),
                 ("K_tail_gap_minus_bound", tail_gap - cov.K_tail_bound(1000), 0.0)]
    for name, value, tol in spec_rows:
        verdicts[f"spectral.{name}"] = _verdict(value <= tol)
    moreau = dissipative.moreau_battery(psi, rc["battery.seed"], rc["battery.moreau_fields"], domain, n,
                                        cfg=rcfg) if rc["battery.moreau_fields"] > 0 else None
    if moreau is not None:
        verdicts["moreau.gradient"] = _verdict(moreau["worst_rel_err"] <= 1e-5 and moreau["sign"] != "mixed")
        verdicts["moreau.chain"] = _verdict(moreau["chain_ok"])
    rows = [(k, rep.worst[k], _verdict(k not in rep.failures)) for k in sorted(rep.worst)]
    rows += [(f"spectral.{n_}", v, _verdict(v <= t)) for n_, v, t in spec_rows]
    if moreau is not None:
        rows.append(("moreau.worst_rel_err", moreau["worst_rel_err"], verdicts["moreau.gradient"]))
    write_csv(out / "operators.csv", ["property", "worst_margin_or_error", "verdict"], rows)
    write_json(out / "operators.json", {
        "battery": rep.as_dict(), "spectral": {n_: v for n_, v, _ in spec_rows},
        "moreau": None if moreau is None else {k: v for k, v in moreau.items() if k != "rows"},
        "moreau_gradient_sign": None if moreau is None else moreau["sign"], "verdicts": verdicts})
    return verdicts


def cmd_simulate(rc: RunConfig, out: Path) -> dict:
    cfg = rc.sampler()
    result = sde.sample_invariant(rc.psi(), cfg, rc.resolvent())
    sde.write_samples(out / "samples.csv", result)
    verdicts = {"simulate.finite": _verdict(bool(np.all(np.isfinite(result.samples))))}
    write_json(out / "stats.json", {"stats": result.stats.as_dict(), "retained": int(result.samples.shape[0]),
                                    "rng": result.metadata, "verdicts": verdicts,
                                    "conventions_agree": sde.conventions_agree(cfg).tolist()})
    return verdicts


def cmd_invariance(rc: RunConfig, out: Path) -> dict:
    psi = rc.psi()
    cfg = rc.sampler()
    X, src = _samples_for(rc, "invariance.samples", out)
    battery = kolmogorov.standard_battery(cfg.n_modes, cfg.length)
    cal = kolmogorov.calibrate_bias(battery, cfg, draws=rc["invariance.calibration_draws"], seed=cfg.seed)
    meta = {"sde.noise_convention": cfg.noise_convention}
    rep = kolmogorov.invariance_residual((X, meta), battery, psi, cfg, rc["invariance.z"], cal["C_per_function"])
    verdicts = {f"invariance.{r['name']}": r["verdict"] for r in rep.rows}
    out_json = {"source": src, "battery": [phi.describe() for phi in battery], "calibration":
                {k: v for k, v in cal.items() if k != "per_function"}, "residual": rep.as_dict()}
    rows = [(r["name"], r["p"], r["kind"], r["estimate"], r["se"], r["bias_allowance"], r["verdict"])
            for r in rep.rows]
    if rc["invariance.negative_steps"] > 0:
        x0 = tuple(1.0 / np.arange(1, cfg.n_modes + 1))
        neg_cfg = rc.sampler(n_steps=rc["invariance.negative_steps"], burn_in=0, x0=x0)
        neg = sde.sample_invariant(psi, neg_cfg, rc.resolvent())
        nrep = kolmogorov.invariance_residual(neg, battery, psi, neg_cfg, rc["invariance.z"],
                                              cal["C_per_function"])
        verdicts["invariance.negative_control_detected"] = _verdict(not nrep.passed)
        out_json["negative_control"] = {"failures": nrep.failures(), "residual": nrep.as_dict()}
    if rc["invariance.excessivity_restarts"] > 0:
        exc = kolmogorov.excessivity_check(X, kolmogorov.nonnegative_battery(cfg.n_modes, cfg.length),
                                           rc["invariance.excessivity_horizon"], psi, cfg,
                                           lambda_nu=rc["invariance.lambda_nu"],
                                           restarts=rc["invariance.excessivity_restarts"])
        verdicts["excessivity"] = exc["verdict"]
        out_json["excessivity"] = exc
    if rc["invariance.martingale_paths"] > 0:
        phi = {f.name: f for f in battery}.get(rc["invariance.martingale_function"])
        if phi is None:
            raise ConfigError(f"unknown battery member {rc['invariance.martingale_function']!r}")
        x0 = np.asarray(cfg.x0) if cfg.x0 is not None else 1.0 / np.arange(1, cfg.n_modes + 1)
        sweep = kolmogorov.martingale_dt_sweep(x0, phi, rc["invariance.martingale_t"],
                                               rc["invariance.martingale_paths"], psi, cfg,
                                               dts=(4 * cfg.dt, 2 * cfg.dt, cfg.dt),
                                               bias_constant=cal["C_per_function"][phi.name])
        verdicts["martingale.residual"] = sweep["runs"][-1]["verdict"]
        verdicts["martingale.slope"] = _verdict(sweep["slope_ok"])
        out_json["martingale"] = sweep
    write_csv(out / "invariance.csv", ["name", "p", "kind", "estimate", "se", "bias_allowance", "verdict"], rows)
    out_json["verdicts"] = verdicts
    write_json(out / "invariance.json", out_json)
    return verdicts


def cmd_moments(rc: RunConfig, out: Path) -> dict:
    psi = rc.psi()
    psi.require_r_at_least(2.0)
    cfg = rc.sampler()
    X, src = _samples_for(rc, "moments.samples", out)
    rep = sde.moment_report(X, psi, cfg.domain)
    verdicts = {f"moments.{k}.stable": _verdict(v["stable"]) for k, v in rep.items()}
    ball = sde.ball_frequency(X, X.mean(axis=0), rc["moments.ball_radius"], cfg.length)
    rows = [(k, v["mean"], v["se"], _verdict(v["stable"])) for k, v in rep.items()]
    out_json = {"source": src, "moments": rep, "ball_at_mean": ball}
    if rc["moments.lyapunov_states"] > 0:
        ly_cfg = rc.sampler(dt=rc["moments.lyapunov_dt"], n_steps=2, burn_in=0, x0=None)
        ly = kolmogorov.lyapunov_functional(X, psi, ly_cfg, rc["moments.lyapunov_t_max"],
                                            rc["moments.lyapunov_paths"], rc["moments.lyapunov_states"])
        verdicts["lyapunov.min_ratio_positive"] = ly["verdict"]
        out_json["lyapunov"] = {k: v for k, v in ly.items() if k not in ("g", "ratio")}
        write_csv(out / "lyapunov.csv", ["state", "g", "ratio"],
                  [(i, g, r) for i, (g, r) in enumerate(zip(ly["g"], ly["ratio"]))])
    write_csv(out / "moments.csv", ["observable", "mean", "se", "doubling_verdict"], rows)
    out_json["verdicts"] = verdicts
    write_json(out / "moments.json", out_json)
    return verdicts


def _control_problems(rc: RunConfig):
    base = dict(horizon=rc["control.horizon"], rho=rc["control.rho"], ode_dt=rc["control.ode_dt"],
                length=rc["domain.length"], gamma=rc["cov.gamma"], noise_convention=rc["sde.noise_convention"],
                rho_factor=rc["control.rho_factor"], eps=min(rc["control.eps"]))
    if rc["control.y0"]:
        return [control.ControlProblem(np.array(rc["control.y0"]), np.array(rc["control.y1"]), **base)]
    n = rc["control.n_modes"]
    rng = sde.make_rng(rc["control.seed"], 0)
    k = np.arange(1, n + 1)
    return [control.ControlProblem(rng.standard_normal(n) / k, rng.standard_normal(n) / k, **base)
            for _ in range(rc["control.pairs"])]


def cmd_control(rc: RunConfig, out: Path) -> dict:
    import warnings

    psi = rc.psi()
    rows, reports = [], []
    verdicts = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        problems = _control_problems(rc)
        for i, cp in enumerate(problems):
            rep = control.epsilon_sweep(cp, psi, rc["control.eps"], rc.resolvent(), rc["control.target_fraction"])
            reports.append(rep | {"pair": i, "y0": cp.y0, "y1": cp.y1})
            for r in rep["sweep"]:
                rows.append((i, r["eps"], r["delta"], r["certified_bound"], r["mismatch"], r["normal_residual"],
                             rep["hit_time"] if rep["hit_time"] is not None else "", rep["hit_bound"]))
            cond = rep["rho"] > rep["threshold"]
            for msg in rep["warnings"]:
                print(f"control: pair {i}: warning: {msg}", file=sys.stderr)
            if not cond:
                print(f"control: pair {i}: achieved distance {rep['achieved_distance']!r} "
                      f"(initial {rep['initial_distance']!r})", file=sys.stderr)
            verdicts[f"control.{i}.reaching_condition"] = _verdict(cond)
            verdicts[f"control.{i}.hit_bound"] = _verdict(rep["hit_bound_ok"])
            verdicts[f"control.{i}.delta_monotone"] = _verdict(rep["monotone"])
            verdicts[f"control.{i}.delta_target"] = _verdict(rep["target_met"])
            verdicts[f"control.{i}.normal_equation"] = _verdict(
                max(r["normal_residual"] for r in rep["sweep"]) <= 1e-10)
        # trajectory and control of the first problem
        cp = problems[0]
        fs = control.sgn_feedback_solve(cp, psi, rc.resolvent())
        rcv = control.recover_control(fs, cp)
    n = cp.n
    write_csv(out / "trajectory.csv", ["t"] + [f"z{k + 1}" for k in range(n)] + ["distance_H"],
              [(t, *z, d) for t, z, d in zip(fs.times, fs.z, fs.distance)])
    write_csv(out / "controls.csv", ["t"] + [f"v{k + 1}" for k in range(n)] + [f"u{k + 1}" for k in range(n)],
              [(t, *v, *u) for t, v, u in zip(fs.times[:-1], fs.v, rcv.u)])
    write_csv(out / "control.csv", ["pair", "eps", "delta", "certified_bound", "mismatch", "normal_residual",
                                    "hit_time", "hit_bound"], rows)
    write_json(out / "control.json", {"problems": reports, "verdicts": verdicts,
                                      "first_problem_notes": fs.warnings})
    return verdicts


def cmd_support(rc: RunConfig, out: Path) -> dict:
    psi = rc.psi()
    n = rc["support.n_modes"]
    cfg = rc.sampler(n_modes=n, grid_points=None, dt=rc["support.dt"], x0=None, n_steps=2, burn_in=0)
    x0 = np.array(rc["support.x0"]) if rc["support.x0"] else np.zeros(n)
    rows, reps, verdicts = [], [], {}
    for i, target in enumerate(rc["support.targets"]):
        rep = control.support_experiment(x0, np.array(target), rc["support.alpha"], rc["support.paths"], psi, cfg,
                                         rc["support.horizon"], stream_base=100_000 + 1000 * i)
        reps.append(rep | {"target": list(target)})
        rows.append((i, rep["distance_x0_x1"], rep["alpha"], rep["hits"], rep["n"], rep["frequency"],
                     rep["ci_low"], rep["ci_high"], rep["verdict"]))
        verdicts[f"support.target{i}"] = rep["verdict"]
    write_csv(out / "support.csv", ["target", "distance_H", "alpha", "hits", "n", "frequency", "ci_low", "ci_high",
                                    "verdict"], rows)
    write_json(out / "support.json", {"targets": reps, "verdicts": verdicts})
    return verdicts


def cmd_oracle(rc: RunConfig, out: Path) -> dict:
    from porouslab.nonlinearity import PsiSpec

    alpha = rc["oracle.alpha"]
    lin = PsiSpec("linear", alpha=alpha)
    cfg = rc.sampler(n_steps=rc["oracle.linear_steps"], burn_in=None, x0=None)
    res = sde.sample_invariant(lin, cfg, rc.resolvent())
    mu = spectral.eigenvalues(cfg.n_modes, cfg.length)
    exact = sde.ou_discrete_variance(alpha, mu, sde.noise_amplitudes(cfg), cfg.dt)
    m2, se = sde.batch_means(res.samples**2)
    z = np.abs(m2 - exact) / se
    rows = [("linear", k + 1, m2[k], exact[k], se[k], z[k], _verdict(z[k] <= 3)) for k in range(cfg.n_modes)]
    verdicts = {f"oracle.linear.mode{k + 1}": _verdict(z[k] <= 3) for k in range(cfg.n_modes)}
    # one-mode density
    psi = rc.psi()
    keep, thin = rc["oracle.density_samples"], rc["oracle.density_thinning"]
    total = keep * thin + (keep * thin) // 4
    cfg1 = rc.sampler(n_modes=1, grid_points=None, dt=rc["oracle.density_dt"], n_steps=total,
                      burn_in=total - keep * thin, thinning=thin, x0=None)
    dens = sde.sample_invariant(psi, cfg1, rc.resolvent())
    sigma1 = float(sde.noise_amplitudes(cfg1)[0])
    c, _, cdf = sde.scalar_stationary_density(psi, sigma1, cfg1.length)
    ks = scipy.stats.kstest(dens.samples[:, 0], lambda v: np.interp(v, c, cdf)).statistic
    verdicts["oracle.density.ks"] = _verdict(ks <= rc["oracle.ks_max"])
    rows.append(("density_ks", 1, float(ks), rc["oracle.ks_max"], "", "", verdicts["oracle.density.ks"]))
    write_csv(out / "oracle.csv", ["oracle", "mode", "estimate", "reference", "se", "z", "verdict"], rows)
    write_json(out / "oracle.json", {"linear": {"second_moment": m2, "exact": exact, "se": se, "z": z},
                                     "density": {"ks": float(ks), "samples": int(dens.samples.shape[0]),
                                                 "sigma1": sigma1}, "verdicts": verdicts})
    return verdicts


COMMANDS = {
    "check-operators": cmd_check_operators,
    "simulate": cmd_simulate,
    "invariance": cmd_invariance,
    "moments": cmd_moments,
    "control": cmd_control,
    "support": cmd_support,
    "oracle": cmd_oracle,
}

HELP = {
    "check-operators": "dissipativity, resolvent and Yosida battery plus the Moreau gradient check",
    "simulate": "sample the invariant measure of the Galerkin system",
    "invariance": "infinitesimal invariance, excessivity and martingale residuals",
    "moments": "moment identities, ball frequencies and the Lyapunov functional",
    "control": "sgn-feedback target reaching and control recovery over an eps sweep",
    "support": "hit frequencies of small balls at time 1",
    "oracle": "linear and one-mode exact oracles for the sampler",
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(command: str, rc: RunConfig, out: Path, argv=None, threads=None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    sde.set_threads(threads)
    start = time.time()
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    (out / "config.txt").write_text(rc.to_text())
    code = EXIT_OK
    error = None
    verdicts = {}
    try:
        verdicts = COMMANDS[command](rc, out)
        failed = [k for k, v in verdicts.items() if v != "pass"]
        if failed:
            code = EXIT_FAIL
            print(f"{command}: failed checks: {', '.join(failed)}", file=sys.stderr)
    except ConventionMismatchError as err:
        code, error = EXIT_CONVENTION, str(err)
    except MissingSamples as err:
        code, error = EXIT_MISSING_SAMPLES, str(err)
    except SolverError as err:
        code, error = EXIT_SOLVER, str(err)
    except ConfigError as err:
        code, error = EXIT_CONFIG, str(err)
    if error:
        print(f"{command}: error: {error}", file=sys.stderr)
    files = {p.name: _sha256(p) for p in sorted(out.iterdir())
             if p.is_file() and p.suffix in (".csv", ".json") and p.name != "manifest.json"}
    write_json(out / "manifest.json", {
        "command": command,
        "argv": list(argv) if argv is not None else None,
        "config": rc.to_dict(),
        "rng": {"algorithm": sde.RNG_ALGORITHM, "seed": rc["sde.seed"], "battery_seed": rc["battery.seed"],
                "control_seed": rc["control.seed"]},
        "software": {"porouslab": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "wall_clock": {"started": started, "elapsed_s": round(time.time() - start, 3)},
        "threads_requested": threads,
        "verdicts": verdicts,
        "exit_code": code,
        "error": error,
        "files": files,
    })
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="porouslab", description=__doc__.splitlines()[0],
                                     epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name], epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="flat key=value config file (defaults when omitted)")
        p.add_argument("--out", help="output directory (default out/<command>)")
        p.add_argument("--seed", type=int, help="override sde.seed, battery.seed and control.seed")
        p.add_argument("--threads", type=int, help="cap worker threads; results do not depend on it")
    p = sub.add_parser("rerun", help="repeat a run from its manifest.json", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "rerun":
            man = json.loads(Path(args.manifest).read_text())
            text = "".join(f"{k}={v}\n" for k, v in man["config"].items())
            rc = RunConfig(parse_config_text(text))
            return run(man["command"], rc, Path(args.out), argv, args.threads)
        rc = load_config(args.config)
        if args.seed is not None:
            rc = rc.with_seed(args.seed)
    except ConfigError as err:
        print(f"{args.command}: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError, KeyError) as err:
        print(f"{args.command}: cannot read manifest: {err}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else Path("out") / args.command
    return run(args.command, rc, out, argv, args.threads)


if __name__ == "__main__":
    sys.exit(main())
