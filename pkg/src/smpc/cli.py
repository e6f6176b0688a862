"""Command-line front end.

Subcommands mirror the pipeline stages so each is inspectable on its own:

* ``tighten``    print (and optionally save) the tightened sets Z, V, Z_F
* ``solve``      solve one tree problem from a given state
* ``simulate``   run one verbose episode
* ``montecarlo`` full campaign with file emission
* ``check``      run the self-check suite on a config

Exit codes: 0 success, 2 config error, 3 infeasible tightening or terminal
set, 4 solver fault or failed self-check. ``SMPC_SEED`` overrides any seed
from the config file or the command line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import _kernels, experiment
from .bmpc import max_violation, shift_candidate
from .closedloop import run_episode
from .errors import (
    BothInfeasibleError,
    DimensionMismatchError,
    EmptySetError,
    EmptyTighteningError,
    NoConvergenceError,
    ParseError,
    SolverFaultError,
    SmpcError,
    ValidationError,
)
from .rng import substream
from .setops import PolytopeH

_F = "{:.17g}".format


def _parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(tok) for tok in text.split(",")], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"cannot parse vector {text!r}: {exc}") from exc


def _effective_seed(args, cfg) -> int:
    env = os.environ.get("SMPC_SEED")
    if env is not None:
        return int(env)
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return cfg.seed


def _poly_dict(p: PolytopeH) -> dict:
    return {"A": [[_F(v) for v in row] for row in p.A], "b": [_F(v) for v in p.b]}


def write_sets(path, z, v, z_f):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"Z": _poly_dict(z), "V": _poly_dict(v), "Z_F": _poly_dict(z_f)},
                  fh, indent=2)
        fh.write("\n")


def read_sets(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return {
        key: PolytopeH(np.array(entry["A"], dtype=float),
                       np.array(entry["b"], dtype=float))
        for key, entry in raw.items()
    }


def _print_poly(name: str, p: PolytopeH):
    print(f"{name}: {p.nrows} halfspaces in R^{p.dim}")
    for a, b in zip(p.A, p.b):
        terms = " + ".join(f"{_F(c)}*x{i}" for i, c in enumerate(a))
        print(f"  {terms} <= {_F(b)}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_tighten(args) -> int:
    cfg = experiment.load_config(args.config)
    _, info = experiment.build_setup(cfg, warm=False)
    _print_poly("Z", info.Z)
    _print_poly("V", info.V)
    _print_poly("Z_F", info.Z_F)
    print(f"sigma_inf:\n{info.error_model.sigma_inf}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "sets.json")
        write_sets(path, info.Z, info.V, info.Z_F)
        print(f"wrote {path}")
    return 0


def _cmd_solve(args) -> int:
    cfg = experiment.load_config(args.config)
    setup, _ = experiment.build_setup(cfg)
    x = _parse_vector(args.state)
    z_prev = _parse_vector(args.zprev) if args.zprev else x.copy()
    solver = setup.master_solver().fresh()
    sol = solver.solve(x, z_prev)
    rep = solver.size_report
    print(f"status: {sol.status.value}")
    print(f"xi: {sol.xi}")
    print(f"cost: {_F(sol.cost)}")
    print(f"v0: {[_F(v) for v in sol.v0]}")
    print(f"z0: {[_F(v) for v in sol.z0]}")
    for d in range(1, setup.bmpc_cfg.tree.L + 1):
        print(f"z1[{d}]: {[_F(v) for v in sol.z_depth1(d)]}")
    print(f"variables: {rep['variables']}  equality rows: {rep['equality_rows']}"
          f"  inequality rows: {rep['inequality_rows']}")
    return 0


def _cmd_simulate(args) -> int:
    cfg = experiment.load_config(args.config)
    seed = _effective_seed(args, cfg)
    setup, _ = experiment.build_setup(cfg)
    steps = args.steps or cfg.episode_steps
    traj = run_episode(setup, steps, substream(seed, args.episode))
    n = traj.x.shape[1]
    hdr = ["k", "x", "u", "z", "e", "v", "xi", "w", "j"]
    print("  ".join(f"{h:>12}" for h in hdr))
    fmt = "{:12.6g}"

    def _cell(vec):
        return "/".join(fmt.format(v) for v in np.atleast_1d(vec))

    for k in range(steps):
        cells = [f"{k:>12}", _cell(traj.x[k]), _cell(traj.u[k]), _cell(traj.z0[k]),
                 _cell(traj.e[k]), _cell(traj.v0[k]), f"{traj.xi[k]:>12}",
                 _cell(traj.w[k]), f"{traj.atom_idx[k]:>12}"]
        print("  ".join(f"{c:>12}" for c in cells))
    print(f"{steps:>12}  " + f"{_cell(traj.x[steps]):>12}")
    for name, ok in traj.state_ok.items():
        print(f"{name}: {int((~ok).sum())} violations over steps 1..{steps}")
    print(f"input: {int((~traj.input_ok).sum())} violations over steps 0..{steps - 1}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "trajectories.csv")
        experiment.write_trajectories(path, [traj])
        print(f"wrote {path}")
    return 0


def _cmd_montecarlo(args) -> int:
    cfg = experiment.load_config(args.config)
    seed = _effective_seed(args, cfg)
    episodes = args.episodes or cfg.episodes
    out_dir = args.out or cfg.out_dir or "out"
    stats, trajs = experiment.run_monte_carlo(
        cfg, episodes=episodes, seed=seed, workers=args.workers,
        keep_trajectories=True,
    )
    paths = experiment.report(stats, trajs, out_dir)
    for rec_name, rec in stats.satisfaction().items():
        verdict = "PASS" if rec["min_step"] >= rec["target"] else "FAIL"
        print(f"{rec_name}: target {rec['target']:.4f} min-step {rec['min_step']:.4f}"
              f" aggregate {rec['aggregate']:.4f} [{verdict}]")
    print(f"episodes: {episodes}  seed: {seed}  backend: {stats.kernel_backend}")
    for name, path in paths.items():
        print(f"wrote {path}")
    return 0


def _cmd_check(args) -> int:
    cfg = experiment.load_config(args.config)
    seed = _effective_seed(args, cfg)
    failures = 0

    def _report(name, ok, detail=""):
        nonlocal failures
        failures += 0 if ok else 1
        print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))

    setup, info = experiment.build_setup(cfg)
    em = info.error_model
    _report("tightened sets nonempty",
            info.Z.nrows > 0 and info.V.nrows > 0 and info.Z_F.nrows > 0,
            f"Z {info.Z.nrows} rows, V {info.V.nrows} rows, Z_F {info.Z_F.nrows} rows")

    resid = np.linalg.norm(
        em.A_K @ em.sigma_inf @ em.A_K.T + em.noise_cov - em.sigma_inf, "fro"
    ) / max(np.linalg.norm(em.sigma_inf, "fro"), 1e-300)
    _report("stationary covariance residual", resid <= 1e-10, f"{resid:.2e}")

    # open-loop error coverage at each configured level
    probs = sorted({p for _, _, p in cfg.state_constraints} | {cfg.input_prob})
    from .setops import chi2_inv

    n = em.dim
    paths, steps = 20_000, 20
    rng = substream(seed, 1_000_001)
    noise = rng.standard_normal((paths, steps, n)) @ np.linalg.cholesky(em.noise_cov).T
    shape_inv = np.linalg.inv(em.sigma_inf)
    levels = np.array([chi2_inv(p, n) for p in probs])
    counts = _kernels.error_coverage(em.A_K, noise, shape_inv, levels)
    for i, p in enumerate(probs):
        cov = counts[:, i].min() / paths
        _report(f"error coverage at level {p:g}", cov >= p - 0.02,
                f"min over steps {cov:.4f}")

    # conditional split: exactness, index frequencies, residual normality
    mix = cfg.mixture
    draws = 20_000
    rng = substream(seed, 1_000_002)
    w = mix.sample_batch(draws, rng)
    idx, w_x, w_e = mix.sample_conditional_batch(w, rng)
    # w_e is the correctly rounded residual, so reconstruction is exact up to
    # one rounding of the final addition (bitwise when the atom is 0)
    scale = np.maximum(np.maximum(np.abs(w_x), np.abs(w_e)), np.abs(w))
    recon_ok = bool(np.all(np.abs(w_x + w_e - w) <= np.spacing(scale)))
    recon_ok &= bool(np.all(w_e == w - w_x))
    _report("split residual correctly rounded", recon_ok, f"{draws} samples")
    freq_ok = all(
        abs(float((idx == i).mean()) - mix.weights[i])
        <= 4 * np.sqrt(mix.weights[i] * (1 - mix.weights[i]) / draws) + 1e-12
        for i in range(mix.count)
    )
    _report("atom frequencies match weights", freq_ok)
    if n == 1:
        from scipy import stats as sstats

        pval = sstats.kstest(w_e[:, 0] / np.sqrt(mix.cov[0, 0]), "norm").pvalue
        _report("residual normality (KS)", pval > 0.005, f"p = {pval:.4f}")

    # one solve plus all candidate shifts
    try:
        solver = setup.master_solver().fresh()
        sol = solver.solve(cfg.x0, cfg.x0)
        worst = 0.0
        for d in range(1, setup.bmpc_cfg.tree.L + 1):
            cand = shift_candidate(sol, d, setup.bmpc_cfg)
            worst = max(worst, max_violation(setup.bmpc_cfg, cand.z_nodes,
                                             cand.v_nodes, 1,
                                             z_prev=sol.z_depth1(d)))
        _report("initial solve and candidate shifts", worst <= 1e-6,
                f"worst violation {worst:.2e}")
    except SmpcError as exc:
        _report("initial solve and candidate shifts", False, str(exc))

    print(f"{failures} failing check(s)" if failures else "all checks passed")
    return 4 if failures else 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="smpc",
        description="Tree-based stochastic MPC for Gaussian mixture disturbances",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def _common(p, seed=True):
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--out", default=None, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="master seed (SMPC_SEED env overrides)")
        p.add_argument("--format", default="csv", choices=["csv"],
                       help="output file format")

    p = sub.add_parser("tighten", help="print tightened sets Z, V, Z_F")
    _common(p, seed=False)
    p.set_defaults(func=_cmd_tighten)

    p = sub.add_parser("solve", help="solve one tree problem from a state")
    _common(p, seed=False)
    p.add_argument("--state", required=True, help="comma-separated state vector")
    p.add_argument("--zprev", default=None, help="previous nominal depth-1 node")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("simulate", help="run one episode, verbose")
    _common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--episode", type=int, default=0,
                   help="episode index for the substream")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("montecarlo", help="full Monte Carlo campaign")
    _common(p)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_montecarlo)

    p = sub.add_parser("check", help="run the self-check suite")
    _common(p)
    p.set_defaults(func=_cmd_check)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ValidationError, DimensionMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (EmptyTighteningError, EmptySetError, NoConvergenceError) as exc:
        print(f"infeasible tightening or terminal set: {exc}", file=sys.stderr)
        return 3
    except (SolverFaultError, BothInfeasibleError) as exc:
        print(f"solver fault: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
