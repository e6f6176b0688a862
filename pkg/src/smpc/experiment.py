"""Experiment configuration, Monte Carlo campaigns, and file emission.

Configs are TOML: matrices as nested lists, constraint sets in halfspace
form, probabilities as target lower bounds. ``run_monte_carlo`` executes
independent episodes (one substream per episode index) and aggregates
per-step violation counts; results are identical for a fixed
(config, episodes, seed) triple regardless of worker count because episodes
are merged by index, never by arrival order.
"""

from __future__ import annotations

import concurrent.futures
import os
import time
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import _kernels
from ._mat import as_matrix, as_vector, spectral_radius
from .bmpc import BmpcConfig
from .closedloop import LoopSetup, Trajectory, run_episode
from .errors import ParseError, SmpcError, ValidationError
from .mixture import GaussianMixture
from .rng import substream
from .setops import PolytopeH
from .tightening import ChanceSpec, ErrorModel, StateConstraint, terminal_set, tighten

_FLOAT_FMT = "{:.17g}"  # bit-stable regression baselines


@dataclass(frozen=True)
class ExperimentConfig:
    A: np.ndarray
    B: np.ndarray
    K: np.ndarray | None  # None means synthesize an LQR gain
    x0: np.ndarray
    mixture: GaussianMixture
    state_constraints: tuple  # ((name, PolytopeH, prob), ...)
    input_constraint: PolytopeH
    input_prob: float
    horizon: int  # tree depth N
    episode_steps: int  # simulation length T
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    epsilon: float
    prs_noise: str  # "component" or "mixture"
    episodes: int
    seed: int
    out_dir: str | None = None


def _need(table: dict, key: str, section: str):
    if key not in table:
        raise ValidationError(f"[{section}] is missing required key {key!r}")
    return table[key]


def _matrix(table, key, section):
    try:
        return as_matrix(_need(table, key, section), key)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"[{section}] {key}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    """Parse and validate a TOML experiment file.

    Parse failures raise ParseError with the decoder's line/column message;
    semantic failures raise ValidationError naming the section and key.
    """
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    try:
        return _build_config(raw)
    except ValidationError:
        raise
    except (SmpcError, TypeError, ValueError) as exc:
        # constructor-level failures (shape mismatches, non-SPD matrices,
        # unparsable numbers) are config errors too
        raise ValidationError(f"{path}: {exc}") from exc


def _build_config(raw: dict) -> ExperimentConfig:
    sys_t = raw.get("system", {})
    a = _matrix(sys_t, "A", "system")
    b = _matrix(sys_t, "B", "system")
    k_raw = sys_t.get("K", "lqr")
    if isinstance(k_raw, str):
        if k_raw != "lqr":
            raise ValidationError(f"[system] K must be a matrix or the string 'lqr'")
        k = None
    else:
        k = as_matrix(k_raw, "K")
    x0 = as_vector(sys_t.get("x0", np.zeros(a.shape[0])), "x0")

    mix_t = raw.get("mixture", {})
    try:
        mixture = GaussianMixture(
            means=_need(mix_t, "means", "mixture"),
            weights=_need(mix_t, "weights", "mixture"),
            cov=_need(mix_t, "cov", "mixture"),
        )
    except (ValidationError, ValueError) as exc:
        raise ValidationError(f"[mixture] {exc}") from exc

    cons = raw.get("constraints", {})
    state_list = cons.get("state", [])
    if not state_list:
        raise ValidationError("[[constraints.state]] needs at least one entry")
    states = []
    for i, entry in enumerate(state_list):
        section = f"constraints.state[{i}]"
        name = entry.get("name", f"state{i}")
        poly = PolytopeH(_matrix(entry, "A", section), _need(entry, "b", section))
        prob = float(_need(entry, "p", section))
        states.append((name, poly, prob))
    inp = cons.get("input")
    if inp is None:
        raise ValidationError("[constraints.input] is required")
    input_poly = PolytopeH(_matrix(inp, "A", "constraints.input"),
                           _need(inp, "b", "constraints.input"))
    input_prob = float(_need(inp, "p", "constraints.input"))

    hor = raw.get("horizons", {})
    horizon = int(_need(hor, "mpc", "horizons"))
    episode_steps = int(_need(hor, "episode", "horizons"))
    if horizon < 1 or episode_steps < 1:
        raise ValidationError("[horizons] mpc and episode must be positive")

    cost = raw.get("cost", {})
    n, m = a.shape[0], b.shape[1]
    q = as_matrix(cost.get("Q", np.eye(n)), "Q")
    r = as_matrix(cost.get("R", np.eye(m)), "R")
    p = as_matrix(cost.get("P", np.eye(n)), "P")
    epsilon = float(cost.get("epsilon", 1e3))

    prs_noise = raw.get("prs", {}).get("noise", "component")
    if prs_noise not in ("component", "mixture"):
        raise ValidationError("[prs] noise must be 'component' or 'mixture'")

    mc = raw.get("monte_carlo", {})
    episodes = int(mc.get("episodes", 1000))
    seed = int(mc.get("seed", 0))
    out_dir = raw.get("output", {}).get("dir")

    return ExperimentConfig(a, b, k, x0, mixture, tuple(states), input_poly,
                            input_prob, horizon, episode_steps, q, r, p, epsilon,
                            prs_noise, episodes, seed, out_dir)


def lqr_gain(a, b, q=None, r=None) -> np.ndarray:
    """Infinite-horizon discrete LQR gain in the convention u = K x."""
    from scipy.linalg import solve_discrete_are

    a = as_matrix(a)
    b = as_matrix(b)
    q = np.eye(a.shape[0]) if q is None else as_matrix(q)
    r = np.eye(b.shape[1]) if r is None else as_matrix(r)
    s = solve_discrete_are(a, b, q, r)
    return -np.linalg.solve(b.T @ s @ b + r, b.T @ s @ a)


@dataclass(frozen=True)
class TighteningInfo:
    error_model: ErrorModel
    Z: PolytopeH
    V: PolytopeH
    Z_F: PolytopeH


def build_setup(cfg: ExperimentConfig, warm: bool = True) -> tuple[LoopSetup, TighteningInfo]:
    """Offline stage: gain, reachable sets, tightened sets, terminal set."""
    k = cfg.K if cfg.K is not None else lqr_gain(cfg.A, cfg.B)
    if spectral_radius(cfg.A + cfg.B @ k) >= 1.0 - 1e-9:
        raise ValidationError("feedback gain does not stabilize the system")
    if cfg.prs_noise == "component":
        noise_cov = cfg.mixture.cov
    else:
        noise_cov = cfg.mixture.moments()[1]
    em = ErrorModel.build(cfg.A, cfg.B, k, noise_cov)
    spec = ChanceSpec(
        state_constraints=tuple(
            StateConstraint(name, poly, prob)
            for name, poly, prob in cfg.state_constraints
        ),
        input_constraint=cfg.input_constraint,
        input_prob=cfg.input_prob,
    )
    z_set, v_set = tighten(em, spec)
    atoms = cfg.mixture.means
    z_f = terminal_set(em, z_set, v_set, atoms)
    bcfg = BmpcConfig(A=cfg.A, B=cfg.B, K=k, Z=z_set, V=v_set, Z_F=z_f,
                      atoms=atoms, weights=cfg.mixture.weights, N=cfg.horizon,
                      Q=cfg.Q, R=cfg.R, P=cfg.P, epsilon=cfg.epsilon)
    setup = LoopSetup(A=cfg.A, B=cfg.B, K=k, mixture=cfg.mixture, bmpc_cfg=bcfg,
                      x0=cfg.x0,
                      state_constraints=tuple((n_, p_) for n_, p_, _ in cfg.state_constraints),
                      input_constraint=cfg.input_constraint)
    if warm:
        setup.master_solver()
    info = TighteningInfo(em, z_set, v_set, z_f)
    return setup, info


@dataclass
class McStats:
    """Violation bookkeeping over a campaign of M episodes of T steps."""

    episodes: int
    steps: int
    seed: int
    state_violations: dict  # name -> (T,) int counts at k = 1..T
    input_violations: np.ndarray  # (T,) counts at k = 0..T-1
    state_targets: dict  # name -> target probability
    input_target: float
    solve_times: np.ndarray  # flat seconds, one per controller step
    problem_size: dict
    wall_time: float = 0.0
    kernel_backend: str = field(default_factory=_kernels.backend_name)

    def state_rates(self, name) -> np.ndarray:
        return self.state_violations[name] / self.episodes

    def input_rates(self) -> np.ndarray:
        return self.input_violations / self.episodes

    def satisfaction(self) -> dict:
        """Per constraint: min-over-steps and aggregate satisfaction."""
        out = {}
        for name in self.state_violations:
            rates = 1.0 - self.state_rates(name)
            out[name] = {"min_step": float(rates.min()),
                         "aggregate": float(rates.mean()),
                         "target": self.state_targets[name]}
        rates = 1.0 - self.input_rates()
        out["input"] = {"min_step": float(rates.min()),
                        "aggregate": float(rates.mean()),
                        "target": self.input_target}
        return out

    def all_pass(self) -> bool:
        return all(v["min_step"] >= v["target"] for v in self.satisfaction().values())


_WORKER_SETUP = None


def _init_worker(cfg):
    global _WORKER_SETUP
    _WORKER_SETUP = build_setup(cfg)[0]


def _run_chunk(args):
    cfg, indices, seed, steps = args
    setup = _WORKER_SETUP if _WORKER_SETUP is not None else build_setup(cfg)[0]
    return [(i, run_episode(setup, steps, substream(seed, i))) for i in indices]


def run_monte_carlo(cfg: ExperimentConfig, episodes: int | None = None,
                    seed: int | None = None, workers: int = 1,
                    setup: LoopSetup | None = None,
                    keep_trajectories: bool = False):
    """Execute the campaign; returns McStats (and trajectories if kept).

    Episode ``i`` always draws from ``substream(seed, i)``, so the outcome
    is a pure function of (config, episodes, seed).
    """
    episodes = cfg.episodes if episodes is None else int(episodes)
    seed = cfg.seed if seed is None else int(seed)
    if episodes < 1:
        raise ValidationError("a campaign needs at least one episode")
    steps = cfg.episode_steps
    t_start = time.perf_counter()

    if setup is None:
        setup, _ = build_setup(cfg)

    results: list[Trajectory | None] = [None] * episodes
    if workers <= 1:
        for i in range(episodes):
            results[i] = run_episode(setup, steps, substream(seed, i))
    else:
        chunk = max(1, episodes // (workers * 8))
        batches = [
            (cfg, list(range(lo, min(lo + chunk, episodes))), seed, steps)
            for lo in range(0, episodes, chunk)
        ]
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(cfg,)
        ) as pool:
            for batch in pool.map(_run_chunk, batches):
                for i, traj in batch:
                    results[i] = traj

    names = [name for name, _ in setup.state_constraints]
    state_counts = {name: np.zeros(steps, dtype=int) for name in names}
    input_counts = np.zeros(steps, dtype=int)
    times = []
    for traj in results:
        for name in names:
            state_counts[name] += ~traj.state_ok[name]
        input_counts += ~traj.input_ok
        times.append(traj.solve_time)

    solver = setup.master_solver()
    size = dict(solver.size_report)
    size["rows_per_solve"] = size["equality_rows"] + size["inequality_rows"]
    size["rows_per_episode"] = size["rows_per_solve"] * steps

    stats = McStats(
        episodes=episodes, steps=steps, seed=seed,
        state_violations=state_counts, input_violations=input_counts,
        state_targets={name: prob for name, _, prob in cfg.state_constraints},
        input_target=cfg.input_prob,
        solve_times=np.concatenate(times),
        problem_size=size,
        wall_time=time.perf_counter() - t_start,
    )
    if keep_trajectories:
        return stats, results
    return stats


# ---------------------------------------------------------------------------
# file emission
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    return _FLOAT_FMT.format(float(v))


def _vec_cols(prefix: str, dim: int) -> list[str]:
    return [prefix] if dim == 1 else [f"{prefix}{i}" for i in range(dim)]


def write_trajectories(path, trajectories: list[Trajectory]):
    """episode,k,x,u,z,e,v,xi,w,j rows; the final state row carries x only."""
    first = trajectories[0]
    n = first.x.shape[1]
    m = first.u.shape[1]
    cols = (["episode", "k"] + _vec_cols("x", n) + _vec_cols("u", m)
            + _vec_cols("z", n) + _vec_cols("e", n) + _vec_cols("v", m)
            + ["xi"] + _vec_cols("w", n) + ["j"])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for ep, tr in enumerate(trajectories):
            for k in range(tr.steps):
                row = ([str(ep), str(k)] + [_fmt(v) for v in tr.x[k]]
                       + [_fmt(v) for v in tr.u[k]] + [_fmt(v) for v in tr.z0[k]]
                       + [_fmt(v) for v in tr.e[k]] + [_fmt(v) for v in tr.v0[k]]
                       + [str(int(tr.xi[k]))] + [_fmt(v) for v in tr.w[k]]
                       + [str(int(tr.atom_idx[k]))])
                fh.write(",".join(row) + "\n")
            tail = ([str(ep), str(tr.steps)] + [_fmt(v) for v in tr.x[tr.steps]]
                    + [""] * (2 * m + 2 * n + 1 + n) + [""])
            fh.write(",".join(tail) + "\n")


def write_violations(path, stats: McStats):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("constraint,k,count,rate\n")
        for name in stats.state_violations:
            counts = stats.state_violations[name]
            for k in range(stats.steps):
                fh.write(f"{name},{k + 1},{counts[k]},{_fmt(counts[k] / stats.episodes)}\n")
        for k in range(stats.steps):
            c = stats.input_violations[k]
            fh.write(f"input,{k},{c},{_fmt(c / stats.episodes)}\n")


def write_longform(path, trajectories: list[Trajectory]):
    """Plot-ready long format: episode,k,series,value."""
    first = trajectories[0]
    n = first.x.shape[1]
    m = first.u.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("episode,k,series,value\n")
        for ep, tr in enumerate(trajectories):
            for k in range(tr.steps + 1):
                for i, c in enumerate(_vec_cols("x", n)):
                    fh.write(f"{ep},{k},{c},{_fmt(tr.x[k][i])}\n")
            for k in range(tr.steps):
                for arr, prefix, dim in ((tr.u, "u", m), (tr.z0, "z", n),
                                         (tr.e, "e", n), (tr.v0, "v", m),
                                         (tr.w, "w", n)):
                    for i, c in enumerate(_vec_cols(prefix, dim)):
                        fh.write(f"{ep},{k},{c},{_fmt(arr[k][i])}\n")
                fh.write(f"{ep},{k},xi,{int(tr.xi[k])}\n")


def write_summary(path, stats: McStats):
    sat = stats.satisfaction()
    times_ms = np.sort(stats.solve_times) * 1e3
    pct = {p: float(np.percentile(times_ms, p)) for p in (50, 90, 99)}
    size = stats.problem_size
    lines = [
        "monte carlo summary",
        "===================",
        f"episodes: {stats.episodes}",
        f"steps per episode: {stats.steps}",
        f"seed: {stats.seed}",
        f"kernel backend: {stats.kernel_backend}",
        "",
        "problem size (per tree solve)",
        f"  decision variables: {size['variables']}"
        f" (state nodes {size['state_nodes']}, input nodes {size['input_nodes']})",
        f"  equality rows: {size['equality_rows']}",
        f"  inequality rows: {size['inequality_rows']}",
        f"  total rows per solve: {size['rows_per_solve']}",
        f"  total rows per episode ({stats.steps} solves):"
        f" {size['rows_per_episode']}",
        "",
        "constraint satisfaction (fraction of episodes, per step)",
    ]
    for name, rec in sat.items():
        verdict = "PASS" if rec["min_step"] >= rec["target"] else "FAIL"
        lines.append(
            f"  {name}: target {rec['target']:.4f}"
            f"  min-step {rec['min_step']:.4f}"
            f"  aggregate {rec['aggregate']:.4f}  [{verdict}]"
        )
    lines += [
        "",
        "solve time per controller step",
        f"  p50 {pct[50]:.3f} ms   p90 {pct[90]:.3f} ms   p99 {pct[99]:.3f} ms",
        f"campaign wall time: {stats.wall_time:.2f} s",
        "",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def report(stats: McStats, trajectories: list[Trajectory], out_dir) -> dict:
    """Emit the campaign files; returns {name: path}."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "trajectories": os.path.join(out_dir, "trajectories.csv"),
        "violations": os.path.join(out_dir, "violations.csv"),
        "longform": os.path.join(out_dir, "timeseries_long.csv"),
        "summary": os.path.join(out_dir, "summary.txt"),
    }
    write_trajectories(paths["trajectories"], trajectories)
    write_violations(paths["violations"], stats)
    write_longform(paths["longform"], trajectories)
    write_summary(paths["summary"], stats)
    return paths
