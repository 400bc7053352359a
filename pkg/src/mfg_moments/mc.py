"""Monte Carlo oracle for the controlled jump-diffusion.

Euler-Maruyama with drift 2 A(t) x + B(t) (linearly interpolated from the
backward solution grid), Gaussian diffusion and per-step Poisson jump
counts.  Each path owns an RNG substream derived from (seed, path index),
so results are bit-identical regardless of block size, worker count or
scheduling.  Per path, the draw order is: initial state (gaussian initial
laws only), the full diffusion normal block, the Poisson count vector,
then jump sizes step by step.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ScenarioError, SingularityError
from .hjb import HjbSolution
from .model import ScenarioSpec, sample_jumps

_BLOCK = 4096


def worker_count() -> int:
    """Worker cap from MFG_MOMENTS_THREADS, defaulting to the CPU count."""
    env = os.environ.get("MFG_MOMENTS_THREADS", "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError:
            raise ScenarioError(f"MFG_MOMENTS_THREADS: expected an integer, got {env!r}")
    return max(1, os.cpu_count() or 1)


@dataclass(frozen=True)
class SimConfig:
    """Simulation parameters; (seed, scenario) fully determine the output."""

    n_paths: int
    dt: float
    seed: int
    record_times: tuple[float, ...]
    keep_endpoints: bool = True

    def validate(self, spec: ScenarioSpec) -> None:
        if self.n_paths < 1000:
            raise ScenarioError("n_paths must be >= 1000")
        if not 0 < self.dt <= spec.T / 100:
            raise ScenarioError("dt must be positive and at most T/100")
        if len(set(self.record_times)) != len(self.record_times):
            raise ScenarioError("record times must be distinct")
        for tr in self.record_times:
            if not 0 <= tr <= spec.T:
                raise ScenarioError(f"record time {tr} outside [0, T]")
            steps = tr / self.dt
            if abs(steps - round(steps)) > 1e-12 * max(1.0, abs(steps)):
                raise ScenarioError(f"record time {tr} is not a multiple of dt")


@dataclass
class SimResult:
    """Moment estimates with standard errors at each record time."""

    record_times: tuple[float, ...]
    E_hat: np.ndarray   # (R, n)
    se_E: np.ndarray    # (R, n)
    V_hat: np.ndarray   # (R,)
    se_V: np.ndarray    # (R,)
    n_jumps: np.ndarray  # (R,) cumulative jump events over all paths
    n_paths: int
    endpoints: np.ndarray | None  # (n_paths, R, n)

    def record_index(self, t: float) -> int:
        for i, tr in enumerate(self.record_times):
            if abs(tr - t) <= 1e-12 * max(1.0, abs(t)):
                return i
        raise ScenarioError(f"time {t} is not a record time")


def _simulate_block(spec, cfg, path_lo, path_hi, A_steps, B_steps, rec_idx, n_steps):
    n = spec.n
    count = path_hi - path_lo
    x0 = np.asarray(spec.initial.x0, float)
    sqrt_v0 = math.sqrt(spec.initial.v0)
    sqrt_dt = math.sqrt(cfg.dt)
    lam_dt = spec.lam * cfg.dt
    use_diff = spec.delta > 0
    use_jump = spec.lam > 0

    X = np.tile(x0, (count, 1))
    xi = None
    jumps = None
    jump_events = np.zeros(n_steps, dtype=np.int64)

    point_jump = use_jump and spec.jump.kind == "point"
    if use_diff or use_jump or spec.initial.kind == "gaussian":
        xi = np.zeros((count, n_steps, n)) if use_diff else None
        jumps = np.zeros((count, n_steps, n)) if use_jump else None
        for p in range(count):
            ss = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(path_lo + p,))
            gen = np.random.Generator(np.random.Philox(ss))
            if spec.initial.kind == "gaussian":
                X[p] += sqrt_v0 * gen.standard_normal(n)
            if use_diff and n_steps:
                xi[p] = gen.standard_normal((n_steps, n))
            if use_jump and n_steps:
                counts = gen.poisson(lam_dt, n_steps)
                jump_events += counts
                if point_jump:
                    # fixed jump size consumes no draws; apply counts directly
                    jumps[p] = counts[:, None] * np.asarray(spec.jump.z0)
                else:
                    for k in np.nonzero(counts)[0]:
                        jumps[p, k] = sample_jumps(spec.jump, gen, int(counts[k])).sum(axis=0)

    rec = np.empty((count, len(rec_idx), n))
    rec_map = {k: i for i, k in enumerate(rec_idx)}
    if 0 in rec_map:
        rec[:, rec_map[0]] = X
    for k in range(n_steps):
        X = X + (2.0 * A_steps[k] * X + B_steps[k]) * cfg.dt
        if use_diff:
            X += spec.delta * sqrt_dt * xi[:, k]
        if use_jump:
            X += jumps[:, k]
        if k + 1 in rec_map:
            rec[:, rec_map[k + 1]] = X
    return rec, jump_events


def simulate_paths(spec: ScenarioSpec, sol: HjbSolution, cfg: SimConfig) -> SimResult:
    """Simulate and estimate moments at the configured record times."""
    cfg.validate(spec)
    if spec.lam * cfg.dt > 0.5:
        raise ScenarioError("reduce dt: lambda*dt must be <= 0.5")
    t_max = max(cfg.record_times, default=0.0)
    if sol.is_singular_on(t_max):
        bad = min(s for s in sol.singular_times if s <= t_max)
        raise SingularityError(f"singular drift at t={bad:.6g}; simulation refuses to cross it")

    n_steps = int(round(t_max / cfg.dt)) if cfg.record_times else 0
    step_t = np.arange(n_steps) * cfg.dt
    A_steps = np.interp(step_t, sol.t, sol.A)
    B_steps = np.stack([np.interp(step_t, sol.t, sol.B[:, i]) for i in range(spec.n)], axis=1) \
        if n_steps else np.zeros((0, spec.n))
    if n_steps and not (np.all(np.isfinite(A_steps)) and np.all(np.isfinite(B_steps))):
        k_bad = int(np.argmax(~(np.isfinite(A_steps) & np.all(np.isfinite(B_steps), axis=1))))
        raise SingularityError(f"singular drift at t={step_t[k_bad]:.6g}")

    rec_idx = [int(round(tr / cfg.dt)) for tr in cfg.record_times]
    R = len(rec_idx)
    endpoints = np.empty((cfg.n_paths, R, spec.n))
    jump_totals = np.zeros(n_steps, dtype=np.int64)

    blocks = [(lo, min(lo + _BLOCK, cfg.n_paths)) for lo in range(0, cfg.n_paths, _BLOCK)]
    workers = min(worker_count(), len(blocks)) if blocks else 1

    def run(block):
        lo, hi = block
        return lo, hi, _simulate_block(spec, cfg, lo, hi, A_steps, B_steps, rec_idx, n_steps)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(b) for b in blocks]
    for lo, hi, (rec, events) in results:
        endpoints[lo:hi] = rec
        jump_totals += events

    E_hat = endpoints.mean(axis=0)
    if cfg.n_paths > 1:
        sd = endpoints.std(axis=0, ddof=1)
        se_E = sd / math.sqrt(cfg.n_paths)
        var_pc = endpoints.var(axis=0, ddof=1)          # (R, n)
        V_hat = var_pc.mean(axis=1)
        centered = endpoints - E_hat[None, :, :]
        m4 = np.mean(centered**4, axis=0)
        se_var = np.sqrt(np.maximum(m4 - var_pc**2, 0.0) / cfg.n_paths)
        se_V = se_var.mean(axis=1)
    else:
        se_E = np.zeros_like(E_hat)
        V_hat = np.zeros(R)
        se_V = np.zeros(R)

    cum_jumps = np.concatenate([[0], np.cumsum(jump_totals)]) if n_steps else np.zeros(1, np.int64)
    n_jumps = np.array([cum_jumps[min(k, len(cum_jumps) - 1)] for k in rec_idx], dtype=np.int64)

    return SimResult(
        record_times=tuple(cfg.record_times),
        E_hat=E_hat,
        se_E=se_E,
        V_hat=V_hat,
        se_V=se_V,
        n_jumps=n_jumps,
        n_paths=cfg.n_paths,
        endpoints=endpoints if cfg.keep_endpoints else None,
    )


def empirical_charfun(result: SimResult, t: float, omegas) -> dict:
    """Empirical characteristic function mean and standard errors at time t.

    One-dimensional scenarios only; requires retained endpoints.  Returns
    arrays keyed 'omega', 'mean' (complex), 'se_re', 'se_im'.
    """
    if result.endpoints is None:
        raise ScenarioError("endpoints were not retained (set keep_endpoints)")
    idx = result.record_index(t)
    X = result.endpoints[:, idx, :]
    if X.shape[1] != 1:
        raise ScenarioError("empirical characteristic function supports dimension 1 only")
    x = X[:, 0]
    w = np.atleast_1d(np.asarray(omegas, float))
    phases = np.exp(-1j * np.outer(w, x))  # (m, n_paths)
    mean = phases.mean(axis=1)
    root = math.sqrt(result.n_paths)
    se_re = phases.real.std(axis=1, ddof=1) / root
    se_im = phases.imag.std(axis=1, ddof=1) / root
    return {"omega": w, "mean": mean, "se_re": se_re, "se_im": se_im}


@dataclass
class CompareEntry:
    quantity: str
    t: float
    analytic: float
    simulated: float
    se: float
    z: float

    @property
    def passed(self) -> bool:
        return abs(self.z) <= 4.0


@dataclass
class CompareReport:
    """z-score table between analytic moments/charfun and the simulation."""

    entries: list[CompareEntry]
    max_abs_z: float
    passed: bool
    dt_refinement: dict | None = None

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_abs_z": self.max_abs_z,
            "entries": [
                {
                    "quantity": e.quantity,
                    "t": e.t,
                    "analytic": e.analytic,
                    "simulated": e.simulated,
                    "se": e.se,
                    "z": e.z,
                    "pass": e.passed,
                }
                for e in self.entries
            ],
            "dt_refinement": self.dt_refinement,
        }


def _zscore(sim, ana, se) -> float:
    gap = sim - ana
    if se == 0.0:
        return 0.0 if abs(gap) < 1e-12 else math.inf
    return gap / se


def compare_report(
    path,
    evaluator,
    sim: SimResult,
    omegas=(),
    sim_refined: SimResult | None = None,
) -> CompareReport:
    """Flag |z| > 4 discrepancies between analytics and simulation.

    ``path`` supplies E(t), V(t); ``evaluator`` (optional, may be None)
    supplies the solution characteristic function for the requested
    omegas.  A second simulation at a finer dt adds refinement deltas.
    """
    entries: list[CompareEntry] = []
    t_grid_max = float(path.t[-1])
    for i, t in enumerate(sim.record_times):
        if t > t_grid_max + 1e-12:
            raise ScenarioError(f"record time {t} outside the analytic horizon")
        E = np.atleast_1d(path.E_at(t))
        for c in range(E.shape[0]):
            entries.append(CompareEntry(
                quantity=f"E_{c + 1}", t=t, analytic=float(E[c]),
                simulated=float(sim.E_hat[i, c]), se=float(sim.se_E[i, c]),
                z=_zscore(float(sim.E_hat[i, c]), float(E[c]), float(sim.se_E[i, c])),
            ))
        V = float(path.V_at(t))
        entries.append(CompareEntry(
            quantity="V", t=t, analytic=V,
            simulated=float(sim.V_hat[i]), se=float(sim.se_V[i]),
            z=_zscore(float(sim.V_hat[i]), V, float(sim.se_V[i])),
        ))
        if omegas and evaluator is not None and sim.endpoints is not None:
            emp = empirical_charfun(sim, t, omegas)
            ana = np.atleast_1d(evaluator.eval_solution_charfun(t, np.asarray(omegas, float)))
            for j, w in enumerate(emp["omega"]):
                entries.append(CompareEntry(
                    quantity=f"charfun_re(w={w:g})", t=t, analytic=float(ana[j].real),
                    simulated=float(emp["mean"][j].real), se=float(emp["se_re"][j]),
                    z=_zscore(float(emp["mean"][j].real), float(ana[j].real), float(emp["se_re"][j])),
                ))
                entries.append(CompareEntry(
                    quantity=f"charfun_im(w={w:g})", t=t, analytic=float(ana[j].imag),
                    simulated=float(emp["mean"][j].imag), se=float(emp["se_im"][j]),
                    z=_zscore(float(emp["mean"][j].imag), float(ana[j].imag), float(emp["se_im"][j])),
                ))

    refinement = None
    if sim_refined is not None:
        if sim_refined.record_times != sim.record_times:
            raise ScenarioError("mismatched record times between the two simulations")
        refinement = {
            "delta_E": np.abs(sim.E_hat - sim_refined.E_hat).max(axis=1).tolist(),
            "delta_V": np.abs(sim.V_hat - sim_refined.V_hat).tolist(),
        }

    max_abs_z = max((abs(e.z) for e in entries), default=0.0)
    return CompareReport(
        entries=entries,
        max_abs_z=max_abs_z,
        passed=all(e.passed for e in entries),
        dt_refinement=refinement,
    )


def sim_to_csv(result: SimResult) -> str:
    """CSV with columns t, E_hat_1..n, se_E_1..n, V_hat, se_V, n_jumps."""
    n = result.E_hat.shape[1] if result.E_hat.ndim == 2 else 1
    cols = ["t"]
    cols += [f"E_hat_{i + 1}" for i in range(n)]
    cols += [f"se_E_{i + 1}" for i in range(n)]
    cols += ["V_hat", "se_V", "n_jumps"]
    lines = [",".join(cols)]
    for i, t in enumerate(result.record_times):
        row = [t, *result.E_hat[i], *result.se_E[i], result.V_hat[i], result.se_V[i]]
        lines.append(",".join(f"{x:.17g}" for x in row) + f",{int(result.n_jumps[i])}")
    return "\n".join(lines) + "\n"


def sim_from_csv(text: str) -> SimResult:
    """Rebuild the estimator table from its CSV serialization (no endpoints)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    n = sum(1 for name in header if name.startswith("E_hat_"))
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    if data.size == 0:
        data = data.reshape(0, len(header))
    return SimResult(
        record_times=tuple(data[:, 0]),
        E_hat=data[:, 1 : 1 + n],
        se_E=data[:, 1 + n : 1 + 2 * n],
        V_hat=data[:, 1 + 2 * n],
        se_V=data[:, 2 + 2 * n],
        n_jumps=data[:, 3 + 2 * n].astype(np.int64),
        n_paths=0,
        endpoints=None,
    )


def endpoints_to_csv(result: SimResult) -> str:
    """Flat endpoint dump (path, t, x_1..x_n); large, gated by the CLI flag."""
    if result.endpoints is None:
        raise ScenarioError("endpoints were not retained (set keep_endpoints)")
    n = result.endpoints.shape[2]
    lines = [",".join(["path", "t"] + [f"x_{i + 1}" for i in range(n)])]
    for p in range(result.endpoints.shape[0]):
        for i, t in enumerate(result.record_times):
            vals = ",".join(f"{x:.17g}" for x in result.endpoints[p, i])
            lines.append(f"{p},{t:.17g},{vals}")
    return "\n".join(lines) + "\n"
