"""Forward moment dynamics of the controlled jump-diffusion.

With drift 2 A(t) x + B(t), diffusion level delta and compound-Poisson
jumps of rate lambda, the expectation solves the regular second-order
problem ``E'' + 2 a(t) E = -b(t)`` with ``E(0) = x0`` and
``E'(0) = 2 A(0) x0 + B(0) + lambda M1``.  The per-coordinate variance is
assembled from the linearizer pair: ``V = (v0/u(0)^2) u^2 + K u psi`` with
``psi'' + 2 a psi = 0``, ``psi(0) = 0``, ``psi'(0) = 1/u(0)`` and the
production rate ``K = delta^2 + lambda * M2 / n``.  Both satisfy the
first-order relations ``E' = 2 A E + B + lambda M1`` and ``V' = 4 A V + K``
wherever A is finite, and the second-order residuals are checked on every
propagation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConvergenceError, FormulaValidationError, ScenarioError, SingularityError
from .hjb import HjbSolution, solve_backward
from .model import (
    ScenarioSpec,
    eval_scalar_grid,
    eval_vector_grid,
    jump_moments,
    scalar_fn,
    vector_fn,
)


@dataclass
class MomentPath:
    """Time-gridded expectation and per-coordinate variance with diagnostics."""

    t: np.ndarray
    E: np.ndarray        # (N+1, n)
    E_prime: np.ndarray  # (N+1, n)
    V: np.ndarray        # (N+1,)
    K: float
    residual_E: float
    residual_V: float | None
    residual_V_note: str
    focal: bool
    literal: bool = False

    @property
    def n(self) -> int:
        return self.E.shape[1]

    def E_at(self, t):
        return CubicSpline(self.t, self.E, axis=0)(t)

    def V_at(self, t):
        return CubicSpline(self.t, self.V)(t)


def variance_rate(spec: ScenarioSpec) -> float:
    """Per-coordinate variance production rate delta^2 + lambda E[Z_i^2]."""
    if spec.lam > 0:
        _, M2 = jump_moments(spec.jump)
        return spec.delta**2 + spec.lam * M2 / spec.n
    return spec.delta**2


def _rk4_second_order(a_h, forcing_h, y0, yp0, h, N):
    """Integrate y'' = -2 a(t) y + f(t) on the node grid, returning (y, y').

    ``a_h`` and ``forcing_h`` are values on the half grid (2N+1 points);
    the state may have any width, handled coordinatewise in plain floats.
    """
    width = len(y0)
    y = np.empty((N + 1, width))
    yp = np.empty((N + 1, width))
    y[0] = y0
    yp[0] = yp0
    half, sixth = 0.5 * h, h / 6.0
    for i in range(width):
        cur = float(y0[i])
        curp = float(yp0[i])
        for k in range(N):
            a0, a1, a2 = a_h[2 * k], a_h[2 * k + 1], a_h[2 * k + 2]
            g0, g1, g2 = forcing_h[2 * k][i], forcing_h[2 * k + 1][i], forcing_h[2 * k + 2][i]
            k1y, k1p = curp, -2.0 * a0 * cur + g0
            y2, p2 = cur + half * k1y, curp + half * k1p
            k2y, k2p = p2, -2.0 * a1 * y2 + g1
            y3, p3 = cur + half * k2y, curp + half * k2p
            k3y, k3p = p3, -2.0 * a1 * y3 + g1
            y4, p4 = cur + h * k3y, curp + h * k3p
            k4y, k4p = p4, -2.0 * a2 * y4 + g2
            cur += sixth * (k1y + 2 * k2y + 2 * k3y + k4y)
            curp += sixth * (k1p + 2 * k2p + 2 * k3p + k4p)
            y[k + 1, i] = cur
            yp[k + 1, i] = curp
    return y, yp


def propagate_moments(
    sol: HjbSolution,
    spec: ScenarioSpec,
    b_override=None,
    literal_init: bool = False,
    residual_tol: float = 1e-6,
) -> MomentPath:
    """Propagate E(t) and V(t) forward on the solve grid.

    ``literal_init`` switches to the diagnostic mode in which the initial
    expectation and variance are added without flow propagation factors
    (quadrature forms E = x0 + int w (B + lam M1), V = v0 + K int w^2);
    it exists only for comparison experiments and is known to disagree
    with simulation whenever A != 0 and the initial state is nonzero.
    """
    t = sol.t
    N = len(t) - 1
    h = t[1] - t[0]
    n = spec.n
    u0 = sol.u[0]
    if abs(u0) < 1e-9 * float(np.max(np.abs(sol.u))):
        raise SingularityError("condition (A_int) violated: u(0) = 0")

    a_fn = scalar_fn(spec.cost.a)
    if b_override is not None:
        b_fn = b_override
    elif spec.cost.b.kind == "meanfield":
        raise ScenarioError("mean-field coupled b requires the fixed-point driver")
    else:
        b_fn = vector_fn(spec.cost.b, n)

    lam = spec.lam
    M1 = jump_moments(spec.jump)[0] if lam > 0 else np.zeros(n)
    K = variance_rate(spec)
    x0 = spec.x0
    v0 = spec.initial.v0

    th = np.linspace(0.0, spec.T, 2 * N + 1)
    a_h = eval_scalar_grid(a_fn, th).tolist()

    if literal_init:
        # Quadrature forms via prefix integrals of the weight ratios.
        with np.errstate(divide="ignore", invalid="ignore"):
            gB = (sol.v / sol.u[:, None] + lam * M1) / sol.u[:, None]
            gV = 1.0 / np.square(sol.u)
        cumB = _cumtrapz(gB, t)
        cumV = _cumtrapz(gV[:, None], t)[:, 0]
        E = x0 + sol.u[:, None] * cumB
        V = v0 + K * np.square(sol.u) * cumV
        Ep = np.gradient(E, t, axis=0)
        focal = False
    else:
        A0 = sol.udot[0] / (2.0 * u0)
        B0 = sol.v[0] / u0
        Ep0 = 2.0 * A0 * x0 + B0 + lam * M1
        b_half = (-eval_vector_grid(b_fn, th, n)).tolist()
        E, Ep = _rk4_second_order(a_h, b_half, x0, Ep0, h, N)

        zero_half = [(0.0,)] * (2 * N + 1)
        psi, _ = _rk4_second_order(a_h, zero_half, (0.0,), (1.0 / u0,), h, N)
        psi = psi[:, 0]
        V_pair = (v0 / u0**2) * np.square(sol.u) + K * sol.u * psi
        V_pair[0] = v0
        focal = bool(np.min(V_pair) < -1e-9 * max(1.0, float(np.max(np.abs(V_pair)))))
        V = np.abs(V_pair)

    path = MomentPath(
        t=t, E=E, E_prime=Ep, V=V, K=K,
        residual_E=math.nan, residual_V=None, residual_V_note="", focal=focal,
        literal=literal_init,
    )
    rep = residual_check(path, spec, b_override=b_override)
    path.residual_E = rep.rE
    path.residual_V = rep.rV
    path.residual_V_note = rep.note
    return path


def _cumtrapz(y: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(y)
    dt = np.diff(t)[:, None]
    out[1:] = np.cumsum(0.5 * dt * (y[1:] + y[:-1]), axis=0)
    return out


@dataclass(frozen=True)
class ResidualReport:
    rE: float
    rV: float | None
    note: str


def _central_d1(y: np.ndarray, h: float) -> np.ndarray:
    """5-point central first derivative at interior nodes 2..N-2."""
    return (-y[4:] + 8.0 * y[3:-1] - 8.0 * y[1:-3] + y[:-4]) / (12.0 * h)


def _central_d2(y: np.ndarray, h: float) -> np.ndarray:
    """5-point central second derivative at interior nodes 2..N-2."""
    return (-y[4:] + 16.0 * y[3:-1] - 30.0 * y[2:-2] + 16.0 * y[1:-3] - y[:-4]) / (12.0 * h**2)


def residual_check(path: MomentPath, spec: ScenarioSpec, b_override=None) -> ResidualReport:
    """Max-norm residuals of the second-order moment equations.

    rE checks E'' + 2 a E + b at interior nodes, rV checks
    V'' + 4 a V - ((V')^2 - K^2)/(2V); both use 5-point central stencils
    (the 3-point truncation error would mask the equations on rapidly
    growing solutions).  The variance residual is skipped when V comes
    within 1e-6 of zero, since the equation divides by 2V.
    """
    t, E, V = path.t, path.E, path.V
    h = t[1] - t[0]
    n = E.shape[1]
    a_fn = scalar_fn(spec.cost.a)
    if b_override is not None:
        b_fn = b_override
    elif spec.cost.b.kind == "meanfield":
        raise ScenarioError("residual_check needs an explicit b (pass b_override)")
    else:
        b_fn = vector_fn(spec.cost.b, n)

    mid = t[2:-2]
    a_mid = eval_scalar_grid(a_fn, mid)
    b_mid = eval_vector_grid(b_fn, mid, n)

    Epp = _central_d2(E, h)
    rE = float(np.max(np.abs(Epp + 2.0 * a_mid[:, None] * E[2:-2] + b_mid)))

    if float(np.min(V[2:-2])) < 1e-6:
        return ResidualReport(rE=rE, rV=None, note="skipped (V near zero)")
    Vpp = _central_d2(V, h)
    Vp = _central_d1(V, h)
    rV = float(np.max(np.abs(
        Vpp + 4.0 * a_mid * V[2:-2] - (Vp**2 - path.K**2) / (2.0 * V[2:-2])
    )))
    return ResidualReport(rE=rE, rV=rV, note="")


# ---------------------------------------------------------------------------
# constant-coefficient closed forms


@dataclass(frozen=True)
class ClosedFormMoments:
    """Explicit moment trajectories for constant a, b and production rate K.

    Branch ``oscillatory`` (a > 0):
        E = C1_E sin(nu t) + C2_E cos(nu t) - b/(2a),          nu = sqrt(2a)
        V = v_const + C1_V sin(2 nu t) + C2_V cos(2 nu t)
    Branch ``exponential`` (a < 0):
        E = C1_E sinh(mu t) + C2_E cosh(mu t) - b/(2a),        mu = sqrt(-2a)
        V = C1_V + v_const exp(2 mu t) + C2_V exp(-2 mu t)
    Branch ``polynomial`` (a = 0):
        E = C2_E + C1_E t - b t^2 / 2
        V = v_const + C1_V t + C2_V t^2

    Every instance is residual-validated against the second-order moment
    equations before being returned.
    """

    branch: str
    a: float
    b: float
    K: float
    C1_E: float
    C2_E: float
    C1_V: float
    C2_V: float
    v_const: float

    def E_fn(self, t):
        t = np.asarray(t, float)
        if self.branch == "oscillatory":
            nu = math.sqrt(2.0 * self.a)
            return self.C1_E * np.sin(nu * t) + self.C2_E * np.cos(nu * t) - self.b / (2 * self.a)
        if self.branch == "exponential":
            mu = math.sqrt(-2.0 * self.a)
            return self.C1_E * np.sinh(mu * t) + self.C2_E * np.cosh(mu * t) - self.b / (2 * self.a)
        return self.C2_E + self.C1_E * t - 0.5 * self.b * t * t

    def V_fn(self, t):
        t = np.asarray(t, float)
        if self.branch == "oscillatory":
            nu2 = 2.0 * math.sqrt(2.0 * self.a)
            return self.v_const + self.C1_V * np.sin(nu2 * t) + self.C2_V * np.cos(nu2 * t)
        if self.branch == "exponential":
            mu2 = 2.0 * math.sqrt(-2.0 * self.a)
            return self.C1_V + self.v_const * np.exp(mu2 * t) + self.C2_V * np.exp(-mu2 * t)
        return self.v_const + self.C1_V * t + self.C2_V * t * t

    def _derivs(self, t):
        """Analytic (E', E'', V', V'') used by the residual validation."""
        t = np.asarray(t, float)
        if self.branch == "oscillatory":
            nu = math.sqrt(2.0 * self.a)
            s, c = np.sin(nu * t), np.cos(nu * t)
            Ep = nu * (self.C1_E * c - self.C2_E * s)
            Epp = -nu**2 * (self.C1_E * s + self.C2_E * c)
            s2, c2 = np.sin(2 * nu * t), np.cos(2 * nu * t)
            Vp = 2 * nu * (self.C1_V * c2 - self.C2_V * s2)
            Vpp = -4 * nu**2 * (self.C1_V * s2 + self.C2_V * c2)
            return Ep, Epp, Vp, Vpp
        if self.branch == "exponential":
            mu = math.sqrt(-2.0 * self.a)
            sh, ch = np.sinh(mu * t), np.cosh(mu * t)
            Ep = mu * (self.C1_E * ch + self.C2_E * sh)
            Epp = mu**2 * (self.C1_E * sh + self.C2_E * ch)
            ep, em = np.exp(2 * mu * t), np.exp(-2 * mu * t)
            Vp = 2 * mu * (self.v_const * ep - self.C2_V * em)
            Vpp = 4 * mu**2 * (self.v_const * ep + self.C2_V * em)
            return Ep, Epp, Vp, Vpp
        Ep = self.C1_E - self.b * t
        Epp = np.full_like(t, -self.b)
        Vp = self.C1_V + 2 * self.C2_V * t
        Vpp = np.full_like(t, 2 * self.C2_V)
        return Ep, Epp, Vp, Vpp


def closed_form_moments_const(
    a: float,
    b: float,
    K: float,
    init: dict,
    t_span: float = 1.0,
    validate_tol: float = 1e-8,
) -> ClosedFormMoments:
    """Fit the closed-form constants from initial data and validate them.

    ``init`` carries E0, E0p (initial slope), V0 and V0p.  The oscillatory
    and exponential variance branches require V0 > 0; the returned form is
    checked against the second-order moment equations on a sample grid and
    a residual failure raises rather than returning a bad formula.
    """
    E0 = float(init["E0"])
    E0p = float(init["E0p"])
    V0 = float(init["V0"])
    V0p = float(init["V0p"])

    if a > 0:
        branch = "oscillatory"
        nu = math.sqrt(2.0 * a)
        C1_E = E0p / nu
        C2_E = E0 + b / (2.0 * a)
        if not V0 > 0:
            raise ScenarioError("V0 must be > 0 for the oscillatory variance branch")
        C1_V = V0p / (2.0 * nu)
        C2_V = (V0**2 - C1_V**2 + K**2 / (8.0 * a)) / (2.0 * V0)
        v_const = V0 - C2_V
        form = ClosedFormMoments(branch, a, b, K, C1_E, C2_E, C1_V, C2_V, v_const)
    elif a < 0:
        branch = "exponential"
        mu = math.sqrt(-2.0 * a)
        C1_E = E0p / mu
        C2_E = E0 + b / (2.0 * a)
        if not V0 > 0:
            raise ScenarioError("V0 must be > 0 for the exponential variance branch")
        d = V0p / (2.0 * mu)
        D0 = (V0**2 - d**2 - K**2 / (8.0 * a)) / (2.0 * V0)
        s = V0 - D0
        P = 0.5 * (s + d)
        Q = 0.5 * (s - d)
        form = ClosedFormMoments(branch, a, b, K, C1_E, C2_E, D0, Q, P)
    else:
        branch = "polynomial"
        if V0 < 1e-12:
            if abs(abs(V0p) - K) > 1e-9 * max(1.0, K):
                raise ScenarioError("V0 = 0 requires |V0p| = K in the polynomial branch")
            V2 = 0.0
        else:
            V2 = (V0p**2 - K**2) / (4.0 * V0)
        form = ClosedFormMoments(branch, a, b, K, E0p, E0, V0p, V2, V0)

    _validate_closed_form(form, t_span, validate_tol)
    return form


def _validate_closed_form(form: ClosedFormMoments, t_span: float, tol: float) -> None:
    t = np.linspace(0.0, t_span, 201)
    E = form.E_fn(t)
    V = form.V_fn(t)
    Ep, Epp, Vp, Vpp = form._derivs(t)
    rE = float(np.max(np.abs(Epp + 2.0 * form.a * E + form.b)))
    scale_E = max(1.0, float(np.max(np.abs(E))))
    if rE > tol * scale_E:
        raise FormulaValidationError(f"expectation closed form residual {rE:.3e}")
    mask = V > 1e-9
    if mask.any():
        r = Vpp[mask] + 4.0 * form.a * V[mask] - (Vp[mask] ** 2 - form.K**2) / (2.0 * V[mask])
        rV = float(np.max(np.abs(r)))
        scale_V = max(1.0, float(np.max(np.abs(V))))
        if rV > tol * scale_V:
            raise FormulaValidationError(f"variance closed form residual {rV:.3e}")


# ---------------------------------------------------------------------------
# mean-field coupling


@dataclass
class MeanFieldSolution:
    sol: HjbSolution
    path: MomentPath
    iterations: int
    residual: float  # max-norm residual of E'' + b2 E' + (2a+b1) E + b0


def solve_meanfield_fixedpoint(
    spec: ScenarioSpec,
    N: int = 4096,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> MeanFieldSolution:
    """Damped Picard iteration for the mean-field coupled slope b(t).

    Freezes b_k(t) = b0 + b1 E_k(t) + b2 E_k'(t), re-solves the backward
    system and the forward moments, and averages successive expectation
    iterates.  Iterations run on a coarse grid (whose discretization error
    sits far below the fixed-point tolerance); the converged coupling is
    then re-solved once at the requested resolution, and the result is
    verified against the reduced linear ODE E'' + b2 E' + (2a+b1) E = -b0.
    """
    if spec.cost.b.kind != "meanfield":
        raise ScenarioError("scenario does not use a mean-field coupled b")
    if spec.cost.a.kind != "const":
        raise ScenarioError("mean-field fixed point requires constant a")
    coef = spec.cost.b
    b0 = np.asarray(coef.b0 if len(coef.b0) == spec.n else coef.b0 * spec.n, float)
    b1, b2 = coef.b1, coef.b2

    N_it = min(N, max(256, N // 16))
    t_it = np.linspace(0.0, spec.T, N_it + 1)
    E = np.tile(spec.x0, (N_it + 1, 1))
    Ep = np.zeros_like(E)
    E_map_prev = None

    def frozen_b(grid_t, E_grid, Ep_grid):
        E_sp = CubicSpline(grid_t, E_grid, axis=0)
        Ep_sp = CubicSpline(grid_t, Ep_grid, axis=0)
        return lambda tk: b0 + b1 * E_sp(tk) + b2 * Ep_sp(tk)

    iteration = 0
    converged = b1 == 0.0 and b2 == 0.0  # constant map: one solve is the fixed point
    while not converged:
        iteration += 1
        if iteration > max_iter:
            raise ConvergenceError(
                f"mean-field fixed point did not converge in {max_iter} iterations "
                f"(last increment {delta:.3e})"
            )
        b_fn = frozen_b(t_it, E, Ep)
        path = propagate_moments(
            solve_backward(spec, N_it, b_override=b_fn), spec, b_override=b_fn
        )
        # Converged when consecutive map outputs agree or the damped
        # increment drops below tol, whichever happens first.
        delta = 0.5 * float(np.max(np.abs(path.E - E)))
        if E_map_prev is not None:
            delta = min(delta, float(np.max(np.abs(path.E - E_map_prev))))
        if delta < tol:
            E, Ep = path.E, path.E_prime
            break
        E_map_prev = path.E
        E = 0.5 * (path.E + E)
        Ep = 0.5 * (path.E_prime + Ep)

    # Final pass with the converged coupling at the requested resolution
    # keeps (sol, path, b) consistent.
    iteration = max(iteration, 1)
    t = np.linspace(0.0, spec.T, N + 1)
    b_fn = frozen_b(t_it, E, Ep)
    sol = solve_backward(spec, N, b_override=b_fn)
    path = propagate_moments(sol, spec, b_override=b_fn)

    h = t[1] - t[0]
    a = spec.cost.a.values[0]
    Epp = (path.E[2:] - 2.0 * path.E[1:-1] + path.E[:-2]) / h**2
    residual = float(np.max(np.abs(
        Epp + b2 * path.E_prime[1:-1] + (2.0 * a + b1) * path.E[1:-1] + b0
    )))
    return MeanFieldSolution(sol=sol, path=path, iterations=iteration, residual=residual)


def moments_to_csv(path: MomentPath) -> str:
    """CSV with a header comment carrying K, the residuals and the focal flag."""
    rv = "nan" if path.residual_V is None else f"{path.residual_V:.17g}"
    lines = [
        f"# K={path.K:.17g} residual_E={path.residual_E:.17g} "
        f"residual_V={rv} focal={int(path.focal)}",
        ",".join(["t"] + [f"E_{i + 1}" for i in range(path.n)] + ["V"]),
    ]
    for k in range(len(path.t)):
        row = [path.t[k], *path.E[k], path.V[k]]
        lines.append(",".join(f"{x:.17g}" for x in row))
    return "\n".join(lines) + "\n"


def moments_from_csv(text: str) -> MomentPath:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    meta = {}
    for token in lines[0].lstrip("# ").split():
        key, _, val = token.partition("=")
        meta[key] = val
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[2:]])
    t = data[:, 0]
    E = data[:, 1:-1]
    V = data[:, -1]
    rv = float(meta.get("residual_V", "nan"))
    return MomentPath(
        t=t, E=E, E_prime=np.gradient(E, t, axis=0), V=V,
        K=float(meta.get("K", "nan")),
        residual_E=float(meta.get("residual_E", "nan")),
        residual_V=None if math.isnan(rv) else rv,
        residual_V_note="",
        focal=bool(int(meta.get("focal", "0"))),
    )
