"""Backward coefficient system for the quadratic pay-off.

The quadratic coefficient A(t) solves the Riccati equation
``A' = -2 A^2 - a(t)`` with terminal value ``A(T) = A_T``.  Instead of
integrating it directly (it can blow up inside the horizon), we use the
substitution ``A = u'/(2u)`` which turns it into the linear oscillator
``u'' + 2 a(t) u = 0`` with ``u(T) = 1``, ``u'(T) = 2 A_T`` -- regular
everywhere.  The linear coefficient is carried as ``v = u B`` (also
regular); the exponential weight ``exp(2 int_eta^t A)`` is the exact signed
ratio ``u(t)/u(eta)``.  A, B and the constant term C are derived
quantities; C is only meaningful up to the first focal time when its
sources are singular there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .errors import GridResolutionError, ScenarioError, SingularityError
from .model import (
    ScenarioSpec,
    eval_scalar_grid,
    eval_vector_grid,
    jump_moments,
    scalar_fn,
    vector_fn,
)

# |u| below this is treated as a zero of the linearizer.
U_ZERO_TOL = 1e-12


@dataclass
class HjbSolution:
    """Grid solution of the backward coefficient system.

    ``u`` and ``udot`` are the linearizer and its derivative (regular on all
    of [0, T]); ``v = u B`` is regular as well.  ``A = udot/(2u)`` and
    ``B = v/u`` carry NaN markers where ``|u| < 1e-12``.  ``C`` is NaN past
    the first focal time (going backward from T) whenever its sources are
    singular there.
    """

    t: np.ndarray
    u: np.ndarray
    udot: np.ndarray
    A: np.ndarray
    v: np.ndarray  # (N+1, n)
    B: np.ndarray  # (N+1, n)
    C: np.ndarray
    singular_times: tuple[float, ...]
    spec: ScenarioSpec

    @property
    def n(self) -> int:
        return self.v.shape[1]

    @cached_property
    def _u_spline(self) -> CubicSpline:
        return CubicSpline(self.t, self.u)

    @cached_property
    def _udot_spline(self) -> CubicSpline:
        return CubicSpline(self.t, self.udot)

    @cached_property
    def _v_spline(self) -> CubicSpline:
        return CubicSpline(self.t, self.v, axis=0)

    def u_at(self, t):
        return self._u_spline(t)

    def A_at(self, t):
        return self._udot_spline(t) / (2.0 * self._u_spline(t))

    def B_at(self, t):
        u = self._u_spline(t)
        return self._v_spline(t) / (u[..., None] if np.ndim(t) else u)

    def C_at(self, t) -> float:
        finite = np.isfinite(self.C)
        if not finite.any():
            return math.nan
        t0 = self.t[finite][0]
        if np.any(np.asarray(t) < t0 - 1e-15):
            return math.nan
        return float(np.interp(t, self.t[finite], self.C[finite]))

    def weight(self, t: float, eta: float) -> float:
        """exp(2 int_eta^t A) as the signed ratio u(t)/u(eta)."""
        if t == eta:
            return 1.0
        ue = float(self._u_spline(eta))
        if abs(ue) < U_ZERO_TOL:
            return math.nan
        return float(self._u_spline(t)) / ue

    def is_singular_on(self, t_max: float, t_min: float = 0.0) -> bool:
        return any(t_min <= s <= t_max for s in self.singular_times)


def weight(sol: HjbSolution, t: float, eta: float) -> float:
    """Module-level alias for :meth:`HjbSolution.weight`."""
    return sol.weight(t, eta)


def solve_backward(spec: ScenarioSpec, N: int = 4096, b_override=None) -> HjbSolution:
    """Integrate the backward coefficient system on a uniform N+1-node grid.

    Classical fixed-step 4th order Runge-Kutta, backward from T, on the
    regular state (u, u', v, C).  ``b_override`` substitutes an explicit
    time function for the running-cost slope, which is how the mean-field
    fixed point freezes its coupling; a mean-field scenario without an
    override is rejected.
    """
    if N < 100:
        raise ValueError("N must be >= 100")
    n = spec.n
    a_fn = scalar_fn(spec.cost.a)
    c_fn = scalar_fn(spec.cost.c)
    if b_override is not None:
        b_fn = b_override
    elif spec.cost.b.kind == "meanfield":
        raise ScenarioError("mean-field coupled b requires the fixed-point driver")
    else:
        b_fn = vector_fn(spec.cost.b, n)

    lam = spec.lam
    if lam > 0:
        M1, M2 = jump_moments(spec.jump)
        M1 = tuple(float(m) for m in M1)
    else:
        M1, M2 = (0.0,) * n, 0.0
    d2n = n * spec.delta**2
    T = spec.T
    h = T / N

    # Coefficients at nodes and midpoints (index 2k <-> node k); plain
    # Python floats keep the integration loop off numpy scalar overhead.
    th = np.linspace(0.0, T, 2 * N + 1)
    a_h = eval_scalar_grid(a_fn, th).tolist()
    c_h = eval_scalar_grid(c_fn, th).tolist()
    b_h = [tuple(row) for row in eval_vector_grid(b_fn, th, n).tolist()]

    u = np.empty(N + 1)
    udot = np.empty(N + 1)
    v = np.empty((N + 1, n))
    C = np.empty(N + 1)
    u[N] = 1.0
    udot[N] = 2.0 * spec.terminal.A_T
    v[N] = spec.terminal.B_T
    C[N] = spec.terminal.C_T

    def rhs(idx, uu, ud, vv, cc):
        a = a_h[idx]
        b = b_h[idx]
        uz = uu if uu != 0.0 else 1e-300
        A = ud / (2.0 * uz)
        bsq = 0.0
        m1b = 0.0
        dv = [0.0] * n
        for i in range(n):
            Bi = vv[i] / uz
            bsq += Bi * Bi
            m1b += M1[i] * Bi
            dv[i] = -lam * M1[i] * ud - b[i] * uu
        dC = -c_h[idx] - 0.5 * bsq - d2n * A - lam * (M2 * A + m1b)
        return ud, -2.0 * a * uu, dv, dC

    for k in range(N, 0, -1):
        uu, ud, vv, cc = u[k], udot[k], tuple(v[k]), C[k]
        i0, i1, i2 = 2 * k, 2 * k - 1, 2 * k - 2
        k1 = rhs(i0, uu, ud, vv, cc)
        s = -0.5 * h
        k2 = rhs(i1, uu + s * k1[0], ud + s * k1[1],
                 tuple(vv[i] + s * k1[2][i] for i in range(n)), cc + s * k1[3])
        k3 = rhs(i1, uu + s * k2[0], ud + s * k2[1],
                 tuple(vv[i] + s * k2[2][i] for i in range(n)), cc + s * k2[3])
        s = -h
        k4 = rhs(i2, uu + s * k3[0], ud + s * k3[1],
                 tuple(vv[i] + s * k3[2][i] for i in range(n)), cc + s * k3[3])
        w = -h / 6.0
        u[k - 1] = uu + w * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        udot[k - 1] = ud + w * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        for i in range(n):
            v[k - 1, i] = vv[i] + w * (k1[2][i] + 2 * k2[2][i] + 2 * k3[2][i] + k4[2][i])
        C[k - 1] = cc + w * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])

    # Derived quantities with non-finite markers at zeros of u.
    near_zero = np.abs(u) < U_ZERO_TOL
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        A = np.where(near_zero, np.nan, udot / (2.0 * np.where(near_zero, 1.0, u)))
        B = np.where(near_zero[:, None], np.nan, v / np.where(near_zero, 1.0, u)[:, None])

    singular = _locate_zeros(np.linspace(0.0, T, N + 1), u)
    if singular:
        tainted = spec.delta > 0 or lam > 0 or float(np.max(np.abs(v))) > 1e-12
        if tainted:
            t_grid = np.linspace(0.0, T, N + 1)
            C = np.where(t_grid < max(singular) + 0.5 * h, np.nan, C)

    return HjbSolution(
        t=np.linspace(0.0, T, N + 1),
        u=u,
        udot=udot,
        A=A,
        v=v,
        B=B,
        C=C,
        singular_times=tuple(singular),
        spec=spec,
    )


def _locate_zeros(t: np.ndarray, u: np.ndarray) -> list[float]:
    """Sign-change zeros of u, refined on the interpolating cubic."""
    crossings = np.nonzero(u[:-1] * u[1:] < 0.0)[0]
    if len(crossings) == 0:
        return []
    gaps = np.diff(crossings)
    if np.any(gaps <= 3):
        raise GridResolutionError(
            "grid too coarse to resolve a zero of u: two sign changes within 3 nodes"
        )
    spline = CubicSpline(t, u)
    return [float(brentq(spline, t[k], t[k + 1])) for k in crossings]


def closed_form_A_const(a: float, A_T: float, T: float, t: float) -> float:
    """Riccati solution A(t) for constant quadratic cost.

    Three branches by the sign of a.  Singular times return a signed
    infinity marker rather than raising.
    """
    tau = T - t
    if a > 0:
        theta = math.atan(math.sqrt(2.0 / a) * A_T) + math.sqrt(2.0 * a) * tau
        if abs(math.cos(theta)) < 1e-14:
            return math.copysign(math.inf, math.sin(theta))
        return math.sqrt(a / 2.0) * math.tan(theta)
    if a == 0:
        denom = 1.0 - 2.0 * A_T * tau
        if abs(denom) < 1e-14:
            return math.copysign(math.inf, A_T)
        return A_T / denom
    mu = math.sqrt(-2.0 * a)
    ch = math.cosh(mu * tau)
    sh = math.sinh(mu * tau)
    u = ch - (2.0 * A_T / mu) * sh
    ud = 2.0 * A_T * ch - mu * sh
    if abs(u) < 1e-14:
        return math.copysign(math.inf, ud)
    return ud / (2.0 * u)


def eval_control_phi(sol: HjbSolution, t: float, x) -> tuple[float, np.ndarray]:
    """Pay-off value Phi(t, x) and control field alpha = grad Phi = 2 A x + B."""
    h = sol.t[1] - sol.t[0]
    if any(abs(t - s) < h for s in sol.singular_times) or abs(sol.u_at(t)) < U_ZERO_TOL:
        raise SingularityError(f"pay-off undefined at focal time t={t}")
    x = np.atleast_1d(np.asarray(x, float))
    A = float(sol.A_at(t))
    B = np.atleast_1d(sol.B_at(t))
    C = sol.C_at(t)
    phi = A * float(x @ x) + float(B @ x) + C
    alpha = 2.0 * A * x + B
    return phi, alpha


@dataclass(frozen=True)
class ConditionReport:
    """Finiteness report for the two boundary-quadrature integrability conditions."""

    a_int_first_finite: bool
    a_int_first_value: float
    a_int_second_finite: bool
    a_int_second_value: tuple[float, ...]
    singular_times: tuple[float, ...]


def check_conditions(
    sol: HjbSolution, spec: ScenarioSpec, b_override=None
) -> ConditionReport:
    """Evaluate both integrability conditions at N and 2N grid resolutions.

    The first condition requires the weight exp(2 int_0^T A) to be finite,
    which with the linearizer means u has no zero on [0, T] and u(0) != 0.
    The second integral is flagged divergent when refining the grid moves
    its value by more than 10 percent.
    """
    N = len(sol.t) - 1
    sol2 = solve_backward(spec, 2 * N, b_override=b_override)

    u0 = sol.u[0]
    umax = float(np.max(np.abs(sol.u)))
    first_finite = abs(u0) > U_ZERO_TOL * umax and not sol.singular_times
    first_value = abs(sol.u[-1] / u0) if abs(u0) > U_ZERO_TOL * umax else math.inf

    def second_integral(s: HjbSolution) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            integrand = s.u[-1] * s.v / np.square(s.u)[:, None]
        return np.trapezoid(integrand, s.t, axis=0)

    i1 = second_integral(sol)
    i2 = second_integral(sol2)
    second_finite = bool(np.all(np.isfinite(i1)) and np.all(np.isfinite(i2)))
    if second_finite:
        scale = max(float(np.linalg.norm(i2)), 1e-12)
        second_finite = float(np.linalg.norm(i2 - i1)) <= 0.10 * scale
    if abs(u0) <= U_ZERO_TOL * umax:
        second_finite = False

    return ConditionReport(
        a_int_first_finite=bool(first_finite),
        a_int_first_value=float(first_value),
        a_int_second_finite=second_finite,
        a_int_second_value=tuple(float(x) for x in i2),
        singular_times=sol.singular_times,
    )


def hjb_to_csv(sol: HjbSolution) -> str:
    """CSV with columns t, u, udot, A, v_1..v_n, B_1..B_n, C."""
    n = sol.n
    cols = ["t", "u", "udot", "A"]
    cols += [f"v_{i + 1}" for i in range(n)]
    cols += [f"B_{i + 1}" for i in range(n)]
    cols.append("C")
    lines = [",".join(cols)]
    for k in range(len(sol.t)):
        row = [sol.t[k], sol.u[k], sol.udot[k], sol.A[k]]
        row += list(sol.v[k])
        row += list(sol.B[k])
        row.append(sol.C[k])
        lines.append(",".join(f"{x:.17g}" for x in row))
    return "\n".join(lines) + "\n"


def hjb_from_csv(text: str, spec: ScenarioSpec | None = None) -> HjbSolution:
    """Rebuild an HjbSolution from its CSV serialization."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    n = sum(1 for name in header if name.startswith("v_"))
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    t, u, udot, A = data[:, 0], data[:, 1], data[:, 2], data[:, 3]
    v = data[:, 4 : 4 + n]
    B = data[:, 4 + n : 4 + 2 * n]
    C = data[:, 4 + 2 * n]
    return HjbSolution(
        t=t,
        u=u,
        udot=udot,
        A=A,
        v=v,
        B=B,
        C=C,
        singular_times=tuple(_locate_zeros(t, u)),
        spec=spec,
    )
