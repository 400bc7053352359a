"""Characteristic functions and densities of the controlled process.

Two independent representations of the fundamental solution's
characteristic function are provided: direct quadrature of

    G_hat(t, w) = exp[ -int_0^t ( delta^2/2 |R|^2 + i B(eta) . R
                                  - lambda (p_hat(R) - 1) ) d eta ],
    R(t, eta, w) = w * weight(t, eta),

and the moment form

    G_hat(t, w) = exp[ -|w|^2 V(t)/2 - i w . E(t) + lambda Q(t, w) ],
    Q = int_0^t ( p_hat(R) - 1 + i M1 . R + (M2/n) |R|^2 / 2 ) d eta,

whose Q collects only the third-and-higher order jump contributions, so
that for lambda = 0 the characteristic function is the Gaussian in
(E, V) exactly.  Their pointwise agreement is a standing test.  General
initial laws enter by the method of characteristics:
m_hat(t, w) = G_hat(t, w) * m0_hat(w * weight(t, 0)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConvergenceError, GridResolutionError, ScenarioError, SingularityError
from .hjb import HjbSolution, solve_backward
from .model import InitialLaw, ScenarioSpec, jump_charfn_batch, jump_moments, jump_second_moment_matrix
from .moments import MomentPath, propagate_moments

_MAX_QUAD_NODES = 1 << 16


@dataclass
class DensityGrid:
    """Spatial density at a fixed time with normalization and moment metadata."""

    t: float
    x: np.ndarray
    m: np.ndarray
    mass: float
    mean: float
    variance: float

    def to_csv(self) -> str:
        lines = [
            f"# t={self.t:.17g} mass={self.mass:.17g} "
            f"mean={self.mean:.17g} variance={self.variance:.17g}",
            "x,m",
        ]
        lines += [f"{x:.17g},{m:.17g}" for x, m in zip(self.x, self.m)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "DensityGrid":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        meta = {}
        for token in lines[0].lstrip("# ").split():
            key, _, val = token.partition("=")
            meta[key] = float(val)
        data = np.array([[float(x) for x in ln.split(",")] for ln in lines[2:]])
        return cls(t=meta["t"], x=data[:, 0], m=data[:, 1],
                   mass=meta["mass"], mean=meta["mean"], variance=meta["variance"])


def gaussian_density(E, V: float, x) -> float | np.ndarray:
    """Isotropic Gaussian density with mean E and per-coordinate variance V."""
    if not V > 0:
        raise ScenarioError("V must be > 0")
    E = np.atleast_1d(np.asarray(E, float))
    n = E.shape[0]
    x = np.asarray(x, float)
    if x.ndim <= 1 and x.shape in ((), (n,)):
        dx = np.atleast_1d(x) - E
        return float((2.0 * math.pi * V) ** (-n / 2.0) * math.exp(-(dx @ dx) / (2.0 * V)))
    if n == 1 and x.ndim == 1:
        dx = x - E[0]
        return (2.0 * math.pi * V) ** -0.5 * np.exp(-dx * dx / (2.0 * V))
    dx = x - E
    return (2.0 * math.pi * V) ** (-n / 2.0) * np.exp(-np.sum(dx * dx, axis=-1) / (2.0 * V))


class CharFunEvaluator:
    """Evaluates the solution characteristic function for one scenario.

    Holds the backward solution, the fundamental-solution moment path
    (started from a Dirac mass at the origin) and the eta-quadrature
    resolution M.  Evaluations double M until two successive composite
    Simpson values agree to 1e-6 and fail if that never happens.
    """

    def __init__(self, spec: ScenarioSpec, sol: HjbSolution, fundamental: MomentPath, M: int = 512):
        if M < 2 or M % 2:
            raise ValueError("M must be a positive even integer")
        self.spec = spec
        self.sol = sol
        self.fundamental = fundamental
        self.M = M
        self._E_sp = CubicSpline(fundamental.t, fundamental.E, axis=0)
        self._V_sp = CubicSpline(fundamental.t, fundamental.V)
        if spec.lam > 0:
            self._M1, self._M2 = jump_moments(spec.jump)
            if spec.n > 1:
                mat = jump_second_moment_matrix(spec.jump)
                iso = self._M2 / spec.n * np.eye(spec.n)
                if float(np.max(np.abs(mat - iso))) > 1e-10 * max(1.0, self._M2):
                    raise ScenarioError(
                        "characteristic-function evaluation for dimension > 1 requires an "
                        "isotropic jump second-moment matrix"
                    )
        else:
            self._M1, self._M2 = np.zeros(spec.n), 0.0

    @classmethod
    def from_scenario(cls, spec: ScenarioSpec, N: int = 4096, M: int = 512) -> "CharFunEvaluator":
        from dataclasses import replace

        sol = solve_backward(spec, N)
        spec_fund = replace(
            spec, initial=InitialLaw(kind="dirac", x0=(0.0,) * spec.n, v0=0.0)
        )
        fundamental = propagate_moments(sol, spec_fund)
        return cls(spec, sol, fundamental, M=M)

    # -- internals ---------------------------------------------------------

    def _check_time(self, t: float) -> None:
        if not 0.0 <= t <= self.spec.T:
            raise ScenarioError(f"t={t} outside horizon [0, {self.spec.T}]")
        if self.sol.is_singular_on(t):
            raise SingularityError(f"scenario has a focal time on [0, {t}]")
        if abs(self.sol.u[0]) < 1e-12:
            raise SingularityError("condition (A_int) violated: u(0) = 0")

    def _omega_matrix(self, omegas) -> np.ndarray:
        w = np.asarray(omegas, float)
        if w.ndim == 0:
            w = w.reshape(1, 1)
        elif w.ndim == 1:
            if self.spec.n == 1:
                w = w[:, None]
            else:
                w = w[None, :]
        if w.shape[-1] != self.spec.n:
            raise ScenarioError(f"omega: expected vectors of length {self.spec.n}")
        return w

    def _simpson_batch(self, t: float, omegas: np.ndarray, integrand) -> np.ndarray:
        """Adaptive composite Simpson of `integrand` over eta in [0, t].

        The whole omega batch shares one quadrature resolution, which keeps
        the quadrature error smooth in omega (finite-difference moment
        extraction relies on that).
        """
        if t == 0.0:
            return np.zeros(omegas.shape[0], complex)
        M = self.M
        prev = None
        while M <= _MAX_QUAD_NODES:
            eta = np.linspace(0.0, t, M + 1)
            wts = np.ones(M + 1)
            wts[1:-1:2] = 4.0
            wts[2:-1:2] = 2.0
            wts *= (t / M) / 3.0
            val = integrand(eta) @ wts
            if prev is not None and float(np.max(np.abs(val - prev))) <= 1e-6:
                return val
            prev = val
            M *= 2
        raise ConvergenceError("eta-quadrature did not stabilize (M vs 2M differ > 1e-6)")

    def _shape_result(self, val: np.ndarray, omega):
        if np.ndim(omega) == 0 or (np.ndim(omega) == 1 and self.spec.n > 1):
            return complex(val[0])
        return val

    def _ratio(self, t: float, eta: np.ndarray) -> np.ndarray:
        return float(self.sol.u_at(t)) / self.sol.u_at(eta)

    # -- public evaluations ------------------------------------------------

    def eval_fundamental_charfun(self, t: float, omega) -> complex | np.ndarray:
        """Direct quadrature form of G_hat(t, omega)."""
        self._check_time(t)
        w = self._omega_matrix(omega)
        spec = self.spec

        def integrand(eta):
            wt = self._ratio(t, eta)                       # (M+1,)
            R = w[:, None, :] * wt[None, :, None]          # (m, M+1, n)
            quad = 0.5 * spec.delta**2 * np.sum(R * R, axis=-1)
            u_eta = self.sol.u_at(eta)
            B_eta = self.sol._v_spline(eta) / u_eta[:, None]   # (M+1, n)
            lin = 1j * np.einsum("ij,mij->mi", B_eta, R)
            out = quad + lin
            if spec.lam > 0:
                out = out - spec.lam * (jump_charfn_batch(spec.jump, R) - 1.0)
            return out

        return self._shape_result(np.exp(-self._simpson_batch(t, w, integrand)), omega)

    def eval_charfun_via_moments(self, t: float, omega) -> complex | np.ndarray:
        """Moment form of G_hat; identical to the direct form by construction."""
        self._check_time(t)
        w = self._omega_matrix(omega)
        spec = self.spec
        E = np.atleast_1d(self._E_sp(t))
        V = float(self._V_sp(t))
        log_g = -0.5 * np.sum(w * w, axis=-1) * V - 1j * (w @ E)
        if spec.lam > 0:
            m2_pc = self._M2 / spec.n
            M1 = self._M1

            def integrand(eta):
                wt = self._ratio(t, eta)
                R = w[:, None, :] * wt[None, :, None]
                comp = 1j * (R @ M1) + 0.5 * m2_pc * np.sum(R * R, axis=-1)
                return jump_charfn_batch(spec.jump, R) - 1.0 + comp

            log_g = log_g + spec.lam * self._simpson_batch(t, w, integrand)
        return self._shape_result(np.exp(log_g), omega)

    def initial_charfn(self, zeta: np.ndarray, initial: InitialLaw | None = None) -> np.ndarray:
        """m0_hat on a batch of frequency vectors, shape (..., n)."""
        law = initial if initial is not None else self.spec.initial
        zeta = np.asarray(zeta, float)
        x0 = np.asarray(law.x0, float)
        phase = -1j * (zeta @ x0)
        if law.kind == "gaussian":
            return np.exp(phase - 0.5 * law.v0 * np.sum(zeta * zeta, axis=-1))
        return np.exp(phase)

    def eval_solution_charfun(self, t: float, omega, initial: InitialLaw | None = None):
        """m_hat(t, omega) = G_hat(t, omega) * m0_hat(omega * weight(t, 0))."""
        w = self._omega_matrix(omega)
        g = np.asarray(self.eval_fundamental_charfun(t, w))
        zeta = w * self.sol.weight(t, 0.0)
        m0 = self.initial_charfn(zeta, initial)
        return self._shape_result(g.reshape(-1) * m0, omega)

    def solution_moments(self, t: float, initial: InitialLaw | None = None) -> tuple[np.ndarray, float]:
        """Mean and per-coordinate variance of the full solution at time t."""
        law = initial if initial is not None else self.spec.initial
        wt = self.sol.weight(t, 0.0)
        E = wt * np.asarray(law.x0, float) + np.atleast_1d(self._E_sp(t))
        V = wt**2 * law.v0 + float(self._V_sp(t))
        return E, V

    def invert_density(
        self,
        t: float,
        n_x: int = 4096,
        x_lo: float | None = None,
        x_hi: float | None = None,
        initial: InitialLaw | None = None,
    ) -> DensityGrid:
        """Density at time t by inverse DFT of the solution characteristic function.

        One-dimensional only.  Default bounds are mean +- 10 standard
        deviations; explicit bounds must cover at least 8.
        """
        if self.spec.n != 1:
            raise ScenarioError("density inversion supports dimension 1 only")
        self._check_time(t)
        E, V = self.solution_moments(t, initial)
        mean, sd = float(E[0]), math.sqrt(max(V, 0.0))
        if not sd > 0:
            raise ScenarioError("degenerate (zero-variance) density cannot be gridded")
        if x_lo is None:
            x_lo = mean - 10.0 * sd
        if x_hi is None:
            x_hi = mean + 10.0 * sd
        if x_lo > mean - 8.0 * sd or x_hi < mean + 8.0 * sd:
            raise GridResolutionError("density grid bounds must cover mean +- 8 sigma")

        x = np.linspace(x_lo, x_hi, n_x, endpoint=False)
        dx = x[1] - x[0]
        omega = 2.0 * math.pi * np.fft.fftfreq(n_x, d=dx)
        mhat = np.empty(n_x, complex)
        for start in range(0, n_x, 512):
            chunk = omega[start : start + 512]
            mhat[start : start + 512] = self.eval_solution_charfun(t, chunk, initial)
        m = np.fft.ifft(mhat * np.exp(1j * omega * x_lo)).real / dx

        mass = float(np.trapezoid(m, x))
        if abs(mass - 1.0) > 1e-3:
            raise GridResolutionError(f"grid under-resolved: density mass {mass:.6f}")
        mean_out = float(np.trapezoid(x * m, x))
        var_out = float(np.trapezoid((x - mean_out) ** 2 * m, x))
        return DensityGrid(t=t, x=x, m=m, mass=mass, mean=mean_out, variance=var_out)

    def moment_via_charfun(self, t: float, k: int, h: float = 1e-3) -> float:
        """k-th raw moment (k in 1..4) from 5-point stencils of m_hat at omega 0."""
        if self.spec.n != 1:
            raise ScenarioError("moment extraction supports dimension 1 only")
        if k not in (1, 2, 3, 4):
            raise ScenarioError("moment order must be 1..4")
        w = np.array([-2 * h, -h, 0.0, h, 2 * h])
        f = np.asarray(self.eval_solution_charfun(t, w))
        if k == 1:
            d = (-f[4] + 8 * f[3] - 8 * f[1] + f[0]) / (12 * h)
        elif k == 2:
            d = (-f[4] + 16 * f[3] - 30 * f[2] + 16 * f[1] - f[0]) / (12 * h**2)
        elif k == 3:
            d = (f[4] - 2 * f[3] + 2 * f[1] - f[0]) / (2 * h**3)
        else:
            d = (f[4] - 4 * f[3] + 6 * f[2] - 4 * f[1] + f[0]) / h**4
        return float((1j**k * d).real)
