"""Cost-parameter recovery from observed moment trajectories.

Constant coefficients only: the expectation follows one of three explicit
families depending on the sign of a (trigonometric, hyperbolic, or
quadratic in t), so recovery reduces to picking the branch and fitting
(a, b) plus the linear constants.  The frequency/rate is profiled out:
for a fixed nu the model is linear in the remaining constants, so the
nonlinear search runs over log(nu) alone, multi-started on a fixed grid.
The noise scale K is then identified from the variance series with the
branch and frequency frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .errors import ConvergenceError, ScenarioError

BRANCHES = ("oscillatory", "exponential", "polynomial")
_NU_STARTS = np.logspace(-2, 2, 16)
_RSS_FLOOR = 1e-300


@dataclass(frozen=True)
class ObservedSeries:
    """Observed (t_i, E_i, V_i) samples from a single horizon."""

    t: np.ndarray
    E: np.ndarray  # (m,) or (m, n)
    V: np.ndarray  # (m,)

    def __post_init__(self):
        t = np.asarray(self.t, float)
        E = np.asarray(self.E, float)
        V = np.asarray(self.V, float)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "E", E if E.ndim == 2 else E[:, None])
        object.__setattr__(self, "V", V)
        if len(t) < 8:
            raise ScenarioError("observed series needs at least 8 samples")
        if np.any(np.diff(t) <= 0):
            raise ScenarioError("observation times must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(self.E)) and np.all(np.isfinite(V))):
            raise ScenarioError("observed series contains non-finite values")
        if np.any(V < 0):
            raise ScenarioError("variance observations must be nonnegative")

    @property
    def n(self) -> int:
        return self.E.shape[1]


@dataclass
class RecoveredParams:
    """Fitted branch, cost parameters and model constants.

    C1/C2 follow the branch conventions of the closed forms (sin/sinh and
    cos/cosh coefficients; for the polynomial branch C1 is the linear and
    C2 the constant coefficient of E).  ``cov_ab`` is the Gauss-Newton
    covariance of (a, b); ``identifiable`` is False when the (a, b)
    direction is degenerate, e.g. for a constant series.
    """

    branch: str
    a: float
    b: np.ndarray
    K: float
    C1: np.ndarray
    C2: np.ndarray
    C1_V: float
    C2_V: float
    v_const: float
    rms_residual_E: float
    rms_residual_V: float
    cov_ab: np.ndarray
    identifiable: bool
    nu: float = 0.0

    def _freq(self) -> float:
        # Derived from a so that perturbing a moves the regenerated curve.
        return math.sqrt(2.0 * abs(self.a))

    def E_model(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        if self.branch == "oscillatory":
            nu = self._freq()
            basis = np.stack([np.sin(nu * t), np.cos(nu * t)], axis=1)
            return basis @ np.stack([self.C1, self.C2]) - self.b / (2.0 * self.a)
        if self.branch == "exponential":
            mu = self._freq()
            basis = np.stack([np.sinh(mu * t), np.cosh(mu * t)], axis=1)
            return basis @ np.stack([self.C1, self.C2]) - self.b / (2.0 * self.a)
        return self.C2 + np.outer(t, self.C1) - 0.5 * np.outer(t * t, self.b)

    def V_model(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        if self.branch == "oscillatory":
            nu = self._freq()
            return self.v_const + self.C1_V * np.sin(2 * nu * t) + self.C2_V * np.cos(2 * nu * t)
        if self.branch == "exponential":
            mu = self._freq()
            return self.C1_V + self.v_const * np.exp(2 * mu * t) + self.C2_V * np.exp(-2 * mu * t)
        return self.v_const + self.C1_V * t + self.C2_V * t * t

    def to_dict(self) -> dict:
        return {
            "branch": self.branch,
            "a": self.a,
            "b": self.b.tolist(),
            "K": self.K,
            "C1": self.C1.tolist(),
            "C2": self.C2.tolist(),
            "C1_V": self.C1_V,
            "C2_V": self.C2_V,
            "v_const": self.v_const,
            "nu": self.nu,
            "rms_residual_E": self.rms_residual_E,
            "rms_residual_V": self.rms_residual_V,
            "cov_ab": self.cov_ab.tolist(),
            "identifiable": self.identifiable,
        }


def params_from_dict(doc: dict) -> RecoveredParams:
    """Inverse of :meth:`RecoveredParams.to_dict`."""
    return RecoveredParams(
        branch=doc["branch"],
        a=float(doc["a"]),
        b=np.asarray(doc["b"], float),
        K=float(doc["K"]),
        C1=np.asarray(doc["C1"], float),
        C2=np.asarray(doc["C2"], float),
        C1_V=float(doc["C1_V"]),
        C2_V=float(doc["C2_V"]),
        v_const=float(doc["v_const"]),
        rms_residual_E=float(doc["rms_residual_E"]),
        rms_residual_V=float(doc["rms_residual_V"]),
        cov_ab=np.asarray(doc["cov_ab"], float),
        identifiable=bool(doc["identifiable"]),
        nu=float(doc.get("nu", 0.0)),
    )


def _design(branch: str, nu: float, t: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        if branch == "oscillatory":
            return np.stack([np.sin(nu * t), np.cos(nu * t), np.ones_like(t)], axis=1)
        if branch == "exponential":
            return np.stack([np.sinh(nu * t), np.cosh(nu * t), np.ones_like(t)], axis=1)
        return np.stack([np.ones_like(t), t, t * t], axis=1)


def _profiled_fit(branch: str, nu: float, t: np.ndarray, E: np.ndarray):
    """Linear constants and residuals for a frozen frequency/rate."""
    design = _design(branch, nu, t)
    if not np.all(np.isfinite(design)):
        return None, np.full_like(E, 1e50)
    beta, *_ = np.linalg.lstsq(design, E, rcond=None)
    return beta, E - design @ beta


def _fit_branch_E(branch: str, series: ObservedSeries, nu_min: float = 0.0):
    """Best E-fit of one branch; returns (nu, beta, rss) or None.

    ``nu_min`` rejects converged frequencies/rates that are unresolvable
    within the observation window (used during classification, where an
    arbitrarily slow oscillation would shadow the polynomial branch).
    Frequencies above the sampling Nyquist limit alias onto slower ones on
    a uniform grid and are rejected as well; rates are capped where the
    hyperbolic basis overflows.
    """
    t, E = series.t, series.E
    if branch == "polynomial":
        beta, resid = _profiled_fit(branch, 0.0, t, E)
        return 0.0, beta, float(np.sum(resid * resid))

    if branch == "oscillatory":
        nu_max = math.pi / float(np.min(np.diff(t)))
    else:
        nu_max = 700.0 / max(float(t[-1]), 1e-12)

    def residual_fn(log_nu):
        _, resid = _profiled_fit(branch, math.exp(float(log_nu[0])), t, E)
        return resid.ravel()

    best = None
    for idx, nu0 in enumerate(_NU_STARTS):
        try:
            out = least_squares(
                residual_fn, x0=[math.log(nu0)], method="lm",
                xtol=1e-10, ftol=1e-12, gtol=1e-12, max_nfev=400,
            )
        except Exception:
            continue
        nu = float(np.exp(out.x[0]))
        if not nu_min <= nu <= nu_max:
            continue
        rss = float(np.sum(out.fun * out.fun))
        if best is None or rss < best[0] - 1e-15 * max(1.0, best[0]):
            best = (rss, idx, nu)
    if best is None:
        return None
    rss, _, nu = best
    beta, _ = _profiled_fit(branch, nu, t, E)
    return nu, beta, rss


def _aicc(rss: float, m: int, k: int, scale: float) -> float:
    # Fits at numerical zero are indistinguishable; flooring the RSS at the
    # round-off level makes the parameter-count penalty decide between them.
    rss = max(rss, (1e-12 * scale) ** 2 * m, _RSS_FLOOR)
    penalty = 2.0 * k
    if m - k - 1 > 0:
        penalty += 2.0 * k * (k + 1) / (m - k - 1)
    return m * math.log(rss / m) + penalty


def classify_branch(series: ObservedSeries) -> tuple[str, float]:
    """Pick the branch with the smallest small-sample information criterion.

    The criterion is AICc on the expectation fit:
    m ln(RSS/m) + 2k + 2k(k+1)/(m-k-1).  Oscillatory/exponential fits whose
    frequency or rate resolves less than 1.5 radians across the whole
    observation window are treated as degenerate: below that the basis is
    shape-identical to the polynomial branch, which would otherwise shadow
    it on noisy quadratic data.  Returns (branch, confidence) where
    confidence is the criterion gap to the runner-up;
    ('indeterminate', 0.0) when every fit is degenerate.
    """
    m = series.E.size
    window = float(series.t[-1] - series.t[0])
    nu_min = 1.5 / window
    scale = max(1.0, float(np.max(np.abs(series.E))))
    scores = []
    for branch in BRANCHES:
        k = (1 + 3 * series.n) if branch != "polynomial" else 3 * series.n
        fit = _fit_branch_E(branch, series, nu_min=0.0 if branch == "polynomial" else nu_min)
        if fit is None or not math.isfinite(fit[2]):
            scores.append(math.inf)
        else:
            scores.append(_aicc(fit[2], m, k, scale))
    order = sorted(range(3), key=lambda i: (scores[i], i))
    if not math.isfinite(scores[order[0]]):
        return "indeterminate", 0.0
    confidence = scores[order[1]] - scores[order[0]] if math.isfinite(scores[order[1]]) else math.inf
    return BRANCHES[order[0]], float(confidence)


def _sensitivity_covariance(params: RecoveredParams, series: ObservedSeries, rss: float):
    """Gauss-Newton covariance of (a, b) from the moment-equation sensitivities.

    Sensitivities solve s'' + 2 a s = forcing with zero initial data, the
    forcings being -2 E(t) for a and -1 for b, holding the fitted initial
    values fixed.  A rank-deficient Jacobian (e.g. constant series, where
    only 2 a E + b is pinned) flags the pair unidentifiable.
    """
    t_obs = series.t
    t_max = float(t_obs[-1])
    steps = 2000
    h = t_max / steps
    grid = np.linspace(0.0, t_max, steps + 1)
    Emod = params.E_model(grid)[:, 0]
    a = params.a

    def integrate(forcing):
        y = np.zeros(steps + 1)
        yp = 0.0
        cur = 0.0
        for k in range(steps):
            def f(tt, yy, pp):
                return pp, -2.0 * a * yy + forcing(tt)
            t0 = grid[k]
            k1 = f(t0, cur, yp)
            k2 = f(t0 + h / 2, cur + h / 2 * k1[0], yp + h / 2 * k1[1])
            k3 = f(t0 + h / 2, cur + h / 2 * k2[0], yp + h / 2 * k2[1])
            k4 = f(t0 + h, cur + h * k3[0], yp + h * k3[1])
            cur += h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            yp += h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            y[k + 1] = cur
        return y

    E_sp = lambda tt: np.interp(tt, grid, Emod)
    with np.errstate(over="ignore", invalid="ignore"):
        s_a = integrate(lambda tt: -2.0 * E_sp(tt))
        s_b = integrate(lambda tt: -1.0)
        J = np.stack([np.interp(t_obs, grid, s_a), np.interp(t_obs, grid, s_b)], axis=1)
        if not np.all(np.isfinite(J)):
            return np.full((2, 2), math.inf), False
        jtj = J.T @ J
        cond = np.linalg.cond(jtj)
    if not math.isfinite(cond) or cond > 1e10:
        return np.full((2, 2), math.inf), False
    dof = max(series.E.size - 4, 1)
    sigma2 = rss / dof
    return sigma2 * np.linalg.inv(jtj), True


def fit_parameters(series: ObservedSeries, branch: str | None = None) -> RecoveredParams:
    """Fit a, b and the model constants; then K from the variance series.

    The branch is classified when not given.  a is identified from the
    expectation's shape alone; the variance fit reuses the same frequency,
    its constant offset kept free, and K recovered from the coefficient
    constraint with any negative discriminant clamped to zero.
    """
    if branch is None:
        branch, _ = classify_branch(series)
        if branch == "indeterminate":
            raise ConvergenceError("all branch fits are degenerate")
    if branch not in BRANCHES:
        raise ScenarioError(f"unknown branch {branch!r}")

    fit = _fit_branch_E(branch, series)
    if fit is None:
        raise ConvergenceError("no least-squares start converged")
    nu, beta, rss = fit
    t = series.t

    if branch == "oscillatory":
        a = 0.5 * nu * nu
        C1, C2, d = beta[0], beta[1], beta[2]
        b = -2.0 * a * d
    elif branch == "exponential":
        a = -0.5 * nu * nu
        C1, C2, d = beta[0], beta[1], beta[2]
        b = -2.0 * a * d
    else:
        a = 0.0
        C2, C1, p2 = beta[0], beta[1], beta[2]
        b = -2.0 * p2

    # Variance fit with the branch and frequency frozen.
    V = series.V
    if branch == "oscillatory":
        design = np.stack([np.ones_like(t), np.sin(2 * nu * t), np.cos(2 * nu * t)], axis=1)
        (v_const, C1_V, C2_V), *_ = np.linalg.lstsq(design, V, rcond=None)
        K2 = 8.0 * a * (C1_V**2 + C2_V**2 - v_const**2)
        V_fit = design @ np.array([v_const, C1_V, C2_V])
    elif branch == "exponential":
        design = np.stack([np.ones_like(t), np.exp(2 * nu * t), np.exp(-2 * nu * t)], axis=1)
        (C1_V, P, C2_V), *_ = np.linalg.lstsq(design, V, rcond=None)
        K2 = 32.0 * a * P * C2_V - 8.0 * a * C1_V**2
        v_const = P
        V_fit = design @ np.array([C1_V, P, C2_V])
    else:
        design = np.stack([np.ones_like(t), t, t * t], axis=1)
        (v_const, C1_V, C2_V), *_ = np.linalg.lstsq(design, V, rcond=None)
        K2 = C1_V**2 - 4.0 * C2_V * v_const
        V_fit = design @ np.array([v_const, C1_V, C2_V])
    K = math.sqrt(max(K2, 0.0))

    m = series.E.size
    params = RecoveredParams(
        branch=branch,
        a=float(a),
        b=np.atleast_1d(np.asarray(b, float)),
        K=float(K),
        C1=np.atleast_1d(np.asarray(C1, float)),
        C2=np.atleast_1d(np.asarray(C2, float)),
        C1_V=float(C1_V),
        C2_V=float(C2_V),
        v_const=float(v_const),
        rms_residual_E=math.sqrt(rss / m),
        rms_residual_V=math.sqrt(float(np.sum((V - V_fit) ** 2)) / len(V)),
        cov_ab=np.zeros((2, 2)),
        identifiable=True,
        nu=float(nu),
    )
    if series.n == 1:
        cov, ident = _sensitivity_covariance(params, series, rss)
        params.cov_ab = cov
        params.identifiable = ident
    return params


@dataclass
class FitDiagnostics:
    residuals_E: np.ndarray  # (m, 2): t_i, residual (first coordinate)
    rms_E: float
    rms_V: float
    max_deviation_E: float
    max_deviation_V: float


def evaluate_fit(params: RecoveredParams, series: ObservedSeries) -> FitDiagnostics:
    """Residual diagnostics plus a forward regeneration check."""
    E_fit = params.E_model(series.t)
    V_fit = params.V_model(series.t)
    rE = series.E - E_fit
    rV = series.V - V_fit
    return FitDiagnostics(
        residuals_E=np.stack([series.t, rE[:, 0]], axis=1),
        rms_E=float(np.sqrt(np.mean(rE * rE))),
        rms_V=float(np.sqrt(np.mean(rV * rV))),
        max_deviation_E=float(np.max(np.abs(rE))),
        max_deviation_V=float(np.max(np.abs(rV))),
    )


def series_from_csv(text: str) -> ObservedSeries:
    """Read an observation CSV with columns t, E (or E_1..E_n), V."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    header = [name.strip() for name in lines[0].split(",")]
    if header[0] != "t" or header[-1] != "V":
        raise ScenarioError("observation CSV must have columns t, E..., V")
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    return ObservedSeries(t=data[:, 0], E=data[:, 1:-1], V=data[:, -1])


def series_to_csv(series: ObservedSeries) -> str:
    names = ["t"] + ([f"E_{i + 1}" for i in range(series.n)] if series.n > 1 else ["E"]) + ["V"]
    lines = [",".join(names)]
    for i in range(len(series.t)):
        row = [series.t[i], *series.E[i], series.V[i]]
        lines.append(",".join(f"{x:.17g}" for x in row))
    return "\n".join(lines) + "\n"
