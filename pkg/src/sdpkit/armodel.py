"""Autoregressive modelling of sampled time series.

Supports fitting AR(p) models either by conditional least squares or by
matching the model autocorrelation to the sample autocorrelation over
many lags, plus the closed-form machinery needed downstream: stationary
moments, theoretical autocorrelations, simulation, and the companion
state-space form in (value, backward-difference) coordinates used by the
storage controller.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_toeplitz
from scipy.optimize import minimize
from scipy.signal import lfilter

__all__ = [
    "ARModel",
    "AcfSeries",
    "StateSpaceAR2",
    "sample_acf",
    "theoretical_acf",
    "is_stationary",
    "fit_cls",
    "fit_multilag",
    "innovation_std_from_acf",
    "simulate",
    "to_state_space",
    "stationary_moments",
    "save_ar_model",
    "load_ar_model",
]

ARMODEL_FORMAT = "armodel-v1"

# Burn-in for simulation defaults to this many slowest characteristic times.
BURN_IN_FACTOR = 10.0


@dataclass(frozen=True)
class ARModel:
    """AR(p) model x_t = phi_1 x_{t-1} + ... + phi_p x_{t-p} + eps_t."""

    phi: tuple[float, ...]
    sigma_eps: float
    dt: float

    def __post_init__(self) -> None:
        phi = tuple(float(c) for c in self.phi)
        object.__setattr__(self, "phi", phi)
        if len(phi) < 1:
            raise ValueError("model order must be at least 1")
        if not all(math.isfinite(c) for c in phi):
            raise ValueError(f"coefficients must be finite, got {phi}")
        if not (math.isfinite(self.sigma_eps) and self.sigma_eps >= 0.0):
            raise ValueError(f"innovation std must be >= 0, got {self.sigma_eps}")
        if not (math.isfinite(self.dt) and self.dt > 0.0):
            raise ValueError(f"sample period must be > 0, got {self.dt}")

    @property
    def p(self) -> int:
        return len(self.phi)


@dataclass(frozen=True)
class AcfSeries:
    """Autocorrelations rho(0..max_lag); rho(0) is always 1."""

    values: np.ndarray
    dt: float

    def __post_init__(self) -> None:
        vals = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if vals.size < 1:
            raise ValueError("autocorrelation series needs at least lag 0")
        if not np.isfinite(vals).all():
            raise ValueError("autocorrelations must be finite")
        if vals[0] != 1.0:
            raise ValueError(f"lag-0 autocorrelation must be 1, got {vals[0]}")
        if not (math.isfinite(self.dt) and self.dt > 0.0):
            raise ValueError(f"sample period must be > 0, got {self.dt}")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def max_lag(self) -> int:
        return self.values.size - 1


def sample_acf(series, max_lag: int, dt: float) -> AcfSeries:
    """Biased sample autocorrelation of a series up to ``max_lag``.

    Uses the full-length denominator (the estimate of lag k divides by N,
    not N - k), which keeps the estimated sequence positive semidefinite.
    The series is centred on its sample mean first.
    """
    x = np.ascontiguousarray(series, dtype=np.float64).reshape(-1)
    n = x.size
    if not 1 <= max_lag < n:
        raise ValueError(f"max_lag must be in [1, {n - 1}], got {max_lag}")
    if not np.isfinite(x).all():
        raise ValueError("series must be finite")
    x = x - x.mean()
    denom = float(np.dot(x, x))
    if denom == 0.0:
        raise ValueError("series is constant; autocorrelation is undefined")
    vals = np.empty(max_lag + 1)
    vals[0] = 1.0
    for k in range(1, max_lag + 1):
        vals[k] = float(np.dot(x[:-k], x[k:])) / denom
    return AcfSeries(vals, dt)


def is_stationary(phi) -> bool:
    """True when every root of 1 - phi_1 z - ... - phi_p z^p lies outside the unit circle.

    Checked on the companion matrix of the recursion, whose eigenvalues
    are the inverse roots; this avoids normalising the polynomial by a
    possibly tiny leading coefficient.
    """
    coeffs = np.asarray(phi, dtype=np.float64)
    if coeffs.size == 0:
        return True
    if not np.isfinite(coeffs).all():
        return False
    companion = np.zeros((coeffs.size, coeffs.size))
    companion[0, :] = coeffs
    if coeffs.size > 1:
        companion[np.arange(1, coeffs.size), np.arange(coeffs.size - 1)] = 1.0
    return bool(np.all(np.abs(np.linalg.eigvals(companion)) < 1.0))


def theoretical_acf(phi, max_lag: int, dt: float) -> AcfSeries:
    """Exact autocorrelation of a stationary AR(p) model.

    Solves the order-p linear system for rho(1..p) and extends with the
    recursion rho(k) = sum_j phi_j rho(k - j).
    """
    coeffs = np.asarray(phi, dtype=np.float64).reshape(-1)
    p = coeffs.size
    if p < 1:
        raise ValueError("model order must be at least 1")
    if max_lag < 1:
        raise ValueError(f"max_lag must be >= 1, got {max_lag}")
    if not is_stationary(coeffs):
        raise ValueError(f"AR coefficients {tuple(coeffs)} are not stationary")

    # rho(k) = sum_j phi_j rho(|k - j|) for k = 1..p, with rho(0) = 1
    a = np.eye(p)
    rhs = np.zeros(p)
    for k in range(1, p + 1):
        for j in range(1, p + 1):
            lag = abs(k - j)
            if lag == 0:
                rhs[k - 1] += coeffs[j - 1]
            else:
                a[k - 1, lag - 1] -= coeffs[j - 1]
    rho_head = np.linalg.solve(a, rhs)

    vals = np.empty(max_lag + 1)
    vals[0] = 1.0
    upto = min(p, max_lag)
    vals[1 : upto + 1] = rho_head[:upto]
    for k in range(p + 1, max_lag + 1):
        vals[k] = np.dot(coeffs, vals[k - p : k][::-1])
    return AcfSeries(vals, dt)


def fit_cls(series, p: int, dt: float) -> ARModel:
    """Conditional least-squares fit of an AR(p) model.

    Regresses x_t on its p lags over t = p..N-1 with a free intercept
    (absorbing the sample mean), so a noiseless AR recursion is recovered
    exactly.  The innovation std is the residual root mean square.
    """
    x = np.ascontiguousarray(series, dtype=np.float64).reshape(-1)
    if p < 1:
        raise ValueError(f"model order must be >= 1, got {p}")
    if x.size < p + 2:
        raise ValueError(f"need more than {p + 1} samples to fit order {p}, got {x.size}")
    if not np.isfinite(x).all():
        raise ValueError("series must be finite")

    y = x[p:]
    design = np.empty((y.size, p + 1))
    design[:, 0] = 1.0
    for j in range(1, p + 1):
        design[:, j] = x[p - j : x.size - j]
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ beta
    sigma = math.sqrt(float(np.mean(resid**2)))
    return ARModel(tuple(beta[1:]), sigma, dt)


def _acf_mismatch(phi: np.ndarray, target: np.ndarray, dt: float) -> float:
    """Sum of squared autocorrelation errors over lags 1..len(target)."""
    if not is_stationary(phi):
        return math.inf
    model_rho = theoretical_acf(phi, target.size, dt).values[1:]
    diff = model_rho - target
    return float(np.dot(diff, diff))


def fit_multilag(acf_data: AcfSeries, p: int, lag_count: int) -> tuple[tuple[float, ...], float]:
    """Fit AR coefficients by matching autocorrelations over many lags.

    Minimises sum_k (rho_model(k) - rho_data(k))^2 for k = 1..lag_count
    with a derivative-free simplex search started from the Yule-Walker
    solution of the first p lags.  Non-stationary proposals score +inf,
    which keeps the search inside the stationarity region.  Returns the
    coefficients and the achieved criterion value.
    """
    if p < 1:
        raise ValueError(f"model order must be >= 1, got {p}")
    if not 1 <= lag_count <= acf_data.max_lag:
        raise ValueError(
            f"lag_count must be in [1, {acf_data.max_lag}], got {lag_count}"
        )
    if acf_data.max_lag < p:
        raise ValueError(f"need at least {p} lags to fit order {p}")

    rho = acf_data.values
    start = solve_toeplitz(rho[:p], rho[1 : p + 1])
    if not is_stationary(start):
        warnings.warn("Yule-Walker start was not stationary; shrinking it back inside")
        while not is_stationary(start):
            start = 0.98 * start

    target = rho[1 : lag_count + 1]
    result = minimize(
        _acf_mismatch,
        start,
        args=(target, acf_data.dt),
        method="Nelder-Mead",
        options={"maxfev": 10000, "xatol": 1e-10, "fatol": 1e-16},
    )
    best = result.x
    crit = float(result.fun)
    start_crit = _acf_mismatch(start, target, acf_data.dt)
    if start_crit < crit:
        best, crit = start, start_crit
    if not is_stationary(best):
        warnings.warn("optimum left the stationarity region; reverting to the start point")
        best, crit = start, start_crit
    return tuple(float(c) for c in best), crit


def innovation_std_from_acf(phi, gamma0: float, acf_data: AcfSeries) -> float:
    """Innovation std implied by a variance and autocorrelations.

    Uses sigma_eps^2 = gamma0 * (1 - sum_j phi_j rho(j)); raises if the
    coefficients and autocorrelations imply a negative innovation
    variance.
    """
    coeffs = np.asarray(phi, dtype=np.float64).reshape(-1)
    p = coeffs.size
    if gamma0 < 0.0 or not math.isfinite(gamma0):
        raise ValueError(f"variance must be finite and >= 0, got {gamma0}")
    if acf_data.max_lag < p:
        raise ValueError(f"need autocorrelations up to lag {p}")
    var = gamma0 * (1.0 - float(np.dot(coeffs, acf_data.values[1 : p + 1])))
    if var < 0.0:
        raise ValueError(
            f"coefficients and autocorrelations imply negative innovation variance {var}"
        )
    return math.sqrt(var)


def _default_burn_in(phi) -> int:
    """Ten times the slowest characteristic time of the recursion, in steps."""
    coeffs = np.asarray(phi, dtype=np.float64)
    poly = np.concatenate([[1.0], -coeffs])
    if not np.any(poly[1:]):
        return 0
    radius = float(np.max(np.abs(np.roots(poly))))
    if radius <= 0.0:
        return 0
    if radius >= 1.0:
        raise ValueError("cannot pick a burn-in for a non-stationary model")
    tau = -1.0 / math.log(radius)
    return int(math.ceil(BURN_IN_FACTOR * tau))


def simulate(model: ARModel, n: int, seed: int, burn_in: int | None = None) -> np.ndarray:
    """Simulate ``n`` samples of the model with Gaussian innovations.

    Starts from zero initial lags and discards ``burn_in`` warm-up steps
    (default: ten times the slowest characteristic time).  The output is
    a deterministic function of (model, n, seed, burn_in).
    """
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    if burn_in is None:
        burn_in = _default_burn_in(model.phi)
    if burn_in < 0:
        raise ValueError(f"burn-in must be >= 0, got {burn_in}")
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, model.sigma_eps, size=n + burn_in)
    x = lfilter([1.0], np.concatenate([[1.0], -np.asarray(model.phi)]), eps)
    return x[burn_in:]


@dataclass(frozen=True)
class StateSpaceAR2:
    """AR(2) rewritten on the (value, backward-difference) state.

    With state (x, a) where a_k = (x_k - x_{k-1}) / dt, one step is
    ``state_next = transition @ state + noise_gain * eps``.
    """

    transition: np.ndarray
    noise_gain: np.ndarray
    state_labels: tuple[str, str] = ("value", "backward-difference")

    def step(self, value: float, diff: float, eps: float) -> tuple[float, float]:
        t = self.transition
        g = self.noise_gain
        return (
            t[0, 0] * value + t[0, 1] * diff + g[0] * eps,
            t[1, 0] * value + t[1, 1] * diff + g[1] * eps,
        )


def to_state_space(model: ARModel) -> StateSpaceAR2:
    """Companion form of an AR(2) model on (value, backward-difference).

    Substituting x_{t-2} = x_{t-1} - dt * a_{t-1} into the recursion
    gives a one-lag linear system driven by the same innovation.
    """
    if model.p != 2:
        raise ValueError(f"state-space form needs an AR(2) model, got order {model.p}")
    c1, c2 = model.phi
    dt = model.dt
    transition = np.array(
        [
            [c1 + c2, -c2 * dt],
            [(c1 + c2 - 1.0) / dt, -c2],
        ]
    )
    noise_gain = np.array([1.0, 1.0 / dt])
    transition.flags.writeable = False
    noise_gain.flags.writeable = False
    return StateSpaceAR2(transition, noise_gain)


def stationary_moments(model: ARModel) -> tuple[float, float]:
    """Stationary stds of the process and of its backward difference.

    Returns ``(std_x, std_diff)`` where the difference is taken per
    sample period: diff_k = (x_k - x_{k-1}) / dt, so
    var(diff) = 2 gamma_0 (1 - rho(1)) / dt^2.
    """
    if not is_stationary(model.phi):
        raise ValueError("stationary moments require a stationary model")
    rho = theoretical_acf(model.phi, max(model.p, 1), model.dt).values
    gamma0 = model.sigma_eps**2 / (1.0 - float(np.dot(model.phi, rho[1 : model.p + 1])))
    std_x = math.sqrt(gamma0)
    std_diff = math.sqrt(2.0 * gamma0 * (1.0 - rho[1])) / model.dt
    return std_x, std_diff


def save_ar_model(model: ARModel, path, provenance: dict | None = None) -> None:
    """Write a model (plus optional fit provenance) as a JSON text document."""
    doc = {
        "format": ARMODEL_FORMAT,
        "p": model.p,
        "phi": list(model.phi),
        "sigma_eps": model.sigma_eps,
        "dt": model.dt,
    }
    if provenance is not None:
        doc["fit"] = provenance
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_ar_model(path) -> tuple[ARModel, dict | None]:
    """Read back a model written by :func:`save_ar_model`."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt model file {path}: {exc}") from exc
    if doc.get("format") != ARMODEL_FORMAT:
        raise ValueError(f"{path} is not a model file (format={doc.get('format')!r})")
    model = ARModel(tuple(doc["phi"]), float(doc["sigma_eps"]), float(doc["dt"]))
    if model.p != int(doc["p"]):
        raise ValueError(f"{path}: declared order {doc['p']} does not match {model.p} coefficients")
    return model, doc.get("fit")
