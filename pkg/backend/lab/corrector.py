"""
aim of the module: estimate the corrector chi_k, the solution of L chi_k = b_k,
its derivatives, and the diagnostics built on them.

inputs:
    PotentialSpec, BoxGeometry, evaluation points on the torus, path budgets,
    Gibbs samples and (optionally) a fitted MixingCurve.

outputs:
    CorrectorEstimate (values with standard errors), ResolventEstimate,
    CorrectorDerivatives in the sqrt(2)*(delta_kj - d_j chi_k) convention,
    weak-equation residuals, Dirichlet energies, and CorrectorSource objects
    that later stages evaluate along paths.

method:
    Feynman-Kac: chi_k(y) = -E_y integral_0^T b_k(eta_s) ds, trapezoid rule on
    the simulation grid, antithetic path pairs, each evaluation point on its own
    substreams. Resolvent: one simulation to 6/lambda_min carries exponentially
    weighted integrals for every lambda; the lambda -> 0 limit is a per-path
    linear extrapolation. Derivatives: central differences with common random
    numbers. The single-site one-dimensional problem is solved exactly.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate

from .error_handler import ConfigurationError, NumericError
from .potential import BoxGeometry, PotentialSpec, drift_field
from .rng import STREAM_CORRECTOR, STREAM_RESOLVENT
from .torus_dynamics import GibbsSampleSet, MixingCurve, PathObserver, simulate_paths
from .trig_poly import TWO_PI, LocalFunction, TrigPoly

logger = logging.getLogger(__name__)

ENERGY_BOUND = 1.25
DERIVATIVE_CONVENTION = "sqrt2_delta_minus_grad"


class DriftIntegral(PathObserver):
    """Trapezoid integral of b_k along each path, optionally exponentially weighted."""

    def __init__(self, sites: Sequence[int], dt: float, n_steps: int,
                 lambdas: Optional[Sequence[float]] = None):
        self.sites = list(sites)
        self.dt = dt
        self.n_steps = n_steps
        self.lambdas = None if lambdas is None else np.asarray(lambdas, dtype=float)
        self.total = None

    def observe(self, step, x, b):
        if self.n_steps == 0:
            weight = 0.0
        elif step in (0, self.n_steps):
            weight = 0.5 * self.dt
        else:
            weight = self.dt
        values = b[..., self.sites]                                    # (P, R, K)
        if self.lambdas is not None:
            decay = np.exp(-self.lambdas * step * self.dt)
            values = values[..., None, :] * decay[:, None]             # (P, R, L, K)
        contribution = weight * values
        self.total = contribution if self.total is None else self.total + contribution

    def result(self) -> np.ndarray:
        return self.total


def drift_sup_bound(spec: PotentialSpec) -> float:
    """Upper bound of sup |b_k| from coefficient sums of the partial derivatives."""
    bound = 0.0
    for term in spec.terms:
        bound += sum(term.poly.derivative(i).coefficient_norm() for i in range(term.poly.n_vars))
    return bound


def _pair_stats(per_path: np.ndarray, antithetic: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and SE over the path axis (axis 1); antithetic pairs are averaged first."""
    if antithetic:
        shape = per_path.shape
        per_path = per_path.reshape(shape[0], shape[1] // 2, 2, *shape[2:]).mean(axis=2)
    n = per_path.shape[1]
    mean = per_path.mean(axis=1)
    se = per_path.std(axis=1, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, se


def _path_integrals(spec, geom, starts, sites, horizon, dt, paths, seed, stream,
                    antithetic, lambdas=None, workers=1) -> np.ndarray:
    """
    Drift integrals for every evaluation point with independent noise per point.

    Args:
        starts (np.ndarray): Start states (E, R, n); replicas share noise

    Returns:
        np.ndarray: Integrals of shape (E, paths, R, [L,] K)
    """
    if horizon <= 0 or paths < 1:
        raise ConfigurationError(f"invalid corrector budget: horizon={horizon}, paths={paths}")
    if antithetic and paths % 2:
        raise ConfigurationError("antithetic estimation needs an even path count")
    n_steps = max(1, int(round(horizon / dt)))
    n_points = starts.shape[0]
    expanded = np.repeat(starts, paths, axis=0)
    (integrals,) = simulate_paths(spec, geom, expanded, dt, n_steps, seed=seed, stream=stream,
                                  observers=[lambda: DriftIntegral(sites, dt, n_steps, lambdas)],
                                  antithetic=antithetic, workers=workers)
    if not np.all(np.isfinite(integrals)):
        raise NumericError("non-finite drift integral")
    return integrals.reshape((n_points, paths) + integrals.shape[1:])


@dataclass
class CorrectorEstimate:
    sites: Tuple[int, ...]
    points: np.ndarray           # (E, n)
    values: np.ndarray           # (E, K)
    se: np.ndarray               # (E, K)
    method: str
    paths: int
    dt: float
    horizon: Optional[float] = None
    tail_bound: Optional[float] = None
    flags: List[str] = field(default_factory=list)

    def for_site(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        i = self.sites.index(k)
        return self.values[:, i], self.se[:, i]


def choose_horizon(mixing: Optional[MixingCurve], target_se: float, drift_bound: float,
                   t_max: float, t_min: float = 1.0) -> Tuple[float, List[str]]:
    """
    Smallest horizon whose tail bound stays below a third of the target SE.

    Args:
        mixing (Optional[MixingCurve]): Fitted decay law
        target_se (float): Standard error the estimate aims for
        drift_bound (float): sup |b_k|, scales the tail bound
        t_max (float): Upper limit for the horizon
        t_min (float): Lower limit for the horizon

    Returns:
        Tuple[float, List[str]]: Horizon and flags
    """
    if drift_bound == 0.0:
        return t_min, []
    if mixing is None or not np.isfinite(mixing.alpha_hat) or mixing.alpha_hat <= 1.0:
        return t_max, ["no usable mixing fit; horizon set to its maximum"]
    alpha, scale = mixing.alpha_hat, mixing.k_hat * drift_bound
    needed = (3.0 * scale / ((alpha - 1.0) * target_se)) ** (1.0 / (alpha - 1.0)) - mixing.c
    if needed > t_max:
        return t_max, [f"tail bound needs horizon {needed:.1f} above the maximum {t_max}"]
    return float(max(t_min, needed)), []


def chi_feynman_kac(spec: PotentialSpec, geom: BoxGeometry, k: Union[int, Sequence[int]],
                    y: np.ndarray, horizon: float, paths: int, dt: float, seed: int,
                    antithetic: bool = True, mixing: Optional[MixingCurve] = None,
                    workers: int = 1) -> CorrectorEstimate:
    """
    Feynman-Kac estimate of chi_k at the points y.

    Args:
        spec (PotentialSpec): Interaction family
        geom (BoxGeometry): Simulation box
        k (Union[int, Sequence[int]]): Site or sites (flat indices or coordinates)
        y (np.ndarray): Evaluation points, (n,) or (E, n)
        horizon (float): Integration horizon T
        paths (int): Paths per point
        dt (float): Time step
        seed (int): Master seed
        antithetic (bool): Use antithetic path pairs
        mixing (Optional[MixingCurve]): Mixing fit used for the truncation bound
        workers (int): Worker threads

    Returns:
        CorrectorEstimate: Values and standard errors per point and site
    """
    sites = _sites(geom, k)
    points = np.atleast_2d(np.asarray(y, dtype=float))
    integrals = _path_integrals(spec, geom, points[:, None, :], sites, horizon, dt, paths, seed,
                                STREAM_CORRECTOR, antithetic, workers=workers)[:, :, 0]
    mean, se = _pair_stats(-integrals, antithetic)
    tail = None
    flags = []
    if mixing is not None:
        tail = mixing.tail_bound(horizon) * drift_sup_bound(spec)
        if np.isfinite(tail) and tail > np.max(se, initial=0.0) / 3.0 and tail > 0:
            flags.append(f"truncation bound {tail:.3g} exceeds a third of the standard error")
    return CorrectorEstimate(sites=tuple(sites), points=points, values=mean, se=se,
                             method="feynman_kac", paths=paths, dt=dt, horizon=horizon,
                             tail_bound=tail, flags=flags)


@dataclass
class ResolventEstimate:
    site: int
    points: np.ndarray
    lambdas: np.ndarray
    lambda_values: np.ndarray    # (E, L)
    lambda_se: np.ndarray        # (E, L)
    values: np.ndarray           # (E,) extrapolated to lambda = 0
    se: np.ndarray
    fit_residual: np.ndarray     # (E,) max |residual| / SE over lambdas
    flags: List[str] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return bool(self.flags)


def chi_resolvent(spec: PotentialSpec, geom: BoxGeometry, k: int, y: np.ndarray,
                  lambdas: Sequence[float], paths: int, dt: float, seed: int,
                  horizon_factor: float = 6.0, antithetic: bool = True,
                  residual_tolerance: float = 3.0, workers: int = 1) -> ResolventEstimate:
    """
    Resolvent estimates chi^lambda_k and their linear extrapolation to lambda = 0.

    One simulation to horizon_factor / min(lambdas) serves every lambda. The
    extrapolated value is a fixed linear combination of the per-lambda
    integrals, applied path by path, so its SE comes from the same pairs.
    """
    lambdas = np.asarray(sorted(lambdas, reverse=True), dtype=float)
    if len(lambdas) < 2 or np.any(lambdas <= 0):
        raise ConfigurationError("resolvent extrapolation needs at least two positive lambdas")
    site = _sites(geom, k)[0]
    points = np.atleast_2d(np.asarray(y, dtype=float))
    horizon = horizon_factor / lambdas.min()
    weighted = _path_integrals(spec, geom, points[:, None, :], [site], horizon, dt, paths, seed,
                               STREAM_RESOLVENT, antithetic, lambdas=lambdas,
                               workers=workers)[:, :, 0, :, 0]                # (E, P, L)
    per_lambda = -weighted
    design = np.stack([np.ones_like(lambdas), lambdas], axis=1)
    intercept_row = np.linalg.pinv(design)[0]
    lambda_mean, lambda_se = _pair_stats(per_lambda, antithetic)
    value, value_se = _pair_stats(per_lambda @ intercept_row, antithetic)
    fitted = (np.linalg.pinv(design) @ lambda_mean.T).T @ design.T
    scaled = np.abs(lambda_mean - fitted) / np.where(lambda_se > 0, lambda_se, np.inf)
    residual = scaled.max(axis=1)
    flags = []
    if len(lambdas) > 2 and np.any(residual > residual_tolerance):
        flags.append(f"linear extrapolation residual above {residual_tolerance} SE")
        logger.warning(f"Resolvent extrapolation for site {site} flagged")
    return ResolventEstimate(site=site, points=points, lambdas=lambdas, lambda_values=lambda_mean,
                             lambda_se=lambda_se, values=value, se=value_se,
                             fit_residual=residual, flags=flags)


class ExactOneDimCorrector:
    """
    Closed-form corrector of the single-site problem with drift -U'.

    chi(theta) = theta - c * integral_0^theta e^{U}, c = 2*pi / integral_0^{2*pi} e^{U}.
    The integrand is expanded in a Fourier series so chi is itself a TrigPoly
    and can be evaluated along whole path ensembles.
    """

    def __init__(self, U: TrigPoly, grid: int = 256):
        if U.n_vars != 1:
            raise ConfigurationError("the exact corrector needs a one-variable potential")
        self.U = U
        self.grid = grid

    @cached_property
    def poly(self) -> TrigPoly:
        nodes = np.arange(self.grid) * (TWO_PI / self.grid)
        values = np.exp(self.U(nodes[:, None]))
        spectrum = np.fft.rfft(values) / self.grid
        a0 = spectrum[0].real
        terms = []
        for m in range(1, len(spectrum) - 1):
            a_m, b_m = 2.0 * spectrum[m].real, -2.0 * spectrum[m].imag
            if abs(a_m) < 1e-17 and abs(b_m) < 1e-17:
                continue
            terms.append(((m,), -a_m / (m * a0), "sin"))
            terms.append(((m,), b_m / (m * a0), "cos"))
            terms.append(((0,), -b_m / (m * a0), "cos"))
        return TrigPoly.from_terms(1, terms)

    @cached_property
    def c(self) -> float:
        total, _ = integrate.quad(lambda s: np.exp(self.U(np.array([s]))), 0.0, TWO_PI, limit=200)
        return TWO_PI / total

    def value(self, theta) -> np.ndarray:
        return self.poly(np.asarray(theta, dtype=float)[..., None])

    def derivative(self, theta) -> np.ndarray:
        """d chi / d theta = 1 - c e^{U(theta)}."""
        theta = np.asarray(theta, dtype=float)
        return 1.0 - self.c * np.exp(self.U(theta[..., None]))

    @cached_property
    def mu0_mean(self) -> float:
        weight = lambda s: np.exp(-self.U(np.array([s])))
        num, _ = integrate.quad(lambda s: self.value(s) * weight(s), 0.0, TWO_PI, limit=200)
        den, _ = integrate.quad(weight, 0.0, TWO_PI, limit=200)
        return num / den

    def energy(self) -> float:
        """Dirichlet energy <(chi')^2> under the single-site Gibbs density."""
        weight = lambda s: np.exp(-self.U(np.array([s])))
        num, _ = integrate.quad(lambda s: self.derivative(s) ** 2 * weight(s), 0.0, TWO_PI, limit=200)
        den, _ = integrate.quad(weight, 0.0, TWO_PI, limit=200)
        return num / den


def _quad(fn, lower, upper) -> float:
    result = integrate.quad(fn, lower, upper, limit=200, full_output=1)
    if len(result) > 3:
        raise NumericError(f"quadrature failed: {result[3]}")
    return result[0]


def chi_exact_1d(U: TrigPoly, theta) -> np.ndarray:
    """
    Exact single-site corrector by adaptive quadrature.

    Args:
        U (TrigPoly): One-variable potential
        theta: Angle or array of angles

    Returns:
        np.ndarray: chi(theta), with chi(0) = 0
    """
    if U.n_vars != 1:
        raise ConfigurationError("chi_exact_1d needs a one-variable potential")
    exp_u = lambda s: float(np.exp(U(np.array([s]))))
    c = TWO_PI / _quad(exp_u, 0.0, TWO_PI)
    theta = np.asarray(theta, dtype=float)
    reduced = np.mod(theta, TWO_PI)
    flat = [t - c * _quad(exp_u, 0.0, t) for t in reduced.ravel()]
    return np.asarray(flat).reshape(theta.shape)


def chi_exact_1d_derivative(U: TrigPoly, theta) -> np.ndarray:
    return ExactOneDimCorrector(U).derivative(theta)


def a_exact_1d(U: TrigPoly, theta) -> np.ndarray:
    """Quadratic-variation rate 2 (1 - chi'(theta))^2 of the single-site problem."""
    return 2.0 * (1.0 - chi_exact_1d_derivative(U, theta)) ** 2


@dataclass
class CorrectorDerivatives:
    site: int
    points: np.ndarray           # (E, n)
    directions: Tuple[int, ...]
    grad: np.ndarray             # (E, J) d_j chi_k
    grad_se: np.ndarray
    step: float
    convention: str = DERIVATIVE_CONVENTION
    flags: List[str] = field(default_factory=list)

    @property
    def values(self) -> np.ndarray:
        """chi'_{k,j} = sqrt(2) (delta_kj - d_j chi_k)."""
        delta = np.array([1.0 if j == self.site else 0.0 for j in self.directions])
        return np.sqrt(2.0) * (delta[None, :] - self.grad)

    @property
    def values_se(self) -> np.ndarray:
        return np.sqrt(2.0) * self.grad_se

    def row(self, n_sites: int) -> Tuple[np.ndarray, np.ndarray]:
        """Full rows over all sites; directions not estimated count as zero gradient."""
        grad = np.zeros((len(self.points), n_sites))
        se = np.zeros_like(grad)
        grad[:, list(self.directions)] = self.grad
        se[:, list(self.directions)] = self.grad_se
        delta = np.zeros(n_sites)
        delta[self.site] = 1.0
        return np.sqrt(2.0) * (delta[None, :] - grad), np.sqrt(2.0) * se


def chi_prime(spec: PotentialSpec, geom: BoxGeometry, k: int, j: Union[int, Sequence[int]],
              y: np.ndarray, step: float, paths: int, horizon: float, dt: float, seed: int,
              se_tolerance: Optional[float] = None, antithetic: bool = True,
              workers: int = 1) -> CorrectorDerivatives:
    """
    Common-random-number central differences of chi_k in the directions j.

    Args:
        spec (PotentialSpec): Interaction family
        geom (BoxGeometry): Simulation box
        k (int): Corrector site
        j (Union[int, Sequence[int]]): Direction site or sites
        y (np.ndarray): Evaluation points, (n,) or (E, n)
        step (float): Difference step h in radians
        paths (int): Paths per point
        horizon (float): Feynman-Kac horizon
        dt (float): Time step
        seed (int): Master seed
        se_tolerance (Optional[float]): Flag derivatives whose SE exceeds this
        antithetic (bool): Use antithetic path pairs
        workers (int): Worker threads

    Returns:
        CorrectorDerivatives: d_j chi_k and the chi' values at every point
    """
    if step <= 0:
        raise ConfigurationError("difference step must be positive")
    site = _sites(geom, k)[0]
    directions = _sites(geom, j)
    points = np.atleast_2d(np.asarray(y, dtype=float))
    replicas = []
    for d in directions:
        bump = np.zeros(geom.n_sites)
        bump[d] = step
        replicas.extend([points + bump, points - bump])
    starts = np.stack(replicas, axis=1)                                 # (E, 2J, n)
    integrals = _path_integrals(spec, geom, starts, [site], horizon, dt, paths, seed,
                                STREAM_CORRECTOR, antithetic, workers=workers)[..., 0]
    chi = -integrals                                                    # (E, P, 2J)
    differences = (chi[:, :, 0::2] - chi[:, :, 1::2]) / (2.0 * step)
    grad, grad_se = _pair_stats(differences, antithetic)
    flags = []
    if se_tolerance is not None and np.any(np.sqrt(2.0) * grad_se > se_tolerance):
        flags.append(f"derivative SE above tolerance {se_tolerance}")
        logger.warning(f"chi' for site {site}: standard error above {se_tolerance}")
    return CorrectorDerivatives(site=site, points=points, directions=tuple(directions),
                                grad=grad, grad_se=grad_se, step=step, flags=flags)


def shifted_derivatives(spec: PotentialSpec, geom: BoxGeometry, sites: Sequence[int],
                        points: np.ndarray, step: float, paths: int, horizon: float, dt: float,
                        seed: int, se_tolerance: Optional[float] = None,
                        workers: int = 1) -> Dict[int, CorrectorDerivatives]:
    """
    Derivatives of chi_k for every site in `sites` at the same points.

    Uses d_j chi_k(y) = d_{j-k} chi_0(shift^k y): chi_0 is differentiated at every
    shifted point, each on its own substreams, so estimates for different k
    carry independent noise.
    """
    if not geom.periodic:
        raise ConfigurationError("shifted derivatives need a periodic box")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    sites = [geom.index(int(s)) for s in sites]
    perms = [geom.shift_indices(k) for k in sites]
    shifted = np.concatenate([points[:, p] for p in perms])
    base = chi_prime(spec, geom, geom.origin, list(range(geom.n_sites)), shifted, step, paths,
                     horizon, dt, seed, se_tolerance=se_tolerance, workers=workers)
    out = {}
    n_points = len(points)
    for i, (k, perm) in enumerate(zip(sites, perms)):
        inverse = np.argsort(perm)
        block = slice(i * n_points, (i + 1) * n_points)
        out[k] = CorrectorDerivatives(site=k, points=points, directions=tuple(range(geom.n_sites)),
                                      grad=base.grad[block][:, inverse],
                                      grad_se=base.grad_se[block][:, inverse],
                                      step=step, flags=list(base.flags))
    return out


def exact_derivatives(corrector: ExactOneDimCorrector, geom: BoxGeometry, k: int,
                      points: np.ndarray) -> CorrectorDerivatives:
    """Derivatives of the single-site corrector; only d_k chi_k is nonzero."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    directions = tuple(range(geom.n_sites))
    grad = np.zeros((len(points), geom.n_sites))
    grad[:, k] = corrector.derivative(points[:, k])
    return CorrectorDerivatives(site=k, points=points, directions=directions,
                                grad=grad, grad_se=np.zeros_like(grad), step=0.0)


@dataclass
class WeakEquationResult:
    residual: float
    se: float
    alt_residual: float
    alt_se: float

    @property
    def z_score(self) -> float:
        return abs(self.residual) / self.se if self.se > 0 else (0.0 if self.residual == 0 else np.inf)

    @property
    def alt_z_score(self) -> float:
        return abs(self.alt_residual) / self.alt_se if self.alt_se > 0 else (0.0 if self.alt_residual == 0 else np.inf)


def weak_equation_residual(spec: PotentialSpec, geom: BoxGeometry, k: int, v: LocalFunction,
                           samples: GibbsSampleSet, derivatives: CorrectorDerivatives) -> WeakEquationResult:
    """
    Residuals of both weak forms of L chi_k = b_k against the test function v.

    residual     = sum_j <d_j chi_k d_j v> + <b_k v>
    alt_residual = sum_j <d_j chi_k d_j v> - <d_k v>

    `derivatives` must be evaluated at the sample states and cover v's window.
    """
    states = samples.states
    if derivatives.points.shape != states.shape:
        raise ConfigurationError("derivatives must be evaluated at the Gibbs sample states")
    missing = [s for s in set(v.sites) if s not in derivatives.directions]
    if missing:
        raise ConfigurationError(f"derivatives lack directions {missing} of the test function window")
    dirichlet = np.zeros(len(states))
    for s in set(v.sites):
        dirichlet += derivatives.grad[:, derivatives.directions.index(s)] * v.partial(states, s)
    b_k = drift_field(spec, geom, states)[:, k]
    residual, se = samples.mean_and_se(dirichlet + b_k * v(states))
    alt, alt_se = samples.mean_and_se(dirichlet - v.partial(states, k))
    return WeakEquationResult(float(residual), float(se), float(alt), float(alt_se))


@dataclass
class EnergyResult:
    site: int
    value: float
    se: float
    bound: float = ENERGY_BOUND

    @property
    def passed(self) -> bool:
        return self.value <= self.bound + 3.0 * self.se


def energy_estimate(derivatives: CorrectorDerivatives, samples: GibbsSampleSet) -> EnergyResult:
    """
    Dirichlet energy sum_j <(d_j chi_k)^2>, corrected for the Monte Carlo noise
    in the squared derivative estimates.
    """
    per_sample = np.sum(derivatives.grad ** 2 - derivatives.grad_se ** 2, axis=1)
    value, se = samples.mean_and_se(per_sample)
    result = EnergyResult(site=derivatives.site, value=float(value), se=float(se))
    if not result.passed:
        logger.warning(f"Dirichlet energy {value:.4f} +- {se:.4f} exceeds {ENERGY_BOUND}")
    return result


class CorrectorSource(ABC):
    """Anything that can evaluate chi_k and its gradient along simulated states."""
    tag: str = "abstract"

    @abstractmethod
    def values(self, states: np.ndarray, sites: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        """chi_k at states (..., n) for each site: values and SE of shape (..., K)."""

    @abstractmethod
    def gradients(self, states: np.ndarray, site: int) -> np.ndarray:
        """d_j chi_site at states (..., n), shape (..., n)."""


class ZeroCorrector(CorrectorSource):
    tag = "zero"

    def values(self, states, sites):
        shape = np.asarray(states).shape[:-1] + (len(sites),)
        return np.zeros(shape), np.zeros(shape)

    def gradients(self, states, site):
        return np.zeros(np.asarray(states).shape)


class ExactSourceOneDim(CorrectorSource):
    """Single-site exact corrector applied coordinatewise (any dimension)."""
    tag = "exact1d"

    def __init__(self, corrector: ExactOneDimCorrector):
        self.corrector = corrector

    def values(self, states, sites):
        states = np.asarray(states, dtype=float)
        vals = np.stack([self.corrector.value(states[..., s]) - self.corrector.mu0_mean for s in sites], axis=-1)
        return vals, np.zeros_like(vals)

    def gradients(self, states, site):
        states = np.asarray(states, dtype=float)
        grad = np.zeros(states.shape)
        grad[..., site] = self.corrector.derivative(states[..., site])
        return grad


class MonteCarloCorrector(CorrectorSource):
    """Feynman-Kac evaluation on demand; gradients by CRN central differences."""
    tag = "monte_carlo"

    def __init__(self, spec: PotentialSpec, geom: BoxGeometry, horizon: float, paths: int,
                 dt: float, seed: int, step: float = 1e-2, workers: int = 1):
        self.spec, self.geom = spec, geom
        self.horizon, self.paths, self.dt = horizon, paths, dt
        self.seed, self.step, self.workers = seed, step, workers

    def values(self, states, sites):
        states = np.asarray(states, dtype=float)
        flat = states.reshape(-1, self.geom.n_sites)
        estimate = chi_feynman_kac(self.spec, self.geom, list(sites), flat, self.horizon, self.paths,
                                   self.dt, self.seed, workers=self.workers)
        shape = states.shape[:-1] + (len(sites),)
        return estimate.values.reshape(shape), estimate.se.reshape(shape)

    def gradients(self, states, site):
        states = np.asarray(states, dtype=float)
        flat = states.reshape(-1, self.geom.n_sites)
        derivs = chi_prime(self.spec, self.geom, site, list(range(self.geom.n_sites)), flat, self.step,
                           self.paths, self.horizon, self.dt, self.seed, workers=self.workers)
        return derivs.grad.reshape(states.shape)


def _sites(geom: BoxGeometry, k) -> List[int]:
    if np.isscalar(k):
        return [geom.index(int(k))]
    k = list(k)
    if k and not np.isscalar(k[0]):
        return [geom.index(tuple(s)) for s in k]
    return [geom.index(int(s)) for s in k]
