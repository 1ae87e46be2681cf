"""
aim of the module: simulate the rescaled lattice diffusion X^eps, split it into
martingale and corrector parts, build the truncated approximation process and
the Gaussian limit, and test how close the laws get as eps decreases.

inputs:
    PotentialSpec, BoxGeometry, a CorrectorSource, an EffectiveMatrix for the
    limit covariance, FactorBlock / SmoothedFactor for the approximation process,
    GibbsSampleSet for random starts and environments.

outputs:
    PathEnsemble, MartingalePart, LimitSampler samples, ConvergenceReport,
    tightness, moment and fourth-moment reports, binary frame files.

method:
    X^eps(t) = eps X^1(t / eps^2) from a unit-scale Euler-Maruyama run (or
    direct integration of the eps-scale SDE). Statistical distances are taken on
    finite-dimensional marginals: two-sample KS per coordinate, energy distance
    of the joint vector and the max-entry covariance gap against t * A-bar.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage, optimize

from .corrector import CorrectorSource
from .effective_diffusion import EffectiveMatrix, FactorBlock
from .error_handler import (ConditionNumberError, ConfigurationError, DomainError,
                            NumericError, ResolutionError)
from .potential import BoxGeometry, PotentialSpec
from .statistics import (bonferroni_critical, covariance_gap, energy_distance, gap_z, ks_statistics,
                         mean_se, z_scores)
from .rng import (STREAM_BOOTSTRAP, STREAM_ENVIRONMENT, STREAM_LATTICE, STREAM_LIMIT,
                  STREAM_ZETA, PathNoise, substream)
from .torus_dynamics import (GibbsSampleSet, LatticeState, PathObserver, StateRecorder,
                             simulate_paths, time_steps)

logger = logging.getLogger(__name__)

ROUTES = ("rescaled", "direct")
COUPLING_MODES = ("shared", "independent")
CONDITION_THRESHOLD = 1e8
COVARIANCE_GAP_FRACTION = 0.05
TEST_LEVEL = 0.01
FRAME_MAGIC = b"HLFR"
FRAME_VERSION = 1
FRAME_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("d", "<u4"), ("n_box", "<u4"),
                         ("n_times", "<u4"), ("n_paths", "<u4"), ("n_sites", "<u4"),
                         ("eps", "<f8"), ("dt", "<f8"), ("seed", "<u8")])


@dataclass(eq=False)
class PathEnsemble:
    eps: float
    dt: float
    times: np.ndarray          # (n_rec,)
    paths: np.ndarray          # (P, n_rec, K) lifted coordinates
    seed: int
    initial: str               # "fixed", "gibbs", "environment" or "zero"
    route: str
    sites: Tuple[int, ...]
    flags: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.paths = np.asarray(self.paths, dtype=float)
        if self.times.ndim != 1 or np.any(np.diff(self.times) <= 0):
            raise ConfigurationError("ensemble time grid must be strictly increasing")
        if self.paths.ndim != 3 or self.paths.shape[1:] != (len(self.times), len(self.sites)):
            raise ConfigurationError(f"ensemble paths have shape {self.paths.shape}, expected "
                                     f"(P, {len(self.times)}, {len(self.sites)})")
        if not np.all(np.isfinite(self.paths)):
            raise NumericError("ensemble contains non-finite trajectories")

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    def columns(self, sites: Sequence[int]) -> List[int]:
        try:
            return [self.sites.index(int(s)) for s in sites]
        except ValueError as exc:
            raise DomainError(f"ensemble does not carry sites {list(sites)}") from exc

    def indices(self, times: Sequence[float]) -> np.ndarray:
        """Positions of `times` on the recorded grid."""
        times = np.asarray(times, dtype=float)
        idx = np.clip(np.searchsorted(self.times, times - 1e-9 * np.maximum(1.0, times)), 0, len(self.times) - 1)
        if np.any(np.abs(self.times[idx] - times) > 1e-9 * np.maximum(1.0, times)):
            raise DomainError(f"times {times.tolist()} were not recorded")
        return idx

    def state(self, path: int, i: int) -> LatticeState:
        return LatticeState(self.paths[path, i])

    def displacement(self, sites: Optional[Sequence[int]] = None) -> np.ndarray:
        """X(t) - X(0) for the recorded times after 0, shape (P, n_rec - 1, K)."""
        cols = slice(None) if sites is None else self.columns(sites)
        block = self.paths[:, :, cols]
        return block[:, 1:] - block[:, :1]


def _record_steps(n_steps: int, record_every: int,
                  only: Optional[Sequence[int]] = None) -> np.ndarray:
    if only is not None:
        only = np.asarray(only, dtype=int)
        if np.any(only < 0) or np.any(only > n_steps):
            raise ConfigurationError(f"record steps must lie in [0, {n_steps}]")
        return np.unique(np.concatenate([[0], only, [n_steps]]))
    steps = np.arange(0, n_steps + 1, max(1, record_every))
    if steps[-1] != n_steps:
        steps = np.append(steps, n_steps)
    return steps


def simulate_xeps(spec: PotentialSpec, geom: BoxGeometry, eps: float, x0: np.ndarray, dt: float,
                  horizon: float, paths: int, seed: int, route: str = "rescaled",
                  dt_max: float = 0.01, record_every: int = 1, record_steps: Optional[Sequence[int]] = None,
                  drift_offset: Optional[np.ndarray] = None, initial: str = "fixed",
                  stream: int = STREAM_LATTICE, extra_key: Sequence[int] = (),
                  workers: int = 1) -> PathEnsemble:
    """
    Paths of dX_k = sqrt(2) dB_k + eps^-1 b_k(X / eps + offset) dt on the box.

    Args:
        spec (PotentialSpec): Interaction family
        geom (BoxGeometry): Simulation box
        eps (float): Scale parameter in (0, 1]
        x0 (np.ndarray): Start, (n,) shared by all paths or (paths, n)
        dt (float): Time step on the eps scale
        horizon (float): Final time T
        paths (int): Number of paths
        seed (int): Master seed
        route (str): "rescaled" runs the unit-scale process and maps back,
            "direct" integrates the eps-scale SDE
        dt_max (float): Largest unit-scale step that resolves the fast scale
        record_every (int): Recording stride in steps
        record_steps (Optional[Sequence[int]]): Record only these steps, plus 0 and the horizon;
            overrides `record_every`
        drift_offset (Optional[np.ndarray]): Environment shift Theta(y), (n,) or (paths, n)
        initial (str): Initial-condition descriptor stored on the ensemble
        stream (int): Noise stream tag
        extra_key (Sequence[int]): Additional substream key entries
        workers (int): Worker threads

    Returns:
        PathEnsemble: Recorded lifted trajectories of every box site
    """
    if not 0.0 < eps <= 1.0:
        raise ConfigurationError(f"eps must lie in (0, 1], got {eps}")
    if horizon <= 0:
        raise ConfigurationError(f"horizon must be positive, got {horizon}")
    if route not in ROUTES:
        raise ConfigurationError(f"unknown route {route!r}, expected one of {ROUTES}")
    if dt > eps ** 2 * dt_max * (1 + 1e-12):
        raise ResolutionError(f"dt={dt} does not resolve eps={eps}; need dt <= {eps ** 2 * dt_max:.3e}")
    n_steps = int(time_steps([horizon], dt)[0])
    record = _record_steps(n_steps, record_every, record_steps)
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        starts, n_paths = x0[None, :], paths
    elif x0.ndim == 2 and x0.shape[0] == paths:
        starts, n_paths = x0[:, None, :], None
    else:
        raise ConfigurationError(f"x0 must have shape (n,) or ({paths}, n), got {x0.shape}")
    if route == "rescaled":
        (frames,) = simulate_paths(spec, geom, starts / eps, dt / eps ** 2, n_steps, seed=seed,
                                   stream=stream, n_paths=n_paths, quotient=False,
                                   drift_offset=drift_offset, extra_key=extra_key,
                                   observers=[lambda: StateRecorder(record)], workers=workers)
        frames = eps * frames
    else:
        (frames,) = simulate_paths(spec, geom, starts, dt, n_steps, seed=seed, stream=stream,
                                   n_paths=n_paths, quotient=False, eps=eps,
                                   drift_offset=drift_offset, extra_key=extra_key,
                                   observers=[lambda: StateRecorder(record)], workers=workers)
    return PathEnsemble(eps=eps, dt=dt, times=record * dt, paths=frames[:, 0], seed=seed,
                        initial=initial, route=route, sites=tuple(range(geom.n_sites)),
                        flags=[f"route:{route}"])


def gibbs_starts(samples: GibbsSampleSet, eps: float, paths: int, seed: int,
                 key: int = 0) -> np.ndarray:
    """eps * Theta(y) for y drawn with replacement from the Gibbs samples, (paths, n)."""
    rng = substream(seed, STREAM_ENVIRONMENT, key)
    picks = rng.integers(0, len(samples), size=paths)
    return eps * samples.states[picks]


def moment_bound(ensemble: PathEnsemble, geom: BoxGeometry) -> Tuple[float, float]:
    """Monte Carlo E[sum_k 2^-|k| sup_t |X_k(t) - x_k|^2] with its standard error."""
    weights = 2.0 ** (-geom.norms[list(ensemble.sites)])
    sup = np.max((ensemble.paths - ensemble.paths[:, :1]) ** 2, axis=1)
    per_path = sup @ weights
    mean, se = mean_se(per_path)
    return float(mean), float(se)


class _SupGap(PathObserver):
    """Running sup over time of (x_k - x'_k)^2 between replicas 0 and 1."""

    def __init__(self):
        self.sup = None

    def observe(self, step, x, b):
        gap = (x[:, 0] - x[:, 1]) ** 2
        self.sup = gap if self.sup is None else np.maximum(self.sup, gap)

    def result(self) -> np.ndarray:
        return self.sup


@dataclass
class LipschitzReport:
    ratio: float
    se: float
    initial_distance: float
    horizon: float


def lipschitz_moment_check(spec: PotentialSpec, geom: BoxGeometry, x: np.ndarray,
                           x_prime: np.ndarray, horizon: float, dt: float, paths: int,
                           seed: int, workers: int = 1) -> LipschitzReport:
    """
    Empirical A_T in E[sum_k 2^-|k| sup_t |X_k(t,x) - X_k(t,x')|^2] <= A_T |x - x'|^2.

    Both starts are driven by the same noise.
    """
    x, x_prime = np.asarray(x, dtype=float), np.asarray(x_prime, dtype=float)
    weights = 2.0 ** (-geom.norms)
    initial = float(((x - x_prime) ** 2) @ weights)
    if initial == 0.0:
        raise ConfigurationError("the two starts coincide")
    n_steps = int(time_steps([horizon], dt)[0])
    (sup,) = simulate_paths(spec, geom, np.stack([x, x_prime]), dt, n_steps, seed=seed,
                            stream=STREAM_LATTICE, n_paths=paths, quotient=False,
                            observers=[_SupGap], extra_key=(1,), workers=workers)
    per_path = sup @ weights / initial
    return LipschitzReport(ratio=float(per_path.mean()),
                           se=float(per_path.std(ddof=1) / np.sqrt(paths)),
                           initial_distance=initial, horizon=horizon)


@dataclass
class MartingaleNullReport:
    n_bins: int
    mean_z: float
    orthogonality_z: float
    conditional_z: float
    critical_z: float

    @property
    def passed(self) -> bool:
        return max(self.mean_z, self.orthogonality_z, self.conditional_z) <= self.critical_z


@dataclass(eq=False)
class MartingalePart:
    sites: Tuple[int, ...]
    times: np.ndarray
    values: np.ndarray         # (P, n_rec, K), zero at the first time
    source_tag: str
    corrector_se: float
    null_test: Optional[MartingaleNullReport] = None
    flags: List[str] = field(default_factory=list)

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=1)


def martingale_null_test(part: MartingalePart, ensemble: PathEnsemble, n_bins: int = 4,
                         level: float = TEST_LEVEL) -> MartingaleNullReport:
    """
    Zero-mean, orthogonality and conditional-mean tests on binned increments.

    Bin increments are tested for zero mean, zero correlation with the previous
    bin's increment, and zero correlation with cos and sin of the scaled state
    at the start of the bin. The critical value is Bonferroni-corrected.
    """
    edges = np.unique(np.linspace(0, len(part.times) - 1, n_bins + 1).round().astype(int))
    if len(edges) < 3:
        raise ConfigurationError("martingale test needs at least two time bins")
    cols = ensemble.columns(part.sites)
    inc = part.values[:, edges[1:]] - part.values[:, edges[:-1]]              # (P, B, K)
    state = ensemble.paths[:, edges[:-1]][:, :, cols] / ensemble.eps          # (P, B, K)
    mean_z = z_scores(inc)
    orth_z = z_scores(inc[:, 1:] * inc[:, :-1])
    cond_z = np.maximum(z_scores(inc * np.cos(state)), z_scores(inc * np.sin(state)))
    n_tests = mean_z.size + orth_z.size + 2 * cond_z.size
    critical = bonferroni_critical(level, n_tests)
    return MartingaleNullReport(n_bins=len(edges) - 1, mean_z=float(mean_z.max()),
                                orthogonality_z=float(orth_z.max(initial=0.0)),
                                conditional_z=float(cond_z.max()), critical_z=critical)


def martingale_decompose(ensemble: PathEnsemble, source: CorrectorSource,
                         sites: Optional[Sequence[int]] = None, se_budget: float = 0.05,
                         n_bins: int = 4) -> MartingalePart:
    """
    M_t = (X_k(t) - X_k(0)) - eps (chi_k(X_t / eps) - chi_k(X_0 / eps)) per path.

    Args:
        ensemble (PathEnsemble): Lattice paths carrying every box site
        source (CorrectorSource): Corrector evaluator
        sites (Optional[Sequence[int]]): Sites k to decompose; all by default
        se_budget (float): Largest tolerated corrector standard error
        n_bins (int): Time bins of the martingale null test

    Returns:
        MartingalePart: Martingale values and the null-test report
    """
    sites = tuple(ensemble.sites) if sites is None else tuple(int(s) for s in sites)
    cols = ensemble.columns(sites)
    chi, chi_se = source.values(ensemble.paths / ensemble.eps, sites)
    shift = ensemble.paths[:, :, cols] - ensemble.paths[:, :1, cols]
    values = shift - ensemble.eps * (chi - chi[:, :1])
    flags = []
    worst_se = float(chi_se.max(initial=0.0))
    if worst_se > se_budget:
        flags.append("corrector_se_above_budget")
        logger.warning(f"Corrector SE {worst_se:.3g} above budget {se_budget}")
    part = MartingalePart(sites=sites, times=ensemble.times, values=values, source_tag=source.tag,
                          corrector_se=worst_se, flags=flags)
    if len(ensemble.times) > n_bins:
        part.null_test = martingale_null_test(part, ensemble, n_bins=n_bins)
        if not part.null_test.passed:
            part.flags.append("martingale_null_rejected")
            logger.warning("Martingale null test rejected on at least one bin")
    return part


@dataclass
class QuadraticVariationReport:
    sites: Tuple[int, ...]
    time: float
    realized: np.ndarray       # (K, K)
    integrated: np.ndarray     # (K, K)
    gap_se: np.ndarray         # (K, K)

    @property
    def gap(self) -> np.ndarray:
        return self.realized - self.integrated

    @property
    def relative_gap(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(np.abs(self.integrated) > 0, self.gap / np.abs(self.integrated), self.gap)

    @property
    def max_z(self) -> float:
        return gap_z(self.gap, self.gap_se)

    @property
    def passed(self) -> bool:
        return self.max_z <= 3.0


def qv_check(part: MartingalePart, ensemble: PathEnsemble, source: CorrectorSource) -> QuadraticVariationReport:
    """
    Realized covariation sum dM^k dM^l against the integral of a_kl(X_s / eps).

    a_kl(y) = sum_j chi'_kj(y) chi'_lj(y) with chi'_kj = sqrt(2)(delta_kj - d_j chi_k);
    the time integral uses the trapezoid rule on the recorded grid.
    """
    if not np.array_equal(part.times, ensemble.times):
        raise ConfigurationError("martingale part and ensemble come from different grids")
    n = ensemble.paths.shape[-1]
    scaled = ensemble.paths / ensemble.eps
    rows = []
    for k in part.sites:
        delta = np.zeros(n)
        delta[k] = 1.0
        rows.append(np.sqrt(2.0) * (delta - source.gradients(scaled, k)))
    rows = np.stack(rows, axis=-2)                                          # (P, T, K, n)
    a = np.einsum("ptkj,ptlj->ptkl", rows, rows)
    dt = np.diff(ensemble.times)[None, :, None, None]
    integral = np.sum(0.5 * (a[:, 1:] + a[:, :-1]) * dt, axis=1)            # (P, K, K)
    inc = part.increments()
    realized = np.einsum("ptk,ptl->pkl", inc, inc)
    diff = realized - integral
    return QuadraticVariationReport(sites=part.sites, time=float(ensemble.times[-1]),
                                    realized=realized.mean(axis=0), integrated=integral.mean(axis=0),
                                    gap_se=diff.std(axis=0, ddof=1) / np.sqrt(len(diff)))


def corrected_process(ensemble: PathEnsemble, source: CorrectorSource,
                      sites: Optional[Sequence[int]] = None) -> PathEnsemble:
    """X-hat_t = X_t - eps chi(X_t / eps) + eps chi(X_0 / eps) on `sites`, others unchanged."""
    sites = tuple(ensemble.sites) if sites is None else tuple(int(s) for s in sites)
    cols = ensemble.columns(sites)
    chi, _ = source.values(ensemble.paths / ensemble.eps, sites)
    out = ensemble.paths.copy()
    out[:, :, cols] -= ensemble.eps * (chi - chi[:, :1])
    return PathEnsemble(eps=ensemble.eps, dt=ensemble.dt, times=ensemble.times, paths=out,
                        seed=ensemble.seed, initial=ensemble.initial, route="corrected",
                        sites=ensemble.sites, flags=ensemble.flags + [f"corrector:{source.tag}"])


@dataclass
class LimitSampler:
    sites: Tuple[int, ...]
    factor: FactorBlock
    seed: int

    @classmethod
    def from_matrix(cls, abar: EffectiveMatrix, sites: Optional[Sequence[int]], seed: int) -> "LimitSampler":
        sites = tuple(abar.sites) if sites is None else tuple(int(s) for s in sites)
        return cls(sites=sites, factor=abar.factorize(sites), seed=seed)

    @property
    def covariance(self) -> np.ndarray:
        return self.factor.sigma @ self.factor.sigma.T


def abar_block(abar: EffectiveMatrix, sites: Sequence[int]) -> np.ndarray:
    return abar.block(sites)[0]


def gaussian_limit_sample(sampler: LimitSampler, times: Sequence[float], paths: int,
                          key: int = 0) -> PathEnsemble:
    """
    Centered Gaussian paths with independent increments of covariance dt * A-bar.

    Args:
        sampler (LimitSampler): Factorized limit covariance on a block
        times (Sequence[float]): Positive increasing times; 0 is prepended
        paths (int): Number of sample paths
        key (int): Sample index, distinct keys give independent samples

    Returns:
        PathEnsemble: Limit paths on the sampler's sites with Y_0 = 0
    """
    times = np.concatenate([[0.0], np.asarray(times, dtype=float)])
    steps = np.diff(times)
    if np.any(steps <= 0):
        raise ConfigurationError("limit sample times must be positive and increasing")
    K = len(sampler.sites)
    noise = PathNoise(sampler.seed, STREAM_LIMIT, 0, paths, K, extra_key=(key,)).block(len(steps))
    inc = np.sqrt(steps)[:, None, None] * noise @ sampler.factor.sigma.T     # (m, P, K)
    values = np.concatenate([np.zeros((1, paths, K)), np.cumsum(inc, axis=0)], axis=0)
    return PathEnsemble(eps=0.0, dt=0.0, times=times, paths=np.transpose(values, (1, 0, 2)),
                        seed=sampler.seed, initial="zero", route="gaussian_limit",
                        sites=sampler.sites)


def path_metric(path_a: np.ndarray, path_b: np.ndarray, times: np.ndarray, norms: np.ndarray,
                n_max: int = 10) -> np.ndarray:
    """
    rho = sum_{n <= n_max} 2^-n min(1, sqrt(sum_k 2^-|k| sup_{t <= n} |x_k - x'_k|^2)).

    The omitted tail is at most 2^-n_max. Terms with n beyond the recorded
    horizon use the whole recorded path.

    Args:
        path_a (np.ndarray): Paths of shape (..., n_rec, K)
        path_b (np.ndarray): Paths on the same grid and sites
        times (np.ndarray): Recorded times, (n_rec,)
        norms (np.ndarray): |k| of the K sites
        n_max (int): Number of horizon terms

    Returns:
        np.ndarray: rho per path, shape (...)
    """
    path_a, path_b = np.asarray(path_a, dtype=float), np.asarray(path_b, dtype=float)
    if path_a.shape != path_b.shape:
        raise ConfigurationError(f"paths differ in shape: {path_a.shape} vs {path_b.shape}")
    weights = 2.0 ** (-np.asarray(norms, dtype=float))
    gap = (path_a - path_b) ** 2
    total = np.zeros(path_a.shape[:-2])
    for n in range(1, n_max + 1):
        upto = np.asarray(times) <= n + 1e-12
        sup = gap[..., upto, :].max(axis=-2)
        total += 2.0 ** (-n) * np.minimum(1.0, np.sqrt(sup @ weights))
    return total


def approximation_distance(xi: PathEnsemble, zeta: PathEnsemble, geom: BoxGeometry,
                           n_max: int = 10) -> Tuple[float, float]:
    """Mean rho(xi, zeta) over paths with its standard error."""
    if xi.sites != zeta.sites or not np.array_equal(xi.times, zeta.times):
        raise ConfigurationError("xi and zeta ensembles are not on the same grid and sites")
    rho = path_metric(xi.paths, zeta.paths, xi.times, geom.norms[list(xi.sites)], n_max)
    mean, se = mean_se(rho)
    return float(mean), float(se)


def _recover_drivers(ensemble: PathEnsemble, martingale: MartingalePart, block: Sequence[int],
                     sigma_fn: Callable[[np.ndarray], np.ndarray], threshold: float) -> np.ndarray:
    cols = [martingale.sites.index(s) for s in block]
    dm = martingale.increments()[:, :, cols]                                    # (P, m, K)
    sigma = sigma_fn(ensemble.paths[:, :-1] / ensemble.eps)                     # (P, m, K, K)
    cond = np.linalg.cond(sigma)
    worst = float(np.max(cond))
    if not np.isfinite(worst) or worst > threshold:
        raise ConditionNumberError(f"factor block condition number {worst:.3g} above {threshold:.1e}")
    return np.einsum("ptkl,ptl->ptk", np.linalg.pinv(sigma), dm)


def simulate_zeta(ensemble: PathEnsemble, factor: FactorBlock, mode: str = "shared",
                  martingale: Optional[MartingalePart] = None,
                  sigma_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                  seed: int = 0, condition_threshold: float = CONDITION_THRESHOLD) -> PathEnsemble:
    """
    Approximation process zeta^eps on the truncated block, frozen elsewhere.

    zeta_k(t) = X_k(0) + sum_l int sigma-tilde_kl(X_s / eps) dB_l(s) for k in the
    block. In shared mode the driver increments are recovered from the
    martingale increments through the pseudo-inverse of sigma^N; an
    ill-conditioned block falls back to independent drivers.

    Args:
        ensemble (PathEnsemble): Lattice paths X^eps carrying every box site
        factor (FactorBlock): Block sites with sigma-tilde in `factor.smoothed`,
            or a constant factor when no smoothed field is attached
        mode (str): "shared" or "independent"
        martingale (Optional[MartingalePart]): Needed in shared mode
        sigma_fn (Optional[Callable]): sigma^N(y) for driver recovery; the
            smoothed factor is used when omitted
        seed (int): Seed of the independent drivers
        condition_threshold (float): Largest accepted condition number

    Returns:
        PathEnsemble: zeta paths on the ensemble's grid and sites
    """
    if mode not in COUPLING_MODES:
        raise ConfigurationError(f"unknown coupling mode {mode!r}, expected one of {COUPLING_MODES}")
    n = ensemble.paths.shape[-1]
    if ensemble.sites != tuple(range(n)):
        raise ConfigurationError("the approximation process needs paths of every box site")
    block = list(factor.sites)
    K = len(block)
    scaled = ensemble.paths[:, :-1] / ensemble.eps
    if factor.smoothed is not None:
        sigma_tilde = factor.smoothed.evaluate(scaled)                          # (P, m, K, K)
    else:
        sigma_tilde = np.broadcast_to(factor.sigma, scaled.shape[:2] + (K, K))
    flags = []
    used = mode
    drivers = None
    if mode == "shared":
        if martingale is None:
            raise ConfigurationError("shared-noise coupling needs the martingale part")
        if sigma_fn is None:
            flags.append("driver_recovery_uses_smoothed_factor")
            if factor.smoothed is not None:
                sigma_fn = factor.smoothed.evaluate
            else:
                sigma_fn = lambda y: np.broadcast_to(factor.sigma, y.shape[:-1] + (K, K))
        try:
            drivers = _recover_drivers(ensemble, martingale, block, sigma_fn, condition_threshold)
        except ConditionNumberError as exc:
            logger.warning(f"{exc}; falling back to independent drivers")
            flags.append("fallback_independent")
            used = "independent"
    if drivers is None:
        steps = np.diff(ensemble.times)
        noise = PathNoise(seed, STREAM_ZETA, 0, ensemble.n_paths, K).block(len(steps))
        drivers = np.transpose(noise, (1, 0, 2)) * np.sqrt(steps)[None, :, None]
    inc = np.einsum("ptkl,ptl->ptk", sigma_tilde, drivers)
    out = np.broadcast_to(ensemble.paths[:, :1], ensemble.paths.shape).copy()
    out[:, 1:, block] += np.cumsum(inc, axis=1)
    return PathEnsemble(eps=ensemble.eps, dt=ensemble.dt, times=ensemble.times, paths=out,
                        seed=seed, initial=ensemble.initial, route=f"zeta_{used}",
                        sites=ensemble.sites, flags=flags)


@dataclass
class FourthMomentReport:
    times: np.ndarray
    moments: np.ndarray
    se: np.ndarray
    slope: float
    a: float
    b: float
    c_prime: float
    N: int

    @property
    def passed(self) -> bool:
        return self.slope <= 2.1


def fourth_moment_envelope(zeta: PathEnsemble, sites: Sequence[int], N: int) -> FourthMomentReport:
    """
    E|zeta_k(t) - zeta_k(0)|^4 against A t^2 + B t^1.5.

    The largest moment over `sites` is fitted by non-negative least squares; the
    implied C' solves A = 2 (5/2 + C'/N)^2.
    """
    disp = zeta.displacement(sites)                                   # (P, m, K)
    fourth = disp ** 4
    moments_k = fourth.mean(axis=0)
    worst = np.argmax(moments_k, axis=1)
    rows = np.arange(len(worst))
    moments = moments_k[rows, worst]
    se = fourth.std(axis=0, ddof=1)[rows, worst] / np.sqrt(zeta.n_paths)
    t = zeta.times[1:]
    positive = moments > 0
    if positive.sum() >= 2:
        slope = float(np.polyfit(np.log(t[positive]), np.log(moments[positive]), 1)[0])
    else:
        slope = 0.0
    (a, b), _ = optimize.nnls(np.stack([t ** 2, t ** 1.5], axis=1), moments)
    c_prime = N * (np.sqrt(a / 2.0) - 2.5)
    return FourthMomentReport(times=t, moments=moments, se=se, slope=slope, a=float(a),
                              b=float(b), c_prime=float(c_prime), N=N)


@dataclass
class DistanceShapeFit:
    c1: float
    c2: float
    c3: float
    c4: float
    residual: float

    def predict(self, N: np.ndarray, eps: np.ndarray) -> np.ndarray:
        N, eps = np.asarray(N, dtype=float), np.asarray(eps, dtype=float)
        return self.c1 / np.sqrt(N) + self.c2 * eps + self.c3 * np.exp(-self.c4 * N)


def fit_distance_shape(N_values: Sequence[int], eps_values: Sequence[float],
                       distances: Sequence[float],
                       c4_grid: Optional[Sequence[float]] = None) -> DistanceShapeFit:
    """Non-negative fit of C1 / sqrt(N) + eps C2 + C3 exp(-C4 N), C4 on a grid."""
    N = np.asarray(N_values, dtype=float)
    eps = np.asarray(eps_values, dtype=float)
    target = np.asarray(distances, dtype=float)
    grid = np.linspace(0.1, 3.0, 30) if c4_grid is None else np.asarray(c4_grid, dtype=float)
    best = None
    for c4 in grid:
        design = np.stack([1.0 / np.sqrt(N), eps, np.exp(-c4 * N)], axis=1)
        coefs, residual = optimize.nnls(design, target)
        if best is None or residual < best.residual:
            best = DistanceShapeFit(*map(float, coefs), c4=float(c4), residual=float(residual))
    return best


@dataclass
class TightnessReport:
    horizon: float
    ladder: List[Tuple[float, int]]
    fractions: np.ndarray
    se: np.ndarray
    n_paths: int
    reference: Optional[np.ndarray] = None

    @property
    def max_excess_z(self) -> float:
        """Largest excess of the violation fraction over the Brownian reference, in SE."""
        if self.reference is None:
            return 0.0
        se = np.hypot(self.se, np.sqrt(self.reference * (1 - self.reference) / self.n_paths))
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, (self.fractions - self.reference) / se, 0.0)
        return float(z.max(initial=0.0))


def _modulus_violations(paths: np.ndarray, times: np.ndarray, norms: np.ndarray, n: float,
                        ladder: Sequence[Tuple[float, int]]) -> np.ndarray:
    upto = times <= n + 1e-12
    window = paths[:, upto]                                          # (P, T, K)
    dt = float(np.min(np.diff(times[upto]))) if upto.sum() > 1 else 1.0
    weights = 2.0 ** (-norms / 2.0)
    out = np.zeros((len(ladder), len(paths)), dtype=bool)
    for i, (h, m) in enumerate(ladder):
        size = max(1, int(np.floor(h / dt + 1e-9))) + 1
        hi = ndimage.maximum_filter1d(window, size=size, axis=1, mode="nearest")
        lo = ndimage.minimum_filter1d(window, size=size, axis=1, mode="nearest")
        modulus = np.max(hi - lo, axis=1) ** 2                       # (P, K)
        out[i] = np.any(weights * modulus > 1.0 / m, axis=1)
    return out


def tightness_diagnostic(ensemble: PathEnsemble, geom: BoxGeometry, n: float,
                         ladder: Sequence[Tuple[float, int]] = ((0.25, 1), (0.125, 2), (0.0625, 4)),
                         reference: bool = True, seed: int = 0) -> TightnessReport:
    """
    Fraction of paths whose weighted modulus of continuity breaks each (h, 1/m) rung.

    A path violates rung (h, m) when some site has
    2^-|k|/2 max_{|t-s| <= h, s,t <= n} |x_k(t) - x_k(s)|^2 > 1/m. The reference
    fractions come from sqrt(2) B paths on the same grid.
    """
    if ensemble.times[-1] < n - 1e-12:
        raise ConfigurationError(f"ensemble horizon {ensemble.times[-1]} is shorter than n={n}")
    norms = geom.norms[list(ensemble.sites)]
    ladder = [(float(h), int(m)) for h, m in ladder]
    hits = _modulus_violations(ensemble.paths, ensemble.times, norms, n, ladder)
    fractions = hits.mean(axis=1)
    se = np.sqrt(fractions * (1 - fractions) / ensemble.n_paths)
    ref = None
    if reference:
        steps = np.diff(ensemble.times)
        noise = PathNoise(seed, STREAM_BOOTSTRAP, 0, ensemble.n_paths, len(ensemble.sites)).block(len(steps))
        inc = np.sqrt(2.0 * steps)[:, None, None] * noise
        brownian = np.concatenate([np.zeros((1,) + inc.shape[1:]), np.cumsum(inc, axis=0)])
        ref = _modulus_violations(np.transpose(brownian, (1, 0, 2)), ensemble.times, norms, n,
                                  ladder).mean(axis=1)
    return TightnessReport(horizon=n, ladder=ladder, fractions=fractions, se=se,
                           n_paths=ensemble.n_paths, reference=ref)


@dataclass
class ConvergenceReport:
    mode: str
    eps: List[float]
    sites: Tuple[int, ...]
    times: List[float]
    thresholds: Dict[str, float]
    records: List[Dict] = field(default_factory=list)
    verdicts: Dict[str, Dict] = field(default_factory=dict)

    def add(self, eps: float, statistic: str, value: float, se: float = 0.0,
            floor: Optional[float] = None) -> None:
        if not value >= 0.0:
            raise NumericError(f"distance {statistic} at eps={eps} is {value}, expected >= 0")
        self.records.append({"eps": float(eps), "statistic": statistic, "value": float(value),
                             "se": float(se), "floor": None if floor is None else float(floor)})

    def value(self, eps: float, statistic: str) -> Dict:
        for record in self.records:
            if record["statistic"] == statistic and np.isclose(record["eps"], eps):
                return record
        raise KeyError(f"no {statistic} record at eps={eps}")

    def series(self, statistic: str) -> List[Dict]:
        rows = [r for r in self.records if r["statistic"] == statistic]
        return sorted(rows, key=lambda r: -r["eps"])

    @property
    def passed(self) -> bool:
        return all(v["passed"] for v in self.verdicts.values())

    @property
    def inconclusive(self) -> bool:
        return any(v.get("inconclusive", False) for v in self.verdicts.values())

    def to_records(self) -> List[Dict]:
        """One JSON-lines record per (eps, statistic) plus one per verdict."""
        out = [dict(r, mode=self.mode) for r in self.records]
        out += [{"mode": self.mode, "verdict": name, **v} for name, v in self.verdicts.items()]
        return out

    def to_csv_rows(self) -> List[Dict]:
        return [{"mode": self.mode, "eps": r["eps"], "statistic": r["statistic"], "value": r["value"],
                 "se": r["se"], "floor": "" if r["floor"] is None else r["floor"]} for r in self.records]


def _compare_to_limit(report: ConvergenceReport, eps: float, disp: np.ndarray, limit: np.ndarray,
                      floor: np.ndarray, target: np.ndarray, times: np.ndarray) -> None:
    gap, gap_se = covariance_gap(disp, times, target)
    floor_gap, _ = covariance_gap(floor, times, target)
    report.add(eps, "covariance_gap", gap, gap_se, floor_gap)
    ks_stat, ks_p = ks_statistics(disp, limit)
    floor_ks, _ = ks_statistics(floor, limit)
    report.add(eps, "ks_statistic", ks_stat, 0.0, floor_ks)
    report.add(eps, "ks_min_pvalue", ks_p)
    report.add(eps, "energy_distance", energy_distance(disp, limit), 0.0, energy_distance(floor, limit))


def _judge(report: ConvergenceReport, n_ks_tests: int) -> None:
    threshold = report.thresholds["covariance_gap"]
    gaps = report.series("covariance_gap")
    trend_ok = all(b["value"] <= a["value"] + np.hypot(a["se"], b["se"]) for a, b in zip(gaps, gaps[1:]))
    report.verdicts["covariance_trend"] = {"passed": bool(trend_ok), "inconclusive": False,
                                           "detail": [round(g["value"], 6) for g in gaps]}
    final = gaps[-1]
    report.verdicts["covariance_final"] = {
        "passed": bool(final["value"] <= threshold), "inconclusive": bool(3 * final["se"] > threshold),
        "detail": f"gap {final['value']:.4g} +/- {final['se']:.2g} against threshold {threshold:.4g}"}
    energies = report.series("energy_distance")
    slack = max((e["floor"] or 0.0) for e in energies)
    energy_ok = all(b["value"] <= a["value"] + slack for a, b in zip(energies, energies[1:]))
    report.verdicts["energy_trend"] = {"passed": bool(energy_ok), "inconclusive": False,
                                       "detail": [round(e["value"], 6) for e in energies]}
    level = report.thresholds["level"] / max(1, n_ks_tests)
    p_final = report.series("ks_min_pvalue")[-1]["value"]
    report.verdicts["ks_final"] = {"passed": bool(p_final >= level), "inconclusive": False,
                                   "detail": f"min p-value {p_final:.3g} against {level:.3g}"}


def _limit_pair(abar: EffectiveMatrix, sites: Sequence[int], times: Sequence[float], paths: int,
                seed: int) -> Tuple[LimitSampler, np.ndarray, np.ndarray]:
    sampler = LimitSampler.from_matrix(abar, sites, seed)
    limit = gaussian_limit_sample(sampler, times, paths, key=0).displacement()
    floor = gaussian_limit_sample(sampler, times, paths, key=1).displacement()
    return sampler, limit, floor


def weak_convergence_test(spec: PotentialSpec, geom: BoxGeometry, eps_list: Sequence[float],
                          abar: EffectiveMatrix, times: Sequence[float], paths: int,
                          dt_quotient: float, seed: int, sites: Optional[Sequence[int]] = None,
                          samples: Optional[GibbsSampleSet] = None, start_mode: str = "gibbs",
                          fixed_start: Optional[np.ndarray] = None,
                          gap_fraction: float = COVARIANCE_GAP_FRACTION, level: float = TEST_LEVEL,
                          workers: int = 1) -> ConvergenceReport:
    """
    Compare finite-dimensional laws of X^eps - X^eps(0) with the Gaussian limit.

    Args:
        spec (PotentialSpec): Interaction family
        geom (BoxGeometry): Simulation box
        eps_list (Sequence[float]): Scales, compared in decreasing order
        abar (EffectiveMatrix): Limit covariance per unit time
        times (Sequence[float]): Observation times t_1 < ... < t_m
        paths (int): Paths per eps and per limit sample
        dt_quotient (float): Unit-scale time step; the eps-scale step is eps^2 times it
        seed (int): Master seed
        sites (Optional[Sequence[int]]): Observed coordinates, the origin by default
        samples (Optional[GibbsSampleSet]): Gibbs states for the eps Theta(y) starts
        start_mode (str): "gibbs" or "fixed"
        fixed_start (Optional[np.ndarray]): Start used in fixed mode
        gap_fraction (float): Covariance-gap threshold as a fraction of max A-bar_kk
        level (float): Family-wise KS test level
        workers (int): Worker threads

    Returns:
        ConvergenceReport: Distances per eps and verdicts
    """
    if start_mode not in ("gibbs", "fixed"):
        raise ConfigurationError(f"unknown start mode {start_mode!r}")
    if start_mode == "gibbs" and samples is None:
        raise ConfigurationError("gibbs start mode needs a Gibbs sample set")
    if start_mode == "fixed" and fixed_start is None:
        fixed_start = np.zeros(geom.n_sites)
    sites = (geom.origin,) if sites is None else tuple(int(s) for s in sites)
    eps_list = sorted((float(e) for e in eps_list), reverse=True)
    times = np.asarray(times, dtype=float)
    sampler, limit, floor = _limit_pair(abar, sites, times, paths, seed)
    target = sampler.covariance
    threshold = gap_fraction * float(np.max(np.diag(target)))
    report = ConvergenceReport(mode=start_mode, eps=eps_list, sites=sites, times=times.tolist(),
                               thresholds={"covariance_gap": threshold, "level": level})
    for i, eps in enumerate(eps_list):
        if start_mode == "gibbs":
            x0 = gibbs_starts(samples, eps, paths, seed, key=i)
        else:
            x0 = np.asarray(fixed_start, dtype=float)
        dt = eps ** 2 * dt_quotient
        ensemble = simulate_xeps(spec, geom, eps, x0, dt, float(times[-1]), paths, seed,
                                 dt_max=dt_quotient, record_steps=time_steps(times, dt), initial=start_mode,
                                 extra_key=(i,), workers=workers)
        observed = ensemble.paths[:, ensemble.indices(times)][:, :, list(sites)]
        disp = observed - ensemble.paths[:, :1, list(sites)]
        _compare_to_limit(report, eps, disp, limit, floor, target, times)
        logger.info(f"eps={eps}: covariance gap {report.value(eps, 'covariance_gap')['value']:.4g}")
    _judge(report, n_ks_tests=len(times) * len(sites))
    return report


def random_env_run(spec: PotentialSpec, geom: BoxGeometry, eps_list: Sequence[float],
                   abar: EffectiveMatrix, samples: GibbsSampleSet, times: Sequence[float],
                   n_environments: int, paths_per_environment: int, dt_quotient: float,
                   seed: int, sites: Optional[Sequence[int]] = None,
                   gap_fraction: float = COVARIANCE_GAP_FRACTION, level: float = TEST_LEVEL,
                   workers: int = 1) -> ConvergenceReport:
    """
    Runs from 0 in frozen random environments: drift eps^-1 b(x / eps + Theta(y)).

    The pooled paths give the mu0-averaged distances to the limit; per
    environment the characteristic-function gap |E exp(i Z_k(t)) - exp(-t a_kk / 2)|
    is reported as its mean and maximum over environments.
    """
    sites = (geom.origin,) if sites is None else tuple(int(s) for s in sites)
    eps_list = sorted((float(e) for e in eps_list), reverse=True)
    times = np.asarray(times, dtype=float)
    environments = samples.states[samples.take(n_environments)]
    n_env = len(environments)
    paths = n_env * paths_per_environment
    offsets = np.repeat(environments, paths_per_environment, axis=0)
    sampler, limit, floor = _limit_pair(abar, sites, times, paths, seed)
    target = sampler.covariance
    threshold = gap_fraction * float(np.max(np.diag(target)))
    report = ConvergenceReport(mode="environment", eps=eps_list, sites=sites, times=times.tolist(),
                               thresholds={"covariance_gap": threshold, "level": level})
    expected = np.exp(-0.5 * times[:, None] * np.diag(target)[None, :])          # (m, K)
    for i, eps in enumerate(eps_list):
        dt = eps ** 2 * dt_quotient
        ensemble = simulate_xeps(spec, geom, eps, np.zeros((paths, geom.n_sites)), dt,
                                 float(times[-1]), paths, seed, dt_max=dt_quotient,
                                 record_steps=time_steps(times, dt), drift_offset=offsets, initial="environment",
                                 stream=STREAM_ENVIRONMENT, extra_key=(i,), workers=workers)
        if np.any(ensemble.paths[:, 0] != 0.0):
            raise NumericError("random-environment runs must start at 0")
        disp = ensemble.paths[:, ensemble.indices(times)][:, :, list(sites)]
        _compare_to_limit(report, eps, disp, limit, floor, target, times)
        per_env = np.exp(1j * disp).reshape(n_env, paths_per_environment, len(times), len(sites))
        cf_gap = np.abs(per_env.mean(axis=1) - expected[None]).max(axis=(1, 2))
        report.add(eps, "cf_gap_mean", float(cf_gap.mean()),
                   float(cf_gap.std(ddof=1) / np.sqrt(n_env)) if n_env > 1 else 0.0)
        report.add(eps, "cf_gap_max", float(cf_gap.max()))
    _judge(report, n_ks_tests=len(times) * len(sites))
    return report


def write_frame(path: Union[str, Path], ensemble: PathEnsemble, geom: BoxGeometry) -> None:
    """
    Spill an ensemble to a little-endian binary frame file.

    Layout: one FRAME_HEADER record (magic "HLFR", version, d, n_box, n_times,
    n_paths, n_sites, eps, dt, seed), then n_times float64 times, n_sites int64
    site indices, then the body as float64 in path-major, time-major, site-major
    order.
    """
    header = np.zeros(1, dtype=FRAME_HEADER)
    header[0] = (FRAME_MAGIC, FRAME_VERSION, geom.d, geom.n_box, len(ensemble.times),
                 ensemble.n_paths, len(ensemble.sites), ensemble.eps, ensemble.dt, ensemble.seed)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(ensemble.times.astype("<f8").tobytes())
        fh.write(np.asarray(ensemble.sites, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(ensemble.paths, dtype="<f8").tobytes())
    logger.info(f"Wrote {ensemble.n_paths} paths to {path}")


def read_frame(path: Union[str, Path]) -> Tuple[PathEnsemble, BoxGeometry]:
    raw = Path(path).read_bytes()
    header = np.frombuffer(raw, dtype=FRAME_HEADER, count=1)[0]
    if header["magic"] != FRAME_MAGIC or header["version"] != FRAME_VERSION:
        raise ConfigurationError(f"{path} is not a version {FRAME_VERSION} frame file")
    n_times, n_paths, n_sites = int(header["n_times"]), int(header["n_paths"]), int(header["n_sites"])
    offset = FRAME_HEADER.itemsize
    times = np.frombuffer(raw, dtype="<f8", count=n_times, offset=offset)
    offset += 8 * n_times
    sites = np.frombuffer(raw, dtype="<i8", count=n_sites, offset=offset)
    offset += 8 * n_sites
    body = np.frombuffer(raw, dtype="<f8", count=n_paths * n_times * n_sites, offset=offset)
    ensemble = PathEnsemble(eps=float(header["eps"]), dt=float(header["dt"]), times=times.copy(),
                            paths=body.reshape(n_paths, n_times, n_sites).copy(),
                            seed=int(header["seed"]), initial="frame", route="frame",
                            sites=tuple(int(s) for s in sites))
    return ensemble, BoxGeometry(int(header["d"]), int(header["n_box"]))
