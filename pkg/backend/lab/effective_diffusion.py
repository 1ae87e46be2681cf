"""
aim of the module: estimate the effective covariance matrix A-bar on a finite
block of sites, factorize and smooth its pointwise counterpart and pick the
truncation level N(eps).

inputs:
    corrector derivatives at Gibbs samples, stationary lattice runs, the exact
    single-site solution, and a fitted MixingCurve for the truncation rule.

outputs:
    EffectiveMatrix (values, SE, estimator tag), FactorBlock for constant
    blocks, SmoothedFactor for the pointwise factor field, TruncationResult.

method:
    derivative route: <sum_j chi'_kj chi'_lj> over samples with the diagonal
    corrected for Monte Carlo noise. martingale route: windowed increments of
    M^k = X_k - chi_k(X). msd route: least-squares slope of the displacement
    covariance. Constant blocks are eigen-clamped then pivot-Cholesky factored;
    the factor field uses the symmetric square root and is fitted by
    trigonometric least squares with a rising frequency cutoff.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate
from scipy.linalg import lapack

from .corrector import CorrectorDerivatives, CorrectorSource
from .error_handler import (ConfigurationError, DomainError, MatrixNotPSDError, SmoothingBudgetError,
                            TruncationInfeasibleError)
from .potential import BoxGeometry, PotentialSpec
from .rng import STREAM_LATTICE, substream
from .torus_dynamics import GibbsSampleSet, MixingCurve, StateRecorder, simulate_paths, time_steps
from .trig_poly import TWO_PI, LocalFunction, TrigPoly, fit_least_squares

logger = logging.getLogger(__name__)

PROVENANCE_TAGS = ("derivative", "martingale", "msd", "exact1d")
ROW_NORM_BOUND = 2.5
PSD_SE_FACTOR = 3.0


@dataclass
class EffectiveMatrix:
    sites: Tuple[int, ...]
    values: np.ndarray
    se: np.ndarray
    provenance: str
    flags: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.provenance not in PROVENANCE_TAGS:
            raise ConfigurationError(f"unknown estimator tag {self.provenance!r}")
        self.values = np.asarray(self.values, dtype=float)
        self.se = np.asarray(self.se, dtype=float)

    @property
    def symmetrized(self) -> np.ndarray:
        return 0.5 * (self.values + self.values.T)

    def entry(self, k: int, l: int) -> Tuple[float, float]:
        i, j = self.sites.index(k), self.sites.index(l)
        return float(self.values[i, j]), float(self.se[i, j])

    def symmetry_z(self) -> float:
        combined = np.sqrt(self.se ** 2 + self.se.T ** 2)
        gap = np.abs(self.values - self.values.T)
        return _max_z(gap, combined)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.symmetrized).min())

    def psd_ok(self) -> bool:
        return self.min_eigenvalue() >= -PSD_SE_FACTOR * float(self.se.max(initial=0.0))

    def block(self, sites: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        """Symmetrized values and SE restricted to `sites`."""
        try:
            idx = [self.sites.index(int(s)) for s in sites]
        except ValueError as exc:
            raise DomainError(f"effective matrix does not cover sites {list(sites)}") from exc
        rows = np.ix_(idx, idx)
        return self.symmetrized[rows], self.se[rows]

    def factorize(self, sites: Optional[Sequence[int]] = None) -> "FactorBlock":
        """
        Factor of the symmetrized block on `sites`.

        Negative eigenvalues within the PSD tolerance of the estimate
        (PSD_SE_FACTOR standard errors) are clamped to zero; the clamped mass is
        kept on the returned FactorBlock.
        """
        sites = self.sites if sites is None else tuple(int(s) for s in sites)
        values, se = self.block(sites)
        return factorize_block(values, sites, psd_slack=PSD_SE_FACTOR * float(se.max(initial=0.0)))

    def translation_z(self, geom: BoxGeometry) -> float:
        """Largest deviation of an entry from the mean of its k - l class, in SE."""
        diffs = geom.wrap(geom.coords[list(self.sites)][:, None, :] - geom.coords[list(self.sites)][None, :, :])
        keys = [tuple(v) for v in diffs.reshape(-1, geom.d)]
        values, ses = self.values.ravel(), self.se.ravel()
        worst = 0.0
        for key in set(keys):
            members = [i for i, k in enumerate(keys) if k == key]
            if len(members) < 2:
                continue
            mean = values[members].mean()
            worst = max(worst, _max_z(np.abs(values[members] - mean), ses[members]))
        return worst

    def invariant_failures(self, geom: BoxGeometry) -> List[str]:
        failures = []
        if self.symmetry_z() > 3.0:
            failures.append("symmetry")
        if not self.psd_ok():
            failures.append("positive_semidefinite")
        if self.translation_z(geom) > 3.0:
            failures.append("translation_invariance")
        return failures

    def to_rows(self, geom: BoxGeometry) -> List[Dict]:
        rows = []
        for i, k in enumerate(self.sites):
            for j, l in enumerate(self.sites):
                rows.append({"k": k, "l": l,
                             "k_coord": ";".join(map(str, geom.coords[k])),
                             "l_coord": ";".join(map(str, geom.coords[l])),
                             "value": float(self.values[i, j]), "se": float(self.se[i, j]),
                             "estimator": self.provenance})
        return rows

    @classmethod
    def from_rows(cls, rows: Sequence[Dict]) -> "EffectiveMatrix":
        sites = sorted({int(r["k"]) for r in rows})
        slot = {s: i for i, s in enumerate(sites)}
        values = np.zeros((len(sites), len(sites)))
        se = np.zeros_like(values)
        for r in rows:
            i, j = slot[int(r["k"])], slot[int(r["l"])]
            values[i, j], se[i, j] = float(r["value"]), float(r["se"])
        return cls(tuple(sites), values, se, rows[0]["estimator"])


def _max_z(gap: np.ndarray, se: np.ndarray) -> float:
    gap, se = np.asarray(gap), np.asarray(se)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, gap / np.where(se > 0, se, 1.0), np.where(gap > 1e-12, np.inf, 0.0))
    return float(z.max(initial=0.0))


def agreement_z(first: EffectiveMatrix, second: EffectiveMatrix) -> float:
    """Largest entrywise disagreement of two estimates in combined SE."""
    if first.sites != second.sites:
        raise ConfigurationError("estimates cover different blocks")
    return _max_z(np.abs(first.values - second.values), np.sqrt(first.se ** 2 + second.se ** 2))


def derivative_rows(derivs: Dict[int, CorrectorDerivatives], sites: Sequence[int],
                    n_sites: int) -> Tuple[np.ndarray, np.ndarray]:
    """chi' rows and their SE for every block site: arrays of shape (E, K, n)."""
    rows, ses = zip(*(derivs[k].row(n_sites) for k in sites))
    return np.stack(rows, axis=1), np.stack(ses, axis=1)


def abar_from_derivatives(derivs: Dict[int, CorrectorDerivatives], samples: GibbsSampleSet,
                          geom: BoxGeometry, sites: Optional[Sequence[int]] = None) -> EffectiveMatrix:
    """
    a-bar_kl = <sum_j chi'_kj chi'_lj> over the Gibbs samples.

    Args:
        derivs (Dict[int, CorrectorDerivatives]): Derivatives per site, all at
            the sample states
        samples (GibbsSampleSet): Samples the derivatives were evaluated at
        geom (BoxGeometry): Simulation box
        sites (Optional[Sequence[int]]): Block sites, defaults to every key

    Returns:
        EffectiveMatrix: Estimate with the "derivative" tag
    """
    sites = tuple(sorted(derivs) if sites is None else sites)
    rows, row_se = derivative_rows(derivs, sites, geom.n_sites)
    if rows.shape[0] != len(samples):
        raise ConfigurationError("derivatives and samples differ in length")
    products = np.einsum("ekj,elj->ekl", rows, rows)
    noise = np.einsum("ekj,ekj->ek", row_se, row_se)
    products[:, np.arange(len(sites)), np.arange(len(sites))] -= noise
    values, se = samples.mean_and_se(products)
    matrix = EffectiveMatrix(sites, values, se, "derivative")
    if not matrix.psd_ok():
        matrix.flags.append("PSD violation beyond error bars")
        logger.warning("Derivative estimate of a-bar is not PSD within its error bars")
    return matrix


def abar_exact_1d(U: TrigPoly, sites: Sequence[int]) -> EffectiveMatrix:
    """2 / (<e^U> <e^-U>) on the diagonal, averages over [0, 2*pi)."""
    plus, _ = integrate.quad(lambda s: np.exp(U(np.array([s]))), 0.0, TWO_PI, limit=200)
    minus, _ = integrate.quad(lambda s: np.exp(-U(np.array([s]))), 0.0, TWO_PI, limit=200)
    value = 2.0 / ((plus / TWO_PI) * (minus / TWO_PI))
    k = len(sites)
    return EffectiveMatrix(tuple(sites), value * np.eye(k), np.zeros((k, k)), "exact1d")


def abar_from_martingale(spec: PotentialSpec, geom: BoxGeometry, sites: Sequence[int],
                         starts: np.ndarray, source: CorrectorSource, window: float,
                         n_windows: int, dt: float, seed: int, workers: int = 1) -> EffectiveMatrix:
    """
    E[dM^k dM^l] / t from windowed increments of M^k = X_k - chi_k(X).

    Args:
        spec (PotentialSpec): Interaction family
        geom (BoxGeometry): Simulation box
        sites (Sequence[int]): Block sites
        starts (np.ndarray): Stationary start states (runs, n), Gibbs draws
        source (CorrectorSource): Corrector evaluated at the window ends
        window (float): Window length t
        n_windows (int): Consecutive windows per run
        dt (float): Time step
        seed (int): Master seed
        workers (int): Worker threads

    Returns:
        EffectiveMatrix: Estimate with the "martingale" tag
    """
    sites = tuple(sites)
    step = int(time_steps([window], dt)[0])
    record = np.arange(n_windows + 1) * step
    (frames,) = simulate_paths(spec, geom, np.asarray(starts)[:, None, :], dt, int(record[-1]),
                               seed=seed, stream=STREAM_LATTICE, quotient=False,
                               observers=[lambda: StateRecorder(record)], workers=workers,
                               extra_key=(1,))
    frames = frames[:, 0]                                               # (runs, W+1, n)
    chi, chi_se = source.values(frames, sites)
    martingale = frames[..., list(sites)] - chi
    increments = np.diff(martingale, axis=1)                            # (runs, W, K)
    per_run = np.einsum("rwk,rwl->rkl", increments, increments) / (n_windows * window)
    values = per_run.mean(axis=0)
    se = per_run.std(axis=0, ddof=1) / np.sqrt(len(per_run))
    matrix = EffectiveMatrix(sites, values, se, "martingale")
    chi_noise = float(np.mean(chi_se))
    spread = float(np.std(increments))
    if spread > 0 and chi_noise > 0.5 * spread:
        matrix.flags.append("corrector standard error dominates the martingale increments")
        logger.warning("Martingale estimate flagged: corrector noise dominates")
    return matrix


def abar_from_msd(spec: PotentialSpec, geom: BoxGeometry, sites: Sequence[int], starts: np.ndarray,
                  times: Sequence[float], dt: float, seed: int, n_batches: int = 10,
                  residual_tolerance: float = 3.0, workers: int = 1) -> EffectiveMatrix:
    """
    Slope of Cov(X_k(t) - X_k(0), X_l(t) - X_l(0)) against t, with intercept.

    Standard errors come from the spread of the slope across batches of runs.
    """
    sites = tuple(sites)
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ConfigurationError("msd times must be increasing")
    steps = time_steps(times, dt)
    record = np.concatenate([[0], steps])
    (frames,) = simulate_paths(spec, geom, np.asarray(starts)[:, None, :], dt, int(steps.max()),
                               seed=seed, stream=STREAM_LATTICE, quotient=False,
                               observers=[lambda: StateRecorder(record)], workers=workers,
                               extra_key=(2,))
    displacement = frames[:, 0, 1:, :][..., list(sites)] - frames[:, 0, :1, :][..., list(sites)]

    def slopes(block: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        centered = block - block.mean(axis=0, keepdims=True)
        cov = np.einsum("rtk,rtl->tkl", centered, centered) / max(len(block) - 1, 1)
        design = np.stack([times, np.ones_like(times)], axis=1)
        coefs, *_ = np.linalg.lstsq(design, cov.reshape(len(times), -1), rcond=None)
        return coefs[0].reshape(len(sites), len(sites)), cov

    value, cov = slopes(displacement)
    batches = [slopes(b) for b in np.array_split(displacement, n_batches) if len(b) > 1]
    batch_slopes = np.stack([b[0] for b in batches])
    se = batch_slopes.std(axis=0, ddof=1) / np.sqrt(len(batches))
    matrix = EffectiveMatrix(sites, value, se, "msd")
    if len(times) > 2:
        cov_se = np.stack([b[1] for b in batches]).std(axis=0, ddof=1) / np.sqrt(len(batches))
        design = np.stack([times, np.ones_like(times)], axis=1)
        coefs, *_ = np.linalg.lstsq(design, cov.reshape(len(times), -1), rcond=None)
        fitted = (design @ coefs).reshape(cov.shape)
        if _max_z(np.abs(cov - fitted), cov_se) > residual_tolerance:
            matrix.flags.append("displacement covariance not linear in t (pre-asymptotic regime)")
            logger.warning("MSD estimate flagged as pre-asymptotic")
    return matrix


@dataclass
class FactorBlock:
    sites: Tuple[int, ...]
    sigma: np.ndarray
    reconstruction_error: float
    rank: int
    clamped: float
    smoothed: Optional["SmoothedFactor"] = None

    def to_rows(self) -> List[Dict]:
        return [{"k": k, "l": l, "sigma": float(self.sigma[i, j])}
                for i, k in enumerate(self.sites) for j, l in enumerate(self.sites)]


def factorize_block(block: np.ndarray, sites: Optional[Sequence[int]] = None,
                    clamp_tolerance: float = 1e-12, tolerance: float = 1e-10,
                    psd_slack: float = 0.0) -> FactorBlock:
    """
    sigma with sigma sigma^T equal to a PSD block, by pivoted Cholesky.

    Args:
        block (np.ndarray): Symmetric block
        sites (Optional[Sequence[int]]): Site labels of the rows
        clamp_tolerance (float): Relative size of negative eigenvalues clamped to 0
        psd_slack (float): Absolute size of negative eigenvalues clamped to 0, usually a
            multiple of the estimate's standard error
        tolerance (float): Allowed relative Frobenius reconstruction error

    Returns:
        FactorBlock: Factor and reconstruction record
    """
    a = np.asarray(block, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigurationError(f"block must be square, got shape {a.shape}")
    sites = tuple(range(len(a))) if sites is None else tuple(sites)
    a = 0.5 * (a + a.T)
    scale = float(np.abs(a).max(initial=0.0))
    if scale == 0.0:
        return FactorBlock(sites, np.zeros_like(a), 0.0, 0, 0.0)
    w, v = np.linalg.eigh(a)
    limit = max(clamp_tolerance * max(1.0, abs(w).max()), psd_slack)
    if w.min() < -limit:
        raise MatrixNotPSDError(f"block has eigenvalue {w.min():.3e} below the clamp tolerance {-limit:.3e}")
    clamped = float(-w[w < 0].sum())
    if clamped > 0.0:
        logger.info(f"Clamped negative eigenvalue mass {clamped:.3e} (tolerance {limit:.3e})")
    if not np.any(w > 0.0):
        return FactorBlock(sites, np.zeros_like(a), 0.0, 0, clamped)
    a_c = (v * np.maximum(w, 0.0)) @ v.T
    factor, piv, rank, info = lapack.dpstrf(a_c, lower=1, tol=-1.0)
    lower = np.tril(factor)
    lower[:, rank:] = 0.0
    sigma = np.empty_like(lower)
    sigma[piv - 1] = lower
    error = np.linalg.norm(sigma @ sigma.T - a_c) / np.linalg.norm(a_c)
    if error > tolerance:
        sigma = v * np.sqrt(np.maximum(w, 0.0))
        error = np.linalg.norm(sigma @ sigma.T - a_c) / np.linalg.norm(a_c)
        if error > tolerance:
            raise MatrixNotPSDError(f"factor reconstruction error {error:.2e} above {tolerance}")
    return FactorBlock(sites, sigma, float(error), int(rank), clamped)


def factor_field(rows: np.ndarray) -> np.ndarray:
    """
    Pointwise symmetric square root of a_N(y) = rows rows^T.

    Args:
        rows (np.ndarray): chi' rows at sample points, shape (E, K, n)

    Returns:
        np.ndarray: sigma^N(y), shape (E, K, K)
    """
    a = np.einsum("ekj,elj->ekl", rows, rows)
    w, v = np.linalg.eigh(a)
    return np.einsum("ekm,em,elm->ekl", v, np.sqrt(np.maximum(w, 0.0)), v)


def row_norm_check(sigma_field: np.ndarray, samples: GibbsSampleSet) -> Tuple[float, float, bool]:
    """max_k sum_l ||sigma_kl||^2 under mu0 against 5/2."""
    per_sample = np.sum(sigma_field ** 2, axis=2)                                # (E, K)
    means, ses = samples.mean_and_se(per_sample)
    worst = int(np.argmax(means))
    value, se = float(means[worst]), float(ses[worst])
    return value, se, value <= ROW_NORM_BOUND + 3.0 * se


@dataclass
class SmoothedFactor:
    sites: Tuple[int, ...]
    N: int
    cutoff: int
    entries: Dict[Tuple[int, int], LocalFunction]
    distances: np.ndarray        # (K, K) L2(mu0) distances on held-out samples
    history: List[float] = field(default_factory=list)

    @property
    def row_distance(self) -> np.ndarray:
        return self.distances.sum(axis=1)

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = np.empty(y.shape[:-1] + (len(self.sites), len(self.sites)))
        for (i, j), fn in self.entries.items():
            out[..., i, j] = fn(y)
        return out

    def diagonal_polys(self) -> List[LocalFunction]:
        """a-tilde_kk = sum_j sigma-tilde_kj^2 as local functions on a common window."""
        window = sorted({s for fn in self.entries.values() for s in fn.sites})
        out = []
        for i in range(len(self.sites)):
            total = TrigPoly.zero(len(window))
            for j in range(len(self.sites)):
                fn = self.entries[(i, j)]
                wide = fn.poly.embed(len(window), [window.index(s) for s in fn.sites])
                total = total + wide * wide
            out.append(LocalFunction(tuple(window), total))
        return out

    def dependency(self) -> Tuple[int, ...]:
        deps = set()
        for fn in self.entries.values():
            deps.update(fn.sites[v] for v in fn.poly.dependency())
        return tuple(sorted(deps))


def _entry_variables(geom: BoxGeometry, k: int, l: int, radius: float) -> List[int]:
    near = set()
    for s in (k, l):
        dist = np.sqrt(np.sum(geom.wrap(geom.coords - geom.coords[s]) ** 2, axis=1))
        near.update(np.flatnonzero(dist <= radius + 1e-12).tolist())
    return sorted(near)


def smooth_factor(sigma_field: np.ndarray, points: np.ndarray, sites: Sequence[int], N: int,
                  geom: BoxGeometry, max_cutoff: int = 12, radius: float = 0.0) -> SmoothedFactor:
    """
    Trigonometric least-squares fit of the factor field with a rising cutoff.

    Even-indexed samples fit, odd-indexed samples measure the L2(mu0) distance.
    The cutoff rises until every row sum of distances is below 1/N.

    Args:
        sigma_field (np.ndarray): sigma^N at the sample points, (E, K, K)
        points (np.ndarray): Gibbs sample states, (E, n)
        sites (Sequence[int]): Block sites labelling the rows
        N (int): Block radius
        geom (BoxGeometry): Simulation box
        max_cutoff (int): Largest total frequency degree tried
        radius (float): Neighbourhood of k and l each entry may depend on

    Returns:
        SmoothedFactor: Fitted entries and achieved distances
    """
    sites = tuple(sites)
    train, test = points[0::2], points[1::2]
    target = 1.0 / N
    history = []
    for cutoff in range(max_cutoff + 1):
        entries, distances = {}, np.zeros((len(sites), len(sites)))
        for i, k in enumerate(sites):
            for j, l in enumerate(sites):
                window = _entry_variables(geom, k, l, radius)
                poly = fit_least_squares(train[:, window], sigma_field[0::2, i, j],
                                         list(range(len(window))), cutoff)
                fn = LocalFunction(tuple(window), poly)
                entries[(i, j)] = fn
                distances[i, j] = np.sqrt(np.mean((fn(test) - sigma_field[1::2, i, j]) ** 2))
        worst = float(distances.sum(axis=1).max())
        history.append(worst)
        logger.debug(f"Smoothing N={N} cutoff={cutoff}: worst row distance {worst:.3e}")
        if worst < target:
            return SmoothedFactor(sites, N, cutoff, entries, distances, history)
    raise SmoothingBudgetError(
        f"cutoff {max_cutoff} reached with row distance {history[-1]:.3e}, target {target:.3e}")


def k_prime(K: float, c: float, alpha: float) -> float:
    return max(2.0 * K / c ** alpha, K)


def time_integral_bound(eps: float, t: float, K: float, c: float, alpha: float) -> Tuple[float, float]:
    """
    Both sides of eps^2 int_0^{t/eps^2} K (c+s)^-alpha ds <= eps K' sqrt(t).

    Returns:
        Tuple[float, float]: Left-hand side (closed form) and right-hand side
    """
    if alpha <= 1.0:
        raise ConfigurationError("the time-integral bound needs alpha > 1")
    upper = t / eps ** 2
    lhs = eps ** 2 * K * (c ** (1.0 - alpha) - (c + upper) ** (1.0 - alpha)) / (alpha - 1.0)
    return float(lhs), float(eps * k_prime(K, c, alpha) * np.sqrt(t))


def truncation_constants(smoothed: SmoothedFactor, seed: int = 0,
                         n_points: int = 4096) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """
    M_{N,k,l} = sum over j in Lambda_N of sup |d_j g_kl| + sup g_kl, g_kl = sqrt(a_kk a_ll).

    sup g is bounded by coefficient sums of the TrigPoly diagonals; sup |d_j g|
    is the maximum over random points of the torus. Lambda_N is the dependency
    set of the smoothed entries, one site when they are all constant.

    Returns:
        Tuple[np.ndarray, Tuple[int, ...]]: (K, K) constants and Lambda_N
    """
    diagonals = smoothed.diagonal_polys()
    window = diagonals[0].sites
    deps = smoothed.dependency()
    lam = deps if deps else (smoothed.sites[0],)
    sup_a = np.array([d.poly.coefficient_norm() for d in diagonals])
    sup_g = np.sqrt(np.outer(sup_a, sup_a))
    rng = substream(seed, STREAM_LATTICE, 99)
    z = rng.uniform(0.0, TWO_PI, size=(n_points, len(window)))
    a_vals = np.stack([d.poly(z) for d in diagonals], axis=-1)                      # (P, K)
    a_grad = np.stack([d.poly.gradient(z) for d in diagonals], axis=-1)             # (P, W, K)
    g = np.sqrt(np.maximum(a_vals[:, :, None] * a_vals[:, None, :], 1e-24))         # (P, K, K)
    dprod = a_grad[:, :, :, None] * a_vals[:, None, None, :] + a_vals[:, None, :, None] * a_grad[:, :, None, :]
    dg = np.abs(dprod) / (2.0 * g[:, None])                                         # (P, W, K, K)
    sup_dg = dg.max(axis=0).sum(axis=0) if window else np.zeros_like(sup_g)
    return sup_dg + len(lam) * sup_g, tuple(lam)


@dataclass
class TruncationResult:
    eps: float
    N: int
    saturated: bool
    k_prime: float
    criteria: Dict[int, float]          # sqrt(eps) K'(Lambda_N) max M per N

    def to_dict(self) -> Dict:
        return {"eps": self.eps, "N": self.N, "saturated": self.saturated, "k_prime": self.k_prime,
                "criteria": {str(n): v for n, v in self.criteria.items()}}


def select_truncation(eps: float, mixing: MixingCurve, factors: Dict[int, SmoothedFactor],
                      k_scale: Optional[float] = None, seed: int = 0) -> TruncationResult:
    """
    Largest N with sqrt(eps) K'(Lambda_N) M_{N,k,l} <= 1 for every |k|, |l| <= N.

    Args:
        eps (float): Scale parameter in (0, 1]
        mixing (MixingCurve): Source of K-hat, c and alpha-hat
        factors (Dict[int, SmoothedFactor]): Smoothed factor per block radius N
        k_scale (Optional[float]): K-hat override; K(Lambda) = K-hat |Lambda|
        seed (int): Seed for the derivative sup search

    Returns:
        TruncationResult: Selected level, saturation flag and per-N criteria
    """
    if not 0.0 < eps <= 1.0:
        raise ConfigurationError(f"eps must lie in (0, 1], got {eps}")
    k_hat = mixing.k_hat if k_scale is None else k_scale
    alpha = mixing.alpha_hat
    if not np.isfinite(k_hat) or not np.isfinite(alpha):
        raise ConfigurationError("truncation needs a finite mixing fit (K-hat and alpha-hat)")
    criteria = {}
    kp_used = float("nan")
    for N in sorted(factors):
        constants, lam = truncation_constants(factors[N], seed=seed)
        kp = k_prime(k_hat * len(lam), mixing.c, alpha)
        criteria[N] = float(np.sqrt(eps) * kp * constants.max())
        if criteria[N] <= 1.0:
            kp_used = kp
    feasible = [N for N, value in criteria.items() if value <= 1.0]
    if not feasible:
        worst = min(criteria.values())
        raise TruncationInfeasibleError(
            f"no N satisfies the truncation bound at eps={eps}; smallest criterion {worst:.3g}", worst)
    N = max(feasible)
    saturated = N == max(factors)
    if saturated:
        logger.info(f"Truncation saturated at the box limit N={N} for eps={eps}")
    return TruncationResult(eps=eps, N=N, saturated=saturated, k_prime=kp_used, criteria=criteria)


def build_factor_ladder(derivs: Dict[int, CorrectorDerivatives], samples: GibbsSampleSet,
                        geom: BoxGeometry, n_max: int, max_cutoff: int = 12,
                        radius: float = 0.0) -> Dict[int, SmoothedFactor]:
    """Smoothed factor for every block radius N = 1..n_max."""
    ladder = {}
    for N in range(1, n_max + 1):
        sites = tuple(int(s) for s in geom.block(N))
        rows, _ = derivative_rows(derivs, sites, geom.n_sites)
        ladder[N] = smooth_factor(factor_field(rows), samples.states, sites, N, geom,
                                  max_cutoff=max_cutoff, radius=radius)
    return ladder


def source_factor_field(source: CorrectorSource, sites: Sequence[int]) -> Callable[[np.ndarray], np.ndarray]:
    """sigma^N(y) computed from a corrector source's gradients."""
    sites = list(sites)

    def evaluate(y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        rows = []
        for k in sites:
            grad = source.gradients(y, k)
            delta = np.zeros(y.shape[-1])
            delta[k] = 1.0
            rows.append(np.sqrt(2.0) * (delta - grad))
        rows = np.stack(rows, axis=-2)
        flat = rows.reshape((-1,) + rows.shape[-2:])
        return factor_field(flat).reshape(y.shape[:-1] + (len(sites), len(sites)))

    return evaluate
