"""
aim of the module: simulate the quotient diffusion on the box torus, sample the
Gibbs measure and measure how fast the semigroup forgets its start.

inputs:
    PotentialSpec and BoxGeometry from the potential module, start states,
    time step, path budget and a master seed.

outputs:
    TorusState / LatticeState wrappers, GibbsSampleSet, MixingCurve, DLR
    residuals, weak-order, stationarity and semigroup reports, lifted paths.

method:
    Euler-Maruyama in the lifted coordinates with optional reduction modulo 2*pi
    after every step. Paths are advanced in fixed chunks; each path reads its
    noise from its own counter-based substream. Statistics are accumulated by
    PathObserver objects so no full trajectory has to be stored unless asked.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .error_handler import (AmbiguousWindingError, ConfigurationError, DomainError,
                            NumericError, SamplerStallError)
from .potential import BoxGeometry, PotentialSpec, drift_field, local_energy, total_energy
from .rng import (NOISE_BLOCK, STREAM_GIBBS, STREAM_MIXING, STREAM_QUOTIENT, PathNoise,
                  chunked_map, substream)
from .trig_poly import TWO_PI, LocalFunction

logger = logging.getLogger(__name__)


def reduce_angles(x: np.ndarray) -> np.ndarray:
    """Reduce to [0, 2*pi), mapping the rounding edge case 2*pi back to 0."""
    reduced = np.mod(x, TWO_PI)
    return np.where(reduced >= TWO_PI, 0.0, reduced)


def circular_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = np.mod(np.asarray(a) - np.asarray(b) + np.pi, TWO_PI) - np.pi
    return np.abs(diff)


@dataclass(frozen=True, eq=False)
class TorusState:
    angles: np.ndarray

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=float)
        if not np.all(np.isfinite(angles)):
            raise NumericError("torus state has non-finite angles")
        object.__setattr__(self, "angles", reduce_angles(angles))


@dataclass(frozen=True, eq=False)
class LatticeState:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(values)):
            raise NumericError("lattice state has non-finite entries")
        object.__setattr__(self, "values", values)


def project(x) -> TorusState:
    """The coordinatewise projection of a lattice state onto the torus."""
    values = x.values if isinstance(x, LatticeState) else x
    return TorusState(values)


def chart(y) -> LatticeState:
    """The chart taking each angle to its representative in [0, 2*pi)."""
    angles = y.angles if isinstance(y, TorusState) else reduce_angles(np.asarray(y, dtype=float))
    return LatticeState(angles.copy())


def step_quotient(spec: PotentialSpec, geom: BoxGeometry, state: TorusState, dt: float,
                  noise: np.ndarray) -> TorusState:
    """
    One Euler-Maruyama step of the quotient diffusion.

    Args:
        spec (PotentialSpec): Interaction family
        geom (BoxGeometry): Simulation box
        state (TorusState): Current angles
        dt (float): Time step
        noise (np.ndarray): Standard normal draw per site

    Returns:
        TorusState: Angles after the step, reduced modulo 2*pi
    """
    if dt <= 0:
        raise ConfigurationError(f"time step must be positive, got {dt}")
    noise = np.asarray(noise, dtype=float)
    if not np.all(np.isfinite(noise)):
        raise NumericError("non-finite noise passed to step_quotient")
    theta = chart(state).values
    moved = theta + drift_field(spec, geom, theta) * dt + np.sqrt(2.0 * dt) * noise
    return TorusState(moved)


def time_steps(times: Sequence[float], dt: float) -> np.ndarray:
    """Grid indices of `times`; every time must lie on the dt grid."""
    times = np.asarray(times, dtype=float)
    steps = np.rint(times / dt).astype(int)
    if np.any(np.abs(steps * dt - times) > 1e-9 * np.maximum(1.0, times)):
        raise ConfigurationError(f"times {times.tolist()} are not multiples of dt={dt}")
    return steps


class PathObserver(ABC):
    """Accumulates statistics on one chunk of paths while they are simulated."""

    def start(self, paths: range, x: np.ndarray) -> None:
        pass

    @abstractmethod
    def observe(self, step: int, x: np.ndarray, b: np.ndarray) -> None:
        """Called at every grid step with states and drifts of shape (P, R, n)."""

    @abstractmethod
    def result(self) -> Any:
        """Per-chunk result; arrays must carry the path axis first."""


class StateRecorder(PathObserver):
    def __init__(self, record_steps: Sequence[int]):
        self.record_steps = {int(s): i for i, s in enumerate(record_steps)}
        self.frames: List[np.ndarray] = [None] * len(self.record_steps)

    def observe(self, step, x, b):
        slot = self.record_steps.get(step)
        if slot is not None:
            self.frames[slot] = x.copy()

    def result(self) -> np.ndarray:
        return np.stack(self.frames, axis=2)  # (P, R, n_rec, n)


class ObservableRecorder(PathObserver):
    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], record_steps: Sequence[int]):
        self.fn = fn
        self.record_steps = {int(s): i for i, s in enumerate(record_steps)}
        self.values: List[np.ndarray] = [None] * len(self.record_steps)

    def observe(self, step, x, b):
        slot = self.record_steps.get(step)
        if slot is not None:
            self.values[slot] = np.asarray(self.fn(x), dtype=float)

    def result(self) -> np.ndarray:
        return np.stack(self.values, axis=-1)  # (P, R, n_rec)


def _gather(chunks: List[List[Any]], n_observers: int) -> List[Any]:
    gathered = []
    for i in range(n_observers):
        parts = [chunk[i] for chunk in chunks]
        if isinstance(parts[0], np.ndarray):
            gathered.append(np.concatenate(parts, axis=0))
        else:
            gathered.append(parts)
    return gathered


def simulate_paths(spec: PotentialSpec, geom: BoxGeometry, starts: np.ndarray, dt: float,
                   n_steps: int, *, seed: int, stream: int, n_paths: Optional[int] = None,
                   observers: Sequence[Callable[[], PathObserver]] = (), quotient: bool = True,
                   eps: float = 1.0, drift_offset: Optional[np.ndarray] = None,
                   antithetic: bool = False, workers: int = 1,
                   extra_key: Sequence[int] = ()) -> List[Any]:
    """
    Euler-Maruyama simulation shared by every estimator in the lab.

    The state of a chunk has shape (P, R, n): P paths, R replicas per path that
    share the path's noise (common random numbers), n sites. The drift is
    eps^-1 * b(x / eps + drift_offset).

    Args:
        spec (PotentialSpec): Interaction family
        geom (BoxGeometry): Simulation box
        starts (np.ndarray): Start states, (P, R, n) or (R, n) with n_paths given
        dt (float): Time step
        n_steps (int): Number of steps
        seed (int): Master seed
        stream (int): Stream tag for the noise substreams
        n_paths (Optional[int]): Path count when starts are shared by every path
        observers (Sequence[Callable[[], PathObserver]]): Observer factories, one
            fresh observer per chunk
        quotient (bool): Reduce modulo 2*pi after each step
        eps (float): Scale parameter of the rescaled dynamics
        drift_offset (Optional[np.ndarray]): Environment shift, (n,) or (P, n)
        antithetic (bool): Pair paths 2i, 2i+1 with negated noise
        workers (int): Worker threads
        extra_key (Sequence[int]): Additional substream key entries

    Returns:
        List[Any]: One gathered result per observer factory
    """
    if dt <= 0 or n_steps < 0:
        raise ConfigurationError(f"invalid time grid dt={dt}, n_steps={n_steps}")
    starts = np.asarray(starts, dtype=float)
    if starts.ndim == 2:
        if n_paths is None:
            raise ConfigurationError("n_paths is required when starts are shared")
        shared = True
    elif starts.ndim == 3:
        n_paths = starts.shape[0]
        shared = False
    else:
        raise ConfigurationError(f"starts must have 2 or 3 axes, got shape {starts.shape}")
    if starts.shape[-1] != geom.n_sites:
        raise DomainError(f"start states have {starts.shape[-1]} sites, box has {geom.n_sites}")
    offset = None if drift_offset is None else np.asarray(drift_offset, dtype=float)
    sqrt_2dt = np.sqrt(2.0 * dt)

    def drift_at(x: np.ndarray, chunk_offset) -> np.ndarray:
        if eps == 1.0 and chunk_offset is None:
            b = drift_field(spec, geom, x)
        else:
            arg = x / eps if chunk_offset is None else x / eps + chunk_offset
            b = drift_field(spec, geom, arg) / eps
        if not np.all(np.isfinite(b)):
            raise NumericError("non-finite drift encountered during simulation")
        return b

    def run_chunk(paths: range) -> List[Any]:
        if shared:
            x = np.broadcast_to(starts, (len(paths),) + starts.shape).copy()
        else:
            x = starts[paths.start:paths.stop].copy()
        chunk_offset = None
        if offset is not None:
            chunk_offset = offset[None, None, :] if offset.ndim == 1 else offset[paths.start:paths.stop, None, :]
        obs = [factory() for factory in observers]
        for o in obs:
            o.start(paths, x)
        noise = PathNoise(seed, stream, paths.start, len(paths), geom.n_sites,
                          antithetic=antithetic, extra_key=extra_key)
        block = None
        for step in range(n_steps + 1):
            b = drift_at(x, chunk_offset)
            for o in obs:
                o.observe(step, x, b)
            if step == n_steps:
                break
            if step % NOISE_BLOCK == 0:
                block = noise.block(min(NOISE_BLOCK, n_steps - step))
            x = x + b * dt + sqrt_2dt * block[step % NOISE_BLOCK][:, None, :]
            if quotient:
                x = reduce_angles(x)
        return [o.result() for o in obs]

    chunks = chunked_map(run_chunk, n_paths, workers=workers)
    return _gather(chunks, len(observers))


def simulate_quotient(spec: PotentialSpec, geom: BoxGeometry, y0: np.ndarray, dt: float,
                      n_steps: int, paths: int, seed: int, record_every: int = 1,
                      workers: int = 1) -> np.ndarray:
    """Quotient paths from one start, recorded every `record_every` steps: (paths, n_rec, n)."""
    record = np.arange(0, n_steps + 1, max(1, record_every))
    (frames,) = simulate_paths(spec, geom, np.asarray(y0, dtype=float)[None, :], dt, n_steps,
                               seed=seed, stream=STREAM_QUOTIENT, n_paths=paths,
                               observers=[lambda: StateRecorder(record)], workers=workers)
    return frames[:, 0]


@dataclass(eq=False)
class GibbsSampleSet:
    states: np.ndarray        # (S, n) angles in [0, 2*pi), chain-major
    chain_ids: np.ndarray     # (S,)
    burn_in: int
    thinning: int
    acceptance_rate: float
    seed: int
    step_size: float

    def __post_init__(self):
        if len(self.states) < 1:
            raise ConfigurationError("a Gibbs sample set needs at least one state")
        if not 0.0 < self.acceptance_rate <= 1.0:
            raise SamplerStallError(f"acceptance rate {self.acceptance_rate} outside (0, 1]")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def n_chains(self) -> int:
        return len(np.unique(self.chain_ids))

    def chain_means(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        labels, slot = np.unique(self.chain_ids, return_inverse=True)
        sums = np.zeros((len(labels),) + values.shape[1:])
        np.add.at(sums, slot, values)
        counts = np.bincount(slot).reshape((-1,) + (1,) * (values.ndim - 1))
        return sums / counts

    def mean_and_se(self, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Mean of per-sample values with a standard error from independent chains.

        Args:
            values (np.ndarray): Values of shape (S, ...) aligned with `states`

        Returns:
            Tuple[np.ndarray, np.ndarray]: Mean and standard error
        """
        values = np.asarray(values, dtype=float)
        groups = self.chain_means(values)
        if len(groups) < 2:
            groups = np.stack([b.mean(axis=0) for b in np.array_split(values, min(10, len(values)))])
        mean = values.mean(axis=0)
        if len(groups) < 2:
            return mean, np.zeros_like(mean)
        return mean, groups.std(axis=0, ddof=1) / np.sqrt(len(groups))

    def subset(self, indices: Sequence[int]) -> "GibbsSampleSet":
        indices = np.asarray(indices, dtype=int)
        return GibbsSampleSet(states=self.states[indices], chain_ids=self.chain_ids[indices],
                              burn_in=self.burn_in, thinning=self.thinning,
                              acceptance_rate=self.acceptance_rate, seed=self.seed,
                              step_size=self.step_size)

    def take(self, count: int) -> np.ndarray:
        """Indices of `count` states spread evenly over the set."""
        count = min(count, len(self.states))
        return np.linspace(0, len(self.states) - 1, count).round().astype(int)


def gibbs_sample(spec: PotentialSpec, geom: BoxGeometry, n_chains: int, n_samples: int,
                 burn_in: int, thinning: int, step_size: float, seed: int,
                 workers: int = 1, stall_window: int = 500) -> GibbsSampleSet:
    """
    Metropolis-adjusted Langevin chains targeting exp(-H) on the box torus.

    Proposals are drawn on R^n from the current representative in [0, 2 pi)^n
    and wrapped only after acceptance. The acceptance ratio uses the
    unwrapped Gaussian density between these two representatives. Since
    b = -grad H is 2 pi-periodic, this is exact Metropolis-Hastings for the
    lifted chain, whose kernel commutes with 2 pi shifts, and so its torus
    projection leaves exp(-H) invariant for every step size h. A large h only
    lowers the acceptance rate.

    Args:
        spec (PotentialSpec): Interaction family
        geom (BoxGeometry): Simulation box
        n_chains (int): Independent chains, each on its own substream
        n_samples (int): Kept states per chain
        burn_in (int): Discarded initial steps
        thinning (int): Steps between kept states (0 is treated as 1)
        step_size (float): Langevin step h
        seed (int): Master seed
        workers (int): Worker threads
        stall_window (int): Steps without any acceptance that count as a stall

    Returns:
        GibbsSampleSet: Thinned states with sampler metadata
    """
    if n_chains < 1 or n_samples < 1 or burn_in < 0 or thinning < 0 or step_size <= 0:
        raise ConfigurationError("invalid Gibbs sampler configuration")
    thin = max(1, thinning)
    total_steps = burn_in + n_samples * thin
    n = geom.n_sites
    h = step_size

    def run_chunk(chains: range):
        gens = [substream(seed, STREAM_GIBBS, c) for c in chains]
        x = np.stack([g.uniform(0.0, TWO_PI, n) for g in gens])
        energy = total_energy(spec, geom, x)
        b = drift_field(spec, geom, x)
        accepted = np.zeros(len(chains))
        since_accept = np.zeros(len(chains), dtype=int)
        kept = np.empty((len(chains), n_samples, n))
        slot = 0
        for start in range(0, total_steps, NOISE_BLOCK):
            m = min(NOISE_BLOCK, total_steps - start)
            xi = np.stack([g.standard_normal((m, n)) for g in gens], axis=1)
            u = np.stack([g.random(m) for g in gens], axis=1)
            for i in range(m):
                step = start + i
                proposal = x + h * b + np.sqrt(2.0 * h) * xi[i]
                energy_p = total_energy(spec, geom, proposal)
                b_p = drift_field(spec, geom, proposal)
                log_fwd = -0.5 * np.sum(xi[i] ** 2, axis=-1)
                log_rev = -np.sum((x - proposal - h * b_p) ** 2, axis=-1) / (4.0 * h)
                log_alpha = energy - energy_p + log_rev - log_fwd
                accept = np.log(u[i]) < log_alpha
                x = np.where(accept[:, None], reduce_angles(proposal), x)
                energy = np.where(accept, energy_p, energy)
                b = np.where(accept[:, None], b_p, b)
                accepted += accept
                since_accept = np.where(accept, 0, since_accept + 1)
                if np.any(since_accept >= stall_window):
                    raise SamplerStallError(
                        f"a chain accepted nothing in {stall_window} steps (step size {h})")
                if step >= burn_in and (step - burn_in + 1) % thin == 0:
                    kept[:, slot] = x
                    slot += 1
        return kept, accepted

    chunks = chunked_map(run_chunk, n_chains, workers=workers)
    states = np.concatenate([c[0] for c in chunks]).reshape(-1, n)
    accepted = float(sum(c[1].sum() for c in chunks))
    rate = accepted / (n_chains * total_steps)
    if rate == 0.0:
        raise SamplerStallError("no proposal was accepted")
    if rate < 0.2:
        logger.warning(f"Low MALA acceptance rate {rate:.3f}; consider a smaller step size")
    logger.info(f"Gibbs sampling done: {len(states)} states, acceptance {rate:.3f}")
    return GibbsSampleSet(states=states, chain_ids=np.repeat(np.arange(n_chains), n_samples),
                          burn_in=burn_in, thinning=thin, acceptance_rate=rate,
                          seed=seed, step_size=step_size)


@dataclass
class DLRResult:
    residual: float
    se: float
    quad_points: int

    @property
    def z_score(self) -> float:
        return abs(self.residual) / self.se if self.se > 0 else (0.0 if self.residual == 0 else np.inf)


def _conditional_expectation(spec, geom, window, phi, states, q) -> np.ndarray:
    nodes = np.arange(q) * (TWO_PI / q)
    grid = np.stack(np.meshgrid(*([nodes] * len(window)), indexing="ij"), axis=-1).reshape(-1, len(window))
    out = np.empty(len(states))
    for start in range(0, len(states), 64):
        batch = states[start:start + 64]
        configs = np.repeat(batch[:, None, :], len(grid), axis=1)
        configs[..., window] = grid[None, :, :]
        energy = local_energy(spec, geom, window, configs)
        weights = np.exp(-(energy - energy.min(axis=1, keepdims=True)))
        out[start:start + 64] = np.sum(weights * phi(configs), axis=1) / np.sum(weights, axis=1)
    return out


def dlr_check(spec: PotentialSpec, geom: BoxGeometry, samples: GibbsSampleSet,
              window: Sequence[int], phi: LocalFunction, quad_points: int = 32,
              max_quad_points: int = 512, tolerance: float = 1e-10) -> DLRResult:
    """
    Residual of the DLR identity for the local Gibbs kernel on `window`.

    The kernel integral is a periodic trapezoid rule; the node count doubles
    until two successive rules agree to `tolerance`.
    """
    window = [geom.index(s) for s in window]
    if not 1 <= len(window) <= 2:
        raise ConfigurationError("DLR windows hold one or two sites")
    q = quad_points
    coarse = _conditional_expectation(spec, geom, window, phi, samples.states, q)
    while True:
        fine = _conditional_expectation(spec, geom, window, phi, samples.states, 2 * q)
        if np.max(np.abs(fine - coarse)) <= tolerance:
            break
        q *= 2
        if 2 * q > max_quad_points:
            raise NumericError(f"DLR kernel quadrature did not converge with {max_quad_points} nodes")
        coarse = fine
    residual, se = samples.mean_and_se(fine - phi(samples.states))
    return DLRResult(residual=float(residual), se=float(se), quad_points=2 * q)


@dataclass
class MixingCurve:
    times: np.ndarray
    sup_gap: np.ndarray      # running minimum of raw_gap
    raw_gap: np.ndarray
    se: np.ndarray
    mu0_mean: float
    alpha_hat: float
    k_hat: float
    c: float
    rate_hat: float
    inconclusive: bool
    flags: List[str] = field(default_factory=list)

    def tail_bound(self, horizon: float) -> float:
        """Integral over [T, inf) of K (c+s)^-alpha, infinite when alpha <= 1."""
        if not np.isfinite(self.alpha_hat) or self.alpha_hat <= 1.0:
            return float("inf")
        return self.k_hat * (self.c + horizon) ** (1.0 - self.alpha_hat) / (self.alpha_hat - 1.0)


def mixing_starts(samples: GibbsSampleSet, geom: BoxGeometry, n_draws: int) -> np.ndarray:
    """Gibbs draws plus the two constant corner states 0 and pi."""
    draws = samples.states[samples.take(n_draws)]
    corners = np.stack([np.zeros(geom.n_sites), np.full(geom.n_sites, np.pi)])
    return np.concatenate([draws, corners])


def _fit_decay(times, gap, usable, c):
    t, g = times[usable], gap[usable]
    slope_exp = np.polyfit(t, np.log(g), 1)[0]
    slope_pow, intercept = np.polyfit(np.log(c + t), np.log(g), 1)
    return -slope_pow, float(np.exp(intercept)), -slope_exp


def mixing_curve(spec: PotentialSpec, geom: BoxGeometry, phi: LocalFunction, starts: np.ndarray,
                 times: Sequence[float], paths_per_start: int, dt: float, seed: int,
                 mu0_mean: Tuple[float, float] = (0.0, 0.0), c: float = 1.0,
                 workers: int = 1) -> MixingCurve:
    """
    Sup over a start grid of |p_t phi(y) - <phi, mu0>| and its decay fits.

    Args:
        spec (PotentialSpec): Interaction family
        geom (BoxGeometry): Simulation box
        phi (LocalFunction): Local observable
        starts (np.ndarray): Start states, shape (R, n)
        times (Sequence[float]): Time grid on multiples of dt
        paths_per_start (int): Paths per start (shared noise across starts)
        dt (float): Time step
        seed (int): Master seed
        mu0_mean (Tuple[float, float]): Gibbs mean of phi and its standard error
        c (float): Shift in the polynomial decay law K (c+t)^-alpha
        workers (int): Worker threads

    Returns:
        MixingCurve: Raw and smoothed gap with fitted constants
    """
    times = np.asarray(times, dtype=float)
    steps = time_steps(times, dt)
    starts = np.asarray(starts, dtype=float)
    if phi.poly.is_constant():
        zeros = np.zeros(len(times))
        return MixingCurve(times, zeros, zeros, zeros, float(phi(starts[0])), float("nan"),
                           0.0, c, float("nan"), True, ["constant observable"])
    (values,) = simulate_paths(spec, geom, starts, dt, int(steps.max()), seed=seed,
                               stream=STREAM_MIXING, n_paths=paths_per_start,
                               observers=[lambda: ObservableRecorder(phi, steps)], workers=workers)
    means = values.mean(axis=0)                                   # (R, T)
    ses = values.std(axis=0, ddof=1) / np.sqrt(values.shape[0])
    mean0, se0 = mu0_mean
    gaps = np.abs(means - mean0)
    worst = np.argmax(gaps, axis=0)
    raw_gap = gaps[worst, np.arange(len(times))]
    se = np.sqrt(ses[worst, np.arange(len(times))] ** 2 + se0 ** 2)
    sup_gap = np.minimum.accumulate(raw_gap)
    usable = (raw_gap > 3.0 * se) & (times > 0)
    flags = []
    if usable.sum() < 2:
        flags.append("fewer than two gap points above three standard errors")
        alpha, k_hat, rate = float("nan"), float("nan"), float("nan")
    else:
        alpha, k_hat, rate = _fit_decay(times, raw_gap, usable, c)
        if alpha <= 1.0:
            flags.append(f"fitted decay exponent {alpha:.3f} does not exceed 1")
    logger.info(f"Mixing curve: alpha_hat={alpha:.3f}, rate_hat={rate:.3f}, usable points={int(usable.sum())}")
    return MixingCurve(times=times, sup_gap=sup_gap, raw_gap=raw_gap, se=se, mu0_mean=float(mean0),
                       alpha_hat=float(alpha), k_hat=float(k_hat), c=c, rate_hat=float(rate),
                       inconclusive=usable.sum() < 2, flags=flags)


def generator_apply(spec: PotentialSpec, geom: BoxGeometry, f: LocalFunction, y: np.ndarray) -> np.ndarray:
    """(L f)(y) = sum over the window of d^2 f/dy_k^2 + b_k df/dy_k, exact derivatives."""
    y = np.asarray(y, dtype=float)
    for site in f.sites:
        if not 0 <= site < geom.n_sites:
            raise DomainError(f"observable window site {site} outside the box")
    b = drift_field(spec, geom, y)
    out = np.zeros(y.shape[:-1])
    for site in set(f.sites):
        out = out + f.second_partial(y, site) + b[..., site] * f.partial(y, site)
    return out


def continuous_lift(torus_path: np.ndarray, initial: LatticeState,
                    max_increment: float = np.pi) -> np.ndarray:
    """
    Unwind a sampled torus path into the continuous real-valued path.

    Args:
        torus_path (np.ndarray): Angles of shape (..., n_times, n)
        initial (LatticeState): Lift of the first sample
        max_increment (float): Largest increment accepted as unambiguous

    Returns:
        np.ndarray: Lifted path of the same shape as `torus_path`
    """
    path = np.asarray(torus_path, dtype=float)
    x0 = initial.values
    if np.max(circular_distance(x0, path[..., 0, :])) > 1e-9:
        raise DomainError("initial lattice state does not project onto the first torus sample")
    increments = np.diff(path, axis=-2)
    wrapped = np.mod(increments + np.pi, TWO_PI) - np.pi
    if np.any(np.abs(wrapped) >= max_increment - 1e-12):
        raise AmbiguousWindingError("angle increment of magnitude >= pi; refine the time step")
    lifted = np.concatenate([np.broadcast_to(x0, path[..., :1, :].shape),
                             x0 + np.cumsum(wrapped, axis=-2)], axis=-2)
    return lifted


@dataclass
class WeakOrderReport:
    dts: List[float]
    means: List[float]
    ses: List[float]
    differences: List[float]
    difference_ses: List[float]
    observed_order: float
    extrapolated: float


def weak_order_check(spec: PotentialSpec, geom: BoxGeometry, y0: np.ndarray, phi: LocalFunction,
                     horizon: float, dt: float, paths: int, seed: int, levels: int = 3) -> WeakOrderReport:
    """
    Step-halving estimate of the weak error of E[phi(theta(horizon))].

    All levels are driven by the same fine Brownian increments, so differences
    between successive levels have small variance. `horizon` must be a
    multiple of the coarsest step `dt`.
    """
    if levels < 2:
        raise ConfigurationError(f"weak order needs at least 2 levels, got {levels}")
    if paths < 2:
        raise ConfigurationError(f"weak order needs at least 2 paths, got {paths}")
    if dt <= 0 or horizon <= 0:
        raise ConfigurationError(f"dt and horizon must be positive, got dt={dt}, horizon={horizon}")
    n_coarse = int(time_steps([horizon], dt)[0])
    fine_dt = dt / 2 ** (levels - 1)
    n_fine = n_coarse * 2 ** (levels - 1)
    y0 = reduce_angles(np.asarray(y0, dtype=float))
    noise = PathNoise(seed, STREAM_QUOTIENT, 0, paths, geom.n_sites, extra_key=(levels,))
    fine = noise.block(n_fine)                                      # (n_fine, P, n)
    finals = []
    for level in range(levels):
        ratio = 2 ** (levels - 1 - level)
        step = fine_dt * ratio
        increments = fine.reshape(n_fine // ratio, ratio, paths, geom.n_sites).sum(axis=1) / np.sqrt(ratio)
        x = np.broadcast_to(y0, (paths, geom.n_sites)).copy()
        for xi in increments:
            x = reduce_angles(x + drift_field(spec, geom, x) * step + np.sqrt(2.0 * step) * xi)
        finals.append(phi(x))
    means = [float(v.mean()) for v in finals]
    ses = [float(v.std(ddof=1) / np.sqrt(paths)) for v in finals]
    diffs = [finals[i] - finals[i + 1] for i in range(levels - 1)]
    differences = [float(d.mean()) for d in diffs]
    difference_ses = [float(d.std(ddof=1) / np.sqrt(paths)) for d in diffs]
    order = float("nan")
    if len(differences) >= 2 and differences[-1] != 0.0:
        order = float(np.log2(abs(differences[-2] / differences[-1])))
    extrapolated = 2.0 * means[-1] - means[-2]
    return WeakOrderReport([dt / 2 ** i for i in range(levels)], means, ses, differences,
                           difference_ses, order, extrapolated)


@dataclass
class StationarityReport:
    times: List[float]
    p_values: List[float]
    level: float

    @property
    def passed(self) -> bool:
        return all(p >= self.level for p in self.p_values)


def stationarity_check(spec: PotentialSpec, geom: BoxGeometry, samples: GibbsSampleSet,
                       phi: LocalFunction, times: Sequence[float], dt: float, seed: int,
                       level: float = 0.01, workers: int = 1) -> StationarityReport:
    """KS test between time-0 and time-t laws of phi for chains started at Gibbs draws."""
    steps = time_steps(times, dt)
    starts = samples.states[:, None, :]
    (values,) = simulate_paths(spec, geom, starts, dt, int(steps.max()), seed=seed,
                               stream=STREAM_QUOTIENT, observers=[lambda: ObservableRecorder(phi, steps)],
                               workers=workers, extra_key=(1,))
    values = values[:, 0]
    half = len(values) // 2
    initial = phi(samples.states[half:])
    p_values = [float(stats.ks_2samp(values[:half, i], initial).pvalue) for i in range(len(steps))]
    return StationarityReport(times=list(map(float, times)), p_values=p_values, level=level)


@dataclass
class SemigroupReport:
    direct: float
    direct_se: float
    nested: float
    nested_se: float

    @property
    def z_score(self) -> float:
        combined = np.hypot(self.direct_se, self.nested_se)
        return abs(self.direct - self.nested) / combined if combined > 0 else 0.0


def semigroup_check(spec: PotentialSpec, geom: BoxGeometry, phi: LocalFunction, y: np.ndarray,
                    s: float, t: float, dt: float, outer_paths: int, inner_paths: int,
                    seed: int, workers: int = 1) -> SemigroupReport:
    """Compare p_{s+t} phi(y) with a nested estimate of p_s (p_t phi)(y)."""
    y = np.asarray(y, dtype=float)[None, :]
    total = int(time_steps([s + t], dt)[0])
    (direct,) = simulate_paths(spec, geom, y, dt, total, seed=seed, stream=STREAM_MIXING,
                               n_paths=outer_paths * inner_paths,
                               observers=[lambda: ObservableRecorder(phi, [total])],
                               workers=workers, extra_key=(2,))
    direct = direct[:, 0, 0]
    s_steps = int(time_steps([s], dt)[0])
    t_steps = int(time_steps([t], dt)[0])
    (mid,) = simulate_paths(spec, geom, y, dt, s_steps, seed=seed, stream=STREAM_MIXING,
                            n_paths=outer_paths, observers=[lambda: StateRecorder([s_steps])],
                            workers=workers, extra_key=(3,))
    endpoints = mid[:, 0, 0]                                        # (outer, n)
    (inner,) = simulate_paths(spec, geom, endpoints, dt, t_steps, seed=seed, stream=STREAM_MIXING,
                              n_paths=inner_paths, observers=[lambda: ObservableRecorder(phi, [t_steps])],
                              workers=workers, extra_key=(4,))
    inner_means = inner[:, :, 0].mean(axis=0)                       # per endpoint
    return SemigroupReport(direct=float(direct.mean()),
                           direct_se=float(direct.std(ddof=1) / np.sqrt(len(direct))),
                           nested=float(inner_means.mean()),
                           nested_se=float(inner_means.std(ddof=1) / np.sqrt(len(inner_means))))
