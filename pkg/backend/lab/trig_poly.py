"""
Real trigonometric polynomials with integer frequencies.

A TrigPoly in n variables is sum_m a_m cos(w_m . x) + b_m sin(w_m . x) with
integer frequency vectors w_m. Periodicity in every variable holds by
construction and derivatives are exact coefficient maps.
"""
import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

TWO_PI = 2.0 * np.pi

Freq = Tuple[int, ...]


def _canonical(freq: Freq) -> Tuple[Freq, int]:
    """Flip the frequency so its first nonzero entry is positive."""
    for f in freq:
        if f > 0:
            return freq, 1
        if f < 0:
            return tuple(-v for v in freq), -1
    return freq, 1


@dataclass(frozen=True)
class TrigPoly:
    n_vars: int
    freqs: Tuple[Freq, ...] = ()
    cos_coefs: Tuple[float, ...] = ()
    sin_coefs: Tuple[float, ...] = ()

    def __post_init__(self):
        if not (len(self.freqs) == len(self.cos_coefs) == len(self.sin_coefs)):
            raise ValueError("frequency and coefficient lists differ in length")
        for freq in self.freqs:
            if len(freq) != self.n_vars:
                raise ValueError(f"frequency {freq} does not have {self.n_vars} entries")

    @classmethod
    def from_terms(cls, n_vars: int, terms: Iterable[Tuple[Sequence[int], float, str]]) -> "TrigPoly":
        """
        Build a polynomial from (frequency, coefficient, kind) triples.

        Args:
            n_vars (int): Number of variables
            terms: Triples with kind "cos" or "sin"; equal frequencies are merged

        Returns:
            TrigPoly: Canonical polynomial without zero terms
        """
        merged: Dict[Freq, List[float]] = {}
        for freq, coef, kind in terms:
            freq = tuple(int(f) for f in freq)
            if len(freq) != n_vars:
                raise ValueError(f"frequency {freq} does not have {n_vars} entries")
            canon, sign = _canonical(freq)
            slot = merged.setdefault(canon, [0.0, 0.0])
            if kind == "cos":
                slot[0] += float(coef)
            elif kind == "sin":
                slot[1] += sign * float(coef)
            else:
                raise ValueError(f"unknown term kind {kind!r}")
        freqs, cos_coefs, sin_coefs = [], [], []
        for freq in sorted(merged):
            a, b = merged[freq]
            if not any(freq):
                b = 0.0
            if a == 0.0 and b == 0.0:
                continue
            freqs.append(freq)
            cos_coefs.append(a)
            sin_coefs.append(b)
        return cls(n_vars, tuple(freqs), tuple(cos_coefs), tuple(sin_coefs))

    @classmethod
    def zero(cls, n_vars: int) -> "TrigPoly":
        return cls(n_vars)

    @classmethod
    def constant(cls, n_vars: int, value: float) -> "TrigPoly":
        return cls.from_terms(n_vars, [((0,) * n_vars, value, "cos")])

    @classmethod
    def cosine(cls, freq: Sequence[int], coef: float = 1.0) -> "TrigPoly":
        return cls.from_terms(len(freq), [(freq, coef, "cos")])

    @classmethod
    def sine(cls, freq: Sequence[int], coef: float = 1.0) -> "TrigPoly":
        return cls.from_terms(len(freq), [(freq, coef, "sin")])

    @cached_property
    def _freq_array(self) -> np.ndarray:
        return np.asarray(self.freqs, dtype=float).reshape(len(self.freqs), self.n_vars)

    @cached_property
    def _a(self) -> np.ndarray:
        return np.asarray(self.cos_coefs, dtype=float)

    @cached_property
    def _b(self) -> np.ndarray:
        return np.asarray(self.sin_coefs, dtype=float)

    @property
    def n_terms(self) -> int:
        return len(self.freqs)

    def is_constant(self) -> bool:
        return all(not any(f) for f in self.freqs)

    def terms(self) -> List[Tuple[Freq, float, str]]:
        out = [(f, a, "cos") for f, a in zip(self.freqs, self.cos_coefs) if a != 0.0]
        out += [(f, b, "sin") for f, b in zip(self.freqs, self.sin_coefs) if b != 0.0]
        return out

    def _phase(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_vars:
            raise ValueError(f"expected {self.n_vars} coordinates, got {x.shape[-1]}")
        return x @ self._freq_array.T

    def evaluate(self, x) -> np.ndarray:
        """Evaluate at points x of shape (..., n_vars)."""
        x = np.asarray(x, dtype=float)
        if self.n_terms == 0:
            return np.zeros(x.shape[:-1])
        phase = self._phase(x)
        return np.cos(phase) @ self._a + np.sin(phase) @ self._b

    __call__ = evaluate

    def gradient(self, x) -> np.ndarray:
        """All partial derivatives at x, shape (..., n_vars)."""
        x = np.asarray(x, dtype=float)
        if self.n_terms == 0:
            return np.zeros(x.shape)
        phase = self._phase(x)
        weights = np.cos(phase) * self._b - np.sin(phase) * self._a
        return weights @ self._freq_array

    def derivative(self, j: int) -> "TrigPoly":
        terms = []
        for freq, a, b in zip(self.freqs, self.cos_coefs, self.sin_coefs):
            w = freq[j]
            if w == 0:
                continue
            terms.append((freq, b * w, "cos"))
            terms.append((freq, -a * w, "sin"))
        return TrigPoly.from_terms(self.n_vars, terms)

    def depends_on(self, j: int) -> bool:
        return any(freq[j] != 0 for freq in self.freqs)

    def dependency(self) -> Tuple[int, ...]:
        return tuple(j for j in range(self.n_vars) if self.depends_on(j))

    def coefficient_norm(self) -> float:
        """Sum of term amplitudes, an upper bound of the sup norm."""
        return float(np.sum(np.hypot(self._a, self._b)))

    def scale(self, factor: float) -> "TrigPoly":
        return TrigPoly(self.n_vars, self.freqs,
                        tuple(factor * a for a in self.cos_coefs),
                        tuple(factor * b for b in self.sin_coefs))

    def __add__(self, other: "TrigPoly") -> "TrigPoly":
        if other.n_vars != self.n_vars:
            raise ValueError("cannot add polynomials in different variable counts")
        return TrigPoly.from_terms(self.n_vars, self.terms() + other.terms())

    def __sub__(self, other: "TrigPoly") -> "TrigPoly":
        return self + other.scale(-1.0)

    def __mul__(self, other: "TrigPoly") -> "TrigPoly":
        if other.n_vars != self.n_vars:
            raise ValueError("cannot multiply polynomials in different variable counts")
        terms = []
        for p, a1, b1 in zip(self.freqs, self.cos_coefs, self.sin_coefs):
            for q, a2, b2 in zip(other.freqs, other.cos_coefs, other.sin_coefs):
                diff = tuple(u - v for u, v in zip(p, q))
                summ = tuple(u + v for u, v in zip(p, q))
                terms.append((diff, 0.5 * (a1 * a2 + b1 * b2), "cos"))
                terms.append((diff, 0.5 * (b1 * a2 - a1 * b2), "sin"))
                terms.append((summ, 0.5 * (a1 * a2 - b1 * b2), "cos"))
                terms.append((summ, 0.5 * (a1 * b2 + b1 * a2), "sin"))
        return TrigPoly.from_terms(self.n_vars, terms)

    def embed(self, n_vars: int, positions: Sequence[int]) -> "TrigPoly":
        """Re-express in `n_vars` variables, old variable i becoming `positions[i]`."""
        terms = []
        for freq, coef, kind in self.terms():
            wide = [0] * n_vars
            for i, w in enumerate(freq):
                wide[positions[i]] += w
            terms.append((wide, coef, kind))
        return TrigPoly.from_terms(n_vars, terms)


def frequency_grid(n_vars: int, variables: Sequence[int], cutoff: int) -> List[Freq]:
    """Canonical frequencies on `variables` with total degree at most `cutoff`."""
    grid = {(0,) * n_vars}
    for combo in itertools.product(range(-cutoff, cutoff + 1), repeat=len(variables)):
        if sum(abs(c) for c in combo) > cutoff or not any(combo):
            continue
        freq = [0] * n_vars
        for var, c in zip(variables, combo):
            freq[var] = c
        canon, _ = _canonical(tuple(freq))
        grid.add(canon)
    return sorted(grid)


def fit_least_squares(points: np.ndarray, values: np.ndarray, variables: Sequence[int],
                      cutoff: int, prune: float = 1e-12) -> TrigPoly:
    """
    Least-squares trigonometric fit of sampled values.

    Args:
        points (np.ndarray): Sample points, shape (S, n_vars)
        values (np.ndarray): Target values, shape (S,)
        variables (Sequence[int]): Variables the fit may depend on
        cutoff (int): Maximal total degree of the frequencies
        prune (float): Relative size below which coefficients are dropped

    Returns:
        TrigPoly: Fitted polynomial
    """
    points = np.asarray(points, dtype=float)
    n_vars = points.shape[1]
    grid = frequency_grid(n_vars, variables, cutoff)
    freq_array = np.asarray(grid, dtype=float)
    phase = points @ freq_array.T
    nonzero = np.any(freq_array != 0, axis=1)
    design = np.hstack([np.cos(phase), np.sin(phase[:, nonzero])])
    coefs, *_ = np.linalg.lstsq(design, np.asarray(values, dtype=float), rcond=None)
    # drop round-off coefficients
    coefs[np.abs(coefs) < prune * max(1.0, float(np.abs(coefs).max(initial=0.0)))] = 0.0
    n_cos = len(grid)
    sin_coefs = np.zeros(n_cos)
    sin_coefs[nonzero] = coefs[n_cos:]
    terms = [(f, a, "cos") for f, a in zip(grid, coefs[:n_cos])]
    terms += [(f, b, "sin") for f, b in zip(grid, sin_coefs)]
    return TrigPoly.from_terms(n_vars, terms)


@dataclass(frozen=True)
class LocalFunction:
    """A TrigPoly attached to a window of box sites (flat indices)."""
    sites: Tuple[int, ...]
    poly: TrigPoly

    def __post_init__(self):
        if len(self.sites) != self.poly.n_vars:
            raise ValueError("window size does not match the polynomial's variable count")

    @classmethod
    def constant(cls, value: float) -> "LocalFunction":
        return cls((), TrigPoly.constant(0, value))

    @classmethod
    def cosine(cls, sites: Sequence[int], freq: Sequence[int], coef: float = 1.0) -> "LocalFunction":
        return cls(tuple(sites), TrigPoly.cosine(freq, coef))

    @classmethod
    def sine(cls, sites: Sequence[int], freq: Sequence[int], coef: float = 1.0) -> "LocalFunction":
        return cls(tuple(sites), TrigPoly.sine(freq, coef))

    def _window(self, y) -> np.ndarray:
        return np.asarray(y, dtype=float)[..., list(self.sites)]

    def evaluate(self, y) -> np.ndarray:
        return self.poly(self._window(y))

    __call__ = evaluate

    def partial(self, y, site: int) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if site not in self.sites:
            return np.zeros(y.shape[:-1])
        return self.poly.derivative(self.sites.index(site))(self._window(y))

    def second_partial(self, y, site: int) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if site not in self.sites:
            return np.zeros(y.shape[:-1])
        i = self.sites.index(site)
        return self.poly.derivative(i).derivative(i)(self._window(y))
