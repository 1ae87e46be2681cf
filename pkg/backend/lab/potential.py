"""
aim of the module: define the shift-generated interaction family on a finite
periodic box and evaluate drifts and local energies from it.

inputs:
    PotentialSpec  base terms (support offsets + trigonometric polynomial)
    BoxGeometry    dimension, box half-width and boundary flag
    configurations arrays of shape (..., n_sites), site-major row order

outputs:
    drift b_k = -sum over terms containing k of dJ/dx_k, local energy U^Lambda,
    total energy, and an axiom report (periodicity, shift covariance, range,
    gradient structure).

method:
    every base term is compiled once per geometry into an index table
    (n_base_sites, n_vars) of wrapped flat site indices; evaluation gathers the
    configuration through that table and applies the exact TrigPoly formulas.
"""
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from itertools import combinations
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .error_handler import ConfigurationError, DomainError
from .rng import STREAM_AXIOMS, substream
from .trig_poly import TWO_PI, TrigPoly

logger = logging.getLogger(__name__)

SCHEMA_NAME = "lattice-potential"
SCHEMA_VERSION = 1

Offset = Tuple[int, ...]
Site = Union[int, Sequence[int]]


@dataclass(frozen=True)
class BoxGeometry:
    """Sites of [-n_box, n_box]^d in row-major order, optionally wrapped."""
    d: int
    n_box: int
    periodic: bool = True

    def __post_init__(self):
        if self.d < 1 or self.n_box < 0:
            raise ConfigurationError(f"invalid box: d={self.d}, n_box={self.n_box}")

    @property
    def side(self) -> int:
        return 2 * self.n_box + 1

    @property
    def n_sites(self) -> int:
        return self.side ** self.d

    @cached_property
    def coords(self) -> np.ndarray:
        axis = np.arange(-self.n_box, self.n_box + 1)
        grid = np.meshgrid(*([axis] * self.d), indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    @cached_property
    def norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.coords.astype(float) ** 2, axis=1))

    @property
    def origin(self) -> int:
        return self.n_sites // 2

    def _flat(self, coords: np.ndarray) -> np.ndarray:
        shifted = coords + self.n_box
        flat = np.zeros(shifted.shape[:-1], dtype=int)
        for axis in range(self.d):
            flat = flat * self.side + shifted[..., axis]
        return flat

    def wrap(self, coords: np.ndarray) -> np.ndarray:
        return np.mod(np.asarray(coords) + self.n_box, self.side) - self.n_box

    def index(self, site: Site) -> int:
        """Flat index of a site given as a coordinate tuple or an index."""
        if np.isscalar(site):
            site = int(site)
            if not 0 <= site < self.n_sites:
                raise DomainError(f"site index {site} outside box of {self.n_sites} sites")
            return site
        coords = np.asarray(site, dtype=int)
        if coords.shape != (self.d,):
            raise DomainError(f"site {tuple(site)} is not a {self.d}-dimensional coordinate")
        if np.any(np.abs(coords) > self.n_box):
            raise DomainError(f"site {tuple(site)} outside box [-{self.n_box}, {self.n_box}]^{self.d}")
        return int(self._flat(coords))

    def norm(self, site: Site) -> float:
        return float(self.norms[self.index(site)])

    def block(self, radius: float) -> np.ndarray:
        """Flat indices of the sites with |k| <= radius."""
        return np.flatnonzero(self.norms <= radius + 1e-12)

    def translate(self, offsets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Translate every box site by each offset.

        Args:
            offsets (np.ndarray): Offsets of shape (m, d)

        Returns:
            Tuple[np.ndarray, np.ndarray]: Flat indices (n_sites, m) and a mask of
            base sites whose translates all stay in the box (all True when periodic)
        """
        raw = self.coords[:, None, :] + np.asarray(offsets, dtype=int)[None, :, :]
        if self.periodic:
            return self._flat(self.wrap(raw)), np.ones(self.n_sites, dtype=bool)
        inside = np.all(np.abs(raw) <= self.n_box, axis=(1, 2))
        return self._flat(np.clip(raw, -self.n_box, self.n_box)), inside

    def shift_indices(self, k: Site) -> np.ndarray:
        """Permutation p with (shift^k y)_s = y[p[s]] = y_{s+k}."""
        offset = self.coords[self.index(k)]
        return self._flat(self.wrap(self.coords + offset[None, :]))

    def shift_config(self, y: np.ndarray, k: Site) -> np.ndarray:
        return np.asarray(y)[..., self.shift_indices(k)]


@dataclass(frozen=True)
class BaseTerm:
    """
    One generator J_{Lambda_0} of the interaction family.

    `support` is the declared offset set; `variables` lists the offsets the
    polynomial is written in (defaults to the support). A well-formed term only
    depends on variables inside its support.
    """
    support: Tuple[Offset, ...]
    poly: TrigPoly
    variables: Optional[Tuple[Offset, ...]] = None

    def __post_init__(self):
        if self.variables is None:
            object.__setattr__(self, "variables", self.support)
        if len(self.variables) != self.poly.n_vars:
            raise ConfigurationError(
                f"term with {len(self.variables)} variables has a {self.poly.n_vars}-variable polynomial")

    @property
    def diameter(self) -> float:
        points = np.asarray(self.support, dtype=float)
        if len(points) < 2:
            return 0.0
        return max(float(np.linalg.norm(p - q)) for p, q in combinations(points, 2))

    def undeclared_dependencies(self) -> List[Offset]:
        support = set(self.support)
        return [self.variables[j] for j in self.poly.dependency() if self.variables[j] not in support]


@dataclass(frozen=True)
class PotentialSpec:
    d: int
    range_L: int
    terms: Tuple[BaseTerm, ...] = field(default_factory=tuple)

    def problems(self) -> List[str]:
        """Structural violations of the range and dependency requirements."""
        found = []
        for i, term in enumerate(self.terms):
            origin = (0,) * self.d
            if origin not in term.support:
                found.append(f"term {i}: support does not contain the origin")
            for offset in tuple(term.support) + tuple(term.variables):
                if len(offset) != self.d:
                    found.append(f"term {i}: offset {offset} is not {self.d}-dimensional")
            if term.diameter > 2 * self.range_L:
                found.append(f"term {i}: support diameter {term.diameter:.3g} exceeds 2L = {2 * self.range_L}")
            undeclared = term.undeclared_dependencies()
            if undeclared:
                found.append(f"term {i}: depends on offsets {undeclared} outside its support")
        return found

    def validate(self) -> "PotentialSpec":
        problems = self.problems()
        if problems:
            raise ConfigurationError("; ".join(problems))
        return self

    @property
    def is_free(self) -> bool:
        return all(term.poly.n_terms == 0 for term in self.terms)


def single_site_potential(spec: PotentialSpec) -> Optional[TrigPoly]:
    """Return U if every term acts on the origin alone, otherwise None."""
    origin = (0,) * spec.d
    total = TrigPoly.zero(1)
    for term in spec.terms:
        deps = [term.variables[j] for j in term.poly.dependency()]
        if any(offset != origin for offset in deps):
            return None
        positions = [0] * term.poly.n_vars
        total = total + term.poly.embed(1, positions)
    return total


@dataclass(frozen=True)
class CompiledTerm:
    var_index: np.ndarray       # (n_base, n_vars) flat indices of the variables
    support_index: np.ndarray   # (n_base, |support|) flat indices of the support
    freqs: np.ndarray
    cos_coefs: np.ndarray
    sin_coefs: np.ndarray


@lru_cache(maxsize=64)
def compile_potential(spec: PotentialSpec, geom: BoxGeometry) -> Tuple[CompiledTerm, ...]:
    """Index tables for every base term on the given box."""
    if spec.d != geom.d:
        raise ConfigurationError(f"potential is {spec.d}-dimensional but the box is {geom.d}-dimensional")
    if geom.periodic and geom.side <= 2 * spec.range_L:
        raise ConfigurationError(f"box side {geom.side} must exceed 2L = {2 * spec.range_L}")
    compiled = []
    for i, term in enumerate(spec.terms):
        if term.poly.n_terms == 0:
            continue
        variables = np.asarray(term.variables, dtype=int).reshape(-1, geom.d)
        span = variables.max(axis=0) - variables.min(axis=0)
        if geom.periodic and np.any(span >= geom.side):
            raise ConfigurationError(f"base term {i} wraps onto itself in a box of side {geom.side}")
        var_index, inside = geom.translate(variables)
        support_index, inside_support = geom.translate(np.asarray(term.support, dtype=int).reshape(-1, geom.d))
        keep = inside & inside_support
        compiled.append(CompiledTerm(
            var_index=var_index[keep],
            support_index=support_index[keep],
            freqs=np.asarray(term.poly.freqs, dtype=float),
            cos_coefs=np.asarray(term.poly.cos_coefs, dtype=float),
            sin_coefs=np.asarray(term.poly.sin_coefs, dtype=float),
        ))
    return tuple(compiled)


def _check_config(geom: BoxGeometry, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != geom.n_sites:
        raise DomainError(f"configuration has {x.shape[-1]} sites, box has {geom.n_sites}")
    return x


def _term_values(term: CompiledTerm, x: np.ndarray) -> np.ndarray:
    phase = x[..., term.var_index] @ term.freqs.T
    return np.cos(phase) @ term.cos_coefs + np.sin(phase) @ term.sin_coefs


def drift_field(spec: PotentialSpec, geom: BoxGeometry, x: np.ndarray) -> np.ndarray:
    """
    All drifts b_k(x) at once.

    Args:
        spec (PotentialSpec): Interaction family
        geom (BoxGeometry): Simulation box
        x (np.ndarray): Configurations of shape (..., n_sites)

    Returns:
        np.ndarray: Drift of the same shape as x
    """
    x = _check_config(geom, x)
    drift = np.zeros_like(x)
    for term in compile_potential(spec, geom):
        phase = x[..., term.var_index] @ term.freqs.T
        weights = np.cos(phase) * term.sin_coefs - np.sin(phase) * term.cos_coefs
        partials = weights @ term.freqs
        for i in range(term.var_index.shape[1]):
            drift[..., term.var_index[:, i]] -= partials[..., i]
    return drift


def drift(spec: PotentialSpec, geom: BoxGeometry, k: Site, x: np.ndarray) -> np.ndarray:
    return drift_field(spec, geom, x)[..., geom.index(k)]


def local_energy(spec: PotentialSpec, geom: BoxGeometry, window: Iterable[Site],
                 x: np.ndarray) -> np.ndarray:
    """Sum of the translated terms whose support meets `window`."""
    x = _check_config(geom, x)
    sites = np.asarray([geom.index(s) for s in window], dtype=int)
    energy = np.zeros(x.shape[:-1])
    for term in compile_potential(spec, geom):
        hit = np.isin(term.support_index, sites).any(axis=1)
        if not hit.any():
            continue
        phase = x[..., term.var_index[hit]] @ term.freqs.T
        values = np.cos(phase) @ term.cos_coefs + np.sin(phase) @ term.sin_coefs
        energy = energy + values.sum(axis=-1)
    return energy


def total_energy(spec: PotentialSpec, geom: BoxGeometry, x: np.ndarray) -> np.ndarray:
    """Box Hamiltonian: sum of every translated term."""
    x = _check_config(geom, x)
    energy = np.zeros(x.shape[:-1])
    for term in compile_potential(spec, geom):
        energy = energy + _term_values(term, x).sum(axis=-1)
    return energy


class AxiomCheck(BaseModel):
    name: str
    passed: bool
    max_violation: float
    detail: str = ""


class AxiomReport(BaseModel):
    checks: List[AxiomCheck]
    sample_count: int

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def failed(self) -> List[str]:
        return [check.name for check in self.checks if not check.passed]


def verify_axioms(spec: PotentialSpec, geom: BoxGeometry, sample_count: int,
                  seed: int = 0, tolerance: float = 1e-12) -> AxiomReport:
    """
    Check periodicity, shift covariance, declared range and gradient structure.

    Args:
        spec (PotentialSpec): Interaction family, possibly malformed
        geom (BoxGeometry): Simulation box
        sample_count (int): Random configurations per check
        seed (int): Master seed
        tolerance (float): Allowed violation for the exact identities

    Returns:
        AxiomReport: One check per axiom with the largest observed violation
    """
    if sample_count < 1:
        raise ConfigurationError("sample_count must be at least 1")
    rng = substream(seed, STREAM_AXIOMS)
    checks = []

    problems = spec.problems()
    range_violation = 0.0
    for term in spec.terms:
        range_violation = max(range_violation, term.diameter - 2 * spec.range_L,
                              float(len(term.undeclared_dependencies())))
    checks.append(AxiomCheck(name="range", passed=not problems,
                             max_violation=max(range_violation, 0.0), detail="; ".join(problems)))

    x = rng.uniform(-2 * TWO_PI, 2 * TWO_PI, size=(sample_count, geom.n_sites))
    base = drift_field(spec, geom, x)
    jumps = rng.integers(-2, 3, size=x.shape) * TWO_PI
    periodic_gap = float(np.max(np.abs(drift_field(spec, geom, x + jumps) - base)))
    checks.append(AxiomCheck(name="periodicity", passed=periodic_gap <= tolerance,
                             max_violation=periodic_gap))

    if geom.periodic:
        shift_gap = 0.0
        for row in range(sample_count):
            k = int(rng.integers(geom.n_sites))
            shifted = drift_field(spec, geom, geom.shift_config(x[row], k))[geom.origin]
            shift_gap = max(shift_gap, abs(float(base[row, k]) - float(shifted)))
        checks.append(AxiomCheck(name="shift_covariance", passed=shift_gap <= tolerance,
                                 max_violation=shift_gap))
    else:
        checks.append(AxiomCheck(name="shift_covariance", passed=True, max_violation=0.0,
                                 detail="not applicable on a box without wrap"))

    step = 1e-5
    gradient_gap = 0.0
    for row in range(sample_count):
        k = int(rng.integers(geom.n_sites))
        bump = np.zeros(geom.n_sites)
        bump[k] = step
        plus = local_energy(spec, geom, [k], x[row] + bump)
        minus = local_energy(spec, geom, [k], x[row] - bump)
        numeric = -(plus - minus) / (2 * step)
        scale = max(1.0, abs(float(base[row, k])))
        gradient_gap = max(gradient_gap, abs(float(base[row, k]) - float(numeric)) / scale)
    checks.append(AxiomCheck(name="gradient", passed=gradient_gap <= 1e-6, max_violation=gradient_gap))

    report = AxiomReport(checks=checks, sample_count=sample_count)
    logger.info(f"Axiom check: {'pass' if report.passed else 'FAIL ' + ', '.join(report.failed())}")
    return report


class CoefficientModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    freq: List[int]
    coef: float
    kind: str = "cos"

    @field_validator("kind")
    @classmethod
    def check_kind(cls, value: str) -> str:
        if value not in ("cos", "sin"):
            raise ValueError("kind must be 'cos' or 'sin'")
        return value


class TermModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    support: List[List[int]] = Field(min_length=1)
    variables: Optional[List[List[int]]] = None
    coefficients: List[CoefficientModel] = Field(default_factory=list)


class PotentialFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_name: str = Field(alias="schema")
    version: int
    dimension: int = Field(ge=1)
    range: int = Field(ge=1)
    terms: List[TermModel] = Field(default_factory=list)

    @field_validator("schema_name")
    @classmethod
    def check_schema(cls, value: str) -> str:
        if value != SCHEMA_NAME:
            raise ValueError(f"expected schema {SCHEMA_NAME!r}")
        return value

    @field_validator("version")
    @classmethod
    def check_version(cls, value: int) -> int:
        if value != SCHEMA_VERSION:
            raise ValueError(f"unsupported version {value}")
        return value


def spec_from_dict(data: Dict, strict: bool = True) -> PotentialSpec:
    """
    Build a PotentialSpec from its JSON form.

    Args:
        data (Dict): Parsed potential file
        strict (bool): Raise on range or dependency violations

    Returns:
        PotentialSpec: The interaction family
    """
    try:
        parsed = PotentialFile.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid potential file: {e}") from e
    terms = []
    for i, term in enumerate(parsed.terms):
        support = tuple(tuple(o) for o in term.support)
        variables = tuple(tuple(o) for o in term.variables) if term.variables else support
        for c in term.coefficients:
            if len(c.freq) != len(variables):
                raise ConfigurationError(f"term {i}: frequency {c.freq} does not match {len(variables)} variables")
        poly = TrigPoly.from_terms(len(variables), [(c.freq, c.coef, c.kind) for c in term.coefficients])
        terms.append(BaseTerm(support=support, poly=poly, variables=variables))
    spec = PotentialSpec(d=parsed.dimension, range_L=parsed.range, terms=tuple(terms))
    return spec.validate() if strict else spec


def spec_to_dict(spec: PotentialSpec) -> Dict:
    terms = []
    for term in spec.terms:
        entry = {"support": [list(o) for o in term.support],
                 "coefficients": [{"freq": list(f), "coef": c, "kind": kind} for f, c, kind in term.poly.terms()]}
        if term.variables != term.support:
            entry["variables"] = [list(o) for o in term.variables]
        terms.append(entry)
    return {"schema": SCHEMA_NAME, "version": SCHEMA_VERSION, "dimension": spec.d,
            "range": spec.range_L, "terms": terms}


def load_spec(path: Union[str, Path], strict: bool = True) -> PotentialSpec:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read potential file {path}: {e}") from e
    logger.info(f"Loaded potential from {path}")
    return spec_from_dict(data, strict=strict)


def dump_spec(spec: PotentialSpec, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec_to_dict(spec), f, indent=2)
