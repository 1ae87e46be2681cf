"""
aim of the module: read and write every artifact a stage hands to the next one.

inputs:
    GibbsSampleSet, MixingCurve, CorrectorEstimate, CorrectorDerivatives,
    EffectiveMatrix, FactorBlock and ConvergenceReport objects, plus stage
    bookkeeping from the StageManager.

outputs:
    CSV tables with headers, JSON-lines records, JSON metadata files and the
    append-only run manifest.

method:
    Floats are written with repr so reruns produce byte-identical files. The
    config hash is the SHA-256 of the canonical (sorted-key, compact) JSON.
"""
import csv
import hashlib
import json
import logging
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .corrector import CorrectorDerivatives, CorrectorEstimate
from .effective_diffusion import EffectiveMatrix, FactorBlock
from .error_handler import MissingArtifactError
from .potential import BoxGeometry
from .torus_dynamics import GibbsSampleSet, MixingCurve

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

GIBBS_CSV = "gibbs_samples.csv"
GIBBS_META = "gibbs_meta.json"
MIXING_CSV = "mixing_curve.csv"
MIXING_FIT = "mixing_fit.json"
CORRECTOR_CSV = "corrector.csv"
CORRECTOR_META = "corrector_meta.json"
DERIVATIVE_POINTS_CSV = "derivative_points.csv"
DERIVATIVES_CSV = "derivatives.csv"
EFFECTIVE_CSV = "effective_matrix.csv"
FACTOR_CSV = "factor_block.csv"
MANIFEST = "manifest.jsonl"
RESOLVED_CONFIG = "resolved_config.json"


def _plain(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_plain)


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def write_csv(path: PathLike, rows: Sequence[Dict], fieldnames: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _plain(v) for k, v in row.items()})
    logger.debug(f"Wrote {len(rows)} rows to {path}")
    return path


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_json(path: PathLike, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_plain) + "\n", encoding="utf-8")
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def append_jsonl(path: PathLike, records: Iterable[Dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        for record in records:
            fh.write(canonical_json(record) + "\n")
    return path


def write_jsonl(path: PathLike, records: Iterable[Dict]) -> Path:
    path = Path(path)
    if path.exists():
        path.unlink()
    return append_jsonl(path, records)


def read_jsonl(path: PathLike) -> List[Dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _site_columns(n_sites: int) -> List[str]:
    return [f"s{i}" for i in range(n_sites)]


def save_gibbs(out_dir: PathLike, samples: GibbsSampleSet) -> List[Path]:
    cols = _site_columns(samples.states.shape[1])
    rows = [{"index": i, "chain": int(c), **dict(zip(cols, map(float, state)))}
            for i, (c, state) in enumerate(zip(samples.chain_ids, samples.states))]
    meta = {"burn_in": samples.burn_in, "thinning": samples.thinning,
            "acceptance_rate": samples.acceptance_rate, "seed": samples.seed,
            "step_size": samples.step_size, "n_samples": len(samples), "n_chains": samples.n_chains}
    out_dir = Path(out_dir)
    return [write_csv(out_dir / GIBBS_CSV, rows, ["index", "chain"] + cols),
            write_json(out_dir / GIBBS_META, meta)]


def load_gibbs(out_dir: PathLike) -> GibbsSampleSet:
    out_dir = Path(out_dir)
    rows = read_csv(out_dir / GIBBS_CSV)
    meta = read_json(out_dir / GIBBS_META)
    cols = [c for c in rows[0] if c.startswith("s")]
    states = np.array([[float(r[c]) for c in cols] for r in rows])
    return GibbsSampleSet(states=states, chain_ids=np.array([int(r["chain"]) for r in rows]),
                          burn_in=int(meta["burn_in"]), thinning=int(meta["thinning"]),
                          acceptance_rate=float(meta["acceptance_rate"]), seed=int(meta["seed"]),
                          step_size=float(meta["step_size"]))


def save_mixing(out_dir: PathLike, curve: MixingCurve) -> List[Path]:
    rows = [{"t": float(t), "sup_gap": float(s), "raw_gap": float(r), "se": float(e)}
            for t, s, r, e in zip(curve.times, curve.sup_gap, curve.raw_gap, curve.se)]
    fit = {"mu0_mean": curve.mu0_mean, "alpha_hat": curve.alpha_hat, "k_hat": curve.k_hat,
           "c": curve.c, "rate_hat": curve.rate_hat, "inconclusive": curve.inconclusive,
           "flags": curve.flags}
    out_dir = Path(out_dir)
    return [write_csv(out_dir / MIXING_CSV, rows), write_json(out_dir / MIXING_FIT, fit)]


def load_mixing(out_dir: PathLike) -> MixingCurve:
    out_dir = Path(out_dir)
    rows = read_csv(out_dir / MIXING_CSV)
    fit = read_json(out_dir / MIXING_FIT)
    column = lambda name: np.array([float(r[name]) for r in rows])
    return MixingCurve(times=column("t"), sup_gap=column("sup_gap"), raw_gap=column("raw_gap"),
                       se=column("se"), mu0_mean=float(fit["mu0_mean"]),
                       alpha_hat=float(fit["alpha_hat"]), k_hat=float(fit["k_hat"]),
                       c=float(fit["c"]), rate_hat=float(fit["rate_hat"]),
                       inconclusive=bool(fit["inconclusive"]), flags=list(fit["flags"]))


def save_corrector(out_dir: PathLike, estimate: CorrectorEstimate, geom: BoxGeometry) -> List[Path]:
    rows = []
    for e in range(len(estimate.points)):
        for i, k in enumerate(estimate.sites):
            rows.append({"point": e, "k": k, "k_coord": ";".join(map(str, geom.coords[k])),
                         "chi": float(estimate.values[e, i]), "se": float(estimate.se[e, i])})
    meta = {"method": estimate.method, "paths": estimate.paths, "dt": estimate.dt,
            "horizon": estimate.horizon, "tail_bound": estimate.tail_bound, "flags": estimate.flags,
            "sites": list(estimate.sites)}
    out_dir = Path(out_dir)
    return [write_csv(out_dir / CORRECTOR_CSV, rows), write_json(out_dir / CORRECTOR_META, meta)]


def save_derivatives(out_dir: PathLike, derivs: Dict[int, CorrectorDerivatives]) -> List[Path]:
    first = next(iter(derivs.values()))
    cols = _site_columns(first.points.shape[1])
    points = [{"point": e, **dict(zip(cols, map(float, p)))} for e, p in enumerate(first.points)]
    rows = []
    for k in sorted(derivs):
        d = derivs[k]
        values, values_se = d.values, d.values_se
        for e in range(len(d.points)):
            for i, j in enumerate(d.directions):
                rows.append({"k": k, "point": e, "j": j, "grad": float(d.grad[e, i]),
                             "grad_se": float(d.grad_se[e, i]), "chi_prime": float(values[e, i]),
                             "chi_prime_se": float(values_se[e, i]), "step": d.step,
                             "convention": d.convention, "flags": ";".join(d.flags)})
    out_dir = Path(out_dir)
    return [write_csv(out_dir / DERIVATIVE_POINTS_CSV, points, ["point"] + cols),
            write_csv(out_dir / DERIVATIVES_CSV, rows)]


def load_derivatives(out_dir: PathLike) -> Dict[int, CorrectorDerivatives]:
    out_dir = Path(out_dir)
    point_rows = read_csv(out_dir / DERIVATIVE_POINTS_CSV)
    cols = [c for c in point_rows[0] if c.startswith("s")]
    points = np.array([[float(r[c]) for c in cols] for r in point_rows])
    grouped: Dict[int, List[Dict[str, str]]] = {}
    for row in read_csv(out_dir / DERIVATIVES_CSV):
        grouped.setdefault(int(row["k"]), []).append(row)
    out = {}
    for k, rows in grouped.items():
        directions = sorted({int(r["j"]) for r in rows})
        slot = {j: i for i, j in enumerate(directions)}
        grad = np.zeros((len(points), len(directions)))
        grad_se = np.zeros_like(grad)
        for r in rows:
            e, i = int(r["point"]), slot[int(r["j"])]
            grad[e, i], grad_se[e, i] = float(r["grad"]), float(r["grad_se"])
        flags = [f for f in rows[0]["flags"].split(";") if f]
        out[k] = CorrectorDerivatives(site=k, points=points, directions=tuple(directions), grad=grad,
                                      grad_se=grad_se, step=float(rows[0]["step"]),
                                      convention=rows[0]["convention"], flags=flags)
    return out


def save_effective(out_dir: PathLike, matrix: EffectiveMatrix, geom: BoxGeometry,
                   name: str = EFFECTIVE_CSV) -> Path:
    return write_csv(Path(out_dir) / name, matrix.to_rows(geom))


def load_effective(out_dir: PathLike, name: str = EFFECTIVE_CSV) -> EffectiveMatrix:
    return EffectiveMatrix.from_rows(read_csv(Path(out_dir) / name))


def save_factor(out_dir: PathLike, factor: FactorBlock) -> Path:
    rows = [dict(r, rank=factor.rank, reconstruction_error=factor.reconstruction_error)
            for r in factor.to_rows()]
    return write_csv(Path(out_dir) / FACTOR_CSV, rows)


class RunManifest:
    """
    Append-only JSON-lines log of one run directory.

    Every stage gets a "start" record before it runs and a "finish" record with
    its outputs, status and verdicts afterwards.
    """

    def __init__(self, out_dir: PathLike, config_digest: str, seed: int, version: str):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / MANIFEST
        self.config_digest = config_digest
        self.seed = seed
        self.version = version
        self._clock: Dict[str, float] = {}

    def _record(self, event: str, stage: str, **extra) -> Dict:
        return {"event": event, "stage": stage, "config_hash": self.config_digest, "seed": self.seed,
                "version": self.version, "timestamp": datetime.now(timezone.utc).isoformat(), **extra}

    def _relative(self, path: PathLike) -> str:
        path = Path(path)
        try:
            return path.relative_to(self.out_dir).as_posix()
        except ValueError:
            return path.as_posix()

    def start_stage(self, stage: str) -> None:
        self._clock[stage] = time.perf_counter()
        append_jsonl(self.path, [self._record("start", stage)])

    def finish_stage(self, stage: str, status: str, outputs: Sequence[PathLike],
                     verdicts: Optional[Dict] = None) -> None:
        wall = time.perf_counter() - self._clock.pop(stage, time.perf_counter())
        outputs = sorted(self._relative(p) for p in outputs)
        append_jsonl(self.path, [self._record("finish", stage, status=status, outputs=outputs,
                                              verdicts=verdicts or {}, wall_seconds=round(wall, 3))])

    def entries(self) -> List[Dict]:
        return read_jsonl(self.path) if self.path.exists() else []

    def finished(self) -> Dict[str, Dict]:
        """Latest finish record per stage for the current config hash."""
        latest = {}
        for entry in self.entries():
            if entry["event"] == "finish" and entry["config_hash"] == self.config_digest:
                latest[entry["stage"]] = entry
        return latest
