"""
aim of the stage: estimate the effective covariance matrix on the configured
block, factorize it and prepare the smoothed factor ladder and truncation levels
used by the approximation process.
inputs of stage: corrector derivatives, Gibbs samples, the mixing fit.
output json of the stage: effective_matrix.csv (primary estimator),
effective_<estimator>.csv for the others, factor_block.csv, truncation.json,
effective_checks.json.
method: the first configured estimator is primary and must pass the symmetry,
PSD and translation checks; the others are compared to it entrywise.
"""
import logging
from typing import Any, Dict, List

from ..corrector import (CorrectorSource, ExactOneDimCorrector, ExactSourceOneDim, MonteCarloCorrector,
                         ZeroCorrector)
from ..effective_diffusion import (EffectiveMatrix, abar_exact_1d, abar_from_derivatives,
                                   abar_from_martingale, abar_from_msd, agreement_z, build_factor_ladder,
                                   derivative_rows, factor_field, row_norm_check,
                                   select_truncation)
from ..error_handler import ConfigurationError, PropertyFailure, TruncationInfeasibleError
from ..records import (CORRECTOR_META, load_derivatives, load_gibbs, load_mixing, read_json,
                       save_effective, save_factor, write_json)
from .base_stage import BaseStage
from .corrector_stage import corrector_points

logger = logging.getLogger(__name__)

TRUNCATION_JSON = "truncation.json"


def corrector_source(stage: BaseStage) -> CorrectorSource:
    """The corrector later path computations evaluate: exact, zero or Monte Carlo."""
    if stage.spec.is_free:
        return ZeroCorrector()
    single = stage.single_site()
    cfg = stage.config.corrector
    if single is not None and cfg.method != "feynman_kac":
        return ExactSourceOneDim(ExactOneDimCorrector(single))
    meta = read_json(stage.upstream("corrector") / CORRECTOR_META)
    horizon = meta.get("horizon") or cfg.t_max
    logger.warning("Using the Monte Carlo corrector along paths; this is slow")
    return MonteCarloCorrector(stage.spec, stage.geom, float(horizon), cfg.paths, cfg.dt, stage.seed,
                               step=cfg.step, workers=stage.workers)


class EffectiveStage(BaseStage):
    requires = ("corrector",)

    def __init__(self, name: str, context):
        super().__init__(name, context)
        self.description = "Estimates A-bar, factorizes it and selects the truncation levels"

    def _estimate(self, estimator: str, sites, derivs, points, samples) -> EffectiveMatrix:
        cfg = self.config.effective
        if estimator == "derivative":
            return abar_from_derivatives(derivs, points, self.geom, sites)
        if estimator == "exact1d":
            single = self.single_site()
            if single is None:
                raise ConfigurationError("the exact1d estimator needs a single-site potential")
            return abar_exact_1d(single, sites)
        starts = samples.states[samples.take(cfg.n_starts)]
        if estimator == "martingale":
            return abar_from_martingale(self.spec, self.geom, sites, starts, corrector_source(self),
                                        cfg.window, cfg.n_windows, cfg.dt, self.seed, workers=self.workers)
        return abar_from_msd(self.spec, self.geom, sites, starts, cfg.msd_times, cfg.dt, self.seed,
                             workers=self.workers)

    def _truncation(self, mixing, ladder) -> List[Dict[str, Any]]:
        levels = []
        n_max = max(ladder)
        for eps in sorted(self.config.homogenize.eps, reverse=True):
            try:
                result = select_truncation(eps, mixing, ladder, seed=self.seed)
                levels.append(dict(result.to_dict(), flags=[]))
            except TruncationInfeasibleError as e:
                logger.warning(str(e))
                levels.append({"eps": eps, "N": 1, "saturated": False, "k_prime": None, "criteria": {},
                               "violating_constant": e.violating_constant, "flags": ["truncation_infeasible"]})
            except ConfigurationError as e:
                logger.warning(f"Truncation at eps={eps} uses the largest level: {e}")
                levels.append({"eps": eps, "N": n_max, "saturated": True, "k_prime": None, "criteria": {},
                               "flags": ["mixing_fit_unavailable"]})
        return levels

    def process(self) -> Dict[str, Any]:
        cfg = self.config.effective
        samples = load_gibbs(self.upstream("gibbs"))
        mixing = load_mixing(self.upstream("mixing"))
        derivs = load_derivatives(self.upstream("corrector"))
        points = corrector_points(samples, self.config.corrector.n_points)
        sites = [int(s) for s in self.geom.block(self.config.corrector.block_radius)]

        estimates = {name: self._estimate(name, sites, derivs, points, samples) for name in cfg.estimators}
        primary_name = cfg.estimators[0]
        primary = estimates[primary_name]
        outputs = [save_effective(self.out, primary, self.geom)]
        for name, matrix in estimates.items():
            if name != primary_name:
                outputs.append(save_effective(self.out, matrix, self.geom, name=f"effective_{name}.csv"))

        failures = primary.invariant_failures(self.geom)
        origin = list(primary.sites).index(self.geom.origin)
        verdicts: Dict[str, Any] = {
            "abar": {"passed": True, "estimator": primary_name,
                     "value": float(primary.values[origin, origin]), "se": float(primary.se[origin, origin]),
                     "flags": primary.flags},
            "matrix_invariants": {"passed": not failures, "failures": failures,
                                  "symmetry_z": primary.symmetry_z(),
                                  "min_eigenvalue": primary.min_eigenvalue(),
                                  "translation_z": primary.translation_z(self.geom)},
        }
        for name, matrix in estimates.items():
            if name != primary_name:
                z = agreement_z(primary, matrix)
                verdicts[f"agreement_{name}"] = {"passed": z <= 3.0, "max_z": z, "flags": matrix.flags}

        if "positive_semidefinite" in failures:
            outputs.append(write_json(self.out / "effective_checks.json", verdicts))
            raise PropertyFailure("effective_matrix_positive_semidefinite", ", ".join(failures),
                                  result=self.format_output("failed", outputs, verdicts))

        factor = primary.factorize()
        outputs.append(save_factor(self.out, factor))
        verdicts["factorization"] = {"passed": True, "rank": factor.rank,
                                     "reconstruction_error": factor.reconstruction_error,
                                     "clamped": factor.clamped}

        ladder = build_factor_ladder(derivs, points, self.geom, cfg.n_max, max_cutoff=cfg.max_cutoff,
                                     radius=cfg.smoothing_radius)
        rows, _ = derivative_rows(derivs, ladder[cfg.n_max].sites, self.geom.n_sites)
        value, se, ok = row_norm_check(factor_field(rows), points)
        verdicts["row_norm"] = {"passed": ok, "value": value, "se": se}
        verdicts["smoothing"] = {"passed": True,
                                 "cutoffs": {str(N): f.cutoff for N, f in ladder.items()},
                                 "row_distance": {str(N): float(f.row_distance.max()) for N, f in ladder.items()}}
        levels = self._truncation(mixing, ladder)
        outputs.append(write_json(self.out / TRUNCATION_JSON, {"levels": levels}))
        verdicts["truncation"] = {"passed": True, "N": {str(l["eps"]): l["N"] for l in levels}}
        outputs.append(write_json(self.out / "effective_checks.json", verdicts))

        logger.info(f"a-bar at the origin: {verdicts['abar']['value']:.5f} +- {verdicts['abar']['se']:.5f}")
        if failures:
            raise PropertyFailure(f"effective_matrix_{failures[0]}", ", ".join(failures),
                                  result=self.format_output("failed", outputs, verdicts))
        return self.format_output("ok", outputs, verdicts)
