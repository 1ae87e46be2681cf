"""
aim of the stage: draw states from the Gibbs measure of the quotient dynamics.
inputs of stage: sampler block of the run config, potential and box.
output json of the stage: gibbs_samples.csv, gibbs_meta.json, gibbs_checks.json.
method: MALA chains on independent substreams, then a DLR consistency check on
the origin window and a stationarity check of cos(theta_0) under the dynamics.
"""
import logging
from typing import Any, Dict

from ..error_handler import PropertyFailure
from ..records import save_gibbs, write_json
from ..torus_dynamics import dlr_check, gibbs_sample, stationarity_check
from ..trig_poly import LocalFunction
from .base_stage import BaseStage

logger = logging.getLogger(__name__)

DLR_Z_LIMIT = 4.0


class GibbsStage(BaseStage):
    requires = ("verify-potential",)

    def __init__(self, name: str, context):
        super().__init__(name, context)
        self.description = "Samples the Gibbs measure and checks its DLR property"

    def process(self) -> Dict[str, Any]:
        cfg = self.config.sampler
        samples = gibbs_sample(self.spec, self.geom, cfg.n_chains, cfg.n_samples, cfg.burn_in,
                               cfg.thinning, cfg.step_size, self.seed, workers=self.workers,
                               stall_window=cfg.stall_window)
        outputs = save_gibbs(self.out, samples)
        origin = self.geom.origin
        phi = LocalFunction.cosine([origin], [1])
        dlr = dlr_check(self.spec, self.geom, samples, [origin], phi)
        stationarity = stationarity_check(self.spec, self.geom, samples, phi, [1.0],
                                          self.config.mixing.dt, self.seed, workers=self.workers)
        verdicts = {
            "dlr": {"passed": dlr.z_score <= DLR_Z_LIMIT, "residual": dlr.residual, "se": dlr.se,
                    "quad_points": dlr.quad_points},
            "stationarity": {"passed": stationarity.passed, "p_values": stationarity.p_values},
            "acceptance_rate": {"passed": True, "value": samples.acceptance_rate},
        }
        outputs.append(write_json(self.out / "gibbs_checks.json", verdicts))
        logger.info(f"Gibbs samples: {len(samples)} states, acceptance {samples.acceptance_rate:.3f}")
        if dlr.z_score > DLR_Z_LIMIT:
            raise PropertyFailure("dlr_consistency", f"residual {dlr.residual:.3g} is {dlr.z_score:.1f} SE from 0",
                                  result=self.format_output("failed", outputs, verdicts))
        return self.format_output("ok", outputs, verdicts)
