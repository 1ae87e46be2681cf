"""
aim of the stage: measure how fast the quotient semigroup forgets its start.
inputs of stage: Gibbs samples, mixing block of the run config.
output json of the stage: mixing_curve.csv and mixing_fit.json.
method: sup over Gibbs and corner starts of |p_t phi - <phi>| for phi = cos(theta_0),
fitted to K (c+t)^-alpha and to an exponential rate.
"""
from typing import Any, Dict

from ..records import load_gibbs, save_mixing
from ..torus_dynamics import mixing_curve, mixing_starts
from ..trig_poly import LocalFunction
from .base_stage import BaseStage


class MixingStage(BaseStage):
    requires = ("gibbs",)

    def __init__(self, name: str, context):
        super().__init__(name, context)
        self.description = "Fits the polynomial mixing law of the quotient dynamics"

    def process(self) -> Dict[str, Any]:
        cfg = self.config.mixing
        samples = load_gibbs(self.upstream("gibbs"))
        phi = LocalFunction.cosine([self.geom.origin], [1])
        mean, se = samples.mean_and_se(phi(samples.states))
        starts = mixing_starts(samples, self.geom, cfg.n_starts)
        curve = mixing_curve(self.spec, self.geom, phi, starts, cfg.times, cfg.paths_per_start,
                             cfg.dt, self.seed, mu0_mean=(float(mean), float(se)), c=cfg.c,
                             workers=self.workers)
        outputs = save_mixing(self.out, curve)
        verdicts = {"decay_fit": {"passed": True, "inconclusive": curve.inconclusive,
                                  "alpha_hat": curve.alpha_hat, "k_hat": curve.k_hat,
                                  "rate_hat": curve.rate_hat, "flags": curve.flags}}
        return self.format_output("inconclusive" if curve.inconclusive else "ok", outputs, verdicts)
