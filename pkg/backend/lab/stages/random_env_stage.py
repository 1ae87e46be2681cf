"""
aim of the stage: run the rescaled process from 0 in frozen random environments
drawn from the Gibbs measure and compare the pooled law with the limit.
inputs of stage: effective matrix and Gibbs samples.
output json of the stage: convergence.jsonl and convergence.csv in mode "environment".
method: wraps random_env_run; per environment the characteristic-function gap
is summarized by its mean and maximum.
"""
from typing import Any, Dict

from ..homogenization import random_env_run
from ..records import load_effective, load_gibbs
from .base_stage import BaseStage
from .homogenize_stage import report_status, write_report


class RandomEnvStage(BaseStage):
    requires = ("effective",)

    def __init__(self, name: str, context):
        super().__init__(name, context)
        self.description = "Homogenization in frozen Gibbs environments started at 0"

    def process(self) -> Dict[str, Any]:
        cfg = self.config.homogenize
        samples = load_gibbs(self.upstream("gibbs"))
        abar = load_effective(self.upstream("effective"))
        sites = [int(s) for s in self.geom.block(cfg.sites_radius)]
        report = random_env_run(self.spec, self.geom, cfg.eps, abar, samples, cfg.times,
                                cfg.random_env.n_environments, cfg.random_env.paths_per_environment,
                                cfg.dt_quotient, self.seed, sites=sites, gap_fraction=cfg.gap_fraction,
                                level=cfg.level, workers=self.workers)
        outputs = write_report(self.out, report)
        return self.format_output(report_status(report), outputs, report.verdicts)
