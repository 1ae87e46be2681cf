"""
aim of the stage: check that the configured interaction family is a valid input
for every later stage.
inputs of stage: PotentialSpec and BoxGeometry from the run context.
output json of the stage: axiom_report.json with one record per axiom.
method: wraps verify_axioms; any failed axiom ends the run with exit code 2.
"""
from typing import Any, Dict

from ..error_handler import AxiomFailure
from ..potential import verify_axioms
from ..records import write_json
from .base_stage import BaseStage


class VerifyPotentialStage(BaseStage):
    requires = ()

    def __init__(self, name: str, context):
        super().__init__(name, context)
        self.description = "Checks periodicity, shift covariance, range and gradient structure"

    def process(self) -> Dict[str, Any]:
        cfg = self.config.verify
        report = verify_axioms(self.context.spec, self.geom, cfg.sample_count, seed=self.seed,
                               tolerance=cfg.tolerance)
        path = write_json(self.out / "axiom_report.json", report.model_dump())
        verdicts = {check.name: {"passed": check.passed, "max_violation": check.max_violation,
                                 "detail": check.detail} for check in report.checks}
        if not report.passed:
            details = "; ".join(f"{c.name}: {c.detail or c.max_violation}" for c in report.checks if not c.passed)
            raise AxiomFailure(f"axiom check failed ({details})")
        return self.format_output("ok", [path], verdicts)
