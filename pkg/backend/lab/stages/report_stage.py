"""
aim of the stage: collect the verdicts of every finished stage of this run
into one report.
inputs of stage: the run manifest and the effective matrix if present.
output json of the stage: report.json and summary.csv.
method: latest finish record per stage for the current config hash; the
single-site closed form is added as an oracle next to the estimate.
"""
import logging
from typing import Any, Dict, List

from ..effective_diffusion import abar_exact_1d
from ..error_handler import MissingArtifactError
from ..records import load_effective, write_csv, write_json
from .base_stage import BaseStage

logger = logging.getLogger(__name__)


def verdict_rows(finished: Dict[str, Dict]) -> List[Dict[str, Any]]:
    rows = []
    for stage, entry in finished.items():
        for name, verdict in (entry.get("verdicts") or {}).items():
            if not isinstance(verdict, dict):
                continue
            rows.append({"stage": stage, "verdict": name, "passed": bool(verdict.get("passed", True)),
                         "inconclusive": bool(verdict.get("inconclusive", False)),
                         "status": entry.get("status", "")})
    return rows


class ReportStage(BaseStage):
    requires = ("verify-potential",)

    def __init__(self, name: str, context):
        super().__init__(name, context)
        self.description = "Aggregates stage verdicts and the effective matrix"

    def _abar(self) -> Dict[str, Any]:
        try:
            matrix = load_effective(self.context.stage_dir("effective"))
        except MissingArtifactError:
            return {}
        origin = self.geom.origin
        value, se = matrix.entry(origin, origin)
        summary = {"estimator": matrix.provenance, "value": value, "se": se}
        single = self.single_site()
        if single is not None:
            oracle, _ = abar_exact_1d(single, [origin]).entry(origin, origin)
            summary["oracle"] = oracle
            summary["oracle_z"] = abs(value - oracle) / se if se > 0 else (0.0 if value == oracle else None)
        return summary

    def process(self) -> Dict[str, Any]:
        finished = {k: v for k, v in self.context.manifest.finished().items() if k != self.name}
        rows = verdict_rows(finished)
        abar = self._abar()
        failed = [f"{r['stage']}.{r['verdict']}" for r in rows if not r["passed"] and not r["inconclusive"]]
        report = {"config_hash": self.context.manifest.config_digest, "seed": self.seed,
                  "stages": {k: v.get("status") for k, v in finished.items()},
                  "abar": abar, "failed": failed, "verdicts": rows}
        outputs = [write_json(self.out / "report.json", report),
                   write_csv(self.out / "summary.csv", rows,
                             ["stage", "verdict", "passed", "inconclusive", "status"])]
        if abar:
            logger.info(f"a-bar_00 = {abar['value']:.5f} +- {abar['se']:.5f} ({abar['estimator']})")
        verdicts = {"all_passed": {"passed": not failed, "failed": failed}}
        return self.format_output("ok" if not failed else "failed", outputs, verdicts)
