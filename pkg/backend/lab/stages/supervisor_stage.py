"""
aim of the stage: decide which registered stages run, and in what order.
inputs of stage: requested stage names and the stages already finished for this config.
output json of the stage: ordered list of stages to run.
method: fixed pipeline order; a request is valid when every requirement of a
requested stage is itself requested or already finished under the same config hash.
"""
from typing import Dict, List, Optional, Sequence

from ..error_handler import ConfigurationError, MissingArtifactError
from .base_stage import BaseStage

STAGE_ORDER = ("verify-potential", "gibbs", "mixing", "corrector", "effective", "homogenize",
               "random-env", "report")


class PipelineSupervisor:
    def __init__(self):
        self.stages: Dict[str, BaseStage] = {}

    def register_stage(self, stage: BaseStage):
        if stage.name not in STAGE_ORDER:
            raise ConfigurationError(f"unknown stage {stage.name!r}")
        self.stages.setdefault(stage.name, stage)

    def list_stages(self) -> List[Dict[str, object]]:
        return [{"name": name, "requires": list(self.stages[name].requires),
                 "description": self.stages[name].description}
                for name in STAGE_ORDER if name in self.stages]

    def resolve(self, requested: Optional[Sequence[str]], finished: Sequence[str] = ()) -> List[BaseStage]:
        """
        Order the requested stages and check their requirements.

        Args:
            requested (Optional[Sequence[str]]): Stage names, the whole pipeline when None
            finished (Sequence[str]): Stages with outputs for the current config hash

        Returns:
            List[BaseStage]: Stages to run, in pipeline order
        """
        names = list(STAGE_ORDER) if not requested else list(requested)
        unknown = [n for n in names if n not in self.stages]
        if unknown:
            raise ConfigurationError(f"unknown stage(s) {', '.join(unknown)}; choose from {', '.join(STAGE_ORDER)}")
        chosen = [self.stages[n] for n in STAGE_ORDER if n in names]
        for stage in chosen:
            missing = [r for r in stage.requires if r not in names and r not in finished]
            if missing:
                raise MissingArtifactError(f"stage {stage.name!r} needs {', '.join(missing)} first")
        return chosen
