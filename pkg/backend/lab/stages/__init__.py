from .base_stage import BaseStage, LabContext
from .stage_manager import StageManager, run_stages
from .supervisor_stage import STAGE_ORDER, PipelineSupervisor

__all__ = ["BaseStage", "LabContext", "StageManager", "run_stages", "STAGE_ORDER", "PipelineSupervisor"]
