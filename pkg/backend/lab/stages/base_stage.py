import json
import logging
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from ..config import RunConfig
from ..error_handler import AxiomFailure, ConfigurationError, MissingArtifactError
from ..potential import BoxGeometry, PotentialSpec, single_site_potential
from ..records import RunManifest
from ..trig_poly import TrigPoly

logger = logging.getLogger(__name__)


@dataclass
class LabContext:
    """Everything a stage needs: validated config, potential, box, seed and output layout."""
    config: RunConfig
    spec: PotentialSpec
    geom: BoxGeometry
    seed: int
    out_dir: Path
    workers: int
    manifest: RunManifest

    def stage_dir(self, name: str) -> Path:
        return self.out_dir / name


class BaseStage(ABC):
    requires: Tuple[str, ...] = ()

    def __init__(self, name: str, context: LabContext):
        self.name = name
        self.context = context
        self.description = "Base stage of the homogenization lab"

    @staticmethod
    def load_preset(name: str) -> Dict[str, Any]:
        """
        Load a potential preset from the presets directory.

        Args:
            name (str): Preset name without the .json suffix

        Returns:
            Dict[str, Any]: Parsed potential file
        """
        preset_path = os.path.join(os.path.dirname(__file__), '..', 'presets', f"{name}.json")
        try:
            with open(preset_path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except FileNotFoundError as e:
            available = sorted(p[:-5] for p in os.listdir(os.path.dirname(preset_path)) if p.endswith(".json"))
            raise ConfigurationError(f"unknown preset {name!r}; available: {', '.join(available)}") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"preset {name!r} is not valid JSON: {e}") from e

    @property
    def config(self) -> RunConfig:
        return self.context.config

    @property
    def geom(self) -> BoxGeometry:
        return self.context.geom

    @property
    def spec(self) -> PotentialSpec:
        """The potential, refused with an axiom failure if it breaks the range requirement."""
        problems = self.context.spec.problems()
        if problems:
            raise AxiomFailure("; ".join(problems))
        return self.context.spec

    @property
    def seed(self) -> int:
        return self.context.seed

    @property
    def workers(self) -> int:
        return self.context.workers

    @property
    def out(self) -> Path:
        path = self.context.stage_dir(self.name)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def upstream(self, stage: str) -> Path:
        path = self.context.stage_dir(stage)
        if not path.is_dir():
            raise MissingArtifactError(f"stage {self.name!r} needs outputs of {stage!r} in {path}")
        return path

    def single_site(self) -> Optional[TrigPoly]:
        return single_site_potential(self.context.spec)

    def should_run(self, requested: Sequence[str]) -> bool:
        return self.name in requested

    @abstractmethod
    def process(self) -> Dict[str, Any]:
        pass

    def format_output(self, status: str, outputs: Optional[List[Path]] = None,
                      verdicts: Optional[Dict[str, Any]] = None,
                      stage_name: Optional[str] = None) -> Dict[str, Any]:
        """
        Format the stage's result with a consistent structure.

        Args:
            status (str): "ok", "inconclusive" or "failed"
            outputs (Optional[List[Path]]): Files written by the stage
            verdicts (Optional[Dict[str, Any]]): Named checks and their outcome
            stage_name (Optional[str]): Name of the stage

        Returns:
            Dict[str, Any]: Formatted output dictionary
        """
        return {
            "stage": stage_name or self.name,
            "status": status,
            "outputs": [str(p) for p in (outputs or [])],
            "verdicts": verdicts or {},
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
