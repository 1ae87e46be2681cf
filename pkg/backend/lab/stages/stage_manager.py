"""
aim of the module: run lab stages for one configuration and keep the run
directory consistent.
inputs: a validated RunConfig and the requested stage names.
outputs: stage results, resolved_config.json, manifest.jsonl and an exit code.
method: builds the shared LabContext once, echoes the resolved config, then
runs the supervisor's stage list, recording start, finish and error events.
"""
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .. import __version__
from ..config import RunConfig, hash_input, resolved_dict
from ..error_handler import EXIT_OK, EXIT_USAGE, ErrorHandler, LabError, PropertyFailure
from ..potential import BoxGeometry, PotentialSpec, load_spec, spec_from_dict
from ..records import RESOLVED_CONFIG, RunManifest, append_jsonl, config_hash, write_json
from .base_stage import BaseStage, LabContext
from .corrector_stage import CorrectorStage
from .effective_stage import EffectiveStage
from .gibbs_stage import GibbsStage
from .homogenize_stage import HomogenizeStage
from .mixing_stage import MixingStage
from .random_env_stage import RandomEnvStage
from .report_stage import ReportStage
from .supervisor_stage import PipelineSupervisor
from .verify_potential_stage import VerifyPotentialStage

logger = logging.getLogger(__name__)


def build_potential(config: RunConfig) -> PotentialSpec:
    """Potential from a preset, a file or the inline block; range problems surface later as axiom failures."""
    ref = config.potential
    if ref.preset is not None:
        return spec_from_dict(BaseStage.load_preset(ref.preset), strict=False)
    if ref.path is not None:
        return load_spec(ref.path, strict=False)
    return spec_from_dict(ref.inline, strict=False)


class StageManager:
    def __init__(self, config: RunConfig):
        self.config = config
        spec = build_potential(config)
        geom = BoxGeometry(spec.d, config.geometry.n_box, config.geometry.periodic)
        out_dir = Path(config.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        digest = config_hash(hash_input(config))
        manifest = RunManifest(out_dir, digest, config.seed, __version__)
        self.context = LabContext(config=config, spec=spec, geom=geom, seed=config.seed, out_dir=out_dir,
                                  workers=config.workers, manifest=manifest)

        self.supervisor = PipelineSupervisor()
        self.supervisor.register_stage(VerifyPotentialStage("verify-potential", self.context))
        self.supervisor.register_stage(GibbsStage("gibbs", self.context))
        self.supervisor.register_stage(MixingStage("mixing", self.context))
        self.supervisor.register_stage(CorrectorStage("corrector", self.context))
        self.supervisor.register_stage(EffectiveStage("effective", self.context))
        self.supervisor.register_stage(HomogenizeStage("homogenize", self.context))
        self.supervisor.register_stage(RandomEnvStage("random-env", self.context))
        self.supervisor.register_stage(ReportStage("report", self.context))

    @property
    def manifest(self) -> RunManifest:
        return self.context.manifest

    def echo_config(self) -> Path:
        return write_json(self.context.out_dir / RESOLVED_CONFIG, resolved_dict(self.config))

    def run(self, requested: Optional[Sequence[str]] = None) -> int:
        """
        Run the requested stages in pipeline order.

        Args:
            requested (Optional[Sequence[str]]): Stage names, the whole pipeline when None

        Returns:
            int: Process exit code, 0 when every stage finished
        """
        self.results: List[Dict[str, Any]] = []
        try:
            stages = self.supervisor.resolve(requested, finished=list(self.manifest.finished()))
        except LabError as e:
            append_jsonl(self.manifest.path, [ErrorHandler.handle(e, stage=None)])
            return ErrorHandler.exit_code(e)
        self.echo_config()
        logger.info(f"Running {', '.join(s.name for s in stages)} (config {self.manifest.config_digest[:12]})")
        for stage in stages:
            self.manifest.start_stage(stage.name)
            try:
                result = stage.process()
            except Exception as e:
                if isinstance(e, PropertyFailure) and e.result is not None:
                    self.manifest.finish_stage(stage.name, "failed", e.result["outputs"], e.result["verdicts"])
                    self.results.append(e.result)
                append_jsonl(self.manifest.path, [ErrorHandler.handle(e, stage=stage.name)])
                return ErrorHandler.exit_code(e)
            self.manifest.finish_stage(stage.name, result["status"], result["outputs"], result["verdicts"])
            self.results.append(result)
            logger.info(f"Stage {stage.name} finished: {result['status']}")
        return EXIT_OK


def run_stages(config: RunConfig, requested: Optional[Sequence[str]] = None) -> int:
    """Build a manager and run; configuration problems while building map to their exit codes."""
    try:
        manager = StageManager(config)
    except LabError as e:
        ErrorHandler.handle(e)
        return ErrorHandler.exit_code(e)
    except OSError as e:
        logger.error(f"Cannot prepare output directory {config.out}: {e}")
        return EXIT_USAGE
    return manager.run(requested)
