"""Base interface for pipeline stages and the run context they share."""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from core import dataset as dataset_io
from core.config import PipelineConfig
from core.dataset import LabeledDataset
from core.errors import MissingArtifactError, OutputExistsError, ProvenanceError
from core.hazard_env import EnvConfig, Episode, generate_episodes

logger = logging.getLogger(__name__)


class StageName(Enum):
    """Steps of a pipeline run, in execution order."""
    GENERATE = "generate"
    STAGE1 = "stage1"
    STAGE2 = "stage2"
    STAGE3 = "stage3"
    EVALUATE = "evaluate"


@dataclass
class StageResult:
    """Result of one stage run."""
    success: bool
    stage: StageName
    report: dict[str, Any] = field(default_factory=dict)
    artifacts: list[Path] = field(default_factory=list)
    error: str | None = None


class ArtifactLayout:
    """Where every artifact of a run lives under the output directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def data(self, split: str) -> Path:
        return self.root / "data" / split

    @property
    def effective_config(self) -> Path:
        return self.root / "effective_config.yaml"

    @property
    def log_file(self) -> Path:
        return self.root / "logs" / "pipeline.log"

    @property
    def stage1(self) -> Path:
        return self.root / "stage1"

    @property
    def reward_checkpoint(self) -> Path:
        return self.stage1 / "reward_model.ckpt"

    @property
    def survivors(self) -> Path:
        return self.stage1 / "survivors"

    @property
    def stage2(self) -> Path:
        return self.root / "stage2"

    @property
    def bbn_checkpoint(self) -> Path:
        return self.stage2 / "bbn_model.ckpt"

    @property
    def stage3(self) -> Path:
        return self.root / "stage3"

    @property
    def dqn_checkpoint(self) -> Path:
        return self.stage3 / "dense_dqn_model.ckpt"

    @property
    def evaluation(self) -> Path:
        return self.root / "evaluation"

    @property
    def baselines(self) -> Path:
        return self.root / "baselines"

    @property
    def plots(self) -> Path:
        return self.evaluation / "plots"


@dataclass
class RunContext:
    """Resolved config, output layout and provenance hash of one run."""

    config: PipelineConfig
    out_dir: Path
    force: bool = False

    def __post_init__(self):
        self.config = self.config.resolved()
        self.out_dir = Path(self.out_dir)
        self.config_hash = self.config.config_hash()
        self.layout = ArtifactLayout(self.out_dir)

    def check_provenance(self, found: str | None, what: Path) -> None:
        if found != self.config_hash and not self.force:
            raise ProvenanceError(
                f"{what} was produced by config {str(found)[:12]}, current config is {self.config_hash[:12]} "
                "(rerun the producing stage or pass --force)"
            )

    def load_dataset(self, path: Path) -> LabeledDataset:
        if not (path / dataset_io.MANIFEST_FILE).exists():
            raise MissingArtifactError(str(path), "run `critcascade generate` first")
        ds = dataset_io.load(path)
        self.check_provenance(ds.manifest.get("config_hash"), path)
        return ds

    def episodes(self, split: str) -> list[Episode]:
        """Regenerate the raw episodes behind a saved split from its manifest."""
        manifest = dataset_io.read_manifest(self.layout.data(split))
        env = EnvConfig(**manifest["env"])
        return generate_episodes(env, int(manifest["n_episodes"]), int(manifest["seed"]))


class BaseStage(ABC):
    """Abstract base class for every pipeline stage."""

    name: StageName = StageName.GENERATE
    description: str = "Base stage"

    def requires(self, ctx: RunContext) -> list[tuple[Path, str]]:
        """(path, hint) pairs that must exist before the stage runs."""
        return []

    @abstractmethod
    def outputs(self, ctx: RunContext) -> list[Path]:
        """Artifacts the stage writes."""
        pass

    @abstractmethod
    def run(self, ctx: RunContext) -> StageResult:
        """Execute the stage."""
        pass

    def check_prerequisites(self, ctx: RunContext) -> None:
        for path, hint in self.requires(ctx):
            if not path.exists():
                raise MissingArtifactError(str(path), hint)

    def check_outputs(self, ctx: RunContext) -> None:
        existing = [p for p in self.outputs(ctx) if p.exists()]
        if existing and not ctx.force:
            raise OutputExistsError(f"{existing[0]} already exists; pass --force to overwrite")

    def __call__(self, ctx: RunContext) -> StageResult:
        self.check_prerequisites(ctx)
        self.check_outputs(ctx)
        logger.info("Running %s (config %s)", self.name.value, ctx.config_hash[:12])
        return self.run(ctx)
