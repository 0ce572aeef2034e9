"""Dataset generation: train and test splits from disjoint seed ranges."""

import logging

from core import dataset as dataset_io
from core.dataset import build_dataset
from core.hazard_env import calibrate_rarity, critical_fraction, generate_episodes

from . import registry
from .base import BaseStage, RunContext, StageName, StageResult

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")


class GenerateStage(BaseStage):
    name = StageName.GENERATE
    description = "Simulate episodes and write the labelled train/test datasets"

    def outputs(self, ctx: RunContext):
        return [ctx.layout.data(split) / dataset_io.MANIFEST_FILE for split in SPLITS]

    def run(self, ctx: RunContext) -> StageResult:
        cfg = ctx.config
        params = cfg.dataset
        env = cfg.env.check()
        if params.calibrate_rarity:
            env, rate = calibrate_rarity(env, params.target_critical_rate, params.n_pilot_episodes, seed=params.train_seed)
            logger.info("Calibrated rarity_scale=%.6g (pilot critical rate %.4g)", env.rarity_scale, rate)

        report, artifacts = {}, []
        for split, n, seed in (
            ("train", params.n_train_episodes, params.train_seed),
            ("test", params.n_test_episodes, params.test_seed),
        ):
            episodes = generate_episodes(env, n, seed)
            manifest = {
                "config_hash": ctx.config_hash,
                "split": split,
                "seed": seed,
                "env": env.model_dump(mode="json"),
                "critical_episode_fraction": critical_fraction(episodes),
            }
            ds = build_dataset(episodes, params.window_len, params.horizon, manifest)
            artifacts.append(dataset_io.save(ds, ctx.layout.data(split)))
            report[split] = ds.counts() | {"n_critical_episodes": sum(ep.critical for ep in episodes)}
        return StageResult(success=True, stage=self.name, report=report, artifacts=artifacts)


registry.stages.register(StageName.GENERATE.value, GenerateStage())
