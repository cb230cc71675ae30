import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from models.schemas import HyperParams, ModelConfig, TrainConfig
from .checkpoint import save_checkpoint
from .dataset import Dataset, load_dataset, sample_batch
from .errors import NumericError
from .evaluation import PolicyEvaluator
from .learner import METRIC_COLUMNS, OryxLearner
from .network import OryxNetwork, build_network

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.oryx"
METRICS_NAME = "metrics.csv"
EVAL_CURVE_NAME = "eval_curve.csv"
NO_MEMORY_SEQUENCE_LENGTH = 2


def apply_ablation(ablation: str, hp: HyperParams, model: ModelConfig) -> Tuple[HyperParams, ModelConfig]:
    """Resolve an ablation name into hyper-parameter and model overrides"""
    hp_updates: Dict[str, object] = {}
    model_updates: Dict[str, object] = {}
    if ablation in ("no-autoregressive", "independent"):
        model_updates["autoregressive"] = False
    if ablation in ("no-memory", "independent"):
        hp_updates["sequence_length"] = NO_MEMORY_SEQUENCE_LENGTH
        model_updates["memory_window"] = NO_MEMORY_SEQUENCE_LENGTH
    if ablation == "independent":
        hp_updates["advantage_mode"] = "marginal"
    if ablation == "no-icq":
        hp_updates["use_icq"] = False
        model_updates["act_on_q"] = True
    hp = hp.model_copy(update=hp_updates)
    model_updates["chunk_size"] = hp.sequence_length
    return hp, model.model_copy(update=model_updates)


def model_config_for(config: TrainConfig, dataset: Dataset) -> ModelConfig:
    env = dataset.meta.env
    return ModelConfig(
        obs_dim=env.obs_dim,
        action_count=env.action_count,
        n_agents=env.n_agents,
        embed_dim=config.embed_dim,
        num_blocks=config.num_blocks,
        num_heads=config.num_heads,
        kappa_scaling=config.kappa_scaling,
        chunk_size=config.hp.sequence_length,
        precision=config.precision,
    )


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    eval_curve: Path
    updates: int
    last_metrics: Optional[Dict[str, float]]


class OryxTrainer:
    """Runs the update loop for one TrainConfig, fully determined by its seed"""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.output_dir = Path(config.output_dir)

    def _snapshot(self, network: OryxNetwork, evaluator: PolicyEvaluator, step: int, writer) -> Dict[str, float]:
        outcomes = evaluator.evaluate_network(network, self.config.eval_episodes, seed=self.config.seed + step)
        network.train()
        row = {
            "step": step,
            "mean_return": float(np.mean([o.episode_return for o in outcomes])),
            "success_rate": float(np.mean([o.success for o in outcomes])),
        }
        writer.writerow(row)
        logger.info(f"Eval @ {step}: mean return {row['mean_return']:.3f}, success {row['success_rate']:.3f}")
        return row

    def run(self) -> TrainResult:
        config = self.config
        dataset = load_dataset(config.dataset, precision=config.precision)
        hp, model_cfg = apply_ablation(config.ablate, config.hp, model_config_for(config, dataset))
        logger.info(f"Training {config.ablate} on {config.dataset}: {dataset.meta.episode_count} episodes, "
                    f"{config.updates} updates, seed {config.seed}")

        rng = np.random.default_rng(config.seed)
        network = build_network(model_cfg, seed=config.seed)
        learner = OryxLearner(network, hp, rng)
        evaluator = PolicyEvaluator(dataset.meta.env)

        self.output_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = self.output_dir / METRICS_NAME
        curve_path = self.output_dir / EVAL_CURVE_NAME
        last: Optional[Dict[str, float]] = None

        with metrics_path.open("w", newline="") as metrics_file, curve_path.open("w", newline="") as curve_file:
            metrics_writer = csv.DictWriter(metrics_file, fieldnames=METRIC_COLUMNS)
            metrics_writer.writeheader()
            curve_writer = csv.DictWriter(curve_file, fieldnames=["step", "mean_return", "success_rate"])
            curve_writer.writeheader()

            for update in range(1, config.updates + 1):
                batch = sample_batch(dataset, hp.batch_size, hp.sequence_length, rng)
                try:
                    last = learner.train_step(batch)
                except NumericError as exc:
                    self._dump_last_metrics(exc.metrics or last)
                    logger.error(f"Numeric abort at update {update}: {exc}")
                    raise
                metrics_writer.writerow(last)

                if update % config.log_every == 0:
                    logger.info(f"Update {update}: critic {last['critic_loss']:.4f} policy {last['policy_loss']:.4f} "
                                f"|A| {last['mean_abs_advantage']:.4f}")
                if config.eval_every and update % config.eval_every == 0:
                    metrics_file.flush()
                    self._snapshot(learner.network, evaluator, update, curve_writer)

        checkpoint = save_checkpoint(
            self.output_dir / CHECKPOINT_NAME,
            learner.network,
            dataset.meta.env,
            hp=hp,
            ablation=config.ablate,
            extra={"updates": config.updates, "seed": config.seed, "dataset": str(config.dataset)},
        )
        return TrainResult(checkpoint, metrics_path, curve_path, config.updates, last)

    def _dump_last_metrics(self, metrics: Optional[Dict[str, float]]):
        path = self.output_dir / "last_metrics.json"
        path.write_text(json.dumps(metrics or {}, sort_keys=True, indent=2))
        logger.error(f"Last metrics written to {path}")
