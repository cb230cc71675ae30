#!/usr/bin/env python3
"""
Oryx offline MARL lab command line.

Subcommands: gen-data, stats, subsample, train, eval, compare, export-curves.
Every command writes its fully-resolved configuration next to its primary
output as ``<output>.config.json``; ``--config <file>`` re-runs from one.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Type

import numpy as np
from pydantic import BaseModel, ValidationError

from models.schemas import (
    CompareConfig,
    CompareReport,
    DatasetStats,
    EvalConfig,
    EvalReport,
    ExportCurvesConfig,
    GenDataConfig,
    HyperParams,
    RunConfig,
    StatsConfig,
    SubsampleConfig,
    TrainConfig,
)
from services.checkpoint import checkpoint_env, load_checkpoint
from services.container import canonical_json
from services.curves import ExportSummary, export_curves
from services.dataset import compute_stats, load_dataset, record, save_dataset, subsample_uniform
from services.environments import EnvironmentFactory
from services.errors import NumericError, OryxError
from services.evaluation import PolicyEvaluator, build_report, measure_reference_scores
from services.scripted_policies import make_joint_policy
from services.statistics import welch_t_test
from services.tmaze import TMazeEnv
from services.trainer import CHECKPOINT_NAME, OryxTrainer, TrainResult

logger = logging.getLogger("oryx")

EXIT_CONTRACT = 2
EXIT_NUMERIC = 3


def config_path_for(output) -> Path:
    return Path(f"{output}.config.json")


def write_resolved_config(command: str, config: BaseModel, output) -> Path:
    path = config_path_for(output)
    path.parent.mkdir(parents=True, exist_ok=True)
    resolved = RunConfig(command=command, config=config.model_dump(mode="json"))
    path.write_bytes(canonical_json(resolved.model_dump(mode="json")))
    return path


def load_resolved_config(path, command: str, model: Type[BaseModel]) -> BaseModel:
    resolved = RunConfig.model_validate_json(Path(path).read_text())
    if resolved.command != command:
        raise OryxError(f"{path}: config was written by '{resolved.command}', not '{command}'")
    return model.model_validate(resolved.config)


def _print_stats(stats: DatasetStats):
    print(f"📊 Episodes: {stats.episode_count}  Transitions: {stats.sample_count}")
    print(f"   Return mean {stats.mean_return:.4f}  min {stats.min_return:.4f}  max {stats.max_return:.4f}")


def _make_env(config: GenDataConfig):
    if config.env == "tmaze":
        return EnvironmentFactory.create_env(
            "tmaze", stem_length=config.stem_length, arm_length=config.arm_length, step_limit=config.step_limit
        )
    return EnvironmentFactory.create_env("matrix", payoff=config.payoff)


def _render_first_episode(config: GenDataConfig):
    """Replay the first recorded episode (same seed) and dump every state"""
    env = _make_env(config)
    if not isinstance(env, TMazeEnv):
        print("Rendering is only available for the T-Maze")
        return
    policy = make_joint_policy(config.env, config.policy, config.epsilon, config.payoff)
    rng = np.random.default_rng(config.seed)
    observations = env.reset(rng)
    policy.reset()
    print(env.render())
    while True:
        result = env.step(policy.act(observations, rng, env.action_mask()))
        observations = result.observations
        print(env.render())
        if result.terminal:
            print(f"reward {result.reward}  success {result.info['success']}")
            return


def cmd_gen_data(config: GenDataConfig) -> Path:
    env = _make_env(config)
    policy = make_joint_policy(config.env, config.policy, config.epsilon, config.payoff)
    rng = np.random.default_rng(config.seed)
    dataset = record(env, policy, config.transitions, rng, seed=config.seed, precision=config.precision)
    path = save_dataset(dataset, config.output)
    write_resolved_config("gen-data", config, config.output)
    print(f"✅ Dataset written to {path}")
    _print_stats(compute_stats(dataset))
    if config.render_first:
        _render_first_episode(config)
    return path


def cmd_stats(config: StatsConfig) -> DatasetStats:
    stats = compute_stats(load_dataset(config.input))
    write_resolved_config("stats", config, f"{config.input}.stats")
    _print_stats(stats)
    print(json.dumps(stats.model_dump(mode="json"), sort_keys=True))
    return stats


def cmd_subsample(config: SubsampleConfig) -> Path:
    dataset = subsample_uniform(load_dataset(config.input), config.transitions, config.seed)
    path = save_dataset(dataset, config.output)
    write_resolved_config("subsample", config, config.output)
    print(f"✅ Subsampled dataset written to {path}")
    _print_stats(compute_stats(dataset))
    return path


def cmd_train(config: TrainConfig) -> TrainResult:
    write_resolved_config("train", config, Path(config.output_dir) / CHECKPOINT_NAME)
    result = OryxTrainer(config).run()
    print(f"✅ Checkpoint written to {result.checkpoint}")
    print(f"📈 Metrics: {result.metrics}  Eval curve: {result.eval_curve}")
    return result


def cmd_eval(config: EvalConfig) -> EvalReport:
    network, header = load_checkpoint(config.checkpoint)
    env_meta = checkpoint_env(header)
    if config.env is not None:
        # the override is only checked against the checkpoint dims; rollouts keep the recorded geometry
        EnvironmentFactory.check_compatible(env_meta, EnvironmentFactory.create_env(config.env).metadata())

    random_score, expert_score = config.random_score, config.expert_score
    if random_score is None or expert_score is None:
        measured = measure_reference_scores(env_meta, config.reference_episodes, config.seed, config.workers)
        random_score = measured[0] if random_score is None else random_score
        expert_score = measured[1] if expert_score is None else expert_score

    outcomes = PolicyEvaluator(env_meta, config.workers).evaluate_network(network, config.episodes, config.seed)
    report = build_report(env_meta.name, outcomes, config.seed, random_score, expert_score)

    output = Path(config.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_bytes(canonical_json(report.model_dump(mode="json")))
    write_resolved_config("eval", config, config.output)
    print(f"✅ {report.episodes} episodes: mean {report.mean:.4f} ± {report.std:.4f}, "
          f"success {report.success_rate:.3f}, normalized {report.normalized_score}")
    return report


def cmd_compare(config: CompareConfig) -> CompareReport:
    report_a = EvalReport.model_validate_json(Path(config.report_a).read_text())
    report_b = EvalReport.model_validate_json(Path(config.report_b).read_text())
    result = welch_t_test(report_a.returns, report_b.returns)
    comparison = CompareReport(
        report_a=config.report_a,
        report_b=config.report_b,
        mean_a=report_a.mean,
        mean_b=report_b.mean,
        std_a=report_a.std,
        std_b=report_b.std,
        t=result.t,
        dof=result.dof,
        p_value=result.p_value,
        significant=result.significant,
    )
    if config.output:
        Path(config.output).write_bytes(canonical_json(comparison.model_dump(mode="json")))
    write_resolved_config("compare", config, config.output or f"{config.report_a}.compare")
    verdict = "significant" if comparison.significant else "not significant"
    print(f"📊 {report_a.mean:.4f} vs {report_b.mean:.4f}: t={result.t:.4f} dof={result.dof:.2f} "
          f"p={result.p_value:.4g} ({verdict} at 95%)")
    return comparison


def cmd_export_curves(config: ExportCurvesConfig) -> ExportSummary:
    summary = export_curves(config.inputs, config.output, config.run_ids)
    write_resolved_config("export-curves", config, config.output)
    print(f"✅ {summary.rows} rows from {len(summary.runs)} runs written to {config.output}"
          + (f" ({summary.skipped} empty values omitted)" if summary.skipped else ""))
    return summary


def _payoff(text: str) -> List[List[float]]:
    return json.loads(text)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oryx", description="Oryx offline multi-agent RL lab")
    parser.add_argument("--log-level", default=os.getenv("ORYX_LOG_LEVEL", "INFO"))
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="re-run from a resolved <output>.config.json")
        return p

    p = command("gen-data", "record a dataset with a scripted policy")
    p.add_argument("--env", choices=["tmaze", "matrix"], default="tmaze")
    p.add_argument("--policy", choices=["expert", "noisy", "uniform", "memoryless"], default="expert")
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--transitions", type=int, default=100_000)
    p.add_argument("--output", default="datasets/tmaze_expert.oryx")
    p.add_argument("--stem-length", type=int, default=4)
    p.add_argument("--arm-length", type=int, default=3)
    p.add_argument("--step-limit", type=int, default=20)
    p.add_argument("--payoff", type=_payoff, help="matrix game payoff as JSON, e.g. [[1,0],[0,1]]")
    p.add_argument("--precision", choices=["float64", "float32"], default=os.getenv("ORYX_PRECISION", "float64"))
    p.add_argument("--render-first", action="store_true")

    p = command("stats", "print dataset statistics")
    p.add_argument("--input")

    p = command("subsample", "uniformly subsample whole episodes")
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--transitions", type=int)

    p = command("train", "train Oryx on a dataset")
    p.add_argument("--dataset")
    p.add_argument("--output-dir", default="runs/oryx")
    p.add_argument("--updates", type=int, default=20_000)
    p.add_argument("--ablate", choices=["none", "no-autoregressive", "no-memory", "no-icq", "independent"],
                   default="none")
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--num-blocks", type=int, default=1)
    p.add_argument("--num-heads", type=int, default=1)
    p.add_argument("--kappa-scaling", type=float, default=0.5)
    p.add_argument("--eval-every", type=int, default=2000)
    p.add_argument("--eval-episodes", type=int, default=32)
    p.add_argument("--log-every", type=int, default=500)
    p.add_argument("--precision", choices=["float64", "float32"], default=os.getenv("ORYX_PRECISION", "float64"))
    defaults = HyperParams()
    p.add_argument("--gamma", type=float, default=defaults.gamma)
    p.add_argument("--alpha-critic", type=float, default=defaults.alpha_critic)
    p.add_argument("--alpha-policy", type=float, default=defaults.alpha_policy)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--sequence-length", type=int, default=defaults.sequence_length)
    p.add_argument("--target-sync-period", type=int, default=defaults.target_sync_period)
    p.add_argument("--learning-rate", type=float, default=defaults.learning_rate)
    p.add_argument("--partition-grouping", choices=["batch", "agent"], default=defaults.partition_grouping)
    p.add_argument("--advantage-mode", choices=["cumulative", "marginal"], default=defaults.advantage_mode)
    p.add_argument("--no-partition-scaling", action="store_true")
    p.add_argument("--no-permute", action="store_true")

    p = command("eval", "greedy rollouts of a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--env", choices=["tmaze", "matrix"])
    p.add_argument("--episodes", type=int, default=320)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--output", default="eval_report.json")
    p.add_argument("--random-score", type=float)
    p.add_argument("--expert-score", type=float)
    p.add_argument("--reference-episodes", type=int, default=320)

    p = command("compare", "Welch t-test between two eval reports")
    p.add_argument("--report-a")
    p.add_argument("--report-b")
    p.add_argument("--output")

    p = command("export-curves", "merge metrics CSVs into long format")
    p.add_argument("--inputs", nargs="+")
    p.add_argument("--output", default="curves.csv")
    p.add_argument("--run-ids", nargs="+")
    return parser


def _config_from_args(args: argparse.Namespace) -> BaseModel:
    if args.command == "gen-data":
        return GenDataConfig(
            env=args.env, policy=args.policy, epsilon=args.epsilon, transitions=args.transitions, seed=args.seed,
            output=args.output, stem_length=args.stem_length, arm_length=args.arm_length,
            step_limit=args.step_limit, payoff=args.payoff, precision=args.precision, render_first=args.render_first,
        )
    if args.command == "stats":
        return StatsConfig(input=args.input, seed=args.seed)
    if args.command == "subsample":
        return SubsampleConfig(input=args.input, output=args.output, transitions=args.transitions, seed=args.seed)
    if args.command == "train":
        hp = HyperParams(
            gamma=args.gamma, alpha_critic=args.alpha_critic, alpha_policy=args.alpha_policy,
            batch_size=args.batch_size, sequence_length=args.sequence_length,
            target_sync_period=args.target_sync_period, learning_rate=args.learning_rate,
            scale_partition_by_batch=not args.no_partition_scaling, permute_agents=not args.no_permute,
            partition_grouping=args.partition_grouping, advantage_mode=args.advantage_mode,
        )
        return TrainConfig(
            dataset=args.dataset, output_dir=args.output_dir, updates=args.updates, seed=args.seed,
            ablate=args.ablate, hp=hp, embed_dim=args.embed_dim, num_blocks=args.num_blocks,
            num_heads=args.num_heads, kappa_scaling=args.kappa_scaling, eval_every=args.eval_every,
            eval_episodes=args.eval_episodes, log_every=args.log_every, precision=args.precision,
        )
    if args.command == "eval":
        return EvalConfig(
            checkpoint=args.checkpoint, env=args.env, episodes=args.episodes, seed=args.seed, workers=args.workers,
            output=args.output, random_score=args.random_score, expert_score=args.expert_score,
            reference_episodes=args.reference_episodes,
        )
    if args.command == "compare":
        return CompareConfig(report_a=args.report_a, report_b=args.report_b, output=args.output, seed=args.seed)
    return ExportCurvesConfig(inputs=args.inputs or [], output=args.output, run_ids=args.run_ids, seed=args.seed)


COMMANDS: Dict[str, Tuple[Type[BaseModel], Callable]] = {
    "gen-data": (GenDataConfig, cmd_gen_data),
    "stats": (StatsConfig, cmd_stats),
    "subsample": (SubsampleConfig, cmd_subsample),
    "train": (TrainConfig, cmd_train),
    "eval": (EvalConfig, cmd_eval),
    "compare": (CompareConfig, cmd_compare),
    "export-curves": (ExportCurvesConfig, cmd_export_curves),
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    model, handler = COMMANDS[args.command]

    try:
        config = load_resolved_config(args.config, args.command, model) if args.config else _config_from_args(args)
        logger.debug(f"Resolved {args.command} config: {config.model_dump(mode='json')}")
        handler(config)
    except NumericError as exc:
        print(f"❌ Numeric abort: {exc}", file=sys.stderr)
        if exc.metrics:
            print(f"   last metrics: {json.dumps(exc.metrics, sort_keys=True)}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OryxError, ValidationError) as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"❌ {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_CONTRACT
    return 0


if __name__ == "__main__":
    sys.exit(main())
