import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from models.schemas import EnvMeta, EvalReport
from .environments import Environment, EnvironmentFactory
from .errors import ContractViolation, DegenerateInputError
from .network import OryxNetwork, act_autoregressive
from .scripted_policies import JointPolicy, make_joint_policy
from .statistics import norm_score

logger = logging.getLogger(__name__)


@dataclass
class EpisodeOutcome:
    episode_return: float
    success: bool
    length: int


def run_network_episode(network: OryxNetwork, env: Environment, rng: np.random.Generator,
                        mode: str = "greedy") -> EpisodeOutcome:
    """Roll out one episode with the network acting greedily or by sampling.

    With ``memory_window`` set, the execution state is rebuilt before every
    step from the last ``memory_window - 1`` timesteps only, matching the
    window length the network was trained on.
    """
    window = network.cfg.memory_window
    history = deque(maxlen=window - 1) if window is not None else None
    observations = env.reset(rng)
    exec_state = network.init_exec_state(1)
    total, steps = 0.0, 0
    while True:
        if history is not None:
            exec_state = network.replay(history)
        joint, exec_state = act_autoregressive(network, observations, exec_state, mode, rng, env.action_mask())
        if history is not None and history.maxlen:
            history.append((np.array(observations), joint))
        result = env.step(joint)
        total += result.reward
        steps += 1
        observations = result.observations
        if result.terminal:
            return EpisodeOutcome(total, bool(result.info.get("success", False)), steps)


def run_policy_episode(policy: JointPolicy, env: Environment, rng: np.random.Generator) -> EpisodeOutcome:
    observations = env.reset(rng)
    policy.reset()
    total, steps = 0.0, 0
    while True:
        result = env.step(policy.act(observations, rng, env.action_mask()))
        total += result.reward
        steps += 1
        observations = result.observations
        if result.terminal:
            return EpisodeOutcome(total, bool(result.info.get("success", False)), steps)


class PolicyEvaluator:
    """Runs independent rollouts, each with its own environment and RNG stream.

    Streams come from ``SeedSequence(seed).spawn``, so results do not depend
    on the number of workers.
    """

    def __init__(self, env_meta: EnvMeta, max_workers: int = 1):
        self.env_meta = env_meta
        self.max_workers = max_workers

    def _fan_out(self, rollout: Callable[[Environment, np.random.Generator], EpisodeOutcome],
                 episodes: int, seed: int) -> List[EpisodeOutcome]:
        if episodes < 1:
            raise ContractViolation("evaluation needs at least one episode")
        streams = np.random.SeedSequence(seed).spawn(episodes)

        def run(stream: np.random.SeedSequence) -> EpisodeOutcome:
            return rollout(EnvironmentFactory.from_meta(self.env_meta), np.random.default_rng(stream))

        if self.max_workers <= 1:
            return [run(stream) for stream in streams]

        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            futures = [executor.submit(run, stream) for stream in streams]
            return [future.result() for future in futures]

    def evaluate_network(self, network: OryxNetwork, episodes: int, seed: int,
                         mode: str = "greedy") -> List[EpisodeOutcome]:
        network.eval()
        return self._fan_out(lambda env, rng: run_network_episode(network, env, rng, mode), episodes, seed)

    def evaluate_scripted(self, quality: str, episodes: int, seed: int,
                          epsilon: float = 0.0) -> List[EpisodeOutcome]:
        payoff = self.env_meta.geometry.get("payoff")

        def rollout(env: Environment, rng: np.random.Generator) -> EpisodeOutcome:
            policy = make_joint_policy(self.env_meta.name, quality, epsilon, payoff, self.env_meta.n_agents)
            return run_policy_episode(policy, env, rng)

        return self._fan_out(rollout, episodes, seed)


def measure_reference_scores(env_meta: EnvMeta, episodes: int = 320, seed: int = 0,
                             max_workers: int = 1) -> Tuple[float, float]:
    """Empirical (random, expert) mean returns for score normalization"""
    evaluator = PolicyEvaluator(env_meta, max_workers)
    random_returns = [o.episode_return for o in evaluator.evaluate_scripted("uniform", episodes, seed)]
    expert_returns = [o.episode_return for o in evaluator.evaluate_scripted("expert", episodes, seed)]
    random_score, expert_score = float(np.mean(random_returns)), float(np.mean(expert_returns))
    logger.info(f"Reference scores for {env_meta.name}: random={random_score:.4f} expert={expert_score:.4f}")
    return random_score, expert_score


def build_report(env_name: str, outcomes: List[EpisodeOutcome], seed: int,
                 random_score: Optional[float] = None, expert_score: Optional[float] = None) -> EvalReport:
    returns = [o.episode_return for o in outcomes]
    mean = float(np.clip(np.mean(returns), min(returns), max(returns)))
    normalized = None
    if random_score is not None and expert_score is not None:
        try:
            normalized = norm_score(mean, random_score, expert_score)
        except DegenerateInputError as exc:
            logger.warning(f"Normalized score unavailable: {exc}")
    return EvalReport(
        env=env_name,
        episodes=len(outcomes),
        seed=seed,
        returns=returns,
        mean=mean,
        # population std: a single episode reports 0
        std=float(np.std(returns)),
        success_rate=float(np.mean([o.success for o in outcomes])),
        normalized_score=normalized,
        random_score=random_score,
        expert_score=expert_score,
    )


def pool_reports(reports: List[EvalReport]) -> EvalReport:
    """Merge per-seed reports of one configuration into a single sample of returns"""
    if not reports:
        raise ContractViolation("at least one report is needed to pool")
    names = sorted({r.env for r in reports})
    if len(names) != 1:
        raise ContractViolation(f"reports from different environments cannot be pooled: {names}")
    first = reports[0]
    returns = [value for report in reports for value in report.returns]
    episodes = sum(report.episodes for report in reports)
    mean = float(np.clip(np.mean(returns), min(returns), max(returns)))
    normalized = None
    if first.random_score is not None and first.expert_score is not None:
        try:
            normalized = norm_score(mean, first.random_score, first.expert_score)
        except DegenerateInputError as exc:
            logger.warning(f"Normalized score unavailable: {exc}")
    return first.model_copy(update={
        "episodes": episodes,
        "returns": returns,
        "mean": mean,
        "std": float(np.std(returns)),
        "success_rate": sum(r.success_rate * r.episodes for r in reports) / episodes,
        "normalized_score": normalized,
    })
