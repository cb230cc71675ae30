"""
Scripted behavior policies used to record offline datasets.

Each agent policy keeps its own memory and acts on its own observation
only; ``JointPolicy`` steps them together.
"""

from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional

import numpy as np

from .errors import ContractViolation
from .matrix_game import COORDINATION_PAYOFF
from .tmaze import (
    ACTION_COUNT,
    GREEN,
    GREEN_SIDE_OFFSET,
    LEFT,
    NOOP,
    ORANGE,
    PHASE_OFFSET,
    PREV_ACTION_OFFSET,
    RIGHT,
    UP,
    VIEW_FEATURES,
)


def _legal(mask: Optional[np.ndarray], action_count: int) -> np.ndarray:
    if mask is None:
        return np.arange(action_count)
    return np.flatnonzero(mask)


class AgentPolicy(ABC):
    """Abstract base class for one agent's scripted behavior"""

    def __init__(self, agent_index: int):
        self.agent_index = agent_index
        self.policy_name = self.__class__.__name__.replace("Policy", "").lower()

    def reset(self):
        pass

    @abstractmethod
    def act(self, observation: np.ndarray, rng: np.random.Generator,
            legal: Optional[np.ndarray] = None) -> int:
        pass


class UniformPolicy(AgentPolicy):
    def __init__(self, agent_index: int, action_count: int):
        super().__init__(agent_index)
        self.action_count = action_count

    def act(self, observation, rng, legal=None) -> int:
        return int(rng.choice(_legal(legal, self.action_count)))


class TMazeExpertPolicy(AgentPolicy):
    """Agent 0 picks orange, agent 1 picks green; then climb the stem and
    walk toward the remembered goal arm until the wall stops it."""

    def __init__(self, agent_index: int):
        super().__init__(agent_index)
        self.color: Optional[int] = None
        self.green_side: Optional[int] = None

    def reset(self):
        self.color = None
        self.green_side = None

    @staticmethod
    def _walls(observation: np.ndarray) -> np.ndarray:
        return observation[:VIEW_FEATURES].reshape(3, 3, 2)[..., 0]

    def _remember(self, observation: np.ndarray):
        if self.color is None:
            chosen = observation[PREV_ACTION_OFFSET:PREV_ACTION_OFFSET + 2]
            self.color = int(np.argmax(chosen)) if chosen.any() else self.convention_color
        if self.green_side is None:
            self.green_side = int(np.argmax(observation[GREEN_SIDE_OFFSET:GREEN_SIDE_OFFSET + 2]))

    @property
    def convention_color(self) -> int:
        return ORANGE if self.agent_index == 0 else GREEN

    def target_direction(self) -> int:
        side = self.green_side if self.color == GREEN else 1 - self.green_side
        return LEFT if side == 0 else RIGHT

    def act(self, observation, rng, legal=None) -> int:
        if observation[PHASE_OFFSET] > 0.5:
            return self.convention_color
        self._remember(observation)
        walls = self._walls(observation)
        if not walls[0, 1]:
            return UP
        direction = self.target_direction()
        blocked = walls[1, 0] if direction == LEFT else walls[1, 2]
        return NOOP if blocked else direction


class NoisyPolicy(AgentPolicy):
    """Wraps a base policy; with probability epsilon acts uniformly over legal actions"""

    def __init__(self, base: AgentPolicy, epsilon: float, action_count: int):
        super().__init__(base.agent_index)
        if not 0.0 <= epsilon <= 1.0:
            raise ContractViolation(f"epsilon must lie in [0, 1], got {epsilon}")
        self.base = base
        self.epsilon = epsilon
        self.action_count = action_count

    def reset(self):
        self.base.reset()

    def act(self, observation, rng, legal=None) -> int:
        # the expert still observes every step so its memory stays current
        planned = self.base.act(observation, rng, legal)
        if rng.random() < self.epsilon:
            return int(rng.choice(_legal(legal, self.action_count)))
        return planned


class MemorylessPolicy(TMazeExpertPolicy):
    """Navigates like the expert but forgets its color after the first move.

    At the junction it picks an arm at random and then keeps walking that
    way.
    """

    def __init__(self, agent_index: int):
        super().__init__(agent_index)
        self.heading: Optional[int] = None

    def reset(self):
        super().reset()
        self.heading = None

    def act(self, observation, rng, legal=None) -> int:
        if observation[PHASE_OFFSET] > 0.5:
            self.heading = None
            return self.convention_color
        walls = self._walls(observation)
        if not walls[0, 1]:
            return UP
        previous = observation[PREV_ACTION_OFFSET:]
        last = int(np.argmax(previous)) - 2 if previous.any() else None
        if last in (LEFT, RIGHT):
            self.heading = last
        elif self.heading is None:
            self.heading = int(rng.choice([LEFT, RIGHT]))
        blocked = walls[1, 0] if self.heading == LEFT else walls[1, 2]
        return NOOP if blocked else self.heading


class MatrixExpertPolicy(AgentPolicy):
    """Plays its part of the highest-payoff joint action (lowest index on ties)"""

    def __init__(self, agent_index: int, payoff: List[List[float]]):
        super().__init__(agent_index)
        table = np.asarray(payoff, dtype=np.float64)
        best = np.unravel_index(int(np.argmax(table)), table.shape)
        self.action = int(best[agent_index])

    def act(self, observation, rng, legal=None) -> int:
        return self.action


class JointPolicy:
    def __init__(self, agents: List[AgentPolicy], action_count: int, description: Dict[str, Any]):
        self.agents = agents
        self.action_count = action_count
        self.description = description

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def reset(self):
        for agent in self.agents:
            agent.reset()

    def act(self, observations: np.ndarray, rng: np.random.Generator,
            action_mask: Optional[np.ndarray] = None) -> np.ndarray:
        if len(observations) != self.n_agents:
            raise ContractViolation(f"got {len(observations)} observations for {self.n_agents} agents")
        return np.array([
            agent.act(observations[i], rng, None if action_mask is None else action_mask[i])
            for i, agent in enumerate(self.agents)
        ], dtype=np.int64)

    def describe(self) -> Dict[str, Any]:
        return dict(self.description)


def make_joint_policy(env_name: str, quality: str = "expert", epsilon: float = 0.0,
                      payoff: Optional[List[List[float]]] = None, n_agents: int = 2) -> JointPolicy:
    """Build the scripted joint policy for an environment.

    quality: expert | noisy | uniform | memoryless (T-Maze only).
    """
    if env_name == "tmaze":
        action_count = ACTION_COUNT

        def expert(i: int) -> AgentPolicy:
            return TMazeExpertPolicy(i)
    elif env_name == "matrix":
        if payoff is None:
            payoff = [list(row) for row in COORDINATION_PAYOFF]
        action_count = len(payoff)
        if quality == "memoryless":
            raise ContractViolation("the memoryless policy only applies to the T-Maze")

        def expert(i: int) -> AgentPolicy:
            return MatrixExpertPolicy(i, payoff)
    else:
        raise ContractViolation(f"no scripted policies for environment '{env_name}'")

    if quality == "expert":
        agents = [expert(i) for i in range(n_agents)]
    elif quality == "noisy":
        agents = [NoisyPolicy(expert(i), epsilon, action_count) for i in range(n_agents)]
    elif quality == "uniform":
        agents = [UniformPolicy(i, action_count) for i in range(n_agents)]
    elif quality == "memoryless":
        agents = [MemorylessPolicy(i) for i in range(n_agents)]
    else:
        raise ContractViolation(f"unknown policy quality '{quality}'")

    description = {"policy": quality, "epsilon": epsilon if quality == "noisy" else 0.0}
    return JointPolicy(agents, action_count, description)
