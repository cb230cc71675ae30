from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Type

import numpy as np

from models.schemas import EnvMeta
from .errors import ContractViolation


@dataclass
class StepResult:
    observations: np.ndarray  # (n, obs_dim)
    reward: float
    terminal: bool
    info: Dict[str, Any] = field(default_factory=dict)


class Environment(ABC):
    """Abstract base class for multi-agent environments with a shared reward"""

    def __init__(self):
        self.env_name = self.__class__.__name__.replace("Env", "").lower()

    @abstractmethod
    def reset(self, rng: np.random.Generator) -> np.ndarray:
        """Start a new episode and return the first (n, obs_dim) observations"""
        pass

    @abstractmethod
    def step(self, joint_action) -> StepResult:
        """Apply one joint action"""
        pass

    @abstractmethod
    def action_mask(self) -> np.ndarray:
        """(n, action_count) legal actions for the next step"""
        pass

    @abstractmethod
    def metadata(self) -> EnvMeta:
        pass

    @property
    def n_agents(self) -> int:
        return self.metadata().n_agents

    @property
    def action_count(self) -> int:
        return self.metadata().action_count

    @property
    def obs_dim(self) -> int:
        return self.metadata().obs_dim


def check_joint_action(joint_action, n_agents: int, legal: np.ndarray) -> List[int]:
    """Validate a joint action against the legal mask and return it as ints"""
    actions = [int(a) for a in np.asarray(joint_action).reshape(-1)]
    if len(actions) != n_agents:
        raise ContractViolation(f"joint action has {len(actions)} entries, expected {n_agents}")
    for agent, action in enumerate(actions):
        if action < 0 or action >= legal.shape[1] or not legal[agent, action]:
            raise ContractViolation(f"action {action} is not legal for agent {agent} in this state")
    return actions


class EnvironmentFactory:
    """Factory class for creating environments by name or from stored metadata"""

    @classmethod
    def _registry(cls) -> Dict[str, Type[Environment]]:
        from .matrix_game import MatrixGameEnv
        from .tmaze import TMazeEnv

        return {"tmaze": TMazeEnv, "matrix": MatrixGameEnv}

    @classmethod
    def create_env(cls, env_name: str, **kwargs) -> Environment:
        registry = cls._registry()
        if env_name not in registry:
            raise ContractViolation(f"Unsupported environment: {env_name}")
        return registry[env_name](**kwargs)

    @classmethod
    def from_meta(cls, meta: EnvMeta) -> Environment:
        """Rebuild the exact environment a dataset or checkpoint was made with"""
        env = cls.create_env(meta.name, **meta.geometry)
        built = env.metadata()
        if (built.n_agents, built.action_count, built.obs_dim) != (meta.n_agents, meta.action_count, meta.obs_dim):
            raise ContractViolation(
                f"stored metadata for '{meta.name}' does not match the environment this build constructs"
            )
        return env

    @classmethod
    def get_available_envs(cls) -> List[str]:
        return sorted(cls._registry())

    @classmethod
    def check_compatible(cls, meta: EnvMeta, other: Optional[EnvMeta]) -> None:
        if other is None:
            return
        mine = (meta.n_agents, meta.action_count, meta.obs_dim)
        theirs = (other.n_agents, other.action_count, other.obs_dim)
        if mine != theirs:
            raise ContractViolation(
                f"dimension mismatch: '{meta.name}' has (agents, actions, obs_dim)={mine}, "
                f"'{other.name}' has {theirs}"
            )
