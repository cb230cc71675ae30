"""
Single-step two-agent matrix game with closed-form values.

Used as an exact oracle: with one step Q equals the payoff, so state values
and sequential per-agent advantages can be enumerated directly.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from models.schemas import EnvMeta
from .environments import Environment, StepResult, check_joint_action
from .errors import ContractViolation

COORDINATION_PAYOFF = ((1.0, 0.0), (0.0, 1.0))
OBS_DIM = 1


@dataclass(frozen=True)
class MatrixGameState:
    payoff: Tuple[Tuple[float, ...], ...]
    done: bool = False


def _payoff_array(payoff: Sequence[Sequence[float]]) -> np.ndarray:
    table = np.asarray(payoff, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] != table.shape[1] or table.shape[0] < 2:
        raise ContractViolation(f"payoff must be a square table with at least 2 actions, got {table.shape}")
    return table


def matrix_game_step(state: MatrixGameState, joint_action) -> StepResult:
    if state.done:
        raise ContractViolation("the matrix game is single-step and already finished")
    table = _payoff_array(state.payoff)
    a1, a2 = check_joint_action(joint_action, 2, np.ones((2, table.shape[0]), dtype=bool))
    return StepResult(
        observations=np.ones((2, OBS_DIM)),
        reward=float(table[a1, a2]),
        terminal=True,
        info={"collisions": 0, "success": bool(table[a1, a2] == table.max())},
    )


def state_value(payoff, first_policy: np.ndarray, second_policy: np.ndarray) -> float:
    """V = sum_a1 pi1(a1) sum_a2 pi2(a2 | a1) payoff[a1, a2]"""
    table = _payoff_array(payoff)
    second = np.asarray(second_policy, dtype=np.float64)
    if second.ndim == 1:
        second = np.tile(second, (table.shape[0], 1))
    return float(np.asarray(first_policy) @ (second * table).sum(axis=1))


def exact_token_values(payoff, first_policy: np.ndarray, second_policy: np.ndarray,
                       joint_action: Tuple[int, int], order: Tuple[int, int] = (0, 1)):
    """Exact per-token Q-values and policies for one joint action.

    ``order`` names which agent acts first. The first token's Q marginalizes
    the second agent's conditional policy; the second token's Q is the payoff
    row picked by the first agent's action. ``second_policy[a_first]`` is the
    second agent's distribution given the first agent's action.

    Returns (q_values (2, A), probs (2, A), actions in acting order,
    joint advantage payoff[a] - V).
    """
    table = _payoff_array(payoff)
    if tuple(order) == (1, 0):
        table = table.T
    elif tuple(order) != (0, 1):
        raise ContractViolation(f"order must be (0, 1) or (1, 0), got {order}")
    first_policy = np.asarray(first_policy, dtype=np.float64)
    second_policy = np.asarray(second_policy, dtype=np.float64)

    a_first, a_second = joint_action[order[0]], joint_action[order[1]]
    q_first = (second_policy * table).sum(axis=1)
    q_second = table[a_first]
    value = float(first_policy @ q_first)

    q_values = np.stack([q_first, q_second])
    probs = np.stack([first_policy, second_policy[a_first]])
    return q_values, probs, (a_first, a_second), float(table[a_first, a_second] - value)


class MatrixGameEnv(Environment):
    def __init__(self, payoff: Optional[List[List[float]]] = None):
        super().__init__()
        self.payoff = tuple(tuple(float(x) for x in row) for row in (payoff or COORDINATION_PAYOFF))
        _payoff_array(self.payoff)
        self.state: Optional[MatrixGameState] = None

    @property
    def table(self) -> np.ndarray:
        return _payoff_array(self.payoff)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = MatrixGameState(self.payoff)
        return np.ones((2, OBS_DIM))

    def step(self, joint_action) -> StepResult:
        if self.state is None:
            raise ContractViolation("reset the environment before stepping it")
        result = matrix_game_step(self.state, joint_action)
        self.state = MatrixGameState(self.payoff, done=True)
        return result

    def action_mask(self) -> np.ndarray:
        return np.ones((2, len(self.payoff)), dtype=bool)

    def metadata(self) -> EnvMeta:
        return EnvMeta(
            name="matrix",
            n_agents=2,
            action_count=len(self.payoff),
            obs_dim=OBS_DIM,
            step_limit=1,
            geometry={"payoff": [list(row) for row in self.payoff]},
        )
