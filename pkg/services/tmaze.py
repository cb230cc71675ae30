"""
Two-phase, two-agent T-Maze.

Phase 1 (one step): both agents pick a target color with no observation.
Phase 2: agents spawn at the stem base and must each reach the goal cell of
the color they picked, remembering which corridor is green and getting past
each other at the junction.

Grid: row 0 holds both arms (goals at the two ends), the junction sits at
column ``arm_length``; the stem runs down from row 1 to row ``stem_length``
and the second start cell sits one row below it.
"""

from dataclasses import dataclass, replace
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from models.schemas import EnvMeta
from .environments import Environment, StepResult, check_joint_action
from .errors import ContractViolation

Cell = Tuple[int, int]

ORANGE, GREEN = 0, 1
UP, DOWN, LEFT, RIGHT, NOOP = range(5)
ACTION_COUNT = 5
MOVES: Dict[int, Cell] = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1), NOOP: (0, 0)}

VIEW_FEATURES = 18  # 3x3 cells x (wall, other agent)
GREEN_SIDE_OFFSET = 18  # [green left, green right]
PREV_ACTION_OFFSET = 20  # [orange, green, up, down, left, right, noop]
PHASE_OFFSET = 27
OBS_DIM = 28


@dataclass(frozen=True)
class TMazeGeometry:
    stem_length: int = 4
    arm_length: int = 3
    step_limit: int = 20

    def __post_init__(self):
        if self.stem_length < 1 or self.arm_length < 1:
            raise ContractViolation("stem and arm lengths must be at least 1")
        if self.step_limit < 2:
            raise ContractViolation("step limit must allow the color step and one move")

    @property
    def junction(self) -> Cell:
        return (0, self.arm_length)

    @property
    def start_cells(self) -> Tuple[Cell, Cell]:
        return ((self.stem_length, self.arm_length), (self.stem_length + 1, self.arm_length))

    def goal_cell(self, side: int) -> Cell:
        """side 0 is the left arm end, side 1 the right"""
        return (0, 0) if side == 0 else (0, 2 * self.arm_length)

    @property
    def passable(self) -> FrozenSet[Cell]:
        arms = {(0, col) for col in range(2 * self.arm_length + 1)}
        stem = {(row, self.arm_length) for row in range(1, self.stem_length + 2)}
        return frozenset(arms | stem)

    def as_dict(self) -> Dict[str, int]:
        return {"stem_length": self.stem_length, "arm_length": self.arm_length, "step_limit": self.step_limit}


@dataclass(frozen=True)
class TMazeState:
    geometry: TMazeGeometry
    green_side: int  # 0: green goal at the left arm end
    start_order: Tuple[int, int]  # start cell index per agent
    phase: str = "choice"
    colors: Tuple[Optional[int], Optional[int]] = (None, None)
    positions: Optional[Tuple[Cell, Cell]] = None
    previous_actions: Tuple[Optional[int], Optional[int]] = (None, None)  # index into the 7-slot encoding
    timestep: int = 0
    terminal: bool = False

    def goal_for(self, agent: int) -> Cell:
        color = self.colors[agent]
        side = self.green_side if color == GREEN else 1 - self.green_side
        return self.geometry.goal_cell(side)


def tmaze_reset(rng: np.random.Generator, step_limit: int = 20,
                geometry: Optional[TMazeGeometry] = None) -> Tuple[TMazeState, np.ndarray]:
    geometry = geometry or TMazeGeometry(step_limit=step_limit)
    green_side = int(rng.integers(2))
    start_order = tuple(int(i) for i in rng.permutation(2))
    state = TMazeState(geometry=geometry, green_side=green_side, start_order=start_order)
    return state, observe(state)


def _agent_view(state: TMazeState, agent: int) -> np.ndarray:
    passable = state.geometry.passable
    row, col = state.positions[agent]
    other = state.positions[1 - agent]
    view = np.zeros((3, 3, 2))
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            cell = (row + dr, col + dc)
            view[dr + 1, dc + 1, 0] = float(cell not in passable)
            view[dr + 1, dc + 1, 1] = float(cell == other)
    return view.reshape(-1)


def observe(state: TMazeState) -> np.ndarray:
    obs = np.zeros((2, OBS_DIM))
    if state.phase == "choice":
        obs[:, PHASE_OFFSET] = 1.0
        return obs
    for agent in range(2):
        obs[agent, :VIEW_FEATURES] = _agent_view(state, agent)
        obs[agent, GREEN_SIDE_OFFSET + state.green_side] = 1.0
        previous = state.previous_actions[agent]
        if previous is not None:
            obs[agent, PREV_ACTION_OFFSET + previous] = 1.0
    return obs


def resolve_moves(positions: Tuple[Cell, Cell], moves: List[int],
                  passable: FrozenSet[Cell]) -> Tuple[Tuple[Cell, Cell], int]:
    """Simultaneous moves with wall and agent-collision rejection.

    A move into the cell the other agent occupies before the step is
    rejected, even if that agent is leaving it. If both agents move into the
    same free cell, both moves are rejected. Returns the new positions and
    the number of moves rejected because of the other agent.
    """
    proposed = []
    for (row, col), move in zip(positions, moves):
        dr, dc = MOVES[move]
        target = (row + dr, col + dc)
        proposed.append(target if target in passable else (row, col))

    moving = [proposed[i] != positions[i] for i in range(2)]
    blocked = [moving[i] and proposed[i] == positions[1 - i] for i in range(2)]
    if all(moving) and proposed[0] == proposed[1]:
        blocked = [True, True]
    resolved = tuple(positions[i] if blocked[i] else proposed[i] for i in range(2))
    return resolved, sum(blocked)


def tmaze_step(state: TMazeState, joint_action) -> Tuple[TMazeState, StepResult]:
    if state.terminal:
        raise ContractViolation("cannot step a terminal T-Maze state")
    actions = check_joint_action(joint_action, 2, legal_actions(state))
    geometry = state.geometry
    collisions = 0

    if state.phase == "choice":
        starts = geometry.start_cells
        next_state = replace(
            state,
            phase="navigate",
            colors=(actions[0], actions[1]),
            positions=(starts[state.start_order[0]], starts[state.start_order[1]]),
            previous_actions=(actions[0], actions[1]),
            timestep=1,
        )
        success = False
    else:
        positions, collisions = resolve_moves(state.positions, actions, geometry.passable)
        next_state = replace(
            state,
            positions=positions,
            previous_actions=(2 + actions[0], 2 + actions[1]),
            timestep=state.timestep + 1,
        )
        success = all(positions[agent] == next_state.goal_for(agent) for agent in range(2))

    terminal = success or next_state.timestep >= geometry.step_limit
    next_state = replace(next_state, terminal=terminal)
    result = StepResult(
        observations=observe(next_state),
        reward=1.0 if success else 0.0,
        terminal=terminal,
        info={"collisions": collisions, "success": success},
    )
    return next_state, result


def legal_actions(state: TMazeState) -> np.ndarray:
    mask = np.zeros((2, ACTION_COUNT), dtype=bool)
    if state.phase == "choice":
        mask[:, [ORANGE, GREEN]] = True
    else:
        mask[:, :] = True
    return mask


def render_ascii(state: TMazeState) -> str:
    """Grid dump: '#' wall, '.' floor, 'G'/'O' goals, '1'/'2' agents"""
    geometry = state.geometry
    passable = geometry.passable
    green_goal = geometry.goal_cell(state.green_side)
    orange_goal = geometry.goal_cell(1 - state.green_side)
    rows = []
    for row in range(-1, geometry.stem_length + 3):
        line = []
        for col in range(-1, 2 * geometry.arm_length + 2):
            cell = (row, col)
            if state.positions is not None and cell in state.positions:
                line.append(str(state.positions.index(cell) + 1))
            elif cell == green_goal:
                line.append("G")
            elif cell == orange_goal:
                line.append("O")
            else:
                line.append("." if cell in passable else "#")
        rows.append("".join(line))
    status = f"t={state.timestep} phase={state.phase} colors={state.colors}"
    return "\n".join(rows + [status])


class TMazeEnv(Environment):
    def __init__(self, stem_length: int = 4, arm_length: int = 3, step_limit: int = 20):
        super().__init__()
        self.geometry = TMazeGeometry(stem_length, arm_length, step_limit)
        self.state: Optional[TMazeState] = None

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state, observations = tmaze_reset(rng, geometry=self.geometry)
        return observations

    def step(self, joint_action) -> StepResult:
        if self.state is None:
            raise ContractViolation("reset the environment before stepping it")
        self.state, result = tmaze_step(self.state, joint_action)
        return result

    def action_mask(self) -> np.ndarray:
        if self.state is None:
            raise ContractViolation("reset the environment before asking for legal actions")
        return legal_actions(self.state)

    def render(self) -> str:
        return render_ascii(self.state)

    def metadata(self) -> EnvMeta:
        return EnvMeta(
            name="tmaze",
            n_agents=2,
            action_count=ACTION_COUNT,
            obs_dim=OBS_DIM,
            step_limit=self.geometry.step_limit,
            geometry=self.geometry.as_dict(),
        )
