import numpy as np
import pytest

from services.dataset import record
from services.environments import EnvironmentFactory
from services.errors import ContractViolation
from services.matrix_game import MatrixGameEnv
from services.scripted_policies import make_joint_policy
from services.tmaze import ORANGE, PHASE_OFFSET, TMazeEnv


def _mean_return(quality, epsilon=0.0, transitions=3000, seed=0):
    dataset = record(TMazeEnv(), make_joint_policy("tmaze", quality, epsilon), transitions,
                     np.random.default_rng(seed))
    return float(np.mean([ep.episode_return for ep in dataset.episodes])), dataset


def test_expert_always_succeeds():
    mean, dataset = _mean_return("expert")
    assert mean == 1.0
    # one color step, one step blocked behind the leader, eight moves for the rear agent
    assert {ep.length for ep in dataset.episodes} == {10}


def test_expert_works_on_other_geometries():
    env = TMazeEnv(stem_length=2, arm_length=5, step_limit=30)
    dataset = record(env, make_joint_policy("tmaze"), 500, np.random.default_rng(1))
    assert all(ep.episode_return == 1.0 for ep in dataset.episodes)


def test_uniform_and_fully_noisy_policies_rarely_succeed():
    uniform, _ = _mean_return("uniform")
    noisy, _ = _mean_return("noisy", epsilon=1.0)
    assert uniform < 0.1
    assert noisy < 0.1


def test_partial_noise_lies_between_uniform_and_expert():
    uniform, _ = _mean_return("uniform", transitions=6000)
    noisy, _ = _mean_return("noisy", epsilon=0.3, transitions=6000)
    assert uniform < noisy < 1.0


def test_memoryless_policy_falls_clearly_below_expert():
    memoryless, _ = _mean_return("memoryless", transitions=6000)
    assert 0.05 < memoryless < 0.6


def test_expert_picks_conventional_colors():
    policy = make_joint_policy("tmaze")
    obs = np.zeros((2, 28))
    obs[:, PHASE_OFFSET] = 1.0
    assert policy.act(obs, np.random.default_rng(0)).tolist() == [ORANGE, 1]


def test_uniform_policy_respects_the_action_mask():
    policy = make_joint_policy("tmaze", "uniform")
    mask = np.zeros((2, 5), dtype=bool)
    mask[:, :2] = True
    rng = np.random.default_rng(0)
    picks = np.array([policy.act(np.zeros((2, 28)), rng, mask) for _ in range(200)])
    assert set(picks.reshape(-1).tolist()) == {0, 1}


def test_description_records_policy_and_epsilon():
    assert make_joint_policy("tmaze", "noisy", 0.3).describe() == {"policy": "noisy", "epsilon": 0.3}
    assert make_joint_policy("tmaze", "expert", 0.3).describe() == {"policy": "expert", "epsilon": 0.0}


def test_unknown_qualities_and_environments_are_rejected():
    with pytest.raises(ContractViolation):
        make_joint_policy("tmaze", "clever")
    with pytest.raises(ContractViolation):
        make_joint_policy("gridworld")
    with pytest.raises(ContractViolation):
        make_joint_policy("matrix", "memoryless")
    with pytest.raises(ContractViolation):
        make_joint_policy("tmaze", "noisy", epsilon=1.5)


def test_matrix_expert_coordinates_on_the_best_cell():
    payoff = [[0.0, 2.0], [1.0, 0.0]]
    dataset = record(MatrixGameEnv(payoff), make_joint_policy("matrix", payoff=payoff), 20,
                     np.random.default_rng(0))
    assert all(ep.actions.tolist() == [[0, 1]] for ep in dataset.episodes)
    assert all(ep.episode_return == 2.0 for ep in dataset.episodes)


def test_policy_and_environment_must_agree():
    with pytest.raises(ContractViolation):
        record(MatrixGameEnv(), make_joint_policy("tmaze"), 5, np.random.default_rng(0))


def test_factory_lists_and_builds_environments():
    assert EnvironmentFactory.get_available_envs() == ["matrix", "tmaze"]
    assert isinstance(EnvironmentFactory.create_env("tmaze", stem_length=2), TMazeEnv)
    with pytest.raises(ContractViolation):
        EnvironmentFactory.create_env("gridworld")


def test_factory_checks_dimension_compatibility():
    tmaze = TMazeEnv().metadata()
    EnvironmentFactory.check_compatible(tmaze, TMazeEnv(stem_length=6).metadata())
    EnvironmentFactory.check_compatible(tmaze, None)
    with pytest.raises(ContractViolation):
        EnvironmentFactory.check_compatible(tmaze, MatrixGameEnv().metadata())
