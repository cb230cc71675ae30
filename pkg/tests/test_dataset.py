import struct
import zlib

import numpy as np
import pytest

from conftest import make_random_dataset
from services.container import MAGIC
from services.dataset import (
    Dataset,
    Episode,
    compute_stats,
    load_dataset,
    record,
    sample_batch,
    save_dataset,
    subsample_uniform,
)
from services.errors import (
    BadMagicError,
    ChecksumError,
    ContractViolation,
    DatasetLoadError,
    PayloadFormatError,
    PrecisionMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from services.scripted_policies import make_joint_policy
from services.tmaze import TMazeEnv


def _episodes_equal(a: Episode, b: Episode) -> bool:
    return (
        np.array_equal(a.observations, b.observations)
        and np.array_equal(a.actions, b.actions)
        and np.array_equal(a.rewards, b.rewards)
        and a.terminal == b.terminal
    )


def test_target_of_one_keeps_one_whole_episode():
    dataset = record(TMazeEnv(), make_joint_policy("tmaze"), 1, np.random.default_rng(0), seed=0)
    assert dataset.meta.episode_count == 1
    assert dataset.transition_count == dataset.episodes[0].length == 10
    assert dataset.meta.generator == {"policy": "expert", "epsilon": 0.0}


def test_recorded_steps_hold_pre_step_observations():
    dataset = record(TMazeEnv(), make_joint_policy("tmaze"), 1, np.random.default_rng(0))
    episode = dataset.episodes[0]
    assert episode.observations.shape == (10, 2, 28)
    assert episode.observations[0, :, 27].tolist() == [1.0, 1.0]
    assert episode.actions[0].tolist() == [0, 1]
    assert episode.rewards[-1] == 1.0 and episode.rewards[:-1].sum() == 0.0


def test_save_then_load_is_byte_identical(tmp_path):
    rng = np.random.default_rng(42)
    for index in range(50):
        dataset = make_random_dataset(rng, episodes=int(rng.integers(1, 6)))
        path = save_dataset(dataset, tmp_path / f"ds{index}.oryx")
        loaded = load_dataset(path)
        assert loaded.meta == dataset.meta
        assert all(_episodes_equal(a, b) for a, b in zip(loaded.episodes, dataset.episodes))
        again = save_dataset(loaded, tmp_path / f"again{index}.oryx")
        assert again.read_bytes() == path.read_bytes()


def test_float32_files_round_trip_under_float32(tmp_path):
    dataset = make_random_dataset(np.random.default_rng(1), precision="float32")
    path = save_dataset(dataset, tmp_path / "f32.oryx")
    loaded = load_dataset(path, precision="float32")
    assert np.allclose(loaded.episodes[0].rewards, dataset.episodes[0].rewards, atol=1e-6)
    with pytest.raises(PrecisionMismatchError):
        load_dataset(path)


def test_precision_follows_the_environment(tmp_path, monkeypatch):
    path = save_dataset(make_random_dataset(np.random.default_rng(2)), tmp_path / "f64.oryx")
    monkeypatch.setenv("ORYX_PRECISION", "float32")
    with pytest.raises(PrecisionMismatchError):
        load_dataset(path)


@pytest.fixture
def saved(tmp_path, random_dataset):
    path = save_dataset(random_dataset, tmp_path / "data.oryx")
    return path, path.read_bytes()


def test_bad_magic_is_reported(saved):
    path, data = saved
    path.write_bytes(b"NOTORYX" + data[len(MAGIC):])
    with pytest.raises(BadMagicError):
        load_dataset(path)


def test_version_mismatch_is_reported(saved):
    path, data = saved
    offset = len(MAGIC)
    path.write_bytes(data[:offset] + (2).to_bytes(2, "little") + data[offset + 2:])
    with pytest.raises(VersionMismatchError):
        load_dataset(path)


@pytest.mark.parametrize("keep", [3, 10, 40, -9])
def test_truncation_is_reported(saved, keep):
    path, data = saved
    path.write_bytes(data[:keep])
    with pytest.raises(TruncatedFileError):
        load_dataset(path)


def test_corrupted_payload_fails_the_checksum(saved):
    path, data = saved
    corrupted = bytearray(data)
    # lowest mantissa byte of the last reward
    corrupted[-4 - 8] ^= 0xFF
    path.write_bytes(bytes(corrupted))
    with pytest.raises(ChecksumError):
        load_dataset(path)


def test_corrupted_checksum_is_reported(saved):
    path, data = saved
    path.write_bytes(data[:-1] + bytes([data[-1] ^ 0x01]))
    with pytest.raises(ChecksumError):
        load_dataset(path)


def _first_episode_offset(data):
    header_length = struct.unpack_from("<I", data, len(MAGIC) + 2)[0]
    return len(MAGIC) + 6 + header_length


def test_corrupted_episode_length_fails_the_checksum(saved):
    path, data = saved
    corrupted = bytearray(data)
    corrupted[_first_episode_offset(data)] ^= 0x01
    path.write_bytes(bytes(corrupted))
    with pytest.raises(ChecksumError):
        load_dataset(path)


def test_nan_written_into_a_reward_fails_the_checksum(saved):
    path, data = saved
    corrupted = data[:-12] + struct.pack("<d", float("nan")) + data[-4:]
    path.write_bytes(corrupted)
    with pytest.raises(ChecksumError) as info:
        load_dataset(path)
    assert isinstance(info.value, DatasetLoadError)


def test_invalid_records_with_a_valid_checksum_are_load_errors(saved):
    path, data = saved
    body = data[:-12] + struct.pack("<d", float("nan"))
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    with pytest.raises(PayloadFormatError):
        load_dataset(path)


def test_subsample_keeps_whole_episodes_up_to_the_target():
    dataset = make_random_dataset(np.random.default_rng(3), episodes=20)
    for target in (1, 7, dataset.transition_count // 2, dataset.transition_count):
        sub = subsample_uniform(dataset, target, seed=5)
        assert sub.transition_count >= target
        assert sub.transition_count - sub.episodes[-1].length < target
        assert all(any(ep is orig for orig in dataset.episodes) for ep in sub.episodes)
        assert sub.meta.generator["subsample"] == {"seed": 5, "target_transitions": target}


def test_subsample_is_seeded():
    dataset = make_random_dataset(np.random.default_rng(4), episodes=15)
    a = subsample_uniform(dataset, 10, seed=1)
    b = subsample_uniform(dataset, 10, seed=1)
    assert [id(ep) for ep in a.episodes] == [id(ep) for ep in b.episodes]


def test_subsample_beyond_the_dataset_is_rejected(random_dataset):
    with pytest.raises(ContractViolation):
        subsample_uniform(random_dataset, random_dataset.transition_count + 1, seed=0)


def _dataset_with_returns(returns):
    episodes = [
        Episode(np.zeros((1, 2, 3)), np.zeros((1, 2), dtype=np.uint32), np.array([r]))
        for r in returns
    ]
    meta = make_random_dataset(np.random.default_rng(0), episodes=1, n_agents=2, obs_dim=3).meta
    return Dataset(meta.model_copy(update={"transition_count": len(returns), "episode_count": len(returns)}),
                   episodes)


def test_subsample_includes_each_episode_equally_often():
    dataset = _dataset_with_returns([float(r) for r in range(10)])
    seeds = range(200)
    counts = np.zeros(10)
    for seed in seeds:
        sub = subsample_uniform(dataset, 5, seed=seed)
        assert sub.transition_count == 5
        for ep in sub.episodes:
            counts[int(ep.rewards[0])] += 1
    frequencies = counts / len(seeds)
    # each frequency has a standard error near 0.035 around one half
    assert np.all(np.abs(frequencies - 0.5) < 0.15), frequencies


@pytest.mark.parametrize("seed", [0, 1, 7])
def test_full_subsample_keeps_the_statistics(seed):
    dataset = make_random_dataset(np.random.default_rng(11), episodes=25)
    sub = subsample_uniform(dataset, dataset.transition_count, seed=seed)
    assert compute_stats(sub) == compute_stats(dataset)


def test_stats_of_hand_made_returns():
    stats = compute_stats(_dataset_with_returns([0.0, 1.0, 1.0, 2.0]))
    assert (stats.mean_return, stats.min_return, stats.max_return) == (1.0, 0.0, 2.0)
    assert stats.sample_count == 4 and stats.episode_count == 4
    assert sum(stats.histogram_counts) == 4
    assert len(stats.histogram_edges) == len(stats.histogram_counts) + 1


def test_stats_of_identical_returns():
    stats = compute_stats(_dataset_with_returns([0.1] * 7))
    assert stats.min_return == stats.mean_return == stats.max_return == 0.1


def test_sample_of_length_one_is_a_single_start_step(random_dataset):
    batch = sample_batch(random_dataset, 16, 1, np.random.default_rng(0))
    assert batch.observations.shape == (16, 1, 3, 5)
    assert batch.mask.all() and batch.starts.all()


def test_windows_never_cross_episodes():
    dataset = make_random_dataset(np.random.default_rng(5), episodes=8, max_length=5)
    for ep_index, episode in enumerate(dataset.episodes):
        episode.observations[:] = ep_index
    batch = sample_batch(dataset, 200, 6, np.random.default_rng(1))
    for row in range(200):
        real = batch.observations[row][batch.mask[row]]
        assert len(np.unique(real)) == 1
        first = int(np.argmax(batch.mask[row]))
        assert batch.starts[row].sum() == 1 and batch.starts[row, first]
        assert not batch.mask[row, :first].any()
        assert np.all(batch.observations[row, :first] == 0)


def test_windows_end_at_uniformly_drawn_transitions():
    episodes = [
        Episode(np.full((length, 1, 1), float(i)), np.zeros((length, 1), dtype=np.uint32), np.zeros(length))
        for i, length in enumerate((1, 3))
    ]
    meta = make_random_dataset(np.random.default_rng(0), episodes=1, n_agents=1, obs_dim=1).meta
    dataset = Dataset(meta.model_copy(update={"transition_count": 4, "episode_count": 2}), episodes)
    batch = sample_batch(dataset, 8000, 2, np.random.default_rng(2))
    from_first = np.mean(batch.observations[:, -1, 0, 0] == 0.0)
    assert from_first == pytest.approx(0.25, abs=0.02)


def test_terminal_flag_marks_the_last_step_only():
    dataset = make_random_dataset(np.random.default_rng(6), episodes=6)
    for episode in dataset.episodes:
        episode.terminal = True
    batch = sample_batch(dataset, 100, 4, np.random.default_rng(3))
    assert not batch.terminals[:, :-1].any()


def test_invalid_episodes_and_batches_are_rejected(random_dataset):
    with pytest.raises(ContractViolation):
        Episode(np.zeros((2, 1, 1)), np.zeros((2, 1), dtype=np.uint32), np.array([0.0, np.nan]))
    with pytest.raises(ContractViolation):
        Episode(np.zeros((0, 1, 1)), np.zeros((0, 1), dtype=np.uint32), np.zeros(0))
    with pytest.raises(ContractViolation):
        sample_batch(random_dataset, 0, 3, np.random.default_rng(0))
