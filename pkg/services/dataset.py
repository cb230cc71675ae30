"""
Offline dataset lifecycle: recording, persistence, subsampling, statistics
and sequence-window sampling for training.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import torch

from models.schemas import DatasetMeta, DatasetStats, EnvMeta
from .container import BodyReader, read_container, write_container
from .errors import ContractViolation, HeaderFormatError, PayloadFormatError
from .numerics import resolve_precision

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 20
_EPISODE_PREFIX = struct.Struct("<IB")
_FLOAT_CODES = {"float64": "<f8", "float32": "<f4"}


@dataclass
class Episode:
    observations: np.ndarray  # (length, n, obs_dim)
    actions: np.ndarray  # (length, n) uint32
    rewards: np.ndarray  # (length,)
    terminal: bool = True

    def __post_init__(self):
        length = len(self.rewards)
        if length == 0:
            raise ContractViolation("an episode needs at least one step")
        if self.observations.ndim != 3 or self.observations.shape[0] != length:
            raise ContractViolation(
                f"observations shaped {self.observations.shape}, expected ({length}, n, obs_dim)"
            )
        if self.actions.shape != self.observations.shape[:2]:
            raise ContractViolation(f"actions shaped {self.actions.shape}, expected {self.observations.shape[:2]}")
        if not np.isfinite(self.rewards).all():
            raise ContractViolation("episode rewards must be finite")

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))


@dataclass
class Dataset:
    meta: DatasetMeta
    episodes: List[Episode] = field(default_factory=list)

    def __post_init__(self):
        total = sum(ep.length for ep in self.episodes)
        if total != self.meta.transition_count or len(self.episodes) != self.meta.episode_count:
            raise ContractViolation(
                f"meta declares {self.meta.transition_count} transitions in {self.meta.episode_count} episodes, "
                f"found {total} in {len(self.episodes)}"
            )

    @property
    def transition_count(self) -> int:
        return self.meta.transition_count

    @property
    def n_agents(self) -> int:
        return self.meta.n_agents

    @property
    def obs_dim(self) -> int:
        return self.meta.env.obs_dim


def _with_episodes(meta: DatasetMeta, episodes: List[Episode], **updates) -> Dataset:
    new_meta = meta.model_copy(update={
        "transition_count": sum(ep.length for ep in episodes),
        "episode_count": len(episodes),
        **updates,
    })
    return Dataset(new_meta, episodes)


def record(env, policy, target_transitions: int, rng: np.random.Generator, seed: int = 0,
           precision: Optional[str] = None) -> Dataset:
    """Roll out whole episodes until at least target_transitions are stored"""
    if target_transitions < 1:
        raise ContractViolation("target_transitions must be at least 1")
    env_meta: EnvMeta = env.metadata()
    if policy.n_agents != env_meta.n_agents:
        raise ContractViolation(f"policy drives {policy.n_agents} agents, environment has {env_meta.n_agents}")
    if policy.action_count != env_meta.action_count:
        raise ContractViolation(
            f"policy emits {policy.action_count} actions, environment accepts {env_meta.action_count}"
        )

    episodes: List[Episode] = []
    total = 0
    while total < target_transitions:
        observations = env.reset(rng)
        policy.reset()
        obs_steps, act_steps, rew_steps = [], [], []
        while True:
            joint = policy.act(observations, rng, env.action_mask())
            result = env.step(joint)
            obs_steps.append(observations)
            act_steps.append(joint)
            rew_steps.append(result.reward)
            observations = result.observations
            if result.terminal:
                break
        episode = Episode(
            observations=np.asarray(obs_steps, dtype=np.float64),
            actions=np.asarray(act_steps, dtype=np.uint32),
            rewards=np.asarray(rew_steps, dtype=np.float64),
            terminal=True,
        )
        episodes.append(episode)
        total += episode.length

    meta = DatasetMeta(
        env=env_meta,
        n_agents=env_meta.n_agents,
        transition_count=total,
        episode_count=len(episodes),
        seed=seed,
        generator=policy.describe(),
        precision=resolve_precision(precision),
    )
    logger.info(f"Recorded {len(episodes)} episodes ({total} transitions) with {meta.generator}")
    return Dataset(meta, episodes)


def subsample_uniform(dataset: Dataset, target_transitions: int, seed: int) -> Dataset:
    """Shuffle episodes and keep whole ones until the target is reached (inclusive)"""
    if target_transitions > dataset.transition_count:
        raise ContractViolation(
            f"target of {target_transitions} transitions exceeds the {dataset.transition_count} available"
        )
    if target_transitions < 1:
        raise ContractViolation("target_transitions must be at least 1")

    order = np.random.default_rng(seed).permutation(len(dataset.episodes))
    kept: List[Episode] = []
    total = 0
    for index in order:
        kept.append(dataset.episodes[index])
        total += dataset.episodes[index].length
        if total >= target_transitions:
            break

    generator = dict(dataset.meta.generator)
    generator["subsample"] = {"seed": seed, "target_transitions": target_transitions}
    return _with_episodes(dataset.meta, kept, generator=generator)


def compute_stats(dataset: Dataset) -> DatasetStats:
    if not dataset.episodes:
        raise ContractViolation("statistics need a non-empty dataset")
    returns = np.array([ep.episode_return for ep in dataset.episodes], dtype=np.float64)
    low, high = float(returns.min()), float(returns.max())
    # exact summation keeps the mean independent of episode order
    mean = float(np.clip(math.fsum(returns) / len(returns), low, high))
    counts, edges = np.histogram(returns, bins=HISTOGRAM_BINS)
    return DatasetStats(
        sample_count=dataset.transition_count,
        episode_count=len(dataset.episodes),
        mean_return=mean,
        max_return=high,
        min_return=low,
        histogram_counts=[int(c) for c in counts],
        histogram_edges=[float(e) for e in edges],
    )


def _encode_episodes(dataset: Dataset) -> bytes:
    float_code = _FLOAT_CODES[dataset.meta.precision]
    parts = []
    for episode in dataset.episodes:
        parts.append(_EPISODE_PREFIX.pack(episode.length, 1 if episode.terminal else 0))
        parts.append(np.ascontiguousarray(episode.observations, dtype=float_code).tobytes())
        parts.append(np.ascontiguousarray(episode.actions, dtype="<u4").tobytes())
        parts.append(np.ascontiguousarray(episode.rewards, dtype=float_code).tobytes())
    return b"".join(parts)


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    header = dataset.meta.model_dump(mode="json")
    path = write_container(path, header, _encode_episodes(dataset))
    logger.debug(f"Saved dataset to {path}")
    return path


def _declared_body_size(header: dict) -> Optional[int]:
    """Payload bytes implied by a dataset header, or None if the header is not a dataset"""
    try:
        meta = DatasetMeta.model_validate(header)
    except ValueError:
        return None
    width = np.dtype(_FLOAT_CODES[meta.precision]).itemsize
    per_step = meta.n_agents * meta.env.obs_dim * width + meta.n_agents * 4 + width
    return meta.episode_count * _EPISODE_PREFIX.size + meta.transition_count * per_step


def _episode_decoder(source: str):
    def decode(header: dict, body: bytes) -> Dataset:
        try:
            meta = DatasetMeta.model_validate(header)
        except ValueError as exc:
            raise HeaderFormatError(f"{source}: header is not a dataset description ({exc})") from exc

        float_dtype = np.dtype(_FLOAT_CODES[meta.precision])
        n, obs_dim = meta.n_agents, meta.env.obs_dim
        reader = BodyReader(body, source)
        episodes = []
        try:
            for _ in range(meta.episode_count):
                length, terminal = reader.unpack(_EPISODE_PREFIX)
                obs = np.frombuffer(reader.take(length * n * obs_dim * float_dtype.itemsize), dtype=float_dtype)
                actions = np.frombuffer(reader.take(length * n * 4), dtype="<u4")
                rewards = np.frombuffer(reader.take(length * float_dtype.itemsize), dtype=float_dtype)
                episodes.append(Episode(
                    observations=obs.reshape(length, n, obs_dim).astype(np.float64),
                    actions=actions.reshape(length, n).astype(np.uint32),
                    rewards=rewards.astype(np.float64),
                    terminal=bool(terminal),
                ))
            reader.finish()
            return Dataset(meta, episodes)
        except ContractViolation as exc:
            raise PayloadFormatError(f"{source}: episode {len(episodes)}: {exc}") from exc

    return decode


def load_dataset(path: Union[str, Path], precision: Optional[str] = None) -> Dataset:
    """Load and fully validate a dataset; no partial dataset is ever returned.

    ``precision`` defaults to ORYX_PRECISION; a file written with a different
    payload width is rejected rather than cast.
    """
    precision = resolve_precision(precision)
    _, dataset = read_container(path, _episode_decoder(str(path)), precision=precision,
                                body_size=_declared_body_size)
    return dataset


@dataclass
class SequenceBatch:
    observations: np.ndarray  # (B, L, n, obs_dim)
    actions: np.ndarray  # (B, L, n)
    rewards: np.ndarray  # (B, L)
    terminals: np.ndarray  # (B, L) bool
    starts: np.ndarray  # (B, L) bool, episode (or window) start
    mask: np.ndarray  # (B, L) bool, real (non-pad) steps

    @property
    def batch_size(self) -> int:
        return self.rewards.shape[0]

    @property
    def sequence_length(self) -> int:
        return self.rewards.shape[1]

    def to_torch(self, dtype: torch.dtype = torch.float64) -> "TorchBatch":
        return TorchBatch(
            observations=torch.as_tensor(self.observations, dtype=dtype),
            actions=torch.as_tensor(self.actions.astype(np.int64)),
            rewards=torch.as_tensor(self.rewards, dtype=dtype),
            terminals=torch.as_tensor(self.terminals),
            starts=torch.as_tensor(self.starts),
            mask=torch.as_tensor(self.mask),
        )


@dataclass
class TorchBatch:
    observations: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor
    terminals: torch.Tensor
    starts: torch.Tensor
    mask: torch.Tensor


def sample_batch(dataset: Dataset, batch_size: int, sequence_length: int,
                 rng: np.random.Generator) -> SequenceBatch:
    """Sample windows that end at a uniformly drawn transition.

    Each window holds the L steps up to and including the drawn transition;
    windows near an episode start are front-padded with masked zero steps.
    """
    if not dataset.episodes:
        raise ContractViolation("cannot sample from an empty dataset")
    if batch_size < 1 or sequence_length < 1:
        raise ContractViolation("batch_size and sequence_length must be at least 1")

    lengths = np.array([ep.length for ep in dataset.episodes])
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    drawn = rng.integers(0, offsets[-1], size=batch_size)
    episode_ids = np.searchsorted(offsets, drawn, side="right") - 1

    n, obs_dim = dataset.n_agents, dataset.obs_dim
    L = sequence_length
    batch = SequenceBatch(
        observations=np.zeros((batch_size, L, n, obs_dim)),
        actions=np.zeros((batch_size, L, n), dtype=np.int64),
        rewards=np.zeros((batch_size, L)),
        terminals=np.zeros((batch_size, L), dtype=bool),
        starts=np.zeros((batch_size, L), dtype=bool),
        mask=np.zeros((batch_size, L), dtype=bool),
    )
    for row, (episode_id, global_index) in enumerate(zip(episode_ids, drawn)):
        episode = dataset.episodes[episode_id]
        last = int(global_index - offsets[episode_id])
        first = max(0, last - L + 1)
        pad = L - (last - first + 1)
        steps = slice(first, last + 1)

        batch.observations[row, pad:] = episode.observations[steps]
        batch.actions[row, pad:] = episode.actions[steps]
        batch.rewards[row, pad:] = episode.rewards[steps]
        batch.mask[row, pad:] = True
        batch.starts[row, pad] = True
        if episode.terminal and last == episode.length - 1:
            batch.terminals[row, -1] = True
    return batch
