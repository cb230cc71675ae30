"""
Oryx network: retention encoder over per-agent observations and a dual-head
retention decoder (policy logits and per-action Q-values) conditioned on the
actions of preceding agents.

Training runs the chunkwise form over whole windows; execution runs the
recurrent form one timestep at a time through ``act_autoregressive``.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from models.schemas import ModelConfig, RetentionConfig
from .errors import ContractViolation
from .numerics import resolve_dtype
from .retention import RetentionState, SequenceLayout, retention_recurrent, retention_sequence

logger = logging.getLogger(__name__)

PLACEHOLDER_ACTION = -1.0


def _group_norm(y: torch.Tensor, num_heads: int, eps: float = 1e-5) -> torch.Tensor:
    shape = y.shape
    heads = y.reshape(*shape[:-1], num_heads, shape[-1] // num_heads)
    return F.layer_norm(heads, heads.shape[-1:], eps=eps).reshape(shape)


class RetentionBlock(nn.Module):
    """Pre-norm retention sublayer followed by a GELU feed-forward sublayer"""

    def __init__(self, cfg: RetentionConfig, ffn_multiplier: int = 4, causal_agents: bool = False):
        super().__init__()
        dim = cfg.embed_dim
        self.cfg = cfg
        self.causal_agents = causal_agents
        self.norm_in = nn.LayerNorm(dim)
        self.query = nn.Linear(dim, dim, bias=False)
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim, bias=False)
        self.head_gain = nn.Parameter(torch.ones(dim))
        self.out_proj = nn.Linear(dim, dim)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_multiplier * dim),
            nn.GELU(),
            nn.Linear(ffn_multiplier * dim, dim),
        )

    def _project(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h = self.norm_in(x)
        return self.query(h) * self.cfg.head_dim ** -0.5, self.key(h), self.value(h)

    def _mix(self, x: torch.Tensor, retained: torch.Tensor) -> torch.Tensor:
        x = x + self.out_proj(_group_norm(retained, self.cfg.num_heads) * self.head_gain)
        return x + self.ffn(self.norm_ffn(x))

    def forward(self, x: torch.Tensor, layout: SequenceLayout,
                state: Optional[RetentionState] = None) -> Tuple[torch.Tensor, RetentionState]:
        q, k, v = self._project(x)
        retained, state = retention_sequence(q, k, v, self.cfg, layout, state, causal_agents=self.causal_agents)
        return self._mix(x, retained), state

    def step(self, x_t: torch.Tensor, state: RetentionState, reset) -> Tuple[torch.Tensor, RetentionState]:
        q, k, v = self._project(x_t)
        retained, state = retention_recurrent(q, k, v, state, self.cfg, reset, causal_agents=self.causal_agents)
        return self._mix(x_t, retained), state


@dataclass
class ModelOutput:
    logits: torch.Tensor  # (B, T, n, A)
    q_values: torch.Tensor  # (B, T, n, A)
    embeddings: torch.Tensor  # (B, T, n, E)

    def policy_probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)


@dataclass
class ExecState:
    encoder: List[RetentionState]
    decoder: List[RetentionState]
    timestep: int = 0
    last_actions: Optional[torch.Tensor] = None  # (B,) last agent's action at the previous timestep


def action_context_width(action_count: int) -> int:
    return 2 * (action_count + 1)


def shift_actions(actions: torch.Tensor, action_count: int, autoregressive: bool = True,
                  dtype: torch.dtype = torch.float64, resets: Optional[torch.Tensor] = None,
                  previous: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Action conditioning per token, shape (..., n, 2 * (action_count + 1)).

    The first block is the one-hot action of agent j - 1 at the same
    timestep, the start token (index ``action_count``) for agent 0. The
    second block is the last agent's action at the previous timestep, shared
    by every agent, so tokens at t see the complete joint actions of all
    earlier timesteps. With ``resets`` (shaped like ``actions[..., 0]``) the
    axis before the agents is time and segment starts get the start token.
    Without it ``previous`` supplies the carried action per row; None or a
    negative entry means start. Without autoregression every entry is the
    constant placeholder -1.
    """
    actions = torch.as_tensor(actions).long()
    if actions.numel() and (actions.min() < 0 or actions.max() >= action_count):
        raise ContractViolation(f"actions must lie in [0, {action_count})")
    one_hot = F.one_hot(actions, action_count + 1).to(dtype)
    start = torch.zeros_like(one_hot[..., :1, :])
    start[..., action_count] = 1.0
    within = torch.cat([start, one_hot[..., :-1, :]], dim=-2)

    last = actions[..., -1]
    if resets is not None:
        resets = torch.as_tensor(resets, dtype=torch.bool)
        if tuple(resets.shape) != tuple(last.shape):
            raise ContractViolation(f"reset flags shaped {tuple(resets.shape)}, expected {tuple(last.shape)}")
        carried = torch.full_like(last, action_count)
        carried[..., 1:] = last[..., :-1]
        carried = carried.masked_fill(resets, action_count)
    elif previous is None:
        carried = torch.full_like(last, action_count)
    else:
        carried = torch.as_tensor(previous).long().reshape(last.shape)
        carried = torch.where(carried < 0, torch.full_like(carried, action_count), carried)
    carried_hot = F.one_hot(carried, action_count + 1).to(dtype).unsqueeze(-2).expand_as(within)

    shifted = torch.cat([within, carried_hot], dim=-1)
    if not autoregressive:
        shifted = torch.full_like(shifted, PLACEHOLDER_ACTION)
    return shifted


def _carried_actions(exec_state: ExecState, batch: int, reset) -> torch.Tensor:
    previous = exec_state.last_actions
    if previous is None:
        previous = torch.full((batch,), -1, dtype=torch.long)
    return previous.masked_fill(torch.as_tensor(reset, dtype=torch.bool).expand(batch), -1)


class OryxNetwork(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.retention_cfg = cfg.retention_config()
        dim, actions = cfg.embed_dim, cfg.action_count

        self.observation_embedding = nn.Sequential(nn.Linear(cfg.obs_dim, dim), nn.GELU())
        self.encoder_blocks = nn.ModuleList(
            RetentionBlock(self.retention_cfg, cfg.ffn_multiplier, causal_agents=False)
            for _ in range(cfg.num_blocks)
        )
        self.action_embedding = nn.Sequential(nn.Linear(dim + action_context_width(actions), dim), nn.GELU())
        self.decoder_blocks = nn.ModuleList(
            RetentionBlock(self.retention_cfg, cfg.ffn_multiplier, causal_agents=True)
            for _ in range(cfg.num_blocks)
        )
        # heads share the trunk and split at the final projection
        self.trunk = nn.Sequential(nn.Linear(dim, dim), nn.GELU())
        self.policy_head = nn.Linear(dim, actions)
        self.q_head = nn.Linear(dim, actions)
        self.to(resolve_dtype(cfg.precision))

    @property
    def dtype(self) -> torch.dtype:
        return self.policy_head.weight.dtype

    def _check_observations(self, observations: torch.Tensor, resets: torch.Tensor):
        expected = (self.cfg.n_agents, self.cfg.obs_dim)
        if observations.dim() != 4 or tuple(observations.shape[2:]) != expected:
            raise ContractViolation(f"observations shaped {tuple(observations.shape)}, expected (B, T, *{expected})")
        if tuple(resets.shape) != tuple(observations.shape[:2]):
            raise ContractViolation(f"reset flags shaped {tuple(resets.shape)}, expected {tuple(observations.shape[:2])}")

    def encode(self, observations: torch.Tensor, resets: torch.Tensor) -> torch.Tensor:
        """(B, T, n, obs_dim) -> (B, T, n, embed_dim)"""
        self._check_observations(observations, resets)
        batch, steps, agents, _ = observations.shape
        layout = SequenceLayout.from_resets(resets, agents)
        x = self.observation_embedding(observations.reshape(batch, steps * agents, -1))
        for block in self.encoder_blocks:
            x, _ = block(x, layout)
        return x.reshape(batch, steps, agents, -1)

    def _heads(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.trunk(x)
        return self.policy_head(h), self.q_head(h)

    def decode(self, embeddings: torch.Tensor, shifted_actions: torch.Tensor, resets: torch.Tensor) -> ModelOutput:
        batch, steps, agents, dim = embeddings.shape
        if tuple(shifted_actions.shape) != (batch, steps, agents, action_context_width(self.cfg.action_count)):
            raise ContractViolation(
                f"shifted actions shaped {tuple(shifted_actions.shape)} do not align with embeddings "
                f"{tuple(embeddings.shape)}"
            )
        layout = SequenceLayout.from_resets(resets, agents)
        tokens = torch.cat([embeddings, shifted_actions], dim=-1).reshape(batch, steps * agents, -1)
        x = self.action_embedding(tokens)
        for block in self.decoder_blocks:
            x, _ = block(x, layout)
        logits, q_values = self._heads(x)
        shape = (batch, steps, agents, self.cfg.action_count)
        return ModelOutput(logits.reshape(shape), q_values.reshape(shape), embeddings)

    def forward(self, observations: torch.Tensor, actions: torch.Tensor, resets: torch.Tensor) -> ModelOutput:
        shifted = shift_actions(actions, self.cfg.action_count, self.cfg.autoregressive, self.dtype, resets=resets)
        return self.decode(self.encode(observations, resets), shifted, resets)

    def init_exec_state(self, batch_size: int = 1) -> ExecState:
        zeros = lambda: RetentionState.zeros(batch_size, self.retention_cfg, self.dtype)
        return ExecState(
            encoder=[zeros() for _ in self.encoder_blocks],
            decoder=[zeros() for _ in self.decoder_blocks],
        )

    def encode_step(self, observation_t: torch.Tensor, states: List[RetentionState],
                    reset) -> Tuple[torch.Tensor, List[RetentionState]]:
        """(B, n, obs_dim) for one timestep -> (B, n, embed_dim)"""
        if observation_t.dim() != 3 or tuple(observation_t.shape[1:]) != (self.cfg.n_agents, self.cfg.obs_dim):
            raise ContractViolation(f"observation shaped {tuple(observation_t.shape)}, expected (B, n, obs_dim)")
        x = self.observation_embedding(observation_t)
        new_states = []
        for block, state in zip(self.encoder_blocks, states):
            x, state = block.step(x, state, reset)
            new_states.append(state)
        return x, new_states

    def decode_step(self, embedding_t: torch.Tensor, shifted_t: torch.Tensor, states: List[RetentionState],
                    reset) -> Tuple[torch.Tensor, torch.Tensor, List[RetentionState]]:
        x = self.action_embedding(torch.cat([embedding_t, shifted_t], dim=-1))
        new_states = []
        for block, state in zip(self.decoder_blocks, states):
            x, state = block.step(x, state, reset)
            new_states.append(state)
        logits, q_values = self._heads(x)
        return logits, q_values, new_states

    def step(self, observation_t: torch.Tensor, actions_t: torch.Tensor, exec_state: ExecState,
             reset=None) -> Tuple[torch.Tensor, torch.Tensor, ExecState]:
        """Recurrent path for one timestep given the agents' actions at that timestep"""
        reset = exec_state.timestep == 0 if reset is None else reset
        actions_t = torch.as_tensor(actions_t).long()
        embedding, encoder = self.encode_step(observation_t, exec_state.encoder, reset)
        previous = _carried_actions(exec_state, actions_t.shape[0], reset)
        shifted = shift_actions(actions_t, self.cfg.action_count, self.cfg.autoregressive, self.dtype,
                                previous=previous)
        logits, q_values, decoder = self.decode_step(embedding, shifted, exec_state.decoder, reset)
        return logits, q_values, ExecState(encoder, decoder, exec_state.timestep + 1, actions_t[:, -1].clone())

    def replay(self, history: Sequence[Tuple[np.ndarray, np.ndarray]]) -> ExecState:
        """Execution state after running (observation, joint action) pairs from a fresh start"""
        exec_state = self.init_exec_state(1)
        with torch.no_grad():
            for observation, joint in history:
                obs = torch.as_tensor(np.asarray(observation), dtype=self.dtype).unsqueeze(0)
                actions = torch.as_tensor(np.asarray(joint), dtype=torch.long).unsqueeze(0)
                _, _, exec_state = self.step(obs, actions, exec_state)
        return exec_state


def _choose(scores: torch.Tensor, mode: str, rng: Optional[np.random.Generator]) -> torch.Tensor:
    if mode == "greedy":
        # argmax returns the first maximal index
        return torch.argmax(scores, dim=-1)
    if mode != "sample":
        raise ContractViolation(f"unknown action mode '{mode}'")
    if rng is None:
        raise ContractViolation("sampling needs an rng")
    probs = torch.softmax(scores, dim=-1).detach().cpu().numpy().astype(np.float64)
    picks = [rng.choice(len(row), p=row / row.sum()) for row in probs]
    return torch.as_tensor(picks, dtype=torch.long)


def act_autoregressive(network: OryxNetwork, observation, exec_state: ExecState, mode: str = "greedy",
                       rng: Optional[np.random.Generator] = None,
                       action_mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, ExecState]:
    """Choose a joint action for one timestep, agent by agent in index order.

    Agent j's distribution is read from a decoder pass whose tokens for
    agents before j carry the already chosen actions. The causal agent mask
    keeps the not-yet-chosen slots from influencing agent j. A final pass
    with the complete joint action advances the decoder state.
    """
    cfg = network.cfg
    obs = torch.as_tensor(np.asarray(observation), dtype=network.dtype)
    single = obs.dim() == 2
    if single:
        obs = obs.unsqueeze(0)
    batch, agents = obs.shape[:2]

    mask = None
    if action_mask is not None:
        mask = torch.as_tensor(np.asarray(action_mask), dtype=torch.bool)
        if single:
            mask = mask.unsqueeze(0)
        if tuple(mask.shape) != (batch, agents, cfg.action_count):
            raise ContractViolation(f"action mask shaped {tuple(mask.shape)}, expected {(batch, agents, cfg.action_count)}")

    reset = exec_state.timestep == 0
    with torch.no_grad():
        embedding, encoder = network.encode_step(obs, exec_state.encoder, reset)
        previous = _carried_actions(exec_state, batch, reset)
        actions = torch.zeros(batch, agents, dtype=torch.long)
        for agent in range(agents):
            shifted = shift_actions(actions, cfg.action_count, cfg.autoregressive, network.dtype, previous=previous)
            logits, q_values, _ = network.decode_step(embedding, shifted, exec_state.decoder, reset)
            scores = (q_values if cfg.act_on_q else logits)[:, agent]
            if mask is not None:
                scores = scores.masked_fill(~mask[:, agent], float("-inf"))
            actions[:, agent] = _choose(scores, mode, rng)
        shifted = shift_actions(actions, cfg.action_count, cfg.autoregressive, network.dtype, previous=previous)
        _, _, decoder = network.decode_step(embedding, shifted, exec_state.decoder, reset)

    joint = actions.numpy()
    next_state = ExecState(encoder, decoder, exec_state.timestep + 1, actions[:, -1].clone())
    return (joint[0] if single else joint), next_state


def build_network(cfg: ModelConfig, seed: int = 0) -> OryxNetwork:
    """Construct a network with parameters drawn from a seeded generator"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        network = OryxNetwork(cfg)
    logger.debug(f"Built network with {sum(p.numel() for p in network.parameters())} parameters")
    return network
