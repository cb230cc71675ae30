"""Multi-scale retention in parallel, recurrent and chunkwise form.

Tokens are laid out timestep-major: token ``t * n + j`` is agent ``j`` at
timestep ``t``. Decay advances once per timestep, so all agents of one
timestep share a decay exponent. ``causal_agents`` additionally hides later
agents of the same timestep (decoder self-retention).
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import torch

from models.schemas import RetentionConfig
from .errors import ContractViolation


def decay_schedule(num_heads: int, kappa_scaling: float) -> List[float]:
    """Per-head decays 1 - 2^(-5 - h), rescaled so their mean equals kappa_scaling"""
    base = [1.0 - 2.0 ** (-5 - h) for h in range(num_heads)]
    mean = sum(base) / num_heads
    return [min(1.0, b * kappa_scaling / mean) for b in base]


def head_decays(cfg: RetentionConfig, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    decays = cfg.decays if cfg.decays is not None else decay_schedule(cfg.num_heads, cfg.kappa_scaling)
    return torch.tensor(decays, dtype=dtype)


@dataclass(frozen=True)
class SequenceLayout:
    batch_size: int
    timesteps: int
    agents: int
    resets: torch.Tensor  # (B, T) bool, True where a new episode starts

    def __post_init__(self):
        if tuple(self.resets.shape) != (self.batch_size, self.timesteps):
            raise ContractViolation(
                f"reset flags shaped {tuple(self.resets.shape)}, expected {(self.batch_size, self.timesteps)}"
            )

    @classmethod
    def from_resets(cls, resets: torch.Tensor, agents: int) -> "SequenceLayout":
        batch_size, timesteps = resets.shape
        return cls(batch_size, timesteps, agents, resets.bool())

    @property
    def token_count(self) -> int:
        return self.timesteps * self.agents

    def timestep_index(self) -> torch.Tensor:
        return torch.arange(self.timesteps).repeat_interleave(self.agents)

    def agent_index(self) -> torch.Tensor:
        return torch.arange(self.agents).repeat(self.timesteps)

    def segment_ids(self) -> torch.Tensor:
        """(B, T) episode segment id; increments at every reset"""
        return torch.cumsum(self.resets.long(), dim=1)

    def slice(self, start: int, stop: int) -> "SequenceLayout":
        return SequenceLayout(self.batch_size, stop - start, self.agents, self.resets[:, start:stop])


@dataclass
class RetentionState:
    matrix: torch.Tensor  # (B, H, head_dim, head_dim)
    timestep: int = 0

    @classmethod
    def zeros(cls, batch_size: int, cfg: RetentionConfig, dtype: torch.dtype = torch.float64) -> "RetentionState":
        return cls(torch.zeros(batch_size, cfg.num_heads, cfg.head_dim, cfg.head_dim, dtype=dtype))


def _split_heads(x: torch.Tensor, num_heads: int) -> torch.Tensor:
    batch, tokens, dim = x.shape
    return x.view(batch, tokens, num_heads, dim // num_heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    batch, heads, tokens, head_dim = x.shape
    return x.transpose(1, 2).reshape(batch, tokens, heads * head_dim)


def _check_qkv(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, cfg: RetentionConfig, tokens: int):
    for name, tensor in (("q", q), ("k", k), ("v", v)):
        if tensor.dim() != 3 or tensor.shape[1] != tokens or tensor.shape[2] != cfg.embed_dim:
            raise ContractViolation(
                f"{name} shaped {tuple(tensor.shape)}, expected (B, {tokens}, {cfg.embed_dim})"
            )


def decay_mask(cfg: RetentionConfig, layout: SequenceLayout, causal_agents: bool = False,
               dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """D[b, h, i, m] = kappa_h^(t(i) - t(m)) within one episode segment, else 0"""
    kappa = head_decays(cfg, dtype)
    t_idx = layout.timestep_index()
    delta = t_idx[:, None] - t_idx[None, :]
    powers = kappa[:, None, None] ** delta.clamp(min=0).to(dtype)
    decay = torch.where(delta[None] >= 0, powers, torch.zeros((), dtype=dtype))

    if causal_agents:
        a_idx = layout.agent_index()
        allowed = (delta > 0) | ((delta == 0) & (a_idx[:, None] >= a_idx[None, :]))
        decay = decay * allowed[None].to(dtype)

    seg = layout.segment_ids().repeat_interleave(layout.agents, dim=1)
    same_segment = (seg[:, :, None] == seg[:, None, :]).to(dtype)
    return same_segment[:, None] * decay[None]


def retention_parallel(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, cfg: RetentionConfig,
                       layout: SequenceLayout, causal_agents: bool = False) -> torch.Tensor:
    """Attention-like form over the whole (B, T*n, dim) sequence"""
    _check_qkv(q, k, v, cfg, layout.token_count)
    if q.shape[0] != layout.batch_size:
        raise ContractViolation("batch size of q does not match the layout")

    mask = decay_mask(cfg, layout, causal_agents, q.dtype)
    qh, kh, vh = (_split_heads(x, cfg.num_heads) for x in (q, k, v))
    scores = (qh @ kh.transpose(-1, -2)) * mask
    return _merge_heads(scores @ vh)


def retention_recurrent(q_t: torch.Tensor, k_t: torch.Tensor, v_t: torch.Tensor, state: RetentionState,
                        cfg: RetentionConfig, reset: Union[bool, torch.Tensor],
                        causal_agents: bool = False) -> Tuple[torch.Tensor, RetentionState]:
    """One timestep (all n agent tokens) against the carried state"""
    batch, agents, _ = q_t.shape
    _check_qkv(q_t, k_t, v_t, cfg, agents)
    expected = (batch, cfg.num_heads, cfg.head_dim, cfg.head_dim)
    if tuple(state.matrix.shape) != expected:
        raise ContractViolation(f"retention state shaped {tuple(state.matrix.shape)}, expected {expected}")

    reset = torch.as_tensor(reset, dtype=torch.bool).expand(batch)
    kappa = head_decays(cfg, q_t.dtype)[None, :, None, None]
    previous = torch.where(reset[:, None, None, None], torch.zeros_like(state.matrix), state.matrix)
    decayed = kappa * previous

    qh, kh, vh = (_split_heads(x, cfg.num_heads) for x in (q_t, k_t, v_t))
    updated = decayed + kh.transpose(-1, -2) @ vh

    if causal_agents:
        intra = torch.tril(qh @ kh.transpose(-1, -2)) @ vh
        y = qh @ decayed + intra
    else:
        y = qh @ updated
    return _merge_heads(y), RetentionState(updated, state.timestep + 1)


def retention_chunkwise(q_c: torch.Tensor, k_c: torch.Tensor, v_c: torch.Tensor, state_in: RetentionState,
                        cfg: RetentionConfig, layout: SequenceLayout,
                        causal_agents: bool = False) -> Tuple[torch.Tensor, RetentionState]:
    """Parallel inside the chunk plus a decayed cross-chunk term from state_in"""
    if layout.timesteps > cfg.chunk_size:
        raise ContractViolation(f"chunk of {layout.timesteps} timesteps exceeds chunk_size {cfg.chunk_size}")
    inner = retention_parallel(q_c, k_c, v_c, cfg, layout, causal_agents)

    dtype = q_c.dtype
    kappa = head_decays(cfg, dtype)
    steps = layout.timesteps
    t_local = torch.arange(steps, dtype=dtype)
    seg = layout.segment_ids()

    # cross-chunk read: only while no reset has happened inside the chunk
    untouched = (seg == 0).to(dtype)
    cross_decay = kappa[:, None] ** (t_local + 1)[None]
    read = (untouched[:, None, :] * cross_decay[None]).repeat_interleave(layout.agents, dim=2)

    qh, kh, vh = (_split_heads(x, cfg.num_heads) for x in (q_c, k_c, v_c))
    cross = (qh @ state_in.matrix) * read[..., None]
    y = inner + _merge_heads(cross)

    # state after the last timestep: contributions from the final segment only
    in_last = (seg == seg[:, -1:]).to(dtype)
    write_decay = kappa[:, None] ** (steps - 1 - t_local)[None]
    write = (in_last[:, None, :] * write_decay[None]).repeat_interleave(layout.agents, dim=2)
    carried = (kappa ** steps)[None, :, None, None] * state_in.matrix * untouched[:, -1][:, None, None, None]
    state_out = kh.transpose(-1, -2) @ (vh * write[..., None]) + carried
    return y, RetentionState(state_out, state_in.timestep + steps)


def retention_sequence(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, cfg: RetentionConfig,
                       layout: SequenceLayout, state: Optional[RetentionState] = None,
                       chunk_size: Optional[int] = None,
                       causal_agents: bool = False) -> Tuple[torch.Tensor, RetentionState]:
    """Chunkwise retention over a whole sequence, carrying the state between chunks"""
    chunk_size = chunk_size or cfg.chunk_size
    if state is None:
        state = RetentionState.zeros(layout.batch_size, cfg, q.dtype)
    n = layout.agents
    outputs = []
    for start in range(0, layout.timesteps, chunk_size):
        stop = min(start + chunk_size, layout.timesteps)
        tokens = slice(start * n, stop * n)
        y, state = retention_chunkwise(
            q[:, tokens], k[:, tokens], v[:, tokens], state, cfg, layout.slice(start, stop), causal_agents
        )
        outputs.append(y)
    return torch.cat(outputs, dim=1), state
