"""
Offline training update: ICQ-weighted SARSA critic targets, counterfactual
per-agent advantages, exponentially weighted behavior cloning, and target
network management.

All agent-indexed quantities are computed in the permuted agent order drawn
for the update, so "preceding agents" always means preceding in that order.
"""

import copy
import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from models.schemas import HyperParams
from .dataset import SequenceBatch, TorchBatch
from .errors import ContractViolation, NumericError
from .network import OryxNetwork
from .numerics import OptimState, backward, init_optim_state, optimizer_step, param_set

logger = logging.getLogger(__name__)

PARTITION_TOLERANCE = 1e-9
PROBABILITY_TOLERANCE = 1e-6
METRIC_COLUMNS = ["step", "critic_loss", "policy_loss", "mean_abs_advantage", "weight_entropy", "wall_ms"]


@dataclass
class AdvantageEstimate:
    advantages: torch.Tensor  # (B, L, n)
    weights: torch.Tensor  # (B, L, n), zero outside the mask
    log_partition: torch.Tensor  # one entry per normalization group
    mask: torch.Tensor  # (B, L, n) bool
    grouping: str = "batch"

    def groups(self) -> List[torch.Tensor]:
        return _group_masks(self.mask, self.grouping)


@dataclass
class LossTerms:
    critic: torch.Tensor
    policy: torch.Tensor
    advantage: Optional[AdvantageEstimate]
    targets: torch.Tensor
    critic_mask: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.critic + self.policy


def _group_masks(mask: torch.Tensor, grouping: str) -> List[torch.Tensor]:
    """Boolean masks, one per normalization group, over (B, L, n)"""
    if grouping == "batch":
        return [mask]
    if grouping == "agent":
        groups = []
        for agent in range(mask.shape[-1]):
            group = torch.zeros_like(mask)
            group[..., agent] = mask[..., agent]
            groups.append(group)
        return groups
    raise ContractViolation(f"unknown partition grouping '{grouping}'")


def _token_mask(mask: Optional[torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    """Broadcast a (B, L) or (B, L, n) step mask to the (B, L, n) token grid"""
    if mask is None:
        return torch.ones(like.shape[:3], dtype=torch.bool)
    mask = mask.bool()
    if mask.dim() == 2:
        mask = mask[..., None].expand(*like.shape[:3])
    return mask


def critic_targets(q_next_selected: torch.Tensor, rewards: torch.Tensor, terminals: torch.Tensor,
                   hp: HyperParams, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Bootstrap targets per (t, agent) token.

    ``mask`` marks tokens that have a real next step to bootstrap from;
    terminal tokens and tokens outside the mask get target = r. With
    ``hp.use_icq`` the bootstrap value is re-weighted by a softmax of
    Q'/alpha_critic over each normalization group (scaled by the group size
    when ``scale_partition_by_batch`` is set), otherwise r + gamma * Q'.
    """
    q_next = q_next_selected.detach()
    reward = rewards.detach()[..., None].expand_as(q_next)
    terminal = terminals.bool()[..., None].expand_as(q_next)
    bootstrap = _token_mask(mask, q_next) & ~terminal

    targets = reward.clone()
    if not hp.use_icq:
        targets[bootstrap] = reward[bootstrap] + hp.gamma * q_next[bootstrap]
        return targets

    for group in _group_masks(bootstrap, hp.partition_grouping):
        count = int(group.sum())
        if count == 0:
            logger.warning("Empty bootstrap group in critic targets; its tokens keep target = r")
            continue
        weights = torch.softmax(q_next[group] / hp.alpha_critic, dim=0)
        scale = count if hp.scale_partition_by_batch else 1
        targets[group] = reward[group] + hp.gamma * scale * weights * q_next[group]
    return targets


def partition_weights(advantages: torch.Tensor, alpha: float, mask: torch.Tensor,
                      grouping: str = "batch"):
    """w = exp(A / alpha) / Z per normalization group, zero outside the mask"""
    scaled = advantages.detach() / alpha
    weights = torch.zeros_like(scaled)
    log_partition = []
    for group in _group_masks(mask, grouping):
        if not group.any():
            log_partition.append(torch.tensor(float("-inf"), dtype=scaled.dtype))
            continue
        values = scaled[group]
        log_z = torch.logsumexp(values, dim=0)
        weights[group] = torch.exp(values - log_z)
        log_partition.append(log_z)
    return weights, torch.stack(log_partition)


def check_partition(estimate: AdvantageEstimate, tolerance: Optional[float] = None):
    if tolerance is None:
        tolerance = PARTITION_TOLERANCE if estimate.weights.dtype == torch.float64 else 1e-5
    for index, group in enumerate(estimate.groups()):
        if not group.any():
            continue
        total = float(estimate.weights[group].double().sum())
        if abs(total - 1.0) > tolerance:
            raise ContractViolation(f"advantage weights of group {index} sum to {total!r}, expected 1")
        if bool((estimate.weights < 0).any()):
            raise ContractViolation("advantage weights must be non-negative")


def counterfactual_advantage(q_values: torch.Tensor, policy_probs: torch.Tensor, actions: torch.Tensor,
                             hp: HyperParams, mask: Optional[torch.Tensor] = None) -> AdvantageEstimate:
    """Per-agent counterfactual terms Q(a_j) - sum_a pi_j(a) Q(a), summed over
    preceding agents (cumulative mode) or kept per agent (marginal mode).

    The policy enters the baseline as a constant.
    """
    if q_values.shape != policy_probs.shape:
        raise ContractViolation(f"q_values {tuple(q_values.shape)} and policy_probs {tuple(policy_probs.shape)} differ")
    token_mask = _token_mask(mask, q_values)
    probs = policy_probs.detach()
    row_error = (probs.sum(dim=-1) - 1.0).abs()
    if bool((row_error[token_mask] > PROBABILITY_TOLERANCE).any()):
        raise ContractViolation("policy probabilities must sum to 1 on every token")

    taken = q_values.gather(-1, actions.long()[..., None]).squeeze(-1)
    baseline = (probs * q_values).sum(dim=-1)
    terms = taken - baseline
    if hp.advantage_mode == "cumulative":
        advantages = terms.cumsum(dim=-1)
    else:
        advantages = terms

    weights, log_partition = partition_weights(advantages, hp.alpha_policy, token_mask, hp.partition_grouping)
    estimate = AdvantageEstimate(advantages, weights, log_partition, token_mask, hp.partition_grouping)
    check_partition(estimate)
    return estimate


def policy_loss(logits: torch.Tensor, advantage: AdvantageEstimate, actions: torch.Tensor,
                hp: Optional[HyperParams] = None) -> torch.Tensor:
    """Advantage-weighted negative log-likelihood of the dataset actions.

    Weights are constants. Each normalization group contributes its weighted
    sum; groups are averaged so the scale does not depend on the grouping.
    """
    log_probs = F.log_softmax(logits, dim=-1).gather(-1, actions.long()[..., None]).squeeze(-1)
    weights = advantage.weights.detach()
    loss = -(weights * log_probs).sum()
    active = sum(1 for group in advantage.groups() if group.any())
    return loss / max(active, 1)


def weight_entropy(advantage: AdvantageEstimate) -> float:
    entropies = []
    for group in advantage.groups():
        if not group.any():
            continue
        w = advantage.weights[group]
        w = w[w > 0]
        entropies.append(float(-(w * torch.log(w)).sum()))
    return float(np.mean(entropies)) if entropies else 0.0


def permute_batch(batch: TorchBatch, order: np.ndarray) -> TorchBatch:
    index = torch.as_tensor(order, dtype=torch.long)
    return TorchBatch(
        observations=batch.observations.index_select(2, index),
        actions=batch.actions.index_select(2, index),
        rewards=batch.rewards,
        terminals=batch.terminals,
        starts=batch.starts,
        mask=batch.mask,
    )


def compute_losses(network: OryxNetwork, target_network: OryxNetwork, batch: TorchBatch, hp: HyperParams,
                   advantage: Optional[AdvantageEstimate] = None) -> LossTerms:
    """Critic and policy losses for one (already permuted) batch.

    Passing ``advantage`` holds the policy weights fixed, which makes the
    total loss a smooth function of the parameters.
    """
    out = network(batch.observations, batch.actions, batch.starts)
    with torch.no_grad():
        target_q = target_network(batch.observations, batch.actions, batch.starts).q_values

    actions = batch.actions
    steps = batch.mask.bool()
    terminals = batch.terminals.bool()
    taken_q = out.q_values.gather(-1, actions[..., None]).squeeze(-1)

    if hp.use_icq:
        next_q = target_q.gather(-1, actions[..., None]).squeeze(-1)
    else:
        next_q = target_q.max(dim=-1).values
    next_q = torch.cat([next_q[:, 1:], torch.zeros_like(next_q[:, :1])], dim=1)
    has_next = torch.cat([steps[:, 1:], torch.zeros_like(steps[:, :1])], dim=1) & ~terminals
    critic_steps = steps & (terminals | has_next)

    targets = critic_targets(next_q, batch.rewards, terminals, hp, mask=has_next)
    critic_tokens = critic_steps[..., None].expand_as(taken_q)
    if bool(critic_tokens.any()):
        critic = ((taken_q - targets) ** 2)[critic_tokens].mean()
    else:
        critic = taken_q.sum() * 0.0

    if hp.use_icq:
        if advantage is None:
            advantage = counterfactual_advantage(
                out.q_values.detach(), out.policy_probs().detach(), actions, hp, steps
            )
        policy = policy_loss(out.logits, advantage, actions, hp)
    else:
        advantage = None
        policy = out.logits.sum() * 0.0
    return LossTerms(critic, policy, advantage, targets, critic_steps)


def update_step(batch: SequenceBatch, network: OryxNetwork, target_network: OryxNetwork,
                optim_state: OptimState, hp: HyperParams, rng: np.random.Generator):
    """One gradient step on critic + policy loss; returns (network, optim_state, metrics)"""
    started = time.perf_counter()
    tensors = batch.to_torch(network.dtype)
    agents = tensors.observations.shape[2]
    order = rng.permutation(agents) if hp.permute_agents else np.arange(agents)
    tensors = permute_batch(tensors, order)

    losses = compute_losses(network, target_network, tensors, hp)
    advantage = losses.advantage
    metrics: Dict[str, float] = {
        "step": optim_state.step + 1,
        "critic_loss": float(losses.critic.detach()),
        "policy_loss": float(losses.policy.detach()),
        "mean_abs_advantage": float(advantage.advantages[advantage.mask].abs().mean()) if advantage else 0.0,
        "weight_entropy": weight_entropy(advantage) if advantage else 0.0,
    }
    total = losses.total
    if not torch.isfinite(total):
        raise NumericError("training loss is not finite", node="total_loss", metrics=metrics)

    params = param_set(network)
    try:
        grads = backward(total, params)
        optimizer_step(params, grads, optim_state)
    except NumericError as exc:
        raise NumericError(str(exc), node=exc.node, metrics=metrics) from exc

    metrics["wall_ms"] = (time.perf_counter() - started) * 1000.0
    return network, optim_state, metrics


def make_target(network: OryxNetwork) -> OryxNetwork:
    target = copy.deepcopy(network)
    target.requires_grad_(False)
    return target


def sync_target(network: OryxNetwork, target_network: OryxNetwork, hp: Optional[HyperParams] = None) -> OryxNetwork:
    """Hard copy of the online parameters into the target network"""
    target_network.load_state_dict(copy.deepcopy(network.state_dict()))
    return target_network


class OryxLearner:
    """Owns the online/target pair, the optimizer and the sync schedule"""

    def __init__(self, network: OryxNetwork, hp: HyperParams, rng: np.random.Generator):
        self.network = network
        self.hp = hp
        self.rng = rng
        self.target_network = make_target(network)
        self.optim_state = init_optim_state(param_set(network), lr=hp.learning_rate)

    @property
    def step(self) -> int:
        return self.optim_state.step

    def train_step(self, batch: SequenceBatch) -> Dict[str, float]:
        self.network, self.optim_state, metrics = update_step(
            batch, self.network, self.target_network, self.optim_state, self.hp, self.rng
        )
        if self.optim_state.step % self.hp.target_sync_period == 0:
            sync_target(self.network, self.target_network, self.hp)
        return metrics
