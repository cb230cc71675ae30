"""Tensor plumbing shared by the learner: dtype selection, gradient maps,
finite-difference checks and the Adam optimizer state.

Tensors are plain ``torch.Tensor`` values; a ``ParamSet`` is the ordered
``named_parameters()`` map of a module, so iteration order follows
construction order.
"""

import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import torch

from .errors import ContractViolation, NumericError

ParamSet = Dict[str, torch.Tensor]
GradMap = Dict[str, torch.Tensor]

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


def resolve_precision(precision: Optional[str] = None) -> str:
    precision = precision or os.getenv("ORYX_PRECISION", "float64")
    if precision not in _DTYPES:
        raise ContractViolation(f"unknown precision '{precision}', expected one of {sorted(_DTYPES)}")
    return precision


def resolve_dtype(precision: Optional[str] = None) -> torch.dtype:
    """Map a precision name (or ORYX_PRECISION) to a torch dtype"""
    return _DTYPES[resolve_precision(precision)]


def param_set(module: torch.nn.Module) -> ParamSet:
    return OrderedDict(module.named_parameters())


def check_finite(tensor: torch.Tensor, node: str) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NumericError("non-finite value encountered", node=node)
    return tensor


def backward(loss: torch.Tensor, params: ParamSet) -> GradMap:
    """Reverse-mode gradients of a scalar loss, one entry per parameter.

    Parameters that the loss does not touch get an all-zero gradient.
    """
    if loss.dim() != 0:
        raise ContractViolation(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        node = loss.grad_fn.name() if loss.grad_fn is not None else "loss"
        raise NumericError("loss is not finite", node=node)

    names = list(params.keys())
    tensors = [params[name] for name in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)

    result: GradMap = OrderedDict()
    for name, tensor, grad in zip(names, tensors, grads):
        if grad is None:
            grad = torch.zeros_like(tensor)
        result[name] = check_finite(grad, name)
    return result


def finite_difference_grad(
    f: Callable[[ParamSet], torch.Tensor],
    params: ParamSet,
    h: float = 1e-5,
    coordinates: Optional[Mapping[str, Sequence[int]]] = None,
) -> GradMap:
    """Central differences (f(p+h) - f(p-h)) / 2h per coordinate.

    ``coordinates`` restricts the differences to chosen flat indices per parameter;
    unvisited entries are reported as zero. Parameters are restored exactly.
    """
    if h <= 0:
        raise ContractViolation("finite-difference step h must be positive")

    def evaluate() -> float:
        value = f(params)
        value = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(value):
            raise NumericError("finite-difference evaluation is not finite", node="f")
        return value

    result: GradMap = OrderedDict()
    with torch.no_grad():
        for name, tensor in params.items():
            grad = torch.zeros_like(tensor)
            flat = tensor.view(-1)
            flat_grad = grad.view(-1)
            indices = range(flat.numel()) if coordinates is None else coordinates.get(name, ())
            for index in indices:
                original = flat[index].item()
                flat[index] = original + h
                plus = evaluate()
                flat[index] = original - h
                minus = evaluate()
                flat[index] = original
                flat_grad[index] = (plus - minus) / (2.0 * h)
            result[name] = grad
    return result


@dataclass
class OptimState:
    """Adam moments live inside ``optimizer``; ``step`` counts applied updates"""

    optimizer: torch.optim.Adam
    step: int = 0
    shapes: Dict[str, torch.Size] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    @property
    def betas(self) -> Tuple[float, float]:
        return tuple(self.optimizer.param_groups[0]["betas"])

    @property
    def eps(self) -> float:
        return self.optimizer.param_groups[0]["eps"]

    def moments(self, params: ParamSet) -> Dict[str, Tuple[torch.Tensor, torch.Tensor]]:
        out = {}
        for name, tensor in params.items():
            state = self.optimizer.state.get(tensor, {})
            if state:
                out[name] = (state["exp_avg"], state["exp_avg_sq"])
        return out


def init_optim_state(
    params: ParamSet,
    lr: float = 3e-4,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> OptimState:
    optimizer = torch.optim.Adam(list(params.values()), lr=lr, betas=betas, eps=eps)
    shapes = {name: tensor.shape for name, tensor in params.items()}
    return OptimState(optimizer=optimizer, shapes=shapes)


def optimizer_step(params: ParamSet, grads: GradMap, state: OptimState) -> Tuple[ParamSet, OptimState]:
    """Apply one Adam update in place and advance the step counter"""
    if set(grads) != set(params):
        missing = sorted(set(params) ^ set(grads))
        raise ContractViolation(f"gradient map does not match parameters: {missing}")
    for name, tensor in params.items():
        if grads[name].shape != tensor.shape:
            raise ContractViolation(
                f"gradient for '{name}' has shape {tuple(grads[name].shape)}, expected {tuple(tensor.shape)}"
            )
        tensor.grad = grads[name].detach().clone()

    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1

    for name, tensor in params.items():
        check_finite(tensor.detach(), name)
    return params, state
