"""
Network checkpoints in the dataset container format.

The header records everything needed to rebuild the network and its
execution mode; the body is the parameters in construction order as
little-endian f64 payloads.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch

from models.schemas import EnvMeta, HyperParams, ModelConfig
from .container import BodyReader, read_container, write_container
from .errors import ContractViolation, HeaderFormatError
from .network import OryxNetwork

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"


def save_checkpoint(path: Union[str, Path], network: OryxNetwork, env: EnvMeta,
                    hp: Optional[HyperParams] = None, ablation: str = "none",
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    params = [(name, tensor.detach()) for name, tensor in network.named_parameters()]
    header = {
        "kind": CHECKPOINT_KIND,
        "precision": "float64",
        "model": network.cfg.model_dump(mode="json"),
        "hyperparams": (hp or HyperParams()).model_dump(mode="json"),
        "ablation": ablation,
        "env": env.model_dump(mode="json"),
        "params": [[name, list(tensor.shape)] for name, tensor in params],
        "extra": extra or {},
    }
    body = b"".join(
        np.ascontiguousarray(tensor.cpu().numpy(), dtype="<f8").tobytes() for _, tensor in params
    )
    path = write_container(path, header, body)
    logger.info(f"Saved checkpoint with {len(params)} tensors to {path}")
    return path


def _decode_params(source: str):
    def decode(header: dict, body: bytes) -> Dict[str, np.ndarray]:
        if header.get("kind") != CHECKPOINT_KIND:
            raise HeaderFormatError(f"{source}: container is not a checkpoint (kind={header.get('kind')!r})")
        reader = BodyReader(body, source)
        tensors = {}
        for name, shape in header.get("params", []):
            count = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(reader.take(count * 8), dtype="<f8")
            tensors[name] = values.reshape(shape).copy()
        reader.finish()
        return tensors

    return decode


def _declared_body_size(header: dict) -> Optional[int]:
    try:
        return sum(8 * (int(np.prod(shape)) if shape else 1) for _, shape in header.get("params", []))
    except (TypeError, ValueError):
        return None


def load_checkpoint(path: Union[str, Path],
                    precision: Optional[str] = None) -> Tuple[OryxNetwork, Dict[str, Any]]:
    """Rebuild the network and return it with the raw header.

    Payloads are always f64 on disk; ``precision`` picks the dtype the
    network is rebuilt in (defaults to the stored model config).
    """
    header, tensors = read_container(path, _decode_params(str(path)), body_size=_declared_body_size)
    cfg = ModelConfig.model_validate(header["model"])
    if precision is not None:
        cfg = cfg.model_copy(update={"precision": precision})
    network = OryxNetwork(cfg)

    own = dict(network.named_parameters())
    if set(own) != set(tensors):
        raise ContractViolation(f"{path}: checkpoint parameters do not match the network built from its config")
    with torch.no_grad():
        for name, tensor in own.items():
            if tuple(tensor.shape) != tensors[name].shape:
                raise ContractViolation(f"{path}: parameter '{name}' has shape {tensors[name].shape}")
            tensor.copy_(torch.as_tensor(tensors[name], dtype=tensor.dtype))
    return network, header


def checkpoint_env(header: Dict[str, Any]) -> EnvMeta:
    return EnvMeta.model_validate(header["env"])
