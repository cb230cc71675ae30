import pytest
import torch

from services.checkpoint import checkpoint_env, load_checkpoint, save_checkpoint
from services.container import MAGIC, canonical_json, decode_container, encode_container
from services.dataset import load_dataset
from services.errors import (
    BadMagicError,
    ChecksumError,
    HeaderFormatError,
    PrecisionMismatchError,
    TruncatedFileError,
)
from services.network import build_network
from services.tmaze import TMazeEnv


def _body(header, body):
    return body


def test_canonical_json_is_sorted_and_compact():
    assert canonical_json({"b": 1, "a": [1, 2]}) == b'{"a":[1,2],"b":1}'
    with pytest.raises(ValueError):
        canonical_json({"x": float("nan")})


def test_container_round_trip():
    blob = encode_container({"precision": "float64", "kind": "test"}, b"\x01\x02\x03")
    assert blob.startswith(MAGIC)
    header, body = decode_container(blob, _body, precision="float64")
    assert header == {"precision": "float64", "kind": "test"}
    assert body == b"\x01\x02\x03"


def test_container_checks_run_in_order():
    blob = encode_container({"precision": "float32"}, b"payload")
    with pytest.raises(PrecisionMismatchError):
        decode_container(blob, _body, precision="float64")
    with pytest.raises(BadMagicError):
        decode_container(b"X" + blob[1:], _body)
    with pytest.raises(TruncatedFileError):
        decode_container(MAGIC[:4], _body)
    with pytest.raises(ChecksumError):
        decode_container(blob[:-1] + bytes([blob[-1] ^ 0xFF]), _body)


def test_body_is_decoded_only_after_the_checksum_holds():
    blob = encode_container({"size": 7}, b"payload")
    calls = []

    def decode(header, body):
        calls.append(body)
        return body

    corrupted = blob[:-6] + bytes([blob[-6] ^ 0x10]) + blob[-5:]
    with pytest.raises(ChecksumError):
        decode_container(corrupted, decode, body_size=lambda header: header["size"])
    assert calls == []
    with pytest.raises(TruncatedFileError):
        decode_container(blob[:-7] + blob[-4:], decode, body_size=lambda header: header["size"])
    assert calls == []


def test_header_must_be_a_json_object():
    blob = encode_container({"a": 1}, b"")
    start = len(MAGIC) + 6
    broken = blob[:start] + b"[" + blob[start + 1:]
    with pytest.raises(HeaderFormatError):
        decode_container(broken, _body)


def test_checkpoint_round_trip(tmp_path, tiny_model_config):
    network = build_network(tiny_model_config, seed=3)
    env = TMazeEnv().metadata()
    path = save_checkpoint(tmp_path / "ckpt.oryx", network, env, ablation="no-icq", extra={"updates": 7})
    loaded, header = load_checkpoint(path)

    assert header["ablation"] == "no-icq"
    assert header["extra"] == {"updates": 7}
    assert checkpoint_env(header) == env
    assert loaded.cfg == network.cfg
    for (name, a), (_, b) in zip(network.named_parameters(), loaded.named_parameters()):
        assert torch.equal(a, b), name


def test_float32_network_reloads_in_float64(tmp_path, tiny_model_config):
    network = build_network(tiny_model_config.model_copy(update={"precision": "float32"}))
    path = save_checkpoint(tmp_path / "ckpt.oryx", network, TMazeEnv().metadata())
    loaded, _ = load_checkpoint(path, precision="float64")
    assert loaded.dtype == torch.float64
    for a, b in zip(network.parameters(), loaded.parameters()):
        assert torch.equal(a.double(), b)


def test_checkpoint_is_not_a_dataset(tmp_path, tiny_model_config):
    path = save_checkpoint(tmp_path / "ckpt.oryx", build_network(tiny_model_config), TMazeEnv().metadata())
    with pytest.raises(HeaderFormatError):
        load_dataset(path)


def test_truncated_checkpoint_is_rejected(tmp_path, tiny_model_config):
    path = save_checkpoint(tmp_path / "ckpt.oryx", build_network(tiny_model_config), TMazeEnv().metadata())
    path.write_bytes(path.read_bytes()[:-20])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(path)
