"""Self-checking binary container shared by datasets and checkpoints.

Layout: magic ``ORYXDS\\0`` | u16 version | u32 header length | canonical JSON
header | body | u32 CRC32 of everything before it. All integers little-endian.
"""

import json
import struct
import zlib
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, TypeVar, Union

from .errors import (
    BadMagicError,
    ChecksumError,
    HeaderFormatError,
    PrecisionMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)

MAGIC = b"ORYXDS\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<HI")
_CRC = struct.Struct("<I")

T = TypeVar("T")
PathLike = Union[str, Path]
BodySize = Callable[[Dict[str, Any]], Optional[int]]


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")


def encode_container(header: Dict[str, Any], body: bytes) -> bytes:
    head = canonical_json(header)
    blob = MAGIC + _PREFIX.pack(FORMAT_VERSION, len(head)) + head + body
    return blob + _CRC.pack(zlib.crc32(blob) & 0xFFFFFFFF)


def write_container(path: PathLike, header: Dict[str, Any], body: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_container(header, body))
    return path


def decode_container(
    data: bytes,
    decode_body: Callable[[Dict[str, Any], bytes], T],
    precision: str = None,
    source: str = "<bytes>",
    body_size: Optional[BodySize] = None,
) -> Tuple[Dict[str, Any], T]:
    """Validate and decode a container blob.

    Checks run in a fixed order so each failure maps to one error type:
    magic, version, header bounds, header JSON, precision, checksum, body.
    The body is only decoded once the checksum holds. On a checksum failure
    ``body_size`` (the payload length the header declares) separates a
    truncated file from a corrupted one.
    """
    if not data.startswith(MAGIC):
        if len(data) < len(MAGIC) and MAGIC.startswith(data):
            raise TruncatedFileError(f"{source}: file ends inside the magic bytes")
        raise BadMagicError(f"{source}: not an Oryx container (bad magic)")

    offset = len(MAGIC)
    if len(data) < offset + _PREFIX.size:
        raise TruncatedFileError(f"{source}: file ends inside the container prefix")
    version, header_length = _PREFIX.unpack_from(data, offset)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{source}: format version {version}, this build reads {FORMAT_VERSION}")

    offset += _PREFIX.size
    body_end = len(data) - _CRC.size
    if offset + header_length > body_end:
        raise TruncatedFileError(f"{source}: file ends inside the header")
    try:
        header = json.loads(data[offset:offset + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderFormatError(f"{source}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise HeaderFormatError(f"{source}: header must be a JSON object")

    if precision is not None and header.get("precision", "float64") != precision:
        raise PrecisionMismatchError(
            f"{source}: file stores {header.get('precision', 'float64')} payloads, this build uses {precision}"
        )

    body = data[offset + header_length:body_end]
    (stored,) = _CRC.unpack_from(data, body_end)
    if stored != zlib.crc32(data[:body_end]) & 0xFFFFFFFF:
        declared = body_size(header) if body_size is not None else None
        if declared is not None and len(body) < declared:
            raise TruncatedFileError(f"{source}: payload holds {len(body)} of {declared} declared bytes")
        raise ChecksumError(f"{source}: CRC32 mismatch")
    return header, decode_body(header, body)


def read_container(path: PathLike, decode_body: Callable[[Dict[str, Any], bytes], T],
                   precision: str = None,
                   body_size: Optional[BodySize] = None) -> Tuple[Dict[str, Any], T]:
    path = Path(path)
    return decode_container(path.read_bytes(), decode_body, precision, source=str(path), body_size=body_size)


class BodyReader:
    """Sequential reader over a body slice that reports truncation"""

    def __init__(self, body: bytes, source: str = "<body>"):
        self.body = body
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.body):
            raise TruncatedFileError(f"{self.source}: payload ends early at byte {self.offset}")
        chunk = self.body[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: struct.Struct) -> Tuple[Any, ...]:
        return fmt.unpack(self.take(fmt.size))

    def finish(self):
        if self.offset != len(self.body):
            raise HeaderFormatError(
                f"{self.source}: {len(self.body) - self.offset} trailing bytes after the declared payload"
            )
