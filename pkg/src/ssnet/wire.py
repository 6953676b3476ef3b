"""Byte-level formats: frames, tensor payloads, file containers.

Every message on a channel is one frame:

    magic "SSN1" | sender u16 | phase u16 | payload_len u32 | payload

little-endian throughout. Field elements travel as 8-byte little-endian
unsigned integers, row-major for tensors. Files reuse the same element
encoding inside a container: magic | version u16 | header_len u32 |
header JSON | element blob | sha256 of everything before it.
"""

import hashlib
import json
import struct
from enum import IntEnum

import numpy as np

MAGIC = b"SSN1"
PROTOCOL_VERSION = 1

_FRAME_HDR = struct.Struct("<4sHHI")
_HELLO = struct.Struct("<HHHH32s32s")  # version, k, n, sender, model digest, schedule digest
_CONTAINER_HDR = struct.Struct("<4sHI")


class ProtocolError(Exception):
    """A peer violated the wire protocol."""


class Phase(IntEnum):
    HELLO = 1
    MASK_DIST = 2
    SHARE_DIST = 3
    RESHARE_OUT = 4
    RESHARE_BACK = 5
    TRUNC_MASKED = 6
    NONLIN_MASKED = 7
    NONLIN_PLAIN = 8
    OUTPUT_SHARE = 9


def encode_frame(sender: int, phase: int, payload: bytes) -> bytes:
    return _FRAME_HDR.pack(MAGIC, sender, phase, len(payload)) + payload


def decode_frame(buf: bytes):
    if len(buf) < _FRAME_HDR.size:
        raise ProtocolError("short frame")
    magic, sender, phase, plen = _FRAME_HDR.unpack_from(buf)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if len(buf) != _FRAME_HDR.size + plen:
        raise ProtocolError("frame length mismatch")
    try:
        phase = Phase(phase)
    except ValueError:
        raise ProtocolError(f"unknown phase tag {phase}") from None
    return sender, phase, buf[_FRAME_HDR.size:]


FRAME_HEADER_SIZE = _FRAME_HDR.size


def encode_hello(k, n, sender, model_digest, schedule_digest):
    return _HELLO.pack(PROTOCOL_VERSION, k, n, sender, model_digest, schedule_digest)


def decode_hello(payload):
    if len(payload) != _HELLO.size:
        raise ProtocolError("bad hello size")
    return _HELLO.unpack(payload)


# -- element and tensor payloads --


def encode_elements(values) -> bytes:
    flat = [int(v) for v in np.asarray(values, dtype=object).ravel()]
    return struct.pack(f"<{len(flat)}Q", *flat)


def decode_elements(buf: bytes, count: int, offset=0):
    return struct.unpack_from(f"<{count}Q", buf, offset)


def encode_plain_tensor(arr) -> bytes:
    arr = np.asarray(arr, dtype=object)
    hdr = struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
    return hdr + encode_elements(arr)


def decode_plain_tensor(buf: bytes):
    ndim = buf[0]
    shape = struct.unpack_from(f"<{ndim}I", buf, 1)
    count = 1
    for d in shape:
        count *= d
    vals = decode_elements(buf, count, offset=1 + 4 * ndim)
    return np.array(vals, dtype=object).reshape(shape)


def encode_share_tensor(st) -> bytes:
    hdr = struct.pack(f"<QHB{st.values.ndim}I", st.party_id, st.degree,
                      st.values.ndim, *st.values.shape)
    return hdr + encode_elements(st.values)


def decode_share_tensor(buf: bytes, scheme):
    from .sss import ShareTensor

    party_id, degree, ndim = struct.unpack_from("<QHB", buf)
    base = struct.calcsize("<QHB")
    shape = struct.unpack_from(f"<{ndim}I", buf, base)
    count = 1
    for d in shape:
        count *= d
    vals = decode_elements(buf, count, offset=base + 4 * ndim)
    if vals and max(vals) >= scheme.field.p:
        raise ProtocolError("element outside field range")
    arr = np.array(vals, dtype=object).reshape(shape)
    return ShareTensor(party_id, degree, arr, scheme)


# -- file containers --


def write_container(path, magic: bytes, header: dict, blob: bytes):
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = _CONTAINER_HDR.pack(magic, 1, len(head)) + head + blob
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body + digest)
    return digest


def read_container(path, magic: bytes):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _CONTAINER_HDR.size + 32:
        raise ProtocolError("truncated container")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ProtocolError("container digest mismatch")
    got_magic, version, hlen = _CONTAINER_HDR.unpack_from(body)
    if got_magic != magic:
        raise ProtocolError(f"expected {magic!r} container, found {got_magic!r}")
    if version != 1:
        raise ProtocolError(f"unsupported container version {version}")
    off = _CONTAINER_HDR.size
    header = json.loads(body[off:off + hlen].decode())
    return header, body[off + hlen:], digest
