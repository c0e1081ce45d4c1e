"""Stochastic max-norm quantizer, identity baseline, and the packed wire codec.

Wire layout (format version 1, all integers little-endian)::

    offset  size  field
    0       1     flags: bit0 zero_flag, bit1 identity kind, bit2 absolute,
                  bits4-7 version
    1       4     iteration (uint32)
    5       2     sender (uint16, 0xFFFF = server)
    7       1     tensor id (0 = x, 1 = u, 2 = z)
    8       8     norm (float64)
    16      ...   payload

Stochastic payload: ``M`` codes of ``q`` bits each, code = sign | level << 1,
written LSB-first into a contiguous bit stream (bit ``k`` lives in byte
``k // 8`` at position ``k % 8``); unused trailing bits are zero.
Identity payload: ``M`` float64 values. Zero-flagged messages have no payload.

An absolute message replaces the receiver's estimate with its decoded value
instead of being added to it. Lossless (identity) links use absolute messages
so that the estimate equals the sender's iterate bit for bit.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numkit import RngStream, as_vector, max_norm

FORMAT_VERSION = 1
SERVER_ID = 0xFFFF
NORM_BITS = 64
FLAG_BITS = 1

TENSOR_IDS = ("x", "u", "z")

_HEADER = struct.Struct("<BIHBd")
_ZERO = 0x01
_IDENTITY = 0x02
_ABSOLUTE = 0x04


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class CompressorConfig:
    kind: str = "stochastic"
    q: int = 3
    full_precision_bits: int = 32

    def __post_init__(self):
        if self.kind not in ("stochastic", "identity"):
            raise ValueError(f"unknown compressor kind {self.kind!r}")
        if self.kind == "stochastic" and (not isinstance(self.q, int) or not 2 <= self.q <= 32):
            raise ValueError(f"q must be an integer in [2, 32] (S = 2^(q-1) - 1 >= 1), got {self.q!r}")
        if self.full_precision_bits < 1:
            raise ValueError("full_precision_bits must be positive")

    @property
    def levels(self) -> int:
        """Number of grid intervals ``S`` on [0, 1]."""
        return 2 ** (self.q - 1) - 1

    @property
    def code_width(self) -> int:
        # 1 sign bit + ceil(log2(S + 1)) level bits, which is q
        return 1 + int(self.levels).bit_length()


IDENTITY = CompressorConfig(kind="identity")


@dataclass
class QuantizedMessage:
    """One compressed tensor in flight.

    For the stochastic kind ``signs``/``levels`` hold the per-element codes.
    For the identity kind ``values`` holds the elements verbatim.
    """

    kind: str
    size: int
    tensor_id: str = "x"
    sender: int = SERVER_ID
    iteration: int = 0
    norm: float = 0.0
    zero_flag: bool = False
    absolute: bool = False
    q: int = 0
    full_precision_bits: int = 32
    signs: np.ndarray | None = field(default=None, repr=False)
    levels: np.ndarray | None = field(default=None, repr=False)
    values: np.ndarray | None = field(default=None, repr=False)

    @property
    def S(self) -> int:
        return 2 ** (self.q - 1) - 1


def compress(cfg: CompressorConfig, delta, rng: RngStream | None = None, *,
             tensor_id: str = "x", sender: int = SERVER_ID, iteration: int = 0,
             absolute: bool = False) -> QuantizedMessage:
    delta = as_vector(delta)
    if not np.all(np.isfinite(delta)):
        raise ValueError("cannot compress a non-finite vector")
    m = delta.shape[0]
    meta = dict(size=m, tensor_id=tensor_id, sender=sender, iteration=iteration,
                absolute=absolute, full_precision_bits=cfg.full_precision_bits)
    norm = max_norm(delta)
    if norm == 0.0:
        return QuantizedMessage(kind=cfg.kind, zero_flag=True, q=cfg.q if cfg.kind == "stochastic" else 0, **meta)
    if cfg.kind == "identity":
        return QuantizedMessage(kind="identity", norm=norm, values=delta.copy(), **meta)

    if rng is None:
        raise ValueError("the stochastic compressor needs an RngStream")
    levels = _stochastic_levels(np.abs(delta) / norm, cfg.levels, rng.uniform(m))
    signs = delta < 0
    return QuantizedMessage(kind="stochastic", norm=norm, q=cfg.q, signs=signs, levels=levels, **meta)


def _stochastic_levels(w, S: int, uniforms) -> np.ndarray:
    scaled = w * S
    lower = np.minimum(np.floor(scaled), S - 1)
    # round up with probability (w*S - p); w == 1 always lands on level S
    up = uniforms < (scaled - lower)
    return (lower + up).astype(np.uint8 if S < 256 else np.uint32)


def sample_decoded(cfg: CompressorConfig, delta, rng: RngStream, draws: int) -> np.ndarray:
    """``draws`` decoded stochastic quantizations of ``delta`` as a ``(draws, M)`` array.

    Consumes ``rng`` exactly like ``draws`` successive :func:`compress` calls,
    so row ``k`` equals ``decompress(compress(cfg, delta, rng))`` of call ``k``.
    """
    delta = as_vector(delta)
    if cfg.kind != "stochastic":
        raise ValueError("sample_decoded needs the stochastic compressor")
    norm = max_norm(delta)
    if norm == 0.0:
        return np.zeros((draws, delta.shape[0]))
    S = cfg.levels
    levels = _stochastic_levels(np.abs(delta) / norm, S, rng.uniform(draws * delta.shape[0]).reshape(draws, -1))
    mag = norm * (levels.astype(np.float64) / S)
    return np.where(delta < 0, -mag, mag)


def decompress(msg: QuantizedMessage) -> np.ndarray:
    if msg.zero_flag:
        return np.zeros(msg.size)
    if msg.kind == "identity":
        return msg.values.copy()
    mag = msg.norm * (msg.levels.astype(np.float64) / msg.S)
    return np.where(msg.signs, -mag, mag)


def message_bits(msg: QuantizedMessage) -> int:
    """Accounted payload size in bits: zero flag + norm + codes (headers excluded)."""
    if msg.zero_flag:
        return FLAG_BITS
    if msg.kind == "identity":
        return FLAG_BITS + msg.size * msg.full_precision_bits
    return FLAG_BITS + NORM_BITS + msg.size * msg.q


class BitLedger:
    """Monotone uplink/downlink bit counters."""

    def __init__(self):
        self.uplink_bits = 0
        self.downlink_bits = 0

    def charge(self, direction: str, bits: int) -> None:
        if bits < 0:
            raise ValueError("bit charges must be non-negative")
        if direction == "up":
            self.uplink_bits += int(bits)
        elif direction == "down":
            self.downlink_bits += int(bits)
        else:
            raise ValueError(f"unknown direction {direction!r}")

    @property
    def total_bits(self) -> int:
        return self.uplink_bits + self.downlink_bits

    def __repr__(self) -> str:
        return f"BitLedger(uplink_bits={self.uplink_bits}, downlink_bits={self.downlink_bits})"


def encode(msg: QuantizedMessage) -> bytes:
    flags = FORMAT_VERSION << 4
    if msg.zero_flag:
        flags |= _ZERO
    if msg.kind == "identity":
        flags |= _IDENTITY
    if msg.absolute:
        flags |= _ABSOLUTE
    header = _HEADER.pack(flags, msg.iteration, msg.sender, TENSOR_IDS.index(msg.tensor_id), msg.norm)
    if msg.zero_flag:
        return header
    if msg.kind == "identity":
        return header + msg.values.astype("<f8").tobytes()
    q = msg.q
    codes = msg.signs.astype(np.uint32) | (msg.levels.astype(np.uint32) << 1)
    bits = ((codes[:, None] >> np.arange(q, dtype=np.uint32)) & 1).astype(np.uint8)
    return header + np.packbits(bits.ravel(), bitorder="little").tobytes()


def decode(buf: bytes, size: int, cfg: CompressorConfig) -> QuantizedMessage:
    """Inverse of :func:`encode`; ``size`` and ``cfg`` come from the link context."""
    if len(buf) < _HEADER.size:
        raise DecodeError(f"buffer of {len(buf)} bytes is shorter than the {_HEADER.size}-byte header")
    flags, iteration, sender, tid, norm = _HEADER.unpack_from(buf)
    if flags >> 4 != FORMAT_VERSION:
        raise DecodeError(f"unsupported format version {flags >> 4}")
    if tid >= len(TENSOR_IDS):
        raise DecodeError(f"unknown tensor id {tid}")
    kind = "identity" if flags & _IDENTITY else "stochastic"
    if kind != cfg.kind:
        raise DecodeError(f"message kind {kind!r} does not match link compressor {cfg.kind!r}")
    meta = dict(kind=kind, size=size, tensor_id=TENSOR_IDS[tid], sender=sender, iteration=iteration, norm=norm,
                absolute=bool(flags & _ABSOLUTE), full_precision_bits=cfg.full_precision_bits)
    payload = buf[_HEADER.size:]
    if flags & _ZERO:
        if payload:
            raise DecodeError("zero-flagged message carries a payload")
        return QuantizedMessage(zero_flag=True, q=cfg.q if kind == "stochastic" else 0, **meta)
    if kind == "identity":
        if len(payload) != 8 * size:
            raise DecodeError(f"identity payload has {len(payload)} bytes, expected {8 * size}")
        return QuantizedMessage(values=np.frombuffer(payload, dtype="<f8").astype(np.float64), **meta)

    q = cfg.q
    nbits = size * q
    if len(payload) != (nbits + 7) // 8:
        raise DecodeError(f"packed payload has {len(payload)} bytes, expected {(nbits + 7) // 8} for M={size}, q={q}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    if np.any(bits[nbits:]):
        raise DecodeError("non-zero trailing bits after the last code")
    codes = bits[:nbits].reshape(size, q).astype(np.uint32) @ (np.uint32(1) << np.arange(q, dtype=np.uint32))
    levels = (codes >> 1).astype(np.uint8 if cfg.levels < 256 else np.uint32)
    return QuantizedMessage(q=q, signs=(codes & 1).astype(bool), levels=levels, **meta)
