"""Error-feedback links.

A link carries one iterate ``y`` from a sender to one or more receivers. Both
ends hold the same estimate ``y_hat``. The sender transmits ``C(y_new - y_hat)``
and every endpoint applies ``y_hat <- y_hat + C(...)``, so the previous
round's compression error rides along with the next difference instead of
piling up.
"""
from __future__ import annotations

import numpy as np

from .numkit import RngStream, as_vector
from .quantize import (
    SERVER_ID,
    BitLedger,
    CompressorConfig,
    QuantizedMessage,
    compress,
    decompress,
    message_bits,
)


class MirrorEstimate:
    """One endpoint's copy of a remote iterate, advanced only by decoded messages."""

    def __init__(self, initial):
        self.value = as_vector(initial).copy()

    def apply(self, msg: QuantizedMessage) -> np.ndarray:
        if msg.size != self.value.shape[0]:
            raise ValueError(f"message of length {msg.size} cannot update an estimate of length {self.value.shape[0]}")
        decoded = decompress(msg)
        if msg.absolute:
            self.value = decoded
        else:
            self.value = self.value + decoded
        return self.value


class EfChannel:
    """Sender side of a directional error-feedback link.

    ``copies`` is the number of receivers a message is delivered to; a
    broadcast to ``N`` nodes is charged ``N`` times.
    """

    def __init__(self, initial, compressor: CompressorConfig, *, tensor_id: str = "x",
                 sender: int = SERVER_ID, direction: str = "up", ledger: BitLedger | None = None,
                 rng: RngStream | None = None, copies: int = 1):
        self.estimate = MirrorEstimate(initial)
        self.compressor = compressor
        self.tensor_id = tensor_id
        self.sender = sender
        self.direction = direction
        self.ledger = ledger if ledger is not None else BitLedger()
        self.rng = rng
        self.copies = copies

    @property
    def mirror(self) -> np.ndarray:
        return self.estimate.value

    def prepare_send(self, y_new, iteration: int = 0) -> QuantizedMessage:
        """Build (and charge) the message for ``y_new``; the mirror is not touched."""
        y_new = as_vector(y_new)
        if y_new.shape != self.mirror.shape:
            raise ValueError(f"iterate of length {y_new.shape[0]} sent on a link of length {self.mirror.shape[0]}")
        meta = dict(tensor_id=self.tensor_id, sender=self.sender, iteration=iteration)
        if y_new.tobytes() == self.mirror.tobytes():
            msg = compress(self.compressor, np.zeros_like(y_new), **meta)
        elif self.compressor.kind == "identity":
            msg = compress(self.compressor, y_new, absolute=True, **meta)
        else:
            msg = compress(self.compressor, y_new - self.mirror, self.rng, **meta)
        self.ledger.charge(self.direction, message_bits(msg) * self.copies)
        return msg

    def commit(self, msg: QuantizedMessage) -> np.ndarray:
        return self.estimate.apply(msg)

    def send(self, y_new, iteration: int = 0) -> QuantizedMessage:
        msg = self.prepare_send(y_new, iteration)
        self.commit(msg)
        return msg

    def receiver(self) -> MirrorEstimate:
        """A fresh receiver-side estimate synchronized with the current mirror."""
        return MirrorEstimate(self.mirror)
