"""Simulated network: wire codec, message bus, latency model and byte ledger.

Simulated time is measured in abstract integer units counted from the start
of each round.
"""

import struct
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import (
    BadMagicError,
    DimensionOverflowError,
    DoubleCollectionError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from .models import LatencyModel, Message
from .nn import PARAM_DTYPE, MlpModel

WIRE_MAGIC = b"FLM1"
WIRE_VERSION = 1
HEADER_SIZE = 12
LAYER_HEADER_SIZE = 8
MAX_DIM = 1 << 24

_FLOAT_LE = np.dtype("<f4")


def encoded_size(layer_dims: Sequence[int]) -> int:
    """Exact wire size of a model with the given layer dims."""
    dims = list(layer_dims)
    n_layers = len(dims) - 1
    params = sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))
    return HEADER_SIZE + LAYER_HEADER_SIZE * n_layers + 4 * params


def encode_model(model: MlpModel) -> bytes:
    """
    Serialize a model to the wire layout.

    Layout (little-endian): magic "FLM1", u32 version, u32 layer count,
    (u32 in_dim, u32 out_dim) per layer, then per layer the row-major
    float32 weights followed by the float32 bias.

    Args:
        model: Model to encode

    Returns:
        Encoded bytes of exactly ``encoded_size(model.layer_dims)`` length
    """
    chunks = [WIRE_MAGIC, struct.pack("<II", WIRE_VERSION, model.n_layers)]
    for w in model.weights:
        out_dim, in_dim = w.shape
        chunks.append(struct.pack("<II", in_dim, out_dim))
    for w, b in zip(model.weights, model.biases):
        chunks.append(np.ascontiguousarray(w, dtype=_FLOAT_LE).tobytes())
        chunks.append(np.ascontiguousarray(b, dtype=_FLOAT_LE).tobytes())
    return b"".join(chunks)


def decode_model(payload: bytes) -> MlpModel:
    """
    Strictly decode a wire model.

    Args:
        payload: Bytes produced by ``encode_model``

    Returns:
        Decoded model (float32 parameters)

    Raises:
        BadMagicError: Magic is not "FLM1"
        UnsupportedVersionError: Version is not 1
        TruncatedPayloadError: Payload shorter or longer than announced
        DimensionOverflowError: Zero, oversized or inconsistent layer dims
    """
    payload = bytes(payload)
    if len(payload) < HEADER_SIZE:
        if payload[:4] != WIRE_MAGIC[:len(payload[:4])]:
            raise BadMagicError(f"bad wire magic {payload[:4]!r}")
        raise TruncatedPayloadError(f"wire header truncated: {len(payload)} bytes")
    if payload[:4] != WIRE_MAGIC:
        raise BadMagicError(f"bad wire magic {payload[:4]!r}, expected {WIRE_MAGIC!r}")
    version, n_layers = struct.unpack_from("<II", payload, 4)
    if version != WIRE_VERSION:
        raise UnsupportedVersionError(f"unsupported wire version {version}")
    if n_layers < 1 or n_layers > MAX_DIM:
        raise DimensionOverflowError(f"invalid layer count {n_layers}")

    dims_end = HEADER_SIZE + LAYER_HEADER_SIZE * n_layers
    if len(payload) < dims_end:
        raise TruncatedPayloadError(f"layer table truncated: need {dims_end} bytes, got {len(payload)}")

    shapes: List[Tuple[int, int]] = []
    for k in range(n_layers):
        in_dim, out_dim = struct.unpack_from("<II", payload, HEADER_SIZE + LAYER_HEADER_SIZE * k)
        if not (1 <= in_dim <= MAX_DIM and 1 <= out_dim <= MAX_DIM):
            raise DimensionOverflowError(f"layer {k} has invalid dims {in_dim}x{out_dim}")
        if shapes and shapes[-1][1] != in_dim:
            raise DimensionOverflowError(
                f"layer {k} input dim {in_dim} does not match previous output dim {shapes[-1][1]}"
            )
        shapes.append((in_dim, out_dim))

    expected = dims_end + 4 * sum(i * o + o for i, o in shapes)
    if len(payload) != expected:
        kind = "truncated" if len(payload) < expected else "over-long"
        raise TruncatedPayloadError(f"wire payload {kind}: expected {expected} bytes, got {len(payload)}")

    weights = []
    biases = []
    offset = dims_end
    for in_dim, out_dim in shapes:
        w = np.frombuffer(payload, dtype=_FLOAT_LE, count=in_dim * out_dim, offset=offset)
        offset += 4 * in_dim * out_dim
        b = np.frombuffer(payload, dtype=_FLOAT_LE, count=out_dim, offset=offset)
        offset += 4 * out_dim
        weights.append(w.reshape(out_dim, in_dim).astype(PARAM_DTYPE))
        biases.append(b.astype(PARAM_DTYPE))
    return MlpModel(weights=weights, biases=biases)


class LatencySampler:
    """Draws per-message latencies from a LatencyModel with a seeded stream."""

    def __init__(self, model: LatencyModel, seed: int):
        self.model = model
        self.rng = np.random.default_rng(int(seed) & ((1 << 64) - 1))

    def sample(self) -> int:
        if self.model.kind == "fixed":
            return int(self.model.delay)
        if self.model.kind == "uniform":
            return int(self.rng.integers(self.model.low, self.model.high + 1))
        return 0


@dataclass
class ByteLedger:
    """Cumulative traffic counters, charged when a message is sent."""

    links: Dict[Tuple[int, int], int] = field(default_factory=lambda: defaultdict(int))
    sent: Dict[int, int] = field(default_factory=lambda: defaultdict(int))
    received: Dict[int, int] = field(default_factory=lambda: defaultdict(int))
    total: int = 0
    messages: int = 0

    def charge(self, sender: int, receiver: int, size: int) -> None:
        self.links[(sender, receiver)] += size
        self.sent[sender] += size
        self.received[receiver] += size
        self.total += size
        self.messages += 1

    def node_totals(self, node: int) -> Tuple[int, int]:
        return self.sent.get(node, 0), self.received.get(node, 0)

    def snapshot(self) -> Dict[str, object]:
        """JSON-ready copy with deterministic key order."""
        return {
            "total": self.total,
            "messages": self.messages,
            "links": {f"{s}->{r}": v for (s, r), v in sorted(self.links.items())},
            "sent": {str(n): v for n, v in sorted(self.sent.items())},
            "received": {str(n): v for n, v in sorted(self.received.items())},
        }


class MessageBus:
    """Single-owner simulated bus; one instance lives for a whole experiment."""

    def __init__(self, latency: LatencyModel, seed: int):
        """
        Initialize the bus.

        Args:
            latency: Latency model applied to every message
            seed: Seed of the latency stream
        """
        self.sampler = LatencySampler(latency, seed)
        self.ledger = ByteLedger()
        self.current_round = 0
        self._inboxes: Dict[int, List[Message]] = defaultdict(list)
        self._collected: Set[int] = set()
        self.dropped_total = 0

    def begin_round(self, round_index: int) -> None:
        """Start a new round; undelivered messages of the previous round are discarded."""
        self.current_round = round_index
        self._inboxes = defaultdict(list)
        self._collected = set()

    def send(self, message: Message) -> None:
        """
        Put a message on the wire.

        The latency is sampled here, ``deliver_time`` is set and the payload
        size is charged to the ledger immediately, whether or not the message
        is delivered later.

        Raises:
            ValueError: If the message belongs to another round
        """
        if message.round != self.current_round:
            raise ValueError(f"message for round {message.round} sent during round {self.current_round}")
        message.deliver_time = message.send_time + self.sampler.sample()
        self.ledger.charge(message.sender, message.receiver, message.size)
        self._inboxes[message.receiver].append(message)

    def collect(self, receiver: int, deadline: Optional[int] = None) -> Tuple[List[Message], int]:
        """
        Deliver a node's inbox for the current round.

        Args:
            receiver: Node collecting its messages
            deadline: Latest accepted deliver_time (None accepts everything)

        Returns:
            Tuple of (delivered messages ordered by (deliver_time, sender), dropped count)

        Raises:
            DoubleCollectionError: If the node already collected this round
        """
        if receiver in self._collected:
            raise DoubleCollectionError(f"node {receiver} already collected in round {self.current_round}")
        self._collected.add(receiver)
        inbox = self._inboxes.pop(receiver, [])
        delivered = [m for m in inbox if deadline is None or m.deliver_time <= deadline]
        delivered.sort(key=lambda m: (m.deliver_time, m.sender))
        dropped = len(inbox) - len(delivered)
        self.dropped_total += dropped
        return delivered, dropped
