"""Query scoring, budget-constrained clipping, messages, and the wire format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .features import BevFeatureMap, SparseFeatureMap
from .num import sigmoid, sigmoid_grad_from_value

WIRE_MAGIC = b"DCPM"
WIRE_VERSION = 1
_HEADER = struct.Struct("<4sHHHIHH")  # magic, version, sender, receiver, count, D, reserved
HEADER_SIZE = _HEADER.size


class ShapeMismatch(ValueError):
    """Raised when map shapes disagree."""


class MalformedMessage(ValueError):
    """Raised for wire payloads that fail structural validation."""


@dataclass(frozen=True)
class QueryConfidenceMap:
    """Per-cell, per-collaborator query priorities in [0, 1]."""

    values: np.ndarray = field(repr=False)  # (H, W, N-1)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ShapeMismatch(f"QCM must be (H, W, K), got {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("QCM values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def n_collaborators(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class QueryMap:
    """Binarized, budget-clipped query map (1 = request this cell's feature)."""

    bits: np.ndarray = field(repr=False)  # (H, W, N-1) uint8
    budget: float
    q0_mode: str = "ones"

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 3:
            raise ShapeMismatch(f"bits must be (H, W, K), got {b.shape}")
        if not np.isin(b, (0, 1)).all():
            raise ValueError("query bits must be binary")
        h, w, k = b.shape
        if int(b.sum()) > self.budget * h * w * k + 1e-9:
            raise ValueError("query map violates the aggregate budget bound")
        object.__setattr__(self, "bits", b.astype(np.uint8))

    def activated(self, channel: int) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(self.bits[:, :, channel])
        return list(zip(rows.tolist(), cols.tolist()))


@dataclass(frozen=True)
class FeatureMessage:
    """Sparse feature payload from one collaborator to the ego."""

    sender: int
    receiver: int
    entries: tuple[tuple[int, int, np.ndarray], ...]
    d: int
    payload_bytes: int = 0

    def __post_init__(self):
        for r, c, vec in self.entries:
            if len(vec) != self.d:
                raise ShapeMismatch("entry width disagrees with D")
        expected = HEADER_SIZE + len(self.entries) * (4 + 4 * self.d)
        if self.payload_bytes == 0:
            object.__setattr__(self, "payload_bytes", expected)
        elif self.payload_bytes != expected:
            raise ValueError("payload_bytes inconsistent with serialized length")

    def __eq__(self, other):
        if not isinstance(other, FeatureMessage):
            return NotImplemented
        return (self.sender == other.sender and self.receiver == other.receiver
                and self.d == other.d and self.payload_bytes == other.payload_bytes
                and len(self.entries) == len(other.entries)
                and all(a[0] == b[0] and a[1] == b[1] and np.array_equal(a[2], b[2])
                        for a, b in zip(self.entries, other.entries)))


@dataclass
class ScorerParams:
    """Three-layer MLP over the per-cell (Q0, PE, DE) triple, logistic output."""

    w1: np.ndarray  # (hidden, 3)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, hidden)
    b2: np.ndarray  # (hidden,)
    w3: np.ndarray  # (hidden,)
    b3: float

    def __post_init__(self):
        hidden = self.w1.shape[0]
        if self.w1.shape != (hidden, 3) or self.b1.shape != (hidden,) \
                or self.w2.shape != (hidden, hidden) or self.b2.shape != (hidden,) \
                or self.w3.shape != (hidden,):
            raise ShapeMismatch("inconsistent scorer layer shapes")
        for arr in (self.w1, self.b1, self.w2, self.b2, self.w3):
            if not np.all(np.isfinite(arr)):
                raise ValueError("scorer parameters must be finite")
        if not math.isfinite(self.b3):
            raise ValueError("scorer parameters must be finite")

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def zeros(cls, hidden: int = 8) -> "ScorerParams":
        return cls(np.zeros((hidden, 3)), np.zeros(hidden), np.zeros((hidden, hidden)),
                   np.zeros(hidden), np.zeros(hidden), 0.0)

    @classmethod
    def random(cls, hidden: int = 8, seed: int = 0, scale: float = 0.5) -> "ScorerParams":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0, scale, (hidden, 3)), rng.normal(0, scale, hidden),
                   rng.normal(0, scale, (hidden, hidden)), rng.normal(0, scale, hidden),
                   rng.normal(0, scale, hidden), float(rng.normal(0, scale)))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(),
                               self.b2, self.w3, [self.b3]])

    @classmethod
    def from_vector(cls, vec: np.ndarray, hidden: int) -> "ScorerParams":
        sizes = [hidden * 3, hidden, hidden * hidden, hidden, hidden, 1]
        if len(vec) != sum(sizes):
            raise ShapeMismatch("flat vector length mismatch")
        parts = np.split(np.asarray(vec, dtype=np.float64), np.cumsum(sizes)[:-1])
        return cls(parts[0].reshape(hidden, 3), parts[1],
                   parts[2].reshape(hidden, hidden), parts[3], parts[4],
                   float(parts[5][0]))

    def scaled_add(self, grads: "ScorerParams", factor: float) -> "ScorerParams":
        return ScorerParams(self.w1 + factor * grads.w1, self.b1 + factor * grads.b1,
                            self.w2 + factor * grads.w2, self.b2 + factor * grads.b2,
                            self.w3 + factor * grads.w3, self.b3 + factor * grads.b3)


def _stack_inputs(q0: np.ndarray, pe: np.ndarray, de: np.ndarray) -> np.ndarray:
    """Broadcast (q0, pe, de) to a common (H, W, K, 3) input tensor."""
    q0 = np.asarray(q0, dtype=np.float64)
    pe = np.asarray(pe, dtype=np.float64)
    de = np.asarray(de, dtype=np.float64)
    if q0.shape != pe.shape or q0.ndim != 3:
        raise ShapeMismatch(f"q0 {q0.shape} and pe {pe.shape} must both be (H, W, K)")
    if de.shape != q0.shape[:2]:
        raise ShapeMismatch(f"de {de.shape} must be (H, W)")
    de3 = np.broadcast_to(de[:, :, None], q0.shape)
    return np.stack([q0, pe, de3], axis=-1)


def score_reference(q0: np.ndarray, pe: np.ndarray, de: np.ndarray) -> QueryConfidenceMap:
    """Deterministic reference scorer: elementwise de * pe * q0, clamped to [0, 1].

    Zero wherever the direction mask is zero, so masked-off cells can never be
    requested.
    """
    x = _stack_inputs(q0, pe, de)
    values = np.clip(x[..., 2] * x[..., 1] * x[..., 0], 0.0, 1.0)
    return QueryConfidenceMap(values)


def score_mlp_forward(params: ScorerParams, q0, pe, de):
    """MLP scorer forward pass; returns (QueryConfidenceMap, cache for backward)."""
    x = _stack_inputs(q0, pe, de)
    flat = x.reshape(-1, 3)
    z1 = flat @ params.w1.T + params.b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ params.w2.T + params.b2
    h2 = np.maximum(z2, 0.0)
    z3 = h2 @ params.w3 + params.b3
    c = sigmoid(z3)
    cache = {"x": flat, "z1": z1, "h1": h1, "z2": z2, "h2": h2, "c": c,
             "shape": x.shape[:3], "params": params}
    return QueryConfidenceMap(c.reshape(x.shape[:3])), cache


def score_mlp(params: ScorerParams, q0, pe, de) -> QueryConfidenceMap:
    return score_mlp_forward(params, q0, pe, de)[0]


def score_mlp_backward(cache: dict, d_c: np.ndarray) -> ScorerParams:
    """Gradient of a scalar loss w.r.t. the scorer parameters.

    d_c is dLoss/dC with C the (H, W, K) confidence output of the cached pass.
    """
    params: ScorerParams = cache["params"]
    flat_dc = np.asarray(d_c, dtype=np.float64).reshape(-1)
    dz3 = flat_dc * sigmoid_grad_from_value(cache["c"])
    dw3 = cache["h2"].T @ dz3
    db3 = float(dz3.sum())
    dh2 = np.outer(dz3, params.w3)
    dz2 = dh2 * (cache["z2"] > 0.0)
    dw2 = dz2.T @ cache["h1"]
    db2 = dz2.sum(axis=0)
    dh1 = dz2 @ params.w2
    dz1 = dh1 * (cache["z1"] > 0.0)
    dw1 = dz1.T @ cache["x"]
    db1 = dz1.sum(axis=0)
    return ScorerParams(dw1, db1, dw2, db2, dw3, db3)


def per_collaborator_budget(q_max: float, h: int, w: int) -> int:
    """Maximum activated queries per collaborator channel (Eq. 3 per-channel bound)."""
    return int(math.floor(q_max * h * w))


def clip_queries(c: QueryConfidenceMap, q_max: float, q0_mode: str = "ones",
                 tie_break: str = "per_collaborator") -> QueryMap:
    """Top-k budget clipping of a confidence map.

    Default mode ranks each collaborator channel independently and keeps its
    floor(q_max*H*W) best cells; the "global" mode ranks all channels jointly
    under the aggregate bound. Ties break on (row, col, collaborator); cells
    with zero confidence are never activated, even under surplus budget.
    """
    if not (0.0 <= q_max <= 1.0):
        raise ValueError("q_max must lie in [0, 1]")
    if tie_break not in ("per_collaborator", "global"):
        raise ValueError(f"unknown tie_break mode {tie_break!r}")
    h, w, k = c.values.shape
    bits = np.zeros((h, w, k), dtype=np.uint8)
    if tie_break == "per_collaborator":
        limit = per_collaborator_budget(q_max, h, w)
        for ch in range(k):
            flat = c.values[:, :, ch].ravel()
            order = np.lexsort((np.arange(flat.size), -flat))
            chosen = order[:limit]
            chosen = chosen[flat[chosen] > 0.0]
            rows, cols = np.unravel_index(chosen, (h, w))
            bits[rows, cols, ch] = 1
    else:
        limit = int(math.floor(q_max * h * w * k))
        # C-order ravel of (H, W, K) is exactly (row, col, collaborator) order.
        flat = c.values.reshape(-1)
        order = np.lexsort((np.arange(flat.size), -flat))
        chosen = order[:limit]
        chosen = chosen[flat[chosen] > 0.0]
        rows, cols, chans = np.unravel_index(chosen, (h, w, k))
        bits[rows, cols, chans] = 1
    return QueryMap(bits, q_max, q0_mode)


def build_message(query: QueryMap, sender_features: BevFeatureMap, sender: int,
                  receiver: int = 0) -> FeatureMessage:
    """Sparse feature message for one collaborator (agent id = channel + 1).

    Entries are exactly the activated cells of the sender's channel, row-major,
    carrying the sender's feature vectors rounded to the f32 wire precision.
    """
    h, w, k = query.bits.shape
    if sender_features.grid.shape != (h, w):
        raise ShapeMismatch("query map and sender features disagree on grid shape")
    if not (1 <= sender <= k):
        raise ShapeMismatch(f"sender {sender} has no query channel (1..{k})")
    entries = tuple((r, c, sender_features.values[r, c].astype(np.float32))
                    for r, c in query.activated(sender - 1))
    return FeatureMessage(sender=sender, receiver=receiver, entries=entries,
                          d=sender_features.d)


def message_to_sparse(msg: FeatureMessage, shape: tuple[int, int, int]) -> SparseFeatureMap:
    entries = tuple((r, c, vec.astype(np.float64)) for r, c, vec in msg.entries)
    return SparseFeatureMap(entries, shape)


def serialize(msg: FeatureMessage) -> bytes:
    """Little-endian wire encoding; see module docs for the exact layout."""
    out = bytearray(_HEADER.pack(WIRE_MAGIC, WIRE_VERSION, msg.sender, msg.receiver,
                                 len(msg.entries), msg.d, 0))
    entry = struct.Struct(f"<HH{msg.d}f")
    for r, c, vec in msg.entries:
        out += entry.pack(r, c, *np.asarray(vec, dtype=np.float32))
    if len(out) != msg.payload_bytes:
        raise ValueError("serialized length disagrees with payload_bytes")
    return bytes(out)


def deserialize(data: bytes, grid_shape: tuple[int, int] | None = None) -> FeatureMessage:
    """Parse a wire payload, raising MalformedMessage on any structural defect."""
    if len(data) < HEADER_SIZE:
        raise MalformedMessage(f"truncated header: {len(data)} bytes")
    magic, version, sender, receiver, count, d, reserved = _HEADER.unpack_from(data)
    if magic != WIRE_MAGIC:
        raise MalformedMessage(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise MalformedMessage(f"unsupported version {version}")
    if reserved != 0:
        raise MalformedMessage("reserved field must be zero")
    if d < 1:
        raise MalformedMessage("feature width must be >= 1")
    entry = struct.Struct(f"<HH{d}f")
    expected = HEADER_SIZE + count * entry.size
    if len(data) != expected:
        raise MalformedMessage(f"length {len(data)} != expected {expected}")
    entries = []
    offset = HEADER_SIZE
    for _ in range(count):
        fields = entry.unpack_from(data, offset)
        r, c = fields[0], fields[1]
        if grid_shape is not None and not (r < grid_shape[0] and c < grid_shape[1]):
            raise MalformedMessage(f"cell ({r}, {c}) outside grid {grid_shape}")
        vec = np.array(fields[2:], dtype=np.float32)
        if not np.all(np.isfinite(vec)):
            raise MalformedMessage("non-finite feature value")
        entries.append((r, c, vec))
        offset += entry.size
    return FeatureMessage(sender=sender, receiver=receiver, entries=tuple(entries), d=d)


@dataclass
class BudgetLedger:
    """Single-writer per-ego accounting of transmitted queries and bytes."""

    total_bytes: int = 0
    total_entries: int = 0
    messages: int = 0

    def record(self, msg: FeatureMessage) -> None:
        self.total_bytes += msg.payload_bytes
        self.total_entries += len(msg.entries)
        self.messages += 1
