"""Direction-aware selective attention over agents and the moments-based decoder."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .comms import QueryConfidenceMap, ShapeMismatch
from .features import BevFeatureMap, SparseFeatureMap, densify
from .geometry import RotatedBox
from .grid import GridSpec
from .num import canonical_sum, sigmoid


@dataclass(frozen=True)
class AttentionParams:
    """Per-head Q/K/V projections, output projection, and the FFN."""

    n_heads: int
    wq: np.ndarray  # (n_heads, dh, D)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (D, D)
    ffn_w1: np.ndarray  # (d_ff, D)
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray  # (D, d_ff)
    ffn_b2: np.ndarray

    def __post_init__(self):
        d = self.wo.shape[0]
        if d % self.n_heads != 0:
            raise ValueError("D must be divisible by n_heads")
        dh = d // self.n_heads
        if self.wq.shape != (self.n_heads, dh, d) or self.wk.shape != self.wq.shape \
                or self.wv.shape != self.wq.shape or self.wo.shape != (d, d):
            raise ShapeMismatch("attention projection shapes inconsistent")
        d_ff = self.ffn_w1.shape[0]
        if self.ffn_w1.shape != (d_ff, d) or self.ffn_b1.shape != (d_ff,) \
                or self.ffn_w2.shape != (d, d_ff) or self.ffn_b2.shape != (d,):
            raise ShapeMismatch("FFN shapes inconsistent")
        for arr in (self.wq, self.wk, self.wv, self.wo,
                    self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("attention parameters must be finite")

    @property
    def d(self) -> int:
        return self.wo.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @classmethod
    def identity(cls, d: int, n_heads: int = 2, d_ff: int | None = None,
                 qk_scale: float = 1.0,
                 key_evidence_gain: float = 2.0) -> "AttentionParams":
        """Identity-preserving initialization.

        Value and output projections reproduce the input exactly and the FFN
        second layer is zero, so fusing with only the ego present returns the
        ego features bit-for-bit. Q/K are identity slices scaled by qk_scale;
        the first head's key projection additionally mixes the evidence channel
        into the decay row, so keys carrying actual evidence outrank empty
        (junk) transmissions at every cell regardless of the ego's own view.
        """
        if d % n_heads != 0:
            raise ValueError("D must be divisible by n_heads")
        if d_ff is None:
            d_ff = 2 * d
        dh = d // n_heads
        eye = np.eye(d)
        slices = np.stack([eye[h * dh:(h + 1) * dh] for h in range(n_heads)])
        wk = slices * qk_scale
        if dh >= 2 and key_evidence_gain != 0.0:
            # Row reading channel 1 (distance decay, always positive on the
            # query side) also reads channel 0 (evidence) on the key side.
            wk = wk.copy()
            wk[0, 1, 0] += key_evidence_gain * qk_scale
        rng = np.random.default_rng(12345)  # fixed: identity init is a constant
        return cls(n_heads=n_heads, wq=slices * qk_scale, wk=wk,
                   wv=slices.copy(), wo=eye.copy(),
                   ffn_w1=rng.normal(0.0, 0.1, (d_ff, d)),
                   ffn_b1=np.full(d_ff, 0.01),
                   ffn_w2=np.zeros((d, d_ff)), ffn_b2=np.zeros(d))

    @classmethod
    def random(cls, d: int, n_heads: int = 2, d_ff: int | None = None,
               seed: int = 0, scale: float = 0.2) -> "AttentionParams":
        if d % n_heads != 0:
            raise ValueError("D must be divisible by n_heads")
        if d_ff is None:
            d_ff = 2 * d
        dh = d // n_heads
        rng = np.random.default_rng(seed)
        return cls(n_heads=n_heads,
                   wq=rng.normal(0, scale, (n_heads, dh, d)),
                   wk=rng.normal(0, scale, (n_heads, dh, d)),
                   wv=rng.normal(0, scale, (n_heads, dh, d)),
                   wo=rng.normal(0, scale, (d, d)),
                   ffn_w1=rng.normal(0, scale, (d_ff, d)),
                   ffn_b1=rng.normal(0, scale, d_ff),
                   ffn_w2=rng.normal(0, scale, (d, d_ff)),
                   ffn_b2=rng.normal(0, scale, d))

    def value_matrix(self) -> np.ndarray:
        """Combined per-cell value map: wo @ concat_heads(wv)."""
        return self.wo @ np.concatenate(list(self.wv), axis=0)


@dataclass(frozen=True)
class DsaWeights:
    """Per-location, per-agent attention weights (agent 0 is the ego)."""

    values: np.ndarray = field(repr=False)    # (H, W, N), QCM-modulated
    pre_qcm: np.ndarray = field(repr=False)   # (H, W, N), softmax output
    present: np.ndarray = field(repr=False)   # (H, W, N) bool


@dataclass(frozen=True)
class FusedMap:
    grid: GridSpec
    values: np.ndarray = field(repr=False)           # (H, W, D)
    attention_trace: np.ndarray = field(repr=False)  # (H, W, N)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("fused values must be finite")
        if np.any(self.attention_trace < 0.0):
            raise ValueError("attention trace weights must be non-negative")


def _stack_agents(ego: BevFeatureMap, received: list[SparseFeatureMap | None]):
    """(N, H, W, D) agent feature tensor and (N, H, W) presence mask."""
    h, w = ego.grid.shape
    d = ego.d
    n = 1 + len(received)
    feats = np.zeros((n, h, w, d), dtype=np.float64)
    present = np.zeros((n, h, w), dtype=bool)
    feats[0] = ego.values
    present[0] = True
    for j, sparse in enumerate(received, start=1):
        if sparse is None:
            continue
        if sparse.shape != (h, w, d):
            raise ShapeMismatch(f"received map {j} shape {sparse.shape} != {(h, w, d)}")
        feats[j] = densify(sparse)
        for r, c, _ in sparse.entries:
            present[j, r, c] = True
    return feats, present


def dsa_weights(ego: BevFeatureMap, received: list[SparseFeatureMap | None],
                qcm: QueryConfidenceMap, params: AttentionParams) -> DsaWeights:
    """Scaled dot-product attention over agents at every cell.

    The ego is agent 0 with an implicit confidence of 1; collaborator weights
    are the head-averaged softmax scores (over agents present at the cell)
    multiplied by the collaborator's query confidence.
    """
    h, w = ego.grid.shape
    if qcm.values.shape[:2] != (h, w) or qcm.n_collaborators != len(received):
        raise ShapeMismatch("QCM shape disagrees with ego grid / received list")
    if params.d != ego.d:
        raise ShapeMismatch("attention params width disagrees with features")
    feats, present = _stack_agents(ego, received)
    n = feats.shape[0]
    scale = 1.0 / math.sqrt(params.head_dim)
    head_sum = np.zeros((n, h, w), dtype=np.float64)
    for head in range(params.n_heads):
        q = ego.values @ params.wq[head].T            # (H, W, dh)
        k = feats @ params.wk[head].T                 # (N, H, W, dh)
        e = np.einsum("hwd,nhwd->nhw", q, k) * scale
        e = np.where(present, e, -np.inf)
        m = e.max(axis=0)
        ex = np.where(present, np.exp(e - m), 0.0)
        denom = canonical_sum(ex, axis=0)
        head_sum += ex / denom
    pre = head_sum / params.n_heads                   # (N, H, W)
    conf = np.ones((n, h, w), dtype=np.float64)
    conf[1:] = np.moveaxis(qcm.values, 2, 0)
    values = pre * conf
    return DsaWeights(values=np.moveaxis(values, 0, 2),
                      pre_qcm=np.moveaxis(pre, 0, 2),
                      present=np.moveaxis(present, 0, 2))


def fuse(ego: BevFeatureMap, received: list[SparseFeatureMap | None],
         weights: DsaWeights, params: AttentionParams) -> FusedMap:
    """Weighted agent fusion followed by the residual feed-forward block."""
    feats, _ = _stack_agents(ego, received)
    n, h, w, d = feats.shape
    if weights.values.shape != (h, w, n):
        raise ShapeMismatch("weights shape disagrees with agents")
    m = params.value_matrix()
    values = feats @ m.T                              # (N, H, W, D)
    contrib = values * np.moveaxis(weights.values, 2, 0)[..., None]
    pooled = canonical_sum(contrib, axis=0)           # (H, W, D)
    hidden = np.maximum(pooled @ params.ffn_w1.T + params.ffn_b1, 0.0)
    out = pooled + hidden @ params.ffn_w2.T + params.ffn_b2
    return FusedMap(grid=ego.grid, values=out, attention_trace=weights.values)


def _clusters(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """8-connected components of True cells, in row-major discovery order."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    out = []
    for r0 in range(h):
        for c0 in range(w):
            if not mask[r0, c0] or seen[r0, c0]:
                continue
            queue = deque([(r0, c0)])
            seen[r0, c0] = True
            cluster = []
            while queue:
                r, c = queue.popleft()
                cluster.append((r, c))
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] \
                                and not seen[rr, cc]:
                            seen[rr, cc] = True
                            queue.append((rr, cc))
            out.append(cluster)
    return out


_EVIDENCE_WEIGHT_CAP = 0.5


def decode(fused: FusedMap, conf_threshold: float,
           size_shrink: float | None = None) -> list[RotatedBox]:
    """Cluster above-threshold cells and fit one rotated box per cluster.

    Confidence is the logistic of the channel-0 fused evidence. Each cluster
    yields an evidence-weighted centroid and a second-moment (eigen) size and
    heading estimate. The moment weights saturate at half evidence: a cell
    confirmed by several agents must not outweigh one the ego alone saw fully,
    otherwise attention-scale tilt across a cluster skews the box estimate.
    size_shrink compensates the half-cell halo that any-overlap rasterization
    adds around a vehicle (defaults to one cell).
    """
    if not (0.0 < conf_threshold < 1.0):
        raise ValueError("conf_threshold must lie in (0, 1)")
    grid = fused.grid
    cell = grid.cell_size
    if size_shrink is None:
        size_shrink = cell
    conf = sigmoid(fused.values[:, :, 0])
    boxes = []
    for cluster in _clusters(conf > conf_threshold):
        pts = np.array([grid.center_of(r, c) for r, c in cluster])
        wts = np.array([min(max(fused.values[r, c, 0], 1e-6), _EVIDENCE_WEIGHT_CAP)
                        for r, c in cluster])
        total = wts.sum()
        mu = (pts * wts[:, None]).sum(axis=0) / total
        centered = pts - mu
        cov = (centered.T * wts) @ centered / total
        cov += (cell * cell / 12.0) * np.eye(2)
        eigvals, eigvecs = np.linalg.eigh(cov)
        lam2, lam1 = float(eigvals[0]), float(eigvals[1])
        if lam1 - lam2 < 1e-12:
            axis = np.array([1.0, 0.0])
        else:
            axis = eigvecs[:, 1]
            if axis[0] < 0.0 or (axis[0] == 0.0 and axis[1] < 0.0):
                axis = -axis
        length = max(math.sqrt(12.0 * lam1) - size_shrink, 0.5 * cell)
        width = max(math.sqrt(12.0 * lam2) - size_shrink, 0.5 * cell)
        norm = math.hypot(axis[0], axis[1])
        peak = float(max(conf[r, c] for r, c in cluster))
        boxes.append(RotatedBox(peak, float(mu[0]), float(mu[1]), length, width,
                                float(axis[0] / norm), float(axis[1] / norm)))
    boxes.sort(key=lambda b: -b.confidence)
    return boxes


def attention_trace_csv(fused: FusedMap) -> str:
    """CSV dump of the attention trace: row, col, agent, weight."""
    lines = ["row,col,agent,weight"]
    h, w, n = fused.attention_trace.shape
    for r in range(h):
        for c in range(w):
            for a in range(n):
                lines.append(f"{r},{c},{a},{fused.attention_trace[r, c, a]!r}")
    return "\n".join(lines) + "\n"
