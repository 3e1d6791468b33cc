"""Scaled dot-product attention, vanilla and mediator-token variants.

The mediator variant routes all query/key interaction through a small
set of pooled tokens: the mediators first attend over the keys to build
a compressed value table, then the queries attend over the mediators.
Both stages are row-stochastic, so their product is again a valid
attention map, which is what the redundancy tooling consumes.

MAC accounting runs through an optional MacCounter under five fixed
labels (qkv_proj, interaction, pooling, dwconv, out_proj); the analytic
report builders use the same labels so instrumented and closed-form
counts can be compared exactly.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, UsageError
from .tensor import (
    MacCounter,
    Tensor,
    add,
    adaptive_avg_pool2d,
    concat_cols,
    depthwise_conv3x3,
    matmul,
    reshape,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
)

LABEL_QKV = "qkv_proj"
LABEL_INTERACTION = "interaction"
LABEL_POOLING = "pooling"
LABEL_DWCONV = "dwconv"
LABEL_OUT = "out_proj"

_ROW_SUM_TOL = 1e-10


@dataclass(frozen=True)
class AttentionConfig:
    """Token count, channel width, head count, and the spatial grid the
    tokens were rasterised from (row-major)."""

    n_tokens: int
    channels: int
    heads: int
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if min(self.n_tokens, self.channels, self.heads, self.grid_h, self.grid_w) < 1:
            raise ConfigError(f"attention config fields must be positive: {self}")
        if self.channels % self.heads != 0:
            raise ConfigError(
                f"heads ({self.heads}) must divide channels ({self.channels})"
            )
        if self.grid_h * self.grid_w != self.n_tokens:
            raise ConfigError(
                f"grid {self.grid_h}x{self.grid_w} does not cover {self.n_tokens} tokens"
            )

    @property
    def head_dim(self):
        return self.channels // self.heads

    @classmethod
    def square(cls, n_tokens, channels, heads):
        side = math.isqrt(n_tokens)
        if side * side != n_tokens:
            raise ConfigError(f"{n_tokens} tokens do not form a square grid")
        return cls(n_tokens, channels, heads, side, side)


@dataclass(frozen=True)
class MediatorConfig:
    """Spatial shape of the pooled mediator grid."""

    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError(f"mediator grid must be positive: {self}")

    @property
    def count(self):
        return self.grid_h * self.grid_w

    @classmethod
    def from_count(cls, count, cfg):
        """Pick the factorisation of ``count`` whose aspect ratio is
        closest to the token grid's; ties prefer the shorter grid."""
        count = int(count)
        if count < 1:
            raise ConfigError(f"mediator count must be positive, got {count}")
        best = None
        for rows in range(1, count + 1):
            if count % rows:
                continue
            cols = count // rows
            if rows > cfg.grid_h or cols > cfg.grid_w:
                continue
            skew = abs(rows * cfg.grid_w - cols * cfg.grid_h)
            if best is None or skew < best[0]:
                best = (skew, rows, cols)
        if best is None:
            raise ConfigError(
                f"no {count}-token mediator grid fits inside {cfg.grid_h}x{cfg.grid_w}"
            )
        return cls(best[1], best[2])


@dataclass
class MultiHeadParams:
    """Square projection matrices for one attention layer."""

    w_query: Tensor
    w_key: Tensor
    w_value: Tensor
    w_out: Tensor

    @classmethod
    def random(cls, rng, channels, std=None, requires_grad=True):
        std = channels**-0.5 if std is None else std
        draw = lambda: Tensor(rng.normal(0.0, std, (channels, channels)), requires_grad)
        return cls(draw(), draw(), draw(), draw())


def _check_rows_stochastic(array, what):
    sums = array.sum(axis=-1)
    worst = float(np.abs(sums - 1.0).max()) if sums.size else 0.0
    if worst > _ROW_SUM_TOL:
        raise NumericError(f"{what} rows deviate from sum 1 by {worst:.3e}")
    if float(array.min(initial=0.0)) < 0.0:
        raise NumericError(f"{what} contains negative weights")


class AttentionMaps:
    """Per-head attention weights captured from one layer.

    ``kind`` is "full" (one N x N map per head) or "mediated" (an N x n
    query-to-mediator map and an n x N mediator-to-key map per head).
    Arrays are detached copies; construction checks row-stochasticity.
    """

    __slots__ = ("kind", "heads", "query_to_mediator", "mediator_to_key")

    def __init__(self, kind, heads=None, query_to_mediator=None, mediator_to_key=None):
        self.kind = kind
        if kind == "full":
            if not heads:
                raise UsageError("full maps need at least one per-head array")
            self.heads = [np.array(h, dtype=np.float64) for h in heads]
            self.query_to_mediator = None
            self.mediator_to_key = None
            for i, h in enumerate(self.heads):
                if h.ndim != 2 or h.shape[0] != h.shape[1]:
                    raise DimensionError(f"full map {i} must be square, got {h.shape}")
                _check_rows_stochastic(h, f"full attention map {i}")
        elif kind == "mediated":
            if not query_to_mediator or not mediator_to_key:
                raise UsageError("mediated maps need both stages for every head")
            if len(query_to_mediator) != len(mediator_to_key):
                raise DimensionError("mediated stages disagree on head count")
            self.heads = None
            self.query_to_mediator = [np.array(a, dtype=np.float64) for a in query_to_mediator]
            self.mediator_to_key = [np.array(a, dtype=np.float64) for a in mediator_to_key]
            for i, (qt, tk) in enumerate(zip(self.query_to_mediator, self.mediator_to_key)):
                if qt.ndim != 2 or tk.ndim != 2 or qt.shape[1] != tk.shape[0]:
                    raise DimensionError(
                        f"mediated map {i} stages do not chain: {qt.shape} then {tk.shape}"
                    )
                _check_rows_stochastic(qt, f"query-to-mediator map {i}")
                _check_rows_stochastic(tk, f"mediator-to-key map {i}")
        else:
            raise UsageError(f"unknown attention map kind {kind!r}")

    @property
    def head_count(self):
        return len(self.heads if self.kind == "full" else self.query_to_mediator)

    @classmethod
    def full(cls, heads):
        return cls("full", heads=heads)

    @classmethod
    def mediated(cls, query_to_mediator, mediator_to_key):
        return cls("mediated", query_to_mediator=query_to_mediator, mediator_to_key=mediator_to_key)


def composed_attention_map(maps):
    """Collapse mediated maps to per-head N x N maps by chaining the two
    stages. Full maps have nothing to compose and are rejected."""
    if not isinstance(maps, AttentionMaps):
        raise UsageError("composed_attention_map expects an AttentionMaps instance")
    if maps.kind != "mediated":
        raise UsageError("only mediated maps can be composed; full maps already are")
    return [qt @ tk for qt, tk in zip(maps.query_to_mediator, maps.mediator_to_key)]


# ---------------------------------------------------------------------------
# forward passes


def _check_tokens(z, cfg, what):
    if z.ndim != 2 or z.shape != (cfg.n_tokens, cfg.channels):
        raise DimensionError(
            f"{what} expects tokens of shape ({cfg.n_tokens}, {cfg.channels}), got {z.shape}"
        )


def project_qkv(z, params, counter=None):
    """Apply the three input projections."""
    q = matmul(z, params.w_query, counter, LABEL_QKV)
    k = matmul(z, params.w_key, counter, LABEL_QKV)
    v = matmul(z, params.w_value, counter, LABEL_QKV)
    return q, k, v


def _split_heads(x, heads):
    dim = x.shape[1] // heads
    return [slice_cols(x, m * dim, (m + 1) * dim) for m in range(heads)]


def vanilla_attention_head(q, k, v, counter=None):
    """Single-head attention: softmax(q k^T / sqrt(d)) v.

    Returns the head output and the attention map tensor.
    """
    if q.ndim != 2 or q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(
            f"attention head shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    dim = q.shape[1]
    scores = scale(matmul(q, transpose(k), counter, LABEL_INTERACTION), 1.0 / math.sqrt(dim))
    attn = softmax_rows(scores)
    out = matmul(attn, v, counter, LABEL_INTERACTION)
    return out, attn


def multi_head_attention(z, params, cfg, counter=None):
    """Full multi-head self-attention over one token matrix.

    Returns the projected output and the captured full maps.
    """
    _check_tokens(z, cfg, "multi_head_attention")
    q, k, v = project_qkv(z, params, counter)
    outputs, captured = [], []
    for q_h, k_h, v_h in zip(*(_split_heads(x, cfg.heads) for x in (q, k, v))):
        head_out, attn = vanilla_attention_head(q_h, k_h, v_h, counter)
        outputs.append(head_out)
        captured.append(attn.data.copy())
    merged = concat_cols(outputs)
    out = matmul(merged, params.w_out, counter, LABEL_OUT)
    return out, AttentionMaps.full(captured)


def make_mediators(q, cfg, mcfg, counter=None):
    """Pool the query tokens down to the mediator grid.

    The tokens are rasterised back to the spatial grid, average-pooled
    per channel, and flattened row-major. Pooling is channel-separable,
    so pooling the full-width queries and splitting heads afterwards
    equals pooling each head separately.
    """
    _check_tokens(q, cfg, "make_mediators")
    if mcfg.grid_h > cfg.grid_h or mcfg.grid_w > cfg.grid_w:
        raise ConfigError(
            f"mediator grid {mcfg.grid_h}x{mcfg.grid_w} exceeds token grid "
            f"{cfg.grid_h}x{cfg.grid_w}"
        )
    image = reshape(q, (cfg.grid_h, cfg.grid_w, cfg.channels))
    pooled = adaptive_avg_pool2d(image, (mcfg.grid_h, mcfg.grid_w), counter, LABEL_POOLING)
    return reshape(pooled, (mcfg.count, cfg.channels))


def mediator_attention_head(q, k, v, mediators, counter=None):
    """Single-head mediated attention.

    Stage one compresses the values: the mediators attend over the keys.
    Stage two answers the queries against that compressed table. Returns
    the head output plus both stage maps.
    """
    if q.ndim != 2 or q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(
            f"attention head shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    if mediators.ndim != 2 or mediators.shape[1] != q.shape[1]:
        raise DimensionError(
            f"mediator width {mediators.shape} does not match head dim {q.shape[1]}"
        )
    dim = q.shape[1]
    inv_sqrt = 1.0 / math.sqrt(dim)
    med_scores = scale(matmul(mediators, transpose(k), counter, LABEL_INTERACTION), inv_sqrt)
    med_to_key = softmax_rows(med_scores)
    v_med = matmul(med_to_key, v, counter, LABEL_INTERACTION)
    query_scores = scale(matmul(q, transpose(mediators), counter, LABEL_INTERACTION), inv_sqrt)
    query_to_med = softmax_rows(query_scores)
    out = matmul(query_to_med, v_med, counter, LABEL_INTERACTION)
    return out, query_to_med, med_to_key


def mediator_attention(z, params, cfg, mcfg, dw_kernels=None, counter=None):
    """Multi-head mediated attention with the depthwise value branch.

    ``dw_kernels`` is a 3 x 3 x channels tensor applied depthwise to the
    value tokens on the spatial grid and summed into the head outputs
    before the final projection; pass None to drop the branch entirely.
    Returns the projected output and the captured mediated maps.
    """
    _check_tokens(z, cfg, "mediator_attention")
    q, k, v = project_qkv(z, params, counter)
    mediators = make_mediators(q, cfg, mcfg, counter)
    med_heads = _split_heads(mediators, cfg.heads)
    outputs, qt_maps, tk_maps = [], [], []
    for m, (q_h, k_h, v_h) in enumerate(zip(*(_split_heads(x, cfg.heads) for x in (q, k, v)))):
        head_out, query_to_med, med_to_key = mediator_attention_head(
            q_h, k_h, v_h, med_heads[m], counter
        )
        outputs.append(head_out)
        qt_maps.append(query_to_med.data.copy())
        tk_maps.append(med_to_key.data.copy())
    merged = concat_cols(outputs)
    if dw_kernels is not None:
        v_image = reshape(v, (cfg.grid_h, cfg.grid_w, cfg.channels))
        local = depthwise_conv3x3(v_image, dw_kernels, counter, LABEL_DWCONV)
        merged = add(merged, reshape(local, (cfg.n_tokens, cfg.channels)))
    out = matmul(merged, params.w_out, counter, LABEL_OUT)
    return out, AttentionMaps.mediated(qt_maps, tk_maps)


# ---------------------------------------------------------------------------
# MAC accounting


@dataclass(frozen=True)
class FlopsReport:
    """Multiply-accumulate breakdown for one or more attention layers.

    ``total_flops`` counts each MAC as two floating point operations.
    """

    qkv_proj: int = 0
    interaction: int = 0
    pooling: int = 0
    dwconv: int = 0
    out_proj: int = 0

    _FIELDS = ("qkv_proj", "interaction", "pooling", "dwconv", "out_proj")

    @property
    def total_macs(self):
        return self.qkv_proj + self.interaction + self.pooling + self.dwconv + self.out_proj

    @property
    def total_flops(self):
        return 2 * self.total_macs

    def __add__(self, other):
        return FlopsReport(
            *(getattr(self, f) + getattr(other, f) for f in self._FIELDS)
        )

    def times(self, factor):
        factor = int(factor)
        return FlopsReport(*(getattr(self, f) * factor for f in self._FIELDS))

    def to_json_dict(self):
        payload = {f: getattr(self, f) for f in self._FIELDS}
        payload["total_macs"] = self.total_macs
        payload["total_flops"] = self.total_flops
        return payload

    @classmethod
    def from_counter(cls, counter):
        known = set(cls._FIELDS)
        stray = sorted(set(counter.counts) - known)
        if stray:
            raise UsageError(f"counter holds labels outside the report schema: {stray}")
        return cls(*(counter.get(f) for f in cls._FIELDS))


def attention_flops(cfg, layers=1):
    """Closed-form MACs for vanilla attention layers: projections plus
    the two quadratic interaction products."""
    n, c = cfg.n_tokens, cfg.channels
    per_layer = FlopsReport(
        qkv_proj=3 * n * c * c,
        interaction=2 * n * n * c,
        out_proj=n * c * c,
    )
    return per_layer.times(layers)


def mediator_flops(cfg, mediators, layers=1, dw_branch=True):
    """Closed-form MACs for mediated attention layers.

    ``mediators`` is a MediatorConfig or a plain count. The interaction
    term is linear in the token count: four thin products instead of two
    square ones. Pooling is counted as one accumulate per input cell and
    the depthwise branch as nine per cell.
    """
    count = mediators.count if isinstance(mediators, MediatorConfig) else int(mediators)
    if count < 1:
        raise ConfigError(f"mediator count must be positive, got {count}")
    n, c = cfg.n_tokens, cfg.channels
    per_layer = FlopsReport(
        qkv_proj=3 * n * c * c,
        interaction=4 * count * n * c,
        pooling=n * c,
        dwconv=9 * n * c if dw_branch else 0,
        out_proj=n * c * c,
    )
    return per_layer.times(layers)
