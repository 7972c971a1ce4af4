"""Graph-adaptive rectifier: a K-segment max-affine unit whose slopes and
biases are produced per node and per channel by a small hyperfunction.

Pipeline for an input ``x`` (N x C)::

    E      = PPR-diffuse(source)                 source is x or the raw features
    P      = tanh(mean_rows(E) @ Wc + bc)        1 x 2KC: K slope rows, then K bias rows
    gamma  = N * softmax_nodes(E @ wn + bn)      N x 1, mean 1 (or sum 1 without node_scale)
    a[k]   = gamma * P_alpha[k],  b[k] = gamma * P_beta[k]
    y      = max_k (a[k] * x + b[k])

``E`` only enters through its node mean and the projection ``E @ wn``, both
linear, so neither is formed: the mean uses a cached row ``S^T 1 / N`` and
only the single column ``source @ wn`` is diffused.

The ablation variants switch pieces of this off; see :func:`make_variant`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .autodiff import (
    SparseMatrix,
    Tensor,
    add,
    kmax_affine,
    matmul,
    mul,
    row_mean,
    softmax_cols,
    take_cols,
    tanh_elem,
)
from .diffusion import DiffusionConfig, diffuse_features, mean_row
from .graph import Graph, sym_normalize

# tanh(20.0) rounds to exactly 1.0 in double precision
SATURATED_BIAS = 20.0

VARIANTS = "ABCDEFG"


@dataclass(frozen=True)
class GReluConfig:
    K: int = 2
    use_adjacency: bool = True
    use_bias: bool = True
    node_block: bool = True
    channel_block: bool = True
    node_scale: bool = True
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    input_source: Literal["layer_input", "raw_features"] = "layer_input"
    variant: str = "A"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if not (self.node_block or self.channel_block):
            raise ValueError("at least one of node_block and channel_block must be on")
        if self.input_source not in ("layer_input", "raw_features"):
            raise ValueError(f"unknown input_source {self.input_source!r}")


def make_variant(tag: str, **overrides) -> GReluConfig:
    """Flag combination of an ablation variant.

    A  full model (K=2, diffusion over the adjacency, biases, both blocks)
    B  A without the adjacency: the hyperfunction sees the input only
    C  A with K=1 (a learned per-node, per-channel affine reweighting)
    D  C without the adjacency
    E  A with the biases dropped
    F  channel block only: every node shares the channel parameters
    G  node block only: slopes shared across channels, no biases
    """
    tag = tag.upper()
    table = {
        "A": {},
        "B": {"use_adjacency": False},
        "C": {"K": 1},
        "D": {"K": 1, "use_adjacency": False},
        "E": {"use_bias": False},
        "F": {"node_block": False},
        "G": {"channel_block": False, "use_bias": False},
    }
    if tag not in table:
        raise ValueError(f"unknown GReLU variant {tag!r}; expected one of {VARIANTS}")
    kw = {**table[tag], **overrides}
    return GReluConfig(variant=tag, **kw)


@dataclass
class GraphContext:
    """Per-graph constants shared by every layer of a forward pass."""

    graph: Graph
    diffusion_adj: SparseMatrix
    features: Tensor
    _mean_rows: dict = field(default_factory=dict, repr=False)

    @classmethod
    def of(cls, g: Graph) -> "GraphContext":
        return cls(g, sym_normalize(g, add_self_loops=False), g.features)

    def mean_row(self, cfg: DiffusionConfig) -> np.ndarray:
        """Cached row that maps an input to the node mean of its diffusion."""
        if cfg not in self._mean_rows:
            self._mean_rows[cfg] = mean_row(self.diffusion_adj, cfg)
        return self._mean_rows[cfg]


@dataclass
class HyperWeights:
    """Learnable maps of the hyperfunction.

    ``channel_w`` is ``in_dim x 2KC`` and ``channel_b`` is ``1 x 2KC``.  With
    the channel block off there is no ``channel_w`` and ``channel_b`` holds
    ``2K`` channel-shared values.  ``node_w``/``node_b`` are ``None`` with the
    node block off.
    """

    channel_w: Tensor | None
    channel_b: Tensor
    node_w: Tensor | None
    node_b: Tensor | None
    K: int
    channels: int

    @classmethod
    def relu_init(cls, cfg: GReluConfig, in_dim: int, channels: int) -> "HyperWeights":
        """Zero weights; biases chosen so the unit starts as exactly ReLU.

        The last segment gets slope tanh(20) == 1, every other segment slope 0,
        all biases 0.  For K=1 this is the identity map.
        """
        K = cfg.K
        width = channels if cfg.channel_block else 1
        b = np.zeros((1, 2 * K * width))
        b[0, (K - 1) * width:K * width] = SATURATED_BIAS
        cw = Tensor(np.zeros((in_dim, 2 * K * width)), requires_grad=True) if cfg.channel_block else None
        nw = nb = None
        if cfg.node_block:
            nw = Tensor(np.zeros((in_dim, 1)), requires_grad=True)
            nb = Tensor(np.zeros((1, 1)), requires_grad=True)
        return cls(cw, Tensor(b, requires_grad=True), nw, nb, K, channels)

    @classmethod
    def random(cls, cfg: GReluConfig, in_dim: int, channels: int,
               rng: np.random.Generator, scale: float = 0.5) -> "HyperWeights":
        w = cls.relu_init(cfg, in_dim, channels)
        for t in w.parameters():
            t.data = scale * rng.standard_normal(t.shape)
        return w

    def parameters(self) -> list[Tensor]:
        return [t for t in (self.channel_w, self.channel_b, self.node_w, self.node_b) if t is not None]

    def count(self) -> int:
        return sum(t.data.size for t in self.parameters())


def channel_params(e_bar: Tensor | None, w: HyperWeights) -> tuple[list[Tensor], list[Tensor]]:
    """Per-segment channel slopes and biases, each ``1 x C`` and inside (-1, 1).

    ``P = tanh(e_bar @ Wc + bc)`` laid out as K slope blocks followed by K bias
    blocks.  Without a channel map (``e_bar`` unused) the blocks are ``1 x 1``
    and shared by all channels.
    """
    K = w.K
    if w.channel_w is None:
        p = tanh_elem(w.channel_b)
        width = 1
    else:
        if e_bar is None or e_bar.shape != (1, w.channel_w.rows):
            got = None if e_bar is None else e_bar.shape
            raise ValueError(f"channel block expects a 1 x {w.channel_w.rows} summary, got {got}")
        p = tanh_elem(add(matmul(e_bar, w.channel_w), w.channel_b))
        width = w.channels
    alphas = [take_cols(p, k * width, (k + 1) * width) for k in range(K)]
    betas = [take_cols(p, (K + k) * width, (K + k + 1) * width) for k in range(K)]
    return alphas, betas


def node_params(e: Tensor, w: HyperWeights, node_scale: bool) -> Tensor:
    """One weight per node: softmax over nodes of ``e @ wn + bn``.

    Sums to 1, or to N (mean 1) when ``node_scale`` is set.
    """
    if w.node_w is None:
        raise ValueError("node block is disabled for these weights")
    return _node_softmax(add(matmul(e, w.node_w), w.node_b), node_scale)


def _node_softmax(logits: Tensor, node_scale: bool) -> Tensor:
    return softmax_cols(logits, total=float(logits.rows) if node_scale else 1.0)


def compose_params(alphas, betas, gamma):
    """Outer product of the node weights with each segment's channel parameters."""
    if gamma is None:
        return list(alphas), (None if betas is None else list(betas))
    comp_a = [mul(gamma, a) for a in alphas]
    comp_b = None if betas is None else [mul(gamma, b) for b in betas]
    return comp_a, comp_b


@dataclass
class GReluParams:
    """Snapshot of hyperfunction outputs for one forward pass (plain arrays)."""

    alpha_c: np.ndarray      # K x C (K x 1 when channel-shared)
    beta_c: np.ndarray | None
    gamma: np.ndarray | None  # N x 1
    n: int
    channels: int

    @property
    def K(self) -> int:
        return self.alpha_c.shape[0]

    def composed(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``K x N x C`` slopes and biases (zeros when biases are off)."""
        g = np.ones((self.n, 1)) if self.gamma is None else self.gamma
        shape = (self.K, self.n, self.channels)
        a = np.broadcast_to(g[None] * self.alpha_c[:, None, :], shape).copy()
        if self.beta_c is None:
            return a, np.zeros(shape)
        b = np.broadcast_to(g[None] * self.beta_c[:, None, :], shape).copy()
        return a, b

    def factor_count(self) -> int:
        """Numbers needed to describe the composed parameters in factored form.

        Each of the 2K composed N x C matrices is an outer product of an N-vector
        and a C-vector, so the factored form needs 2K(C + N) numbers against
        2KCN for free per-node, per-channel parameters.
        """
        return 2 * self.K * (self.channels + self.n)


def hyperfunction(x: Tensor, cfg: GReluConfig, w: HyperWeights, ctx: GraphContext):
    """Composed per-segment slopes and biases for input ``x``.

    Returns ``(alphas, betas, snapshot)``; ``betas`` is ``None`` when the
    variant drops biases.
    """
    alphas, betas, gamma, snap = _factors(x, cfg, w, ctx)
    comp_a, comp_b = compose_params(alphas, betas, gamma)
    return comp_a, comp_b, snap


def _factors(x: Tensor, cfg: GReluConfig, w: HyperWeights, ctx: GraphContext):
    if cfg.input_source == "layer_input":
        src = x
    else:
        src = ctx.features
    if src.rows != ctx.graph.n:
        raise ValueError(f"hyperfunction input has {src.rows} rows for {ctx.graph.n} nodes")
    if cfg.use_adjacency:
        if cfg.diffusion.stop_gradient:
            src = src.detach()
        e_bar = matmul(Tensor(ctx.mean_row(cfg.diffusion)), src) if cfg.channel_block else None
    else:
        e_bar = row_mean(src) if cfg.channel_block else None
    alphas, betas = channel_params(e_bar, w)
    if not cfg.use_bias:
        betas = None
    gamma = None
    if cfg.node_block:
        if w.node_w is None:
            raise ValueError("node block is disabled for these weights")
        proj = matmul(src, w.node_w)
        if cfg.use_adjacency:
            proj = diffuse_features(proj, cfg.diffusion, ctx.diffusion_adj)
        gamma = _node_softmax(add(proj, w.node_b), cfg.node_scale)
    snap = GReluParams(
        alpha_c=np.vstack([a.data for a in alphas]),
        beta_c=None if betas is None else np.vstack([b.data for b in betas]),
        gamma=None if gamma is None else gamma.data.copy(),
        n=x.rows,
        channels=x.cols,
    )
    return alphas, betas, gamma, snap


def _apply(x: Tensor, cfg: GReluConfig, w: HyperWeights, ctx: GraphContext):
    # gamma > 0, so max_k(gamma (a_k x + b_k)) = gamma max_k(a_k x + b_k)
    alphas, betas, gamma, snap = _factors(x, cfg, w, ctx)
    return kmax_affine(x, alphas, betas, scale=gamma), snap


def grelu_forward(x: Tensor, cfg: GReluConfig, w: HyperWeights, ctx: GraphContext | Graph) -> Tensor:
    if isinstance(ctx, Graph):
        ctx = GraphContext.of(ctx)
    if x.cols != w.channels:
        raise ValueError(f"input has {x.cols} channels, hyperfunction built for {w.channels}")
    return _apply(x, cfg, w, ctx)[0]


class GReLU:
    """Graph-adaptive rectifier layer holding its own hyperfunction weights."""

    def __init__(self, cfg: GReluConfig, channels: int, in_dim: int | None = None):
        self.cfg = cfg
        self.channels = channels
        if in_dim is None:
            if cfg.input_source == "raw_features":
                raise ValueError("raw_features input needs the feature dimension")
            in_dim = channels
        self.weights = HyperWeights.relu_init(cfg, in_dim, channels)
        self.last_params: GReluParams | None = None

    def __call__(self, x: Tensor, ctx: GraphContext | Graph | None) -> Tensor:
        if ctx is None:
            raise ValueError("GReLU needs the graph context")
        if isinstance(ctx, Graph):
            ctx = GraphContext.of(ctx)
        y, self.last_params = _apply(x, self.cfg, self.weights, ctx)
        return y

    def parameters(self) -> list[Tensor]:
        return self.weights.parameters()

    def decayed_parameters(self) -> list[Tensor]:
        return self.weights.parameters()

    def __repr__(self):
        return f"GReLU(variant={self.cfg.variant}, K={self.cfg.K}, channels={self.channels})"


# ---------------------------------------------------------------------------
# inspection dump


INSPECT_HEADER = ("node", "channel", "k", "alpha", "beta")


def inspect_rows(alpha: np.ndarray, beta: np.ndarray, sample: int, seed: int = 0) -> list[tuple]:
    """Sample (node, channel) pairs uniformly without replacement.

    ``alpha``/``beta`` are composed ``K x N x C`` arrays.  Returns ``sample * K``
    rows ``(node, channel, k, alpha, beta)`` with ``k`` counted from 1.
    """
    K, n, c = alpha.shape
    if sample > n * c:
        raise ValueError(f"cannot sample {sample} pairs from {n * c}")
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(n * c, size=sample, replace=False))
    rows = []
    for idx in flat:
        node, ch = divmod(int(idx), c)
        for k in range(K):
            rows.append((node, ch, k + 1, float(alpha[k, node, ch]), float(beta[k, node, ch])))
    return rows


def inspect_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(INSPECT_HEADER)
    for node, ch, k, a, b in rows:
        writer.writerow((node, ch, k, repr(a), repr(b)))
    return buf.getvalue()


def with_k(cfg: GReluConfig, K: int) -> GReluConfig:
    return replace(cfg, K=K)
