"""GNN backbones with a pluggable activation per layer.

* ``gcn``   ``H' = act(A_hat @ drop(H) @ W)``, A_hat with self-loops
* ``mp``    ``H' = act([H | A_hat @ H] @ W)``, the concatenating update
* ``sgc``   ``A_hat^L @ X @ W``, no nonlinearity
* ``appnp`` ``S_ppr @ MLP(X)``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .activations import Activation, ActivationSpec, build_activation
from .adaptive import GraphContext
from .autodiff import SparseMatrix, Tensor, concat_cols, dropout, matmul, sparse_dropout, spmm
from .diffusion import DiffusionConfig, ppr_power
from .graph import Graph, sym_normalize

BACKBONES = ("gcn", "mp", "sgc", "appnp")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-r, r, size=(fan_in, fan_out)), requires_grad=True)


@dataclass
class LayerSpec:
    in_dim: int
    out_dim: int
    weight: Tensor
    activation: Activation | None = None
    dropout_p: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")


@dataclass
class ModelConfig:
    """Architecture recipe; :func:`build_model` turns it into weights."""

    backbone: Literal["gcn", "mp", "sgc", "appnp"] = "gcn"
    hidden: int = 16
    layers: int = 2
    activation: ActivationSpec = field(default_factory=ActivationSpec)
    dropout: float = 0.5
    propagation_depth: int = 2
    self_loops: bool | None = None
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.layers < 1 or self.hidden < 1 or self.propagation_depth < 1:
            raise ValueError("layers, hidden and propagation_depth must be >= 1")

    @property
    def uses_self_loops(self) -> bool:
        if self.self_loops is not None:
            return self.self_loops
        return self.backbone in ("gcn", "sgc")


@dataclass
class ModelSpec:
    backbone: str
    layers: list[LayerSpec]
    propagation_depth: int = 2
    self_loops: bool = True
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[Tensor]:
        ps = []
        for layer in self.layers:
            ps.append(layer.weight)
            if layer.activation is not None:
                ps.extend(layer.activation.parameters())
        return ps

    def decayed_parameters(self) -> list[Tensor]:
        """First-layer weight plus hyperfunction weights."""
        ps = [self.layers[0].weight]
        for layer in self.layers:
            if layer.activation is not None:
                ps.extend(layer.activation.decayed_parameters())
        return ps

    def activations(self) -> list[Activation]:
        return [l.activation for l in self.layers if l.activation is not None]


def build_model(cfg: ModelConfig, in_dim: int, num_classes: int, seed: int) -> ModelSpec:
    rng = np.random.default_rng(seed)
    if cfg.backbone == "sgc":
        layers = [LayerSpec(in_dim, num_classes, glorot(rng, in_dim, num_classes), None, 0.0)]
        return ModelSpec("sgc", layers, cfg.propagation_depth, cfg.uses_self_loops, cfg.diffusion)
    dims = [in_dim] + [cfg.hidden] * (cfg.layers - 1) + [num_classes]
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        fan_in = 2 * d_in if cfg.backbone == "mp" else d_in
        w = glorot(rng, fan_in, d_out)
        last = i == len(dims) - 2
        act = None if last else build_activation(cfg.activation, d_out, in_dim)
        layers.append(LayerSpec(d_in, d_out, w, act, cfg.dropout))
    return ModelSpec(cfg.backbone, layers, cfg.propagation_depth, cfg.uses_self_loops, cfg.diffusion)


SPARSE_FEATURE_DENSITY = 0.1


@dataclass
class Propagation:
    """Normalized adjacencies for one graph, built once per training run.

    Bag-of-words style inputs (under 10% non-zero) also get a CSR copy so the
    first layer can drop out and multiply only the stored entries.
    """

    context: GraphContext
    gcn_adj: SparseMatrix
    self_loops: bool
    sparse_features: SparseMatrix | None = None

    @classmethod
    def of(cls, g: Graph, self_loops: bool = True) -> "Propagation":
        ctx = GraphContext.of(g)
        adj = sym_normalize(g, add_self_loops=True) if self_loops else ctx.diffusion_adj
        x = g.features.data
        sparse = None
        if x.size and np.count_nonzero(x) <= SPARSE_FEATURE_DENSITY * x.size:
            sparse = SparseMatrix.from_dense(x)
        return cls(ctx, adj, self_loops, sparse)


def _input_product(prop: "Propagation", layer: LayerSpec, rng) -> Tensor:
    """``dropout(X) @ W`` for the raw features, sparse when possible."""
    if prop.sparse_features is None:
        return matmul(dropout(prop.context.features, layer.dropout_p, rng), layer.weight)
    return spmm(sparse_dropout(prop.sparse_features, layer.dropout_p, rng), layer.weight)


def _apply(act: Activation | None, z: Tensor, ctx: GraphContext) -> Tensor:
    return z if act is None else act(z, ctx)


def gcn_layer(h: Tensor, norm_adj: SparseMatrix, layer: LayerSpec,
              rng: np.random.Generator | None = None, ctx: GraphContext | None = None) -> Tensor:
    if h.cols != layer.weight.rows:
        raise ValueError(f"gcn_layer: input {h.shape} does not match weight {layer.weight.shape}")
    h = dropout(h, layer.dropout_p, rng)
    return _apply(layer.activation, spmm(norm_adj, matmul(h, layer.weight)), ctx)


def aggregate(h: Tensor, norm_adj: SparseMatrix) -> Tensor:
    """Sum aggregation of neighbour states weighted by the normalized adjacency."""
    return spmm(norm_adj, h)


def mp_update(h: Tensor, m: Tensor, layer: LayerSpec, ctx: GraphContext | None = None) -> Tensor:
    """``act([h | m] @ W)`` with ``W`` of shape ``2 in_dim x out_dim``."""
    if h.shape != m.shape:
        raise ValueError(f"mp_update: state {h.shape} and message {m.shape} differ")
    if layer.weight.rows != 2 * h.cols:
        raise ValueError(f"mp_update: weight {layer.weight.shape} needs {2 * h.cols} rows")
    return _apply(layer.activation, matmul(concat_cols(h, m), layer.weight), ctx)


def propagate(norm_adj: SparseMatrix, x: Tensor, depth: int) -> Tensor:
    for _ in range(depth):
        x = spmm(norm_adj, x)
    return x


def sgc_forward(g: Graph | Propagation, L: int, theta: Tensor) -> Tensor:
    if L < 1:
        raise ValueError("SGC depth L must be >= 1")
    prop = g if isinstance(g, Propagation) else Propagation.of(g, True)
    return matmul(propagate(prop.gcn_adj, prop.context.features, L), theta)


def mlp_forward(x: Tensor | Propagation, layers: list[LayerSpec], ctx: GraphContext | None,
                rng: np.random.Generator | None = None) -> Tensor:
    """Node-wise MLP; pass a :class:`Propagation` to start from its features."""
    h = x
    for i, layer in enumerate(layers):
        if i == 0 and isinstance(x, Propagation):
            z = _input_product(x, layer, rng)
        else:
            z = matmul(dropout(h, layer.dropout_p, rng), layer.weight)
        h = _apply(layer.activation, z, ctx)
    return h


def appnp_forward(g: Graph | Propagation, mlp: list[LayerSpec], cfg: DiffusionConfig,
                  rng: np.random.Generator | None = None) -> Tensor:
    prop = g if isinstance(g, Propagation) else Propagation.of(g, False)
    h = mlp_forward(prop, mlp, prop.context, rng)
    return ppr_power(prop.gcn_adj, h, cfg)


def model_forward(spec: ModelSpec, g: Graph | Propagation, train_mode: bool = False,
                  seed: int | np.random.Generator | None = 0) -> Tensor:
    """Logits for every node.

    In training mode dropout masks come from ``seed`` (an int or a running
    generator); evaluation mode applies no dropout.
    """
    prop = g if isinstance(g, Propagation) else Propagation.of(g, spec.self_loops)
    if prop.self_loops != spec.self_loops:
        raise ValueError("propagation was built with a different self-loop setting")
    ctx = prop.context
    rng = None
    if train_mode:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = ctx.features
    if spec.backbone == "sgc":
        return sgc_forward(prop, spec.propagation_depth, spec.layers[0].weight)
    if spec.backbone == "appnp":
        return appnp_forward(prop, spec.layers, spec.diffusion, rng)
    h = x
    for i, layer in enumerate(spec.layers):
        if spec.backbone == "gcn" and i == 0:
            h = _apply(layer.activation, spmm(prop.gcn_adj, _input_product(prop, layer, rng)), ctx)
        elif spec.backbone == "gcn":
            h = gcn_layer(h, prop.gcn_adj, layer, rng, ctx)
        else:
            h = dropout(h, layer.dropout_p, rng)
            h = mp_update(h, aggregate(h, prop.gcn_adj), layer, ctx)
    return h

