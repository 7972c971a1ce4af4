"""Rectifier family used as interchangeable layer activations.

=========  ==============================  =================================
kind       formula                         learnable
=========  ==============================  =================================
relu       max(x, 0)                       none
leaky      max(x, s x), s = 0.01           none
elu        x if x > 0 else a (e^x - 1)     none (a = 1)
prelu      max(x, a_c x)                   a_c per channel, init 0.25
maxout     max(w1 x + b1, w2 x + b2)       per channel, init (1, 0, 0.01, 0)
grelu      max_k (a_nck x + b_nck)         hyperfunction weights
identity   x                               none
=========  ==============================  =================================

Piecewise-linear kinds share :func:`~grelu.autodiff.kmax_affine`, so at a
kink the gradient follows the lowest-index segment.  ReLU, leaky ReLU and
PReLU list the zero/slope side first, which makes their derivative at 0 the
negative-side one (0 for ReLU).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adaptive import GraphContext, GReLU, GReluConfig, make_variant
from .autodiff import Tensor, _record, kmax_affine, relu

KINDS = ("relu", "leaky", "elu", "prelu", "maxout", "grelu", "identity")

TABLE_ONE = ("relu", "leaky", "elu", "prelu", "maxout", "grelu")

_ALIASES = {"leakyrelu": "leaky", "lrelu": "leaky", "leaky_relu": "leaky", "none": "identity"}


@dataclass(frozen=True)
class ActivationSpec:
    kind: str = "relu"
    slope: float = 0.01
    elu_alpha: float = 1.0
    grelu: GReluConfig | None = field(default=None)

    def __post_init__(self):
        kind = _ALIASES.get(self.kind.lower(), self.kind.lower())
        if kind not in KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == "grelu" and self.grelu is None:
            object.__setattr__(self, "grelu", make_variant("A"))
        if kind != "grelu" and self.grelu is not None:
            raise ValueError(f"{kind} takes no GReLU configuration")

    @property
    def label(self) -> str:
        if self.kind == "grelu":
            return f"grelu-{self.grelu.variant}"
        return self.kind


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    d = x.data
    pos = d > 0
    neg = alpha * np.expm1(np.minimum(d, 0.0))
    y = np.where(pos, d, neg)
    return _record(y, (x,), lambda g: (g * np.where(pos, 1.0, neg + alpha),))


class Activation:
    spec: ActivationSpec

    def __call__(self, x: Tensor, ctx=None) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return []

    def decayed_parameters(self) -> list[Tensor]:
        return []

    def __repr__(self):
        return f"{type(self).__name__}()"


class Identity(Activation):
    def __call__(self, x, ctx=None):
        return x


class ReLU(Activation):
    def __call__(self, x, ctx=None):
        return relu(x)


class LeakyReLU(Activation):
    def __init__(self, slope: float = 0.01):
        self.slope = slope

    def __call__(self, x, ctx=None):
        return kmax_affine(x, [Tensor([[self.slope]]), Tensor([[1.0]])])


class ELU(Activation):
    def __init__(self, alpha: float = 1.0):
        self.alpha = alpha

    def __call__(self, x, ctx=None):
        return elu(x, self.alpha)


class PReLU(Activation):
    def __init__(self, channels: int, init: float = 0.25):
        self.alpha = Tensor(np.full((1, channels), init), requires_grad=True)

    def __call__(self, x, ctx=None):
        return kmax_affine(x, [self.alpha, Tensor([[1.0]])])

    def parameters(self):
        return [self.alpha]


class Maxout(Activation):
    """Two affine pieces per channel."""

    def __init__(self, channels: int, init=(1.0, 0.0, 0.01, 0.0)):
        w1, b1, w2, b2 = init
        self.w = [Tensor(np.full((1, channels), w1), requires_grad=True),
                  Tensor(np.full((1, channels), w2), requires_grad=True)]
        self.b = [Tensor(np.full((1, channels), b1), requires_grad=True),
                  Tensor(np.full((1, channels), b2), requires_grad=True)]

    def __call__(self, x, ctx=None):
        return kmax_affine(x, self.w, self.b)

    def parameters(self):
        return self.w + self.b


class AdaptiveActivation(Activation):
    """Adapter exposing :class:`~grelu.adaptive.GReLU` through the common interface."""

    def __init__(self, cfg: GReluConfig, channels: int, in_dim: int | None = None):
        self.unit = GReLU(cfg, channels, in_dim)

    def __call__(self, x, ctx=None):
        if ctx is None:
            raise ValueError("GReLU activation needs the graph context")
        return self.unit(x, ctx)

    def parameters(self):
        return self.unit.parameters()

    def decayed_parameters(self):
        return self.unit.decayed_parameters()

    @property
    def last_params(self):
        return self.unit.last_params

    def __repr__(self):
        return repr(self.unit)


def build_activation(spec: ActivationSpec, channels: int, feature_dim: int | None = None) -> Activation:
    """Instantiate ``spec`` for a layer with ``channels`` outputs."""
    if spec.kind == "relu":
        act = ReLU()
    elif spec.kind == "leaky":
        act = LeakyReLU(spec.slope)
    elif spec.kind == "elu":
        act = ELU(spec.elu_alpha)
    elif spec.kind == "prelu":
        act = PReLU(channels)
    elif spec.kind == "maxout":
        act = Maxout(channels)
    elif spec.kind == "grelu":
        in_dim = feature_dim if spec.grelu.input_source == "raw_features" else channels
        act = AdaptiveActivation(spec.grelu, channels, in_dim)
    else:
        act = Identity()
    act.spec = spec
    return act


def activate(spec, x: Tensor, context: GraphContext | None = None) -> Tensor:
    """Apply an activation given either a built layer or a spec (default parameters)."""
    if isinstance(spec, ActivationSpec):
        if spec.kind == "grelu" and context is None:
            raise ValueError("GReLU activation needs the graph context")
        spec = build_activation(spec, x.cols)
    return spec(x, context)
