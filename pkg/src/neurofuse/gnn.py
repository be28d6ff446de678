"""Message-passing layers over dense weighted adjacency matrices.

Three interchangeable layer kinds (gcn, gine, gat) plus an MLP and mean
pooling. Edge weights enter each kind differently: gcn through the
symmetrically normalized adjacency, gine through a learned affine lift of
the scalar weight, gat as an additive attention-logit term. All three keep
the layer differentiable with respect to the adjacency itself, which is
what lets importance masks receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    div,
    exp,
    leaky_relu,
    matmul,
    mul,
    relu,
    reshape,
    rsqrt,
    slice_rows,
    sub,
    take_row,
    tensor_mean,
    tensor_sum,
    tile_cols,
    tile_rows,
    transpose,
)

LEAKY_SLOPE = 0.2
NEG_MASK = -1e9  # additive logit mask; exp underflows to exactly 0.0


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class MLPParams:
    """Affine/relu stack; no activation after the last layer."""

    layers: list[tuple[Tensor, Tensor]]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]


def init_mlp(dims: list[int], rng: np.random.Generator) -> MLPParams:
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        w = glorot(rng, d_in, d_out, (d_in, d_out))
        b = Tensor(np.zeros((1, d_out)), requires_grad=True)
        layers.append((w, b))
    return MLPParams(layers=layers)


def mlp_forward(x: Tensor, p: MLPParams) -> Tensor:
    if x.shape[-1] != p.layers[0][0].shape[0]:
        raise ShapeError(
            f"mlp_forward: input dim {x.shape[-1]} does not match weight "
            f"{p.layers[0][0].shape}"
        )
    h = x
    last = len(p.layers) - 1
    for i, (w, b) in enumerate(p.layers):
        h = add(matmul(h, w), tile_rows(b, h.shape[0]))
        if i < last:
            h = relu(h)
    return h


@dataclass
class GcnParams:
    kind = "gcn"
    weight: Tensor
    bias: Tensor


@dataclass
class GineParams:
    kind = "gine"
    eps: Tensor
    edge_weight: Tensor  # (1, d_in) lift of the scalar edge weight
    edge_bias: Tensor  # (1, d_in)
    mlp: MLPParams


@dataclass
class GatHeadParams:
    theta: Tensor
    att_src: Tensor  # (d_head, 1)
    att_dst: Tensor  # (d_head, 1)
    edge_coef: Tensor  # scalar, scales the edge weight into the logit


@dataclass
class GatParams:
    kind = "gat"
    heads: list[GatHeadParams]
    bias: Tensor


LayerParams = Union[GcnParams, GineParams, GatParams]


def init_layer(
    kind: str, d_in: int, d_out: int, rng: np.random.Generator, heads: int = 1
) -> LayerParams:
    if kind == "gcn":
        return GcnParams(
            weight=glorot(rng, d_in, d_out, (d_in, d_out)),
            bias=Tensor(np.zeros((1, d_out)), requires_grad=True),
        )
    if kind == "gine":
        return GineParams(
            eps=Tensor(0.0, requires_grad=True),
            edge_weight=glorot(rng, 1, d_in, (1, d_in)),
            edge_bias=Tensor(np.zeros((1, d_in)), requires_grad=True),
            mlp=init_mlp([d_in, d_out, d_out], rng),
        )
    if kind == "gat":
        if d_out % heads != 0:
            raise ShapeError(f"gat: output dim {d_out} not divisible by {heads} heads")
        dh = d_out // heads
        head_params = [
            GatHeadParams(
                theta=glorot(rng, d_in, dh, (d_in, dh)),
                att_src=glorot(rng, dh, 1, (dh, 1)),
                att_dst=glorot(rng, dh, 1, (dh, 1)),
                edge_coef=Tensor(1.0, requires_grad=True),
            )
            for _ in range(heads)
        ]
        return GatParams(heads=head_params, bias=Tensor(np.zeros((1, d_out)), requires_grad=True))
    raise ValueError(f"unknown layer kind {kind!r}")


def _check_adjacency(w_adj: Tensor, opname: str) -> None:
    d = w_adj.data
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ShapeError(f"{opname}: adjacency must be square, got {d.shape}")
    if not np.array_equal(d, d.T):
        raise ShapeError(f"{opname}: adjacency is not symmetric")


def gcn_layer(x: Tensor, w_adj: Tensor, p: GcnParams, activate: bool = True) -> Tensor:
    """X' = act(D^-1/2 (W+I) D^-1/2 X Theta), degrees from W+I row sums."""
    _check_adjacency(w_adj, "gcn_layer")
    v = x.shape[0]
    a_hat = add(w_adj, Tensor(np.eye(v)))
    deg = tensor_sum(a_hat, axis=1, keepdims=True)
    dinv = rsqrt(deg)
    norm = mul(mul(a_hat, tile_cols(dinv, v)), tile_rows(transpose(dinv), v))
    out = add(matmul(matmul(norm, x), p.weight), tile_rows(p.bias, v))
    return relu(out) if activate else out


def gine_layer(x: Tensor, w_adj: Tensor, p: GineParams) -> Tensor:
    """x'_i = MLP((1+eps) x_i + sum_{j: w_ij>0} relu(x_j + lift(w_ij)))."""
    _check_adjacency(w_adj, "gine_layer")
    v, d = x.shape
    support = (w_adj.data > 0).astype(np.float64)
    scale = add(p.eps, 1.0)
    rows = []
    for i in range(v):
        wcol = transpose(take_row(w_adj, i))  # (V, 1), differentiable in w
        lifted = add(matmul(wcol, p.edge_weight), tile_rows(p.edge_bias, v))
        msgs = mul(relu(add(x, lifted)), tile_cols(Tensor(support[i : i + 1].T), d))
        agg = add(mul(take_row(x, i), scale), tensor_sum(msgs, axis=0, keepdims=True))
        rows.append(agg)
    return mlp_forward(concat(rows, axis=0), p.mlp)


def _masked_row_softmax(e: Tensor, allowed: np.ndarray) -> Tensor:
    # Row max is taken over allowed entries only and treated as a constant,
    # so disallowed columns cannot perturb the result bitwise.
    v = e.shape[0]
    bias = np.where(allowed, 0.0, NEG_MASK)
    shifted = add(e, Tensor(bias))
    row_max = Tensor(np.max(shifted.data, axis=1, keepdims=True))
    z = exp(sub(shifted, tile_cols(row_max, v)))
    denom = tensor_sum(z, axis=1, keepdims=True)
    return div(z, tile_cols(denom, v))


def gat_layer(x: Tensor, w_adj: Tensor, p: GatParams) -> Tensor:
    """Attention over N(i) plus self; logits get edge_coef * w_ij added."""
    _check_adjacency(w_adj, "gat_layer")
    v = x.shape[0]
    allowed = (w_adj.data > 0) | np.eye(v, dtype=bool)
    outs = []
    for h in p.heads:
        hx = matmul(x, h.theta)
        src = matmul(hx, h.att_src)  # (V, 1)
        dst = matmul(hx, h.att_dst)  # (V, 1)
        e = leaky_relu(add(tile_cols(src, v), tile_rows(transpose(dst), v)), LEAKY_SLOPE)
        e = add(e, mul(h.edge_coef, w_adj))
        attn = _masked_row_softmax(e, allowed)
        outs.append(matmul(attn, hx))
    out = outs[0] if len(outs) == 1 else concat(outs, axis=1)
    return add(out, tile_rows(p.bias, v))


def layer_forward(x: Tensor, w_adj: Tensor, p: LayerParams, activate: bool = True) -> Tensor:
    if isinstance(p, GcnParams):
        return gcn_layer(x, w_adj, p, activate=activate)
    if isinstance(p, GineParams):
        return gine_layer(x, w_adj, p)
    if isinstance(p, GatParams):
        return gat_layer(x, w_adj, p)
    raise TypeError(f"unknown layer params {type(p)}")


def mean_pool(x: Tensor) -> Tensor:
    """Column means of a (V, d) node-embedding matrix; returns shape (d,)."""
    if x.shape[0] < 1:
        raise ShapeError("mean_pool: empty node set")
    return reshape(tensor_mean(x, axis=0, keepdims=True), (x.shape[1],))


def named_mlp_params(prefix: str, p: MLPParams) -> list[tuple[str, Tensor]]:
    out = []
    for i, (w, b) in enumerate(p.layers):
        out.append((f"{prefix}.{i}.weight", w))
        out.append((f"{prefix}.{i}.bias", b))
    return out


def named_layer_params(prefix: str, p: LayerParams) -> list[tuple[str, Tensor]]:
    if isinstance(p, GcnParams):
        return [(f"{prefix}.weight", p.weight), (f"{prefix}.bias", p.bias)]
    if isinstance(p, GineParams):
        return [
            (f"{prefix}.eps", p.eps),
            (f"{prefix}.edge_weight", p.edge_weight),
            (f"{prefix}.edge_bias", p.edge_bias),
        ] + named_mlp_params(f"{prefix}.mlp", p.mlp)
    if isinstance(p, GatParams):
        out = []
        for i, h in enumerate(p.heads):
            out.extend(
                [
                    (f"{prefix}.heads.{i}.theta", h.theta),
                    (f"{prefix}.heads.{i}.att_src", h.att_src),
                    (f"{prefix}.heads.{i}.att_dst", h.att_dst),
                    (f"{prefix}.heads.{i}.edge_coef", h.edge_coef),
                ]
            )
        out.append((f"{prefix}.bias", p.bias))
        return out
    raise TypeError(f"unknown layer params {type(p)}")
