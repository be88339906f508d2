"""Sequential model representation, layer substitution, and cost accounting.

A model is an ordered list of layers plus a record of which contiguous layer
runs came out of decomposing a single original layer. Activations are laid
out ``(batch, height, width, channels)``; conv kernels are ``(d, d, c_out,
c_in)``; fc weights are ``(l_in, l_out)``.

Graphs are treated as immutable values: every transformation returns a new
graph and never mutates its input.

FLOP counts are multiply-accumulate operations of the weight layers only
(biases, activations, and pooling are excluded); one MAC counts as one FLOP.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .decomp import CPFactors, SVDFactors, Tucker2Factors

__all__ = [
    "CONV2D",
    "GROUPED_CONV2D",
    "FC",
    "RELU",
    "MAXPOOL2D",
    "FLATTEN",
    "SOFTMAX_XENT_HEAD",
    "LayerSpec",
    "DecomposedGroup",
    "ModelGraph",
    "conv2d",
    "grouped_conv2d",
    "fc",
    "relu",
    "maxpool2d",
    "flatten",
    "softmax_xent_head",
    "sequential",
    "infer_shapes",
    "substitute_conv_tucker2",
    "substitute_conv_cpd3",
    "substitute_fc_svd",
    "update_group_weights",
    "extract_group_factors",
    "count_params",
    "count_flops",
]

CONV2D = "conv2d"
GROUPED_CONV2D = "grouped_conv2d"
FC = "fc"
RELU = "relu"
MAXPOOL2D = "maxpool2d"
FLATTEN = "flatten"
SOFTMAX_XENT_HEAD = "softmax_xent_head"

_WEIGHT_KINDS = (CONV2D, GROUPED_CONV2D, FC)


@dataclass(frozen=True)
class LayerSpec:
    """One primitive layer. Unused fields stay at their zero defaults.

    ``d``/``stride`` double as the window size and stride of pooling layers.
    """

    kind: str
    id: int = -1
    d: int = 0
    stride: int = 1
    padding: int = 0
    c_in: int = 0
    c_out: int = 0
    groups: int = 1
    l_in: int = 0
    l_out: int = 0
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    def describe(self) -> str:
        if self.kind == CONV2D:
            return f"{self.c_in}x{self.c_out} ({self.d}x{self.d})"
        if self.kind == GROUPED_CONV2D:
            return f"{self.c_in}x{self.c_out} ({self.d}x{self.d}, g={self.groups})"
        if self.kind == FC:
            return f"{self.l_in}x{self.l_out}"
        if self.kind == MAXPOOL2D:
            return f"{self.d}x{self.d}/{self.stride}"
        return ""


def conv2d(
    d: int,
    c_in: int,
    c_out: int,
    stride: int = 1,
    padding: int = 0,
    weights: Optional[np.ndarray] = None,
    bias: Optional[np.ndarray] = None,
) -> LayerSpec:
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (d, d, c_out, c_in):
            raise ValueError(
                f"conv weights must be {(d, d, c_out, c_in)}, got {weights.shape}"
            )
    return LayerSpec(
        kind=CONV2D, d=d, stride=stride, padding=padding, c_in=c_in, c_out=c_out,
        weights=weights, bias=_as_bias(bias, c_out),
    )


def grouped_conv2d(
    d: int,
    channels: int,
    stride: int = 1,
    padding: int = 0,
    weights: Optional[np.ndarray] = None,
    bias: Optional[np.ndarray] = None,
) -> LayerSpec:
    """Depthwise conv: one ``d x d`` filter per channel (groups == channels)."""
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (d, d, channels):
            raise ValueError(
                f"depthwise weights must be {(d, d, channels)}, got {weights.shape}"
            )
    return LayerSpec(
        kind=GROUPED_CONV2D, d=d, stride=stride, padding=padding,
        c_in=channels, c_out=channels, groups=channels,
        weights=weights, bias=_as_bias(bias, channels),
    )


def fc(
    l_in: int,
    l_out: int,
    weights: Optional[np.ndarray] = None,
    bias: Optional[np.ndarray] = None,
) -> LayerSpec:
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (l_in, l_out):
            raise ValueError(f"fc weights must be {(l_in, l_out)}, got {weights.shape}")
    return LayerSpec(kind=FC, l_in=l_in, l_out=l_out, weights=weights,
                     bias=_as_bias(bias, l_out))


def relu() -> LayerSpec:
    return LayerSpec(kind=RELU)


def maxpool2d(size: int, stride: Optional[int] = None) -> LayerSpec:
    return LayerSpec(kind=MAXPOOL2D, d=size, stride=stride if stride else size)


def flatten() -> LayerSpec:
    return LayerSpec(kind=FLATTEN)


def softmax_xent_head() -> LayerSpec:
    return LayerSpec(kind=SOFTMAX_XENT_HEAD)


def _as_bias(bias: Optional[np.ndarray], n: int) -> Optional[np.ndarray]:
    if bias is None:
        return None
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (n,):
        raise ValueError(f"bias must have shape ({n},), got {bias.shape}")
    return bias


@dataclass(frozen=True)
class DecomposedGroup:
    """Bookkeeping for the layer run that replaced one original layer.

    Stores the original layer's hyperparameters so parameter budgets and
    compression ratios can always be computed against the pre-compression
    layer, however many recompressions have happened since.
    """

    scheme: str  # "tucker2" | "cpd3" | "svd"
    member_ids: tuple[int, ...]
    source_id: int
    ranks: tuple[int, ...]  # (r_out, r_in) for tucker2; (r,) for cpd3/svd
    orthonormal: bool = False
    source_kind: str = CONV2D
    d: int = 0
    stride: int = 1
    padding: int = 0
    c_in: int = 0
    c_out: int = 0
    l_in: int = 0
    l_out: int = 0


@dataclass(frozen=True)
class ModelGraph:
    """Ordered layers, decomposition records, and the expected input shape."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]  # (H, W, C)
    groups: tuple[DecomposedGroup, ...] = ()
    next_id: int = 0

    def layer_by_id(self, layer_id: int) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(f"no layer with id {layer_id}")

    def position_of(self, layer_id: int) -> int:
        for pos, layer in enumerate(self.layers):
            if layer.id == layer_id:
                return pos
        raise KeyError(f"no layer with id {layer_id}")

    def group_by_source(self, source_id: int) -> DecomposedGroup:
        for group in self.groups:
            if group.source_id == source_id:
                return group
        raise KeyError(f"no decomposed group with source id {source_id}")

    def in_group(self, layer_id: int) -> bool:
        return any(layer_id in g.member_ids for g in self.groups)


def sequential(
    input_shape: tuple[int, int, int], layers: Iterable[LayerSpec]
) -> ModelGraph:
    """Build a graph from ordered layers, assigning consecutive ids."""
    assigned = tuple(
        replace(layer, id=i) for i, layer in enumerate(layers)
    )
    g = ModelGraph(layers=assigned, input_shape=tuple(input_shape), next_id=len(assigned))
    infer_shapes(g)
    return g


# ---------------------------------------------------------------------------
# Shape inference
# ---------------------------------------------------------------------------


def _conv_extent(size: int, d: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - d) // stride + 1
    if out < 1:
        raise ValueError(
            f"window {d}/stride {stride}/padding {padding} does not fit extent {size}"
        )
    return out


def infer_shapes(g: ModelGraph) -> list[tuple[int, ...]]:
    """Output shape of every layer, validating adjacent compatibility."""
    shape: tuple[int, ...] = tuple(g.input_shape)
    out: list[tuple[int, ...]] = []
    for layer in g.layers:
        if layer.kind in (CONV2D, GROUPED_CONV2D):
            if len(shape) != 3:
                raise ValueError(f"layer {layer.id}: conv input must be HxWxC, got {shape}")
            h, w, c = shape
            if c != layer.c_in:
                raise ValueError(
                    f"layer {layer.id}: expects {layer.c_in} channels, got {c}"
                )
            shape = (
                _conv_extent(h, layer.d, layer.stride, layer.padding),
                _conv_extent(w, layer.d, layer.stride, layer.padding),
                layer.c_out,
            )
        elif layer.kind == MAXPOOL2D:
            h, w, c = shape
            shape = (
                _conv_extent(h, layer.d, layer.stride, 0),
                _conv_extent(w, layer.d, layer.stride, 0),
                c,
            )
        elif layer.kind == FLATTEN:
            shape = (int(np.prod(shape)),)
        elif layer.kind == FC:
            if len(shape) != 1 or shape[0] != layer.l_in:
                raise ValueError(
                    f"layer {layer.id}: fc expects ({layer.l_in},), got {shape}"
                )
            shape = (layer.l_out,)
        elif layer.kind in (RELU, SOFTMAX_XENT_HEAD):
            pass
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        out.append(shape)
    return out


# ---------------------------------------------------------------------------
# Substitution
# ---------------------------------------------------------------------------


def _check_substitutable(g: ModelGraph, layer_id: int, kind: str) -> LayerSpec:
    if g.in_group(layer_id) or any(gr.source_id == layer_id for gr in g.groups):
        raise ValueError(f"layer {layer_id} is already part of a decomposed group")
    layer = g.layer_by_id(layer_id)
    if layer.kind != kind:
        raise ValueError(f"layer {layer_id} is {layer.kind}, expected {kind}")
    if layer.weights is None:
        raise ValueError(f"layer {layer_id} has no weights to factorize")
    return layer


def _splice(
    g: ModelGraph, layer_id: int, members: list[LayerSpec], group: DecomposedGroup
) -> ModelGraph:
    pos = g.position_of(layer_id)
    layers = g.layers[:pos] + tuple(members) + g.layers[pos + 1 :]
    out = replace(g, layers=layers, groups=g.groups + (group,),
                  next_id=g.next_id + len(members))
    infer_shapes(out)
    return out


def _tucker2_members(
    f: Tucker2Factors, src: LayerSpec, ids: tuple[int, int, int]
) -> list[LayerSpec]:
    r_out, r_in = f.rank
    w_first = np.transpose(f.factor_in)[None, None]  # (1, 1, r_in, c_in)
    w_last = f.factor_out[None, None]  # (1, 1, c_out, r_out)
    return [
        replace(conv2d(1, src.c_in, r_in, weights=w_first), id=ids[0]),
        replace(
            conv2d(src.d, r_in, r_out, stride=src.stride, padding=src.padding,
                   weights=f.core),
            id=ids[1],
        ),
        replace(conv2d(1, r_out, src.c_out, weights=w_last, bias=src.bias), id=ids[2]),
    ]


def substitute_conv_tucker2(
    g: ModelGraph, layer_id: int, f: Tucker2Factors
) -> ModelGraph:
    """Replace a conv layer with its Tucker-2 three-layer sequence.

    The sequence is (1x1 in-projection, d x d core conv carrying the original
    stride and padding, 1x1 out-projection). The original bias moves to the
    last member so the affine map is preserved.
    """
    layer = _check_substitutable(g, layer_id, CONV2D)
    f.validate()
    r_out, r_in = f.rank
    if f.core.shape[0] != layer.d or f.factor_out.shape[0] != layer.c_out \
            or f.factor_in.shape[0] != layer.c_in:
        raise ValueError("factor shapes do not match the layer being replaced")
    ids = (g.next_id, g.next_id + 1, g.next_id + 2)
    members = _tucker2_members(f, layer, ids)
    group = DecomposedGroup(
        scheme="tucker2", member_ids=ids, source_id=layer_id,
        ranks=(r_out, r_in), orthonormal=f.orthonormal,
        source_kind=CONV2D, d=layer.d, stride=layer.stride, padding=layer.padding,
        c_in=layer.c_in, c_out=layer.c_out,
    )
    return _splice(g, layer_id, members, group)


def _cpd3_members(
    f: CPFactors, src: LayerSpec, ids: tuple[int, int, int]
) -> list[LayerSpec]:
    r = f.rank
    w_first = np.transpose(f.factor_in)[None, None]  # (1, 1, r, c_in)
    w_depth = np.reshape(f.factor_spatial, (src.d, src.d, r), order="F")
    w_last = f.factor_out[None, None]  # (1, 1, c_out, r)
    return [
        replace(conv2d(1, src.c_in, r, weights=w_first), id=ids[0]),
        replace(
            grouped_conv2d(src.d, r, stride=src.stride, padding=src.padding,
                           weights=w_depth),
            id=ids[1],
        ),
        replace(conv2d(1, r, src.c_out, weights=w_last, bias=src.bias), id=ids[2]),
    ]


def substitute_conv_cpd3(g: ModelGraph, layer_id: int, f: CPFactors) -> ModelGraph:
    """Replace a conv layer with its CP three-layer sequence.

    The middle member is a depthwise conv over the ``R`` rank channels; each
    spatial-factor column becomes one ``d x d`` filter.
    """
    layer = _check_substitutable(g, layer_id, CONV2D)
    f.validate()
    if f.factor_spatial.shape[0] != layer.d * layer.d \
            or f.factor_out.shape[0] != layer.c_out \
            or f.factor_in.shape[0] != layer.c_in:
        raise ValueError("factor shapes do not match the layer being replaced")
    ids = (g.next_id, g.next_id + 1, g.next_id + 2)
    members = _cpd3_members(f, layer, ids)
    group = DecomposedGroup(
        scheme="cpd3", member_ids=ids, source_id=layer_id, ranks=(f.rank,),
        source_kind=CONV2D, d=layer.d, stride=layer.stride, padding=layer.padding,
        c_in=layer.c_in, c_out=layer.c_out,
    )
    return _splice(g, layer_id, members, group)


def _svd_members(f: SVDFactors, src: LayerSpec, ids: tuple[int, int]) -> list[LayerSpec]:
    return [
        replace(fc(src.l_in, f.rank, weights=f.theta_in), id=ids[0]),
        replace(fc(f.rank, src.l_out, weights=f.theta_out, bias=src.bias), id=ids[1]),
    ]


def substitute_fc_svd(g: ModelGraph, layer_id: int, f: SVDFactors) -> ModelGraph:
    """Replace an fc layer with two consecutive fc layers."""
    layer = _check_substitutable(g, layer_id, FC)
    f.validate()
    if f.theta_in.shape[0] != layer.l_in or f.theta_out.shape[1] != layer.l_out:
        raise ValueError("factor shapes do not match the layer being replaced")
    ids = (g.next_id, g.next_id + 1)
    members = _svd_members(f, layer, ids)
    group = DecomposedGroup(
        scheme="svd", member_ids=ids, source_id=layer_id, ranks=(f.rank,),
        source_kind=FC, l_in=layer.l_in, l_out=layer.l_out,
    )
    return _splice(g, layer_id, members, group)


# ---------------------------------------------------------------------------
# Factor extraction and in-place rank updates
# ---------------------------------------------------------------------------


def extract_group_factors(g: ModelGraph, source_id: int):
    """Rebuild the factor object from a group's current member weights."""
    group = g.group_by_source(source_id)
    members = [g.layer_by_id(i) for i in group.member_ids]
    if group.scheme == "tucker2":
        first, mid, last = members
        return Tucker2Factors(
            core=mid.weights,
            factor_out=last.weights[0, 0],
            factor_in=np.transpose(first.weights[0, 0]),
            orthonormal=group.orthonormal,
        )
    if group.scheme == "cpd3":
        first, mid, last = members
        r = group.ranks[0]
        return CPFactors(
            factor_spatial=np.reshape(mid.weights, (group.d * group.d, r), order="F"),
            factor_out=last.weights[0, 0],
            factor_in=np.transpose(first.weights[0, 0]),
        )
    if group.scheme == "svd":
        first, last = members
        return SVDFactors(theta_in=first.weights, theta_out=last.weights)
    raise ValueError(f"unknown scheme {group.scheme!r}")


def update_group_weights(g: ModelGraph, source_id: int, new_factors) -> ModelGraph:
    """Swap a group's member weights for lower-rank factors.

    Member layer shapes shrink to the new ranks; the member count and the
    bias placement are unchanged. Raising the rank is rejected.
    """
    group = g.group_by_source(source_id)
    members = [g.layer_by_id(i) for i in group.member_ids]
    src = LayerSpec(
        kind=group.source_kind, id=group.source_id, d=group.d, stride=group.stride,
        padding=group.padding, c_in=group.c_in, c_out=group.c_out,
        l_in=group.l_in, l_out=group.l_out, bias=members[-1].bias,
    )

    if group.scheme == "tucker2":
        if not isinstance(new_factors, Tucker2Factors):
            raise ValueError("tucker2 group requires Tucker2Factors")
        new_factors.validate()
        r_out, r_in = new_factors.rank
        if r_out > group.ranks[0] or r_in > group.ranks[1]:
            raise ValueError(f"rank increase {(r_out, r_in)} > {group.ranks}")
        new_members = _tucker2_members(new_factors, src, group.member_ids)
        new_group = replace(group, ranks=(r_out, r_in),
                            orthonormal=new_factors.orthonormal)
    elif group.scheme == "cpd3":
        if not isinstance(new_factors, CPFactors):
            raise ValueError("cpd3 group requires CPFactors")
        new_factors.validate()
        if new_factors.rank > group.ranks[0]:
            raise ValueError(f"rank increase {new_factors.rank} > {group.ranks[0]}")
        new_members = _cpd3_members(new_factors, src, group.member_ids)
        new_group = replace(group, ranks=(new_factors.rank,))
    elif group.scheme == "svd":
        if not isinstance(new_factors, SVDFactors):
            raise ValueError("svd group requires SVDFactors")
        new_factors.validate()
        if new_factors.rank > group.ranks[0]:
            raise ValueError(f"rank increase {new_factors.rank} > {group.ranks[0]}")
        new_members = _svd_members(new_factors, src, group.member_ids)
        new_group = replace(group, ranks=(new_factors.rank,))
    else:
        raise ValueError(f"unknown scheme {group.scheme!r}")

    by_id = {m.id: m for m in new_members}
    layers = tuple(by_id.get(layer.id, layer) for layer in g.layers)
    groups = tuple(new_group if gr.source_id == source_id else gr for gr in g.groups)
    out = replace(g, layers=layers, groups=groups)
    infer_shapes(out)
    return out


# ---------------------------------------------------------------------------
# Parameter and FLOP accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamCounts:
    """Exact per-layer parameter counts; weights and biases kept separate."""

    per_layer: dict[int, tuple[int, int]] = field(default_factory=dict)

    @property
    def weight_total(self) -> int:
        return sum(w for w, _ in self.per_layer.values())

    @property
    def bias_total(self) -> int:
        return sum(b for _, b in self.per_layer.values())

    @property
    def total(self) -> int:
        return self.weight_total + self.bias_total


def count_params(g: ModelGraph) -> ParamCounts:
    per_layer: dict[int, tuple[int, int]] = {}
    for layer in g.layers:
        if layer.kind == CONV2D:
            w = layer.d * layer.d * layer.c_out * layer.c_in
        elif layer.kind == GROUPED_CONV2D:
            w = layer.d * layer.d * layer.c_out
        elif layer.kind == FC:
            w = layer.l_in * layer.l_out
        else:
            w = 0
        b = 0 if layer.bias is None else int(layer.bias.shape[0])
        per_layer[layer.id] = (w, b)
    return ParamCounts(per_layer=per_layer)


@dataclass(frozen=True)
class FlopCounts:
    """Per-layer multiply-accumulate counts for one input image."""

    per_layer: dict[int, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.per_layer.values())


def count_flops(
    g: ModelGraph, input_shape: Optional[tuple[int, int, int]] = None
) -> FlopCounts:
    """MACs per layer for a single image of ``input_shape``.

    Conv cost is ``d^2 * (c_in / groups) * c_out * H' * W'``; fc cost is
    ``l_in * l_out``; everything else is free under the MAC convention.
    """
    shapes = infer_shapes(
        g if input_shape is None else replace(g, input_shape=tuple(input_shape))
    )
    per_layer: dict[int, int] = {}
    for layer, out_shape in zip(g.layers, shapes):
        if layer.kind in (CONV2D, GROUPED_CONV2D):
            h, w, _ = out_shape
            macs = layer.d * layer.d * (layer.c_in // layer.groups) * layer.c_out * h * w
        elif layer.kind == FC:
            macs = layer.l_in * layer.l_out
        else:
            macs = 0
        per_layer[layer.id] = int(macs)
    return FlopCounts(per_layer=per_layer)
