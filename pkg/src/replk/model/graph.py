"""Layer graphs: a flat, topologically ordered list of named nodes.

Each node reads one or more named values and writes exactly one.  Parameters
live outside the graph in a name -> array mapping (``ModelWeights``) with
keys derived from node names:

=======  ==========================================================
conv     ``{name}.weight`` (out, in/groups, K, K), ``{name}.bias``
bn       ``{name}.gamma``, ``.beta``, ``.mean``, ``.var``
linear   ``{name}.weight`` (out, in), ``{name}.bias``
=======  ==========================================================
"""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, Optional

import numpy as np

from ..conv import ConvSpec, ConvWeights, conv2d, conv2d_vjp_input, flops_of, params_of
from ..reparam import BNParams
from ..tensor import Normal, Rng, ShapeError, as_tensor, gelu, gelu_grad, global_avg_pool, relu

ModelWeights = Dict[str, np.ndarray]

OPS = ("conv", "bn", "relu", "gelu", "add", "pool", "linear")
BN_FIELDS = ("gamma", "beta", "mean", "var")


class MissingWeightsError(KeyError):
    pass


@dataclass(frozen=True)
class Node:
    op: str
    name: str
    inputs: tuple
    output: str
    conv: Optional[ConvSpec] = None
    bias: bool = False
    channels: int = 0          # bn: channel count; linear: in features
    out_features: int = 0      # linear only
    eps: float = 1e-5
    role: str = ""

    def __post_init__(self):
        if self.op not in OPS:
            raise ValueError(f"unknown op {self.op!r}")
        if self.op == "conv" and self.conv is None:
            raise ValueError(f"conv node {self.name} has no ConvSpec")
        if self.op == "add" and len(self.inputs) != 2:
            raise ValueError("add takes exactly two inputs")

    def param_shapes(self) -> dict:
        if self.op == "conv":
            shapes = {f"{self.name}.weight": self.conv.weight_shape}
            if self.bias:
                shapes[f"{self.name}.bias"] = (self.conv.out_channels,)
            return shapes
        if self.op == "bn":
            return {f"{self.name}.{f}": (self.channels,) for f in BN_FIELDS}
        if self.op == "linear":
            shapes = {f"{self.name}.weight": (self.out_features, self.channels)}
            if self.bias:
                shapes[f"{self.name}.bias"] = (self.out_features,)
            return shapes
        return {}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inputs"] = list(self.inputs)
        d["conv"] = self.conv.to_dict() if self.conv else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Node":
        d = dict(d)
        d["inputs"] = tuple(d["inputs"])
        d["conv"] = ConvSpec(**d["conv"]) if d.get("conv") else None
        return cls(**d)


@dataclass
class LayerGraph:
    nodes: list
    in_channels: int
    output: str
    input: str = "input"
    meta: dict = field(default_factory=dict)

    # --- structure -------------------------------------------------------
    def producer(self, value: str) -> Optional[Node]:
        for node in self.nodes:
            if node.output == value:
                return node
        return None

    def consumers(self, value: str) -> list:
        return [n for n in self.nodes if value in n.inputs]

    def count_ops(self) -> Counter:
        return Counter(n.op for n in self.nodes)

    def param_shapes(self) -> dict:
        shapes = {}
        for node in self.nodes:
            shapes.update(node.param_shapes())
        return shapes

    @property
    def has_head(self) -> bool:
        return any(n.op in ("pool", "linear") for n in self.nodes)

    def without_head(self) -> "LayerGraph":
        """Drop the classifier head (everything from the first head-role node on)."""
        keep = []
        for node in self.nodes:
            if node.role == "head" or node.op in ("pool", "linear"):
                break
            keep.append(node)
        out = keep[-1].output if keep else self.input
        return LayerGraph(keep, self.in_channels, out, self.input, dict(self.meta, with_head=False))

    def shapes(self, h: int, w: int) -> dict:
        """Annotate every value with its (channels, rows, cols); validates chaining."""
        shapes = {self.input: (self.in_channels, h, w)}
        for node in self.nodes:
            try:
                ins = [shapes[v] for v in node.inputs]
            except KeyError as e:
                raise ShapeError(f"node {node.name} reads undefined value {e.args[0]}") from None
            c, hh, ww = ins[0]
            if node.op == "conv":
                if c != node.conv.in_channels:
                    raise ShapeError(f"{node.name}: expects {node.conv.in_channels} channels, gets {c}")
                shapes[node.output] = (node.conv.out_channels, *node.conv.output_hw(hh, ww))
            elif node.op == "bn":
                if c != node.channels:
                    raise ShapeError(f"{node.name}: BN over {node.channels} channels, gets {c}")
                shapes[node.output] = ins[0]
            elif node.op == "add":
                if ins[0] != ins[1]:
                    raise ShapeError(f"{node.name}: shortcut shapes differ {ins[0]} vs {ins[1]}")
                shapes[node.output] = ins[0]
            elif node.op == "pool":
                shapes[node.output] = (c, 1, 1)
            elif node.op == "linear":
                if (c, hh, ww) != (node.channels, 1, 1):
                    raise ShapeError(f"{node.name}: linear expects ({node.channels},1,1), gets {ins[0]}")
                shapes[node.output] = (node.out_features, 1, 1)
            else:
                shapes[node.output] = ins[0]
        return shapes

    def check_weights(self, weights: ModelWeights) -> None:
        for key, shape in self.param_shapes().items():
            if key not in weights:
                raise MissingWeightsError(f"missing weight {key}")
            if tuple(weights[key].shape) != tuple(shape):
                raise ShapeError(f"weight {key} has shape {weights[key].shape}, expected {shape}")

    # --- serialisation ---------------------------------------------------
    def to_dict(self) -> dict:
        return dict(in_channels=self.in_channels, input=self.input, output=self.output,
                    meta=self.meta, nodes=[n.to_dict() for n in self.nodes])

    @classmethod
    def from_dict(cls, d: dict) -> "LayerGraph":
        return cls([Node.from_dict(n) for n in d["nodes"]], d["in_channels"], d["output"],
                   d.get("input", "input"), d.get("meta", {}))


# --- parameters ------------------------------------------------------------

def conv_weights(node: Node, weights: ModelWeights) -> ConvWeights:
    try:
        return ConvWeights(weights[f"{node.name}.weight"], weights.get(f"{node.name}.bias"))
    except KeyError as e:
        raise MissingWeightsError(f"missing weight {e.args[0]}") from None


def bn_params(node: Node, weights: ModelWeights) -> BNParams:
    try:
        return BNParams(*(weights[f"{node.name}.{f}"] for f in BN_FIELDS), eps=node.eps)
    except KeyError as e:
        raise MissingWeightsError(f"missing weight {e.args[0]}") from None


def init_weights(graph: LayerGraph, seed: int = 0, std: float = 0.02, fan_in: bool = False,
                 random_bn: bool = False) -> ModelWeights:
    """Seeded parameters for every node, in graph order.

    Conv/linear weights are ``normal(0, std)``; with ``fan_in`` the std is
    ``sqrt(2 / fan_in)`` instead.  BN layers start as identity maps unless
    ``random_bn`` draws non-trivial statistics.
    """
    rng = Rng(seed)
    weights: ModelWeights = {}
    for node in graph.nodes:
        shapes = node.param_shapes()
        if node.op in ("conv", "linear"):
            wkey = f"{node.name}.weight"
            shape = shapes[wkey]
            s = float(np.sqrt(2.0 / int(np.prod(shape[1:])))) if fan_in else std
            weights[wkey] = rng.sample(shape, Normal(0.0, s))
            bkey = f"{node.name}.bias"
            if bkey in shapes:
                weights[bkey] = rng.sample(shapes[bkey], Normal(0.0, s)) if random_bn else \
                    np.zeros(shapes[bkey], np.float32)
        elif node.op == "bn":
            c = node.channels
            if random_bn:
                from ..tensor import Uniform

                weights[f"{node.name}.gamma"] = rng.sample((c,), Uniform(0.5, 1.5))
                weights[f"{node.name}.beta"] = rng.sample((c,), Normal(0.0, 0.1))
                weights[f"{node.name}.mean"] = rng.sample((c,), Normal(0.0, 0.1))
                weights[f"{node.name}.var"] = rng.sample((c,), Uniform(0.5, 1.5))
            else:
                weights[f"{node.name}.gamma"] = np.ones(c, np.float32)
                weights[f"{node.name}.beta"] = np.zeros(c, np.float32)
                weights[f"{node.name}.mean"] = np.zeros(c, np.float32)
                weights[f"{node.name}.var"] = np.ones(c, np.float32)
    return weights


# --- evaluation ------------------------------------------------------------

def _last_use(graph: LayerGraph) -> dict:
    last = {}
    for i, node in enumerate(graph.nodes):
        for v in node.inputs:
            last[v] = i
    return last


def forward(graph: LayerGraph, weights: ModelWeights, x, backend: str = "direct",
            tile: int = 8, threads: int = 1, keep: bool = False):
    """Run the graph on ``x``.  With ``keep`` also return every intermediate value."""
    x = as_tensor(x)
    if x.shape[1] != graph.in_channels:
        raise ShapeError(f"graph expects {graph.in_channels} input channels, got {x.shape[1]}")
    if "arch" in graph.meta and graph.has_head and (x.shape[2] % 32 or x.shape[3] % 32):
        raise ShapeError(f"classifier input must be a multiple of 32 per side, got {x.shape[2:]}")
    values = {graph.input: x}
    last = _last_use(graph)
    for i, node in enumerate(graph.nodes):
        ins = [values[v] for v in node.inputs]
        a = ins[0]
        if node.op == "conv":
            out = conv2d(a, conv_weights(node, weights), node.conv, backend=backend,
                         tile=tile, threads=threads)
        elif node.op == "bn":
            out = bn_params(node, weights).apply(a)
        elif node.op == "relu":
            out = relu(a)
        elif node.op == "gelu":
            out = gelu(a)
        elif node.op == "add":
            if a.shape != ins[1].shape:
                raise ShapeError(f"{node.name}: shortcut shapes differ {a.shape} vs {ins[1].shape}")
            out = a + ins[1]
        elif node.op == "pool":
            out = global_avg_pool(a)
        else:  # linear
            w = weights[f"{node.name}.weight"].astype(a.dtype, copy=False)
            out = a.reshape(a.shape[0], -1) @ w.T
            if node.bias:
                out = out + weights[f"{node.name}.bias"].astype(a.dtype, copy=False)
            out = out.reshape(a.shape[0], -1, 1, 1)
        values[node.output] = out
        if not keep:
            for v in node.inputs:
                if last[v] == i and v != graph.output:
                    values.pop(v, None)
    if keep:
        return values[graph.output], values
    return values[graph.output]


def vjp(graph: LayerGraph, weights: ModelWeights, values: dict, grad_output) -> np.ndarray:
    """Pull ``grad_output`` back to the graph input using cached forward values."""
    grads = {graph.output: as_tensor(grad_output)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        a = values[node.inputs[0]]
        if node.op == "conv":
            gin = [conv2d_vjp_input(g, conv_weights(node, weights), node.conv, a.shape)]
        elif node.op == "bn":
            scale, _ = bn_params(node, weights).scale_shift()
            gin = [g * scale.astype(g.dtype).reshape(1, -1, 1, 1)]
        elif node.op == "relu":
            gin = [g * (a > 0)]
        elif node.op == "gelu":
            gin = [g * gelu_grad(a)]
        elif node.op == "add":
            gin = [g, g]
        elif node.op == "pool":
            gin = [np.broadcast_to(g / (a.shape[2] * a.shape[3]), a.shape).astype(g.dtype)]
        else:  # linear
            w = weights[f"{node.name}.weight"].astype(g.dtype, copy=False)
            gin = [(g.reshape(g.shape[0], -1) @ w).reshape(a.shape)]
        for v, gv in zip(node.inputs, gin):
            grads[v] = grads[v] + gv if v in grads else gv
    if graph.input not in grads:
        return np.zeros_like(values[graph.input])
    return grads[graph.input]


def count(graph: LayerGraph, h: int = 224, w: Optional[int] = None) -> tuple:
    """(parameters, multiply-accumulates) at input resolution ``h x w``.

    BN contributes its two affine vectors; running statistics are not counted.
    """
    w = h if w is None else w
    shapes = graph.shapes(h, w)
    params = macs = 0
    for node in graph.nodes:
        if node.op == "conv":
            params += params_of(node.conv, bias=node.bias)
            _, oh, ow = shapes[node.output]
            macs += flops_of(node.conv, oh, ow, 1)
        elif node.op == "bn":
            params += 2 * node.channels
        elif node.op == "linear":
            params += node.channels * node.out_features + (node.out_features if node.bias else 0)
            macs += node.channels * node.out_features
    return params, macs


def rename_value(nodes: Iterable[Node], old: str, new: str) -> list:
    """Replace every read of value ``old`` with ``new``."""
    return [replace(n, inputs=tuple(new if v == old else v for v in n.inputs)) for n in nodes]
