"""Training-form -> deploy-form graph conversion.

Passes, in order:

1. parallel depth-wise branches ``conv-bn + conv-bn -> add`` merge into one
   biased conv;
2. every ``conv -> bn`` pair folds into the conv;
3. a BN read only by padding-free 1x1 convs folds into those convs;
4. ``bn -> pool -> linear`` folds into the linear layer;
5. any BN still left becomes a depth-wise 1x1 conv with bias.

The result has no BN nodes and no small branches.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..conv import ConvSpec, ConvWeights
from ..reparam import BranchedConv, fuse_bn, merge_branches
from .graph import BN_FIELDS, LayerGraph, ModelWeights, Node, bn_params, conv_weights, rename_value


class _Rewriter:
    def __init__(self, graph: LayerGraph, weights: ModelWeights):
        self.nodes = list(graph.nodes)
        self.weights = dict(weights)
        self.output = graph.output
        self.graph = graph

    def producer(self, value):
        return next((n for n in self.nodes if n.output == value), None)

    def consumers(self, value):
        return [n for n in self.nodes if value in n.inputs]

    def sole_consumer(self, value):
        users = self.consumers(value)
        if len(users) == 1 and value != self.output:
            return users[0]
        return None

    def node(self, name):
        return next((n for n in self.nodes if n.name == name), None)

    def names(self, op):
        return [n.name for n in self.nodes if n.op == op]

    def drop(self, *nodes):
        names = {n.name for n in nodes}
        self.nodes = [n for n in self.nodes if n.name not in names]
        for n in nodes:
            for key in n.param_shapes():
                self.weights.pop(key, None)

    def swap(self, old: Node, new: Node):
        idx = next(i for i, n in enumerate(self.nodes) if n.name == old.name)
        self.nodes[idx] = new

    def redirect(self, old_value, new_value):
        self.nodes = rename_value(self.nodes, old_value, new_value)
        if self.output == old_value:
            self.output = new_value

    def set_conv(self, node: Node, fused: ConvWeights):
        self.weights[f"{node.name}.weight"] = fused.weight.astype(np.float32)
        self.weights[f"{node.name}.bias"] = fused.bias.astype(np.float32)

    # --- passes ----------------------------------------------------------
    def merge_branches(self):
        for name in self.names("add"):
            add = self.node(name)
            pair = []
            for v in add.inputs:
                bn = self.producer(v)
                conv = self.producer(bn.inputs[0]) if bn is not None and bn.op == "bn" else None
                if conv is None or conv.op != "conv" or not conv.conv.depthwise:
                    break
                if self.sole_consumer(conv.output) is not bn or self.sole_consumer(bn.output) is not add:
                    break
                pair.append((conv, bn))
            if len(pair) != 2:
                continue
            (ca, ba), (cb, bb) = sorted(pair, key=lambda p: -p[0].conv.kernel_size)
            sa, sb = ca.conv, cb.conv
            if (ca.inputs != cb.inputs or sa.stride != sb.stride or sa.groups != sb.groups
                    or sa.dilation != 1 or sb.dilation != 1
                    or sa.out_channels != sb.out_channels
                    or (sa.kernel_size - sb.kernel_size) % 2):
                continue
            fused = merge_branches(BranchedConv(
                (conv_weights(ca, self.weights), bn_params(ba, self.weights)),
                (conv_weights(cb, self.weights), bn_params(bb, self.weights)),
            ))
            merged = replace(ca, output=add.output, bias=True, role="")
            self.drop(ba, cb, bb, add)
            self.swap(ca, merged)
            self.set_conv(merged, fused)

    def fold_conv_bn(self):
        for name in self.names("bn"):
            bn = self.node(name)
            conv = self.producer(bn.inputs[0])
            if conv is None or conv.op != "conv" or self.sole_consumer(conv.output) is not bn:
                continue
            fused = fuse_bn(conv_weights(conv, self.weights), bn_params(bn, self.weights))
            merged = replace(conv, output=bn.output, bias=True, role="")
            self.drop(bn)
            self.swap(conv, merged)
            self.set_conv(merged, fused)

    def fold_bn_into_pointwise(self):
        for name in self.names("bn"):
            bn = self.node(name)
            users = self.consumers(bn.output)
            if not users or bn.output == self.output:
                continue
            if not all(u.op == "conv" and u.conv.kernel_size == 1 and u.conv.padding == 0
                       for u in users):
                continue
            scale, shift = bn_params(bn, self.weights).scale_shift()
            for u in users:
                cw = conv_weights(u, self.weights)
                w = cw.weight.astype(np.float64)
                if u.conv.groups == 1:
                    new_w = w * scale.reshape(1, -1, 1, 1)
                    new_b = cw.bias.astype(np.float64) + w[:, :, 0, 0] @ shift
                else:
                    new_w = w * scale.reshape(-1, 1, 1, 1)
                    new_b = cw.bias.astype(np.float64) + w[:, 0, 0, 0] * shift
                merged = replace(u, bias=True)
                self.swap(u, merged)
                self.set_conv(merged, ConvWeights(new_w, new_b))
            self.drop(bn)
            self.redirect(bn.output, bn.inputs[0])

    def fold_bn_into_head(self):
        for name in self.names("bn"):
            bn = self.node(name)
            pool = self.sole_consumer(bn.output)
            if pool is None or pool.op != "pool":
                continue
            lin = self.sole_consumer(pool.output)
            if lin is None or lin.op != "linear":
                continue
            scale, shift = bn_params(bn, self.weights).scale_shift()
            w = self.weights[f"{lin.name}.weight"].astype(np.float64)
            b = self.weights.get(f"{lin.name}.bias", np.zeros(w.shape[0])).astype(np.float64)
            merged = replace(lin, bias=True)
            self.swap(lin, merged)
            self.weights[f"{lin.name}.weight"] = (w * scale[None, :]).astype(np.float32)
            self.weights[f"{lin.name}.bias"] = (b + w @ shift).astype(np.float32)
            self.drop(bn)
            self.redirect(bn.output, bn.inputs[0])

    def bn_to_conv(self):
        for name in self.names("bn"):
            bn = self.node(name)
            scale, shift = bn_params(bn, self.weights).scale_shift()
            c = bn.channels
            spec = ConvSpec(1, c, c, groups=c if c > 1 else 1)
            conv = Node("conv", bn.name, bn.inputs, bn.output, conv=spec, bias=True, role=bn.role)
            for f in BN_FIELDS:
                self.weights.pop(f"{bn.name}.{f}", None)
            self.swap(bn, conv)
            self.set_conv(conv, ConvWeights(scale.reshape(c, 1, 1, 1), shift))


def reparam_model(graph: LayerGraph, weights: ModelWeights):
    """Return an equivalent ``(graph, weights)`` with all BNs and small branches folded away."""
    graph.check_weights(weights)
    rw = _Rewriter(graph, weights)
    rw.merge_branches()
    rw.fold_conv_bn()
    rw.fold_bn_into_pointwise()
    rw.fold_bn_into_head()
    rw.bn_to_conv()
    deployed = LayerGraph(rw.nodes, graph.in_channels, rw.output, graph.input,
                          dict(graph.meta, form="deploy"))
    ordered = {k: rw.weights[k] for k in deployed.param_shapes()}
    deployed.check_weights(ordered)
    return deployed, ordered
