"""Graph builders: the RepLKNet family and plain depth-wise stacks."""
from __future__ import annotations

from typing import Optional

from ..conv import ConvSpec
from .arch import ArchSpec
from .graph import LayerGraph, Node


class _Builder:
    def __init__(self, in_channels: int):
        self.nodes: list = []
        self.cur = "input"
        self.in_channels = in_channels

    def conv_bn(self, name, spec: ConvSpec, act: Optional[str] = "relu", src=None, role=""):
        src = self.cur if src is None else src
        self.nodes.append(Node("conv", f"{name}.conv", (src,), f"{name}.conv", conv=spec, role=role))
        self.nodes.append(Node("bn", f"{name}.bn", (f"{name}.conv",), f"{name}.bn",
                               channels=spec.out_channels, role=role))
        self.cur = f"{name}.bn"
        if act:
            self.act(name, act)
        return self.cur

    def act(self, name, op):
        self.nodes.append(Node(op, f"{name}.{op}", (self.cur,), f"{name}.{op}"))
        self.cur = f"{name}.{op}"

    def bn(self, name, channels, role=""):
        self.nodes.append(Node("bn", name, (self.cur,), name, channels=channels, role=role))
        self.cur = name

    def add(self, name, a, b):
        self.nodes.append(Node("add", name, (a, b), name))
        self.cur = name


def _pw(cin, cout):
    return ConvSpec(1, cin, cout)


def _dw(c, k, stride=1):
    return ConvSpec(k, c, c, stride=stride, padding=k // 2, groups=c)


def build(arch: ArchSpec) -> LayerGraph:
    """Stem -> 4 stages of (RepLK Block, ConvFFN) pairs with transitions -> optional head.

    Every conv carries a BN.  ReLU follows each conv-BN except the last one in
    a residual branch and the one feeding GELU.
    """
    b = _Builder(arch.in_channels)
    c1 = arch.C[0]
    b.conv_bn("stem.0", ConvSpec(3, arch.in_channels, c1, stride=2, padding=1))
    b.conv_bn("stem.1", _dw(c1, 3))
    b.conv_bn("stem.2", _pw(c1, c1))
    b.conv_bn("stem.3", _dw(c1, 3, stride=2))

    for s in range(4):
        c, k = arch.C[s], arch.K[s]
        dw, hidden = arch.dw_channels(s), arch.ffn_channels(s)
        for i in range(arch.B[s]):
            p = f"stages.{s}.lk{i}"
            shortcut = b.cur
            b.conv_bn(f"{p}.pw1", _pw(c, dw))
            inner = b.cur
            large = b.conv_bn(f"{p}.large", _dw(dw, k), act=None, src=inner, role="lk_large")
            if arch.small_kernel is not None:
                small = b.conv_bn(f"{p}.small", _dw(dw, arch.small_kernel), act=None, src=inner,
                                  role="lk_small")
                b.add(f"{p}.merge", large, small)
            b.act(f"{p}.dw", "relu")
            b.conv_bn(f"{p}.pw2", _pw(dw, c), act=None, role="branch_final")
            b.add(f"{p}.add", shortcut, b.cur)

            p = f"stages.{s}.ffn{i}"
            shortcut = b.cur
            b.bn(f"{p}.prebn", c)
            b.conv_bn(f"{p}.pw1", _pw(c, hidden), act="gelu")
            b.conv_bn(f"{p}.pw2", _pw(hidden, c), act=None, role="branch_final")
            b.add(f"{p}.add", shortcut, b.cur)
        if s < 3:
            nxt = arch.C[s + 1]
            b.conv_bn(f"transitions.{s}.pw", _pw(c, nxt))
            b.conv_bn(f"transitions.{s}.dw", _dw(nxt, 3, stride=2))

    meta = dict(arch=arch.to_dict(), with_head=arch.with_head)
    if arch.with_head:
        cl = arch.C[3]
        b.bn("head.bn", cl, role="head")
        b.nodes.append(Node("pool", "head.pool", (b.cur,), "head.pool", role="head"))
        b.nodes.append(Node("linear", "head.fc", ("head.pool",), "head.fc", bias=True,
                            channels=cl, out_features=arch.num_classes, role="head"))
        b.cur = "head.fc"
    return LayerGraph(b.nodes, arch.in_channels, b.cur, meta=meta)


def dw_stack(channels: int, kernel_size: int, layers: int, activation: Optional[str] = None,
             dilation: int = 1) -> LayerGraph:
    """``layers`` same-padding stride-1 depth-wise convs, optionally each followed by an activation."""
    nodes, cur = [], "input"
    for i in range(layers):
        spec = ConvSpec.same(kernel_size, channels, dilation=dilation, depthwise=True)
        nodes.append(Node("conv", f"layers.{i}", (cur,), f"layers.{i}", conv=spec))
        cur = f"layers.{i}"
        if activation:
            nodes.append(Node(activation, f"layers.{i}.{activation}", (cur,), f"layers.{i}.{activation}"))
            cur = f"layers.{i}.{activation}"
    meta = dict(kind="dw_stack", kernel_size=kernel_size, layers=layers, activation=activation)
    return LayerGraph(nodes, channels, cur, meta=meta)
