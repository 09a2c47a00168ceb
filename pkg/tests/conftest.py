import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def naive_conv(x, w, b, stride=1, pad=0, dil=1, groups=1):
    """Six nested loops in float64, written without any vectorization."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    n, cin, h, wd = x.shape
    cout, cpg, k, _ = w.shape
    oh = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
    ow = (wd + 2 * pad - dil * (k - 1) - 1) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    opg = cout // groups
    for bi in range(n):
        for o in range(cout):
            g = o // opg
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(cpg):
                        c = g * cpg + ci
                        for ki in range(k):
                            r = i * stride - pad + ki * dil
                            if not 0 <= r < h:
                                continue
                            for kj in range(k):
                                col = j * stride - pad + kj * dil
                                if 0 <= col < wd:
                                    acc += x[bi, c, r, col] * w[o, ci, ki, kj]
                    out[bi, o, i, j] = acc
    return out


def close(a, b, atol, rtol):
    """Elementwise ``|a - b| <= atol + rtol * |b|``."""
    return np.allclose(np.asarray(a, np.float64), np.asarray(b, np.float64), atol=atol, rtol=rtol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def zero_branch_finals(graph, weights):
    """Zero the last conv of every residual branch and make its BN output zero for zero input."""
    out = dict(weights)
    for node in graph.nodes:
        if node.role != "branch_final":
            continue
        if node.op == "conv":
            out[f"{node.name}.weight"] = np.zeros_like(weights[f"{node.name}.weight"])
        elif node.op == "bn":
            out[f"{node.name}.beta"] = np.zeros_like(weights[f"{node.name}.beta"])
            out[f"{node.name}.mean"] = np.zeros_like(weights[f"{node.name}.mean"])
    return out


def strip_blocks(graph):
    """The same network with every RepLK/ConvFFN block removed (stem, transitions, head only)."""
    from replk.model.graph import LayerGraph, rename_value

    nodes, output = list(graph.nodes), graph.output
    stage_nodes = [n for n in nodes if n.name.startswith("stages.")]
    for s in range(4):
        in_stage = [n for n in stage_nodes if n.name.startswith(f"stages.{s}.")]
        first, last = in_stage[0], in_stage[-1]
        nodes = rename_value(nodes, last.output, first.inputs[0])
        if output == last.output:
            output = first.inputs[0]
    kept = [n for n in nodes if not n.name.startswith("stages.")]
    return LayerGraph(kept, graph.in_channels, output, graph.input, dict(graph.meta))
