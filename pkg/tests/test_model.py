import json

import numpy as np
import pytest

from conftest import strip_blocks, zero_branch_finals
from replk.conv import ConvSpec
from replk.model import (
    PRESETS,
    ArchSpec,
    LayerGraph,
    MissingWeightsError,
    Node,
    build,
    count,
    dw_stack,
    forward,
    init_weights,
    reparam_model,
)
from replk.tensor import Rng, ShapeError, Uniform

TINY = PRESETS["replknet-tiny"]
SMALLEST = ArchSpec(B=(1, 1, 1, 1), C=(8, 8, 8, 8), K=(3, 3, 3, 3), small_kernel=None, num_classes=7)


def rel_err(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))


# --- ArchSpec --------------------------------------------------------------

def test_reference_presets():
    b = PRESETS["replknet-31b"]
    assert (b.B, b.C, b.K, b.small_kernel) == ((2, 2, 18, 2), (128, 256, 512, 1024), (31, 29, 27, 13), 5)
    xl = PRESETS["replknet-xl"]
    assert xl.C == (256, 512, 1024, 2048) and xl.K == (27, 27, 27, 13) and xl.dw_expansion == 1.5


@pytest.mark.parametrize("kwargs", [
    dict(B=(1, 1, 1)), dict(B=(0, 1, 1, 1)), dict(K=(3, 4, 3, 3)), dict(small_kernel=5),
    dict(small_kernel=2, K=(7, 7, 7, 7)), dict(dw_expansion=1.3), dict(num_classes=0),
])
def test_arch_validation(kwargs):
    base = dict(B=(1, 1, 1, 1), C=(8, 8, 8, 8), K=(3, 3, 3, 3), small_kernel=None)
    with pytest.raises(ValueError):
        ArchSpec(**{**base, **kwargs})


def test_arch_json_round_trip(tmp_path):
    path = tmp_path / "a.json"
    TINY.save(path)
    assert set(json.loads(path.read_text())) >= {"B", "C", "K", "small_kernel", "ffn_ratio",
                                                 "dw_expansion", "num_classes", "with_head"}
    assert ArchSpec.load(path) == TINY
    with pytest.raises(ValueError):
        ArchSpec.from_dict({**TINY.to_dict(), "dropout": 0.1})


# --- build / shapes --------------------------------------------------------

def test_smallest_instance_forward():
    g = build(SMALLEST)
    out = forward(g, init_weights(g, 0), Rng(0).sample((1, 3, 32, 32), Uniform(0, 1)))
    assert out.shape == (1, 7, 1, 1)


def test_every_conv_followed_by_bn():
    g = build(TINY)
    for node in g.nodes:
        if node.op == "conv":
            users = g.consumers(node.output)
            assert [u.op for u in users] == ["bn"], node.name


def test_activation_placement():
    g = build(TINY)
    for node in g.nodes:
        if node.op != "bn" or node.role == "head":
            continue
        users = [u.op for u in g.consumers(node.output)]
        if node.role == "branch_final" or node.role.startswith("lk_"):
            assert "relu" not in users, node.name  # feeds an addition
        elif ".ffn" in node.name and node.name.endswith("pw1.bn"):
            assert users == ["gelu"]
        elif not node.name.endswith("prebn"):
            assert users == ["relu"], node.name


def test_stage_output_shape_law():
    g = build(TINY)
    shapes = g.shapes(64, 64)
    for s in range(4):
        last = [n for n in g.nodes if n.name.startswith(f"stages.{s}.")][-1]
        c, h, w = shapes[last.output]
        assert (c, h, w) == (TINY.C[s], 64 // (4 * 2**s), 64 // (4 * 2**s))


def test_block_structure():
    ops = build(TINY).count_ops()
    # stem 4 + per stage (pw1, large, small, pw2, ffn pw1, ffn pw2) + 3 transitions x 2
    assert ops["conv"] == 4 + 4 * 6 + 6
    assert ops["add"] == 4 * 3
    assert ops["gelu"] == 4 and ops["pool"] == 1 and ops["linear"] == 1


def test_dw_expansion_widens_depthwise():
    arch = ArchSpec(B=(1, 1, 1, 1), C=(8, 8, 8, 8), K=(5, 5, 5, 5), small_kernel=3, dw_expansion=1.5)
    g = build(arch)
    large = [n for n in g.nodes if n.name == "stages.0.lk0.large.conv"][0]
    assert large.conv.in_channels == large.conv.groups == 12


def test_shape_errors_on_bad_input():
    g = build(SMALLEST)
    w = init_weights(g, 0)
    with pytest.raises(ShapeError):
        forward(g, w, np.zeros((1, 1, 32, 32), np.float32))
    with pytest.raises(ShapeError):  # five stride-2 stages need a multiple of 32
        forward(g, w, np.zeros((1, 3, 48, 40), np.float32))


def test_missing_weights():
    g = build(SMALLEST)
    w = init_weights(g, 0)
    del w["stem.0.conv.weight"]
    with pytest.raises(MissingWeightsError):
        forward(g, w, np.zeros((1, 3, 32, 32), np.float32))
    with pytest.raises(MissingWeightsError):
        g.check_weights(w)


# --- forward ---------------------------------------------------------------

def test_forward_deterministic_bitwise():
    g = build(TINY)
    w = init_weights(g, 3, fan_in=True, random_bn=True)
    x = Rng(5).sample((2, 3, 64, 64), Uniform(0, 1))
    assert forward(g, w, x).tobytes() == forward(g, w, x).tobytes()
    assert init_weights(g, 3)["stem.0.conv.weight"].tobytes() == init_weights(g, 3)["stem.0.conv.weight"].tobytes()


@pytest.mark.parametrize("backend", ["blocked", "fft"])
def test_forward_backend_independent(backend):
    g = build(TINY)
    w = init_weights(g, 1, fan_in=True, random_bn=True)
    x = Rng(2).sample((1, 3, 64, 64), Uniform(0, 1))
    assert rel_err(forward(g, w, x, backend=backend), forward(g, w, x, backend="direct")) <= 1e-4


def test_zeroed_branches_make_blocks_identity():
    g = build(TINY)
    w = zero_branch_finals(g, init_weights(g, 4, fan_in=True, random_bn=True))
    x = Rng(6).sample((1, 3, 64, 64), Uniform(0, 1))
    out, values = forward(g, w, x, keep=True)
    adds = [n for n in g.nodes if n.op == "add" and n.name.endswith(".add")]
    assert len(adds) == 8
    for node in adds:
        assert np.array_equal(values[node.output], values[node.inputs[0]]), node.name
    assert np.array_equal(out, forward(strip_blocks(g), w, x))


# --- counting --------------------------------------------------------------

def test_single_pointwise_count():
    for bias, expected in [(False, 64), (True, 72)]:
        g = LayerGraph([Node("conv", "c", ("input",), "c", conv=ConvSpec(1, 8, 8), bias=bias)], 8, "c")
        params, macs = count(g, 4)
        assert params == expected and macs == 64 * 16


def test_count_matches_weight_sizes():
    g = build(TINY)
    w = init_weights(g, 0)
    stats = sum(v.size for k, v in w.items() if k.endswith((".mean", ".var")))
    params, _ = count(g, 64)
    assert params == sum(v.size for v in w.values()) - stats


@pytest.mark.parametrize("name,params_m,macs_g", [
    ("replknet-3", 71.8, 12.9),
    ("replknet-31b", 79.3, 15.3),
])
def test_reference_model_sizes(name, params_m, macs_g):
    params, macs = count(build(PRESETS[name]), 224)
    assert abs(params / 1e6 - params_m) <= 0.05 * params_m
    assert abs(macs / 1e9 - macs_g) <= 0.05 * macs_g


@pytest.mark.parametrize("name,params_m", [("replknet-31l", 172), ("replknet-xl", 335)])
def test_large_variant_params(name, params_m):
    params, _ = count(build(PRESETS[name]), 224)
    assert abs(params / 1e6 - params_m) <= 0.05 * params_m


def test_kernel_size_sweep_is_monotone():
    sizes = [count(build(PRESETS[f"replknet-{k}"]), 224) for k in (3, 7, 13, 25)]
    assert sizes == sorted(sizes)


# --- re-parameterization ---------------------------------------------------

def test_tiny_reparam_equivalent_on_ten_inputs():
    g = build(TINY)
    w = init_weights(g, 11, fan_in=True, random_bn=True)
    dg, dw = reparam_model(g, w)
    rng = Rng(12)
    for _ in range(10):
        x = rng.sample((1, 3, 64, 64), Uniform(0, 1))
        assert rel_err(forward(dg, dw, x), forward(g, w, x)) <= 1e-4


def test_deploy_form_structure():
    g = build(TINY)
    dg, dw = reparam_model(g, init_weights(g, 0, random_bn=True))
    ops = dg.count_ops()
    assert ops["bn"] == 0
    assert not any(n.role == "lk_small" or ".small" in n.name for n in dg.nodes)
    assert dg.meta["form"] == "deploy"
    assert set(dw) == set(dg.param_shapes())
    large = [n for n in dg.nodes if n.name == "stages.0.lk0.large.conv"][0]
    assert large.bias and dw["stages.0.lk0.large.conv.bias"].shape == (16,)


def test_reparam_without_small_branch():
    arch = TINY.with_kernels((7, 7, 7, 7), small_kernel=None)
    g = build(arch)
    w = init_weights(g, 2, fan_in=True, random_bn=True)
    dg, dw = reparam_model(g, w)
    assert dg.count_ops()["bn"] == 0
    x = Rng(3).sample((2, 3, 64, 64), Uniform(0, 1))
    assert rel_err(forward(dg, dw, x), forward(g, w, x)) <= 1e-5


def test_reparam_headless_and_stack():
    g = build(TINY).without_head()
    w = init_weights(g, 5, fan_in=True, random_bn=True)
    dg, dw = reparam_model(g, w)
    x = Rng(1).sample((1, 3, 64, 64), Uniform(0, 1))
    assert dg.count_ops()["bn"] == 0
    assert rel_err(forward(dg, dw, x), forward(g, w, x)) <= 1e-4
    s = dw_stack(4, 5, 3, activation="relu")
    sw = init_weights(s, 0)
    ds, dsw = reparam_model(s, sw)
    assert len(ds.nodes) == len(s.nodes)


def test_reparam_idempotent():
    g = build(TINY)
    dg, dw = reparam_model(g, init_weights(g, 0, random_bn=True))
    dg2, dw2 = reparam_model(dg, dw)
    assert [n.name for n in dg2.nodes] == [n.name for n in dg.nodes]
    assert all(np.array_equal(dw[k], dw2[k]) for k in dw)


def test_without_head():
    g = build(TINY)
    h = g.without_head()
    assert not h.has_head and g.has_head
    assert h.output == "stages.3.ffn0.add"
