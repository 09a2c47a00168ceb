import csv
import io
import json
import shutil
import subprocess

import numpy as np
import pytest

from replk.cli import main
from replk.erf import read_pgm
from replk.model import PRESETS, load


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def config_line(out):
    first = out.splitlines()[0]
    assert first.startswith("config: ")
    return json.loads(first[len("config: "):])


@pytest.fixture
def tiny_json(tmp_path):
    path = tmp_path / "tiny.json"
    PRESETS["replknet-tiny"].save(path)
    return path


# --- usage errors ----------------------------------------------------------

@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["bench", "--bogus"],
    ["bench", "--reps", "1"],
    ["bench", "--backend", "cudnn"],
    ["bench", "--kernels", "3,x"],
    ["erf", "--preset", "replknet-tiny", "--samples", "0"],
    ["flops"],
    ["densify", "--kernel", "4", "--dilation", "2", "--out", "x.rlkw"],
    ["reparam", "--preset", "replknet-tiny"],
])
def test_usage_errors_exit_1(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert err


# --- flops -----------------------------------------------------------------

def test_flops_31b(capsys):
    code, out, _ = run(capsys, "flops", "--preset", "replknet-31b", "--resolution", 224)
    assert code == 0
    rows = list(csv.reader(io.StringIO("\n".join(out.splitlines()[1:3]))))
    assert rows[0] == ["params", "macs", "resolution"]
    params, macs = int(rows[1][0]), int(rows[1][1])
    assert abs(params / 1e6 - 79.3) <= 0.05 * 79.3
    assert abs(macs / 1e9 - 15.3) <= 0.05 * 15.3


def test_flops_from_arch_file(capsys, tiny_json):
    code, out, _ = run(capsys, "flops", "--arch", tiny_json)
    assert code == 0 and config_line(out)["arch"] == str(tiny_json)


def test_bad_arch_file(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"B": [1, 1, 1, 1], "C": [8, 8, 8, 8], "K": [4, 3, 3, 3]}))
    assert run(capsys, "flops", "--arch", bad)[0] == 1
    assert run(capsys, "flops", "--arch", tmp_path / "missing.json")[0] == 2


# --- bench -----------------------------------------------------------------

def test_bench_all_backends(capsys, tmp_path):
    path = tmp_path / "b.csv"
    code, out, _ = run(capsys, "bench", "--kernels", "3,5", "--resolutions", "8", "--channels", 2,
                       "--layers", 2, "--batch", 1, "--backend", "all", "--csv", path)
    assert code == 0
    assert "resolution,backend,K3,K5" in out
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 2 * 3
    assert {r["backend"] for r in rows} == {"direct", "blocked", "fft"}


def test_bench_threads_env(capsys, monkeypatch):
    monkeypatch.setenv("RLK_THREADS", "3")
    argv = ["bench", "--kernels", "3", "--resolutions", "8", "--channels", 1, "--layers", 1, "--batch", 1]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    assert config_line(out)["threads"] == 3
    assert out.strip().splitlines()[-1].endswith(",3")
    code, out, _ = run(capsys, *argv, "--threads", 2)
    assert config_line(out)["threads"] == 2
    monkeypatch.setenv("RLK_THREADS", "many")
    assert run(capsys, *argv)[0] == 1


def test_bench_config_echo_stable(capsys):
    argv = ["bench", "--kernels", "3", "--resolutions", "8", "--channels", 1, "--layers", 1, "--batch", 1]
    a = config_line(run(capsys, *argv)[1])
    b = config_line(run(capsys, *argv)[1])
    assert a == b and a["seed"] == 0


# --- reparam ---------------------------------------------------------------

def test_reparam_verify_ok(capsys, tmp_path, tiny_json):
    out_path = tmp_path / "fused.rlkw"
    code, out, _ = run(capsys, "reparam", "--arch", tiny_json, "--out", out_path, "--verify", 10)
    assert code == 0
    assert "max_rel_error" in out
    graph, _ = load(out_path)
    assert graph.count_ops()["bn"] == 0


def test_reparam_from_weights_file(capsys, tmp_path):
    from replk.model import build, init_weights, save

    g = build(PRESETS["replknet-tiny"])
    src = tmp_path / "train.rlkw"
    save(g, init_weights(g, 4, fan_in=True, random_bn=True), src)
    code, _, _ = run(capsys, "reparam", "--weights", src, "--out", tmp_path / "d.rlkw", "--verify", 2)
    assert code == 0


def test_tampered_fused_file_exit_3(capsys, tmp_path):
    fused = tmp_path / "fused.rlkw"
    assert run(capsys, "reparam", "--preset", "replknet-tiny", "--out", fused)[0] == 0
    blob = bytearray(fused.read_bytes())
    blob[-50] ^= 0x01
    tampered = tmp_path / "tampered.rlkw"
    tampered.write_bytes(bytes(blob))
    code, _, err = run(capsys, "reparam", "--preset", "replknet-tiny", "--check", tampered)
    assert code == 3 and "checksum" in err
    assert run(capsys, "reparam", "--preset", "replknet-tiny", "--check", fused)[0] == 0


def test_wrong_weights_fail_verification(capsys, tmp_path):
    # a well-formed deploy file for a different seed is not equivalent: exit 3
    fused = tmp_path / "other.rlkw"
    assert run(capsys, "reparam", "--preset", "replknet-tiny", "--seed", 1, "--out", fused)[0] == 0
    code, _, err = run(capsys, "reparam", "--preset", "replknet-tiny", "--seed", 2, "--check", fused)
    assert code == 3 and "deviates" in err


def test_missing_weights_file_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "reparam", "--weights", tmp_path / "none.rlkw", "--out", tmp_path / "o.rlkw")
    assert code == 2 and "none.rlkw" in err


# --- erf -------------------------------------------------------------------

def test_erf_outputs_and_determinism(capsys, tmp_path):
    args = ["erf", "--preset", "replknet-tiny", "--samples", 2, "--input-size", 64, "--seed", 5]
    a_csv, b_csv = tmp_path / "a.csv", tmp_path / "b.csv"
    heat = tmp_path / "h.pgm"
    code, out, _ = run(capsys, *args, "--csv", a_csv, "--heatmap", heat)
    assert code == 0
    assert "t=20%,t=30%,t=50%,t=99%" in out
    assert config_line(out)["thresholds"] == [20, 30, 50, 99]
    assert run(capsys, *args, "--csv", b_csv)[0] == 0
    assert a_csv.read_bytes() == b_csv.read_bytes()
    assert a_csv.read_text().splitlines()[0] == "threshold,side,ratio"
    assert read_pgm(heat).shape == (64, 64) and read_pgm(heat).max() == 255


def test_erf_degenerate_weights(capsys, tmp_path):
    from replk.model import build, save

    g = build(PRESETS["replknet-tiny"])
    zero = {k: np.zeros(s, np.float32) for k, s in g.param_shapes().items()}
    for k in zero:
        if k.endswith((".gamma", ".var")):
            zero[k][:] = 1.0
    path = tmp_path / "z.rlkw"
    save(g, zero, path)
    code, out, _ = run(capsys, "erf", "--weights", path, "--samples", 1, "--input-size", 32,
                       "--heatmap", tmp_path / "z.pgm")
    assert code == 0 and "degenerate" in out


# --- run / densify ---------------------------------------------------------

def test_run_top5_deterministic(capsys, tmp_path):
    img = tmp_path / "x.ppm"
    img.write_bytes(b"P6\n224 224\n255\n" + np.random.default_rng(0).integers(0, 256, 224 * 224 * 3,
                                                                           dtype=np.uint8).tobytes())
    argv = ["run", "--preset", "replknet-tiny", "--input", img]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    lines = out.splitlines()
    start = lines.index("rank,class,score")
    top = [line.split(",") for line in lines[start + 1:]]
    assert len(top) == 5 and [int(t[0]) for t in top] == [1, 2, 3, 4, 5]
    scores = [float(t[2]) for t in top]
    assert scores == sorted(scores, reverse=True)
    assert run(capsys, *argv)[1] == out


def test_densify(capsys, tmp_path):
    out_path = tmp_path / "d.rlkw"
    code, out, _ = run(capsys, "densify", "--kernel", 3, "--dilation", 4, "--channels", 2, "--out", out_path)
    assert code == 0 and "9x9" in out
    _, w = load(out_path)
    assert w["weight"].shape == (2, 1, 9, 9)
    assert np.count_nonzero(w["weight"][:, :, 1::4]) == 0


def test_densify_weights_file(capsys, tmp_path):
    from replk.model import save

    src = tmp_path / "k.rlkw"
    save(None, {"a.weight": np.ones((4, 1, 3, 3), np.float32), "a.bias": np.ones(4, np.float32)}, src)
    out_path = tmp_path / "o.rlkw"
    assert run(capsys, "densify", "--kernel", 3, "--dilation", 6, "--weights", src, "--out", out_path)[0] == 0
    _, w = load(out_path)
    assert w["a.weight"].shape == (4, 1, 13, 13) and w["a.bias"].shape == (4,)


@pytest.mark.skipif(shutil.which("replk") is None, reason="console script not installed")
def test_console_script():
    proc = subprocess.run(["replk", "flops", "--preset", "replknet-tiny", "--resolution", "64"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("config: ")
    proc = subprocess.run(["replk", "bench", "--nope"], capture_output=True, text=True)
    assert proc.returncode == 1
