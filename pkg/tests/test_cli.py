import subprocess
import sys

import numpy as np
import pytest

from hgpe import analysis, io, ops
from hgpe.backbone import MICRO, HGpeModel, preset
from hgpe.cli import main
from hgpe.gradcheck import OPS
from hgpe.tensor import Tensor


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_summarize_s_shows_reference(capsys):
    code, out, _ = run(capsys, "summarize", "--variant", "S")
    assert code == 0
    assert "reported for S: 5.6 M params / 1.4 G flops" in out
    assert "counted (backbone)" in out


def test_summarize_n_shows_reference(capsys):
    code, out, _ = run(capsys, "summarize", "--variant", "N")
    assert code == 0 and "reported for N: 1.2 M params / 0.3 G flops" in out


def test_summarize_config_file_exact(capsys, tmp_path):
    cfg = MICRO.replace(variant="custom", out_channels=(8, 16, 16, 24))
    io.save_config(cfg, tmp_path / "c.json")
    code, out, _ = run(capsys, "summarize", "--config", str(tmp_path / "c.json"), "--include-head",
                       "--records", str(tmp_path / "rec.txt"))
    assert code == 0
    expect = HGpeModel(cfg).params.num_params()
    assert out.strip().splitlines()[-1] == f"params (with head): {expect}"
    lines = (tmp_path / "rec.txt").read_text().splitlines()
    assert sum(int(line.split()[2]) for line in lines) == analysis.count_macs(
        HGpeModel(cfg), include_head=True)


def test_trace(capsys):
    code, out, _ = run(capsys, "trace", "--variant", "N", "--input-size", "160")
    assert code == 0
    assert "stage4/irb2" in out and "1x112x10x10" in out


def test_unknown_variant_is_clean_error(capsys):
    code, _, err = run(capsys, "trace", "--variant", "XL")
    assert code == 1 and err.startswith("error: unknown variant")


def test_gradcheck_subset(capsys):
    code, out, _ = run(capsys, "gradcheck", "--ops", "conv2d", "sigmoid")
    assert code == 0
    assert [line.split()[:2] for line in out.splitlines()] == [["PASS", "conv2d"], ["PASS", "sigmoid"]]


def test_gradcheck_impossible_tolerance(capsys):
    code, out, err = run(capsys, "gradcheck", "--ops", "softmax_lastdim", "--tolerance", "1e-12")
    assert code == 1 and "FAIL softmax_lastdim" in out and "softmax_lastdim" in err


def test_gradcheck_unknown_op(capsys):
    code, _, err = run(capsys, "gradcheck", "--ops", "nope")
    assert code == 2 and "nope" in err


def test_gradcheck_catches_broken_backward(capsys, monkeypatch):
    def broken(rng, eps):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))

        def fn():
            out = ops.activation(x, "sigmoid")
            return Tensor(out.data) * 2.0 - out  # forward intact, gradient negated
        return fn, [("x", x)], None

    monkeypatch.setitem(OPS, "broken_sigmoid", broken)
    code, out, err = run(capsys, "gradcheck", "--ops", "broken_sigmoid", "sigmoid")
    assert code == 1
    assert "FAIL broken_sigmoid" in out and "PASS sigmoid" in out
    assert "broken_sigmoid" in err and "sigmoid," not in err


def test_train_toy_zero_steps(capsys, tmp_path):
    code, out, _ = run(capsys, "train-toy", "--steps", "0", "--metrics", str(tmp_path / "m.txt"))
    assert code == 0 and "final train accuracy" in out
    assert (tmp_path / "m.txt").read_text() == ""


def test_train_toy_divergence_exit(capsys):
    with np.errstate(all="ignore"):
        code, _, err = run(capsys, "train-toy", "--steps", "20", "--optimizer", "sgd", "--lr", "1e30",
                           "--batch-size", "4")
    assert code == 1 and "diverged" in err


@pytest.fixture
def weights(tmp_path, capsys):
    path = tmp_path / "w.bin"
    assert main(["init-weights", "--seed", "3", "--out", str(path),
                 "--save-config", str(tmp_path / "c.json")]) == 0
    capsys.readouterr()
    return path


def test_infer_round_trip(capsys, tmp_path, weights):
    rng = np.random.default_rng(0)
    io.write_ppm(tmp_path / "img.ppm", rng.uniform(size=(40, 30, 3)))
    args = ["infer", "--config", str(tmp_path / "c.json"), "--weights", str(weights),
            "--image", str(tmp_path / "img.ppm")]
    code, first, _ = run(capsys, *args)
    assert code == 0
    rows = [line.split() for line in first.splitlines()]
    assert len(rows) == MICRO.num_classes
    assert sum(float(r[2]) for r in rows) == pytest.approx(1.0, abs=1e-5)
    # re-save the loaded weights and run again: identical output
    model = HGpeModel(io.load_config(tmp_path / "c.json"))
    io.load_weights(model, weights)
    io.save_weights(model, tmp_path / "again.bin")
    args[4] = str(tmp_path / "again.bin")
    code, second, _ = run(capsys, *args)
    assert code == 0 and second == first


def test_infer_gray_image(capsys, tmp_path, weights):
    io.write_ppm(tmp_path / "gray.ppm", np.full((32, 32, 3), 0.5))
    code, out, _ = run(capsys, "infer", "--weights", str(weights), "--image",
                       str(tmp_path / "gray.ppm"))
    assert code == 0
    assert all(np.isfinite(float(v)) for line in out.splitlines() for v in line.split())


def test_infer_truncated_weights(capsys, tmp_path, weights):
    weights.write_bytes(weights.read_bytes()[:-7])
    io.write_ppm(tmp_path / "gray.ppm", np.full((8, 8, 3), 0.5))
    code, _, err = run(capsys, "infer", "--weights", str(weights), "--image",
                       str(tmp_path / "gray.ppm"))
    assert code == 1 and "truncated" in err


def test_infer_missing_image(capsys, weights):
    code, _, err = run(capsys, "infer", "--weights", str(weights), "--image", "/nonexistent.ppm")
    assert code == 1 and err.startswith("error:")


def test_bench_single_repeat(capsys):
    code, out, _ = run(capsys, "bench", "--variant", "micro", "--repeats", "1")
    assert code == 0
    assert f"MACs {analysis.count_macs(HGpeModel(MICRO), include_head=True)}" in out
    assert "stddev 0.00 ms" in out


def test_init_weights_deterministic(capsys, tmp_path):
    for name in ("a", "b"):
        assert main(["init-weights", "--seed", "1", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "hgpe", "summarize", "--variant", "T"],
                         capture_output=True, text=True, check=True).stdout
    params = analysis.count_params(HGpeModel(preset("T")), include_head=False)
    assert f"params (backbone): {params}" in out
