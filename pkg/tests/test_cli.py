import json
import subprocess
import sys

import numpy as np
import pytest

from morphkit.cli import content_hash, main
from morphkit.datasets import default_mnist_dir, import_se_json, load_image_dir, read_pgm
from morphkit.layers import load_model

HAVE_MNIST = (default_mnist_dir() / "train-images-idx3-ubyte").exists() or \
    (default_mnist_dir() / "train-images-idx3-ubyte.gz").exists()
needs_mnist = pytest.mark.skipif(not HAVE_MNIST, reason="MNIST files not present")


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


# -- usage errors -----------------------------------------------------------------

def test_unknown_command_is_usage_error(capsys):
    code, _, err = run(["frobnicate"], capsys)
    assert code == 2 and "invalid choice" in err


def test_unknown_flag_is_usage_error(capsys, tmp_path):
    code, _, err = run(["gradcheck", "--out", tmp_path, "--bogus"], capsys)
    assert code == 2 and "unrecognized arguments" in err


def test_no_command_is_usage_error(capsys):
    code, _, err = run([], capsys)
    assert code == 2 and err


def test_negative_seed_rejected(capsys, tmp_path):
    code, _, err = run(["gradcheck", "--out", tmp_path, "--seed", "-1"], capsys)
    assert code == 2 and "--seed" in err


def test_bad_config_key_rejected(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"no_such_flag": 1}))
    code, _, err = run(["gradcheck", "--out", tmp_path, "--config", cfg], capsys)
    assert code == 2 and "no_such_flag" in err


def test_manifest_for_other_command_rejected(capsys, tmp_path):
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps({"command": "learn-se", "config": {}}))
    code, _, err = run(["gradcheck", "--out", tmp_path, "--config", cfg], capsys)
    assert code == 2 and "learn-se" in err


def test_domain_error_is_exit_2(capsys, tmp_path):
    code, _, err = run(["gen-data", "--size", 8, "--per-class", 1, "--out", tmp_path], capsys)
    assert code == 2 and "16" in err


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "morphkit.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("morphkit ")


# -- gradcheck ------------------------------------------------------------------------

def test_gradcheck_passes_and_writes_manifest(capsys, tmp_path):
    code, out, _ = run(["gradcheck", "--out", tmp_path, "--seed", 5], capsys)
    assert code == 0
    m = manifest(tmp_path)
    assert m["command"] == "gradcheck" and m["status"] == "ok" and m["seed"] == 5
    assert set(m) == {"command", "config", "seed", "input_hash", "outputs", "metrics", "status"}
    assert m["config"]["seed"] == 5 and m["config"]["size"] == 8
    assert m["metrics"]["max_relative_error"] < 1e-4
    assert json.loads(out) == m["metrics"]
    assert (tmp_path / "summary.txt").read_text().startswith("gradcheck: ok")
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report) == set(m["metrics"]["per_network"])
    kinds = " ".join(t for per in report.values() for t in per)
    for k in ("dilation", "erosion", "adaptive", "dense"):
        assert k in kinds


def test_workers_env_fallback(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("MORPHKIT_WORKERS", "3")
    assert run(["gen-data", "--per-class", 1, "--size", 16, "--out", tmp_path], capsys)[0] == 0
    assert manifest(tmp_path)["config"]["workers"] == 3
    monkeypatch.setenv("MORPHKIT_WORKERS", "0")
    assert run(["gen-data", "--per-class", 1, "--size", 16, "--out", tmp_path], capsys)[0] == 2


# -- data commands ------------------------------------------------------------------------

def test_gen_data_and_make_pairs_from_directory(capsys, tmp_path):
    data = tmp_path / "shapes"
    assert run(["gen-data", "--per-class", 2, "--size", 16, "--seed", 1, "--out", data], capsys)[0] == 0
    ds = load_image_dir(data / "images")
    assert ds.images.shape == (10, 16, 16)
    pairs = tmp_path / "pairs"
    code, _, _ = run(["make-pairs", "--input", data / "images", "--count", 4, "--ops", "dilate:diamond3,erode:diamond3",
                      "--out", pairs], capsys)
    assert code == 0
    m = manifest(pairs)
    assert m["metrics"]["pairs"] == 4
    from morphkit.datasets import make_pairs
    want = make_pairs(ds.images[:4], [("dilate", "diamond3"), ("erode", "diamond3")]).targets
    got = load_image_dir(pairs / "targets").images
    np.testing.assert_array_equal(got, want)


def test_input_hash_tracks_config_and_files(tmp_path):
    f = tmp_path / "a.bin"
    f.write_bytes(b"abc")
    h1 = content_hash({"x": 1}, [f])
    assert h1 == content_hash({"x": 1}, [f]) and h1 != content_hash({"x": 2}, [f])
    f.write_bytes(b"abd")
    assert content_hash({"x": 1}, [f]) != h1


def test_input_hash_is_git_blob_style():
    import hashlib
    from morphkit.cli import _blob_hash
    # `git hash-object` of the empty blob
    assert _blob_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert _blob_hash(b"hi\n") == hashlib.sha1(b"blob 3\0hi\n").hexdigest()


# -- experiment commands (small budgets) ----------------------------------------------------------

@needs_mnist
def test_learn_se_outputs_and_replay(capsys, tmp_path):
    out = tmp_path / "run"
    argv = ["learn-se", "--form", "gray", "--se", "gray3-dilate", "--op", "dilate", "--epochs", 2, "--pairs", 128,
            "--restarts", 2, "--seed", 4, "--out", out, "--max-taxicab", 100]
    code, _, _ = run(argv, capsys)
    assert code == 0
    m = manifest(out)
    assert m["config"]["lr"] == 1.0  # per-command default
    se = import_se_json(out / "learned_se_0.json")
    assert se.weights.shape == (3, 3)
    heat = read_pgm(out / "learned_se_0.pgm")
    assert heat.min() == 0.0 and heat.max() == 1.0
    # replaying the manifest reproduces the metrics bitwise
    saved = tmp_path / "manifest.json"
    saved.write_text((out / "manifest.json").read_text())
    assert run(["learn-se", "--config", saved], capsys)[0] == 0
    again = manifest(out)
    assert json.dumps(again["metrics"], sort_keys=True) == json.dumps(m["metrics"], sort_keys=True)
    assert again["input_hash"] == m["input_hash"]


@needs_mnist
def test_learn_se_failure_exits_1(capsys, tmp_path):
    code, _, err = run(["learn-se", "--form", "binary", "--se", "cross5", "--epochs", 1, "--pairs", 64, "--lr", 1e-3,
                        "--restarts", 1, "--out", tmp_path], capsys)
    assert code == 1 and err
    assert manifest(tmp_path)["status"] == "failed"


@needs_mnist
def test_detect_op_small(capsys, tmp_path):
    code, _, _ = run(["detect-op", "--smooth", "softsign", "--op", "erode", "--epochs", 1, "--pairs", 64,
                      "--out", tmp_path, "--seed", 2], capsys)
    m = manifest(tmp_path)
    assert code in (0, 1) and (code == 0) == (m["status"] == "ok")
    assert set(m["metrics"]) >= {"correct", "accuracy"}


@needs_mnist
def test_train_classifier_eval_export(capsys, tmp_path):
    run_dir = tmp_path / "clf"
    code, _, _ = run(["train-classifier", "--dataset", "mnist", "--train-size", 64, "--test-size", 32,
                      "--epochs", 1, "--lr", 0.01, "--out", run_dir], capsys)
    assert code == 0
    m = manifest(run_dir)
    spec, states = load_model(run_dir / "model.bin")
    assert spec.input_shape == (1, 28, 28)
    code, _, _ = run(["eval", "--model", run_dir / "model.bin", "--dataset", "mnist", "--test-size", 32,
                      "--out", tmp_path / "ev"], capsys)
    assert code == 0
    assert manifest(tmp_path / "ev")["metrics"]["test_accuracy"] == m["metrics"]["test_accuracy"]
    code, _, _ = run(["export", "--model", run_dir / "model.bin", "--out", tmp_path / "ex"], capsys)
    assert code == 0
    params = json.loads((tmp_path / "ex" / "parameters.json").read_text())
    assert params["feature_extraction_scalar_bias"] == 20


def test_train_classifier_on_scgs_tiny(capsys, tmp_path):
    code, _, _ = run(["train-classifier", "--dataset", "scgs", "--train-size", 20, "--test-size", 10,
                      "--epochs", 1, "--lr", 0.01, "--out", tmp_path], capsys)
    assert code == 0
    assert 0.0 <= manifest(tmp_path)["metrics"]["test_accuracy"] <= 1.0
