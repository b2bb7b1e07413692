import json
from pathlib import Path

import numpy as np
import pytest

from gran.autodiff import load_arrays
from gran.cli import main, resolve_config
from gran.graph import Graph, GraphDataset, load_dataset, save_dataset
from gran.metrics import MetricReport, is_lobster
from gran.model import GranConfig, GranParams

TINY = ["--hidden-dim", "8", "--num-rounds", "1", "--num-mixtures", "2"]


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture
def grids9(tmp_path):
    assert run("gen-data", "--out", tmp_path / "g9", "--count", 5, "--min-nodes", 9, "--max-nodes", 9) == 0
    return tmp_path / "g9" / "graphs"


def test_gen_data_grid_band(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path / "d", "--profile", "full-grid") == 0
    manifest = json.loads((tmp_path / "d" / "graphs" / "manifest.json").read_text())
    assert len(manifest["files"]) == 100 and manifest["n_max"] <= 400
    ds = load_dataset(tmp_path / "d" / "graphs")
    assert all(100 <= g.num_nodes <= 400 for g in ds.graphs)
    assert "count=100" in capsys.readouterr().out


def test_gen_data_lobster(tmp_path):
    assert run("gen-data", "--out", tmp_path / "l", "--profile", "desk-lobster", "--count", 20) == 0
    ds = load_dataset(tmp_path / "l" / "graphs")
    assert len(ds) == 20 and all(is_lobster(g) for g in ds.graphs)


def test_gen_data_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--out", tmp_path / name, "--kind", "er", "--count", 7) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    # rerunning into the same directory also reproduces it
    assert run("gen-data", "--out", tmp_path / "a", "--kind", "er", "--count", 7) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


@pytest.mark.parametrize("args", [
    ["--stride", "2"],
    ["--num-mixtures", "0"],
    ["--lr", "-0.5"],
    ["--set", "bogus=1"],
    ["--set", "epochs=abc"],
    ["--orderings", "smiles"],
])
def test_bad_config_rejected_before_touching_disk(tmp_path, capsys, args):
    out = tmp_path / "never"
    assert run("train", "--out", out, "--data", tmp_path, *args) == 1
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_usage_errors_exit_1(tmp_path):
    assert run("frobnicate") == 1
    assert run("train") == 1  # --out missing
    assert run("gen-data", "--out", tmp_path / "x", "--count", "many") == 1


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('kind = "er"\ncount = 6\nseed = 4\nlr = 0.01\norderings = ["bfs", "dfs"]\n')
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "o", "--count", 8) == 0
    assert len(load_dataset(tmp_path / "o" / "graphs")) == 8
    resolved = (tmp_path / "o" / "config.toml").read_text()
    assert 'kind = "er"' in resolved and "count = 8" in resolved and "seed = 4" in resolved
    # the written config reproduces the run on its own
    assert run("gen-data", "--config", tmp_path / "o" / "config.toml", "--out", tmp_path / "p") == 0
    assert tree_bytes(tmp_path / "o") == tree_bytes(tmp_path / "p")


def test_config_file_errors(tmp_path):
    nested = tmp_path / "nested.toml"
    nested.write_text("[model]\nhidden_dim = 3\n")
    assert run("gen-data", "--config", nested, "--out", tmp_path / "o") == 1
    assert run("gen-data", "--config", tmp_path / "missing.toml", "--out", tmp_path / "o") == 1
    with pytest.raises(ValueError):
        resolve_config({"profile": "huge"}, {})


def test_train_tiny_grid(tmp_path, grids9, capsys):
    out = tmp_path / "run"
    assert run("train", "--out", out, "--data", grids9, "--epochs", 50, "--batch-size", 1) == 0
    for name in ("best.ckpt", "last.ckpt", "train_log.jsonl", "config.toml"):
        assert (out / name).exists()
    for part in ("train", "val", "test"):
        assert (out / "data" / part / "manifest.json").exists()
    log = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == list(range(1, 201))
    assert log[-1]["train_loss"] < log[0]["train_loss"]
    assert "wall_time" not in log[0]


def test_train_zero_lr_keeps_initial_parameters(tmp_path, grids9):
    out = tmp_path / "run"
    assert run("train", "--out", out, "--data", grids9, "--epochs", 3, "--lr", 0, "--seed", 5, *TINY) == 0
    arrays, meta = load_arrays(out / "last.ckpt")
    init = GranParams.init(GranConfig.from_dict(meta["model"]), np.random.default_rng(5)).arrays()
    for k, v in init.items():
        assert np.array_equal(arrays[f"param/{k}"], v)


def test_train_resume_continues_log(tmp_path, grids9):
    base = ["--data", grids9, "--batch-size", 2, "--lr", "0.003", *TINY]
    assert run("train", "--out", tmp_path / "full", "--epochs", 6, *base) == 0
    assert run("train", "--out", tmp_path / "part", "--epochs", 3, *base) == 0
    assert run("train", "--out", tmp_path / "part", "--epochs", 6,
               "--resume", tmp_path / "part" / "last.ckpt", *base) == 0
    full_log = (tmp_path / "full" / "train_log.jsonl").read_text()
    part_log = (tmp_path / "part" / "train_log.jsonl").read_text()
    assert part_log == full_log
    assert [json.loads(x)["step"] for x in part_log.splitlines()] == list(range(1, 13))
    assert (tmp_path / "part" / "last.ckpt").read_bytes() == (tmp_path / "full" / "last.ckpt").read_bytes()


def test_resume_with_other_model_is_config_error(tmp_path, grids9):
    assert run("train", "--out", tmp_path / "r", "--data", grids9, "--epochs", 1, *TINY) == 0
    assert run("train", "--out", tmp_path / "r", "--data", grids9, "--epochs", 2, "--hidden-dim", 4,
               "--num-rounds", 1, "--num-mixtures", 2, "--resume", tmp_path / "r" / "last.ckpt") == 1


@pytest.fixture
def ckpt64(tmp_path):
    assert run("gen-data", "--out", tmp_path / "g64", "--count", 5, "--min-nodes", 64, "--max-nodes", 64) == 0
    assert run("train", "--out", tmp_path / "m64", "--data", tmp_path / "g64" / "graphs",
               "--epochs", 0, "--block-size", 16, *TINY) == 0
    return tmp_path / "m64" / "best.ckpt"


def test_sample_stride_accounting(tmp_path, ckpt64):
    for stride, calls in ((16, 4), (1, 49)):
        out = tmp_path / f"s{stride}"
        assert run("sample", "--out", out, "--checkpoint", ckpt64, "--stride", stride, "--count", 2) == 0
        report = json.loads((out / "sample_report.json").read_text())
        assert report["invocations"] == [calls, calls]
        assert report["sizes"] == [64, 64]
    assert run("sample", "--out", tmp_path / "bad", "--checkpoint", ckpt64, "--stride", 17) == 1
    assert not (tmp_path / "bad").exists()
    assert run("sample", "--out", tmp_path / "bad", "--checkpoint", tmp_path / "none.ckpt") == 1


def test_sample_defaults_and_determinism(tmp_path, grids9):
    assert run("train", "--out", tmp_path / "m", "--data", grids9, "--epochs", 1, *TINY) == 0
    ckpt = tmp_path / "m" / "best.ckpt"
    for name in ("a", "b"):
        assert run("sample", "--out", tmp_path / name, "--checkpoint", ckpt, "--seed", 3) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    # default count equals the test split size (1 of 5)
    assert len(load_dataset(tmp_path / "a" / "graphs")) == 1


def test_evaluate_commands(tmp_path, capsys):
    paths = GraphDataset([Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)]) for n in range(3, 8)])
    save_dataset(paths, tmp_path / "paths")
    assert run("evaluate", "--out", tmp_path / "e", "--generated", tmp_path / "paths",
               "--reference", tmp_path / "paths", "--lobster") == 0
    report = MetricReport.from_text((tmp_path / "e" / "report.txt").read_text())
    assert max(report.degree_mmd, report.clustering_mmd, report.orbit_mmd, report.spectral_mmd) < 1e-9
    assert report.lobster_accuracy == 1.0
    capsys.readouterr()
    assert run("evaluate", "--out", tmp_path / "e2", "--generated", tmp_path / "nowhere",
               "--reference", tmp_path / "paths") == 2
    assert "nowhere" in capsys.readouterr().err


def test_baseline_er(tmp_path):
    k4 = Graph.from_edges(4, [(i, j) for i in range(4) for j in range(i + 1, 4)])
    save_dataset(GraphDataset([k4]), tmp_path / "k4")
    assert run("baseline-er", "--out", tmp_path / "b", "--data", tmp_path / "k4", "--count", 5) == 0
    gen = load_dataset(tmp_path / "b" / "graphs")
    assert len(gen) == 5 and all(g == k4 for g in gen.graphs)
    save_dataset(GraphDataset([Graph.from_edges(5, []), Graph.from_edges(3, [])]), tmp_path / "empty")
    assert run("baseline-er", "--out", tmp_path / "c", "--data", tmp_path / "empty", "--count", 6) == 0
    assert all(g.num_edges == 0 for g in load_dataset(tmp_path / "c" / "graphs").graphs)
    assert run("baseline-er", "--out", tmp_path / "d", "--data", tmp_path / "k4", "--count", 5) == 0
    assert tree_bytes(tmp_path / "b") == tree_bytes(tmp_path / "d")
