import csv
import json

import numpy as np
import pytest

from scanirl import cli
from scanirl import numcore as nc

TINY_FLAGS = ["--policy-widths", "4,4,4", "--critic-widths", "4,4", "--critic-hidden", "8"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert run("synth-gen", "--seed", 7, "--scenes-per-task", 10, "--n-subjects", 1, "--out", d) == 0
    return d


def test_synth_gen_is_byte_identical(tmp_path, corpus):
    assert run("synth-gen", "--seed", 7, "--scenes-per-task", 10, "--n-subjects", 1, "--out", tmp_path / "b") == 0
    assert tree(corpus) == tree(tmp_path / "b")
    snap = (corpus / "config.txt").read_text()
    assert "command=synth-gen" in snap and "seed=7" in snap and "# config_hash=" in snap
    assert (corpus / "splits" / "car" / "train.txt").is_file()


def test_snapshot_reproduces_run(tmp_path, corpus):
    assert run("synth-gen", "--config", corpus / "config.txt", "--out", tmp_path / "r") == 0
    assert tree(tmp_path / "r") == tree(corpus)


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# corpus\nscenes-per-task = 10\nseed=3\nn_subjects=1\n")
    assert run("synth-gen", "--config", cfg, "--seed", 4, "--out", tmp_path / "o") == 0
    snap = (tmp_path / "o" / "config.txt").read_text().splitlines()
    assert "seed=4" in snap and "scenes_per_task=10" in snap


def test_usage_errors(tmp_path, corpus, capsys):
    assert run("synth-gen", "--bogus-flag", 1, "--out", tmp_path) == 2
    assert run("no-such-command") == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("wibble=3\n")
    assert run("synth-gen", "--config", bad, "--out", tmp_path / "x") == 2
    assert "unknown key" in capsys.readouterr().err
    assert run("train-irl", "--out", tmp_path / "t") == 2
    assert "--data" in capsys.readouterr().err
    assert run("train-irl", "--data", tmp_path / "missing.json", "--out", tmp_path / "t") == 2
    assert run("eval", "--data", corpus / "manifest.json", "--scanpaths", tmp_path / "none.json",
               "--out", tmp_path / "e") == 2
    assert run("generate", "--data", corpus / "manifest.json", "--out", tmp_path / "g") == 2
    assert run("train-irl", "--data", corpus / "manifest.json", "--ablate", "unicorn", "--out", tmp_path / "t") == 2
    assert run("generate", "--data", corpus / "manifest.json", "--baseline", "random", "--ipc", 2,
               "--out", tmp_path / "g") == 2
    assert run("synth-gen", "--anchor-correlation", 2.0, "--out", tmp_path / "s") == 2


def test_train_irl_lr_zero_keeps_init(tmp_path, corpus):
    out = tmp_path / "irl"
    assert run("train-irl", "--data", corpus / "manifest.json", "--ipc", 2, "--epochs", 1, "--ppo-epochs", 1,
               "--lr", 0, *TINY_FLAGS, "--out", out) == 0
    for name in ("policy", "critic", "discriminator"):
        init, _ = nc.load_params(out / "checkpoints" / f"{name}-000.ckpt")
        final, meta = nc.load_params(out / f"{name}.ckpt")
        assert meta["epoch"] == 1
        assert all(np.array_equal(init[k], final[k]) for k in init)
    rows = list(csv.reader(open(out / "diagnostics.csv")))
    assert rows[0] == ["iteration", "d_loss", "d_accuracy", "mean_reward", "entropy", "value_loss"]
    assert len(rows) >= 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus):
    out = tmp_path_factory.mktemp("irl")
    assert run("train-irl", "--data", corpus / "manifest.json", "--ipc", 3, "--epochs", 1, "--ppo-epochs", 1,
               "--checkpoint-every", 0, *TINY_FLAGS, "--out", out) == 0
    assert not (out / "checkpoints").exists()
    return out


def test_generate_then_eval_identical_files(tmp_path, corpus):
    g = tmp_path / "human"
    assert run("generate", "--data", corpus / "manifest.json", "--baseline", "human", "--out", g) == 0
    e = tmp_path / "eval"
    assert run("eval", "--scanpaths", g / "scanpaths.json", "--human", g / "scanpaths.json", "--out", e) == 0
    row = next(csv.DictReader(open(e / "report.csv")))
    assert float(row["sequence_score"]) == 1.0 and float(row["prob_mismatch"]) == 0.0
    assert float(row["mm_position"]) == 1.0
    assert "human_consistency" in (e / "config.txt").read_text()


def test_model_generation_and_eval(tmp_path, corpus, trained):
    outs = []
    for mode in ("sample", "greedy"):
        g = tmp_path / mode
        assert run("generate", "--data", corpus / "manifest.json", "--model", trained / "policy.ckpt",
                   "--mode", mode, "--n", 2, "--out", g) == 0
        rows = json.loads((g / "scanpaths.json").read_text())
        assert rows and all("bbox" in r and len(r["fixations"]) <= 7 for r in rows)
        outs.append(g / "scanpaths.json")
    b = tmp_path / "det"
    assert run("generate", "--data", corpus / "manifest.json", "--baseline", "detector", "--n", 2, "--out", b) == 0
    e = tmp_path / "eval"
    assert run("eval", "--data", corpus / "manifest.json", "--scanpaths", outs[0], "--scanpaths", outs[1],
               "--scanpaths", b / "scanpaths.json", "--name", "irl", "--name", "greedy", "--name", "detector",
               "--out", e) == 0
    names = [r["model"] for r in csv.DictReader(open(e / "report.csv"))]
    assert names == ["irl", "greedy", "detector"]
    assert len((e / "tfp.csv").read_text().splitlines()) == 1 + 3 * 7
    assert run("generate", "--data", corpus / "manifest.json", "--model", trained / "critic.ckpt",
               "--out", tmp_path / "bad") == 2


def test_reward_map_and_context(tmp_path, corpus, trained):
    r = tmp_path / "rm"
    assert run("reward-map", "--data", corpus / "manifest.json", "--discriminator", trained / "discriminator.ckpt",
               "--limit", 2, "--out", r) == 0
    assert len(list((r / "maps" / "reward").glob("*.ppm"))) == 2
    assert len((r / "reports" / "reward_summary.csv").read_text().splitlines()) == 3
    assert run("reward-map", "--data", corpus / "manifest.json", "--discriminator", trained / "policy.ckpt",
               "--out", r) == 2
    c = tmp_path / "ctx"
    assert run("context", "--data", corpus / "manifest.json", "--model", trained / "policy.ckpt", "--task", "car",
               "--categories", "anchor,lookalike", "--n", 2, "--limit", 1, "--workers", 2, "--out", c) == 0
    rows = list(csv.DictReader(open(c / "reports" / "context_effects.csv")))
    assert [x["category"] for x in rows] == ["anchor", "lookalike"]
    assert len(list((c / "maps" / "context").glob("*.ppm"))) == 2
    c2 = tmp_path / "ctx2"
    assert run("context", "--data", corpus / "manifest.json", "--model", trained / "policy.ckpt", "--task", "car",
               "--categories", "anchor,lookalike", "--n", 2, "--limit", 1, "--workers", 1, "--out", c2) == 0
    assert tree(c) == tree(c2)


def test_train_bc_both_kinds(tmp_path, corpus):
    for kind, ck in (("cnn", "policy.ckpt"), ("lstm", "bclstm.ckpt")):
        out = tmp_path / kind
        extra = ["--hidden", 3] if kind == "lstm" else []
        assert run("train-bc", "--data", corpus / "manifest.json", "--kind", kind, "--ipc", 2, "--epochs", 2,
                   *TINY_FLAGS, *extra, "--out", out) == 0
        assert (out / ck).is_file() and len((out / "losses.csv").read_text().splitlines()) == 3
    g = tmp_path / "gen"
    assert run("generate", "--data", corpus / "manifest.json", "--model", tmp_path / "lstm" / "bclstm.ckpt",
               "--n", 1, "--out", g) == 0
    assert run("train-bc", "--data", corpus / "manifest.json", "--hidden", 3, "--out", tmp_path / "z") == 2


def test_sweep_and_loso(tmp_path, corpus):
    s = tmp_path / "sweep"
    assert run("sweep-ipc", "--data", corpus / "manifest.json", "--ipcs", "2", "--methods", "bc_cnn",
               "--epochs", 1, "--n", 1, *TINY_FLAGS, "--out", s) == 0
    assert next(csv.DictReader(open(s / "reports" / "sweep_ipc.csv")))["model"] == "bc_cnn@2ipc"
    assert run("sweep-ipc", "--data", corpus / "manifest.json", "--ipcs", "99", "--out", s) == 2
    # the one-subject corpus cannot be split by subject
    assert run("loso", "--data", corpus / "manifest.json", "--out", tmp_path / "l") == 2


def test_grad_check_command(tmp_path, capsys):
    assert run("grad-check", "--per-tensor", 2, "--out", tmp_path) == 0
    assert "checks passed" in (tmp_path / "gradcheck.txt").read_text()
    assert "checks passed" in capsys.readouterr().out


def test_component_seeds():
    assert cli.component_seed(0, "generate") == cli.component_seed(0, "generate")
    assert cli.component_seed(0, "generate") != cli.component_seed(0, "context")
    assert cli.component_seed(1, "generate") != cli.component_seed(0, "generate")


def test_loso_two_subjects(tmp_path):
    d = tmp_path / "c2"
    assert run("synth-gen", "--scenes-per-task", 10, "--out", d) == 0
    out = tmp_path / "loso"
    assert run("loso", "--data", d / "manifest.json", "--subjects", "s0", "--epochs", 1, "--ppo-epochs", 1,
               "--image-batch", 64, "--n", 1, *TINY_FLAGS, "--workers", 1, "--out", out) == 0
    names = [r["model"] for r in csv.DictReader(open(out / "reports" / "loso.csv"))]
    assert names == ["irl-group-s0", "irl-individual-s0"]
    assert run("loso", "--data", d / "manifest.json", "--subjects", "s9", "--out", out) == 2
