import json
import os

import numpy as np
import pytest

from influence_select import cli
from influence_select.bandit import read_selection
from influence_select.corpus import write_embeddings, write_tokens
from influence_select.synthetic import CandidateInstance, SyntheticSpec, generate


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    data = generate(SyntheticSpec(
        n_instances=600, embed_dim=8, n_components=8, n_aligned=2, vocab_size=24,
        seq_len=10, n_reference=24, pattern_tokens=6, seed=5,
    ))
    write_embeddings(root / "embeddings.bin", data.embeddings)
    write_tokens(root / "tokens.tsv", data.instances)
    ref_rows = [CandidateInstance(id=i, tokens=seq, embedding_row=i)
                for i, seq in enumerate(data.reference.sequences)]
    write_tokens(root / "reference.tsv", ref_rows)
    cfg = root / "run.cfg"
    cfg.write_text(
        f"paths.embeddings = {root}/embeddings.bin\n"
        f"paths.tokens = {root}/tokens.tsv\n"
        f"paths.reference = {root}/reference.tsv\n"
        f"paths.output_dir = {root}/out\n"
        "clustering.k = 8\n"
        "model.vocab_size = 24\n"
        "model.hidden_dim = 16\n"
        "model.n_layers = 1\n"
        "model.n_heads = 2\n"
        "model.max_context = 16\n"
        "model.mlp_ratio = 2.0\n"
        "bandit.alpha = 10.0\n"
        "bandit.tau = 20.0\n"
        "bandit.gamma = 0.1\n"
        "bandit.top_k = 3\n"
        "bandit.batch_size = 6\n"
        "bandit.reward_mode = mean\n"
        "selection.budget = 60\n"
        "trainer.steps = 8\n"
        "trainer.batch_size = 8\n"
    )
    return root, cfg


def _run(*argv):
    return cli.main(list(argv))


def test_cluster_command(workdir):
    root, cfg = workdir
    assert _run("cluster", "--config", str(cfg)) == 0
    assert (root / "out" / "clusters.bin").exists()
    meta = json.loads((root / "out" / "clusters.bin.meta.json").read_text())
    assert meta["k"] == 8
    assert meta["count"] == 600


def test_select_requires_cluster_artifact(workdir, tmp_path):
    root, cfg = workdir
    code = _run("select", "--config", str(cfg), "--set", f"paths.output_dir={tmp_path}/empty")
    assert code == 2  # actionable data error naming the producing command


def test_select_and_ledger(workdir):
    root, cfg = workdir
    assert _run("select", "--config", str(cfg)) == 0
    selected = read_selection(root / "out" / "selection.txt")
    assert len(selected) >= 60
    assert len(set(selected)) == len(selected)
    lines = [json.loads(l) for l in (root / "out" / "ledger.jsonl").read_text().splitlines()]
    assert lines[-1]["selected_total"] == len(selected)


def test_budget_zero_empty_selection(workdir, tmp_path):
    root, cfg = workdir
    out = tmp_path / "out0"
    assert _run("cluster", "--config", str(cfg), "--set", f"paths.output_dir={out}") == 0
    assert _run("select", "--config", str(cfg), "--set", f"paths.output_dir={out}",
                "--set", "selection.budget=0") == 0
    sel = read_selection(out / "selection.txt")
    assert sel == []


def test_score_command(workdir):
    root, cfg = workdir
    assert _run("score", "--config", str(cfg), "--ids", "0,5,10") == 0
    text = (root / "out" / "scores.csv").read_text().splitlines()
    assert text[0].startswith("# config_fingerprint=")
    assert text[1] == "instance_id,score,method"
    assert len(text) == 5
    assert text[2].split(",")[0] == "0"


def test_score_without_ids_is_usage_error(workdir):
    root, cfg = workdir
    assert _run("score", "--config", str(cfg)) == 1


def test_unknown_config_key_is_usage_error(workdir):
    root, cfg = workdir
    assert _run("cluster", "--config", str(cfg), "--set", "bogus.key=1") == 1


def test_report_composition_sums_to_selection(workdir):
    root, cfg = workdir
    assert _run("report", "--config", str(cfg)) == 0
    comp_lines = (root / "out" / "report_composition.csv").read_text().splitlines()[2:]
    total = sum(int(line.split(",")[1]) for line in comp_lines)
    assert total == len(read_selection(root / "out" / "selection.txt"))
    loss_lines = (root / "out" / "report_loss.csv").read_text().splitlines()
    methods = [l.split(",")[0] for l in loss_lines[2:]]
    assert methods == ["initial", "selected", "random", "top-clusters"]


def test_simulate_bandit_command(workdir, tmp_path):
    root, cfg = workdir
    out = tmp_path / "sim"
    assert _run("simulate-bandit", "--config", str(cfg),
                "--set", f"paths.output_dir={out}",
                "--set", "sim.trials=2", "--set", "sim.steps=50") == 0
    lines = (out / "regret.csv").read_text().splitlines()
    assert lines[1] == "policy,trial,step,regret,cum_regret"
    policies = {l.split(",")[0] for l in lines[2:]}
    assert policies == {"ucb", "topk-greedy", "random"}


def test_oracle_check_command(workdir, tmp_path):
    root, cfg = workdir
    out = tmp_path / "oracle"
    assert _run("oracle-check", "--config", str(cfg),
                "--set", f"paths.output_dir={out}",
                "--set", "oracle.candidates=60") == 0
    for name in ("oracle_kronecker.csv", "oracle_gradcheck.csv", "oracle_methods.csv"):
        assert (out / name).exists()
    methods = (out / "oracle_methods.csv").read_text()
    assert "joint-qkv" in methods


def test_rerun_is_byte_identical(workdir, tmp_path):
    root, cfg = workdir
    out = tmp_path / "det"
    args = ["--config", str(cfg), "--set", f"paths.output_dir={out}"]
    assert _run("cluster", *args) == 0
    assert _run("select", *args) == 0
    first = {
        name: (out / name).read_bytes()
        for name in ("clusters.bin", "selection.txt", "ledger.jsonl")
    }
    assert _run("cluster", *args) == 0
    assert _run("select", *args) == 0
    for name, blob in first.items():
        assert (out / name).read_bytes() == blob


def test_missing_embeddings_is_data_error(workdir, tmp_path):
    root, cfg = workdir
    assert _run("cluster", "--config", str(cfg),
                "--set", "paths.embeddings=/nonexistent/x.bin") == 2


def test_sketched_selection_path(workdir, tmp_path):
    root, cfg = workdir
    out = tmp_path / "sk"
    args = ["--config", str(cfg), "--set", f"paths.output_dir={out}",
            "--set", "influence.use_sketch=true", "--set", "influence.sketch_dim=64",
            "--set", "selection.budget=20"]
    assert _run("cluster", *args) == 0
    assert _run("select", *args) == 0
    assert len(read_selection(out / "selection.txt")) >= 20
    assert _run("score", *args, "--ids", "0,1") == 0
    lines = (out / "scores.csv").read_text().splitlines()
    assert lines[2].endswith("factored+sketch")
