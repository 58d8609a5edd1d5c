import json

import pytest

from ltu.cli import main

MODEL = '{"d_model":8,"n_heads":2,"n_layers":1,"max_seq_len":64}'


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    common = ["--kind", "ppc", "--lexicon-size", "4", "--n-categories", "4"]
    assert main(["gen", *common, "--out", str(d / "ct"), "--n", "40", "--common", "10"]) == 0
    assert main(["gen", *common, "--out", str(d / "sft"), "--n", "30", "--split", "heldout",
                 "--task", "ctr", "--seed", "0"]) == 0
    return d


def test_gen_outputs(workspace):
    for name in ("domain.json", "split.json", "vocab.txt", "trajectories.jsonl", "common.txt"):
        assert (workspace / "ct" / name).exists()
    split = json.loads((workspace / "ct" / "split.json").read_text())
    assert len(split["heldout"]) == 2


def test_pretrain_finetune_inspect(workspace, capsys):
    d = workspace
    vocab = str(d / "ct" / "vocab.txt")
    assert main(["pretrain", "--corpus", str(d / "ct" / "trajectories.jsonl"), "--vocab", vocab,
                 "--out", str(d / "ct.ltu"), "--steps", "2", "--batch-size", "2", "--model", MODEL,
                 "--name", "ppc", "--seed", "7"]) == 0
    assert main(["finetune", "--data", str(d / "sft" / "trajectories.jsonl"), "--vocab", vocab,
                 "--init", str(d / "ct.ltu"), "--out", str(d / "sft.ltu"), "--steps", "2",
                 "--batch-size", "2", "--name", "ppc-ctr", "--seed", "3"]) == 0
    capsys.readouterr()
    assert main(["inspect", "--checkpoint", str(d / "sft.ltu")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "CT:ppc-seed7 → SFT:ppc-ctr-seed3"
    assert "phase: SFT" in out

    assert main(["eval", "--checkpoint", str(d / "sft.ltu"), "--data", str(d / "sft" / "trajectories.jsonl"),
                 "--vocab", vocab, "--task", "ppc_ctr", "--predictions", str(d / "p.jsonl")]) == 0
    assert "accuracy" in capsys.readouterr().out
    assert len((d / "p.jsonl").read_text().splitlines()) == 30


def test_pretrain_with_common_mix(workspace):
    d = workspace
    assert main(["pretrain", "--corpus", str(d / "ct" / "trajectories.jsonl"), "--vocab",
                 str(d / "ct" / "vocab.txt"), "--common", str(d / "ct" / "common.txt"),
                 "--mix-fraction", "0.25", "--out", str(d / "mix.ltu"), "--steps", "1",
                 "--batch-size", "2", "--model", MODEL]) == 0


def test_finetune_needs_init(workspace, capsys):
    d = workspace
    code = main(["finetune", "--data", str(d / "sft" / "trajectories.jsonl"), "--vocab",
                 str(d / "ct" / "vocab.txt"), "--out", str(d / "x.ltu")])
    assert code == 2
    assert "error[config]" in capsys.readouterr().err
    assert not (d / "x.ltu").exists()


def test_eval_refuses_overlap(workspace, capsys):
    d = workspace
    vocab = str(d / "ct" / "vocab.txt")
    assert main(["finetune", "--data", str(d / "sft" / "trajectories.jsonl"), "--vocab", vocab,
                 "--fresh-init", "--out", str(d / "fresh.ltu"), "--steps", "1", "--model", MODEL]) == 0
    code = main(["eval", "--checkpoint", str(d / "fresh.ltu"), "--data", str(d / "sft" / "trajectories.jsonl"),
                 "--vocab", vocab, "--task", "ppc_ctr", "--train", str(d / "sft" / "trajectories.jsonl")])
    assert code == 1
    assert "ContaminationError" in capsys.readouterr().err


def test_bins(tmp_path, capsys):
    (tmp_path / "v.txt").write_text("\n".join(str(i) for i in range(1, 10)) + "\n")
    assert main(["bins", "--values", str(tmp_path / "v.txt"), "--k", "3", "--out", str(tmp_path / "b.json")]) == 0
    spec = json.loads((tmp_path / "b.json").read_text())
    assert spec["edges"] == pytest.approx([11 / 3, 19 / 3])
    (tmp_path / "c.txt").write_text("4\n4\n4\n")
    assert main(["bins", "--values", str(tmp_path / "c.txt"), "--k", "2", "--out", str(tmp_path / "c.json")]) == 1


def test_matrix_happy_path(tmp_path):
    plan = {"seeds": [0], "domains": [{"kind": "ppc", "lexicon_size": 4, "n_categories": 4}],
            "tasks": [{"domain": "ppc", "task": "ctr"}], "arms": ["sft_only", "ltu_in_domain"],
            "model": json.loads(MODEL), "corpus": {"ct_docs": 20, "sft_train": 10, "sft_eval": 10},
            "ct": {"steps": 1}, "sft": {"steps": 1}, "bayes_eval": 200}
    (tmp_path / "p.json").write_text(json.dumps(plan))
    assert main(["matrix", "--plan", str(tmp_path / "p.json"), "--out", str(tmp_path / "runs")]) == 0
    for name in ("report.csv", "report.md", "predictions.jsonl"):
        assert (tmp_path / "runs" / name).exists()


def test_invalid_plan_exit_2(tmp_path, capsys):
    (tmp_path / "p.json").write_text(json.dumps({"seeds": [0], "domains": [], "tasks": [], "arms": [],
                                                 "surprise": 1}))
    assert main(["matrix", "--plan", str(tmp_path / "p.json"), "--out", str(tmp_path / "o")]) == 2
    assert capsys.readouterr().err.startswith("error[config]")
    assert not (tmp_path / "o").exists()


def test_bad_arguments_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_missing_checkpoint_exit_1(tmp_path, capsys):
    assert main(["inspect", "--checkpoint", str(tmp_path / "none.ltu")]) == 1
    assert "error[runtime]" in capsys.readouterr().err
