import json
import shutil
import subprocess
import sys

import pytest

from helpers import run_cli_pipeline
from tsaux.cli import main
from tsaux.features import read_feature_archive
from tsaux.mixer import EVAL_SIRS
from tsaux.model import load_checkpoint


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_cli_pipeline(tmp_path_factory.mktemp("cli"))


def lines(path):
    return [json.loads(l) for l in path.read_text().splitlines()]


def test_corpus_layout(pipeline):
    train = lines(pipeline / "corpus/train.jsonl")
    assert len(train) == 16
    assert all((pipeline / "corpus" / r["audio_path"]).exists() for r in train)
    mix = lines(pipeline / "mix_eval/mixtures.jsonl")
    assert len(mix) == 5 * len(lines(pipeline / "corpus/eval.jsonl"))
    assert {m["sir_db"] for m in mix} == set(EVAL_SIRS)


def test_feature_archives(pipeline):
    index = lines(pipeline / "mix_train/features/index.jsonl")
    assert len(index) == 16
    m, uid = read_feature_archive(pipeline / "mix_train/features" / index[0]["archive"])
    assert uid == index[0]["utterance_id"] and m.frames == index[0]["frames"] and m.dims == 40


def test_training_outputs(pipeline):
    model = pipeline / "model"
    for name in ("final.mdl", "epoch1.mdl", "config.txt", "train.log.jsonl", "graphs/den.fsa",
                 "graphs/decoding.fsa", "graphs/lm.fsa", "graphs/topology.json"):
        assert (model / name).exists(), name
    arch, _ = load_checkpoint(model / "final.mdl")
    assert arch.num_aux == 1
    assert load_checkpoint(pipeline / "clean_model/final.mdl")[0].num_aux == 0
    log = lines(model / "train.log.jsonl")
    assert log and all("combined" in r for r in log)
    assert "chunk_width = 40" in (model / "config.txt").read_text()


def test_hypotheses_and_scores(pipeline):
    hyps = lines(pipeline / "aux.hyp.jsonl")
    assert len(hyps) == 40 and {h["branch"] for h in hyps} == {"aux"}
    score = json.loads((pipeline / "runs/main.score.json").read_text())
    assert set(score["conditions"]) == {"10", "5", "0", "-5", "-10"}
    table = (pipeline / "runs/report.txt").read_text().splitlines()
    assert table[0].split()[-1] == "Avg." and {l.split()[0] for l in table[2:]} == {"aux", "main"}


def test_clean_scoring(pipeline, capsys):
    main(["score", "--hyp", str(pipeline / "clean.hyp.jsonl"), "--ref", str(pipeline / "corpus/eval.jsonl")])
    assert set(json.loads(capsys.readouterr().out)["conditions"]) == {"inf"}


def test_experiment_report(pipeline):
    rep = json.loads((pipeline / "experiment/report.json").read_text())
    assert rep["seeds"] == [0, 1]
    assert set(rep["pooled"]) == {"middle alpha=0", "middle alpha=1", "early alpha=1",
                                  "middle alpha=1 (aux vs interference)"}
    assert "relative reduction" in (pipeline / "experiment/report.txt").read_text()


def test_decoding_aux_of_a_clean_model_fails(pipeline, tmp_path):
    with pytest.raises(SystemExit):
        main(["decode", "--checkpoint", str(pipeline / "clean_model/final.mdl"), "--branch", "aux",
              "--manifest", str(pipeline / "mix_eval/mixtures.jsonl"), "--out", str(tmp_path / "x")])


def test_report_without_scores(tmp_path):
    with pytest.raises(SystemExit):
        main(["report", "--runs", str(tmp_path)])


@pytest.mark.skipif(shutil.which("tsaux") is None, reason="console script not installed")
def test_console_script():
    out = subprocess.run(["tsaux", "--help"], capture_output=True, text=True, check=True).stdout
    for cmd in ("toy-corpus", "mix-corpus", "extract-features", "train", "decode", "score", "report"):
        assert cmd in out


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "tsaux.cli", "score", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "--hyp" in out.stdout
