"""
Tests for experiment configs and the command-line pipeline on a tiny setup.
"""

import csv
import json
import os

import pytest

import main
import metrics
from config import ExperimentConfig, load_config
from corpus import load_corpus
from errors import ConfigError
from experiments import ABLATION_RECIPES, recipe_path

TINY = [
    "num_languages=3", "concepts=5", "min_length=2", "max_length=4",
    "train_per_edge=6", "valid_per_edge=2", "test_per_direction=2",
    "finetune_directions=2", "finetune_per_direction=3",
    "d_model=16", "n_heads=2", "n_layers=1", "d_ff=32", "max_positions=64",
    "dropout=0.0", "attention_dropout=0.0",
    "max_steps=2", "warmup_steps=1", "batch_tokens=64", "bucket_pool=4",
    "log_interval=1", "valid_interval=1", "save_interval=1", "average_last=2",
    "beam=2", "analysis_samples=3",
]


def _sets(overrides):
    args = []
    for item in overrides:
        args += ["--set", item]
    return args


def test_config_defaults_and_overrides():
    config = ExperimentConfig()
    assert config.vocab_size == 3 + 6 + 6 * 50
    changed = config.with_overrides(["variant=ratio_1.25", "max_steps=10", "groups=[[1,2],[3]]"])
    assert changed.variant == "ratio_1.25"
    assert changed.max_steps == 10
    assert changed.groups == [[1, 2], [3]]
    assert changed.train_config().max_steps == 10
    assert changed.model_config().variant == "ratio_1.25"
    with pytest.raises(ConfigError):
        config.with_overrides(["no_such_key=1"])
    with pytest.raises(ConfigError):
        config.with_overrides(["max_steps"])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"variant": "registering", "colour": "red"})
    with pytest.raises(ConfigError):
        ExperimentConfig(variant="ratio_abc")
    with pytest.raises(ConfigError):
        ExperimentConfig(min_length=5, max_length=3)


def test_config_files(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(ExperimentConfig(variant="vanilla").to_json())
    assert load_config(str(path)).variant == "vanilla"
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(str(path))
    path.write_text("{broken")
    with pytest.raises(ConfigError):
        load_config(str(path))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))


@pytest.mark.parametrize("name", list(ABLATION_RECIPES) + ["lora_finetune_5dir"])
def test_recipes_load(name):
    config = ExperimentConfig.from_json(recipe_path(name))
    assert config.variant_spec() is not None
    with pytest.raises(ConfigError):
        recipe_path("no_such_recipe")


def test_show_mask(capsys):
    assert main.main(["show-mask", "--src-len", "3", "--tgt-len", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "src=3 reg=3 tgt=2 variant=registering"
    assert len(lines) == 9
    # targets see the registers and earlier targets, never the source
    assert lines[7] == "...1111."
    assert lines[8] == "...11111"

    assert main.main(["show-mask", "--src-len", "3", "--tgt-len", "2", "--variant", "vanilla"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "src=3 reg=0 tgt=2 variant=vanilla"
    assert lines[-1] == "11111"


def test_bad_variant_exit_code(capsys):
    assert main.main(["show-mask", "--src-len", "3", "--tgt-len", "2", "--variant", "sideways"]) == 2
    assert "ERROR" in capsys.readouterr().err


@pytest.fixture
def corpus_dir(tmp_path):
    out = str(tmp_path / "data")
    assert main.main(["gen-data", "--out", out] + _sets(TINY)) == 0
    return out


def test_gen_data(corpus_dir, capsys):
    corpus = load_corpus(corpus_dir)
    assert corpus.vocab.size == 3 + 3 + 15
    assert len(corpus.train) == 6 * 4
    assert len(corpus.test) == 2 * 6
    assert len(corpus.finetune) == 2 * 3
    saved = json.load(open(os.path.join(corpus_dir, "config.json")))
    assert saved["num_languages"] == 3

    # refuses to overwrite without --force
    assert main.main(["gen-data", "--out", corpus_dir] + _sets(TINY)) == 2
    assert "--force" in capsys.readouterr().err
    assert main.main(["gen-data", "--out", corpus_dir, "--force"] + _sets(TINY)) == 0


def test_train_evaluate_analyze(tmp_path, corpus_dir, capsys):
    run = str(tmp_path / "run")
    assert main.main(["train", "--corpus", corpus_dir, "--out", run] + _sets(TINY)) == 0
    for name in ("checkpoint_last.ckpt", "checkpoint_avg.ckpt", "state.ckpt", "config.json",
                 "checkpoint_0000001.ckpt", "checkpoint_0000002.ckpt"):
        assert os.path.exists(os.path.join(run, name)), name
    ckpt = os.path.join(run, "checkpoint_last.ckpt")

    assert main.main(["evaluate", "--checkpoint", ckpt, "--corpus", corpus_dir, "--beam", "2"]) == 0
    report = json.load(open(os.path.join(run, "report.json")))
    assert len(report["directions"]) == 6
    assert report["failed_directions"] == {}
    with open(os.path.join(run, "report.csv"), newline="") as f:
        assert len(list(csv.reader(f))) == 7

    for which in ("attention", "layersim", "hidden"):
        assert main.main(["analyze", "--checkpoint", ckpt, "--corpus", corpus_dir, "--which", which,
                          "--samples", "3"]) == 0
    assert json.load(open(os.path.join(run, "attention_stats.json")))["sentences"] == 3
    assert open(os.path.join(run, "layer_similarity.csv")).readline().startswith("layer,")
    assert os.path.exists(os.path.join(run, "hidden_layer1.csv"))

    capsys.readouterr()
    assert main.main(["translate", "--checkpoint", ckpt, "--corpus", corpus_dir, "--src-lang", "0",
                      "--tgt-lang", "1", "--ids", "7 8 9", "--beam", "2"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 2
    assert main.main(["translate", "--checkpoint", ckpt, "--corpus", corpus_dir]) == 2


def test_vanilla_analysis_refused(tmp_path, corpus_dir):
    run = str(tmp_path / "vanilla")
    assert main.main(["train", "--corpus", corpus_dir, "--out", run, "--set", "variant=vanilla"]
                     + _sets(TINY)) == 0
    ckpt = os.path.join(run, "checkpoint_last.ckpt")
    assert main.main(["analyze", "--checkpoint", ckpt, "--corpus", corpus_dir, "--which", "attention"]) == 2


def test_lora_finetune(tmp_path, corpus_dir):
    base_run = str(tmp_path / "base")
    assert main.main(["train", "--corpus", corpus_dir, "--out", base_run] + _sets(TINY)) == 0
    base = os.path.join(base_run, "checkpoint_last.ckpt")

    lora_run = str(tmp_path / "lora")
    assert main.main(["train", "--corpus", corpus_dir, "--out", lora_run, "--base", base,
                      "--config", recipe_path("lora_finetune_5dir")] + _sets(TINY)) == 0
    adapter = os.path.join(lora_run, "checkpoint_last.ckpt")
    assert main.main(["evaluate", "--checkpoint", adapter, "--corpus", corpus_dir, "--beam", "1"]) == 0
    # lora mode without a base checkpoint
    assert main.main(["train", "--corpus", corpus_dir, "--out", str(tmp_path / "x"),
                      "--config", recipe_path("lora_finetune_5dir")] + _sets(TINY)) == 2


def test_resume_from_cli(tmp_path, corpus_dir):
    run = str(tmp_path / "run")
    short = TINY + ["max_steps=1"]
    assert main.main(["train", "--corpus", corpus_dir, "--out", run] + _sets(short)) == 0
    assert main.main(["train", "--corpus", corpus_dir, "--out", run, "--resume"] + _sets(TINY)) == 0
    with open(os.path.join(run, "train_log.csv"), newline="") as f:
        steps = [row[0] for row in csv.reader(f)][1:]
    assert steps == ["1", "2"]


def test_failed_direction_exit_code(tmp_path, corpus_dir, monkeypatch, capsys):
    run = str(tmp_path / "run")
    assert main.main(["train", "--corpus", corpus_dir, "--out", run] + _sets(TINY)) == 0
    real = metrics.translate

    def flaky(params, source_ids, variant=None, beam=5):
        if source_ids[0] == 4:  # tag of L1
            raise RuntimeError("out of memory")
        return real(params, source_ids, variant, beam)

    monkeypatch.setattr(metrics, "translate", flaky)
    ckpt = os.path.join(run, "checkpoint_last.ckpt")
    assert main.main(["evaluate", "--checkpoint", ckpt, "--corpus", corpus_dir, "--beam", "1"]) == 1
    assert "failed to decode" in capsys.readouterr().out
    report = json.load(open(os.path.join(run, "report.json")))
    assert set(report["failed_directions"]) == {"L0-L1", "L2-L1"}


def test_ablate(tmp_path):
    out = str(tmp_path / "ablation")
    assert main.main(["ablate", "--recipes", "vanilla", "registering", "--seeds", "0", "--out", out,
                      "--beam", "1"] + _sets(TINY)) == 0
    with open(os.path.join(out, "ablation.csv"), newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["recipe"] for r in rows] == ["vanilla", "registering"]
    assert rows[0]["entropy"] == "nan"
    assert float(rows[1]["entropy"]) >= 0.0
    assert os.path.exists(os.path.join(out, "registering", "seed_0", "checkpoint_last.ckpt"))


def test_training_twice_gives_identical_files(tmp_path, corpus_dir):
    runs = [str(tmp_path / "first"), str(tmp_path / "second")]
    for run in runs:
        assert main.main(["train", "--corpus", corpus_dir, "--out", run]
                         + _sets(TINY + ["dropout=0.1", "attention_dropout=0.1"])) == 0
    names = sorted(os.listdir(runs[0]))
    assert names == sorted(os.listdir(runs[1]))
    assert {"train_log.csv", "valid_log.csv", "checkpoint_last.ckpt", "checkpoint_avg.ckpt",
            "state.ckpt"} <= set(names)
    for name in names:
        with open(os.path.join(runs[0], name), "rb") as a, open(os.path.join(runs[1], name), "rb") as b:
            assert a.read() == b.read(), name


def test_checkpoint_refuses_other_corpus(tmp_path, corpus_dir, capsys):
    run = str(tmp_path / "run")
    assert main.main(["train", "--corpus", corpus_dir, "--out", run] + _sets(TINY)) == 0
    ckpt = os.path.join(run, "checkpoint_avg.ckpt")
    other = str(tmp_path / "other")
    assert main.main(["gen-data", "--out", other] + _sets(TINY + ["data_seed=9"])) == 0
    capsys.readouterr()
    assert main.main(["evaluate", "--checkpoint", ckpt, "--corpus", other, "--beam", "1"]) == 2
    assert "different corpus" in capsys.readouterr().err
    assert main.main(["evaluate", "--checkpoint", ckpt, "--corpus", corpus_dir, "--beam", "1"]) == 0
