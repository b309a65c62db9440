import json

import numpy as np
import pytest

from epep import bkm
from epep.cli import main
from epep.config import RunConfig
from epep.errors import ConfigError
from epep.verify import run_suites

SMALL = {
    "model": {"d_model": 16, "layers": 2, "prompt_len": 4},
    "prompt": {"rank": 2},
    "task": {"text_len": 8, "num_patches": 8, "patch_dim": 8},
    "data": {"n_train": 96, "n_test": 64, "n_pretrain": 96},
    "optim": {"epochs": 2, "warmup_epochs": 2, "batch_size": 32},
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(SMALL))
    return path


def run_train(tmp_path, config_path, name="run", *extra):
    out = tmp_path / name
    assert main(["train", str(config_path), "--out", str(out), *extra]) == 0
    return out


class TestParams:
    def test_table(self, capsys):
        assert main(["params", "--m", "2", "--d", "768", "--l", "16", "--r", "4"]) == 0
        out = capsys.readouterr().out
        counts = {line.split()[0]: int(line.split()[1]) for line in out.splitlines()[1:]}
        assert counts == {"MAP": 36864, "MSP": 24576, "EPEP": 3144}
        assert "6280" in out

    def test_single_modality(self, capsys):
        assert main(["params", "--m", "1", "--d", "64", "--l", "32", "--r", "2"]) == 0
        rows = {line.split()[0]: line.split()[1] for line in capsys.readouterr().out.splitlines()[1:]}
        assert rows["MAP"] == rows["MSP"]

    def test_indivisible(self, capsys):
        assert main(["params", "--m", "3", "--d", "10", "--l", "9", "--r", "1"]) != 0
        assert "EPEP" in capsys.readouterr().err


class TestSynth:
    def test_quota_lines(self, tmp_path, capsys):
        assert main(["synth", "--n", "400", "--protocol", "0.75,0.75", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "synthetic_t0.75_i0.75.jsonl").read_text().splitlines()
        recs = [json.loads(x) for x in lines]
        assert len(recs) == 400
        assert sum(r["text_tokens"] is None or r["image_patches"] is None for r in recs) == 200

    def test_one_file_per_protocol(self, tmp_path):
        assert main(["synth", "--n", "20", "--protocol", "1,0.5", "--protocol", "0.5,1", "--out", str(tmp_path)]) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["synthetic_t0.5_i1.jsonl", "synthetic_t1_i0.5.jsonl"]

    def test_bad_protocol(self, tmp_path):
        assert main(["synth", "--protocol", "0.2,0.2", "--out", str(tmp_path)]) != 0


class TestTrainEval:
    def test_outputs(self, tmp_path, config_path, capsys):
        out = run_train(tmp_path, config_path)
        assert sorted(p.name for p in out.iterdir()) == ["checkpoint.json", "config.json", "metrics.csv"]
        resolved = json.loads((out / "config.json").read_text())
        # every default is materialised
        assert resolved == RunConfig.from_dict(resolved).to_dict()
        assert resolved["optim"]["lr"] == 1e-2 and resolved["lam"] == 0.004

        assert main(["eval", str(out / "checkpoint.json"), "--out", str(tmp_path / "ev")]) == 0
        row = (tmp_path / "ev" / "eval.csv").read_text().splitlines()[1]
        assert row == (out / "metrics.csv").read_text().splitlines()[-1]

    def test_no_prompt_override(self, tmp_path, config_path):
        out = run_train(tmp_path, config_path, "np", "--method", "NoPrompt")
        doc = json.loads((out / "checkpoint.json").read_text())
        assert doc["config"]["method"] == "NoPrompt"
        assert doc["model"]["prompts"] is None

    def test_missing_dataset_path(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"data": {"source": "jsonl", "test_path": "x.jsonl"}}))
        assert main(["train", str(path), "--out", str(tmp_path / "o")]) != 0
        assert "data.train_path" in capsys.readouterr().err

    def test_unknown_field(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"optim": {"learning_rate": 0.1}}))
        assert main(["train", str(path)]) != 0
        assert "optim.learning_rate" in capsys.readouterr().err

    def test_version_mismatch(self, tmp_path, config_path, capsys):
        out = run_train(tmp_path, config_path)
        doc = json.loads((out / "checkpoint.json").read_text())
        doc["format_version"] = 99
        (out / "checkpoint.json").write_text(json.dumps(doc))
        assert main(["eval", str(out / "checkpoint.json")]) != 0
        assert "format version" in capsys.readouterr().err

    def test_eval_mismatched_classes(self, tmp_path, config_path, capsys):
        out = run_train(tmp_path, config_path)
        data_dir = tmp_path / "d"
        assert main(["synth", "--n", "12", "--num-classes", "3", "--out", str(data_dir)]) == 0
        capsys.readouterr()
        path = next(data_dir.iterdir())
        assert main(["eval", str(out / "checkpoint.json"), "--data", str(path)]) != 0
        assert "class" in capsys.readouterr().err

    def test_untrained_checkpoint_is_chance(self, tmp_path, capsys):
        scores = []
        for seed in range(5):
            cfg = {**SMALL, "seed": seed, "data": {"n_train": 8, "n_test": 1000, "n_pretrain": 8}}
            path = tmp_path / f"c{seed}.json"
            path.write_text(json.dumps(cfg))
            out = tmp_path / f"u{seed}"
            assert main(["train", str(path), "--out", str(out), "--epochs", "0", "--warmup-epochs", "0"]) == 0
            capsys.readouterr()
            assert main(["eval", str(out / "checkpoint.json")]) == 0
            scores.append(json.loads(capsys.readouterr().out)["report"]["auroc"])
        assert abs(np.mean(scores) - 0.5) <= 0.1


class TestDeterminism:
    def test_train_and_eval_bytes(self, tmp_path, config_path, capsys):
        # same output directory both times: the resolved config records it
        names = ("checkpoint.json", "metrics.csv", "config.json")
        out = run_train(tmp_path, config_path, "a")
        first = {n: (out / n).read_bytes() for n in names}
        capsys.readouterr()
        main(["eval", str(out / "checkpoint.json")])
        first_eval = capsys.readouterr().out
        run_train(tmp_path, config_path, "a")
        for n in names:
            assert (out / n).read_bytes() == first[n], n
        capsys.readouterr()
        main(["eval", str(out / "checkpoint.json")])
        assert capsys.readouterr().out == first_eval

    def test_synth_bytes(self, tmp_path):
        for name in ("a", "b"):
            main(["synth", "--n", "50", "--seed", "4", "--out", str(tmp_path / name)])
        assert (tmp_path / "a" / "synthetic_t0.7_i0.7.jsonl").read_bytes() == (tmp_path / "b" / "synthetic_t0.7_i0.7.jsonl").read_bytes()

    def test_verify_output(self, capsys):
        main(["verify", "--suite", "metrics", "--suite", "bkm"])
        first = capsys.readouterr().out
        main(["verify", "--suite", "metrics", "--suite", "bkm"])
        assert capsys.readouterr().out == first


class TestVerify:
    def test_all_pass(self, capsys):
        assert main(["verify"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert [line.split()[1] for line in lines] == ["numerics", "bkm", "evidential", "metrics", "model-gradients"]
        assert all(line.startswith("PASS") for line in lines)

    def test_single_suite(self, capsys):
        assert main(["verify", "--suite", "bkm"]) == 0
        assert capsys.readouterr().out.splitlines() == ["PASS bkm (31 checks)"]

    def test_unknown_suite(self, capsys):
        assert main(["verify", "--suite", "nope"]) != 0

    def test_injected_gradient_bug(self, monkeypatch, capsys):
        real = bkm.bkm_gradients

        def broken(a, prompt, upstream):
            ga, gu, gv = real(a, prompt, upstream)
            return ga, gu * 1.01, gv

        monkeypatch.setattr(bkm, "bkm_gradients", broken)
        assert main(["verify", "--suite", "bkm"]) == 1
        line = capsys.readouterr().out.strip()
        assert line.startswith("FAIL bkm: bkm_gradients")
        assert run_suites(["bkm"])[0].failing_operations == ["bkm_gradients"]


class TestConfig:
    def test_overrides(self):
        cfg = RunConfig().with_overrides(**{"optim.lr": 0.5, "method": "MAP"})
        assert cfg.optim.lr == 0.5 and cfg.method == "MAP"

    def test_rejects(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"method": "LoRA"})
        with pytest.raises(ConfigError):
            RunConfig().with_overrides(**{"optim.momentum": 0.9})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"prompt": {"policy": "Whatever"}})
