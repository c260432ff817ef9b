import json
from pathlib import Path

import pytest

from advsig.cli import main
from advsig.config import (
    DatasetSpec,
    EvalConfig,
    ExperimentConfig,
    GeneratorConfig,
    Stage1Config,
    Stage2Config,
    apply_override,
    config_hash,
    from_dict,
    load_config,
    save_config,
    to_dict,
)
from advsig.core import BinaryCode, CoreError


class TestConfigRoundTrip:
    def test_parse_serialize_parse_identity(self):
        cfg = ExperimentConfig()
        once = to_dict(cfg)
        again = to_dict(from_dict(once))
        assert once == again

    def test_file_round_trip(self, tmp_path):
        cfg = ExperimentConfig(stage2=[Stage2Config(code=BinaryCode((0, 1)), family="gan")])
        save_config(cfg, tmp_path / "c.json")
        back = load_config(tmp_path / "c.json")
        assert to_dict(back) == to_dict(cfg)
        assert config_hash(back) == config_hash(cfg)

    def test_hash_changes_with_content(self):
        a = ExperimentConfig()
        b = ExperimentConfig(stage1=Stage1Config(lam=0.1))
        assert config_hash(a) != config_hash(b)

    def test_override_nested(self):
        cfg = apply_override(ExperimentConfig(), "stage1.lam", "0.2")
        assert cfg.stage1.lam == 0.2

    def test_override_list_entry(self):
        cfg = apply_override(ExperimentConfig(), "stage2.0.max_iterations", "7")
        assert cfg.stage2[0].max_iterations == 7

    def test_override_string_value(self):
        cfg = apply_override(ExperimentConfig(), "dataset.source", "toy")
        assert cfg.dataset.source == "toy"

    def test_override_unknown_path(self):
        with pytest.raises(CoreError, match="unknown config path"):
            apply_override(ExperimentConfig(), "stage1.nope", "1")

    def test_unknown_field_rejected(self):
        with pytest.raises(CoreError, match="unknown"):
            from_dict({"bogus_key": 1})


def tiny_experiment(tmp_path: Path) -> Path:
    """A config small enough to run the whole pipeline in seconds."""
    cfg = ExperimentConfig(
        dataset=DatasetSpec(source="toy", count=260, test_size=60, split_seed=3),
        stage1=Stage1Config(
            lam=0.05,
            max_iterations=12,
            batch_size=8,
            injector_width=8,
            injector_stages=3,
            detector_width=8,
            detector_blocks=2,
            embed_dim=16,
            restoration_width=8,
            eval_interval=6,
            eval_subset=16,
            seed=0,
        ),
        pretrain=[
            GeneratorConfig(family="gan", latent_dim=16, width=8, iterations=10, batch_size=8),
            GeneratorConfig(family="ddpm", width=8, iterations=10, batch_size=8, ddpm_steps=10),
        ],
        stage2=[
            Stage2Config(code=BinaryCode((1,)), family="gan", max_iterations=8, batch_size=8, eval_interval=4),
            Stage2Config(code=BinaryCode((1,)), family="ddpm", max_iterations=8, batch_size=8, eval_interval=4),
        ],
        eval=EvalConfig(
            sample_count=48,
            attack_iterations=12,
            sweep_lambdas=(0.05,),
            sweep_include_zero=False,
            sweep_iterations=8,
            embedder_width=8,
            embedder_feature_dim=8,
            embedder_iterations=15,
        ),
        seed=0,
    )
    path = tmp_path / "config.json"
    save_config(cfg, path)
    return path


class TestCliContracts:
    def test_evaluate_without_checkpoint_names_producer(self, tmp_path, capsys):
        cfg = tiny_experiment(tmp_path)
        code = main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "out")])
        captured = capsys.readouterr()
        assert code == 1
        assert "train-injector" in captured.err

    def test_finetune_requires_pretrain_and_signed(self, tmp_path, capsys):
        cfg = tiny_experiment(tmp_path)
        out = tmp_path / "out"
        assert main(["train-injector", "--config", str(cfg), "--out", str(out)]) == 0
        code = main(["finetune-gen", "--config", str(cfg), "--out", str(out)])
        captured = capsys.readouterr()
        assert code == 1
        assert "pretrain-gen" in captured.err

    def test_overwrite_refused_without_force(self, tmp_path, capsys):
        cfg = tiny_experiment(tmp_path)
        out = tmp_path / "out"
        assert main(["train-injector", "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["train-injector", "--config", str(cfg), "--out", str(out)]) == 1
        captured = capsys.readouterr()
        assert "--force" in captured.err
        assert main(["train-injector", "--config", str(cfg), "--out", str(out), "--force"]) == 0

    def test_bad_override_is_user_error(self, tmp_path, capsys):
        cfg = tiny_experiment(tmp_path)
        code = main(["train-injector", "--config", str(cfg), "--out", str(tmp_path / "o"), "--override", "nonsense"])
        assert code == 1


@pytest.mark.slow
class TestFullPipeline:
    def test_end_to_end_tiny(self, tmp_path, capsys):
        cfg = tiny_experiment(tmp_path)
        out = tmp_path / "out"
        steps = [
            ["train-injector"],
            ["sign-dataset"],
            ["pretrain-gen"],
            ["finetune-gen"],
            ["evaluate"],
            ["attack"],
            ["sweep-lambda"],
            ["report"],
        ]
        for step in steps:
            code = main(step + ["--config", str(cfg), "--out", str(out)])
            captured = capsys.readouterr()
            assert code == 0, f"{step[0]} failed: {captured.err or captured.out}"

        summary = json.loads((out / "summary.json").read_text())
        assert summary["stage1"], "summary must list the stage-1 run"
        assert summary["sweep"], "summary must embed the sweep table"
        assert summary["attack"]["settings"]
        assert summary["generators_eval"]
        assert summary["orphans"] == []
        assert (out / "summary.md").exists()
        assert (out / "reports" / "stage1_roc.csv").exists()

        # reports are reproducible: re-running report yields identical bytes
        before = (out / "summary.json").read_bytes()
        assert main(["report", "--config", str(cfg), "--out", str(out)]) == 0
        capsys.readouterr()
        assert (out / "summary.json").read_bytes() == before

    def test_integrity_check_flags_orphans(self, tmp_path, capsys):
        cfg = tiny_experiment(tmp_path)
        out = tmp_path / "out"
        assert main(["train-injector", "--config", str(cfg), "--out", str(out)]) == 0
        capsys.readouterr()
        stage1_dirs = list((out / "stage1").iterdir())
        (stage1_dirs[0] / "rogue.bin").write_bytes(b"junk")
        code = main(["report", "--config", str(cfg), "--out", str(out)])
        captured = capsys.readouterr()
        assert code == 1
        assert "orphan" in captured.err
        summary = json.loads((out / "summary.json").read_text())
        assert any("rogue.bin" in o for o in summary["orphans"])
