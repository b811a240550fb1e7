import json

import pytest
import yaml

from rsprompt.cli import main
from rsprompt.config import ConfigError, config_schema, parse_config
from rsprompt.experiment import Runner, build_plan, run

from conftest import TOY_CLASSES, make_toy_dataset

ALL_NINE = ["eurosat", "uc_merced", "resisc45", "aid", "rsscn7", "optimal31", "siri_whu", "clrs", "mlrsnet"]


def test_defaults_follow_recipe():
    cfg = parse_config(overrides={"datasets": ["eurosat"]})
    assert cfg.train.lr["coop"] == 0.002
    assert cfg.train.lr["maple"] == 0.0035
    assert cfg.shots == [1, 2, 4, 8, 16]
    assert cfg.seeds == [1, 2, 3]
    assert cfg.zeroshot_template == "a satellite photo of {}"


@pytest.mark.parametrize(
    "bad",
    [
        {"shots": [3]},
        {"seeds": [1, 1]},
        {"epochs": 5},
        {"train": {"epoch": 5}},
        {"methods": ["clipadapter"]},
        {"datasets": ["atlantis"]},
        {"zeroshot_template": "no placeholder"},
    ],
)
def test_invalid_documents_rejected(bad):
    with pytest.raises(ConfigError):
        parse_config(overrides={"datasets": ["eurosat"], **bad})


def test_malformed_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("datasets: [eurosat\n")
    with pytest.raises(ConfigError):
        parse_config(p)


def test_env_overrides_paths_only(monkeypatch):
    monkeypatch.setenv("RSPROMPT_DATA_ROOT", "/mnt/data")
    monkeypatch.setenv("RSPROMPT_BACKBONE", "/mnt/w.safetensors")
    monkeypatch.setenv("RSPROMPT_OUTPUT_ROOT", "/mnt/out")
    monkeypatch.setenv("RSPROMPT_EPOCHS", "1")
    cfg = parse_config(overrides={"datasets": ["eurosat"]})
    assert (cfg.data_root, cfg.backbone, cfg.output_root) == ("/mnt/data", "/mnt/w.safetensors", "/mnt/out")
    assert cfg.train.epochs == 50


def test_content_hash_stable_and_sensitive():
    a = parse_config(overrides={"datasets": ["eurosat"]})
    b = parse_config(overrides={"datasets": ["eurosat"]})
    c = parse_config(overrides={"datasets": ["eurosat"], "seeds": [1]})
    assert a.content_hash() == b.content_hash() != c.content_hash()


def test_full_plan_counts(tmp_path):
    cfg = parse_config(overrides={"datasets": ALL_NINE, "output_root": str(tmp_path), "cross_dataset": True})
    plan = build_plan(cfg)
    assert len(plan.training_cells) == 9 * 4 * 5 * 3 == 540
    kinds = [t.kind for t in plan.tasks]
    assert kinds.count("zeroshot") == 9
    assert kinds.count("probe") == 9 * 5 * 3
    assert kinds.count("eval") == 540
    assert kinds.count("crosseval") == 4 * 9 * 3
    assert len({t.task_id for t in plan.tasks}) == len(plan.tasks)


# -- end to end on the toy dataset ---------------------------------------------------------


@pytest.fixture
def toy_cfg(tmp_path):
    make_toy_dataset(tmp_path / "data", "toy", per_class=8, seed=3)
    doc = {
        "datasets": ["toy"],
        "custom_datasets": {"toy": {"num_images": 24, "image_size": 40, "classes": dict(TOY_CLASSES)}},
        "backbone": "micro",
        "data_root": str(tmp_path / "data"),
        "output_root": str(tmp_path / "out"),
        "methods": ["coop"],
        "shots": [1],
        "seeds": [1],
        "train": {"epochs": 2},
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path, tmp_path


def test_one_cell_one_checkpoint_one_report_and_idempotent(toy_cfg):
    path, base = toy_cfg
    cfg = parse_config(path)
    assert run(cfg) == 0
    cell = base / "out" / "toy" / "coop" / "1" / "seed1"
    ckpts = sorted(p.name for p in cell.glob("*.safetensors"))
    assert ckpts == ["checkpoint.safetensors"]
    assert (cell / "report.json").exists()
    stamp = (cell / "checkpoint.safetensors").stat().st_mtime_ns
    report = json.loads((cell / "report.json").read_text())
    assert report["provenance"]["backbone_digest"] and report["provenance"]["config_hash"] == cfg.content_hash()
    assert run(parse_config(path)) == 0
    assert (cell / "checkpoint.safetensors").stat().st_mtime_ns == stamp
    assert len(Runner(cfg).collect_reports()) == 1


def test_cli_exit_codes_and_output(toy_cfg, capsys):
    path, base = toy_cfg
    assert main(["zeroshot", "--config", str(path)]) == 0
    assert "toy zeroshot top1=" in capsys.readouterr().out
    assert main(["zeroshot", "--config", str(path), "--shots", "3"]) == 2
    assert main(["train", "--config", str(path), "--data-root", str(base / "missing")]) == 1
    assert main(["zeroshot", "--config", str(base / "nope.yaml")]) == 2


def test_cli_digest_stable(toy_cfg, capsys):
    path, _ = toy_cfg
    assert main(["digest", "--config", str(path)]) == 0
    first = json.loads(capsys.readouterr().out)
    assert main(["digest", "--config", str(path)]) == 0
    assert json.loads(capsys.readouterr().out) == first
    assert set(first["split_digests"]["toy"]) == {"train", "test"}


def test_cli_schema(capsys):
    assert main(["schema"]) == 0
    assert json.loads(capsys.readouterr().out) == json.loads(json.dumps(config_schema()))
