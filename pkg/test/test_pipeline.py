import json

import pytest
import yaml

from conftest import TINY
from src.checkpoint import load_checkpoint
from src.config import MASK_SOURCES
from src.errors import ConfigError
from src.pipeline import finetune_cases, load_stage_configs, run_pipeline
from src.run import main


def _write_cfg_dir(path, **finetune_extra):
    path.mkdir(parents=True, exist_ok=True)
    common = dict(TINY, steps=2)
    stages = {
        "prompt": dict(common, num_cases=2),
        "mae": dict(common, num_cases=2, mask_source="prompt"),
        "finetune": dict(common, num_cases=1, num_val=1, num_test=1, val_every=1, **finetune_extra),
    }
    for stage, values in stages.items():
        (path / f"{stage}.yml").write_text(yaml.safe_dump(dict(values, stage=stage, profile="desk")), encoding="utf-8")
    return path


def test_stage_configs_loaded(tmp_path):
    cfgs = load_stage_configs(_write_cfg_dir(tmp_path / "cfg"))
    assert {k: c.stage for k, c in cfgs.items()} == {"prompt": "prompt", "mae": "mae", "finetune": "finetune"}
    assert cfgs["finetune"].volume_size == 32


def test_missing_stage_file_is_tagged(tmp_path):
    cfg_dir = _write_cfg_dir(tmp_path / "cfg")
    (cfg_dir / "mae.yml").unlink()
    with pytest.raises(ConfigError) as e:
        load_stage_configs(cfg_dir)
    assert e.value.stage == "mae"
    assert str(e.value).startswith("[mae]")


def test_half_regime_uses_fewer_cases(tmp_path):
    full = load_stage_configs(_write_cfg_dir(tmp_path / "full"))["finetune"].with_overrides(num_cases=4)
    half = full.with_overrides(labeled="half")
    assert len(finetune_cases(full)[0]) == 4
    assert len(finetune_cases(half)[0]) == 2


def test_pipeline_end_to_end(tmp_path):
    out = tmp_path / "run"
    report = run_pipeline(_write_cfg_dir(tmp_path / "cfg"), out)
    assert [m["name"] for m in report["methods"]] == ["prompt-mae"]
    for name in ("prompt.ckpt", "mae.ckpt", "finetune.ckpt", "report.json", "report.md"):
        assert (out / name).exists()
    assert load_checkpoint(out / "prompt.ckpt").stage == "prompt"
    assert load_checkpoint(out / "mae.ckpt").stage == "mae"
    ft = load_checkpoint(out / "finetune.ckpt")
    assert ft.stage == "finetune" and ft.metadata["init"] == "pretrained"

    saved = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert saved == report
    assert saved["cases"] == {"train": 1, "val": 1, "test": 1}
    assert set(saved["config_hashes"]) == {"prompt", "mae", "finetune"}
    method = saved["methods"][0]
    assert method["transfer"]["transferred"] > 0
    assert method["test"]["dsc"]["n"] == 1
    assert "## 🧪 방법별 비교" in (out / "report.md").read_text(encoding="utf-8")


@pytest.mark.slow
def test_pipeline_ablation(tmp_path):
    out = tmp_path / "ablation"
    report = run_pipeline(_write_cfg_dir(tmp_path / "cfg"), out, ablation=True)
    assert [m["name"] for m in report["methods"]] == [f"{s}-mae" for s in MASK_SOURCES] + ["random"]
    assert set(report["stages"]["mae"]) == set(MASK_SOURCES)
    for name in ("mae.ckpt", "mae-learned.ckpt", "mae-zero.ckpt", "finetune.ckpt", "finetune-random.ckpt"):
        assert (out / name).exists()


def test_pipeline_random_init(tmp_path):
    out = tmp_path / "random"
    report = run_pipeline(_write_cfg_dir(tmp_path / "cfg"), out, init="random")
    assert [m["name"] for m in report["methods"]] == ["random"]
    assert report["stages"] == {}
    assert not (out / "prompt.ckpt").exists()
    assert load_checkpoint(out / "finetune.ckpt").metadata["init"] == "random"


# =====================================================
# CLI
# =====================================================

def test_cli_graph_export(tmp_path, capsys):
    path = tmp_path / "teeth.dot"
    assert main(["graph", "export", "--dot", str(path)]) == 0
    assert path.read_text(encoding="utf-8").startswith("graph tooth_adjacency {")
    assert main(["graph", "export"]) == 0
    assert "n8 -- n9;" in capsys.readouterr().out


def test_cli_phantom_and_evaluate(tmp_path):
    cases = tmp_path / "cases"
    assert main(["phantom", "--out", str(cases), "--count", "1", "--size", "32", "--role", "test"]) == 0
    assert list(cases.glob("*_label.json"))
    out = tmp_path / "eval.json"
    csv_path = tmp_path / "eval.csv"
    assert main(["evaluate", "--pred", str(cases), "--gt", str(cases), "--out", str(out), "--csv", str(csv_path)]) == 0
    summary = json.loads(out.read_text(encoding="utf-8"))["summary"]
    assert summary["dsc"]["mean"] == 1.0
    assert csv_path.read_text(encoding="utf-8").startswith("class,dsc,jaccard,precision,recall,hd95_mm")


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yml"
    bad.write_text("stage: prompt\nwarmup: 3\n", encoding="utf-8")
    assert main(["pretrain-prompt", "--config", str(bad), "--out", str(tmp_path / "p.ckpt")]) == 2
    assert "오류" in capsys.readouterr().err

    code = main(["predict", "--ckpt", str(tmp_path / "none.ckpt"), "--in", str(tmp_path / "missing"), "--out", str(tmp_path / "o")])
    assert code == 3


def test_cli_pretrain_and_finetune(tmp_path):
    cfg_dir = _write_cfg_dir(tmp_path / "cfg")
    prompt_ckpt = tmp_path / "prompt.ckpt"
    mae_ckpt = tmp_path / "mae.ckpt"
    ft_ckpt = tmp_path / "ft.ckpt"
    assert main(["pretrain-prompt", "--config", str(cfg_dir / "prompt.yml"), "--out", str(prompt_ckpt)]) == 0
    assert main([
        "pretrain-mae", "--config", str(cfg_dir / "mae.yml"), "--prompt-ckpt", str(prompt_ckpt),
        "--out", str(mae_ckpt),
    ]) == 0
    assert main(["finetune", "--config", str(cfg_dir / "finetune.yml"), "--init", str(mae_ckpt), "--out", str(ft_ckpt)]) == 0
    assert load_checkpoint(ft_ckpt).metadata["init"] == "pretrained"
    assert (tmp_path / "ft.ckpt.loss.csv").exists()


def test_pipeline_is_deterministic(tmp_path):
    cfg_dir = _write_cfg_dir(tmp_path / "cfg")
    a = run_pipeline(cfg_dir, tmp_path / "a")
    b = run_pipeline(cfg_dir, tmp_path / "b")
    for name in ("prompt.ckpt", "mae.ckpt", "finetune.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a["stages"]["prompt"]["loss"] == b["stages"]["prompt"]["loss"]
    assert a["stages"]["mae"]["prompt"]["loss"] == b["stages"]["mae"]["prompt"]["loss"]
    assert a["methods"][0]["finetune"]["loss"] == b["methods"][0]["finetune"]["loss"]
    assert a["methods"][0]["test"] == b["methods"][0]["test"]


@pytest.mark.slow
def test_pretrained_not_worse_than_random(tmp_path):
    # 라벨 2 케이스 + 라벨 없는 8 케이스, 모든 방법이 같은 fine-tuning 예산
    cfg_dir = tmp_path / "cfg"
    cfg_dir.mkdir()
    stages = {
        "prompt": dict(TINY, steps=50, num_cases=2),
        "mae": dict(TINY, steps=100, num_cases=8, mask_source="prompt"),
        "finetune": dict(TINY, steps=200, num_cases=2, num_val=0, num_test=2),
    }
    for stage, values in stages.items():
        (cfg_dir / f"{stage}.yml").write_text(yaml.safe_dump(dict(values, stage=stage, profile="desk")), encoding="utf-8")
    report = run_pipeline(cfg_dir, tmp_path / "out", ablation=True)
    rows = {m["name"]: m["test"]["dsc"]["mean"] for m in report["methods"]}
    assert set(rows) == {"prompt-mae", "learned-mae", "zero-mae", "random"}
    assert rows["prompt-mae"] >= rows["random"] - 0.02, rows
    md = (tmp_path / "out" / "report.md").read_text(encoding="utf-8")
    for name in rows:
        assert name in md
