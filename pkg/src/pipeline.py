from __future__ import annotations
import contextlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

from .checkpoint import Checkpoint, StageResult
from .config import MASK_SOURCES, StageConfig, config_hash, load_stage_config
from .dataset import Case, load_cases, make_phantom_cases, split_dataset
from .errors import BparseError, ConfigError
from .mae import run_pretraining
from .metrics import MetricReport, evaluate, summarize_reports
from .prompt_branch import train_prompt_branch
from .render import render_report
from .segnet import SegModel, finetune, load_pretrained, predict
from .tooth_graph import build_tooth_adjacency
from .utils import as_plain, debug_log, param_hash, seed_everything

INITS = ("pretrained", "random")


@contextlib.contextmanager
def stage_tag(stage: str) -> Iterator[None]:
    """단계 안에서 난 오류에 stage 이름을 붙여 다시 던집니다."""
    try:
        yield
    except BparseError as e:
        if not e.stage:
            e.stage = stage
        raise


def load_stage_configs(cfg_dir: str | os.PathLike) -> Dict[str, StageConfig]:
    cfg_dir = Path(cfg_dir)
    configs = {}
    for stage in ("prompt", "mae", "finetune"):
        with stage_tag(stage):
            configs[stage] = load_stage_config(cfg_dir / f"{stage}.yml", stage)
    return configs


# =====================================================
# 데이터 준비
# =====================================================

def _unlabeled(cases: Sequence[Case]) -> List[Case]:
    return [Case(c.name, c.volume, None) for c in cases]


def _phantoms(cfg: StageConfig, count: int, role: str, workers: int) -> List[Case]:
    return make_phantom_cases(count, role, cfg.seed, cfg.shape, cfg.spacing, cfg.noise_sigma, workers)


def stage_cases(cfg: StageConfig, role: str, workers: int = 1) -> List[Case]:
    """prompt / mae 단계 입력. data_dir 가 없으면 팬텀을 만듭니다."""
    if cfg.data_dir:
        cases = load_cases(cfg.data_dir, require_labels=(role == "prompt"))
    else:
        cases = _phantoms(cfg, cfg.num_cases, role, workers)
    return _unlabeled(cases) if role == "mae" else cases


def finetune_cases(cfg: StageConfig, workers: int = 1) -> Tuple[List[Case], List[Case], List[Case]]:
    """(train, val, test). data_dir 가 있으면 num_cases:num_val:num_test 비율로 나눕니다."""
    if cfg.data_dir:
        cases = load_cases(cfg.data_dir, require_labels=True)
        weights = [cfg.num_cases, cfg.num_val, cfg.num_test]
        if sum(weights) == 0:
            raise ConfigError("num_cases + num_val + num_test 가 0 입니다")
        split = split_dataset(len(cases), [w / sum(weights) for w in weights], cfg.seed, labeled_fraction=1.0)
        def pick(idx):
            return [cases[i] for i in idx]
        return pick(split.labeled(cfg.labeled)), pick(split.val), pick(split.test)
    n_train = cfg.num_cases if cfg.labeled == "full" else max(cfg.num_cases // 2, 1)
    return (
        _phantoms(cfg, n_train, "train", workers),
        _phantoms(cfg, cfg.num_val, "val", workers),
        _phantoms(cfg, cfg.num_test, "test", workers),
    )


# =====================================================
# 평가
# =====================================================

def evaluate_model(model: SegModel, cases: Sequence[Case]) -> Tuple[List[Dict[str, Any]], Dict[str, Any]]:
    reports: List[MetricReport] = []
    per_case = []
    for c in cases:
        rep = evaluate(predict(c.volume, model), c.labels)
        reports.append(rep)
        per_case.append({"case": c.name, "macro": rep.macro, "undefined_hd95": rep.undefined_hd95})
    return per_case, summarize_reports(reports)


def _stage_entry(result: StageResult, cfg: StageConfig, **extra) -> Dict[str, Any]:
    entry = {
        "checkpoint": str(result.path) if result.path else None,
        "config_hash": config_hash(cfg),
        "steps": cfg.steps,
        "loss": [[s, v] for s, v in result.loss_log],
    }
    entry.update(extra)
    return entry


def _run_method(
    name: str,
    fcfg: StageConfig,
    train: Sequence[Case],
    val: Sequence[Case],
    test: Sequence[Case],
    out_dir: Path,
    mae_ckpt: Optional[Checkpoint] = None,
    mask_source: Optional[str] = None,
    primary: bool = True,
) -> Dict[str, Any]:
    with stage_tag("finetune"):
        seed_everything(fcfg.seed)
        model = SegModel.from_config(fcfg)
        transfer = None
        if mae_ckpt is not None:
            model, report = load_pretrained(model, mae_ckpt)
            transfer = {"transferred": len(report.transferred), "fresh": len(report.fresh)}
        ckpt_name = "finetune.ckpt" if primary else f"finetune-{name}.ckpt"
        result = finetune(train, model, fcfg, val, out_dir / ckpt_name, init="pretrained" if mae_ckpt else "random")
    with stage_tag("evaluate"):
        per_case, summary = evaluate_model(model, test)
    debug_log(f"[pipeline] method={name} test_dsc={summary['dsc']['mean']}")
    return {
        "name": name,
        "init": "pretrained" if mae_ckpt is not None else "random",
        "mask_source": mask_source,
        "transfer": transfer,
        "finetune": _stage_entry(result, fcfg, best_val_dsc=result.checkpoint.metadata["metrics"].get("best_val_dsc")),
        "test": summary,
        "per_case": per_case,
    }


def run_pipeline(
    cfg_dir: str | os.PathLike,
    out_dir: str | os.PathLike,
    init: str = "pretrained",
    ablation: bool = False,
    workers: int = 1,
) -> Dict[str, Any]:
    """prompt 학습 → 동결 → MAE 사전학습 → fine-tuning → 평가. report.json / report.md 를 씁니다.

    init="random" 이면 1, 2단계를 건너뛰고 무작위 초기화 기준선만 만듭니다.
    ablation=True 이면 모든 mask source 와 무작위 초기화를 같은 예산으로 비교합니다.
    """
    if init not in INITS:
        raise ConfigError(f"init 은 {', '.join(INITS)} 중 하나여야 합니다: {init!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgs = load_stage_configs(cfg_dir)
    pcfg, mcfg, fcfg = cfgs["prompt"], cfgs["mae"], cfgs["finetune"]

    with stage_tag("finetune"):
        train, val, test = finetune_cases(fcfg, workers)
    report: Dict[str, Any] = {
        "profile": fcfg.profile,
        "init": init,
        "ablation": ablation,
        "labeled": fcfg.labeled,
        "seed": {k: c.seed for k, c in cfgs.items()},
        "config_hashes": {k: config_hash(c) for k, c in cfgs.items()},
        "cases": {"train": len(train), "val": len(val), "test": len(test)},
        "stages": {},
        "methods": [],
    }

    if init == "pretrained":
        graph = build_tooth_adjacency()
        with stage_tag("prompt"):
            seed_everything(pcfg.seed)
            branch, r1 = train_prompt_branch(stage_cases(pcfg, "prompt", workers), pcfg, out_dir / "prompt.ckpt", graph)
        report["stages"]["prompt"] = _stage_entry(r1, pcfg, param_hash=param_hash(branch))

        sources = list(MASK_SOURCES) if ablation else [mcfg.mask_source]
        with stage_tag("mae"):
            mae_cases = stage_cases(mcfg, "mae", workers)
        for src in sources:
            with stage_tag("mae"):
                name = "mae.ckpt" if src == mcfg.mask_source else f"mae-{src}.ckpt"
                _, r2 = run_pretraining(mae_cases, mcfg, branch if src == "prompt" else None, out_dir / name, graph, src)
            report["stages"].setdefault("mae", {})[src] = _stage_entry(r2, mcfg, mask_source=src)
            report["methods"].append(
                _run_method(f"{src}-mae", fcfg, train, val, test, out_dir, r2.checkpoint, src, primary=(src == mcfg.mask_source))
            )

    if init == "random" or ablation:
        report["methods"].append(_run_method("random", fcfg, train, val, test, out_dir, primary=(init == "random")))

    report = as_plain(report)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, ensure_ascii=False), encoding="utf-8")
    (out_dir / "report.md").write_text(render_report(report), encoding="utf-8")
    debug_log(f"[pipeline] report written: {out_dir / 'report.json'}")
    return report
