from __future__ import annotations
import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from .checkpoint import load_checkpoint
from .config import MASK_SOURCES, load_stage_config
from .dataset import ROLE_OFFSETS, make_phantom_cases, save_cases
from .errors import EXIT_OK, BparseError, DataError
from .mae import run_pretraining
from .metrics import evaluate, summarize_reports
from .pipeline import INITS, finetune_cases, run_pipeline, stage_cases
from .prompt_branch import load_prompt_branch, train_prompt_branch
from .render import render_class_table
from .segnet import SegModel, finetune, load_pretrained, predict
from .tooth_graph import build_tooth_adjacency, to_dot
from .utils import debug_log, seed_everything
from .volume import LabelVolume, Volume, load_volume, save_volume


def _load_config(path: str, stage: str, data: Optional[str] = None):
    cfg = load_stage_config(path, stage)
    if data:
        cfg = cfg.with_overrides(data_dir=data)
    debug_log(f"{stage} config: {cfg.to_dict()}")
    return cfg


# =====================================================
# 서브커맨드
# =====================================================
def cmd_phantom(args) -> int:
    cases = make_phantom_cases(
        args.count, args.role, args.seed, (args.size,) * 3, args.spacing, args.noise, workers=args.workers
    )
    out = save_cases(cases, args.out)
    print(f"{len(cases)} phantom cases -> {out}")
    return EXIT_OK


def cmd_pretrain_prompt(args) -> int:
    cfg = _load_config(args.config, "prompt", args.data)
    _, result = train_prompt_branch(stage_cases(cfg, "prompt", args.workers), cfg, args.out)
    print(f"prompt checkpoint -> {result.path}")
    return EXIT_OK


def cmd_pretrain_mae(args) -> int:
    cfg = _load_config(args.config, "mae", args.data)
    source = args.mask_source or cfg.mask_source
    branch = load_prompt_branch(load_checkpoint(args.prompt_ckpt)) if args.prompt_ckpt else None
    _, result = run_pretraining(
        stage_cases(cfg, "mae", args.workers), cfg, branch, args.out, build_tooth_adjacency(), source
    )
    print(f"mae checkpoint ({source}) -> {result.path}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load_config(args.config, "finetune", args.data)
    train, val, _ = finetune_cases(cfg, args.workers)
    seed_everything(cfg.seed)
    model = SegModel.from_config(cfg)
    init = "random"
    if args.init != "random":
        model, report = load_pretrained(model, load_checkpoint(args.init))
        init = "pretrained"
        debug_log(f"transferred {len(report.transferred)} tensors, fresh {len(report.fresh)}")
    result = finetune(train, model, cfg, val, args.out, init=init)
    print(f"finetune checkpoint -> {result.path} (best val dsc: {result.checkpoint.metadata['metrics'].get('best_val_dsc')})")
    return EXIT_OK


def cmd_predict(args) -> int:
    vol = load_volume(args.input)
    if not isinstance(vol, Volume):
        raise DataError(f"intensity 볼륨이 아닙니다: {args.input}")
    labels = predict(vol, load_checkpoint(args.ckpt))
    save_volume(labels, args.out)
    print(f"labels -> {args.out}")
    return EXIT_OK


def _label_files(path: Path) -> List[Path]:
    if path.is_dir():
        return sorted(path.glob("*_label.json"))
    return [path]


def _load_labels(path: Path) -> LabelVolume:
    v = load_volume(path)
    if not isinstance(v, LabelVolume):
        raise DataError(f"label 볼륨이 아닙니다: {path}")
    return v


def cmd_evaluate(args) -> int:
    pred_path, gt_path = Path(args.pred), Path(args.gt)
    preds = _label_files(pred_path)
    if not preds:
        raise DataError(f"평가할 label 파일이 없습니다: {pred_path}")
    reports = {}
    for p in preds:
        g = gt_path / p.name if gt_path.is_dir() else gt_path
        if not g.exists():
            raise DataError(f"정답 label 파일이 없습니다: {g}")
        gt = _load_labels(g)
        rep = evaluate(_load_labels(p), gt, gt.spacing, workers=args.workers)
        name = p.name[: -len("_label.json")] if p.name.endswith("_label.json") else p.stem
        reports[name] = rep
        if args.csv:
            csv_path = Path(args.csv)
            rep.to_csv(csv_path / f"{name}.csv" if len(preds) > 1 or csv_path.is_dir() else csv_path)
        debug_log(f"{name}\n{render_class_table(rep)}")

    out = {
        "cases": {k: r.to_dict() for k, r in reports.items()},
        "summary": summarize_reports(list(reports.values())),
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(out, indent=2, ensure_ascii=False), encoding="utf-8")
    print(f"{len(reports)} cases evaluated -> {args.out}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    report = run_pipeline(args.config_dir, args.out, init=args.init, ablation=args.ablation, workers=args.workers)
    for m in report["methods"]:
        print(f"{m['name']}: test dsc {m['test']['dsc']['mean']}")
    return EXIT_OK


def cmd_graph(args) -> int:
    dot = to_dot(build_tooth_adjacency())
    if args.dot:
        Path(args.dot).write_text(dot, encoding="utf-8")
    else:
        print(dot)
    return EXIT_OK


# =====================================================
# argparse
# =====================================================
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m src.run", description="경계 프롬프트 기반 CBCT 치아 분할 파이프라인")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="합성 CBCT 팬텀 케이스 생성")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--role", choices=sorted(ROLE_OFFSETS), default="train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--spacing", type=float, default=0.4)
    p.add_argument("--noise", type=float, default=20.0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("pretrain-prompt", help="1단계: prompt branch 학습")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_pretrain_prompt)

    p = sub.add_parser("pretrain-mae", help="2단계: 경계 프롬프트 MAE 사전학습")
    p.add_argument("--config", required=True)
    p.add_argument("--prompt-ckpt")
    p.add_argument("--mask-source", choices=MASK_SOURCES)
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_pretrain_mae)

    p = sub.add_parser("finetune", help="3단계: 다중 클래스 분할 fine-tuning")
    p.add_argument("--config", required=True)
    p.add_argument("--init", required=True, help="mae 체크포인트 경로 또는 random")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="볼륨 하나를 분할")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="예측 label 과 정답 label 비교")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="세 단계 전체 실행 + 리포트")
    p.add_argument("--config-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", choices=INITS, default="pretrained")
    p.add_argument("--ablation", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("graph", help="치아 인접 그래프 내보내기")
    p.add_argument("action", choices=["export"])
    p.add_argument("--dot", metavar="PATH", help="DOT 파일 경로 (생략하면 stdout)")
    p.set_defaults(func=cmd_graph)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BparseError as e:
        print(f"오류: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
