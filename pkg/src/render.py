from __future__ import annotations
from typing import Any, Dict, List, Optional, Sequence

from .metrics import METRIC_NAMES, MetricReport
from .utils import debug_log, smoothed

METRIC_LABELS = {
    "dsc": "DSC (%)",
    "jaccard": "Jaccard (%)",
    "precision": "Precision (%)",
    "recall": "Recall (%)",
    "hd95_mm": "HD95 (mm)",
}


def _esc(s: Any) -> str:
    s = str("" if s is None else s).strip()
    s = s.replace("\r\n", "\n").replace("\r", "\n")
    s = s.replace("|", "\\|")
    s = s.replace("\n", "<br>")
    return s


def _md_sep(col_count: int) -> str:
    return "|" + "---|" * col_count


def _scale(metric: str) -> float:
    # 겹침 지표는 % 로, HD95 는 mm 그대로
    return 1.0 if metric == "hd95_mm" else 100.0


def format_value(metric: str, value: Optional[float]) -> str:
    if value is None:
        return "-"
    return f"{value * _scale(metric):.2f}"


def format_mean_std(metric: str, stat: Optional[Dict[str, Any]]) -> str:
    """{'mean', 'std'} -> '89.78±2.14'. 값이 없으면 '-'."""
    if not stat or stat.get("mean") is None:
        return "-"
    k = _scale(metric)
    return f"{stat['mean'] * k:.2f}±{stat['std'] * k:.2f}"


def _loss_cells(loss: Sequence[Sequence[float]]) -> List[str]:
    if not loss:
        return ["-", "-", "-"]
    values = [float(v) for _, v in loss]
    sm = smoothed(values)
    return [f"{values[0]:.4f}", f"{values[-1]:.4f}", f"{sm[-1]:.4f}"]


# =====================================================
# 클래스별 표 (evaluate 결과)
# =====================================================
def render_class_table(report: MetricReport) -> str:
    lines: List[str] = []
    lines.append("| 클래스 | " + " | ".join(METRIC_LABELS[k] for k in METRIC_NAMES) + " |")
    lines.append(_md_sep(len(METRIC_NAMES) + 1))
    for m in report.per_class:
        if m.counts.empty:
            continue
        lines.append(f"| {m.class_id} | " + " | ".join(format_value(k, getattr(m, k)) for k in METRIC_NAMES) + " |")
    lines.append("| **macro** | " + " | ".join(f"**{format_value(k, report.macro.get(k))}**" for k in METRIC_NAMES) + " |")
    if report.excluded:
        lines.append("")
        lines.append(f"- pred/gt 모두에 없는 클래스 (제외): {', '.join(str(c) for c in report.excluded)}")
    if report.undefined_hd95:
        lines.append(f"- HD95 정의 불가 (한쪽이 비어 있음): {', '.join(str(c) for c in report.undefined_hd95)}")
    return "\n".join(lines)


# =====================================================
# 파이프라인 리포트
# =====================================================
def render_report(report: Dict[str, Any]) -> str:
    lines: List[str] = []

    cases = report.get("cases", {})
    lines.append("## 📊 실험 요약")
    lines.append(f"└ Profile: {_esc(report.get('profile'))} / Init: {_esc(report.get('init'))} / Labeled: {_esc(report.get('labeled'))}")
    lines.append(f"└ Cases: train {cases.get('train', 0)}, val {cases.get('val', 0)}, test {cases.get('test', 0)}\n")

    # 방법별 비교 표
    lines.append("## 🧪 방법별 비교 (test, mean±std)")
    methods = report.get("methods", [])
    if methods:
        lines.append("| No. | 방법 | 초기화 | Mask source | " + " | ".join(METRIC_LABELS[k] for k in METRIC_NAMES) + " |")
        lines.append(_md_sep(len(METRIC_NAMES) + 4))
        for idx, m in enumerate(methods, start=1):
            test = m.get("test", {})
            cells = [format_mean_std(k, test.get(k)) for k in METRIC_NAMES]
            lines.append(
                f"| {idx} | {_esc(m.get('name'))} | {_esc(m.get('init'))} | {_esc(m.get('mask_source') or '-')} | "
                + " | ".join(cells) + " |"
            )
        lines.append("")
    else:
        lines.append("평가된 방법이 0건입니다.\n")

    # 단계별 학습 기록
    lines.append("## 📉 단계별 학습 기록")
    lines.append("| 단계 | steps | 첫 loss | 마지막 loss | 이동평균 loss | 체크포인트 |")
    lines.append(_md_sep(6))
    rows = []
    stages = report.get("stages", {})
    if "prompt" in stages:
        rows.append(("prompt", stages["prompt"]))
    for src, entry in stages.get("mae", {}).items():
        rows.append((f"mae ({src})", entry))
    for m in methods:
        rows.append((f"finetune ({m.get('name')})", m.get("finetune", {})))
    for name, entry in rows:
        first, last, sm = _loss_cells(entry.get("loss", []))
        lines.append(f"| {_esc(name)} | {entry.get('steps', '-')} | {first} | {last} | {sm} | {_esc(entry.get('checkpoint') or '-')} |")
    lines.append("")

    # 설정 해시
    lines.append("<details>")
    lines.append("<summary><strong>⚙️ 설정 해시</strong></summary>\n")
    lines.append("| 단계 | seed | config hash |")
    lines.append(_md_sep(3))
    seeds = report.get("seed", {})
    for stage, h in report.get("config_hashes", {}).items():
        lines.append(f"| {_esc(stage)} | {seeds.get(stage, '-')} | `{_esc(h)}` |")
    lines.append("</details>\n")

    md = "\n".join(lines)
    debug_log(f"Report rendered: {len(methods)} methods, {len(md)} chars")
    return md
