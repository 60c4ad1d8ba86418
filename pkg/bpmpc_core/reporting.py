from __future__ import annotations

import csv
import html as html_lib
import json
import logging
import os
from typing import Iterable, Sequence

import numpy as np

from .controller import StepRecord
from .experiments import ARMS, FAILURE_METRICS, FailureRunSummary

logger = logging.getLogger(__name__)

FAILURE_HEADER = [
    "arm",
    "run",
    "seed",
    "failure_time",
    "nearest_destination",
    "distance_at_failure",
    "energy_before_failure",
    "energy_after_failure",
    "total_energy",
    "remaining_energy",
    "reached",
]
FAILURE_SUMMARY_HEADER = ["arm", "metric", "mean", "stdev"]
BENCH_HEADER = ["horizon", "samples", "control_frequency_hz", "mean_solve_seconds", "cost_mean", "cost_stdev"]


def _cell(v: object) -> str:
    # float 一律用 repr，輸出逐位元組穩定
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"CSV 欄位數 {len(row)} 與表頭 {len(header)} 不符: {path}")
            writer.writerow([_cell(v) for v in row])
    logger.info(f"已輸出 CSV: {path}")
    return path


def to_jsonable(obj: object) -> object:
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_json(path: str, obj: object) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(obj), f, ensure_ascii=False, indent=2)
    logger.info(f"已輸出 JSON: {path}")
    return path


def trajectory_header(n_x: int, n_u: int, m: int) -> list[str]:
    return (
        ["step"]
        + [f"x_{j}" for j in range(n_x)]
        + [f"u_{j}" for j in range(n_u)]
        + [f"alpha_{i}" for i in range(m + 1)]
        + ["V", "V_candidate", "phase", "in_ball_x", "in_ball_xkf"]
        + [f"xkf_{j}" for j in range(n_x)]
    )


def trajectory_rows(records: Sequence[StepRecord], m: int) -> list[list[object]]:
    rows = []
    for k, r in enumerate(records):
        # baseline 只有 α⁰，其餘欄位補 0 讓兩份軌跡表頭一致
        alpha = np.zeros(m + 1)
        alpha[: r.alpha_star.shape[0]] = r.alpha_star
        rows.append(
            [k, *r.x, *r.u_star, *alpha, r.value, r.value_candidate, r.phase, r.in_ball_x, r.in_ball_xkf, *r.x_kf]
        )
    return rows


def failure_rows(rows: Sequence[FailureRunSummary]) -> list[list[object]]:
    return [[getattr(r, col) for col in FAILURE_HEADER] for r in rows]


def failure_summary_rows(aggregates: dict, margins: dict) -> list[list[object]]:
    out = []
    for arm in ARMS:
        if arm not in aggregates:
            continue
        agg = aggregates[arm]
        for metric in FAILURE_METRICS:
            out.append([arm, metric, agg[metric]["mean"], agg[metric]["stdev"]])
        out.append([arm, "margin", margins[arm], None])
    return out


def bench_rows(rows: Sequence[dict]) -> list[list[object]]:
    return [[r[col] for col in BENCH_HEADER] for r in rows]


def _fmt(v: object) -> str:
    if isinstance(v, bool):
        return "是" if v else "否"
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return "" if v is None else str(v)


def build_html_report(report: dict) -> str:
    """由 summary.json 內容產生單頁 HTML 報告。"""
    title = report.get("title") or "bpmpc 報告"
    name = report.get("name") or ""
    kind = report.get("kind") or ""
    summary = report.get("summary") or {}
    certificate = report.get("certificate") or {}
    table = report.get("table") or {}

    cards = "\n".join(
        "<div class='card'><div class='muted'>{k}</div><div class='mono' style='font-size:18px'>{v}</div></div>".format(
            k=html_lib.escape(str(k)), v=html_lib.escape(_fmt(v))
        )
        for k, v in summary.items()
        if not isinstance(v, dict)
    )

    cert_rows = "\n".join(
        f"<tr><td class='mono'>{html_lib.escape(k)}</td><td class='num'>{html_lib.escape(_fmt(certificate.get(k)))}</td></tr>"
        for k in ("P", "k1", "z", "beta", "beta_required", "assumption2_ok", "condition13_ok", "condition14_ok", "u_hat")
        if k in certificate
    )
    findings = certificate.get("findings") or []
    finding_html = ", ".join(html_lib.escape(x) for x in findings)

    header = table.get("header") or []
    body_rows = table.get("rows") or []
    head_html = "".join(f"<th>{html_lib.escape(str(h))}</th>" for h in header)
    row_html = []
    for row in body_rows:
        row_class = "warn" if table.get("flag_column") is not None and not row[table["flag_column"]] else "ok"
        cells = "".join(f"<td class='num'>{html_lib.escape(_fmt(v))}</td>" for v in row)
        row_html.append(f"<tr class='{row_class}'>{cells}</tr>")

    cert_section = ""
    if certificate:
        status = "通過" if certificate.get("ok") else "未通過"
        cert_section = f"""
  <h2>穩定性驗證（{status}）</h2>
  <div class="card">
    <table>
      <thead><tr><th>Quantity</th><th class="num">Value</th></tr></thead>
      <tbody>
        {cert_rows}
      </tbody>
    </table>
    <div class="muted" style="margin-top:8px">Findings：<span class="mono">{finding_html or "無"}</span></div>
  </div>"""

    return f"""<!doctype html>
<html lang="zh-Hant">
<head>
  <meta charset="utf-8" />
  <meta name="viewport" content="width=device-width, initial-scale=1" />
  <title>{html_lib.escape(title)}</title>
  <style>
    :root {{
      --text: #111827;
      --muted: #6b7280;
      --border: #e5e7eb;
      --header: #0f172a;
    }}
    * {{ box-sizing: border-box; }}
    body {{
      margin: 0;
      font-family: "Microsoft JhengHei", "PingFang TC", "Noto Sans CJK TC", system-ui, -apple-system, "Segoe UI", Arial, sans-serif;
      color: var(--text);
      padding: 24px;
    }}
    h1 {{ margin: 0 0 8px; font-size: 22px; }}
    h2 {{ margin: 18px 0 10px; font-size: 16px; }}
    .muted {{ color: var(--muted); }}
    .grid {{ display: grid; grid-template-columns: repeat(3, 1fr); gap: 12px; }}
    .card {{ border: 1px solid var(--border); border-radius: 12px; padding: 12px 14px; }}
    .header {{ background: var(--header); color: #ffffff; }}
    .mono {{ font-family: ui-monospace, SFMono-Regular, Menlo, Consolas, "Liberation Mono", monospace; }}
    .pill {{ display:inline-block; padding: 2px 8px; border-radius: 999px; border: 1px solid rgba(255,255,255,0.25); color: #e5e7eb; }}
    table {{ width: 100%; border-collapse: collapse; }}
    th, td {{ border-bottom: 1px solid var(--border); padding: 6px 8px; vertical-align: top; }}
    th {{ text-align: left; color: var(--muted); font-weight: 600; }}
    td.num {{ text-align: right; }}
    tr.warn {{ background: #fef3c7; }}
  </style>
</head>
<body>
  <div class="card header">
    <h1>{html_lib.escape(title)} <span class="pill mono">{html_lib.escape(kind)}</span></h1>
    <div style="color:#e5e7eb">設定：<span class="mono">{html_lib.escape(name)}</span></div>
  </div>

  <h2>摘要</h2>
  <div class="grid">
    {cards or "<div class='muted'>無</div>"}
  </div>
{cert_section}
  <h2>{html_lib.escape(table.get("title") or "明細")}</h2>
  <div class="card">
    <table>
      <thead><tr>{head_html}</tr></thead>
      <tbody>
        {"".join(row_html) if row_html else f"<tr><td colspan='{max(1, len(header))}' class='muted'>無資料</td></tr>"}
      </tbody>
    </table>
  </div>
</body>
</html>"""


def write_html_report(path: str, report: dict) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(build_html_report(to_jsonable(report)))
    logger.info(f"已輸出 HTML 報告: {path}")
    return path
