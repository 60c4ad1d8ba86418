#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
備援計畫約束 MPC（backup-plan-constrained MPC）

閉迴路模擬、隨機故障測試、穩定性驗證、參數搜尋與效能量測（CSV + JSON + HTML）。
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from bpmpc_core.config import (
    DATA_DIR,
    DEFAULT_BETA_MARGIN,
    LOG_FILE,
    ExperimentConfig,
    FailureExperimentConfig,
    config_snapshot,
    load_config,
    with_overrides,
    worker_count,
)
from bpmpc_core.errors import BpmpcError, CertificationError, ConfigError
from bpmpc_core.experiments import bench, run_certify, run_closed_loop, run_failure_comparison, run_search_params
from bpmpc_core.reporting import (
    BENCH_HEADER,
    FAILURE_HEADER,
    FAILURE_SUMMARY_HEADER,
    bench_rows,
    failure_rows,
    failure_summary_rows,
    trajectory_header,
    trajectory_rows,
    write_csv,
    write_html_report,
    write_json,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_CERTIFICATION = 3


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=[
            logging.FileHandler(LOG_FILE, encoding="utf-8"),
            logging.StreamHandler(),
        ],
        force=True,
    )


def build_arg_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="實驗設定檔（JSON）")
    common.add_argument("--seed", type=int, default=None, help="覆寫 solver.seed")
    common.add_argument("--out", default=None, help="輸出資料夾（預設 data/<設定名稱>/<子命令>）")
    common.add_argument("--samples", type=int, default=None, help="覆寫樣本數 M")
    common.add_argument("--horizon", type=int, default=None, help="覆寫預測時域 N")
    common.add_argument("--force", action="store_true", help="驗證未通過時仍然執行")
    common.add_argument("--verbose", action="store_true", help="輸出每一步的 DEBUG 紀錄")

    parser = argparse.ArgumentParser(description="備援計畫約束 MPC：模擬、故障測試、穩定性驗證")
    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="閉迴路模擬")
    sim.add_argument("--baseline", action="store_true", help="另外執行只考慮 p0 的單目標控制器並比較")
    sub.add_parser("failure-test", parents=[common], help="隨機故障測試（proposed vs baseline）")
    sub.add_parser("certify", parents=[common], help="網格驗證穩定性參數")
    search = sub.add_parser("search-params", parents=[common], help="搜尋 gamma 與 mu")
    search.add_argument("--margin", type=float, default=DEFAULT_BETA_MARGIN, help="beta 相對門檻的保留量")
    bench_p = sub.add_parser("bench", parents=[common], help="不同 N 與 M 下的求解頻率與成本")
    bench_p.add_argument("--horizons", type=int, nargs="+", default=None, help="N 清單")
    bench_p.add_argument("--sample-sizes", type=int, nargs="+", default=None, help="M 清單")
    bench_p.add_argument("--repeats", type=int, default=None, help="每組重複次數")
    return parser


def _report(out: str, kind: str, cfg: ExperimentConfig, summary: dict, *, certificate=None, table=None) -> None:
    report = {
        "title": "備援計畫約束 MPC 報告",
        "kind": kind,
        "name": cfg.name,
        "summary": summary,
        "certificate": certificate.to_dict() if certificate is not None else None,
        "table": table,
    }
    write_json(os.path.join(out, "summary.json"), report)
    write_html_report(os.path.join(out, "report.html"), report)


def cmd_simulate(args: argparse.Namespace, cfg: ExperimentConfig, out: str, workers: int) -> int:
    result = run_closed_loop(cfg, force=args.force, workers=workers)
    n_x, n_u, m = cfg.model.n_x, cfg.model.n_u, cfg.missions.m
    header = trajectory_header(n_x, n_u, m)
    rows = trajectory_rows(result.records, m)
    write_csv(os.path.join(out, "trajectory.csv"), header, rows)
    summary = {"proposed": result.summary}
    flat = {f"proposed.{k}": v for k, v in result.summary.items()}
    if args.baseline:
        base = run_closed_loop(cfg, baseline=True, workers=workers)
        write_csv(os.path.join(out, "trajectory_baseline.csv"), header, trajectory_rows(base.records, m))
        summary["baseline"] = base.summary
        flat.update({f"baseline.{k}": v for k, v in base.summary.items()})
        mp = result.summary["mean_distance_to_nearest_alternative"]
        mb = base.summary["mean_distance_to_nearest_alternative"]
        if mp is not None:
            flat["detour_closer_than_baseline"] = mp < mb
            logger.info(f"與最近備援目的地的平均距離: proposed={mp:.4g}, baseline={mb:.4g}")
    table = {"title": "每步紀錄", "header": header, "rows": rows}
    _report(out, "simulate", cfg, flat, certificate=result.certificate, table=table)
    return EXIT_OK


def cmd_failure_test(args: argparse.Namespace, cfg: ExperimentConfig, out: str, workers: int) -> int:
    result = run_failure_comparison(cfg, force=args.force, workers=workers)
    rows = failure_rows(result.rows)
    write_csv(os.path.join(out, "failure_runs.csv"), FAILURE_HEADER, rows)
    summary_rows = failure_summary_rows(result.aggregates, result.margins)
    write_csv(os.path.join(out, "failure_summary.csv"), FAILURE_SUMMARY_HEADER, summary_rows)
    flat = {}
    for arm, agg in result.aggregates.items():
        flat[f"{arm}.energy_after_failure"] = agg["energy_after_failure"]["mean"]
        flat[f"{arm}.total_energy"] = agg["total_energy"]["mean"]
        flat[f"{arm}.margin"] = result.margins[arm]
    flat["budget"] = cfg.failure.budget
    table = {"title": "各次測試", "header": FAILURE_HEADER, "rows": rows, "flag_column": len(FAILURE_HEADER) - 1}
    _report(out, "failure-test", cfg, flat, table=table)
    return EXIT_OK


def cmd_certify(args: argparse.Namespace, cfg: ExperimentConfig, out: str, workers: int) -> int:
    cert = run_certify(cfg)
    write_json(os.path.join(out, "certificate.json"), cert.to_dict())
    _report(out, "certify", cfg, {"ok": cert.ok, "P": cert.P, "beta_required": cert.beta_required}, certificate=cert)
    if not cert.ok and not args.force:
        logger.error(f"穩定性驗證未通過: {', '.join(cert.findings)}")
        return EXIT_CERTIFICATION
    return EXIT_OK


def cmd_search_params(args: argparse.Namespace, cfg: ExperimentConfig, out: str, workers: int) -> int:
    params, cert = run_search_params(cfg, args.margin)
    write_json(os.path.join(out, "stability_params.json"), params.to_dict())
    write_json(os.path.join(out, "certificate.json"), cert.to_dict())
    _report(out, "search-params", cfg, {"ok": cert.ok, "gamma": list(params.gamma), "mu": params.mu}, certificate=cert)
    return EXIT_OK if cert.ok else EXIT_CERTIFICATION


def cmd_bench(args: argparse.Namespace, cfg: ExperimentConfig, out: str, workers: int) -> int:
    rows = bench(
        cfg,
        args.horizons or cfg.bench.horizons,
        args.sample_sizes or cfg.bench.samples,
        repeats=args.repeats,
        workers=workers,
    )
    table_rows = bench_rows(rows)
    write_csv(os.path.join(out, "bench.csv"), BENCH_HEADER, table_rows)
    _report(out, "bench", cfg, {"cells": len(rows)}, table={"title": "效能量測", "header": BENCH_HEADER, "rows": table_rows})
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "failure-test": cmd_failure_test,
    "certify": cmd_certify,
    "search-params": cmd_search_params,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_arg_parser().parse_args(argv)
    setup_logging(args.verbose)

    try:
        cfg = with_overrides(load_config(args.config), seed=args.seed, samples=args.samples, horizon=args.horizon)
        workers = worker_count()
        out = args.out or os.path.join(DATA_DIR, cfg.name, args.command)
        logger.info(
            f"載入設定: {args.config} | N={cfg.horizon}, M={cfg.solver.M}, m={cfg.missions.m}, workers={workers}"
        )
        write_json(os.path.join(out, "config_snapshot.json"), config_snapshot(cfg))
        if args.command == "failure-test":
            FailureExperimentConfig.from_experiment(cfg)
        return COMMANDS[args.command](args, cfg, out, workers)
    except ConfigError as e:
        logger.error(f"設定錯誤: {e}")
        return EXIT_CONFIG
    except CertificationError as e:
        logger.error(f"{e}（可加 --force 略過）")
        return EXIT_CERTIFICATION
    except BpmpcError as e:
        logger.error(f"執行失敗: {e}")
        return EXIT_FAILURE
    except Exception:
        logger.exception("執行過程發生錯誤")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
