import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from src.experimentApp.Chart import (PALETTE, ChartCanvas, add_curve, add_legend, add_points_with_error_bars,
                                     draw_axes)
from src.experimentApp.Config import ExperimentConfig
from src.tipScripts.Controller import adaptive_k
from src.tipScripts.DelayModel import (RESIDUAL_TOLERANCE, l_minus, l_plus, pool_size_residual,
                                       removal_class_probabilities, solve_pool_size, solve_pool_size_two_class,
                                       two_class_model)
from src.tipScripts.TangleSim import SimConfig, SimResult, ks_distance, run_simulation, sweep

logger = logging.getLogger(__name__)

CSV_HEADER = ["p", "L_analytic", "L_minus", "L_plus", "L_sim_mean", "L_sim_stddev", "k_used", "rel_error"]
CHART_GRID = 101


@dataclass
class SweepRow:
    p: float
    L_analytic: Optional[float] = None
    L_minus: Optional[float] = None
    L_plus: Optional[float] = None
    L_sim_mean: Optional[float] = None
    L_sim_stddev: Optional[float] = None
    k_used: Optional[int] = None
    rel_error: Optional[float] = None

    def attach_simulation(self, result: SimResult) -> None:
        self.L_sim_mean = result.mean_pool_size
        self.L_sim_stddev = result.pool_size_stddev
        if self.L_analytic:
            self.rel_error = abs(result.mean_pool_size - self.L_analytic) / self.L_analytic


@dataclass
class SweepReport:
    """
    一次实验的全部结果
    :param rows: 每个扫描点一行
    :param details: 每个仿真点的附加统计（KS 距离、Little 定律偏差等）
    :param residual_ok: 所有解析解的残差检查是否通过
    :param tolerance_ok: compare 模式下相对误差是否都在容差内，其他模式为 None
    """
    mode: str
    rows: list[SweepRow] = field(default_factory=list)
    details: list[dict[str, Any]] = field(default_factory=list)
    residual_ok: bool = True
    tolerance_ok: Optional[bool] = None

    @property
    def passed(self) -> bool:
        return self.residual_ok and self.tolerance_ok is not False

    def aggregate(self) -> dict[str, Any]:
        errors = [row.rel_error for row in self.rows if row.rel_error is not None]
        return {
            "points": len(self.rows),
            "max_rel_error": max(errors) if errors else None,
            "mean_rel_error": float(np.mean(errors)) if errors else None,
        }


def _residual_ok(params_model, pool_size: float) -> bool:
    """事后重新计算一般模型的残差，不信任求解器"""
    active = params_model.without_empty_classes()
    if active.max_delay == 0:
        return pool_size == 0
    residual = pool_size_residual(pool_size, active)
    ok = abs(residual) <= RESIDUAL_TOLERANCE * active.rate * active.max_delay
    if not ok:
        logger.error("残差检查失败: L=%.6g, 残差=%.3g", pool_size, residual)
    return ok


def chosen_parents(config: ExperimentConfig, p: float) -> int:
    return adaptive_k(p, config.controller()) if config.adaptive else config.parents


def analytic_row(config: ExperimentConfig, p: float) -> tuple[SweepRow, bool]:
    """
    一个扫描点的解析结果
    :return: (行, 残差检查是否通过)
    """
    k = chosen_parents(config, p)
    params = config.two_class(p, k)
    pool_size = solve_pool_size_two_class(params)
    row = SweepRow(p=p, L_analytic=pool_size, L_minus=l_minus(params), L_plus=l_plus(params), k_used=k)
    return row, _residual_ok(two_class_model(params), pool_size)


def simulation_config(config: ExperimentConfig, params) -> SimConfig:
    return SimConfig(
        params=params,
        total_arrivals=config.arrivals,
        seed=config.seed,
        warmup_fraction=config.warmup,
        controller=config.controller() if config.adaptive else None,
        estimator_window=config.effective_window if config.adaptive else None,
        quarantine=config.quarantine if config.pipeline else None,
        double_spend=config.double_spend,
    )


def simulation_details(p: Optional[float], result: SimResult, params, adaptive: bool) -> dict[str, Any]:
    """Little 定律偏差、按类别的移出比例以及 KS 距离"""
    detail: dict[str, Any] = {
        "p": p,
        "mean_pool_size": result.mean_pool_size,
        "pool_size_stddev": result.pool_size_stddev,
        "arrivals_by_class": result.arrivals_by_class,
        "final_pool_size": result.final_pool_size,
        "rejected": result.rejected_count,
        "k_histogram": {str(k): n for k, n in result.k_histogram.items()},
    }
    if result.removal_times.size:
        little = params.rate * float(result.removal_times.mean())
        detail["little_gap"] = abs(result.mean_pool_size - little) / result.mean_pool_size
        total = sum(result.removals_by_class)
        detail["removal_share_by_class"] = [n / total for n in result.removals_by_class]
        if not adaptive and result.mean_pool_size > 0:
            detail["removal_share_model"] = removal_class_probabilities(params, result.mean_pool_size)
            detail["ks_distance"] = ks_distance(result, params)
    return detail


def build_report(config: ExperimentConfig) -> SweepReport:
    """
    执行 analytic / simulate / sweep / compare 模式
    :param config: 实验配置
    :return: 结果报告
    """
    report = SweepReport(mode=config.mode)

    if config.mode == "simulate":
        params = config.model_params()
        if config.classes is None:
            row, ok = analytic_row(config, config.value_fraction)
        else:
            pool_size = solve_pool_size(params)
            row = SweepRow(p=params.classes[-1].fraction, L_analytic=pool_size,
                           k_used=params.classes[-1].parent_count)
            ok = _residual_ok(params, pool_size)
        result = run_simulation(simulation_config(config, params))
        row.attach_simulation(result)
        report.rows.append(row)
        report.details.append(simulation_details(row.p, result, params, config.adaptive))
        report.residual_ok = ok
        return report

    if config.mode == "analytic" and config.classes is not None:
        params = config.model_params()
        pool_size = solve_pool_size(params)
        report.rows.append(SweepRow(p=params.classes[-1].fraction, L_analytic=pool_size,
                                    k_used=params.classes[-1].parent_count))
        report.residual_ok = _residual_ok(params, pool_size)
        return report

    for p in config.fractions:
        row, ok = analytic_row(config, p)
        report.rows.append(row)
        report.residual_ok = report.residual_ok and ok

    if config.mode in ("sweep", "compare"):
        base = simulation_config(config, two_class_model(config.two_class()))
        for row, (p, result) in zip(report.rows, sweep(base, config.fractions, config.workers)):
            row.attach_simulation(result)
            params = two_class_model(config.two_class(p))
            report.details.append(simulation_details(p, result, params, config.adaptive))

    if config.mode == "compare":
        report.tolerance_ok = all(row.rel_error is not None and row.rel_error <= config.tolerance
                                  for row in report.rows)
        if not report.tolerance_ok:
            worst = max(report.rows, key=lambda r: r.rel_error or 0.0)
            logger.warning("相对误差超出容差 %.3f: p=%.2f, 误差=%.4f", config.tolerance, worst.p, worst.rel_error)
    return report


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return f"{value:.10g}"


def write_csv(report: SweepReport, path: Path) -> Path:
    """写出扫描结果，表头固定"""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in report.rows:
            writer.writerow([_cell(getattr(row, name)) for name in CSV_HEADER])
    return path


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {key: _json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(item) for item in value]
    return value


def write_json(summary: dict[str, Any], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                    encoding="utf-8")
    return path


def report_summary(config: ExperimentConfig, report: SweepReport) -> dict[str, Any]:
    return {
        "config": config.to_dict(),
        "mode": report.mode,
        "rows": [{name: getattr(row, name) for name in CSV_HEADER} for row in report.rows],
        "aggregate": report.aggregate(),
        "simulation": report.details,
        "checks": {"residual": report.residual_ok, "tolerance": report.tolerance_ok, "passed": report.passed},
    }


def build_chart(config: ExperimentConfig, report: SweepReport) -> ChartCanvas:
    """
    tip 池大小随价值消息占比变化的图
    固定 k 时画解析曲线与 L⁻/L⁺；自适应时画 k=2..k_max 的固定 k 参考曲线
    """
    grid = np.linspace(0.0, 1.0, CHART_GRID)
    curves: list[tuple[str, list[float], str, bool]] = []
    if config.adaptive:
        for i, k in enumerate(range(2, config.k_max + 1)):
            ys = [solve_pool_size_two_class(config.two_class(p, k)) for p in grid]
            curves.append((f"k={k}", ys, PALETTE[(i + 1) % len(PALETTE)], True))
        ys = [solve_pool_size_two_class(config.two_class(p, chosen_parents(config, p))) for p in grid]
        curves.append(("adaptive k", ys, PALETTE[0], False))
    else:
        params = [config.two_class(p) for p in grid]
        curves.append((f"model k={config.parents}", [solve_pool_size_two_class(x) for x in params], PALETTE[0], False))
        curves.append(("L-", [l_minus(x) for x in params], PALETTE[2], True))
        curves.append(("L+", [l_plus(x) for x in params], PALETTE[3], True))

    tops = [y for _, ys, _, _ in curves[:1] + curves[-1:] for y in ys]
    tops += [(row.L_sim_mean or 0.0) + (row.L_sim_stddev or 0.0) for row in report.rows]
    if config.adaptive:
        tops += [y for _, ys, _, _ in curves for y in ys]
    y_max = max(tops) * 1.08

    canvas = ChartCanvas(x_range=(0.0, 1.0), y_range=(0.0, y_max))
    title = f"λ={config.rate:g} Mps, h={config.base_delay:g}s, d_Q={config.quarantine:g}s"
    draw_axes(canvas, "value message fraction p", "tip pool size L", title)
    for _, ys, color, dashed in curves:
        clipped = [y if 0.0 <= y <= y_max else math.nan for y in ys]
        add_curve(canvas, grid, clipped, color, dashed)

    legend = [(name, color, dashed) for name, _, color, dashed in curves]
    simulated = [row for row in report.rows if row.L_sim_mean is not None]
    if simulated:
        add_points_with_error_bars(canvas, [r.p for r in simulated], [r.L_sim_mean for r in simulated],
                                   [r.L_sim_stddev for r in simulated], "#000000")
        legend.append(("simulation", "#000000", False))
    add_legend(canvas, legend)
    return canvas
