import argparse
import logging
import os
import time
from pathlib import Path
from typing import Any, Optional, Sequence, get_args

from src.api.Errors import TipPoolError
from src.api.Typing import Type_Mode
from src.experimentApp.Chart import save_png, save_svg
from src.experimentApp.Config import ExperimentConfig, load_config
from src.experimentApp.Report import build_chart, build_report, report_summary, write_csv, write_json
from src.tipScripts.Quarantine import QuarantinePipeline, replay_timeline

logger = logging.getLogger(__name__)

CSV_NAME = "sweep.csv"
SUMMARY_NAME = "summary.json"
CHART_NAME = "chart"
DEMO_NAME = "quarantine-demo.json"


def _fractions(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"无法解析占比列表 {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tippool", description="tip 池大小的解析模型与离散事件仿真")
    parser.add_argument("--config", help="JSON 配置文件")
    parser.add_argument("--mode", choices=list(get_args(Type_Mode)))
    parser.add_argument("--rate", type=float, help="到达率 λ (消息/秒)")
    parser.add_argument("--base-delay", dest="base_delay", type=float, help="数据消息延迟 h (秒)")
    parser.add_argument("--quarantine", type=float, help="隔离时间 d_Q (秒)")
    parser.add_argument("--parents", type=int, help="父引用数 k")
    parser.add_argument("--value-fraction", dest="value_fraction", type=float, help="simulate 模式的价值消息占比 p")
    parser.add_argument("--fractions", type=_fractions, help="扫描点, 逗号分隔, 如 0,0.1,0.2")
    parser.add_argument("--arrivals", type=int, help="每个仿真点的到达数")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--warmup", type=float, help="丢弃的预热比例")
    parser.add_argument("--adaptive", action="store_true", default=None, help="自适应父引用数")
    parser.add_argument("--k-max", dest="k_max", type=int)
    parser.add_argument("--window", type=float, help="占比估计的滑动窗口 (秒)")
    parser.add_argument("--workers", type=int, help="并行仿真进程数")
    parser.add_argument("--tolerance", type=float, help="compare 模式允许的相对误差")
    parser.add_argument("--out-dir", dest="out_dir")
    parser.add_argument("--chart", action=argparse.BooleanOptionalAction, default=None, help="输出 SVG 图表")
    parser.add_argument("--png", action="store_true", default=None, help="同时输出 PNG 图表")
    parser.add_argument("--double-spend", dest="double_spend", type=float, help="重复花费的价值消息占比")
    parser.add_argument("--pipeline", action="store_true", default=None, help="价值消息经过隔离流水线")
    parser.add_argument("--log-level", dest="log_level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


class ExperimentApp:
    """
    命令行实验入口:
        - analytic         解析扫描
        - simulate         单点仿真（可用 classes 给出一般模型）
        - sweep            解析 + 仿真扫描
        - compare          sweep 并检查相对误差
        - quarantine-demo  回放脚本化的冲突时间线
    """

    def __init__(self, argv: Optional[Sequence[str]] = None) -> None:
        self.args = build_parser().parse_args(argv)
        logging.basicConfig(level=self.args.log_level,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    def _overrides(self) -> dict[str, Any]:
        skip = {"config", "log_level"}
        return {key: value for key, value in vars(self.args).items() if key not in skip}

    def run(self) -> int:
        """
        执行实验
        :return: 退出码，0 表示全部完成且所有残差检查通过
        """
        try:
            config = load_config(self.args.config, self._overrides())
            logger.info("模式 %s, 输出目录 %s", config.mode, config.out_dir)
            if config.mode == "quarantine-demo":
                return self.run_quarantine_demo(config)
            return self.run_experiment(config)
        except TipPoolError as e:
            logger.error("%s", e)
            return 1
        except OSError as e:
            logger.error("无法写入输出: %s", e)
            return 1

    def run_experiment(self, config: ExperimentConfig) -> int:
        started = time.perf_counter()
        report = build_report(config)
        out_dir = Path(config.out_dir)

        csv_path = write_csv(report, out_dir / CSV_NAME)
        summary = report_summary(config, report)
        summary["elapsed_seconds"] = round(time.perf_counter() - started, 3)
        json_path = write_json(summary, out_dir / SUMMARY_NAME)
        print(f"CSV: {csv_path}")
        print(f"JSON: {json_path}")

        if config.chart and config.classes is None and config.mode != "simulate":
            canvas = build_chart(config, report)
            print(f"SVG: {save_svg(canvas, os.path.join(config.out_dir, CHART_NAME + '.svg'))}")
            if config.png:
                png_path = save_png(canvas, os.path.join(config.out_dir, CHART_NAME + ".png"))
                if png_path is None:
                    return 1
                print(f"PNG: {png_path}")

        for row in report.rows:
            sim = "" if row.L_sim_mean is None else f", L_sim={row.L_sim_mean:.3f}±{row.L_sim_stddev:.3f}"
            print(f"p={row.p:.2f} k={row.k_used} L={row.L_analytic:.3f}{sim}")

        if not report.passed:
            logger.error("检查未通过: 残差=%s, 容差=%s", report.residual_ok, report.tolerance_ok)
            return 1
        return 0

    @staticmethod
    def run_quarantine_demo(config: ExperimentConfig) -> int:
        pipeline = QuarantinePipeline(config.quarantine)
        admitted = replay_timeline(pipeline, config.demo_script)
        for t, tx_id, event in pipeline.transcript:
            print(f"t={t:g} {tx_id} {event}")

        summary = {
            "config": config.to_dict(),
            "mode": config.mode,
            "transcript": [{"t": t, "tx_id": tx_id, "event": event} for t, tx_id, event in pipeline.transcript],
            "outcomes": {str(tx): entry.outcome for tx, entry in pipeline.entries.items()},
            "admitted": [str(tx) for tx in admitted],
        }
        if pipeline.direct_admissions:
            summary["effective_delay"] = pipeline.effective_delay_check()
        print(f"JSON: {write_json(summary, Path(config.out_dir) / DEMO_NAME)}")
        return 0
