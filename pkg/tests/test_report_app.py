# -*- coding: utf-8 -*-
import csv
import io
import json
import sys
import tempfile
import unittest
from contextlib import redirect_stdout
from pathlib import Path

# 添加项目根目录到Python路径
sys.path.append(str(Path(__file__).parent.parent))

from src.experimentApp.App import CSV_NAME, DEMO_NAME, SUMMARY_NAME, ExperimentApp
from src.experimentApp.Config import load_config
from src.experimentApp.Report import CSV_HEADER, build_report, write_csv
from src.tipScripts.DelayModel import TwoClassParams, solve_pool_size_two_class


def run_app(*argv: str) -> tuple[int, str]:
    buffer = io.StringIO()
    with redirect_stdout(buffer):
        code = ExperimentApp(["--log-level", "WARNING", *argv]).run()
    return code, buffer.getvalue()


class TestReport(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_analytic_rows(self):
        report = build_report(load_config())
        self.assertEqual(len(report.rows), 11)
        self.assertTrue(report.residual_ok)
        self.assertIsNone(report.tolerance_ok)
        first = report.rows[0]
        self.assertAlmostEqual(first.L_analytic, 40.0, places=6)
        self.assertAlmostEqual(first.L_minus, 40.0, places=9)
        self.assertIsNone(first.L_sim_mean)
        self.assertIsNone(first.rel_error)
        self.assertEqual(first.k_used, 2)
        self.assertAlmostEqual(report.rows[-1].L_analytic, 1640.0, places=4)

    def test_adaptive_rows(self):
        report = build_report(load_config(overrides={"adaptive": True}))
        row = report.rows[5]
        self.assertEqual(row.k_used, 4)
        self.assertAlmostEqual(row.L_analytic, solve_pool_size_two_class(TwoClassParams(200.0, 0.1, 4.0, 4, 0.5)))
        self.assertEqual([r.k_used for r in report.rows], sorted(r.k_used for r in report.rows))

    def test_csv_format(self):
        report = build_report(load_config(overrides={"fractions": [0.0, 0.5]}))
        path = write_csv(report, self.dir / "out.csv")
        text = path.read_bytes().decode("utf-8")
        self.assertTrue(text.startswith("p,L_analytic,L_minus,L_plus,L_sim_mean,L_sim_stddev,k_used,rel_error\n"))
        rows = list(csv.DictReader(io.StringIO(text)))
        self.assertEqual(len(rows), 2)
        self.assertEqual(list(rows[0]), CSV_HEADER)
        self.assertEqual(rows[0]["p"], "0")
        self.assertEqual(rows[0]["L_analytic"], "40")
        self.assertEqual(rows[0]["k_used"], "2")
        self.assertEqual(rows[0]["L_sim_mean"], "")

    def test_simulate_rows(self):
        config = load_config(overrides={"mode": "simulate", "arrivals": 20_000})
        report = build_report(config)
        [row] = report.rows
        self.assertEqual(row.p, 0.5)
        self.assertAlmostEqual(row.rel_error, abs(row.L_sim_mean - row.L_analytic) / row.L_analytic)
        [detail] = report.details
        self.assertIn("ks_distance", detail)
        self.assertLess(detail["little_gap"], 0.1)

    def test_simulate_general_model(self):
        config = load_config(overrides={"mode": "simulate", "arrivals": 5_000, "classes": [
            {"delay": 0.1, "parents": 2, "fraction": 0.6},
            {"delay": 1.0, "parents": 3, "fraction": 0.4},
        ]})
        report = build_report(config)
        self.assertEqual(report.rows[0].k_used, 3)
        self.assertIsNotNone(report.rows[0].L_sim_mean)
        self.assertTrue(report.residual_ok)


class TestExperimentApp(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_analytic_outputs(self):
        code, output = run_app("--out-dir", str(self.dir), "--png")
        self.assertEqual(code, 0)
        self.assertIn("p=0.00 k=2 L=40.000", output)
        summary = json.loads((self.dir / SUMMARY_NAME).read_text(encoding="utf-8"))
        self.assertEqual(summary["config"]["rate"], 200.0)
        self.assertAlmostEqual(summary["config"]["window"], 41.0)
        self.assertTrue(summary["checks"]["passed"])
        self.assertEqual(len(summary["rows"]), 11)
        self.assertTrue((self.dir / "chart.svg").read_text(encoding="utf-8").startswith("<?xml"))
        self.assertTrue((self.dir / "chart.png").exists())

    def test_sweep_csv_is_reproducible(self):
        """相同配置与种子的两次扫描输出完全相同的 CSV"""
        args = ("--mode", "sweep", "--arrivals", "3000", "--fractions", "0,0.5,1", "--no-chart")
        first, second = self.dir / "a", self.dir / "b"
        self.assertEqual(run_app(*args, "--out-dir", str(first))[0], 0)
        self.assertEqual(run_app(*args, "--out-dir", str(second))[0], 0)
        self.assertEqual((first / CSV_NAME).read_bytes(), (second / CSV_NAME).read_bytes())
        self.assertFalse((first / "chart.svg").exists())

    def test_compare_tolerance_sets_exit_code(self):
        args = ("--mode", "compare", "--arrivals", "3000", "--fractions", "0.5", "--out-dir", str(self.dir))
        code, _ = run_app(*args, "--tolerance", "1e-9")
        self.assertEqual(code, 1)
        summary = json.loads((self.dir / SUMMARY_NAME).read_text(encoding="utf-8"))
        self.assertFalse(summary["checks"]["tolerance"])
        self.assertEqual(run_app(*args, "--tolerance", "10")[0], 0)

    def test_adaptive_chart(self):
        code, _ = run_app("--adaptive", "--out-dir", str(self.dir))
        self.assertEqual(code, 0)
        svg = (self.dir / "chart.svg").read_text(encoding="utf-8")
        self.assertIn(">k=8<", svg)
        self.assertIn(">adaptive k<", svg)

    def test_quarantine_demo(self):
        code, output = run_app("--mode", "quarantine-demo", "--out-dir", str(self.dir))
        self.assertEqual(code, 0)
        self.assertEqual(output.splitlines()[:5], [
            "t=0 tx1 arrival Unknown",
            "t=2 tx1 opinion Liked",
            "t=3 tx2 arrival Disliked",
            "t=4 tx1 AdmittedByResolver",
            "t=7 tx2 Rejected",
        ])
        summary = json.loads((self.dir / DEMO_NAME).read_text(encoding="utf-8"))
        self.assertEqual(summary["outcomes"], {"tx1": "AdmittedByResolver", "tx2": "Rejected"})
        self.assertEqual(summary["admitted"], ["tx1"])

    def test_errors_exit_one(self):
        self.assertEqual(run_app("--parents", "1", "--out-dir", str(self.dir))[0], 1)
        self.assertEqual(run_app("--config", str(self.dir / "missing.json"))[0], 1)
        blocker = self.dir / "file"
        blocker.write_text("x", encoding="utf-8")
        self.assertEqual(run_app("--out-dir", str(blocker / "sub"), "--no-chart")[0], 1)

    def test_usage_error(self):
        with self.assertRaises(SystemExit) as ctx:
            ExperimentApp(["--mode", "plot"])
        self.assertEqual(ctx.exception.code, 2)


if __name__ == "__main__":
    unittest.main()
