# -*- coding: utf-8 -*-
import json
import sys
import tempfile
import unittest
from pathlib import Path

# 添加项目根目录到Python路径
sys.path.append(str(Path(__file__).parent.parent))

from src.api.Errors import ConfigError
from src.experimentApp.Config import KNOWN_KEYS, ExperimentConfig, load_config


class TestLoadConfig(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, document) -> str:
        path = self.dir / "config.json"
        path.write_text(json.dumps(document), encoding="utf-8")
        return str(path)

    def test_defaults(self):
        config = load_config()
        self.assertEqual(config, ExperimentConfig())
        self.assertEqual((config.rate, config.base_delay, config.quarantine, config.parents), (200.0, 0.1, 4.0, 2))
        self.assertEqual((config.arrivals, config.seed, config.warmup), (1_000_000, 42, 0.2))
        self.assertEqual(len(config.fractions), 11)
        self.assertAlmostEqual(config.effective_window, 41.0)

    def test_fraction_out_of_range(self):
        with self.assertRaises(ConfigError) as ctx:
            load_config(overrides={"fractions": [0.5, 1.5]})
        self.assertEqual(ctx.exception.key_path, "fractions[1]")
        self.assertIn("1.5", str(ctx.exception))

    def test_invalid_values(self):
        cases = {
            "parents": 1,
            "k_max": 1,
            "rate": 0,
            "base_delay": -0.1,
            "quarantine": -1,
            "arrivals": 0,
            "seed": -5,
            "warmup": 1.0,
            "mode": "plot",
            "adaptive": "yes",
            "tolerance": 0,
            "window": 0,
            "double_spend": 2,
            "out_dir": "",
        }
        for key, value in cases.items():
            with self.subTest(key=key):
                with self.assertRaises(ConfigError) as ctx:
                    load_config(overrides={key: value})
                self.assertEqual(ctx.exception.key_path, key)

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as ctx:
            load_config(self.write({"k": 3}))
        self.assertEqual(ctx.exception.key_path, "k")

    def test_file_and_flags(self):
        """默认值 < 配置文件 < 命令行"""
        path = self.write({"rate": 100, "parents": 3, "seed": 7})
        config = load_config(path, {"parents": 4, "seed": None})
        self.assertEqual(config.rate, 100.0)
        self.assertEqual(config.parents, 4)
        self.assertEqual(config.seed, 7)

    def test_unreadable_file(self):
        with self.assertRaises(ConfigError):
            load_config(str(self.dir / "missing.json"))
        (self.dir / "broken.json").write_text("{", encoding="utf-8")
        with self.assertRaises(ConfigError):
            load_config(str(self.dir / "broken.json"))
        with self.assertRaises(ConfigError):
            load_config(self.write([1, 2]))

    def test_classes(self):
        config = load_config(overrides={"mode": "simulate", "classes": [
            {"delay": 0.1, "parents": 2, "fraction": 0.7},
            {"delay": 1.0, "parents": 3, "fraction": 0.3},
        ]})
        params = config.model_params()
        self.assertEqual([c.parent_count for c in params.classes], [2, 3])

        with self.assertRaises(ConfigError) as ctx:
            load_config(overrides={"classes": [{"delay": 0.1, "parents": 1, "fraction": 1.0}]})
        self.assertEqual(ctx.exception.key_path, "classes[0].parents")
        with self.assertRaises(ConfigError) as ctx:
            load_config(overrides={"classes": [{"delay": 0.1, "parents": 2, "fraction": 0.5}]})
        self.assertEqual(ctx.exception.key_path, "classes")
        with self.assertRaises(ConfigError):
            load_config(overrides={"mode": "sweep", "classes": [{"delay": 0.1, "parents": 2, "fraction": 1.0}]})

    def test_pipeline_requirements(self):
        """重复花费必须配合 pipeline，pipeline 的隔离时间不能超过最大类别延迟"""
        with self.assertRaises(ConfigError) as ctx:
            load_config(overrides={"mode": "simulate", "double_spend": 0.1})
        self.assertEqual(ctx.exception.key_path, "double_spend")
        config = load_config(overrides={"mode": "simulate", "double_spend": 0.1, "pipeline": True})
        self.assertEqual(config.double_spend, 0.1)

        classes = [{"delay": 0.1, "parents": 2, "fraction": 0.5}, {"delay": 2.0, "parents": 2, "fraction": 0.5}]
        with self.assertRaises(ConfigError) as ctx:
            load_config(overrides={"mode": "simulate", "classes": classes, "pipeline": True})
        self.assertEqual(ctx.exception.key_path, "quarantine")
        config = load_config(overrides={"mode": "simulate", "classes": classes, "pipeline": True, "quarantine": 2.0})
        self.assertTrue(config.pipeline)
        self.assertEqual(load_config(overrides={"classes": classes}).quarantine, 4.0)

    def test_demo_script(self):
        config = load_config(overrides={"demo_script": [["a", "x", 0], ["b", "x", 1.5]]})
        self.assertEqual(config.demo_script, (("a", "x", 0.0), ("b", "x", 1.5)))
        with self.assertRaises(ConfigError) as ctx:
            load_config(overrides={"demo_script": [["a", "x"]]})
        self.assertEqual(ctx.exception.key_path, "demo_script[0]")

    def test_echo_is_complete(self):
        """回显包含所有生效参数，并可以重新载入得到相同配置"""
        config = load_config(overrides={"adaptive": True, "fractions": [0.0, 0.25]})
        echo = config.to_dict()
        self.assertEqual(set(echo), KNOWN_KEYS)
        self.assertAlmostEqual(echo["window"], 41.0)
        self.assertEqual(load_config(self.write(echo)),
                         ExperimentConfig(adaptive=True, fractions=(0.0, 0.25), window=config.effective_window))


if __name__ == "__main__":
    unittest.main()
