import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional, get_args

from src.api.Errors import ConfigError, ModelDomainError
from src.api.Typing import Type_Mode
from src.tipScripts.Controller import ControllerConfig
from src.tipScripts.DelayModel import DelayClass, ModelParams, TwoClassParams, two_class_model

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = tuple(round(i / 10, 10) for i in range(11))
DEFAULT_DEMO_SCRIPT = (("tx1", "out0", 0.0), ("tx2", "out0", 3.0))


@dataclass(frozen=True)
class ExperimentConfig:
    """
    实验配置，默认值对应 λ=200Mps, h=0.1s, d_Q=40h 的标准场景
    """
    mode: Type_Mode = "analytic"
    rate: float = 200.0
    base_delay: float = 0.1
    quarantine: float = 4.0
    parents: int = 2
    value_fraction: float = 0.5
    classes: Optional[tuple[DelayClass, ...]] = None
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    arrivals: int = 1_000_000
    seed: int = 42
    warmup: float = 0.2
    adaptive: bool = False
    k_max: int = 8
    window: Optional[float] = None
    workers: int = 1
    tolerance: float = 0.05
    out_dir: str = "output"
    chart: bool = True
    png: bool = False
    double_spend: float = 0.0
    pipeline: bool = False
    demo_script: tuple[tuple[str, str, float], ...] = DEFAULT_DEMO_SCRIPT

    def two_class(self, value_fraction: Optional[float] = None, parents: Optional[int] = None) -> TwoClassParams:
        return TwoClassParams(
            rate=self.rate,
            base_delay=self.base_delay,
            quarantine=self.quarantine,
            parent_count=self.parents if parents is None else parents,
            value_fraction=self.value_fraction if value_fraction is None else value_fraction,
        )

    def model_params(self) -> ModelParams:
        """显式给出 classes 时使用一般模型，否则使用两类模型"""
        if self.classes is not None:
            return ModelParams(self.rate, self.classes)
        return two_class_model(self.two_class())

    def controller(self) -> ControllerConfig:
        return ControllerConfig(self.base_delay, self.quarantine, self.k_max)

    @property
    def effective_window(self) -> float:
        return self.window if self.window is not None else self.controller().default_window

    def to_dict(self) -> dict[str, Any]:
        """回显全部生效参数（含默认值）"""
        data = asdict(self)
        data["fractions"] = list(self.fractions)
        data["demo_script"] = [list(step) for step in self.demo_script]
        if self.classes is not None:
            data["classes"] = [{"delay": c.delay, "parents": c.parent_count, "fraction": c.fraction}
                               for c in self.classes]
        data["window"] = self.effective_window
        return data


KNOWN_KEYS = {f.name for f in fields(ExperimentConfig)}


def _number(key: str, value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(key, f"需要有限数值, 实际为 {value!r}")
    return float(value)


def _integer(key: str, value: Any, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(key, f"需要整数, 实际为 {value!r}")
    if value < minimum:
        raise ConfigError(key, f"必须 >= {minimum}, 实际为 {value!r}")
    return int(value)


def _flag(key: str, value: Any) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(key, f"需要布尔值, 实际为 {value!r}")
    return value


def _unit_interval(key: str, value: Any) -> float:
    number = _number(key, value)
    if not 0.0 <= number <= 1.0:
        raise ConfigError(key, f"必须在 [0,1] 内, 实际为 {value!r}")
    return number


def _classes(value: Any) -> tuple[DelayClass, ...]:
    if not isinstance(value, list) or not value:
        raise ConfigError("classes", "需要非空的类别列表")
    result = []
    for i, item in enumerate(value):
        path = f"classes[{i}]"
        if not isinstance(item, Mapping):
            raise ConfigError(path, f"需要 {{delay, parents, fraction}} 对象, 实际为 {item!r}")
        unknown = set(item) - {"delay", "parents", "fraction"}
        if unknown:
            raise ConfigError(f"{path}.{sorted(unknown)[0]}", "未知的配置项")
        try:
            result.append(DelayClass(
                delay=_number(f"{path}.delay", item.get("delay")),
                parent_count=_integer(f"{path}.parents", item.get("parents"), 2),
                fraction=_unit_interval(f"{path}.fraction", item.get("fraction")),
            ))
        except ModelDomainError as e:
            raise ConfigError(path, str(e)) from e
    return tuple(result)


def _demo_script(value: Any) -> tuple[tuple[str, str, float], ...]:
    if not isinstance(value, list):
        raise ConfigError("demo_script", "需要 [tx_id, conflict_key, t] 列表")
    steps = []
    for i, step in enumerate(value):
        if not isinstance(step, (list, tuple)) or len(step) != 3:
            raise ConfigError(f"demo_script[{i}]", f"需要 [tx_id, conflict_key, t], 实际为 {step!r}")
        steps.append((str(step[0]), str(step[1]), _number(f"demo_script[{i}][2]", step[2])))
    return tuple(steps)


def _validate(raw: Mapping[str, Any]) -> ExperimentConfig:
    values: dict[str, Any] = {}
    for key, value in raw.items():
        if key == "mode":
            if value not in get_args(Type_Mode):
                raise ConfigError(key, f"未知模式 {value!r}, 可选 {', '.join(get_args(Type_Mode))}")
            values[key] = value
        elif key in ("rate", "base_delay"):
            number = _number(key, value)
            if number <= 0:
                raise ConfigError(key, f"必须 > 0, 实际为 {value!r}")
            values[key] = number
        elif key == "quarantine":
            number = _number(key, value)
            if number < 0:
                raise ConfigError(key, f"必须 >= 0, 实际为 {value!r}")
            values[key] = number
        elif key in ("parents", "k_max"):
            values[key] = _integer(key, value, 2)
        elif key in ("arrivals", "workers"):
            values[key] = _integer(key, value, 1)
        elif key == "seed":
            seed = _integer(key, value, 0)
            if seed >= 2 ** 64:
                raise ConfigError(key, f"必须是 64 位无符号整数, 实际为 {value!r}")
            values[key] = seed
        elif key in ("value_fraction", "double_spend"):
            values[key] = _unit_interval(key, value)
        elif key == "warmup":
            number = _number(key, value)
            if not 0.0 <= number < 1.0:
                raise ConfigError(key, f"必须在 [0,1) 内, 实际为 {value!r}")
            values[key] = number
        elif key == "fractions":
            if not isinstance(value, (list, tuple)):
                raise ConfigError(key, f"需要数值列表, 实际为 {value!r}")
            values[key] = tuple(_unit_interval(f"fractions[{i}]", p) for i, p in enumerate(value))
        elif key == "classes":
            values[key] = None if value is None else _classes(value)
        elif key == "window":
            if value is not None:
                number = _number(key, value)
                if number <= 0:
                    raise ConfigError(key, f"必须 > 0, 实际为 {value!r}")
                value = number
            values[key] = value
        elif key == "tolerance":
            number = _number(key, value)
            if number <= 0:
                raise ConfigError(key, f"必须 > 0, 实际为 {value!r}")
            values[key] = number
        elif key in ("adaptive", "chart", "png", "pipeline"):
            values[key] = _flag(key, value)
        elif key == "out_dir":
            if not isinstance(value, str) or not value:
                raise ConfigError(key, f"需要非空路径, 实际为 {value!r}")
            values[key] = value
        elif key == "demo_script":
            values[key] = _demo_script(value)

    config = ExperimentConfig(**values)
    try:
        params = config.model_params()
        config.controller()
    except ModelDomainError as e:
        raise ConfigError("classes" if config.classes is not None else "parameters", str(e)) from e
    if config.double_spend > 0 and not config.pipeline:
        raise ConfigError("double_spend", f"重复花费需要开启 pipeline, 实际为 {config.double_spend!r}")
    if config.pipeline and config.quarantine > params.max_delay:
        raise ConfigError("quarantine", f"开启 pipeline 时不能超过最大类别延迟 {params.max_delay}, "
                                        f"实际为 {config.quarantine!r}")
    if config.classes is not None and config.mode in ("sweep", "compare"):
        raise ConfigError("classes", "sweep/compare 模式只支持两类参数")
    return config


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """
    读取并校验实验配置（默认值 < 配置文件 < 命令行）
    :param path: JSON 配置文件路径，可为 None
    :param overrides: 命令行覆盖项，值为 None 的项会被忽略
    :return: 校验后的配置
    :raises: ConfigError 出现未知键或取值非法时
    """
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            document = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(str(path), f"无法读取配置文件: {e}") from e
        if not isinstance(document, dict):
            raise ConfigError(str(path), "配置文件必须是 JSON 对象")
        raw.update(document)
        logger.debug("读取配置文件 %s: %s", path, sorted(document))
    if overrides:
        raw.update({key: value for key, value in overrides.items() if value is not None})

    unknown = sorted(set(raw) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(unknown[0], "未知的配置项")
    return _validate(raw)
