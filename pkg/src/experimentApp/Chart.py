import logging
import math
import os
from dataclasses import dataclass, field
from html import escape
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

logger = logging.getLogger(__name__)

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"]


@dataclass
class Polyline:
    points: list[tuple[float, float]]
    color: str
    width: float = 2.0
    dashed: bool = False


@dataclass
class Segment:
    start: tuple[float, float]
    end: tuple[float, float]
    color: str
    width: float = 1.0


@dataclass
class Marker:
    center: tuple[float, float]
    color: str
    radius: float = 3.5


@dataclass
class Label:
    position: tuple[float, float]
    text: str
    anchor: str = "middle"
    size: int = 12
    color: str = "#000000"


@dataclass
class ChartCanvas:
    """
    与后端无关的图元集合，坐标为像素
    :param width: 画布宽
    :param height: 画布高
    :param x_range: 数据 x 范围
    :param y_range: 数据 y 范围
    """
    width: int = 800
    height: int = 520
    x_range: tuple[float, float] = (0.0, 1.0)
    y_range: tuple[float, float] = (0.0, 1.0)
    margin_left: int = 70
    margin_right: int = 170
    margin_top: int = 40
    margin_bottom: int = 55
    polylines: list[Polyline] = field(default_factory=list)
    segments: list[Segment] = field(default_factory=list)
    markers: list[Marker] = field(default_factory=list)
    labels: list[Label] = field(default_factory=list)

    def to_pixel(self, x: float, y: float) -> tuple[float, float]:
        x0, x1 = self.x_range
        y0, y1 = self.y_range
        plot_w = self.width - self.margin_left - self.margin_right
        plot_h = self.height - self.margin_top - self.margin_bottom
        px = self.margin_left + (x - x0) / (x1 - x0) * plot_w
        py = self.height - self.margin_bottom - (y - y0) / (y1 - y0) * plot_h
        return px, py


def nice_ticks(low: float, high: float, count: int = 6) -> list[float]:
    """1/2/5 步长的刻度"""
    span = high - low
    if span <= 0:
        return [low]
    raw = span / count
    magnitude = 10 ** math.floor(math.log10(raw))
    step = next(m * magnitude for m in (1, 2, 5, 10) if m * magnitude >= raw)
    start = math.ceil(low / step) * step
    return [round(v, 10) for v in np.arange(start, high + step * 1e-9, step)]


def draw_axes(canvas: ChartCanvas, x_label: str, y_label: str, title: str) -> None:
    """画坐标轴、刻度与标题"""
    x0, x1 = canvas.x_range
    y0, y1 = canvas.y_range
    origin = canvas.to_pixel(x0, y0)
    canvas.segments.append(Segment(origin, canvas.to_pixel(x1, y0), "#000000", 1.5))
    canvas.segments.append(Segment(origin, canvas.to_pixel(x0, y1), "#000000", 1.5))

    for tick in nice_ticks(x0, x1):
        px, py = canvas.to_pixel(tick, y0)
        canvas.segments.append(Segment((px, py), (px, py + 5), "#000000"))
        canvas.labels.append(Label((px, py + 18), f"{tick:g}", size=11))
    for tick in nice_ticks(y0, y1):
        px, py = canvas.to_pixel(x0, tick)
        canvas.segments.append(Segment((px - 5, py), (px, py), "#000000"))
        canvas.segments.append(Segment((px, py), canvas.to_pixel(x1, tick), "#e0e0e0"))
        canvas.labels.append(Label((px - 8, py + 4), f"{tick:g}", anchor="end", size=11))

    plot_mid_x = (canvas.margin_left + canvas.width - canvas.margin_right) / 2
    canvas.labels.append(Label((plot_mid_x, canvas.height - 12), x_label, size=13))
    canvas.labels.append(Label((12, canvas.margin_top - 14), y_label, anchor="start", size=13))
    canvas.labels.append(Label((plot_mid_x, 20), title, size=14))


def add_curve(canvas: ChartCanvas, xs: Sequence[float], ys: Sequence[float], color: str,
              dashed: bool = False) -> None:
    points = [canvas.to_pixel(x, y) for x, y in zip(xs, ys) if math.isfinite(y)]
    if len(points) >= 2:
        canvas.polylines.append(Polyline(points, color, 1.5 if dashed else 2.0, dashed))


def add_points_with_error_bars(canvas: ChartCanvas, xs: Sequence[float], means: Sequence[float],
                               stddevs: Sequence[float], color: str) -> None:
    """仿真点，误差棒为 ±1 个标准差"""
    for x, mean, std in zip(xs, means, stddevs):
        if not math.isfinite(mean):
            continue
        center = canvas.to_pixel(x, mean)
        if math.isfinite(std) and std > 0:
            top = canvas.to_pixel(x, mean + std)
            bottom = canvas.to_pixel(x, max(mean - std, canvas.y_range[0]))
            canvas.segments.append(Segment(bottom, top, color))
            canvas.segments.append(Segment((top[0] - 4, top[1]), (top[0] + 4, top[1]), color))
            canvas.segments.append(Segment((bottom[0] - 4, bottom[1]), (bottom[0] + 4, bottom[1]), color))
        canvas.markers.append(Marker(center, color))


def add_legend(canvas: ChartCanvas, entries: Sequence[tuple[str, str, bool]]) -> None:
    """图例: (文字, 颜色, 是否虚线)"""
    x = canvas.width - canvas.margin_right + 15
    for i, (text, color, dashed) in enumerate(entries):
        y = canvas.margin_top + 10 + i * 20
        canvas.polylines.append(Polyline([(x, y), (x + 25, y)], color, 2.0, dashed))
        canvas.labels.append(Label((x + 32, y + 4), text, anchor="start", size=11))


def render_svg(canvas: ChartCanvas) -> str:
    """渲染为 SVG 字符串（输出只由图元决定）"""
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>\n',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{canvas.width}" height="{canvas.height}" '
        f'viewBox="0 0 {canvas.width} {canvas.height}">\n',
        f'<rect x="0" y="0" width="{canvas.width}" height="{canvas.height}" fill="#ffffff"/>\n',
    ]
    for seg in canvas.segments:
        parts.append(f'<line x1="{seg.start[0]:.2f}" y1="{seg.start[1]:.2f}" x2="{seg.end[0]:.2f}" '
                     f'y2="{seg.end[1]:.2f}" stroke="{seg.color}" stroke-width="{seg.width:g}"/>\n')
    for line in canvas.polylines:
        points = " ".join(f"{x:.2f},{y:.2f}" for x, y in line.points)
        dash = ' stroke-dasharray="6,4"' if line.dashed else ""
        parts.append(f'<polyline points="{points}" fill="none" stroke="{line.color}" '
                     f'stroke-width="{line.width:g}"{dash}/>\n')
    for marker in canvas.markers:
        parts.append(f'<circle cx="{marker.center[0]:.2f}" cy="{marker.center[1]:.2f}" r="{marker.radius:g}" '
                     f'fill="{marker.color}"/>\n')
    for label in canvas.labels:
        parts.append(f'<text x="{label.position[0]:.2f}" y="{label.position[1]:.2f}" font-family="sans-serif" '
                     f'font-size="{label.size}" text-anchor="{label.anchor}" fill="{label.color}">'
                     f'{escape(label.text)}</text>\n')
    parts.append("</svg>\n")
    return "".join(parts)


def _dashed(draw: ImageDraw.ImageDraw, points: list[tuple[float, float]], color: str, width: int) -> None:
    dash, gap = 6.0, 4.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        length = math.hypot(x1 - x0, y1 - y0)
        position = 0.0
        while position < length:
            end = min(position + dash, length)
            draw.line([(x0 + (x1 - x0) * position / length, y0 + (y1 - y0) * position / length),
                       (x0 + (x1 - x0) * end / length, y0 + (y1 - y0) * end / length)], fill=color, width=width)
            position = end + gap


def render_png(canvas: ChartCanvas) -> Image.Image:
    """用 Pillow 渲染同一组图元"""
    image = Image.new("RGB", (canvas.width, canvas.height), "#ffffff")
    draw = ImageDraw.Draw(image)
    for seg in canvas.segments:
        draw.line([seg.start, seg.end], fill=seg.color, width=max(1, round(seg.width)))
    for line in canvas.polylines:
        width = max(1, round(line.width))
        if line.dashed:
            _dashed(draw, line.points, line.color, width)
        else:
            draw.line(line.points, fill=line.color, width=width)
    for marker in canvas.markers:
        x, y = marker.center
        r = marker.radius
        draw.ellipse([x - r, y - r, x + r, y + r], fill=marker.color)
    fonts = {}
    for label in canvas.labels:
        if label.size not in fonts:
            fonts[label.size] = ImageFont.load_default(size=label.size)
        font = fonts[label.size]
        left, top, right, bottom = draw.textbbox((0, 0), label.text, font=font)
        x, y = label.position
        # 与 SVG 一致: y 为基线，anchor 决定水平对齐
        if label.anchor == "middle":
            x -= (right - left) / 2
        elif label.anchor == "end":
            x -= right - left
        draw.text((x, y - bottom), label.text, fill=label.color, font=font)
    return image


def _prepare_path(file_path: str) -> str:
    """确保目标目录存在，同名文件直接覆盖"""
    directory = os.path.dirname(file_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    return file_path


def save_svg(canvas: ChartCanvas, file_path: str) -> str:
    """
    保存 SVG 图表
    :param canvas: 图元
    :param file_path: 文件路径
    :return: 实际保存路径
    """
    final_path = _prepare_path(file_path)
    with open(final_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(render_svg(canvas))
    logger.info("图表已保存: %s", final_path)
    return final_path


def save_png(canvas: ChartCanvas, file_path: str) -> Optional[str]:
    """
    保存 PNG 图表（无损压缩）
    :return: 实际保存路径，失败时为 None
    """
    try:
        final_path = _prepare_path(file_path)
        render_png(canvas).save(final_path, compress_level=9, optimize=True)
    except OSError as e:
        logger.error("保存图表失败: %s", e)
        return None
    logger.info("图表已保存: %s", final_path)
    return final_path
