"""SVG rendering of layouts as colored boxes."""
from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence
from xml.sax.saxutils import escape, quoteattr

from .core import Layout


def label_color(label: str) -> str:
    """Stable color for a label, derived from its hash."""
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=4).digest()
    hue = int.from_bytes(digest[:2], "big") / 65536
    sat = 0.55 + 0.35 * digest[2] / 255
    light = 0.45 + 0.15 * digest[3] / 255
    r, g, b = colorsys.hls_to_rgb(hue, light, sat)
    return "#{:02x}{:02x}{:02x}".format(round(r * 255), round(g * 255), round(b * 255))


@dataclass
class RenderStyle:
    """``width``/``height`` default to the layout's own canvas size."""

    palette: dict[str, str] = field(default_factory=dict)
    stroke_width: float = 2.0
    fill_opacity: float = 0.35
    show_labels: bool = True
    font_size: float = 14.0
    width: Optional[int] = None
    height: Optional[int] = None
    background: str = "#ffffff"

    def color(self, label: str) -> str:
        return self.palette.get(label) or label_color(label)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _page_body(layout: Layout, style: RenderStyle, width: float, height: float) -> list[str]:
    lines = []
    for i, e in enumerate(layout.elements):
        b = e.bbox
        color = style.color(e.category)
        lines.append(
            f'<rect x="{_fmt(b.x * width)}" y="{_fmt(b.y * height)}" '
            f'width="{_fmt(b.w * width)}" height="{_fmt(b.h * height)}" '
            f'fill="{color}" fill-opacity="{style.fill_opacity}" stroke="{color}" '
            f'stroke-width="{style.stroke_width}" data-order="{i}" '
            f"data-category={quoteattr(e.category)}/>"
        )
        if style.show_labels:
            lines.append(
                f'<text x="{_fmt(b.x * width + 2)}" y="{_fmt(b.y * height + style.font_size)}" '
                f'font-family="sans-serif" font-size="{style.font_size}" fill="{color}">'
                f"{escape(e.category)}</text>"
            )
    return lines


def _size(layout: Layout, style: RenderStyle) -> tuple[int, int]:
    return (style.width or layout.canvas_w, style.height or layout.canvas_h)


def render_svg(layout: Layout, style: Optional[RenderStyle] = None) -> str:
    """One ``<rect>`` per element, painted in reading order."""
    style = style or RenderStyle()
    width, height = _size(layout, style)
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" style="background:{style.background}">'
    )
    title = f"<title>{escape(layout.id or layout.doc_type)}</title>"
    return "\n".join([head, title, *_page_body(layout, style, width, height), "</svg>"]) + "\n"


def render_sheet(layouts: Sequence[Layout], style: Optional[RenderStyle] = None,
                 columns: int = 4, gap: int = 20) -> str:
    """Tile several pages into a single SVG document, row-major."""
    style = style or RenderStyle()
    if not layouts:
        raise ValueError("nothing to render")
    sizes = [_size(l, style) for l in layouts]
    cell_w = max(w for w, _ in sizes)
    cell_h = max(h for _, h in sizes)
    rows = (len(layouts) + columns - 1) // columns
    total_w = columns * cell_w + (columns + 1) * gap
    total_h = rows * cell_h + (rows + 1) * gap
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{total_h}" '
        f'viewBox="0 0 {total_w} {total_h}">'
    ]
    for i, (layout, (w, h)) in enumerate(zip(layouts, sizes)):
        ox = gap + (i % columns) * (cell_w + gap)
        oy = gap + (i // columns) * (cell_h + gap)
        out.append(
            f'<svg x="{ox}" y="{oy}" width="{w}" height="{h}" viewBox="0 0 {w} {h}" '
            f'style="background:{style.background}">'
        )
        out.append(f"<title>{escape(layout.id or layout.doc_type)}</title>")
        out.extend(_page_body(layout, style, w, h))
        out.append("</svg>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
