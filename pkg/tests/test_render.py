from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np

from doclayout.render import RenderStyle, label_color, render_sheet, render_svg

from conftest import layout_of, random_layout

SVG = "{http://www.w3.org/2000/svg}"


def rects(svg: str):
    return ET.fromstring(svg).iter(f"{SVG}rect")


def test_one_rect_per_element_in_order():
    layout = random_layout(np.random.default_rng(0), 7)
    found = list(rects(render_svg(layout)))
    assert [r.get("data-category") for r in found] == list(layout.categories)
    assert [int(r.get("data-order")) for r in found] == list(range(7))
    assert len(list(rects(render_svg(layout_of(("text", (0, 0, 1, 1))))))) == 1


def test_deterministic_and_scaled():
    layout = layout_of(("text", (0.1, 0.2, 0.5, 0.25)), canvas=(800, 400))
    a = render_svg(layout)
    assert a == render_svg(layout)
    r = next(rects(a))
    assert (r.get("x"), r.get("y"), r.get("width"), r.get("height")) == ("80.00", "80.00", "400.00", "100.00")


def test_palette_is_stable_and_overridable():
    assert label_color("text") == label_color("text")
    assert label_color("text") != label_color("title")
    style = RenderStyle(palette={"text": "#000000"}, show_labels=False)
    svg = render_svg(layout_of(("text", (0, 0, 1, 1))), style)
    assert next(rects(svg)).get("fill") == "#000000" and "<text" not in svg


def test_sheet_nests_pages():
    layouts = [random_layout(np.random.default_rng(i), 3, i) for i in range(5)]
    root = ET.fromstring(render_sheet(layouts, columns=2))
    assert len(root.findall(f"{SVG}svg")) == 5
    assert len(list(root.iter(f"{SVG}rect"))) == 15
