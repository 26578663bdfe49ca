import csv
import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from bayeskalman.plotting import emit_svg_line_plot

SVG = "{http://www.w3.org/2000/svg}"


def parse(path):
    root = ET.parse(path).getroot()
    lines = {el.get("data-series"): el for el in root.iter() if el.get("data-series")}
    legend = [el.text for el in root.iter(f"{SVG}text") if el.get("class") == "legend"]
    return lines, legend


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_single_point_series_is_a_marker(tmp_path):
    path = emit_svg_line_plot({"a": ([1.0], [2.0])}, "x", "y", tmp_path / "one.svg")
    lines, legend = parse(path)
    assert lines["a"].tag == f"{SVG}circle" and legend == ["a"]


def test_two_series_two_legend_entries(tmp_path):
    path = emit_svg_line_plot({"a": ([0, 1], [0, 1]), "b": ([0, 1], [1, 0])}, "x", "y", tmp_path / "two.svg")
    lines, legend = parse(path)
    assert legend == ["a", "b"]
    assert all(el.tag == f"{SVG}polyline" for el in lines.values())


def test_svg_coordinates_are_affine_in_csv_values(tmp_path):
    rng = np.random.default_rng(0)
    series = {name: (np.arange(20.0), rng.normal(size=20) * 10) for name in ("p", "q")}
    path = emit_svg_line_plot(series, "t", "value", tmp_path / "fig.svg")
    rows = read_csv(path.with_suffix(".csv"))
    assert rows[0] == ["series", "t", "value"]
    lines, _ = parse(path)
    data, pix = [], []
    for name, el in lines.items():
        pts = [tuple(map(float, p.split(","))) for p in el.get("points").split()]
        vals = [(float(r[1]), float(r[2])) for r in rows[1:] if r[0] == name]
        assert len(pts) == len(vals)
        data += vals
        pix += pts
    data, pix = np.array(data), np.array(pix)
    for k in range(2):
        A = np.column_stack([data[:, k], np.ones(len(data))])
        coef, *_ = np.linalg.lstsq(A, pix[:, k], rcond=None)
        np.testing.assert_allclose(A @ coef, pix[:, k], atol=1e-9)
    assert np.all(np.diff(pix[:20, 0]) > 0)


def test_non_finite_points_kept_in_csv_but_not_drawn(tmp_path):
    path = emit_svg_line_plot({"a": ([0, 1, 2], [1.0, float("-inf"), 3.0])}, "x", "y", tmp_path / "inf.svg")
    assert len(read_csv(path.with_suffix(".csv"))) == 4
    lines, _ = parse(path)
    assert len(lines["a"].get("points").split()) == 2


def test_labels_are_escaped(tmp_path):
    path = emit_svg_line_plot({"a<b": ([0], [0])}, "x & y", "z", tmp_path / "esc.svg")
    ET.parse(path)
    assert re.search("x &amp; y", path.read_text())


def test_empty_input_rejected(tmp_path):
    with pytest.raises(ValueError):
        emit_svg_line_plot({}, "x", "y", tmp_path / "none.svg")
    with pytest.raises(ValueError):
        emit_svg_line_plot({"a": ([], [])}, "x", "y", tmp_path / "none.svg")
