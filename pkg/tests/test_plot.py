import xml.etree.ElementTree as ET

from stochstokes.plot import convergence_svg, write_convergence_svg
from stochstokes.results import ConvergenceTable, LevelResult


def _table():
    rows = [LevelResult("space", "I", n, 1 / n, 2.0**-7, 8, (1 / n) ** 4, 0.0, (1 / n) ** 2, 0.0) for n in (2, 4, 8, 16)]
    return ConvergenceTable(rows=rows)


def test_svg_well_formed_with_guides(tmp_path):
    text = convergence_svg(_table(), "space", "spatial convergence")
    root = ET.fromstring(text)
    assert root.tag.endswith("svg")
    for g in ("slope 0.5", "slope 1", "slope 2"):
        assert g in text
    assert text.count("<polyline") == 2 and text.count("<circle") == 8
    write_convergence_svg(_table(), tmp_path / "a.svg", "space")
    write_convergence_svg(_table(), tmp_path / "b.svg", "space")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_svg_empty_table():
    ET.fromstring(convergence_svg(ConvergenceTable(), "time"))
