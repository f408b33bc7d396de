"""Report rendering: files appear, CSV content is exact, PNGs deterministic."""

import numpy as np
import pytest

from mindreg.grids import GridGeometry, ScalarVolume, VectorField
from mindreg.losses import LossReport
from mindreg.report import render_registration_report, write_metrics_csv

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def volume(seed, n=12):
    rng = np.random.default_rng(seed)
    return ScalarVolume(GridGeometry((n, n, n)), rng.random((n, n, n)))


def field(n=12):
    g = GridGeometry((n, n, n))
    data = np.zeros((n, n, n, 3))
    data[..., 0] = 0.3
    return VectorField(g, data)


def history():
    reports = []
    for i in range(6):
        w = {"similarity": -0.5 - 0.05 * i, "diffusion": 0.1 / (i + 1)}
        reports.append(LossReport(
            total=sum(w.values()),
            terms=dict(w),
            weighted=w,
            stage_totals=(sum(w.values()),),
            forward={"similarity": w["similarity"]},
            backward={"similarity": w["similarity"]},
        ))
    return reports


class TestMetricsCsv:
    def test_exact_content(self, tmp_path):
        rows = [("dice", "mean", 0.875), ("tre", "blob1", 1.25), ("ndv", "", 0.0)]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(rows, path)
        expected = "metric,key,value\ndice,mean,0.875\ntre,blob1,1.25\nndv,,0.0\n"
        assert path.read_text() == expected

    def test_header_only_when_empty(self, tmp_path):
        path = tmp_path / "metrics.csv"
        write_metrics_csv([], path)
        assert path.read_text() == "metric,key,value\n"


class TestRenderReport:
    def test_all_pieces(self, tmp_path):
        written = render_registration_report(
            tmp_path / "rep",
            metrics_rows=[("ndv", "", 0.0)],
            fixed=volume(0),
            moving=volume(1),
            warped=volume(2),
            field=field(),
            history=history(),
            level_spans=((0, 3), (3, 6)),
        )
        names = sorted(p.split("/")[-1] for p in written)
        assert names == ["jacobian.png", "loss_curves.png", "metrics.csv", "slices.png"]
        for path in written:
            raw = open(path, "rb").read()
            assert len(raw) > 0
            if path.endswith(".png"):
                assert raw[:8] == PNG_MAGIC

    def test_partial_inputs(self, tmp_path):
        written = render_registration_report(tmp_path / "rep", field=field())
        assert [p.split("/")[-1] for p in written] == ["jacobian.png"]

    def test_empty_history_skipped(self, tmp_path):
        written = render_registration_report(
            tmp_path / "rep", metrics_rows=[], history=[]
        )
        assert [p.split("/")[-1] for p in written] == ["metrics.csv"]

    @pytest.mark.parametrize("name", ["slices.png", "jacobian.png", "loss_curves.png"])
    def test_renders_are_byte_identical(self, tmp_path, name):
        kwargs = dict(
            fixed=volume(0), moving=volume(1), warped=volume(2),
            field=field(), history=history(), level_spans=((0, 3), (3, 6)),
        )
        render_registration_report(tmp_path / "a", **kwargs)
        render_registration_report(tmp_path / "b", **kwargs)
        raw_a = (tmp_path / "a" / name).read_bytes()
        raw_b = (tmp_path / "b" / name).read_bytes()
        assert raw_a == raw_b
        assert b"Matplotlib" not in raw_a  # no version stamp in the output
