"""Distance diagnostics and the CSV trace contract."""

import math

import numpy as np
import pytest

from dcfseg import segnet
from dcfseg.autodiff import ShapeError
from dcfseg.diagnostics import (
    CSV_COLUMNS,
    CsvLogger,
    TraceRecord,
    prediction_distance,
    read_trace,
    weight_distance,
)


class TestWeightDistance:
    def test_identical_vectors(self):
        p = segnet.init_params(0)
        assert weight_distance(p, p.copy()) == 0.0

    def test_single_coordinate_difference(self):
        a = segnet.init_params(0)
        b = a.copy()
        b.arrays[0][0, 0, 0, 0] += 3.0
        assert weight_distance(a, b) == pytest.approx(3.0, rel=1e-6)

    def test_symmetric(self):
        a, b = segnet.init_params(1), segnet.init_params(2)
        assert weight_distance(a, b) == weight_distance(b, a)

    def test_structural_mismatch(self):
        from dcfseg.autodiff import ParamVector
        a = ParamVector(["x"], [np.zeros((1, 1, 2, 2), np.float32)])
        b = ParamVector(["y"], [np.zeros((1, 1, 2, 2), np.float32)])
        with pytest.raises(ShapeError):
            weight_distance(a, b)


class TestPredictionDistance:
    def test_identical(self, rng):
        p = rng.random((2, 2, 8, 8))
        assert prediction_distance(p, p) == 0.0

    def test_opposite_onehot_is_sqrt2(self):
        a = np.zeros((3, 2, 4, 4))
        b = np.zeros((3, 2, 4, 4))
        a[:, 0] = 1.0
        b[:, 1] = 1.0
        assert prediction_distance(a, b) == pytest.approx(math.sqrt(2.0), rel=1e-12)

    def test_triangle_inequality(self, rng):
        for _ in range(20):
            a, b, c = (rng.random((1, 2, 6, 6)) for _ in range(3))
            assert prediction_distance(a, c) <= (prediction_distance(a, b)
                                                 + prediction_distance(b, c) + 1e-12)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ShapeError):
            prediction_distance(rng.random((1, 2, 4, 4)), rng.random((1, 2, 8, 8)))


def _record(i):
    return TraceRecord(iter=i, mode="dcf", winner=1 + i % 2, lam=0.5,
                       l_seg_s1=1.0 / (i + 1), l_seg_s2=0.25, l_cps=0.125, l_ms=0.0625,
                       l_total_s1=1.2345678912345, l_total_s2=0.5, dice_s1=0.75,
                       dice_s2=0.5, wd_t_s1=10.0, wd_t_s2=9.0, pd_t_s1=0.1,
                       pd_t_s2=0.2, pd_s1_s2=0.3)


class TestCsvLogger:
    def test_single_header_and_row_count(self, tmp_path):
        path = tmp_path / "m.csv"
        with CsvLogger(path) as logger:
            for i in range(7):
                logger.log(_record(i))
        lines = path.read_text().splitlines()
        assert len(lines) == 8
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert sum(1 for ln in lines if ln.startswith("iter")) == 1

    def test_round_trip_to_printed_precision(self, tmp_path):
        path = tmp_path / "m.csv"
        with CsvLogger(path) as logger:
            for i in range(5):
                logger.log(_record(i))
        rows = read_trace(path)
        assert len(rows) == 5
        for i, row in enumerate(rows):
            ref = _record(i)
            assert row["iter"] == ref.iter and row["winner"] == ref.winner
            for name in ("lambda", "l_total_s1", "dice_s1", "wd_t_s1"):
                attr = {"lambda": "lam"}.get(name, name)
                assert f"{row[name]:.9g}" == f"{getattr(ref, attr):.9g}"

    def test_lf_line_endings(self, tmp_path):
        path = tmp_path / "m.csv"
        with CsvLogger(path) as logger:
            logger.log(_record(0))
        blob = path.read_bytes()
        assert b"\r" not in blob and blob.endswith(b"\n")

    def test_unwritable_path_raises(self, tmp_path):
        with pytest.raises(OSError, match="metric log"):
            CsvLogger(tmp_path / "no" / "such" / "dir" / "m.csv")
