import json

import numpy as np
import pytest

from disarm.rng import make_rng
from disarm.tracking import (
    MetricsWriter,
    VarianceTracker,
    paired_variance_difference,
    variance_with_se,
)


class TestVarianceTracker:
    def test_decay_validation(self):
        for bad in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ValueError):
                VarianceTracker(bad)

    def test_constant_stream_has_zero_variance(self):
        tracker = VarianceTracker(0.9)
        for _ in range(500):
            tracker.update("g", np.array([3.0, -1.0]))
        assert np.all(tracker.variance("g") >= 0.0)
        assert tracker.mean_variance("g") == pytest.approx(0.0, abs=1e-12)

    def test_converges_to_known_gaussian_variance(self):
        # i.i.d. N(0, 2^2) stream, decay 0.999, 10^5 updates: within 5%
        tracker = VarianceTracker(0.999)
        rng = make_rng(123)
        for _ in range(100_000):
            tracker.update("g", rng.normal(0.0, 2.0, size=50))
        assert tracker.mean_variance("g") == pytest.approx(4.0, rel=0.05)
        assert tracker.updates("g") == 100_000

    def test_nonstationary_mean_is_tracked_out(self):
        # a slowly shifted mean mostly lands in the first moment, not variance
        tracker = VarianceTracker(0.99)
        rng = make_rng(5)
        for step in range(20_000):
            tracker.update("g", rng.normal(1.0, 0.5, size=8))
        assert tracker.mean_variance("g") == pytest.approx(0.25, rel=0.2)

    def test_size_change_is_an_error(self):
        tracker = VarianceTracker(0.9)
        tracker.update("g", np.zeros(3))
        with pytest.raises(ValueError):
            tracker.update("g", np.zeros(4))

    def test_unknown_group_is_an_error(self):
        with pytest.raises(KeyError):
            VarianceTracker(0.9).variance("nope")


class TestMetricsWriter:
    def test_one_json_object_per_line(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        with MetricsWriter(path) as writer:
            writer.write({"step": 1, "objective": -1.5})
            writer.write({"step": 2, "objective": -1.25, "grad_var": {"phi": 0.5}})
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        first = json.loads(lines[0])
        assert first == {"step": 1, "objective": -1.5}

    def test_flushes_immediately(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        writer = MetricsWriter(path)
        writer.write({"step": 1})
        assert path.read_text().count("\n") == 1
        writer.close()


class TestVarianceStatistics:
    def test_variance_with_se_needs_two(self):
        with pytest.raises(ValueError):
            variance_with_se(np.array([1.0]))

    def test_paired_difference_detects_ordering(self):
        rng = make_rng(9)
        base = rng.normal(size=40_000)
        noisier = base + rng.normal(0.0, 0.5, size=40_000)
        diff, se = paired_variance_difference(noisier, base)
        assert diff > 0
        assert diff == pytest.approx(0.25, rel=0.1)
        assert diff > 4 * se

    def test_paired_difference_shape_validation(self):
        with pytest.raises(ValueError):
            paired_variance_difference(np.zeros(3), np.zeros(4))
