"""Tests for the single-flight versus two-flight comparison."""

import math

import pytest

from tower_inspection.compare_cmd import (
    COMPARE_COLUMNS,
    ComparisonRow,
    compare_cell,
    default_n_values,
    run_comparison,
    savings_trend,
    write_comparison_csv,
)
from tower_inspection.errors import InvalidParameters
from tower_inspection.mission import MissionConfig
from tower_inspection.scene import TowerKind


def _row(n, t_fusion, total, seed=1):
    return ComparisonRow(f"A{n}-s{seed}", seed, n, t_fusion, total - 40.0, 40.0, total)


class TestComparisonRow:
    def test_savings(self):
        row = _row(8, 75.0, 100.0)
        assert row.savings == pytest.approx(0.25)
        assert row.savings_pct == pytest.approx(25.0)

    def test_csv_columns(self, tmp_path):
        path = write_comparison_csv([_row(4, 50.0, 80.0), _row(8, 90.0, 100.0)], tmp_path / "compare.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(COMPARE_COLUMNS)
        assert lines[1].split(",")[:3] == ["A4-s1", "1", "4"]
        assert float(lines[1].split(",")[-1]) == pytest.approx(37.5)


class TestSavingsTrend:
    def test_single_n_has_no_trend(self):
        rho, p_value = savings_trend([_row(8, 70.0, 100.0, seed) for seed in range(3)])
        assert math.isnan(rho)
        assert math.isnan(p_value)

    def test_shrinking_savings(self):
        rows = [_row(n, 100.0 * (0.5 + n / 50.0), 100.0) for n in (4, 8, 12, 16, 20, 24)]
        rho, p_value = savings_trend(rows)
        assert rho == pytest.approx(-1.0)
        assert p_value < 0.05


class TestRunComparison:
    def test_requires_seeds(self):
        with pytest.raises(InvalidParameters):
            run_comparison((4,), [])

    def test_rejects_more_waypoints_than_the_tower_offers(self):
        with pytest.raises(InvalidParameters):
            run_comparison((10,), [1], kind=TowerKind.B)

    def test_default_n_values_fit_the_tower(self):
        assert default_n_values(24) == (4, 8, 12, 16, 20, 24)
        assert default_n_values(8) == (4, 8)
        assert default_n_values(2) == (2,)

    @pytest.mark.end_to_end
    def test_single_flight_saves_time_at_eight_waypoints(self):
        row = compare_cell(8, 7, MissionConfig())
        assert row.total_two_flight == row.t_scan + row.t_tsp
        assert row.savings_pct > 0

    @pytest.mark.end_to_end
    @pytest.mark.skip_ci
    def test_savings_shrink_with_more_waypoints(self):
        rows = run_comparison((4, 8, 16, 24), [7, 8, 9])
        assert [r.n for r in rows] == [4, 4, 4, 8, 8, 8, 16, 16, 16, 24, 24, 24]
        rho, p_value = savings_trend(rows)
        assert rho < 0
        assert p_value < 0.05

    @pytest.mark.end_to_end
    def test_tower_b_cell(self):
        row = compare_cell(4, 7, MissionConfig(), kind=TowerKind.B)
        assert row.scene_id == "B2-s7"
        assert row.total_two_flight == row.t_scan + row.t_tsp
        assert row.savings_pct > 0

    @pytest.mark.end_to_end
    @pytest.mark.skip_ci
    @pytest.mark.parametrize("n", [4, 8, 16, 24])
    def test_single_flight_saves_time_for_every_n(self, n):
        assert compare_cell(n, 7, MissionConfig()).savings > 0
