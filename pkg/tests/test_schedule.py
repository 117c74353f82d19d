import math

import numpy as np
import pytest

from cocoseg import schedule


def test_cps_weight_endpoints():
    assert schedule.cps_weight(1000, 1000) == pytest.approx(0.1, abs=1e-12)
    assert schedule.cps_weight(0, 1000) == pytest.approx(0.1 * math.exp(-5.0), abs=1e-12)
    # Frozen from direct evaluation of the warmup formula.
    assert schedule.cps_weight(0, 1000) == pytest.approx(6.7379e-4, rel=1e-4)
    assert schedule.cps_weight(500, 1000) == pytest.approx(2.8650e-2, rel=1e-4)


def test_cps_weight_monotone_and_bounded():
    ts = np.linspace(0, 1000, 1001)
    vals = [schedule.cps_weight(t, 1000) for t in ts]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert all(0 < v <= 0.1 for v in vals)


def test_cps_weight_range_errors():
    with pytest.raises(ValueError):
        schedule.cps_weight(-1, 100)
    with pytest.raises(ValueError):
        schedule.cps_weight(101, 100)


def test_poly_lr_values():
    assert schedule.poly_lr(0, 100, 3e-4) == pytest.approx(3e-4, rel=0, abs=0)
    assert schedule.poly_lr(50, 100, 2e-3, power=1.0) == pytest.approx(1e-3, abs=1e-12)
    # Frozen from direct evaluation: 5e-4 * 0.25^0.9.
    assert schedule.poly_lr(75, 100, 5e-4, power=0.9) == pytest.approx(
        5e-4 * 0.25**0.9, abs=1e-18
    )
    assert schedule.poly_lr(75, 100, 5e-4, power=0.9) == pytest.approx(1.43587e-4, rel=1e-5)


def test_poly_lr_decreasing_positive():
    vals = [schedule.poly_lr(t, 200, 1e-3) for t in range(200)]
    assert all(v > 0 for v in vals)
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_poly_lr_range_errors():
    with pytest.raises(ValueError):
        schedule.poly_lr(100, 100, 1e-3)
    with pytest.raises(ValueError):
        schedule.poly_lr(-1, 100, 1e-3)


def test_schedule_config_validation():
    with pytest.raises(ValueError):
        schedule.ScheduleConfig(t_total=0)
    with pytest.raises(ValueError):
        schedule.ScheduleConfig(t_total=10, lr0_cnn=0.0)
