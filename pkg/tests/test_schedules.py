import pytest

from sdssl.errors import ConfigurationError
from sdssl.schedules import (ScheduleConfig, ScheduleState, alpha_at, build_state,
                             ema_momentum_at, lr_at)


def state(step=0, total=1000, warmup=100, alpha_max=0.6, base_lr=1.5e-4,
          ema_base=0.99, ema_final=1.0, anneal=True):
    return ScheduleState(step=step, total_steps=total, warmup_steps=warmup,
                         alpha_max=alpha_max, base_lr=base_lr, anneal_alpha=anneal,
                         ema_base=ema_base, ema_final=ema_final)


class TestAlpha:
    def test_endpoints_and_midpoint_exact(self):
        assert alpha_at(state(step=0)) == pytest.approx(0.0, abs=1e-12)
        assert alpha_at(state(step=500)) == pytest.approx(0.3, abs=1e-12)
        assert alpha_at(state(step=1000)) == pytest.approx(0.6, abs=1e-12)

    def test_monotone_non_decreasing(self):
        values = [alpha_at(state(step=t)) for t in range(0, 1001, 25)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_anneal_off_is_constant(self):
        values = {alpha_at(state(step=t, anneal=False)) for t in (0, 123, 1000)}
        assert values == {0.6}


class TestLearningRate:
    def test_ramp_endpoints(self):
        assert lr_at(state(step=0)) == pytest.approx(0.0, abs=1e-15)
        assert lr_at(state(step=100)) == pytest.approx(1.5e-4, abs=1e-15)
        assert lr_at(state(step=1000)) == pytest.approx(0.0, abs=1e-15)

    def test_continuous_at_warmup_boundary(self):
        base = 1.5e-4
        before = lr_at(state(step=99))
        at = lr_at(state(step=100))
        assert at == pytest.approx(base, abs=1e-15)
        assert abs(at - before) <= base / 100 + 1e-12

    def test_no_warmup_starts_at_base(self):
        assert lr_at(state(step=0, warmup=0)) == pytest.approx(1.5e-4, abs=1e-15)


class TestEmaMomentum:
    def test_endpoints(self):
        assert ema_momentum_at(state(step=0)) == pytest.approx(0.99, abs=1e-12)
        assert ema_momentum_at(state(step=1000)) == pytest.approx(1.0, abs=1e-12)

    def test_monotone_non_decreasing(self):
        values = [ema_momentum_at(state(step=t)) for t in range(0, 1001, 50)]
        assert all(b >= a for a, b in zip(values, values[1:]))


class TestPurity:
    def test_same_step_same_values(self):
        for step in (0, 77, 450, 1000):
            a, b = state(step=step), state(step=step)
            assert alpha_at(a) == alpha_at(b)
            assert lr_at(a) == lr_at(b)
            assert ema_momentum_at(a) == ema_momentum_at(b)

    def test_at_returns_new_state(self):
        s = state(step=0)
        s2 = s.at(42)
        assert s.step == 0 and s2.step == 42


class TestValidation:
    def test_step_outside_range_rejected(self):
        with pytest.raises(ConfigurationError):
            state(step=1001)

    def test_warmup_must_be_below_total(self):
        with pytest.raises(ConfigurationError):
            state(warmup=1000)

    def test_config_bounds(self):
        with pytest.raises(ConfigurationError):
            ScheduleConfig(warmup_fraction=1.0).validate()
        with pytest.raises(ConfigurationError):
            ScheduleConfig(ema_base=1.0).validate()
        with pytest.raises(ConfigurationError):
            ScheduleConfig(base_lr=0.0).validate()

    def test_build_state_from_config(self):
        s = build_state(ScheduleConfig(epochs=10, warmup_fraction=0.1), steps_per_epoch=40)
        assert s.total_steps == 400
        assert s.warmup_steps == 40
        assert s.step == 0
