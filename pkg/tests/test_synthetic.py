import numpy as np
import pytest

from bcrisk.errors import ValidationError
from bcrisk.synthetic import (
    SyntheticSignalSpec,
    generate_synthetic_cohort,
    simulate_event_times,
    unit_direction,
)


def make_spec(**overrides):
    base = dict(
        dim=8,
        signal_direction=unit_direction(8, 0),
        signal_tile_fraction_range=(0.0, 1.0),
        noise_std=0.3,
        beta=2.0,
        baseline_hazard=0.1,
        censor_horizon=10.0,
    )
    base.update(overrides)
    return SyntheticSignalSpec(**base)


class TestSpecValidation:
    def test_non_unit_direction_rejected(self):
        with pytest.raises(ValidationError):
            make_spec(signal_direction=np.ones(8))

    def test_bad_fraction_range_rejected(self):
        with pytest.raises(ValidationError):
            make_spec(signal_tile_fraction_range=(0.8, 0.2))


class TestGenerateCohort:
    def test_fixed_seed_is_bit_identical(self):
        a = generate_synthetic_cohort(make_spec(), 20, (5, 15), seed=42, with_capra=True)
        b = generate_synthetic_cohort(make_spec(), 20, (5, 15), seed=42, with_capra=True)
        assert a[0] == b[0]
        for x, y in zip(a[1], b[1]):
            np.testing.assert_array_equal(x.tiles, y.tiles)
        np.testing.assert_array_equal(a[2], b[2])

    def test_zero_beta_means_equal_true_risks(self):
        _, _, risk = generate_synthetic_cohort(make_spec(beta=0.0), 15, 10, seed=1)
        np.testing.assert_array_equal(risk, 0.0)

    def test_too_few_patients_rejected(self):
        with pytest.raises(ValidationError):
            generate_synthetic_cohort(make_spec(), 5, 10, seed=0)

    def test_signal_fraction_drives_mean_projection(self):
        # the planted direction recovers the per-patient fraction from the
        # bag mean, up to noise ~ noise_std/sqrt(n_tiles * ...) per patient
        spec = make_spec(noise_std=0.05, beta=3.0)
        _, bags, risk = generate_synthetic_cohort(spec, 50, 200, seed=3)
        direction = np.asarray(spec.signal_direction)
        recovered = np.array([b.tiles.astype(float).mean(axis=0) @ direction for b in bags])
        np.testing.assert_allclose(recovered * spec.beta, risk, atol=0.1)

    def test_two_arm_hazard_ratio_matches_exp_beta(self):
        # exponential MLE (events / total observed time) per arm
        beta = 1.2
        rates = {}
        for lo_hi, seed in (((1.0, 1.0), 10), ((0.0, 0.0), 11)):
            spec = make_spec(
                beta=beta,
                signal_tile_fraction_range=lo_hi,
                baseline_hazard=0.15,
                censor_horizon=8.0,
            )
            recs, _, _ = generate_synthetic_cohort(spec, 6000, 5, seed=seed)
            events = sum(r.outcome.event for r in recs)
            total_time = sum(r.outcome.time for r in recs)
            rates[lo_hi[0]] = events / total_time
        ratio = rates[1.0] / rates[0.0]
        assert abs(ratio - np.exp(beta)) / np.exp(beta) < 0.10

    def test_event_rate_monotone_in_censor_horizon(self):
        rates = {}
        for horizon in (2.0, 8.0):
            spec = make_spec(beta=0.0, baseline_hazard=0.2, censor_horizon=horizon)
            recs, _, _ = generate_synthetic_cohort(spec, 5000, 5, seed=21)
            rates[horizon] = np.mean([r.outcome.event for r in recs])
        p_lo, p_hi = rates[2.0], rates[8.0]
        sigma = np.sqrt(p_lo * (1 - p_lo) / 5000 + p_hi * (1 - p_hi) / 5000)
        assert p_hi - p_lo > 3 * sigma

    def test_clinical_correlation_couples_isup_to_risk(self):
        spec = make_spec(beta=2.0)
        recs, _, risk = generate_synthetic_cohort(
            spec, 400, 5, seed=9, clinical_correlation=0.9
        )
        isup = np.array([r.clinical.isup_grade for r in recs], dtype=float)
        assert np.corrcoef(isup, risk)[0, 1] > 0.5
        recs0, _, risk0 = generate_synthetic_cohort(
            spec, 400, 5, seed=9, clinical_correlation=0.0
        )
        isup0 = np.array([r.clinical.isup_grade for r in recs0], dtype=float)
        assert abs(np.corrcoef(isup0, risk0)[0, 1]) < 0.2

    def test_with_capra_populates_inputs(self):
        recs, _, _ = generate_synthetic_cohort(make_spec(), 12, 5, seed=2, with_capra=True)
        assert all(r.capra_s_inputs is not None for r in recs)


class TestSimulateEventTimes:
    def test_events_before_censor_horizon(self):
        rng = np.random.default_rng(0)
        times, events = simulate_event_times(np.zeros(2000), 0.3, 5.0, rng)
        assert times.max() <= 5.0
        assert 0 < events.sum() < 2000

    def test_higher_risk_fails_earlier_on_average(self):
        rng = np.random.default_rng(1)
        risks = np.concatenate([np.zeros(4000), np.full(4000, 2.0)])
        times, events = simulate_event_times(risks, 0.1, 50.0, rng)
        t_event_low = times[:4000][events[:4000]]
        t_event_high = times[4000:][events[4000:]]
        assert t_event_high.mean() < t_event_low.mean()
