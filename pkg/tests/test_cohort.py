import numpy as np
import pytest

from bcrisk.cohort import (
    CapraGroup,
    CapraSInputs,
    ClinicalFeatures,
    CohortRecord,
    OutcomeRule,
    PsaSeries,
    SurvivalOutcome,
    capra_s_score,
    denormalize_clinical,
    derive_bcr,
    fit_normalization,
    load_manifest,
    load_psa_series,
    normalize_clinical,
    save_manifest,
)
from bcrisk.errors import EstimationError, ParseError, ValidationError


def make_record(pid, age=60.0, psa=5.0, isup=2, time=5.0, event=False, capra=None):
    return CohortRecord(
        patient_id=pid,
        outcome=SurvivalOutcome(time=time, event=event),
        clinical=ClinicalFeatures(age_at_diagnosis=age, psa_pretreatment=psa, isup_grade=isup),
        slide_ids=(f"{pid}-S1",),
        capra_s_inputs=capra,
    )


class TestDomainTypes:
    def test_isup_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            ClinicalFeatures(age_at_diagnosis=60, psa_pretreatment=5, isup_grade=7)

    def test_nonpositive_psa_rejected(self):
        with pytest.raises(ValidationError):
            ClinicalFeatures(age_at_diagnosis=60, psa_pretreatment=0.0, isup_grade=1)

    def test_outcome_time_positive(self):
        with pytest.raises(ValidationError):
            SurvivalOutcome(time=0.0, event=False)

    def test_psa_series_times_strictly_increasing(self):
        with pytest.raises(ValidationError):
            PsaSeries(measurements=((1.0, 0.1), (1.0, 0.2)))

    def test_record_needs_clinical_or_slides(self):
        with pytest.raises(ValidationError):
            CohortRecord(patient_id="P1", outcome=SurvivalOutcome(1.0, False))


class TestDeriveBcr:
    def test_two_consecutive_event_at_first_of_pair(self):
        series = PsaSeries(measurements=((1.0, 0.05), (2.0, 0.25), (2.5, 0.30)))
        out = derive_bcr(series, OutcomeRule.TWO_CONSECUTIVE_0_2, followup_end=5.0)
        assert out == SurvivalOutcome(time=2.0, event=True)

    def test_no_adjacent_pair_censors_at_followup_end(self):
        series = PsaSeries(measurements=((1.0, 0.05), (2.0, 0.25), (2.5, 0.10)))
        out = derive_bcr(series, OutcomeRule.TWO_CONSECUTIVE_0_2, followup_end=5.0)
        assert out == SurvivalOutcome(time=5.0, event=False)

    def test_single_rule_threshold_inclusive(self):
        series = PsaSeries(measurements=((1.0, 0.15),))
        out = derive_bcr(series, OutcomeRule.SINGLE_0_1, followup_end=5.0)
        assert out == SurvivalOutcome(time=1.0, event=True)

    def test_empty_series_rejected(self):
        with pytest.raises(ValidationError):
            derive_bcr(PsaSeries(measurements=()), OutcomeRule.SINGLE_0_1, 5.0)

    def test_followup_end_before_last_measurement_rejected(self):
        series = PsaSeries(measurements=((1.0, 0.05), (4.0, 0.05)))
        with pytest.raises(ValidationError):
            derive_bcr(series, OutcomeRule.SINGLE_0_1, followup_end=2.0)

    def test_raising_psa_never_uncalls_an_event(self):
        # monotonicity: bumping any single value keeps event=True
        rng = np.random.default_rng(42)
        for _ in range(200):
            n = int(rng.integers(1, 8))
            times = np.sort(rng.uniform(0.5, 8.0, size=n))
            times += np.arange(n) * 1e-3  # enforce strictly increasing
            values = rng.uniform(0.0, 0.4, size=n)
            series = PsaSeries(measurements=tuple(zip(times, values)))
            for rule in OutcomeRule:
                base = derive_bcr(series, rule, followup_end=10.0)
                k = int(rng.integers(0, n))
                bumped = values.copy()
                bumped[k] += rng.uniform(0.0, 0.5)
                out = derive_bcr(
                    PsaSeries(measurements=tuple(zip(times, bumped))), rule, 10.0
                )
                if base.event:
                    assert out.event


class TestNormalization:
    def test_hand_computed_mean_and_sample_std(self):
        recs = [
            make_record("P1", age=60.0, psa=4.0, isup=1),
            make_record("P2", age=64.0, psa=6.0, isup=3),
        ]
        stats = fit_normalization(recs)
        assert stats.means[0] == pytest.approx(62.0)
        assert stats.stds[0] == pytest.approx(np.std([60.0, 64.0], ddof=1))

    def test_zero_variance_feature_rejected(self):
        recs = [
            make_record("P1", age=60.0, psa=5.0, isup=1),
            make_record("P2", age=64.0, psa=5.0, isup=3),
        ]
        with pytest.raises(EstimationError, match="psa"):
            fit_normalization(recs)

    def test_single_record_rejected(self):
        with pytest.raises(ValidationError):
            fit_normalization([make_record("P1")])

    def test_centering_and_unit_scaling(self):
        recs = [
            make_record("P1", age=55.0, psa=4.0, isup=1),
            make_record("P2", age=65.0, psa=6.0, isup=3),
            make_record("P3", age=60.0, psa=5.0, isup=2),
        ]
        stats = fit_normalization(recs)
        at_mean = ClinicalFeatures(
            age_at_diagnosis=stats.means[0],
            psa_pretreatment=stats.means[1],
            isup_grade=2,
        )
        z = normalize_clinical(at_mean, stats)
        np.testing.assert_allclose(z[:2], 0.0, atol=1e-12)
        one_up = ClinicalFeatures(
            age_at_diagnosis=stats.means[0] + stats.stds[0],
            psa_pretreatment=stats.means[1],
            isup_grade=2,
        )
        assert normalize_clinical(one_up, stats)[0] == pytest.approx(1.0)

    def test_fitting_set_standardizes_to_mean0_std1(self):
        rng = np.random.default_rng(7)
        recs = [
            make_record(
                f"P{i}",
                age=float(rng.uniform(50, 75)),
                psa=float(rng.uniform(2, 20)),
                isup=int(rng.integers(1, 6)),
            )
            for i in range(40)
        ]
        stats = fit_normalization(recs)
        z = np.stack([normalize_clinical(r.clinical, stats) for r in recs])
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(z.std(axis=0, ddof=1), 1.0, atol=1e-9)

    def test_denormalize_round_trip(self):
        recs = [make_record("P1", age=55.0), make_record("P2", age=67.0, psa=9.0, isup=4)]
        stats = fit_normalization(recs)
        c = recs[1].clinical
        back = denormalize_clinical(normalize_clinical(c, stats), stats)
        assert back.age_at_diagnosis == pytest.approx(c.age_at_diagnosis, abs=1e-12)
        assert back.psa_pretreatment == pytest.approx(c.psa_pretreatment, abs=1e-12)
        assert back.isup_grade == c.isup_grade


class TestCapraScore:
    """The adopted postoperative point table and its group partition."""

    def minimal(self):
        return CapraSInputs(
            psa=4.0,
            pathologic_gleason_primary=3,
            pathologic_gleason_secondary=3,
            positive_surgical_margins=False,
            extracapsular_extension=False,
            seminal_vesicle_invasion=False,
            lymph_node_invasion=False,
        )

    def test_minimal_risk_scores_zero(self):
        assert capra_s_score(self.minimal()) == (0, CapraGroup.LOW)

    def test_maximal_risk_scores_twelve(self):
        # sum of the maxima of the adopted table: 3 (PSA) + 3 (Gleason)
        # + 2 (margins) + 1 (ECE) + 2 (SVI) + 1 (LNI)
        inputs = CapraSInputs(
            psa=25.0,
            pathologic_gleason_primary=4,
            pathologic_gleason_secondary=5,
            positive_surgical_margins=True,
            extracapsular_extension=True,
            seminal_vesicle_invasion=True,
            lymph_node_invasion=True,
        )
        assert capra_s_score(inputs) == (12, CapraGroup.HIGH)

    def test_score_four_is_intermediate(self):
        # PSA band 1 point + secondary pattern 4 (1 point) + margins (2)
        inputs = CapraSInputs(
            psa=8.0,
            pathologic_gleason_primary=3,
            pathologic_gleason_secondary=4,
            positive_surgical_margins=True,
            extracapsular_extension=False,
            seminal_vesicle_invasion=False,
            lymph_node_invasion=False,
        )
        score, group = capra_s_score(inputs)
        assert score == 4
        assert group is CapraGroup.INTERMEDIATE

    def test_group_partition_is_exactly_the_published_boundaries(self):
        # every achievable score lands in the right group
        seen = {}
        for psa, p_pts in ((4.0, 0), (8.0, 1), (15.0, 2), (30.0, 3)):
            for gp, gs, g_pts in ((3, 3, 0), (3, 4, 1), (4, 3, 3)):
                for flags in range(16):
                    m, e, s, l = (bool(flags & (1 << i)) for i in range(4))
                    inputs = CapraSInputs(
                        psa=psa,
                        pathologic_gleason_primary=gp,
                        pathologic_gleason_secondary=gs,
                        positive_surgical_margins=m,
                        extracapsular_extension=e,
                        seminal_vesicle_invasion=s,
                        lymph_node_invasion=l,
                    )
                    expected = p_pts + g_pts + 2 * m + e + 2 * s + l
                    score, group = capra_s_score(inputs)
                    assert score == expected
                    seen[score] = group
        assert set(seen) == set(range(13))
        for score, group in seen.items():
            if score <= 2:
                assert group is CapraGroup.LOW
            elif score <= 5:
                assert group is CapraGroup.INTERMEDIATE
            else:
                assert group is CapraGroup.HIGH


class TestManifestIo:
    def test_three_row_manifest_loads_matching_ids(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(
            "patient_id,age,psa,isup,time_years,event,slide_ids\n"
            "P1,61.5,4.2,2,5.0,0,P1-A;P1-B\n"
            "P2,58.0,7.7,3,2.5,1,P2-A\n"
            "P3,,,,3.0,0,P3-A\n"
        )
        records = load_manifest(path)
        assert [r.patient_id for r in records] == ["P1", "P2", "P3"]
        assert records[0].slide_ids == ("P1-A", "P1-B")
        assert records[2].clinical is None

    def test_duplicate_patient_id_rejected(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(
            "patient_id,age,psa,isup,time_years,event,slide_ids\n"
            "P1,61.5,4.2,2,5.0,0,P1-A\n"
            "P1,58.0,7.7,3,2.5,1,P1-B\n"
        )
        with pytest.raises(ValidationError, match="P1"):
            load_manifest(path)

    def test_out_of_range_isup_names_row_and_column(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(
            "patient_id,age,psa,isup,time_years,event,slide_ids\n"
            "P1,61.5,4.2,7,5.0,0,P1-A\n"
        )
        with pytest.raises(ParseError, match="row 2.*isup"):
            load_manifest(path)

    def test_non_numeric_cell_names_row_and_column(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(
            "patient_id,age,psa,isup,time_years,event,slide_ids\n"
            "P1,old,4.2,2,5.0,0,P1-A\n"
        )
        with pytest.raises(ParseError, match="row 2.*age"):
            load_manifest(path)

    def test_round_trip_identical_records_and_bytes(self, tmp_path):
        capra = CapraSInputs(
            psa=8.25,
            pathologic_gleason_primary=4,
            pathologic_gleason_secondary=3,
            positive_surgical_margins=True,
            extracapsular_extension=False,
            seminal_vesicle_invasion=True,
            lymph_node_invasion=False,
        )
        records = [
            make_record("P1", age=61.123456789, psa=4.000001, time=5.25, capra=capra),
            make_record("P2", event=True),
            CohortRecord(
                patient_id="P3",
                outcome=SurvivalOutcome(time=1.5, event=False),
                slide_ids=("P3-A",),
            ),
        ]
        p1 = tmp_path / "a.csv"
        p2 = tmp_path / "b.csv"
        save_manifest(records, p1)
        loaded = load_manifest(p1)
        assert loaded == records
        save_manifest(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestPsaSeriesFile:
    def test_long_format_grouped_and_sorted(self, tmp_path):
        path = tmp_path / "psa.csv"
        path.write_text(
            "patient_id,time_years,psa\n"
            "P1,2.0,0.25\n"
            "P1,1.0,0.05\n"
            "P2,0.5,0.02\n"
        )
        series = load_psa_series(path)
        assert series["P1"].measurements == ((1.0, 0.05), (2.0, 0.25))
        assert set(series) == {"P1", "P2"}

    def test_bad_value_names_row(self, tmp_path):
        path = tmp_path / "psa.csv"
        path.write_text("patient_id,time_years,psa\nP1,1.0,low\n")
        with pytest.raises(ParseError, match="row 2"):
            load_psa_series(path)
