# Unit tests for cohortsim.py

from datetime import timedelta

import numpy as np
import pytest
from scipy.stats import spearmanr

from wearmil.cohortsim import (
    PSS_MAX,
    assign_pss,
    draw_latent_stress,
    generate_cohort,
    planted_rr,
    synthesize_ecg,
    synthesize_ecg_with_peaks,
)
from wearmil.utils.config_utils import SimulateConfig


@pytest.fixture(scope="module")
def small_cohort():
    cfg = SimulateConfig(ecg_minutes=5.0)
    return generate_cohort(6, 16, seed=3, cfg=cfg)


def test_cohort_is_deterministic():
    cfg = SimulateConfig(ecg_minutes=5.0)
    a = generate_cohort(3, 4, seed=11, cfg=cfg)
    b = generate_cohort(3, 4, seed=11, cfg=cfg)
    assert a.pss == b.pss
    assert [p.latent_stress for p in a.profiles] == [p.latent_stress for p in b.profiles]
    assert a.daily_activity == b.daily_activity
    assert np.array_equal(a.ecg_sessions["P001"][0].recording().samples,
                          b.ecg_sessions["P001"][0].recording().samples)
    c = generate_cohort(3, 4, seed=12, cfg=cfg)
    assert [p.latent_stress for p in a.profiles] != [p.latent_stress for p in c.profiles]


def test_cohort_shape(small_cohort):
    assert small_cohort.patient_ids() == [f"P00{i}" for i in range(1, 7)]
    for p in small_cohort.profiles:
        assert 0.0 <= p.latent_stress <= 1.0
        dates = small_cohort.assessment_dates[p.patient_id]
        assert dates["M3"] == p.baseline_date + timedelta(days=91)
        assert dates["M6"] == p.baseline_date + timedelta(days=182)
        assert all(0 <= small_cohort.pss[p.patient_id][h] <= PSS_MAX for h in ("M3", "M6"))
        activity_days = [r.date for r in small_cohort.daily_activity[p.patient_id]]
        assert activity_days == sorted(activity_days)
        assert min(activity_days) >= p.baseline_date
    assert len(small_cohort.assessments()) == 12


def test_full_adherence_keeps_every_day():
    cohort = generate_cohort(2, 4, seed=0, cfg=SimulateConfig(ecg_minutes=5.0), adherence=1.0)
    for pid in cohort.patient_ids():
        assert len(cohort.daily_activity[pid]) == 28
        assert len(cohort.sleep_nights[pid]) == 28
        assert len(cohort.ecg_sessions[pid]) == 2


def test_zero_adherence_patient_has_no_daily_records():
    cohort = generate_cohort(2, 12, seed=7, cfg=SimulateConfig(ecg_minutes=5.0), adherence={"P001": 0.0})
    assert cohort.daily_activity["P001"] == []
    assert cohort.sleep_nights["P001"] == []
    assert cohort.sleep_epochs["P001"] == []
    assert cohort.ecg_sessions["P001"] == []
    assert len(cohort.daily_activity["P002"]) > 0


def test_full_adherence_cohort_has_regular_ecg_sessions():
    cohort = generate_cohort(40, 26, seed=1, adherence=1.0)
    assert all(len(cohort.ecg_sessions[pid]) >= 6 for pid in cohort.patient_ids())


def test_noise_free_pss_ranks_match_latent_stress():
    cohort = generate_cohort(40, 4, seed=5, cfg=SimulateConfig(noise_sd=0.0, ecg_minutes=5.0))
    latent = [p.latent_stress for p in cohort.profiles]
    for horizon in ("M3", "M6"):
        scores = [cohort.pss[pid][horizon] for pid in cohort.patient_ids()]
        assert len(set(scores)) == 40
        assert spearmanr(latent, scores).correlation == pytest.approx(1.0)


def test_assign_pss_clamps_and_validates():
    assert assign_pss(0.5, 0.0, seed=1) == 20
    assert assign_pss(1.0, 0.0, seed=1) == 40
    assert 0 <= assign_pss(0.0, 50.0, seed=2) <= 40
    with pytest.raises(ValueError):
        assign_pss(0.5, -1.0, seed=0)


def test_latent_draw_uses_distinct_cells():
    latent = draw_latent_stress(41, np.random.default_rng(0))
    cells = np.round(latent * PSS_MAX).astype(int)
    assert sorted(cells.tolist()) == list(range(41))
    assert latent.min() >= 0.0 and latent.max() <= 1.0


def test_planted_sdnn_and_heart_rate_follow_latent_stress():
    levels = [0.0, 0.25, 0.5, 0.75, 1.0]
    sdnn = [np.std(planted_rr(l, 300.0, seed=9)) for l in levels]
    mean_rr = [np.mean(planted_rr(l, 300.0, seed=9)) for l in levels]
    assert sdnn == pytest.approx([80.0, 65.0, 50.0, 35.0, 20.0], rel=1e-9)
    assert all(a > b for a, b in zip(mean_rr, mean_rr[1:]))


def test_synthetic_ecg_length_and_peaks():
    samples, peaks = synthesize_ecg_with_peaks(0.4, 60.0, 130.0, seed=0)
    assert len(samples) == 60 * 130
    assert peaks[0] == pytest.approx(0.4)
    assert peaks[-1] < 60.0
    assert np.array_equal(samples, synthesize_ecg(0.4, 60.0, 130.0, seed=0))


def test_synthesize_ecg_argument_errors():
    with pytest.raises(ValueError):
        synthesize_ecg(0.5, 0.0)
    with pytest.raises(ValueError):
        synthesize_ecg(0.5, 10.0, fs=0.0)
    with pytest.raises(ValueError):
        synthesize_ecg(1.5, 10.0)


def test_generate_cohort_argument_errors():
    with pytest.raises(ValueError):
        generate_cohort(1, 10, seed=0)
    with pytest.raises(ValueError):
        generate_cohort(5, 3, seed=0)


def test_stress_fragments_sleep():
    cohort = generate_cohort(40, 4, seed=1, cfg=SimulateConfig(ecg_minutes=5.0), adherence=1.0)
    latent = [p.latent_stress for p in cohort.profiles]
    deep = [np.mean([n.deep_s for n in cohort.sleep_nights[pid]]) for pid in cohort.patient_ids()]
    assert spearmanr(latent, deep).correlation < -0.5
