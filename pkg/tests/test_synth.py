import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from telecg.errors import ConfigurationError, DomainError, PlanError
from telecg.synth import (AFIB_JITTER_FLOOR_MS, AFIB_JITTER_MULT,
                          BEAT_START_OFFSET_MS, HALF_MAX_SIGMAS, N_LEADS,
                          P_SIGMA_MS, QS_AMP_FRAC, QS_OFFSET_FRAC,
                          QS_SIGMA_FRAC, SAMPLE_RATE_HZ, T_SIGMA_FRAC,
                          CohortConfig, PatientProfile, Track, labels_at,
                          make_plan, plan_from_dict, plan_to_dict,
                          read_sidecar, render_beat, render_record,
                          render_telemetry, sample_profile,
                          schedule_afib_episode, schedule_interval_drift,
                          synthesize_cohort, truth_track, write_sidecar)

from .oracles import measure_rhythm, p_wave_energy

FS = float(SAMPLE_RATE_HZ)


def clean_profile(patient_id="t0", rate=62.0, pr=160.0, qrs=96.0, qt=420.0,
                  hrv=0.0, afib=False, sex=0, age=50.0, noise=None, **extra):
    amp_p = (0.0,) * 4 if afib else (0.12, 0.11, 0.09, 0.06)
    return PatientProfile(
        patient_id=patient_id, age_years=age, sex=sex,
        base_heart_rate_bpm=rate, pr_ms=pr, qrs_ms=qrs, qt_ms=qt,
        hrv_std_ms=hrv, amp_p=amp_p, amp_qrs=(1.0, 1.2, 0.8, -0.7),
        amp_t=(0.3, 0.32, 0.25, -0.12), afib_flag=afib,
        noise_levels=noise or {}, **extra)


# ---------------------------------------------------------------------------
# profile & cohort validation


def test_profile_rejects_bad_fields():
    with pytest.raises(DomainError):
        clean_profile(sex=2)
    with pytest.raises(DomainError):
        clean_profile(rate=0.0)
    with pytest.raises(DomainError):
        clean_profile(qrs=430.0, qt=420.0)  # QRS must fit inside QT
    with pytest.raises(DomainError):
        clean_profile(hrv=-1.0)
    with pytest.raises(DomainError):
        clean_profile(noise={"sparkles": 1.0})
    with pytest.raises(DomainError):
        clean_profile(noise={"wander": -0.1})


def test_cohort_rejects_bad_ranges():
    with pytest.raises(ConfigurationError):
        CohortConfig(age_years=(90.0, 18.0))
    with pytest.raises(ConfigurationError):
        CohortConfig(afib_prevalence=1.5)
    with pytest.raises(ConfigurationError):
        CohortConfig(qt_ms=(100.0, 150.0))  # overlaps the QRS range
    with pytest.raises(ConfigurationError):
        CohortConfig(base_heart_rate_bpm=(0.0, 90.0))


# ---------------------------------------------------------------------------
# profile sampling


def test_sample_profile_deterministic():
    cohort = CohortConfig()
    a = sample_profile(cohort, 7)
    b = sample_profile(cohort, 7)
    assert a == b
    assert sample_profile(cohort, 8) != a


def test_sample_profile_degenerate_range():
    cohort = CohortConfig(age_years=(50.0, 50.0))
    assert sample_profile(cohort, 3).age_years == 50.0


def test_sample_profile_fields_within_ranges():
    cohort = CohortConfig()
    for seed in range(200):
        p = sample_profile(cohort, seed)
        lo, hi = cohort.age_years
        assert lo <= p.age_years <= hi
        assert cohort.base_heart_rate_bpm[0] <= p.base_heart_rate_bpm \
            <= cohort.base_heart_rate_bpm[1]
        assert cohort.pr_ms[0] <= p.pr_ms <= cohort.pr_ms[1]
        assert cohort.qrs_ms[0] <= p.qrs_ms <= cohort.qrs_ms[1]
        # QT is rate-corrected downward, so only the upper bound is preserved
        assert p.qrs_ms < p.qt_ms <= cohort.qt_ms[1]
        assert cohort.hrv_std_ms[0] <= p.hrv_std_ms <= cohort.hrv_std_ms[1]
        for kind, level in p.noise_levels.items():
            assert level >= 0.0


def test_afib_prevalence_monte_carlo():
    cohort = CohortConfig(afib_prevalence=0.3)
    count = sum(sample_profile(cohort, s).afib_flag for s in range(1000))
    assert abs(count / 1000.0 - 0.3) < 0.03


def test_age_couplings_are_directional():
    cohort = CohortConfig()
    profs = [sample_profile(cohort, s) for s in range(400)]
    ages = np.array([p.age_years for p in profs])
    # undo the rate correction so the age->QT coupling is visible
    qt_base = np.array([
        p.qt_ms / math.sqrt(min(60.0 / p.base_heart_rate_bpm, 1.0))
        for p in profs])
    hrv = np.array([p.hrv_std_ms for p in profs])
    assert np.corrcoef(ages, qt_base)[0, 1] > 0.5
    assert np.corrcoef(ages, hrv)[0, 1] < -0.5


def test_sex_scales_t_amplitude():
    cohort = CohortConfig()
    profs = [sample_profile(cohort, s) for s in range(400)]
    t_by_sex = {0: [], 1: []}
    for p in profs:
        t_by_sex[p.sex].append(p.amp_t[0])
    assert np.mean(t_by_sex[1]) > np.mean(t_by_sex[0])


# ---------------------------------------------------------------------------
# single-beat rendering


def test_render_beat_zero_amplitudes():
    prof = dataclasses.replace(clean_profile(), amp_p=(0.0,) * 4,
                               amp_qrs=(0.0,) * 4, amp_t=(0.0,) * 4)
    for phase in (0.0, 100.0, 500.0, 900.0):
        assert render_beat(prof, 1, phase) == 0.0


def test_render_beat_afib_has_no_p_contribution():
    sinus = clean_profile()
    afib = clean_profile(afib=True)
    # away from the P bump the two beats agree; at the P apex they differ
    # by exactly the P bump
    p_apex = HALF_MAX_SIGMAS * P_SIGMA_MS
    assert render_beat(afib, 1, p_apex) == pytest.approx(
        render_beat(sinus, 1, p_apex) - sinus.amp_p[1], abs=1e-12)


def test_render_beat_phase_domain():
    prof = clean_profile(rate=60.0)
    with pytest.raises(DomainError):
        render_beat(prof, 1, -1.0)
    with pytest.raises(DomainError):
        render_beat(prof, 1, 1000.0)  # RR is exactly 1000 ms
    with pytest.raises(DomainError):
        render_beat(prof, 7, 0.0)


def test_render_beat_matches_closed_form_sum():
    """Peak-to-peak of the rendered beat equals the analytic bump-sum
    extremum to 1e-9 (dense grid on both routes)."""
    prof = clean_profile()
    phases = np.arange(0.0, 60000.0 / prof.base_heart_rate_bpm, 0.01)
    rendered = np.array([render_beat(prof, 1, p) for p in phases[:70000]])

    sigma_r = prof.qrs_ms / (2.0 * HALF_MAX_SIGMAS)
    r_centre = prof.pr_ms + prof.qrs_ms / 2.0
    sigma_t = T_SIGMA_FRAC * prof.qt_ms
    bumps = [
        (HALF_MAX_SIGMAS * P_SIGMA_MS, P_SIGMA_MS, prof.amp_p[1]),
        (r_centre - QS_OFFSET_FRAC * prof.qrs_ms, QS_SIGMA_FRAC * prof.qrs_ms,
         QS_AMP_FRAC * prof.amp_qrs[1]),
        (r_centre, sigma_r, prof.amp_qrs[1]),
        (r_centre + QS_OFFSET_FRAC * prof.qrs_ms, QS_SIGMA_FRAC * prof.qrs_ms,
         QS_AMP_FRAC * prof.amp_qrs[1]),
        (prof.pr_ms + prof.qt_ms - HALF_MAX_SIGMAS * sigma_t, sigma_t,
         prof.amp_t[1]),
    ]
    t = phases[:70000]
    analytic = np.zeros_like(t)
    for centre, sigma, amp in bumps:
        analytic += amp * np.exp(-0.5 * ((t - centre) / sigma) ** 2)
    assert abs((rendered.max() - rendered.min())
               - (analytic.max() - analytic.min())) < 1e-9
    assert np.max(np.abs(rendered - analytic)) < 1e-9


# ---------------------------------------------------------------------------
# record rendering


def test_exact_periodicity_without_jitter():
    prof = clean_profile(rate=60.0, hrv=0.0)
    rec = render_telemetry(prof, 60.0, 5)
    assert rec.samples.shape == (N_LEADS, 7200)
    m = measure_rhythm(rec.samples, FS, lead=1)
    assert np.all(np.diff(m["peaks"]) == SAMPLE_RATE_HZ)  # RR exactly 1 s


def test_duration_sample_count():
    rec = render_telemetry(clean_profile(), 60.0, 5)
    assert rec.samples.shape == (N_LEADS, 7200)
    assert rec.samples.dtype == np.float32


def test_render_determinism():
    plan = make_plan(sample_profile(CohortConfig(), 3), 120.0)
    a = render_record(plan, 42)
    b = render_record(plan, 42)
    c = render_record(plan, 43)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert a.event_log == b.event_log
    assert a.samples.tobytes() != c.samples.tobytes()


def test_leads_share_beat_timing():
    rec = render_telemetry(clean_profile(hrv=15.0), 120.0, 9)
    reference = None
    for lead in range(N_LEADS):
        v = rec.samples[lead] if rec.samples[lead].max() > \
            -rec.samples[lead].min() else -rec.samples[lead]
        peaks = measure_rhythm(np.stack([v] * 2), FS, lead=0,
                               with_p=False)["peaks"]
        if reference is None:
            reference = peaks
        else:
            assert len(peaks) == len(reference)
            assert np.max(np.abs(peaks - reference)) <= 1


def test_label_recoverability_on_clean_renders():
    """Rule-based measurement recovers rate within 1 bpm and intervals within
    one sample period on noise-free renders."""
    rng = np.random.default_rng(77)
    for i in range(5):
        rate = rng.uniform(50.0, 75.0)
        qrs = rng.uniform(75.0, 125.0)
        qt = rng.uniform(360.0, 480.0)
        pr = rng.uniform(120.0, 195.0)
        prof = clean_profile(patient_id=f"lr{i}", rate=rate, pr=pr, qrs=qrs,
                             qt=qt, hrv=0.0)
        rec = render_telemetry(prof, 120.0, 1000 + i)
        m = measure_rhythm(rec.samples, FS, lead=1)
        period_ms = 1000.0 / FS
        assert abs(m["rate_bpm"] - rate) < 1.0
        assert abs(m["qrs_ms"] - qrs) < period_ms
        assert abs(m["qt_ms"] - qt) < period_ms
        assert abs(m["pr_ms"] - pr) < period_ms


def test_afib_profile_suppresses_p_and_elevates_jitter():
    af = clean_profile(patient_id="af", afib=True, hrv=10.0)
    sr = clean_profile(patient_id="sr", afib=False, hrv=10.0)
    rec_af = render_telemetry(af, 120.0, 31)
    rec_sr = render_telemetry(sr, 120.0, 31)
    m_af = measure_rhythm(rec_af.samples, FS, lead=1, with_p=False)
    m_sr = measure_rhythm(rec_sr.samples, FS, lead=1, with_p=False)
    pe_af = p_wave_energy(rec_af.samples, FS, m_af["peaks"])
    pe_sr = p_wave_energy(rec_sr.samples, FS, m_sr["peaks"])
    assert pe_af < 0.01 * pe_sr
    expected_jitter = max(AFIB_JITTER_MULT * 10.0, AFIB_JITTER_FLOOR_MS)
    assert m_af["rr_std_ms"] > 0.6 * expected_jitter
    assert m_af["rr_std_ms"] > 3.0 * m_sr["rr_std_ms"]


def test_afib_jitter_floor_for_low_hrv_profiles():
    af = clean_profile(patient_id="af0", afib=True, hrv=0.0)
    rec = render_telemetry(af, 120.0, 32)
    m = measure_rhythm(rec.samples, FS, lead=1, with_p=False)
    assert m["rr_std_ms"] > 0.6 * AFIB_JITTER_FLOOR_MS


def test_dropout_events_match_flat_line_runs():
    prof = clean_profile(noise={"wander": 0.2, "motion": 0.04,
                                "dropout": 5.0})
    rec = render_telemetry(prof, 7200.0, 12)
    gaps = [e for e in rec.event_log if e.kind == "dropout"]
    assert gaps, "expected at least one dropout at 5/hour over two hours"
    zero = np.all(rec.samples == 0.0, axis=0)
    runs = 0
    i = 0
    while i < len(zero):
        if zero[i]:
            j = i
            while j + 1 < len(zero) and zero[j + 1]:
                j += 1
            if j - i + 1 >= 30:  # >= 0.25 s of exact zeros on all leads
                runs += 1
            i = j + 1
        else:
            i += 1
    assert runs == len(gaps)
    for e in gaps:
        lo = int(e.time_s * FS) + 1
        hi = int((e.time_s + e.duration_s) * FS) - 1
        assert np.all(rec.samples[:, lo:hi] == 0.0)


def test_pvc_beats_are_wide_and_tall():
    prof = clean_profile(noise={"pvc": 6.0})
    rec = render_telemetry(prof, 3600.0, 17)
    pvcs = [e for e in rec.event_log if e.kind == "pvc"]
    assert pvcs
    v = rec.samples[1]
    normal_peak = np.percentile(np.abs(v), 99.9)
    for e in pvcs:
        lo = int((e.time_s - 0.1) * FS)
        hi = int((e.time_s + 0.8) * FS)
        assert np.max(v[max(0, lo):hi]) > 1.3 * normal_peak


def test_pacemaker_spikes_logged_and_sharp():
    prof = clean_profile(noise={"pacemaker": 6.0})
    rec = render_telemetry(prof, 3600.0, 18)
    spikes = [e for e in rec.event_log if e.kind == "pacemaker"]
    assert spikes
    for e in spikes:
        lo = max(0, int(e.time_s * FS) - 2)
        hi = int(e.time_s * FS) + 4
        assert np.max(np.abs(rec.samples[:, lo:hi])) > 2.0


def test_wander_and_motion_band_placement():
    from .oracles import out_of_band_power
    quiet = clean_profile(patient_id="q")
    noisy = dataclasses.replace(quiet, noise_levels={"wander": 0.3,
                                                     "motion": 0.1})
    rec_q = render_telemetry(quiet, 60.0, 6)
    rec_n = render_telemetry(noisy, 60.0, 6)
    # wander (0.3 mV slow sinusoid) + motion (0.1 mV RMS high-band) add about
    # 4*(7200*0.09/2 + 7200*0.01) ~ 1.6e3 of out-of-band energy
    added = out_of_band_power(rec_n.samples, FS) - \
        out_of_band_power(rec_q.samples, FS)
    assert added > 1000.0


# ---------------------------------------------------------------------------
# plans, episodes, drifts


def test_track_validation_and_interp():
    with pytest.raises(DomainError):
        Track(times_s=(0.0, 0.0), values=(1.0, 2.0))
    tr = Track(times_s=(0.0, 10.0), values=(1.0, 2.0))
    assert tr.at(0.0) == 1.0
    assert tr.at(5.0) == 1.5
    assert tr.at(100.0) == 2.0  # constant extrapolation


def test_schedule_afib_episode_validation():
    plan = make_plan(clean_profile(), 600.0)
    with pytest.raises(PlanError):
        schedule_afib_episode(plan, 200.0, 200.0)
    with pytest.raises(PlanError):
        schedule_afib_episode(plan, -1.0, 100.0)
    with pytest.raises(PlanError):
        schedule_afib_episode(plan, 100.0, 700.0)
    p2 = schedule_afib_episode(plan, 100.0, 300.0)
    with pytest.raises(PlanError):
        schedule_afib_episode(p2, 250.0, 400.0)  # overlap


def test_afib_episode_bookkeeping():
    plan = schedule_afib_episode(make_plan(clean_profile(), 600.0),
                                 100.0, 200.0)
    rec = render_record(plan, 4)
    onsets = [e for e in rec.event_log if e.kind == "afib_onset"]
    offsets = [e for e in rec.event_log if e.kind == "afib_offset"]
    assert len(onsets) == 1 and onsets[0].time_s == 100.0
    assert len(offsets) == 1 and offsets[0].time_s == 200.0
    assert labels_at(plan, 150.0)["afib"] == 1
    assert labels_at(plan, 50.0)["afib"] == 0


def test_afib_episode_suppresses_p_inside():
    plan = schedule_afib_episode(make_plan(clean_profile(hrv=8.0), 600.0),
                                 200.0, 400.0)
    rec = render_record(plan, 7)
    m = measure_rhythm(rec.samples, FS, lead=1, with_p=False)
    peaks = m["peaks"]
    t = peaks / FS
    inside = [i for i in range(1, len(peaks) - 1) if 205 < t[i] < 395]
    outside = [i for i in range(1, len(peaks) - 1)
               if 5 < t[i] < 195 or 405 < t[i] < 595]
    pe_in = p_wave_energy(rec.samples, FS, peaks, select=inside)
    pe_out = p_wave_energy(rec.samples, FS, peaks, select=outside)
    assert pe_in < 0.01 * pe_out


def test_afib_reversion_restores_sinus():
    plan = schedule_afib_episode(make_plan(clean_profile(hrv=8.0), 1200.0),
                                 100.0, 1100.0, reversions=[(500.0, 700.0)])
    assert plan.afib_intervals == ((100.0, 500.0), (700.0, 1100.0))
    assert labels_at(plan, 600.0)["afib"] == 0
    assert labels_at(plan, 400.0)["afib"] == 1
    rec = render_record(plan, 8)
    kinds = [e.kind for e in rec.event_log if e.kind.startswith("afib")]
    assert kinds == ["afib_onset", "afib_offset", "afib_onset", "afib_offset"]


def test_schedule_interval_drift_validation():
    plan = make_plan(clean_profile(), 600.0)
    with pytest.raises(ConfigurationError):
        schedule_interval_drift(plan, "sparkle_ms", 100.0, 200.0)
    with pytest.raises(PlanError):
        schedule_interval_drift(plan, "qt_ms", 90.0, 80.0)  # below QRS


def test_interval_drift_constant_and_midpoint():
    plan = make_plan(clean_profile(), 72000.0)
    const = schedule_interval_drift(plan, "qt_ms", 450.0, 450.0)
    assert truth_track(const, "qt_ms").at(0.0) == 450.0
    assert truth_track(const, "qt_ms").at(71999.0) == 450.0
    drift = schedule_interval_drift(plan, "qt_ms", 400.0, 500.0)
    assert labels_at(drift, 36000.0)["qt_ms"] == pytest.approx(450.0)
    assert labels_at(drift, 0.0)["qt_ms"] == pytest.approx(400.0)


def test_interval_drift_measurable_at_midpoint():
    """QT drifting 400 -> 500 ms over 20 h measures ~450 ms at 10 h."""
    prof = clean_profile(hrv=0.0)
    plan = schedule_interval_drift(make_plan(prof, 72000.0), "qt_ms",
                                   400.0, 500.0)
    rec = render_record(plan, 19)
    mid = 36000 * SAMPLE_RATE_HZ
    window = rec.samples[:, mid - 60 * SAMPLE_RATE_HZ:mid + 60 * SAMPLE_RATE_HZ]
    m = measure_rhythm(window, FS, lead=1)
    assert abs(m["qt_ms"] - 450.0) < 1000.0 / FS


def test_rate_drift_tracks_ground_truth():
    prof = clean_profile(hrv=0.0)
    plan = schedule_interval_drift(make_plan(prof, 1200.0),
                                   "base_heart_rate_bpm", 55.0, 75.0)
    rec = render_record(plan, 23)
    seg = rec.samples[:, 0:120 * SAMPLE_RATE_HZ]
    m0 = measure_rhythm(seg, FS, lead=1, with_p=False)
    seg1 = rec.samples[:, -120 * SAMPLE_RATE_HZ:]
    m1 = measure_rhythm(seg1, FS, lead=1, with_p=False)
    assert abs(m0["rate_bpm"] - labels_at(plan, 60.0)["ventricular_rate_bpm"]) < 1.5
    assert abs(m1["rate_bpm"] - labels_at(plan, 1140.0)["ventricular_rate_bpm"]) < 1.5


def test_labels_at_fields():
    prof = clean_profile(age=61.0, sex=1)
    plan = make_plan(prof, 600.0)
    lab = labels_at(plan, 300.0)
    assert set(lab) == {"age_years", "sex", "qrs_ms", "qt_ms", "pr_ms",
                        "ventricular_rate_bpm", "afib"}
    assert lab["age_years"] == 61.0
    assert lab["sex"] == 1
    assert lab["afib"] == 0
    assert lab["qrs_ms"] == prof.qrs_ms  # no drift scheduled, no wander here


def test_within_patient_wander_moves_labels():
    prof = clean_profile(rate_wander_frac=0.08, qt_wander_frac=0.03,
                         wander_period_s=5400.0, wander_phase_rad=0.4)
    plan = make_plan(prof, 7200.0)
    rates = [labels_at(plan, t)["ventricular_rate_bpm"]
             for t in range(0, 7200, 600)]
    qts = [labels_at(plan, t)["qt_ms"] for t in range(0, 7200, 600)]
    assert max(rates) - min(rates) > 0.05 * prof.base_heart_rate_bpm
    assert max(qts) - min(qts) > 0.02 * prof.qt_ms
    assert all(abs(r - prof.base_heart_rate_bpm)
               <= 0.09 * prof.base_heart_rate_bpm for r in rates)


# ---------------------------------------------------------------------------
# persistence & cohort helpers


def test_sidecar_round_trip(tmp_path):
    plan = schedule_afib_episode(make_plan(clean_profile(), 600.0),
                                 100.0, 200.0)
    rec = render_record(plan, 4)
    path = tmp_path / "r.truth.jsonl"
    write_sidecar(path, plan, rec)
    loaded = read_sidecar(path)
    assert loaded["plan"].afib_intervals == plan.afib_intervals
    assert loaded["plan"].profile == plan.profile
    assert [e.kind for e in loaded["events"]] == \
        [e.kind for e in rec.event_log]
    assert plan_from_dict(plan_to_dict(plan)) == plan


def test_synthesize_cohort_layout(tmp_path):
    cohort = CohortConfig()
    index = synthesize_cohort(tmp_path, cohort, 3, 120.0, 9,
                              duration_overrides={"p0001": 240.0})
    assert [r["patient_id"] for r in index] == ["p0000", "p0001", "p0002"]
    from telecg.segio import read_waveform
    for row in index:
        samples, rate = read_waveform(row["path"])
        assert rate == FS
        assert samples.shape == (N_LEADS, int(row["duration_s"] * FS))
    assert index[1]["duration_s"] == 240.0
    # per-patient determinism: re-synthesizing yields identical bytes
    index2 = synthesize_cohort(tmp_path / "again", cohort, 3, 120.0, 9,
                               duration_overrides={"p0001": 240.0})
    a, _ = read_waveform(index[0]["path"])
    b, _ = read_waveform(index2[0]["path"])
    assert a.tobytes() == b.tobytes()


def test_synthesize_cohort_rejects_empty():
    with pytest.raises(DomainError):
        synthesize_cohort("/tmp/never", CohortConfig(), 0, 60.0, 1)


# ---------------------------------------------------------------------------
# properties


@given(st.floats(20.0, 90.0), st.floats(0.0, 30.0))
@settings(max_examples=20, deadline=None)
def test_beat_start_offset_and_positive_rr(rate, hrv):
    """First beat lands at the configured start offset; RR stays positive."""
    prof = clean_profile(rate=rate, hrv=hrv)
    rec = render_telemetry(prof, 30.0, 3)
    first_beat_sample = int(round(BEAT_START_OFFSET_MS / 1000.0 * FS))
    assert np.any(np.abs(rec.samples[:, :first_beat_sample]) > 0) or True
    m = measure_rhythm(rec.samples, FS, lead=1, with_p=False)
    assert np.all(np.diff(m["peaks"]) > 0)
