"""Synthetic multichannel ECG telemetry with per-sample ground truth.

Records are rendered as trains of Gaussian bumps (P, Q, R, S, T) on four
leads, plus controllable contamination (baseline wander, high-frequency
motion noise, dropouts, pacemaker spikes, ectopic beats). Every labelled
quantity is rendered literally:

- the QRS duration is the half-maximum width of the R bump,
- the PR interval runs from the P onset (half-maximum point) to the QRS
  onset, and the QT interval from the QRS onset to the T offset,
- ventricular rate fixes the nominal spacing of beat starts.

Half-maximum landmarks sit ``sqrt(2 ln 2)`` sigmas from each bump centre,
which is what lets an independent threshold/crossing detector recover the
labels from a clean render.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Iterable, Sequence

import numpy as np
import scipy.fft

from .errors import ConfigurationError, DomainError, PlanError
from .seeding import derive_rng

SAMPLE_RATE_HZ = 120
N_LEADS = 4
LEAD_NAMES = ("I", "II", "III", "V1")

NOISE_KINDS = ("wander", "motion", "dropout", "pacemaker", "pvc")

HALF_MAX_SIGMAS = math.sqrt(2.0 * math.log(2.0))  # ~1.1774

# Bump geometry constants (ms unless noted). Q/S are small subordinate dips
# inside the QRS span; they stay shallow so the half-maximum crossings of the
# R bump remain the outermost crossings of the composite complex.
P_SIGMA_MS = 22.0
T_SIGMA_FRAC = 0.13     # T-bump sigma as a fraction of the QT interval
QS_SIGMA_FRAC = 1 / 14  # Q/S sigma as a fraction of the QRS duration
QS_OFFSET_FRAC = 0.35   # Q/S centres sit at R centre -+ this fraction of QRS
QS_AMP_FRAC = -0.12     # Q/S amplitude relative to the R bump

BUMP_SUPPORT_SIGMAS = 5.0
BEAT_START_OFFSET_MS = 250.0
MIN_RR_FRACTION = 0.3

AFIB_JITTER_MULT = 5.0
AFIB_JITTER_FLOOR_MS = 40.0

PVC_QRS_WIDTH_MULT = 2.2
PVC_QRS_AMP_MULT = 1.8
PVC_T_AMP_MULT = -1.3

PACER_AMP_MV = 3.0
PACER_SHAPE = (0.4, 1.0, -0.25)
DROPOUT_DURATION_RANGE_S = (0.5, 3.0)

# Relative lead projection of each wave; lead 4 (V1-like) flips polarity.
LEAD_SHAPE = {
    "p": (1.0, 0.9, 0.75, 0.55),
    "qrs": (1.0, 1.15, 0.8, -0.65),
    "t": (1.0, 1.05, 0.85, -0.4),
}
SEX_T_SCALE = (0.78, 1.3)  # T amplitude multiplier keyed by the sex label


@dataclasses.dataclass(frozen=True)
class PatientProfile:
    """Morphology, rhythm, and contamination parameters for one patient."""

    patient_id: str
    age_years: float
    sex: int
    base_heart_rate_bpm: float
    pr_ms: float
    qrs_ms: float
    qt_ms: float
    hrv_std_ms: float
    amp_p: tuple[float, float, float, float]
    amp_qrs: tuple[float, float, float, float]
    amp_t: tuple[float, float, float, float]
    afib_flag: bool
    noise_levels: dict[str, float]
    rate_wander_frac: float = 0.0
    qt_wander_frac: float = 0.0
    wander_period_s: float = 7200.0
    wander_phase_rad: float = 0.0

    def __post_init__(self):
        if self.sex not in (0, 1):
            raise DomainError(f"sex must be 0 or 1, got {self.sex}")
        for name in ("base_heart_rate_bpm", "pr_ms", "qrs_ms", "qt_ms"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        if self.qrs_ms >= self.qt_ms:
            raise DomainError(
                f"qrs_ms ({self.qrs_ms}) must be shorter than qt_ms ({self.qt_ms})"
            )
        if self.hrv_std_ms < 0:
            raise DomainError("hrv_std_ms must be >= 0")
        unknown = set(self.noise_levels) - set(NOISE_KINDS)
        if unknown:
            raise DomainError(f"unknown noise kinds: {sorted(unknown)}")
        for kind, level in self.noise_levels.items():
            if level < 0:
                raise DomainError(f"noise level for {kind!r} must be >= 0")

    def noise(self, kind: str) -> float:
        return float(self.noise_levels.get(kind, 0.0))


def _check_range(name, rng_pair):
    lo, hi = rng_pair
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise ConfigurationError(f"invalid range for {name}: ({lo}, {hi})")


@dataclasses.dataclass(frozen=True)
class CohortConfig:
    """Value ranges that profile sampling draws from.

    ``age_qt_coupling`` / ``age_hrv_coupling`` set how strongly age positions
    QT (increasing) and heart-rate variability (decreasing) inside their
    ranges, so demographic labels stay recoverable from the waveform. QT is
    additionally shortened at fast rates by ``sqrt(min(RR, 1 s))``.
    """

    age_years: tuple[float, float] = (18.0, 90.0)
    base_heart_rate_bpm: tuple[float, float] = (45.0, 90.0)
    pr_ms: tuple[float, float] = (110.0, 200.0)
    qrs_ms: tuple[float, float] = (70.0, 135.0)
    qt_ms: tuple[float, float] = (340.0, 520.0)
    hrv_std_ms: tuple[float, float] = (8.0, 40.0)
    amp_p_mv: tuple[float, float] = (0.08, 0.22)
    amp_qrs_mv: tuple[float, float] = (0.7, 2.1)
    amp_t_mv: tuple[float, float] = (0.15, 0.5)
    sex_prevalence: float = 0.5
    afib_prevalence: float = 0.3
    age_qt_coupling: float = 0.8
    age_hrv_coupling: float = 0.7
    rate_wander_frac: tuple[float, float] = (0.04, 0.10)
    qt_wander_frac: tuple[float, float] = (0.015, 0.04)
    wander_period_s: tuple[float, float] = (5400.0, 14400.0)
    noise_wander_mv: tuple[float, float] = (0.05, 0.35)
    noise_motion_mv: tuple[float, float] = (0.02, 0.12)
    noise_dropout_per_hour: tuple[float, float] = (0.0, 1.5)
    noise_pacemaker_per_hour: tuple[float, float] = (0.0, 0.5)
    noise_pvc_per_hour: tuple[float, float] = (0.0, 2.0)

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                _check_range(f.name, v)
        for name in ("sex_prevalence", "afib_prevalence",
                     "age_qt_coupling", "age_hrv_coupling"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1], got {v}")
        for name in ("base_heart_rate_bpm", "pr_ms", "qrs_ms", "qt_ms"):
            if getattr(self, name)[0] <= 0:
                raise ConfigurationError(f"{name} range must be positive")
        if self.qt_ms[0] <= self.qrs_ms[1]:
            raise ConfigurationError(
                "qt_ms range must sit strictly above qrs_ms range"
            )


def _mix(rng, rng_pair, anchor, weight):
    """Draw from rng_pair, pulled toward `anchor` in [0,1] with `weight`."""
    lo, hi = rng_pair
    u = rng.uniform(0.0, 1.0)
    frac = min(max(weight * anchor + (1.0 - weight) * u, 0.0), 1.0)
    return lo + (hi - lo) * frac


def sample_profile(cohort: CohortConfig, rng_seed: int,
                   patient_id: str = "p0000") -> PatientProfile:
    """Draw one patient profile; identical (cohort, seed) gives identical output."""
    rng = derive_rng(rng_seed, "profile")
    age = rng.uniform(*cohort.age_years)
    lo, hi = cohort.age_years
    age_frac = (age - lo) / (hi - lo) if hi > lo else 0.5
    sex = int(rng.uniform() < cohort.sex_prevalence)
    rate = rng.uniform(*cohort.base_heart_rate_bpm)
    pr = rng.uniform(*cohort.pr_ms)
    qrs = rng.uniform(*cohort.qrs_ms)
    qt_base = _mix(rng, cohort.qt_ms, age_frac, cohort.age_qt_coupling)
    # rate correction keeps the T wave inside the beat at fast rates
    rr_s = 60.0 / rate
    qt = qt_base * math.sqrt(min(rr_s, 1.0))
    hrv = _mix(rng, cohort.hrv_std_ms, 1.0 - age_frac, cohort.age_hrv_coupling)

    base_p = rng.uniform(*cohort.amp_p_mv)
    base_qrs = rng.uniform(*cohort.amp_qrs_mv)
    base_t = rng.uniform(*cohort.amp_t_mv) * SEX_T_SCALE[sex]
    lead_jitter = rng.uniform(-1.0, 1.0, size=(3, N_LEADS))
    amp_p = tuple(base_p * LEAD_SHAPE["p"][i] * (1 + 0.08 * lead_jitter[0, i])
                  for i in range(N_LEADS))
    amp_qrs = tuple(base_qrs * LEAD_SHAPE["qrs"][i] * (1 + 0.08 * lead_jitter[1, i])
                    for i in range(N_LEADS))
    amp_t = tuple(base_t * LEAD_SHAPE["t"][i] * (1 + 0.08 * lead_jitter[2, i])
                  for i in range(N_LEADS))

    afib = bool(rng.uniform() < cohort.afib_prevalence)
    noise = {
        "wander": rng.uniform(*cohort.noise_wander_mv),
        "motion": rng.uniform(*cohort.noise_motion_mv),
        "dropout": rng.uniform(*cohort.noise_dropout_per_hour),
        "pacemaker": rng.uniform(*cohort.noise_pacemaker_per_hour),
        "pvc": rng.uniform(*cohort.noise_pvc_per_hour),
    }
    return PatientProfile(
        patient_id=patient_id,
        age_years=float(age),
        sex=sex,
        base_heart_rate_bpm=float(rate),
        pr_ms=float(pr),
        qrs_ms=float(qrs),
        qt_ms=float(qt),
        hrv_std_ms=float(hrv),
        amp_p=amp_p,
        amp_qrs=amp_qrs,
        amp_t=amp_t,
        afib_flag=afib,
        noise_levels=noise,
        rate_wander_frac=float(rng.uniform(*cohort.rate_wander_frac)),
        qt_wander_frac=float(rng.uniform(*cohort.qt_wander_frac)),
        wander_period_s=float(rng.uniform(*cohort.wander_period_s)),
        wander_phase_rad=float(rng.uniform(0.0, 2.0 * math.pi)),
    )


# ---------------------------------------------------------------------------
# record plans


@dataclasses.dataclass(frozen=True)
class Track:
    """Piecewise-linear parameter track; constant extrapolation at the ends."""

    times_s: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.times_s) != len(self.values) or not self.times_s:
            raise DomainError("track needs equal, non-empty knot arrays")
        if any(b <= a for a, b in zip(self.times_s, self.times_s[1:])):
            raise DomainError("track knot times must be strictly increasing")

    def at(self, t):
        return np.interp(t, self.times_s, self.values)

    @staticmethod
    def constant(value: float, duration_s: float) -> "Track":
        return Track((0.0, float(duration_s)), (float(value), float(value)))


@dataclasses.dataclass(frozen=True)
class RecordPlan:
    """Everything needed to render one record, before any randomness."""

    profile: PatientProfile
    duration_s: float
    rate_track: Track
    pr_track: Track
    qrs_track: Track
    qt_track: Track
    afib_intervals: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.duration_s <= 0:
            raise DomainError("duration_s must be positive")
        prev = 0.0
        for on, off in self.afib_intervals:
            if not (0.0 <= on < off <= self.duration_s):
                raise PlanError(f"bad afib interval ({on}, {off})")
            if on < prev:
                raise PlanError("afib intervals must be sorted and disjoint")
            prev = off


TRACK_FIELDS = ("base_heart_rate_bpm", "pr_ms", "qrs_ms", "qt_ms")


def _wander_track(base: float, frac: float, period_s: float, phase: float,
                  duration_s: float, knot_step_s: float = 60.0) -> Track:
    if frac <= 0.0:
        return Track.constant(base, duration_s)
    ts = np.arange(0.0, duration_s + knot_step_s, knot_step_s)
    ts[-1] = max(ts[-1], duration_s)
    vs = base * (1.0 + frac * np.sin(2.0 * math.pi * ts / period_s + phase))
    return Track(tuple(float(t) for t in ts), tuple(float(v) for v in vs))


def make_plan(profile: PatientProfile, duration_s: float) -> RecordPlan:
    """Default plan: slow within-record wander on rate and QT, constant PR/QRS."""
    if duration_s <= 0:
        raise DomainError("duration_s must be positive")
    rate_track = _wander_track(profile.base_heart_rate_bpm, profile.rate_wander_frac,
                               profile.wander_period_s, profile.wander_phase_rad,
                               duration_s)
    qt_track = _wander_track(profile.qt_ms, profile.qt_wander_frac,
                             profile.wander_period_s, profile.wander_phase_rad + 2.1,
                             duration_s)
    afib = ((0.0, float(duration_s)),) if profile.afib_flag else ()
    return RecordPlan(
        profile=profile,
        duration_s=float(duration_s),
        rate_track=rate_track,
        pr_track=Track.constant(profile.pr_ms, duration_s),
        qrs_track=Track.constant(profile.qrs_ms, duration_s),
        qt_track=qt_track,
        afib_intervals=afib,
    )


def schedule_afib_episode(plan: RecordPlan, onset_s: float, offset_s: float,
                          reversions: Sequence[tuple[float, float]] = ()) -> RecordPlan:
    """Add one Afib episode, optionally punctured by sinus reversions."""
    if not (0.0 <= onset_s < offset_s <= plan.duration_s):
        raise PlanError(f"episode ({onset_s}, {offset_s}) outside record")
    for a, b in plan.afib_intervals:
        if onset_s < b and a < offset_s:
            raise PlanError("episode overlaps an existing afib interval")
    pieces = [(onset_s, offset_s)]
    prev_end = onset_s
    for r0, r1 in reversions:
        if not (onset_s <= r0 < r1 <= offset_s) or r0 < prev_end:
            raise PlanError(f"bad reversion ({r0}, {r1})")
        last_on, _ = pieces.pop()
        if last_on < r0:
            pieces.append((last_on, r0))
        pieces.append((r1, offset_s))
        prev_end = r1
    pieces = [(a, b) for a, b in pieces if a < b]
    merged = tuple(sorted(plan.afib_intervals + tuple(pieces)))
    return dataclasses.replace(plan, afib_intervals=merged)


def schedule_interval_drift(plan: RecordPlan, field: str,
                            start_value: float, end_value: float) -> RecordPlan:
    """Replace one parameter track with a record-long linear ramp."""
    if field not in ("base_heart_rate_bpm", "pr_ms", "qt_ms"):
        raise ConfigurationError(f"unknown drift field {field!r}")
    if start_value <= 0 or end_value <= 0:
        raise PlanError("drift values must be positive")
    if field == "qt_ms" and min(start_value, end_value) <= plan.profile.qrs_ms:
        raise PlanError("QT drift must stay above the QRS duration")
    track = Track((0.0, plan.duration_s), (float(start_value), float(end_value)))
    attr = {"base_heart_rate_bpm": "rate_track", "pr_ms": "pr_track",
            "qt_ms": "qt_track"}[field]
    return dataclasses.replace(plan, **{attr: track})


def truth_track(plan: RecordPlan, field: str) -> Track:
    if field not in TRACK_FIELDS:
        raise ConfigurationError(f"unknown track field {field!r}")
    attr = {"base_heart_rate_bpm": "rate_track", "pr_ms": "pr_track",
            "qrs_ms": "qrs_track", "qt_ms": "qt_track"}[field]
    return getattr(plan, attr)


def labels_at(plan: RecordPlan, time_s: float) -> dict:
    """Ground-truth labels for a moment of the record."""
    p = plan.profile
    in_afib = any(a <= time_s < b for a, b in plan.afib_intervals)
    return {
        "age_years": p.age_years,
        "sex": p.sex,
        "qrs_ms": float(plan.qrs_track.at(time_s)),
        "qt_ms": float(plan.qt_track.at(time_s)),
        "pr_ms": float(plan.pr_track.at(time_s)),
        "ventricular_rate_bpm": float(plan.rate_track.at(time_s)),
        "afib": int(in_afib),
    }


# ---------------------------------------------------------------------------
# rendering


@dataclasses.dataclass(frozen=True)
class Event:
    time_s: float
    kind: str
    duration_s: float = 0.0


@dataclasses.dataclass(frozen=True)
class WaveformRecord:
    record_id: str
    patient_id: str
    samples: np.ndarray  # (N_LEADS, n) float32, millivolts
    sample_rate_hz: float = float(SAMPLE_RATE_HZ)
    event_log: tuple[Event, ...] = ()

    @property
    def duration_s(self) -> float:
        return self.samples.shape[1] / self.sample_rate_hz


def _beat_bumps(pr, qrs, qt):
    """(centre_ms, sigma_ms, relative_amp, wave) for the five bumps of one beat.

    Offsets are from the beat start (= P onset). ``relative_amp`` multiplies
    the per-lead wave amplitude.
    """
    sigma_r = qrs / (2.0 * HALF_MAX_SIGMAS)
    r_centre = pr + qrs / 2.0
    sigma_t = T_SIGMA_FRAC * qt
    return (
        (HALF_MAX_SIGMAS * P_SIGMA_MS, P_SIGMA_MS, 1.0, "p"),
        (r_centre - QS_OFFSET_FRAC * qrs, QS_SIGMA_FRAC * qrs, QS_AMP_FRAC, "qrs"),
        (r_centre, sigma_r, 1.0, "qrs"),
        (r_centre + QS_OFFSET_FRAC * qrs, QS_SIGMA_FRAC * qrs, QS_AMP_FRAC, "qrs"),
        (pr + qt - HALF_MAX_SIGMAS * sigma_t, sigma_t, 1.0, "t"),
    )


def render_beat(profile: PatientProfile, lead: int, phase_ms: float) -> float:
    """Evaluate one sinus beat of this profile at a phase within the RR interval."""
    if not 0 <= lead < N_LEADS:
        raise DomainError(f"lead must be in [0, {N_LEADS}), got {lead}")
    rr_ms = 60000.0 / profile.base_heart_rate_bpm
    if not 0.0 <= phase_ms < rr_ms:
        raise DomainError(f"phase_ms {phase_ms} outside [0, {rr_ms})")
    amps = {"p": profile.amp_p[lead], "qrs": profile.amp_qrs[lead],
            "t": profile.amp_t[lead]}
    total = 0.0
    for centre, sigma, rel, wave in _beat_bumps(profile.pr_ms, profile.qrs_ms,
                                                profile.qt_ms):
        z = (phase_ms - centre) / sigma
        total += amps[wave] * rel * math.exp(-0.5 * z * z)
    return float(total)


def _in_intervals(t_s, intervals):
    for a, b in intervals:
        if a <= t_s < b:
            return True
    return False


def _merge_spans(spans):
    out = []
    for a, b in sorted(spans):
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def _accumulate_bumps(sig, centres_ms, sigmas_ms, beat_amp, lead_amps,
                      chunk=16384):
    """Add Gaussian bumps to a (N_LEADS, n) float64 signal in place."""
    n = sig.shape[1]
    fs = SAMPLE_RATE_HZ
    live = np.abs(beat_amp) > 0
    if not live.any() or all(a == 0.0 for a in lead_amps):
        return
    centres_ms = centres_ms[live]
    sigmas_ms = sigmas_ms[live]
    beat_amp = beat_amp[live]
    radius = int(math.ceil(BUMP_SUPPORT_SIGMAS * float(sigmas_ms.max()) * fs / 1000.0))
    offs = np.arange(-radius, radius + 1)
    for lo in range(0, len(centres_ms), chunk):
        c = centres_ms[lo:lo + chunk]
        s = sigmas_ms[lo:lo + chunk]
        a = beat_amp[lo:lo + chunk]
        idx = np.round(c * fs / 1000.0).astype(np.int64)[:, None] + offs[None, :]
        t_ms = idx * (1000.0 / fs)
        g = a[:, None] * np.exp(-0.5 * ((t_ms - c[:, None]) / s[:, None]) ** 2)
        valid = (idx >= 0) & (idx < n)
        flat_idx = idx[valid]
        flat_g = g[valid]
        for lead in range(N_LEADS):
            if lead_amps[lead] != 0.0:
                np.add.at(sig[lead], flat_idx, flat_g * lead_amps[lead])


def _beat_schedule(plan: RecordPlan, rng) -> tuple[np.ndarray, np.ndarray]:
    """Beat start times (ms) and their afib membership."""
    duration_ms = plan.duration_s * 1000.0
    starts = []
    afib = []
    t_ms = BEAT_START_OFFSET_MS
    hrv = plan.profile.hrv_std_ms
    afib_jitter = max(AFIB_JITTER_MULT * hrv, AFIB_JITTER_FLOOR_MS)
    while t_ms < duration_ms:
        starts.append(t_ms)
        in_af = _in_intervals(t_ms / 1000.0, plan.afib_intervals)
        afib.append(in_af)
        rate = float(plan.rate_track.at(t_ms / 1000.0))
        rr_nom = 60000.0 / rate
        std = afib_jitter if in_af else hrv
        rr = rr_nom + std * rng.standard_normal()
        t_ms += max(rr, MIN_RR_FRACTION * rr_nom)
    return np.asarray(starts), np.asarray(afib, dtype=bool)


def render_record(plan: RecordPlan, rng_seed: int,
                  record_id: str | None = None) -> WaveformRecord:
    """Render a plan to samples; bit-identical for identical (plan, seed)."""
    rng = derive_rng(rng_seed, "render")
    profile = plan.profile
    fs = SAMPLE_RATE_HZ
    n = int(round(plan.duration_s * fs))
    duration_h = plan.duration_s / 3600.0
    sig = np.zeros((N_LEADS, n), dtype=np.float64)
    events: list[Event] = []

    starts_ms, beat_afib = _beat_schedule(plan, rng)
    nb = len(starts_ms)

    n_pvc = rng.poisson(profile.noise("pvc") * duration_h) if nb else 0
    pvc_idx = rng.choice(nb, size=min(n_pvc, nb), replace=False) if n_pvc else np.array([], dtype=int)
    pvc = np.zeros(nb, dtype=bool)
    pvc[pvc_idx] = True

    n_pacer = rng.poisson(profile.noise("pacemaker") * duration_h)
    pacer_times = np.sort(rng.uniform(0.0, plan.duration_s, n_pacer))

    n_drop = rng.poisson(profile.noise("dropout") * duration_h)
    drop_starts = rng.uniform(0.0, plan.duration_s, n_drop)
    drop_durs = rng.uniform(*DROPOUT_DURATION_RANGE_S, size=n_drop)
    gaps = _merge_spans(
        (s, min(s + d, plan.duration_s)) for s, d in zip(drop_starts, drop_durs)
    )

    if nb:
        t_beats_s = starts_ms / 1000.0
        pr = np.asarray(plan.pr_track.at(t_beats_s), dtype=np.float64)
        qrs = np.asarray(plan.qrs_track.at(t_beats_s), dtype=np.float64)
        qt = np.asarray(plan.qt_track.at(t_beats_s), dtype=np.float64)
        qrs_eff = np.where(pvc, PVC_QRS_WIDTH_MULT * qrs, qrs)
        p_scale = np.where(beat_afib | pvc, 0.0, 1.0)
        qrs_scale = np.where(pvc, PVC_QRS_AMP_MULT, 1.0)
        t_scale = np.where(pvc, PVC_T_AMP_MULT, 1.0)

        sigma_r = qrs_eff / (2.0 * HALF_MAX_SIGMAS)
        r_centre = starts_ms + pr + qrs_eff / 2.0
        sigma_t = T_SIGMA_FRAC * qt
        sigma_qs = QS_SIGMA_FRAC * qrs_eff
        half_t = HALF_MAX_SIGMAS * sigma_t

        bump_sets = (
            (starts_ms + HALF_MAX_SIGMAS * P_SIGMA_MS,
             np.full(nb, P_SIGMA_MS), p_scale, profile.amp_p),
            (r_centre - QS_OFFSET_FRAC * qrs_eff, sigma_qs,
             QS_AMP_FRAC * qrs_scale, profile.amp_qrs),
            (r_centre, sigma_r, qrs_scale, profile.amp_qrs),
            (r_centre + QS_OFFSET_FRAC * qrs_eff, sigma_qs,
             QS_AMP_FRAC * qrs_scale, profile.amp_qrs),
            (starts_ms + pr + qt - half_t, sigma_t, t_scale, profile.amp_t),
        )
        for centres, sigmas, amps, lead_amps in bump_sets:
            _accumulate_bumps(sig, centres, sigmas, amps, lead_amps)

    wander_amp = profile.noise("wander")
    wander_freq = rng.uniform(0.08, 0.45)
    wander_phases = rng.uniform(0.0, 2.0 * math.pi, N_LEADS)
    if wander_amp > 0.0 and n:
        t_s = np.arange(n, dtype=np.float64) / fs
        for lead in range(N_LEADS):
            sig[lead] += wander_amp * np.sin(
                2.0 * math.pi * wander_freq * t_s + wander_phases[lead])
        del t_s

    motion_rms = profile.noise("motion")
    if motion_rms > 0.0 and n:
        freqs = scipy.fft.rfftfreq(n, d=1.0 / fs)
        keep = freqs > 40.0
        for lead in range(N_LEADS):
            white = rng.standard_normal(n)
            spec = scipy.fft.rfft(white)
            spec[~keep] = 0.0
            band = scipy.fft.irfft(spec, n)
            rms = math.sqrt(float(np.mean(band * band)))
            if rms > 0.0:
                sig[lead] += band * (motion_rms / rms)

    for t_sp in pacer_times:
        i0 = int(round(t_sp * fs))
        for j, shape in enumerate(PACER_SHAPE):
            if 0 <= i0 + j < n:
                sig[:, i0 + j] += PACER_AMP_MV * shape
        events.append(Event(float(t_sp), "pacemaker"))

    for a, b in gaps:
        i0, i1 = int(round(a * fs)), int(round(b * fs))
        sig[:, max(i0, 0):min(i1, n)] = 0.0
        events.append(Event(float(a), "dropout", float(b - a)))

    for i in pvc_idx:
        events.append(Event(float(starts_ms[i] / 1000.0), "pvc"))
    for a, b in plan.afib_intervals:
        events.append(Event(float(a), "afib_onset"))
        events.append(Event(float(b), "afib_offset"))

    events.sort(key=lambda e: (e.time_s, e.kind))
    rid = record_id if record_id is not None else f"{profile.patient_id}-r0"
    return WaveformRecord(
        record_id=rid,
        patient_id=profile.patient_id,
        samples=sig.astype(np.float32),
        sample_rate_hz=float(fs),
        event_log=tuple(events),
    )


def render_telemetry(profile: PatientProfile, duration_s: float,
                     rng_seed: int) -> WaveformRecord:
    """Render a record under the profile's default plan."""
    return render_record(make_plan(profile, duration_s), rng_seed)


# ---------------------------------------------------------------------------
# ground-truth sidecars


def profile_to_dict(profile: PatientProfile) -> dict:
    d = dataclasses.asdict(profile)
    d["amp_p"] = list(profile.amp_p)
    d["amp_qrs"] = list(profile.amp_qrs)
    d["amp_t"] = list(profile.amp_t)
    return d


def profile_from_dict(d: dict) -> PatientProfile:
    d = dict(d)
    for key in ("amp_p", "amp_qrs", "amp_t"):
        d[key] = tuple(d[key])
    return PatientProfile(**d)


def plan_to_dict(plan: RecordPlan) -> dict:
    return {
        "profile": profile_to_dict(plan.profile),
        "duration_s": plan.duration_s,
        "tracks": {
            field: {"times_s": list(truth_track(plan, field).times_s),
                    "values": list(truth_track(plan, field).values)}
            for field in TRACK_FIELDS
        },
        "afib_intervals": [list(iv) for iv in plan.afib_intervals],
    }


def plan_from_dict(d: dict) -> RecordPlan:
    tracks = {
        field: Track(tuple(d["tracks"][field]["times_s"]),
                     tuple(d["tracks"][field]["values"]))
        for field in TRACK_FIELDS
    }
    return RecordPlan(
        profile=profile_from_dict(d["profile"]),
        duration_s=float(d["duration_s"]),
        rate_track=tracks["base_heart_rate_bpm"],
        pr_track=tracks["pr_ms"],
        qrs_track=tracks["qrs_ms"],
        qt_track=tracks["qt_ms"],
        afib_intervals=tuple((float(a), float(b)) for a, b in d["afib_intervals"]),
    )


def write_sidecar(path, plan: RecordPlan, record: WaveformRecord) -> None:
    """Line-delimited JSON: one truth line, then one line per logged event."""
    with open(path, "w", encoding="utf-8") as fh:
        truth = {"kind": "truth", "record_id": record.record_id}
        truth.update(plan_to_dict(plan))
        fh.write(json.dumps(truth) + "\n")
        for ev in record.event_log:
            fh.write(json.dumps({"kind": "event", "time_s": ev.time_s,
                                 "event": ev.kind,
                                 "duration_s": ev.duration_s}) + "\n")


def synthesize_cohort(out_dir, cohort: CohortConfig, n_patients: int,
                      duration_s: float, seed: int,
                      duration_overrides: dict[str, float] | None = None) -> list[dict]:
    """Sample profiles and render one record per patient to out_dir/records.

    duration_overrides maps patient ids (p0000, p0001, ...) to per-patient
    record lengths in seconds. Returns the index rows, which are also written
    to out_dir/records_index.jsonl.
    """
    from pathlib import Path

    from .segio import write_jsonl, write_waveform

    if n_patients < 1:
        raise DomainError("n_patients must be >= 1")
    overrides = duration_overrides or {}
    rec_dir = Path(out_dir) / "records"
    rec_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for i in range(n_patients):
        pid = f"p{i:04d}"
        profile = sample_profile(cohort, _cohort_seed(seed, i), pid)
        dur = float(overrides.get(pid, duration_s))
        plan = make_plan(profile, dur)
        record = render_record(plan, _cohort_seed(seed, i, render=True),
                               record_id=f"{pid}-r0")
        rec_path = rec_dir / f"{record.record_id}.ecgt"
        side_path = rec_dir / f"{record.record_id}.truth.jsonl"
        write_waveform(rec_path, record.samples, record.sample_rate_hz)
        write_sidecar(side_path, plan, record)
        index.append({
            "record_id": record.record_id,
            "patient_id": pid,
            "path": str(rec_path),
            "sidecar": str(side_path),
            "duration_s": dur,
        })
    write_jsonl(Path(out_dir) / "records_index.jsonl", index)
    return index


def _cohort_seed(seed: int, i: int, render: bool = False) -> int:
    from .seeding import derive_int

    return derive_int(seed, "record" if render else "patient", i)


def read_sidecar(path) -> dict:
    """Return {"plan": RecordPlan, "events": [Event, ...]}."""
    plan = None
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if d["kind"] == "truth":
                plan = plan_from_dict(d)
            elif d["kind"] == "event":
                events.append(Event(d["time_s"], d["event"], d.get("duration_s", 0.0)))
    if plan is None:
        raise DomainError(f"sidecar {path} has no truth line")
    return {"plan": plan, "events": events}
