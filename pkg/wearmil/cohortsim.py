"""
Synthetic wearable cohort with a planted latent stress variable.

Each patient's latent stress in [0,1] raises mean heart rate, lowers RR
variability, flattens the weekly activity pattern, fragments sleep, and
drives both PSS assessments.
"""
import math
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta

import numpy as np

from .bags import Assessment
from .ecg_transforms import EcgRecording
from .utils.config_utils import DEFAULT_ECG_FS, SimulateConfig
from .utils.seed_utils import derive_seed, rng_for
from .weekly_views import DailyActivityRecord, SleepEpoch, SleepEpochSeries, SleepNightRecord

# --- Planted HRV link ---
HR_BASE_BPM = 60.0
HR_STRESS_GAIN_BPM = 30.0
SDNN_BASE_MS = 80.0
SDNN_STRESS_GAIN_MS = 60.0
RR_AR_COEF = 0.5
FIRST_BEAT_S = 0.4
TAIL_MARGIN_S = 0.6
ECG_NOISE_MV = 0.02
WANDER_MV = 0.05
WANDER_HZ = 0.25

# (offset from R in s, amplitude in mV, gaussian width in s)
PQRST_TEMPLATE = (
    (-0.200, 0.15, 0.025),
    (-0.035, -0.12, 0.010),
    (0.000, 1.20, 0.012),
    (0.035, -0.25, 0.010),
    (0.280, 0.35, 0.045),
)
TEMPLATE_HALF_S = 0.5

PSS_MAX = 40
PSS_GRID = PSS_MAX + 1
ECG_SESSION_HOUR = 9
SLEEP_ONSET_HOUR = 23


@dataclass
class LatentProfile:
    patient_id: str
    latent_stress: float
    baseline_date: date
    adherence: float

    def __post_init__(self):
        if not 0.0 <= self.latent_stress <= 1.0:
            raise ValueError(f"latent_stress must lie in [0,1], got {self.latent_stress}")
        if not 0.0 <= self.adherence <= 1.0:
            raise ValueError(f"adherence must lie in [0,1], got {self.adherence}")


@dataclass
class EcgSession:
    """A planned ECG recording; samples are synthesized on demand."""
    patient_id: str
    start_time: datetime
    duration_s: float
    fs: float
    latent_stress: float
    seed: int

    def recording(self):
        samples = synthesize_ecg(self.latent_stress, self.duration_s, self.fs, self.seed)
        return EcgRecording(self.patient_id, self.start_time, self.fs, samples)

    def planted_peaks(self):
        """Ground-truth R-peak times in seconds from the session start."""
        _, peaks = synthesize_ecg_with_peaks(self.latent_stress, self.duration_s, self.fs, self.seed)
        return peaks


@dataclass
class SyntheticCohort:
    profiles: list
    daily_activity: dict = field(default_factory=dict)
    sleep_nights: dict = field(default_factory=dict)
    sleep_epochs: dict = field(default_factory=dict)
    ecg_sessions: dict = field(default_factory=dict)
    pss: dict = field(default_factory=dict)
    assessment_dates: dict = field(default_factory=dict)

    def patient_ids(self):
        return [p.patient_id for p in self.profiles]

    def profile(self, patient_id):
        for p in self.profiles:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)

    def assessments(self):
        """One Assessment per patient and horizon with a recorded PSS."""
        out = []
        for pid in self.patient_ids():
            for horizon in ("M3", "M6"):
                score = self.pss.get(pid, {}).get(horizon)
                if score is not None:
                    out.append(Assessment(pid, horizon, self.assessment_dates[pid][horizon], score))
        return out


# --- PSS ---

def assign_pss(latent_stress, noise_sd, seed):
    """PSS = round(clamp(40*latent + N(0, noise_sd), 0, 40))."""
    if noise_sd < 0:
        raise ValueError(f"noise_sd must be non-negative, got {noise_sd}")
    noise = 0.0
    if noise_sd > 0:
        noise = float(rng_for(seed, "pss").normal(0.0, noise_sd))
    value = min(float(PSS_MAX), max(0.0, PSS_MAX * latent_stress + noise))
    return int(round(value))


def draw_latent_stress(n, rng):
    """
    Stratified uniform draw of latent stress in [0,1].

    This is not an iid Uniform(0,1) draw. Each patient takes a distinct cell
    j/40 of the PSS grid (cycling once more than 41 patients are drawn) plus
    uniform jitter inside the cell. The marginal is still close to uniform,
    and noise-free scores are distinct and rank-identical to latent stress
    for up to 41 patients, which an iid draw does not guarantee.
    """
    cells = np.concatenate([rng.permutation(PSS_GRID) for _ in range(n // PSS_GRID + 1)])[:n]
    half = 0.5 / PSS_MAX
    jitter = rng.uniform(-half, half, size=n)
    latent = cells / PSS_MAX + jitter
    # reflect the end cells back inside [0,1]
    latent = np.where(latent < 0, -latent, latent)
    latent = np.where(latent > 1, 2.0 - latent, latent)
    return latent


# --- ECG ---

def planted_rr(latent_stress, duration_s, seed=0, mean_rr_ms=None, sdnn_ms=None):
    """
    RR intervals (ms) fitting inside `duration_s` with exactly the planted SDNN.

    Mean heart rate is 60 + 30*latent bpm and SDNN is 80 - 60*latent ms unless
    overridden. Innovations follow an AR(1) process drawn from the seed and
    are standardized, so the population std of the returned series equals
    the planted SDNN.
    """
    if mean_rr_ms is None:
        mean_rr_ms = 60000.0 / (HR_BASE_BPM + HR_STRESS_GAIN_BPM * latent_stress)
    if sdnn_ms is None:
        sdnn_ms = SDNN_BASE_MS - SDNN_STRESS_GAIN_MS * latent_stress
    usable_ms = (duration_s - FIRST_BEAT_S - TAIL_MARGIN_S) * 1000.0
    n = max(0, int(usable_ms // mean_rr_ms))
    if n < 2 or sdnn_ms == 0:
        return np.full(n, mean_rr_ms)
    eps = rng_for(seed, "rr").standard_normal(n)
    z = np.empty(n)
    z[0] = eps[0]
    for i in range(1, n):
        z[i] = RR_AR_COEF * z[i - 1] + eps[i]
    z = (z - z.mean()) / z.std()
    return mean_rr_ms + sdnn_ms * z


def ecg_from_rr(rr_ms, duration_s, fs=DEFAULT_ECG_FS, seed=0, first_beat_s=FIRST_BEAT_S, noise_mv=ECG_NOISE_MV):
    """
    Places the PQRST template at every beat and adds baseline wander and noise.

    Returns:
        tuple: (samples in mV, R-peak times in seconds)
    """
    n_samples = int(round(duration_s * fs))
    t = np.arange(n_samples) / fs
    peaks = first_beat_s + np.concatenate(([0.0], np.cumsum(np.asarray(rr_ms, dtype=np.float64)) / 1000.0))
    peaks = peaks[peaks < duration_s]
    offsets = np.array([w[0] for w in PQRST_TEMPLATE])
    amps = np.array([w[1] for w in PQRST_TEMPLATE])
    widths = np.array([w[2] for w in PQRST_TEMPLATE])
    half = int(math.ceil(TEMPLATE_HALF_S * fs))
    x = np.zeros(n_samples)
    for tp in peaks:
        center = int(round(tp * fs))
        lo, hi = max(0, center - half), min(n_samples, center + half + 1)
        dt = t[lo:hi, None] - tp - offsets[None, :]
        x[lo:hi] += (amps * np.exp(-0.5 * (dt / widths) ** 2)).sum(axis=1)
    rng = rng_for(seed, "ecg_noise")
    phase = rng.uniform(0.0, 2.0 * np.pi)
    x += WANDER_MV * np.sin(2.0 * np.pi * WANDER_HZ * t + phase)
    x += rng.normal(0.0, noise_mv, n_samples)
    return x, peaks


def synthesize_ecg_with_peaks(latent_stress, duration_s, fs=DEFAULT_ECG_FS, seed=0):
    if duration_s <= 0:
        raise ValueError(f"duration_s must be positive, got {duration_s}")
    if fs <= 0:
        raise ValueError(f"fs must be positive, got {fs}")
    if not 0.0 <= latent_stress <= 1.0:
        raise ValueError(f"latent_stress must lie in [0,1], got {latent_stress}")
    rr = planted_rr(latent_stress, duration_s, seed)
    return ecg_from_rr(rr, duration_s, fs, seed)


def synthesize_ecg(latent_stress, duration_s, fs=DEFAULT_ECG_FS, seed=0):
    """Synthetic ECG of round(duration_s*fs) samples whose HR rises and SDNN falls with latent stress."""
    samples, _ = synthesize_ecg_with_peaks(latent_stress, duration_s, fs, seed)
    return samples


# --- Smartwatch records ---

def _daily_activity(profile, day, rng):
    """Five daily summaries; the weekend contrast shrinks as stress grows."""
    level = profile.latent_stress
    weekend = 1.0 if day.weekday() >= 5 else 0.0
    contrast = 0.35 * (1.0 - level)
    steps = (9000.0 - 4000.0 * level) * (1.0 + contrast * weekend) + rng.normal(0, 900)
    active = (60.0 - 30.0 * level) * (1.0 + contrast * weekend) + rng.normal(0, 8)
    sedentary = (600.0 + 200.0 * level) * (1.0 - 0.5 * contrast * weekend) + rng.normal(0, 45)
    floors = (10.0 - 5.0 * level) * (1.0 + contrast * weekend) + rng.normal(0, 2)
    calories = 2300.0 - 300.0 * level + 6.0 * active + rng.normal(0, 120)
    return {
        "steps": max(0.0, round(steps)),
        "active_minutes": max(0.0, round(active)),
        "sedentary_minutes": max(0.0, round(sedentary)),
        "floors": max(0.0, round(floors)),
        "calories": max(0.0, round(calories)),
    }


def _night_epochs(profile, night, rng):
    """Stage bouts for one night: ~90 min cycles, less deep sleep and more awakenings under stress."""
    level = profile.latent_stress
    onset = datetime.combine(night, time(SLEEP_ONSET_HOUR)) + timedelta(minutes=float(rng.normal(0, 25)))
    target_s = max(3.0, rng.normal(7.5 - 1.5 * level, 0.5)) * 3600.0
    bouts = []
    if rng.random() < 0.2:
        bouts.append(("unmeasurable", rng.uniform(2, 15) * 60.0))
    elapsed = sum(d for _, d in bouts)
    cycle = 0
    while elapsed < target_s:
        length = max(45.0, rng.normal(90, 10)) * 60.0
        deep = length * max(0.04, (0.30 - 0.20 * level) * max(0.2, 1.0 - 0.3 * cycle))
        rem = length * min(0.35, 0.15 + 0.05 * cycle) * (1.0 - 0.3 * level)
        light = max(60.0, length - deep - rem)
        bouts.extend([("light", 0.4 * light), ("deep", deep), ("light", 0.6 * light), ("rem", rem)])
        if rng.random() < 0.1 + 0.5 * level:
            bouts.append(("awake", rng.uniform(2, 10) * 60.0))
        elapsed = sum(d for _, d in bouts)
        cycle += 1
    epochs = []
    start = onset
    remaining = target_s
    for stage, duration in bouts:
        duration = min(duration, remaining)
        if duration <= 0:
            break
        # whole seconds keep the written timestamps exact
        end = start + timedelta(seconds=int(round(duration)))
        if end > start:
            epochs.append(SleepEpoch(start, end, stage))
        start = end
        remaining -= duration
    return epochs


def _night_summary(patient_id, night, epochs):
    totals = {stage: 0.0 for stage in ("unmeasurable", "deep", "light", "rem", "awake")}
    for epoch in epochs:
        totals[epoch.stage] += (epoch.end - epoch.start).total_seconds()
    sleep_s = totals["unmeasurable"] + totals["deep"] + totals["light"] + totals["rem"]
    return SleepNightRecord(
        patient_id=patient_id,
        date=night,
        sleep_s=sleep_s,
        unmeasurable_s=totals["unmeasurable"],
        deep_s=totals["deep"],
        light_s=totals["light"],
        rem_s=totals["rem"],
    )


def _adherence_for(pid, default, adherence):
    if adherence is None:
        return default
    if isinstance(adherence, dict):
        return adherence.get(pid, default)
    return float(adherence)


def generate_cohort(n_patients, weeks, seed, cfg=None, adherence=None, verbose=False):
    """
    Generates a deterministic synthetic cohort.

    Args:
        n_patients (int): Number of patients, >= 2.
        weeks (int): Follow-up length in weeks, >= 4.
        seed (int): Run seed; every draw is derived from it.
        cfg (SimulateConfig): Noise, adherence range, ECG cadence, assessment days.
        adherence (float or dict): Overrides the drawn adherence for every
            patient (float) or per patient id (dict).
        verbose (bool): Print one line per patient.

    Returns:
        SyntheticCohort: ECG sessions are lazy; call `.recording()` to synthesize.
    """
    cfg = cfg or SimulateConfig()
    if n_patients < 2:
        raise ValueError(f"n_patients must be >= 2, got {n_patients}")
    if weeks < 4:
        raise ValueError(f"weeks must be >= 4, got {weeks}")
    start = date.fromisoformat(cfg.start_date)
    rng = rng_for(seed, "cohort")
    latent = draw_latent_stress(n_patients, rng)
    drawn_adherence = rng.uniform(cfg.adherence_min, cfg.adherence_max, size=n_patients)
    offsets = rng.integers(0, 7, size=n_patients)

    cohort = SyntheticCohort(profiles=[])
    n_days = weeks * 7
    for i in range(n_patients):
        pid = f"P{i + 1:03d}"
        profile = LatentProfile(
            patient_id=pid,
            latent_stress=float(latent[i]),
            baseline_date=start + timedelta(days=int(offsets[i])),
            adherence=_adherence_for(pid, float(drawn_adherence[i]), adherence),
        )
        cohort.profiles.append(profile)

        activity_rng = rng_for(seed, "activity", pid)
        sleep_rng = rng_for(seed, "sleep", pid)
        keep_activity = rng_for(seed, "missing", pid, "activity").random(n_days) < profile.adherence
        keep_sleep = rng_for(seed, "missing", pid, "sleep").random(n_days) < profile.adherence
        activity, nights, epochs = [], [], []
        for d in range(n_days):
            day = profile.baseline_date + timedelta(days=d)
            features = _daily_activity(profile, day, activity_rng)
            if keep_activity[d]:
                activity.append(DailyActivityRecord(pid, day, features))
            night_epochs = _night_epochs(profile, day, sleep_rng)
            if keep_sleep[d]:
                nights.append(_night_summary(pid, day, night_epochs))
                epochs.append(SleepEpochSeries(pid, day, night_epochs))
        cohort.daily_activity[pid] = activity
        cohort.sleep_nights[pid] = nights
        cohort.sleep_epochs[pid] = epochs

        keep_ecg = rng_for(seed, "missing", pid, "ecg").random(n_days) < profile.adherence
        sessions = []
        for d in range(0, n_days, cfg.ecg_interval_days):
            if keep_ecg[d]:
                sessions.append(EcgSession(
                    patient_id=pid,
                    start_time=datetime.combine(profile.baseline_date + timedelta(days=d), time(ECG_SESSION_HOUR)),
                    duration_s=cfg.ecg_minutes * 60.0,
                    fs=DEFAULT_ECG_FS,
                    latent_stress=profile.latent_stress,
                    seed=derive_seed(seed, "ecg", pid, d),
                ))
        cohort.ecg_sessions[pid] = sessions

        cohort.pss[pid] = {
            "M3": assign_pss(profile.latent_stress, cfg.noise_sd, derive_seed(seed, "pss", pid, "M3")),
            "M6": assign_pss(profile.latent_stress, cfg.noise_sd, derive_seed(seed, "pss", pid, "M6")),
        }
        cohort.assessment_dates[pid] = {
            "M3": profile.baseline_date + timedelta(days=cfg.m3_day),
            "M6": profile.baseline_date + timedelta(days=cfg.m6_day),
        }
        if verbose:
            print(f"  -> {pid}: latent={profile.latent_stress:.3f} adherence={profile.adherence:.2f} "
                  f"activity={len(activity)} nights={len(nights)} ecg={len(sessions)} "
                  f"pss M3={cohort.pss[pid]['M3']} M6={cohort.pss[pid]['M6']}")
    return cohort
