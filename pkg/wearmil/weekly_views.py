"""
Weekly smartwatch views: baseline alignment, the 60% missingness rule,
within-week imputation and z-scoring, heatmaps and nightly hypnograms.
"""
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from fractions import Fraction

import numpy as np

from .ecg_transforms import MODALITY_ACTIVITY, MODALITY_SLEEP, InstanceImage
from .errors import DataError, Rejection
from .utils.config_utils import SLEEP_FEATURES, WatchConfig
from .utils.image_utils import RASTER_SIZE, minmax_rescale, upsample_nearest

DAYS_PER_WEEK = 7
SLEEP_TOLERANCE_S = 60.0

# Vertical order of hypnogram levels, bottom (0) to top (4).
STAGE_LEVELS = {"unmeasurable": 0, "deep": 1, "light": 2, "rem": 3, "awake": 4}
HYPNOGRAM_MARGIN = 8
HYPNOGRAM_THICKNESS = 3


@dataclass
class DailyActivityRecord:
    patient_id: str
    date: date
    features: dict

    def feature_values(self):
        return self.features


@dataclass
class SleepNightRecord:
    patient_id: str
    date: date
    sleep_s: float
    unmeasurable_s: float
    deep_s: float
    light_s: float
    rem_s: float

    def __post_init__(self):
        values = self.feature_values()
        present = {k: v for k, v in values.items() if v is not None and np.isfinite(v)}
        if any(v < 0 for v in present.values()):
            raise DataError(f"negative sleep duration for {self.patient_id} on {self.date}")
        if all(k in present for k in ("deep_s", "light_s", "rem_s", "sleep_s")):
            staged = present["deep_s"] + present["light_s"] + present["rem_s"]
            if staged > present["sleep_s"] + SLEEP_TOLERANCE_S:
                raise DataError(
                    f"staged sleep {staged:.0f}s exceeds total sleep {present['sleep_s']:.0f}s "
                    f"for {self.patient_id} on {self.date}"
                )

    def feature_values(self):
        return {name: getattr(self, name) for name in SLEEP_FEATURES}


@dataclass
class SleepEpoch:
    start: datetime
    end: datetime
    stage: str


@dataclass
class SleepEpochSeries:
    patient_id: str
    night_date: date
    epochs: list

    def __post_init__(self):
        for epoch in self.epochs:
            if epoch.stage not in STAGE_LEVELS:
                raise DataError(f"unknown sleep stage '{epoch.stage}' for {self.patient_id}")
            if epoch.end < epoch.start:
                raise DataError(f"sleep epoch ends before it starts for {self.patient_id}")
        for prev, nxt in zip(self.epochs, self.epochs[1:]):
            if nxt.start < prev.end:
                raise DataError(f"overlapping or unordered sleep epochs for {self.patient_id} on {self.night_date}")


@dataclass
class WeekSlice:
    """One baseline-aligned week; `values` is feature x 7 with NaN for missing cells."""
    patient_id: str
    week_index: int
    week_start: date
    feature_names: list
    values: np.ndarray


@dataclass
class WeeklyMatrix:
    patient_id: str
    week_index: int
    week_start: date
    feature_names: list
    values: np.ndarray
    mask: np.ndarray
    empty_rows: np.ndarray = field(default=None)
    normalized: bool = False

    def __post_init__(self):
        if self.empty_rows is None:
            self.empty_rows = ~self.mask.any(axis=1)


def week_position(day, baseline):
    """Maps a date to (week index, column) relative to the baseline."""
    offset = (day - baseline).days
    return offset // DAYS_PER_WEEK, offset % DAYS_PER_WEEK


def align_weeks(records, baseline, feature_names=None):
    """
    Groups dated records into non-overlapping baseline-aligned weeks.

    Day d lands in week floor((d - baseline)/7), column (d - baseline) mod 7.

    Args:
        records (list): DailyActivityRecord or SleepNightRecord of one patient.
        baseline (date): The patient's earliest calendar date.
        feature_names (list): Feature row order; defaults to the first record's keys.

    Returns:
        list: (week_index, WeekSlice) pairs sorted by week index.
    """
    if not records:
        return []
    if feature_names is None:
        feature_names = list(records[0].feature_values().keys())
    patient_id = records[0].patient_id
    weeks = {}
    seen = set()
    for record in records:
        # Reject records before the baseline and repeated dates
        if record.date < baseline:
            raise DataError(f"record dated {record.date} precedes baseline {baseline} for {patient_id}")
        if record.date in seen:
            raise DataError(f"duplicate record for {patient_id} on {record.date}")
        seen.add(record.date)

        # Open an all-missing slice the first time a week is touched
        week, column = week_position(record.date, baseline)
        if week not in weeks:
            weeks[week] = WeekSlice(
                patient_id=patient_id,
                week_index=week,
                week_start=baseline + timedelta(days=week * DAYS_PER_WEEK),
                feature_names=list(feature_names),
                values=np.full((len(feature_names), DAYS_PER_WEEK), np.nan),
            )
        # Fill this day's column; absent features stay NaN
        values = record.feature_values()
        for row, name in enumerate(feature_names):
            value = values.get(name)
            if value is not None:
                weeks[week].values[row, column] = float(value)
    return [(week, weeks[week]) for week in sorted(weeks)]


def missing_fraction(values, missing_unit="cell"):
    """Exact missing fraction of a feature x 7 slice; a day counts as missing when no feature is present."""
    present = np.isfinite(values)
    if missing_unit == "cell":
        return Fraction(int(values.size - present.sum()), int(values.size))
    if missing_unit == "day":
        missing_days = int((~present.any(axis=0)).sum())
        return Fraction(missing_days, values.shape[1])
    raise ValueError(f"missing_unit must be 'cell' or 'day', got '{missing_unit}'")


def filter_and_impute(week, max_missing_fraction=0.6, missing_unit="cell"):
    """
    Applies the exclusion rule, then imputes within the week.

    Returns:
        WeeklyMatrix or None: None when the missing fraction exceeds
        `max_missing_fraction` (a fraction of exactly the limit is retained).
        Missing cells take their feature row's mean; a row with no present
        cell is filled with 0 and flagged in `empty_rows`.
    """
    values = np.asarray(week.values, dtype=np.float64)
    # Exclusion check runs on the raw slice, before anything is imputed
    if missing_fraction(values, missing_unit) > Fraction(str(max_missing_fraction)):
        return None
    mask = np.isfinite(values)
    filled = values.copy()
    empty_rows = ~mask.any(axis=1)
    for row in range(values.shape[0]):
        if empty_rows[row]:
            filled[row] = 0.0
        elif not mask[row].all():
            filled[row, ~mask[row]] = values[row, mask[row]].mean()
    return WeeklyMatrix(
        patient_id=week.patient_id,
        week_index=week.week_index,
        week_start=week.week_start,
        feature_names=list(week.feature_names),
        values=filled,
        mask=mask,
        empty_rows=empty_rows,
    )


def zscore_week(m):
    """Per-row population z-score over the 7 columns; zero-variance rows become zeros."""
    values = np.asarray(m.values, dtype=np.float64)
    mean = values.mean(axis=1, keepdims=True)
    centered = values - mean
    std = np.sqrt((centered ** 2).mean(axis=1, keepdims=True))
    scale = np.maximum(1.0, np.abs(mean))
    flat = std <= 1e-12 * scale
    normalized = np.where(flat, 0.0, centered / np.where(flat, 1.0, std))
    return WeeklyMatrix(
        patient_id=m.patient_id,
        week_index=m.week_index,
        week_start=m.week_start,
        feature_names=list(m.feature_names),
        values=normalized,
        mask=m.mask.copy(),
        empty_rows=m.empty_rows.copy(),
        normalized=True,
    )


def week_instant(m, anchor="start"):
    day = m.week_start if anchor == "start" else m.week_start + timedelta(days=DAYS_PER_WEEK - 1)
    return datetime.combine(day, time())


def render_heatmap(m, modality, anchor="start"):
    """
    Renders a feature x day matrix as a 224x224 raster.

    The whole matrix is min-max scaled to [0,1] and nearest-neighbour
    upsampled, so every source cell becomes a uniform block. Pixels depend on
    the matrix values only.
    """
    if modality == "activity":
        modality_id, view_kind = MODALITY_ACTIVITY, "activity_heatmap"
    elif modality == "sleep":
        modality_id, view_kind = MODALITY_SLEEP, "sleep_heatmap"
    else:
        raise ValueError(f"modality must be 'activity' or 'sleep', got '{modality}'")
    pixels = upsample_nearest(minmax_rescale(m.values))
    return InstanceImage(
        pixels=pixels,
        modality_id=modality_id,
        view_kind=view_kind,
        instant=week_instant(m, anchor),
        patient_id=m.patient_id,
        meta={"week_index": m.week_index},
    )


def _level_row(stage):
    span = RASTER_SIZE - 1 - 2 * HYPNOGRAM_MARGIN
    top = max(STAGE_LEVELS.values())
    return int(round(HYPNOGRAM_MARGIN + (top - STAGE_LEVELS[stage]) * span / top))


def hypnogram_image(e):
    """
    Draws a night's stage sequence as a binary step trace on a zero background.

    x runs from the first epoch start to the last epoch end; higher stage
    levels sit higher in the raster (smaller row index). Lines are 3 px thick.

    Raises:
        Rejection: "empty epochs" when the series has no epoch.
    """
    if not e.epochs:
        raise Rejection("empty epochs", f"{e.patient_id} {e.night_date}")
    # Normalized time axis: first epoch start -> column 0, last epoch end -> column 223
    t0 = e.epochs[0].start
    total = (e.epochs[-1].end - t0).total_seconds()
    last = RASTER_SIZE - 1
    half = HYPNOGRAM_THICKNESS // 2

    def x_of(moment):
        if total <= 0:
            return 0
        return int(np.round((moment - t0).total_seconds() / total * last))

    pixels = np.zeros((RASTER_SIZE, RASTER_SIZE))

    def hline(row, x0, x1):
        pixels[max(0, row - half):row + half + 1, max(0, x0):min(last, x1) + 1] = 1.0

    def vline(col, r0, r1):
        lo, hi = min(r0, r1), max(r0, r1)
        pixels[lo:hi + 1, max(0, col - half):col + half + 1] = 1.0

    # Step trace: a horizontal run per epoch, joined by a vertical edge at each stage change
    prev_row = None
    for epoch in e.epochs:
        row = _level_row(epoch.stage)
        x0 = x_of(epoch.start)
        x1 = x_of(epoch.end) if total > 0 else last
        if prev_row is not None and prev_row != row:
            vline(x0, prev_row, row)
        hline(row, x0, x1)
        prev_row = row
    return InstanceImage(
        pixels=pixels,
        modality_id=MODALITY_SLEEP,
        view_kind="hypnogram",
        instant=datetime.combine(e.night_date, time()),
        patient_id=e.patient_id,
    )


def _week_images(records, baseline, feature_names, modality, cfg, counts):
    images = []
    for _, week in align_weeks(records, baseline, feature_names):
        matrix = filter_and_impute(week, cfg.max_missing_fraction, cfg.missing_unit)
        if matrix is None:
            counts[f"{modality}_weeks_rejected"] = counts.get(f"{modality}_weeks_rejected", 0) + 1
            continue
        images.append(render_heatmap(zscore_week(matrix), modality, cfg.week_anchor))
    return images


def transform_patient_watch(activity, sleep_nights, sleep_epochs, cfg=None):
    """
    Builds every smartwatch instance of one patient.

    The baseline is the earliest date across the patient's activity and sleep
    records. Returns (images, counts) where counts tallies rejected weeks/nights.
    """
    cfg = cfg or WatchConfig()
    dates = [r.date for r in activity] + [r.date for r in sleep_nights]
    counts = {}
    images = []
    if dates:
        baseline = min(dates)
        images.extend(_week_images(activity, baseline, list(cfg.activity_features), "activity", cfg, counts))
        images.extend(_week_images(sleep_nights, baseline, list(SLEEP_FEATURES), "sleep", cfg, counts))
    for series in sleep_epochs:
        try:
            images.append(hypnogram_image(series))
        except Rejection:
            counts["nights_rejected"] = counts.get("nights_rejected", 0) + 1
    return images, counts
