# Unit tests for ecg_transforms.py

from datetime import datetime, timedelta

import numpy as np
import pytest

from wearmil.cohortsim import ecg_from_rr, planted_rr, synthesize_ecg_with_peaks
from wearmil.ecg_transforms import (
    MODALITY_ECG,
    EcgRecording,
    EcgWindow,
    RrSeries,
    assess_quality,
    detect_peak_times,
    detect_rpeaks,
    poincare_matrix,
    quality_components,
    recurrence_matrix,
    scalogram_matrix,
    segment_ecg,
    spectrogram_matrix,
    spectrogram_row_frequencies,
    transform_recording,
    transform_window,
)
from wearmil.errors import Rejection
from wearmil.utils.config_utils import EcgConfig
from wearmil.utils.image_utils import RASTER_SIZE

FS = 130.0
START = datetime(2024, 1, 8, 9, 0, 0)


def _window(samples, fs=FS):
    return EcgWindow(patient_id="P001", window_start=START, fs=fs, samples=np.asarray(samples, dtype=float))


@pytest.fixture
def clean_window():
    samples, peaks = synthesize_ecg_with_peaks(0.3, 300.0, FS, seed=1)
    return _window(samples), peaks


# --- Segmentation ---

def test_segment_ecg_drops_trailing_remainder():
    rec = EcgRecording("P001", START, FS, np.zeros(int(FS * 650)))
    windows = segment_ecg(rec, 300.0)
    assert len(windows) == 2
    assert windows[1].window_start == START + timedelta(seconds=300)
    assert all(len(w.samples) == int(FS * 300) for w in windows)


def test_thirty_minute_recording_gives_six_windows():
    rec = EcgRecording("P001", START, FS, np.zeros(int(FS * 1800)))
    windows = segment_ecg(rec, 300.0)
    assert len(windows) == 6
    assert windows[-1].window_start == START + timedelta(minutes=25)


def test_segment_ecg_empty_recording():
    assert segment_ecg(EcgRecording("P001", START, FS, np.zeros(0)), 300.0) == []


def test_recording_rejects_bad_input():
    with pytest.raises(ValueError):
        EcgRecording("P001", START, 0.0, np.zeros(10))
    with pytest.raises(ValueError):
        EcgRecording("P001", START, FS, np.array([0.0, np.nan]))


# --- Quality and R-peaks ---

def test_quality_in_unit_interval_and_flatline_low(clean_window):
    w, _ = clean_window
    q = assess_quality(w)
    assert 0.0 <= q <= 1.0
    flat = _window(np.zeros(int(FS * 300)))
    assert assess_quality(flat) < 0.4


def test_clean_ecg_scores_above_white_noise(clean_window):
    w, _ = clean_window
    noise = _window(np.random.default_rng(8).normal(size=len(w.samples)))
    assert assess_quality(w) >= 0.5
    assert assess_quality(noise) < assess_quality(w)


def test_clipping_counts_samples_at_recording_extremes():
    t = np.arange(int(FS * 300)) / FS
    quiet = 0.5 * np.sin(2 * np.pi * t)
    saturated = np.clip(np.sin(2 * np.pi * t), -0.8, 0.8)
    rec = EcgRecording("P001", START, FS, np.concatenate([quiet, saturated]))
    first, second = segment_ecg(rec, 300.0)
    assert (first.rec_min, first.rec_max) == (-0.8, 0.8)
    # the quiet window never reaches the recording extremes
    assert quality_components(first)[2] == 1.0
    assert quality_components(second)[2] < 0.9


def test_flatline_window_rejected_as_low_quality():
    flat = _window(np.zeros(int(FS * 300)))
    with pytest.raises(Rejection) as excinfo:
        detect_rpeaks(flat, quality_threshold=0.4)
    assert excinfo.value.reason == "low quality"


def test_peaks_match_planted_beats(clean_window):
    """Detected R-peaks land within 20 ms of the planted beat times."""
    w, planted = clean_window
    detected = detect_peak_times(w)
    planted = planted[(planted > 1.0) & (planted < 299.0)]
    nearest = np.array([np.min(np.abs(detected - t)) for t in planted])
    assert np.mean(nearest < 0.020) > 0.9
    assert abs(len(detected) - len(planted)) <= 0.05 * len(planted) + 2


def test_constant_heart_rate_intervals():
    samples, _ = ecg_from_rr(np.full(300, 1000.0), 300.0, FS, seed=5)
    rr = detect_rpeaks(_window(samples))
    assert abs(len(rr) - 299) <= 2
    assert np.all(np.abs(rr.intervals - 1000.0) <= 20.0)


def test_detected_sdnn_close_to_planted():
    planted = planted_rr(0.3, 300.0, seed=6)
    samples, _ = ecg_from_rr(planted, 300.0, FS, seed=6)
    detected = detect_rpeaks(_window(samples))
    assert detected.sdnn == pytest.approx(float(np.std(planted)), rel=0.15)


def test_rr_series_follows_planted_sdnn():
    low_w = _window(synthesize_ecg_with_peaks(0.1, 300.0, FS, seed=3)[0])
    high_w = _window(synthesize_ecg_with_peaks(0.9, 300.0, FS, seed=3)[0])
    low, high = detect_rpeaks(low_w), detect_rpeaks(high_w)
    assert np.mean(low.intervals) > np.mean(high.intervals)
    assert low.sdnn > high.sdnn


def test_sparse_beats_rejected():
    # two isolated spikes on a flat line
    x = np.zeros(int(FS * 60))
    x[int(FS * 10)] = 2.0
    x[int(FS * 40)] = 2.0
    with pytest.raises(Rejection) as excinfo:
        detect_rpeaks(_window(x))
    assert excinfo.value.reason == "sparse beats"


# --- Views ---

def test_recurrence_symmetric_zero_diagonal_on_random_windows():
    rng = np.random.default_rng(42)
    for _ in range(100):
        m = recurrence_matrix(rng.normal(size=int(FS * 30)))
        assert m.shape == (RASTER_SIZE, RASTER_SIZE)
        assert np.array_equal(m, m.T)
        assert np.all(np.diag(m) == 0.0)
        assert m.min() >= 0.0 and m.max() <= 1.0


def test_step_signal_recurrence_blocks():
    x = np.concatenate([np.full(int(FS * 30), 0.5), np.full(int(FS * 30), 2.0)])
    m = recurrence_matrix(x)
    half = RASTER_SIZE // 2
    assert np.all(m[:half, :half] == 0.0) and np.all(m[half:, half:] == 0.0)
    assert np.all(m[:half, half:] == 1.0) and np.all(m[half:, :half] == 1.0)


def test_constant_signal_recurrence_is_zero():
    assert np.all(recurrence_matrix(np.full(int(FS * 60), 0.7)) == 0.0)


def test_zero_signal_spectrogram_is_uniform():
    m = spectrogram_matrix(np.zeros(int(FS * 60)), FS)
    assert m.shape == (RASTER_SIZE, RASTER_SIZE)
    assert np.all(m == 0.5)


def test_spectrogram_tone_peaks_at_ten_hz():
    cfg = EcgConfig()
    t = np.arange(int(FS * 60)) / FS
    m = spectrogram_matrix(np.sin(2 * np.pi * 10.0 * t), FS, cfg)
    row = int(np.argmax(m.mean(axis=1)))
    freqs = spectrogram_row_frequencies(FS, cfg)
    assert abs(freqs[row] - 10.0) <= 2 * (freqs[1] - freqs[0]) + FS / cfg.stft_nperseg
    assert m.min() >= 0.0 and m.max() <= 1.0


def test_scalogram_rows_order_by_frequency():
    t = np.arange(int(FS * 60)) / FS
    slow = scalogram_matrix(np.sin(2 * np.pi * 2.0 * t), FS)
    fast = scalogram_matrix(np.sin(2 * np.pi * 20.0 * t), FS)
    assert slow.shape == fast.shape == (RASTER_SIZE, RASTER_SIZE)
    # row 0 holds the lowest frequency
    assert int(np.argmax(slow.mean(axis=1))) < int(np.argmax(fast.mean(axis=1)))


def test_scalogram_zero_signal_and_determinism():
    assert np.all(scalogram_matrix(np.zeros(int(FS * 30)), FS) == 0.5)
    x = np.random.default_rng(3).normal(size=int(FS * 30))
    assert np.array_equal(scalogram_matrix(x, FS), scalogram_matrix(x, FS))


def test_poincare_constant_intervals_fill_one_bin():
    m = poincare_matrix(np.full(30, 1000.0))
    (rows, cols) = np.nonzero(m)
    assert len(rows) == 1
    assert rows[0] == cols[0]
    assert m[rows[0], cols[0]] == 1.0


def test_poincare_alternating_intervals_two_symmetric_bins():
    rr = np.tile([900.0, 1100.0], 20)
    m = poincare_matrix(rr)
    nonzero = set(zip(*np.nonzero(m)))
    assert len(nonzero) == 2
    assert {(c, r) for r, c in nonzero} == nonzero
    assert all(r != c for r, c in nonzero)


def test_poincare_too_few_intervals():
    with pytest.raises(Rejection) as excinfo:
        poincare_matrix(np.full(9, 800.0))
    assert excinfo.value.reason == "too few intervals"


def test_transform_window_renders_four_views(clean_window):
    w, _ = clean_window
    images = transform_window(w, EcgConfig())
    assert [img.view_kind for img in images] == ["recurrence", "spectrogram", "scalogram", "poincare"]
    for img in images:
        assert img.pixels.shape == (RASTER_SIZE, RASTER_SIZE)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0
        assert img.modality_id == MODALITY_ECG
        assert img.instant == START
        assert img.patient_id == "P001"


def test_transform_recording_counts_rejections():
    good, _ = synthesize_ecg_with_peaks(0.5, 300.0, FS, seed=2)
    samples = np.concatenate([good, np.zeros(int(FS * 300))])
    images, rejected = transform_recording(EcgRecording("P002", START, FS, samples), EcgConfig())
    assert len(images) == 4
    assert rejected == {"low quality": 1}


def test_rr_series_sdnn_is_population_std():
    rr = RrSeries(planted_rr(0.5, 300.0, seed=4))
    assert rr.sdnn == pytest.approx(80.0 - 60.0 * 0.5, rel=1e-9)
