"""
ECG windowing, quality gating, R-peak detection and the four ECG views.

Every function here is a pure per-window transform; windows may be processed
in any order or in parallel.
"""
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np
import pywt
from scipy import signal as scipy_signal

from .errors import Rejection
from .utils.config_utils import EcgConfig
from .utils.image_utils import RASTER_SIZE, block_mean, minmax_rescale, resize_bilinear

# --- Modalities and view kinds ---
MODALITY_ECG = 0
MODALITY_ACTIVITY = 1
MODALITY_SLEEP = 2
MODALITY_NAMES = {MODALITY_ECG: "ecg", MODALITY_ACTIVITY: "activity", MODALITY_SLEEP: "sleep"}

ECG_VIEWS = ("recurrence", "spectrogram", "scalogram", "poincare")
VIEW_KINDS = ECG_VIEWS + ("activity_heatmap", "sleep_heatmap", "hypnogram")

RR_MIN_MS = 200.0
RR_MAX_MS = 3000.0
MIN_BEATS = 10
MIN_INTERVALS = 10
FLATLINE_S = 0.5


@dataclass
class EcgRecording:
    patient_id: str
    start_time: datetime
    fs: float
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.fs <= 0:
            raise ValueError(f"fs must be positive, got {self.fs}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"recording for {self.patient_id} contains non-finite samples")

    @property
    def duration_s(self):
        return len(self.samples) / self.fs


@dataclass
class EcgWindow:
    patient_id: str
    window_start: datetime
    fs: float
    samples: np.ndarray
    quality: float = float("nan")
    # extremes of the whole recording; None falls back to the window's own
    rec_min: float = None
    rec_max: float = None


@dataclass
class RrSeries:
    intervals: np.ndarray  # milliseconds

    def __post_init__(self):
        self.intervals = np.asarray(self.intervals, dtype=np.float64)

    def __len__(self):
        return len(self.intervals)

    @property
    def sdnn(self):
        return float(np.std(self.intervals)) if len(self.intervals) else float("nan")


@dataclass
class InstanceImage:
    pixels: np.ndarray
    modality_id: int
    view_kind: str
    instant: datetime
    patient_id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.view_kind not in VIEW_KINDS:
            raise ValueError(f"unknown view kind '{self.view_kind}'")
        if self.modality_id not in MODALITY_NAMES:
            raise ValueError(f"unknown modality id {self.modality_id}")


def _ecg_image(pixels, view_kind, w):
    return InstanceImage(
        pixels=np.asarray(pixels, dtype=np.float64),
        modality_id=MODALITY_ECG,
        view_kind=view_kind,
        instant=w.window_start,
        patient_id=w.patient_id,
    )


# --- Segmentation and quality ---

def segment_ecg(rec, window_s=300.0):
    """
    Cuts a recording into consecutive non-overlapping windows of `window_s`.

    Window k starts at start_time + k*window_s; a trailing remainder shorter
    than one window is discarded. An empty recording yields an empty list.
    """
    n_per = int(round(window_s * rec.fs))
    n_windows = len(rec.samples) // n_per if n_per > 0 else 0
    windows = []
    if n_windows == 0:
        return windows
    rec_min, rec_max = float(rec.samples.min()), float(rec.samples.max())
    for k in range(n_windows):
        windows.append(EcgWindow(
            patient_id=rec.patient_id,
            window_start=rec.start_time + timedelta(seconds=k * window_s),
            fs=rec.fs,
            samples=rec.samples[k * n_per:(k + 1) * n_per].copy(),
            rec_min=rec_min,
            rec_max=rec_max,
        ))
    return windows


def _band_power_ratio(x, fs):
    nperseg = min(len(x), int(4 * fs))
    freqs, psd = scipy_signal.welch(x - np.mean(x), fs=fs, nperseg=nperseg)
    total = psd[(freqs >= 0.5) & (freqs <= 40.0)].sum()
    if total <= 0 or not np.isfinite(total):
        return 0.0
    qrs = psd[(freqs >= 5.0) & (freqs <= 15.0)].sum()
    return float(qrs / total)


def _flatline_fraction(x, fs):
    min_run = max(2, int(round(FLATLINE_S * fs)))
    change = np.flatnonzero(np.diff(x) != 0)
    # run boundaries: starts at 0 and after every change point
    starts = np.concatenate(([0], change + 1))
    ends = np.concatenate((change + 1, [len(x)]))
    lengths = ends - starts
    return float(lengths[lengths >= min_run].sum() / len(x))


def _clipping_fraction(x, lo=None, hi=None):
    """Fraction of samples sitting at the recording extremes `lo`/`hi`."""
    lo = x.min() if lo is None else lo
    hi = x.max() if hi is None else hi
    return float(np.count_nonzero((x == lo) | (x == hi)) / len(x))


def quality_components(w):
    """Returns the three SQI components (qrs band ratio, 1 - flatline, 1 - clipping), each in [0,1]."""
    x = np.asarray(w.samples, dtype=np.float64)
    if len(x) == 0:
        return 0.0, 0.0, 0.0
    a = _band_power_ratio(x, w.fs)
    b = 1.0 - _flatline_fraction(x, w.fs)
    c = 1.0 - _clipping_fraction(x, w.rec_min, w.rec_max)
    return tuple(float(np.clip(v, 0.0, 1.0)) for v in (a, b, c))


def assess_quality(w):
    """Composite signal quality index in [0,1]: the mean of quality_components(w)."""
    return float(np.mean(quality_components(w)))


# --- R-peak detection ---

def _pan_tompkins_bandpass(x, fs):
    """
    Pan-Tompkins integer low-pass then high-pass, delays scaled from the 200 Hz design.

    The recursive difference forms (1 - z^-m)^2 / (1 - z^-1)^2 and
    z^-(m-1)/2 - (1 - z^-m) / (m (1 - z^-1)) are applied as their equivalent
    FIR kernels (triangle and boxcar), which avoids the marginally stable poles.

    Returns:
        tuple: (filtered signal, group delay in samples)
    """
    m_lp = max(2, int(round(6 * fs / 200.0)))
    m_hp = max(3, int(round(32 * fs / 200.0)) | 1)
    triangle = np.convolve(np.ones(m_lp), np.ones(m_lp)) / (m_lp * m_lp)
    y = scipy_signal.lfilter(triangle, [1.0], x)
    moving_avg = scipy_signal.lfilter(np.ones(m_hp) / m_hp, [1.0], y)
    delay_hp = (m_hp - 1) // 2
    delayed = np.r_[np.zeros(delay_hp), y[:len(y) - delay_hp]]
    delay = (m_lp - 1) + delay_hp
    return delayed - moving_avg, delay


def _integrated_energy(x, fs):
    filtered, delay = _pan_tompkins_bandpass(x - np.mean(x), fs)
    derivative = np.convolve(filtered, np.array([1.0, 2.0, 0.0, -2.0, -1.0]) / 8.0, mode="same")
    squared = derivative ** 2
    width = max(1, int(round(0.150 * fs)))
    integrated = np.convolve(squared, np.ones(width) / width, mode="same")
    return integrated, delay


def _refine_peak(x, center, half_width):
    """Sub-sample R location: argmax of the raw signal near `center`, refined by a parabola."""
    lo = max(0, center - half_width)
    hi = min(len(x), center + half_width + 1)
    if hi - lo < 1:
        return float(center)
    k = lo + int(np.argmax(x[lo:hi]))
    if 0 < k < len(x) - 1:
        y0, y1, y2 = x[k - 1], x[k], x[k + 1]
        denom = y0 - 2.0 * y1 + y2
        if denom < 0:
            return k + 0.5 * (y0 - y2) / denom
    return float(k)


def detect_peak_times(w, refractory_ms=250.0):
    """
    Pan-Tompkins-style QRS detection.

    Band-pass (cascaded difference filters, roughly 5-15 Hz), five-point
    derivative, squaring, 150 ms moving integration, adaptive dual threshold
    with search-back, and a refractory period.

    Returns:
        np.ndarray: R-peak positions in seconds from the window start.
    """
    x = np.asarray(w.samples, dtype=np.float64)
    fs = w.fs
    if len(x) < int(2 * fs) or np.ptp(x) == 0:
        return np.zeros(0)
    integrated, delay = _integrated_energy(x, fs)
    refractory = int(round(refractory_ms * fs / 1000.0))
    candidates, _ = scipy_signal.find_peaks(integrated, distance=max(1, refractory))
    if len(candidates) == 0:
        return np.zeros(0)

    learn = integrated[: int(2 * fs)]
    spki = 0.25 * learn.max()
    npki = 0.5 * learn.mean()
    threshold1 = npki + 0.25 * (spki - npki)
    threshold2 = 0.5 * threshold1

    peaks = []
    rr_recent = []
    for idx in candidates:
        value = integrated[idx]
        if peaks and idx - peaks[-1] < refractory:
            continue
        if value > threshold1:
            if peaks and rr_recent:
                # search back for a missed beat inside an overly long gap
                rr_avg = np.mean(rr_recent[-8:])
                if idx - peaks[-1] > 1.66 * rr_avg:
                    gap = candidates[(candidates > peaks[-1] + refractory) & (candidates < idx - refractory)]
                    gap = gap[integrated[gap] > threshold2]
                    if len(gap):
                        missed = int(gap[np.argmax(integrated[gap])])
                        rr_recent.append(missed - peaks[-1])
                        peaks.append(missed)
                        spki = 0.25 * integrated[missed] + 0.75 * spki
            if peaks:
                rr_recent.append(idx - peaks[-1])
            peaks.append(int(idx))
            spki = 0.125 * value + 0.875 * spki
        else:
            npki = 0.125 * value + 0.875 * npki
        threshold1 = npki + 0.25 * (spki - npki)
        threshold2 = 0.5 * threshold1

    half = int(round(0.1 * fs))
    refined = [_refine_peak(x, p - delay, half) for p in peaks]
    return np.unique(np.asarray(refined)) / fs


def detect_rpeaks(w, quality_threshold=None):
    """
    Detects R-peaks and returns the filtered RR interval series.

    Args:
        w (EcgWindow): The window.
        quality_threshold (float): When given, windows with quality below it
            are rejected with reason "low quality".

    Returns:
        RrSeries: Successive peak gaps in ms, gaps outside (200, 3000) ms dropped.

    Raises:
        Rejection: "low quality" or "sparse beats" (< 10 detected beats).
    """
    if quality_threshold is not None:
        quality = w.quality if np.isfinite(w.quality) else assess_quality(w)
        if quality < quality_threshold:
            raise Rejection("low quality", f"{quality:.3f} < {quality_threshold}")
    peak_times = detect_peak_times(w)
    if len(peak_times) < MIN_BEATS:
        raise Rejection("sparse beats", f"{len(peak_times)} beats detected")
    intervals = np.diff(peak_times) * 1000.0
    intervals = intervals[(intervals > RR_MIN_MS) & (intervals < RR_MAX_MS)]
    return RrSeries(intervals)


# --- Visual representations ---

def recurrence_matrix(x, size=RASTER_SIZE):
    """Unthresholded recurrence matrix |x_i - x_j| of the block-mean decimated signal, scaled to [0,1]."""
    y = block_mean(x, size)
    distances = np.abs(y[:, None] - y[None, :])
    scale = distances.max()
    if scale <= 1e-12 * max(1.0, float(np.abs(y).max())):
        return np.zeros((size, size))
    return distances / scale


def recurrence_plot(w):
    return _ecg_image(recurrence_matrix(w.samples), "recurrence", w)


def spectrogram_matrix(x, fs, cfg=None):
    """
    Log-magnitude STFT rows 0..fmax Hz, resampled to 224x224, min-max scaled.

    Row 0 holds the lowest frequency; columns run forward in time.
    """
    cfg = cfg or EcgConfig()
    freqs, _, zxx = scipy_signal.stft(
        np.asarray(x, dtype=np.float64),
        fs=fs,
        window="hann",
        nperseg=cfg.stft_nperseg,
        noverlap=cfg.stft_nperseg - cfg.stft_hop,
        boundary=None,
        padded=False,
    )
    keep = freqs <= cfg.stft_fmax
    magnitude = np.log1p(np.abs(zxx[keep]))
    return minmax_rescale(resize_bilinear(magnitude))


def spectrogram_row_frequencies(fs, cfg=None):
    """Frequency (Hz) represented by each raster row of spectrogram_matrix."""
    cfg = cfg or EcgConfig()
    bins = np.arange(cfg.stft_nperseg // 2 + 1) * fs / cfg.stft_nperseg
    top = bins[bins <= cfg.stft_fmax].max()
    return np.linspace(0.0, top, RASTER_SIZE)


def spectrogram(w, cfg=None):
    return _ecg_image(spectrogram_matrix(w.samples, w.fs, cfg), "spectrogram", w)


def morlet_wavelet_name(center=6.0):
    """PyWavelets complex Morlet exp(i*center*t)exp(-t^2/2), i.e. cmor with B=2, C=center/(2*pi)."""
    return f"cmor2.0-{center / (2.0 * np.pi)!r}"


def scalogram_frequencies(cfg=None):
    cfg = cfg or EcgConfig()
    return np.geomspace(cfg.cwt_fmin, cfg.cwt_fmax, cfg.cwt_scales)


def scalogram_matrix(x, fs, cfg=None):
    """
    Morlet CWT magnitude on log-spaced scales, log-compressed, 224x224, min-max scaled.

    Row 0 holds the lowest frequency (largest scale).
    """
    cfg = cfg or EcgConfig()
    x = np.asarray(x, dtype=np.float64)
    freqs = scalogram_frequencies(cfg)
    center_cycles = cfg.cwt_center / (2.0 * np.pi)
    scales = center_cycles * fs / freqs
    coefs, _ = pywt.cwt(x - x.mean(), scales, morlet_wavelet_name(cfg.cwt_center),
                        sampling_period=1.0 / fs, method="fft")
    magnitude = np.log1p(np.abs(coefs))
    columns = block_mean(magnitude, RASTER_SIZE, axis=1)
    return minmax_rescale(resize_bilinear(columns))


def scalogram(w, cfg=None):
    return _ecg_image(scalogram_matrix(w.samples, w.fs, cfg), "scalogram", w)


def poincare_matrix(intervals, lo_ms=300.0, hi_ms=1500.0, size=RASTER_SIZE):
    """
    2-D histogram of (RR_n, RR_n+1) over fixed axes.

    Columns index RR_n and rows index RR_n+1, both increasing with the index,
    so the identity line is the main diagonal. Out-of-range pairs are
    clipped into the edge bins; counts are log1p-compressed and scaled to [0,1].
    """
    rr = np.clip(np.asarray(intervals, dtype=np.float64), lo_ms, hi_ms)
    if len(rr) < MIN_INTERVALS:
        raise Rejection("too few intervals", f"{len(rr)} < {MIN_INTERVALS}")
    counts, _, _ = np.histogram2d(rr[1:], rr[:-1], bins=size, range=[[lo_ms, hi_ms], [lo_ms, hi_ms]])
    return minmax_rescale(np.log1p(counts))


def poincare_plot(rr, patient_id="", instant=None, cfg=None):
    cfg = cfg or EcgConfig()
    pixels = poincare_matrix(rr.intervals, cfg.poincare_min_ms, cfg.poincare_max_ms)
    return InstanceImage(
        pixels=pixels,
        modality_id=MODALITY_ECG,
        view_kind="poincare",
        instant=instant,
        patient_id=patient_id,
    )


def transform_window(w, cfg=None):
    """
    Gates one window and renders all four ECG views.

    Raises:
        Rejection: when the window fails the quality gate or beat detection.
    """
    cfg = cfg or EcgConfig()
    w.quality = assess_quality(w)
    rr = detect_rpeaks(w, cfg.quality_threshold)
    images = [recurrence_plot(w), spectrogram(w, cfg), scalogram(w, cfg),
              poincare_plot(rr, w.patient_id, w.window_start, cfg)]
    for img in images:
        img.meta["quality"] = w.quality
    return images


def transform_recording(rec, cfg=None, verbose=False):
    """Segments a recording and transforms every window; returns (images, rejection counts)."""
    cfg = cfg or EcgConfig()
    images = []
    rejected = {}
    for w in segment_ecg(rec, cfg.window_s):
        try:
            images.extend(transform_window(w, cfg))
        except Rejection as e:
            rejected[e.reason] = rejected.get(e.reason, 0) + 1
            if verbose:
                print(f"  -> Rejected window {w.window_start.isoformat()} ({rec.patient_id}): {e}")
    return images, rejected
