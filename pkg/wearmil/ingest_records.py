"""
Readers and writers for every on-disk format the stages exchange:
ECG recordings, daily activity, sleep nights, sleep epochs, assessments,
per-patient instance rasters.
"""
import json
import os
from datetime import date, datetime

import numpy as np
import pandas as pd

from .bags import Assessment
from .ecg_transforms import EcgRecording, InstanceImage
from .errors import DataError
from .utils.config_utils import DEFAULT_ACTIVITY_FEATURES, SLEEP_FEATURES
from .utils.image_utils import write_png
from .weekly_views import DailyActivityRecord, SleepEpoch, SleepEpochSeries, SleepNightRecord

ACTIVITY_FILE = "activity.csv"
SLEEP_NIGHTS_FILE = "sleep_nights.csv"
SLEEP_EPOCHS_FILE = "sleep_epochs.jsonl"
ASSESSMENTS_FILE = "assessments.csv"
PROFILES_FILE = "profiles.csv"
ECG_DIR = "ecg"
ECG_SUFFIXES = (".bin", ".csv")
INSTANCE_SUFFIX = ".npz"
STAMP_FORMAT = "%Y%m%dT%H%M%S"


# --- ECG ---

def ecg_stem(patient_id, start_time):
    return f"{patient_id}_{start_time.strftime(STAMP_FORMAT)}"


def write_ecg_bin(path, rec):
    """Little-endian float32 samples plus `<path>.json` {patient_id, start_time, fs}."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(np.asarray(rec.samples, dtype="<f4").tobytes())
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump({"patient_id": rec.patient_id, "start_time": rec.start_time.isoformat(), "fs": rec.fs},
                  f, sort_keys=True)
    return path


def write_ecg_csv(path, rec):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    t = np.arange(len(rec.samples)) / rec.fs
    pd.DataFrame({"t_s": t, "mv": rec.samples}).to_csv(path, index=False)
    return path


def _read_sidecar(path):
    sidecar = path + ".json"
    if not os.path.isfile(sidecar):
        return None
    try:
        with open(sidecar, "r", encoding="utf-8") as f:
            meta = json.load(f)
        return meta["patient_id"], datetime.fromisoformat(meta["start_time"]), float(meta["fs"])
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise DataError(f"invalid ECG sidecar {sidecar}: {e}") from e


def _identity_from_name(path):
    stem = os.path.splitext(os.path.basename(path))[0]
    pid, _, stamp = stem.rpartition("_")
    try:
        return pid, datetime.strptime(stamp, STAMP_FORMAT)
    except ValueError:
        raise DataError(f"cannot infer patient id and start time from '{os.path.basename(path)}'; "
                        f"expected <patient>_{STAMP_FORMAT} or a JSON sidecar") from None


def ecg_patient_id(path):
    """Patient id of an ECG file, from its sidecar or else its file name."""
    meta = _read_sidecar(path)
    return meta[0] if meta is not None else _identity_from_name(path)[0]


def read_ecg_file(path):
    """
    Loads one ECG recording.

    `.bin` files need their JSON sidecar. `.csv` files carry `t_s,mv`
    columns; the sampling rate is taken from the sidecar when present, else
    from the median time step, and patient/start time from the file name.
    """
    meta = _read_sidecar(path)
    if path.endswith(".bin"):
        if meta is None:
            raise DataError(f"missing sidecar {path}.json")
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) % 4:
            raise DataError(f"{path}: {len(raw)} bytes is not a whole number of float32 samples")
        pid, start, fs = meta
        return EcgRecording(pid, start, fs, np.frombuffer(raw, dtype="<f4").astype(np.float64))
    if path.endswith(".csv"):
        frame = pd.read_csv(path)
        if not {"t_s", "mv"} <= set(frame.columns):
            raise DataError(f"{path}: expected columns t_s,mv, found {list(frame.columns)}")
        if meta is not None:
            pid, start, fs = meta
        else:
            pid, start = _identity_from_name(path)
            steps = np.diff(frame["t_s"].to_numpy(dtype=np.float64))
            if len(steps) == 0 or np.median(steps) <= 0:
                raise DataError(f"{path}: cannot infer the sampling rate from t_s")
            fs = float(round(1.0 / float(np.median(steps)), 6))
        return EcgRecording(pid, start, fs, frame["mv"].to_numpy(dtype=np.float64))
    raise DataError(f"unsupported ECG file '{path}'")


def list_ecg_files(ecg_dir):
    if not os.path.isdir(ecg_dir):
        raise FileNotFoundError(f"ECG directory '{ecg_dir}' not found")
    return sorted(os.path.join(ecg_dir, f) for f in os.listdir(ecg_dir) if f.endswith(ECG_SUFFIXES))


# --- Smartwatch tables ---

def _to_date(value):
    return value if isinstance(value, date) else date.fromisoformat(str(value))


def _optional_float(value):
    return None if pd.isna(value) else float(value)


def write_activity_csv(path, records, feature_names=DEFAULT_ACTIVITY_FEATURES):
    rows = [
        dict({"patient_id": r.patient_id, "date": r.date.isoformat()},
             **{name: r.features.get(name) for name in feature_names})
        for pid in sorted(records) for r in records[pid]
    ]
    pd.DataFrame(rows, columns=["patient_id", "date"] + list(feature_names)).to_csv(path, index=False)
    return path


def read_activity_csv(path, feature_names=None):
    """Returns patient id -> DailyActivityRecord list; features are every column after `date` unless named."""
    frame = _read_table(path, ("patient_id", "date"))
    names = list(feature_names) if feature_names else [c for c in frame.columns if c not in ("patient_id", "date")]
    missing = [n for n in names if n not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing activity feature column(s) {missing}")
    out = {}
    for values in frame.to_dict("records"):
        features = {n: _optional_float(values[n]) for n in names}
        out.setdefault(str(values["patient_id"]), []).append(
            DailyActivityRecord(str(values["patient_id"]), _to_date(values["date"]), features))
    return out


def write_sleep_nights_csv(path, nights):
    rows = [
        dict({"patient_id": n.patient_id, "date": n.date.isoformat()}, **n.feature_values())
        for pid in sorted(nights) for n in nights[pid]
    ]
    pd.DataFrame(rows, columns=["patient_id", "date"] + list(SLEEP_FEATURES)).to_csv(path, index=False)
    return path


def read_sleep_nights_csv(path):
    frame = _read_table(path, ("patient_id", "date") + SLEEP_FEATURES)
    out = {}
    for values in frame.to_dict("records"):
        durations = {n: _optional_float(values[n]) for n in SLEEP_FEATURES}
        out.setdefault(str(values["patient_id"]), []).append(
            SleepNightRecord(str(values["patient_id"]), _to_date(values["date"]), **durations))
    return out


def write_sleep_epochs_jsonl(path, series):
    with open(path, "w", encoding="utf-8") as f:
        for pid in sorted(series):
            for s in series[pid]:
                for e in s.epochs:
                    f.write(json.dumps({
                        "patient_id": s.patient_id,
                        "night_date": s.night_date.isoformat(),
                        "start": e.start.isoformat(),
                        "end": e.end.isoformat(),
                        "stage": e.stage,
                    }, sort_keys=True))
                    f.write("\n")
    return path


def read_sleep_epochs_jsonl(path):
    """Groups epoch lines into one SleepEpochSeries per (patient, night), in file order."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"sleep epoch file '{path}' not found")
    grouped = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = (str(rec["patient_id"]), _to_date(rec["night_date"]))
                epoch = SleepEpoch(datetime.fromisoformat(rec["start"]), datetime.fromisoformat(rec["end"]),
                                   str(rec["stage"]))
            except (KeyError, ValueError, json.JSONDecodeError) as e:
                raise DataError(f"{path}:{line_no}: invalid sleep epoch record: {e}") from e
            grouped.setdefault(key, []).append(epoch)
    out = {}
    for (pid, night), epochs in grouped.items():
        out.setdefault(pid, []).append(SleepEpochSeries(pid, night, epochs))
    return out


def write_assessments_csv(path, assessments):
    rows = [{"patient_id": a.patient_id, "horizon": a.horizon, "date": a.date.isoformat(), "pss": a.pss}
            for a in sorted(assessments, key=lambda a: (a.patient_id, a.horizon))]
    pd.DataFrame(rows, columns=["patient_id", "horizon", "date", "pss"]).to_csv(path, index=False)
    return path


def read_assessments_csv(path):
    frame = _read_table(path, ("patient_id", "horizon", "date", "pss"))
    out = []
    for row in frame.itertuples(index=False):
        if pd.isna(row.pss):
            continue
        pss = float(row.pss)
        if not pss.is_integer():
            raise DataError(f"{path}: PSS must be an integer, got {row.pss} for {row.patient_id}")
        out.append(Assessment(str(row.patient_id), str(row.horizon), _to_date(row.date), int(pss)))
    return out


def _read_table(path, required):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"input file '{path}' not found")
    try:
        frame = pd.read_csv(path, dtype={"patient_id": str, "date": str})
    except pd.errors.ParserError as e:
        raise DataError(f"cannot parse {path}: {e}") from e
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    return frame


# --- Synthetic cohort on disk ---

def write_cohort(cohort, out_dir, feature_names=DEFAULT_ACTIVITY_FEATURES, ecg_format="bin", verbose=True):
    """
    Writes a SyntheticCohort in the ingestion formats.

    Layout: ecg/<patient>_<stamp>.bin(+.json), activity.csv, sleep_nights.csv,
    sleep_epochs.jsonl, assessments.csv, profiles.csv (planted latent stress).
    """
    ecg_dir = os.path.join(out_dir, ECG_DIR)
    os.makedirs(ecg_dir, exist_ok=True)
    n_ecg = 0
    for pid in cohort.patient_ids():
        for session in cohort.ecg_sessions.get(pid, []):
            rec = session.recording()
            stem = os.path.join(ecg_dir, ecg_stem(pid, rec.start_time))
            if ecg_format == "csv":
                write_ecg_csv(stem + ".csv", rec)
            else:
                write_ecg_bin(stem + ".bin", rec)
            n_ecg += 1
        if verbose:
            print(f"  -> Wrote {len(cohort.ecg_sessions.get(pid, []))} ECG recording(s) for {pid}")
    write_activity_csv(os.path.join(out_dir, ACTIVITY_FILE), cohort.daily_activity, feature_names)
    write_sleep_nights_csv(os.path.join(out_dir, SLEEP_NIGHTS_FILE), cohort.sleep_nights)
    write_sleep_epochs_jsonl(os.path.join(out_dir, SLEEP_EPOCHS_FILE), cohort.sleep_epochs)
    write_assessments_csv(os.path.join(out_dir, ASSESSMENTS_FILE), cohort.assessments())
    profiles = pd.DataFrame(
        [{"patient_id": p.patient_id, "latent_stress": p.latent_stress,
          "baseline_date": p.baseline_date.isoformat(), "adherence": p.adherence} for p in cohort.profiles],
        columns=["patient_id", "latent_stress", "baseline_date", "adherence"],
    )
    profiles.to_csv(os.path.join(out_dir, PROFILES_FILE), index=False)
    if verbose:
        print(f"Cohort written to '{out_dir}': {len(cohort.profiles)} patients, {n_ecg} ECG recordings")
    return out_dir


# --- Instance rasters ---

def instance_path(out_dir, patient_id, source):
    return os.path.join(out_dir, f"{patient_id}_{source}{INSTANCE_SUFFIX}")


def write_instances(path, images, png_dir=None):
    """
    Stores InstanceImages as 8-bit rasters in one compressed npz.

    With `png_dir`, every raster is also written as a grayscale PNG.
    """
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    if images:
        pixels = np.stack([np.round(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8) for img in images])
    else:
        pixels = np.zeros((0, 0, 0), dtype=np.uint8)
    np.savez_compressed(
        path,
        pixels=pixels,
        modality_ids=np.array([img.modality_id for img in images], dtype=np.uint8),
        view_kinds=np.array([img.view_kind for img in images], dtype=str),
        instants=np.array([img.instant.isoformat() for img in images], dtype=str),
        patient_ids=np.array([img.patient_id for img in images], dtype=str),
    )
    if png_dir:
        os.makedirs(png_dir, exist_ok=True)
        for i, img in enumerate(images):
            name = f"{img.patient_id}_{img.instant.strftime(STAMP_FORMAT)}_{img.view_kind}_{i:04d}.png"
            write_png(img.pixels, os.path.join(png_dir, name))
    return path


def read_instances(path):
    try:
        with np.load(path, allow_pickle=False) as data:
            pixels = data["pixels"]
            return [
                InstanceImage(
                    pixels=pixels[i].astype(np.float64) / 255.0,
                    modality_id=int(m),
                    view_kind=str(v),
                    instant=datetime.fromisoformat(str(t)),
                    patient_id=str(pid),
                )
                for i, (m, v, t, pid) in enumerate(zip(
                    data["modality_ids"], data["view_kinds"], data["instants"], data["patient_ids"]))
            ]
    except (KeyError, ValueError, OSError) as e:
        raise DataError(f"cannot read instance file {path}: {e}") from e


def list_instance_files(instance_dir):
    if not os.path.isdir(instance_dir):
        raise FileNotFoundError(f"instance directory '{instance_dir}' not found")
    return sorted(os.path.join(instance_dir, f) for f in os.listdir(instance_dir) if f.endswith(INSTANCE_SUFFIX))
