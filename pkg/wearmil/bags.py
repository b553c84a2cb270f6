"""
Patient-horizon bags: leakage-free assembly, instance capping, the WMB1
container, and per-modality count tables.

WMB1 layout (all integers little-endian):

    bytes 0..3   magic b"WMB1"
    bytes 4..    zlib (deflate) stream of the body

    body:
    uint32       header length H
    H bytes      UTF-8 JSON {patient_id, horizon, n, dim, target, instants}
    n*dim*4      float32 embeddings, row-major
    n            uint8 modality ids
"""
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from datetime import date, datetime, time

import numpy as np
import pandas as pd

from .ecg_transforms import MODALITY_NAMES
from .errors import DataError, FormatError
from .utils.seed_utils import rng_for

MAGIC = b"WMB1"
BAG_SUFFIX = ".wmb"
HORIZONS = ("M3", "M6")
HORIZON_ALIASES = {
    "m3": "M3", "M3": "M3", "M3->M3": "M3", "M3→M3": "M3",
    "m6": "M6", "M6": "M6", "ALL->M6": "M6", "ALL→M6": "M6",
}
CAP_POLICIES = ("uniform", "latest")


def normalize_horizon(horizon):
    try:
        return HORIZON_ALIASES[horizon]
    except KeyError:
        raise ValueError(f"unknown horizon '{horizon}'; expected one of m3, m6") from None


@dataclass
class Assessment:
    patient_id: str
    horizon: str
    date: date
    pss: int

    def __post_init__(self):
        self.horizon = normalize_horizon(self.horizon)
        if not 0 <= self.pss <= 40:
            raise DataError(f"PSS {self.pss} for {self.patient_id} {self.horizon} outside [0, 40]")


@dataclass
class Bag:
    patient_id: str
    horizon: str
    embeddings: np.ndarray
    modality_ids: np.ndarray
    instants: list
    target: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.modality_ids = np.asarray(self.modality_ids, dtype=np.uint8)
        n = self.embeddings.shape[0] if self.embeddings.ndim == 2 else 0
        if n < 1:
            raise ValueError(f"bag {self.patient_id}/{self.horizon} has no instances")
        if self.modality_ids.shape != (n,) or len(self.instants) != n:
            raise ValueError(f"bag {self.patient_id}/{self.horizon}: embeddings, modality ids and instants misaligned")

    @property
    def bag_id(self):
        return f"{self.patient_id}_{self.horizon}"

    @property
    def n(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Bag(
            patient_id=self.patient_id,
            horizon=self.horizon,
            embeddings=self.embeddings[indices],
            modality_ids=self.modality_ids[indices],
            instants=[self.instants[i] for i in indices],
            target=self.target,
            meta=dict(self.meta),
        )

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.horizon == other.horizon
            and self.target == other.target
            and self.instants == other.instants
            and np.array_equal(self.modality_ids, other.modality_ids)
            and self.embeddings.shape == other.embeddings.shape
            and self.embeddings.tobytes() == other.embeddings.tobytes()
        )


def _assessment_table(assessments):
    table = {}
    for a in assessments:
        per_patient = table.setdefault(a.patient_id, {})
        if a.horizon in per_patient:
            raise DataError(f"duplicate {a.horizon} assessment for {a.patient_id}")
        per_patient[a.horizon] = a
    for pid, per_patient in table.items():
        if "M3" in per_patient and "M6" in per_patient and per_patient["M6"].date <= per_patient["M3"].date:
            raise DataError(
                f"{pid}: M6 assessment ({per_patient['M6'].date}) is not after M3 ({per_patient['M3'].date})"
            )
    return table


def assessment_cutoff(a):
    """Latest instant eligible for an assessment: the end of its day."""
    return datetime.combine(a.date, time.max)


def build_bags(embeddings, assessments, horizon_setting, verbose=True):
    """
    Assembles one bag per patient for a horizon setting.

    M3 (M3->M3) bags hold instances up to the M3 assessment date; M6
    (ALL->M6) bags hold every instance up to the M6 date, pre-M3 data
    included. Instances never move from a later period to an earlier label.

    Args:
        embeddings (dict): patient id -> list of Embedding.
        assessments (list): Assessment records.
        horizon_setting (str): "M3" / "m3" / "M3->M3" or "M6" / "m6" / "ALL->M6".
        verbose (bool): Print a line for every skipped patient.

    Returns:
        list: Bags sorted by patient id.

    Raises:
        DataError: when a patient's M6 date does not follow its M3 date.
    """
    horizon = normalize_horizon(horizon_setting)
    table = _assessment_table(assessments)
    bags = []
    for pid in sorted(embeddings):
        # No label for this horizon, no bag
        a = table.get(pid, {}).get(horizon)
        if a is None:
            if verbose:
                print(f"  -> Skipping {pid}: no {horizon} assessment")
            continue
        # Only instances up to the end of the assessment day
        cutoff = assessment_cutoff(a)
        eligible = sorted((e for e in embeddings[pid] if e.instant <= cutoff), key=lambda e: e.instant)
        if not eligible:
            if verbose:
                print(f"  -> Skipping {pid}: no instance on or before the {horizon} date {a.date}")
            continue
        bags.append(Bag(
            patient_id=pid,
            horizon=horizon,
            embeddings=np.stack([np.asarray(e.values, dtype=np.float32) for e in eligible]),
            modality_ids=np.array([e.modality_id for e in eligible], dtype=np.uint8),
            instants=[e.instant for e in eligible],
            target=float(a.pss),
        ))
    return bags


def cap_instances(b, max_n=512, seed=0, policy="uniform"):
    """
    Caps a bag at `max_n` instances.

    "uniform" draws a subsample without replacement seeded by
    (seed, patient, horizon); "latest" keeps the most recent instances.
    Retained rows keep their original relative order.
    """
    if max_n < 1:
        raise ValueError(f"max_n must be >= 1, got {max_n}")
    if policy not in CAP_POLICIES:
        raise ValueError(f"cap policy must be one of {CAP_POLICIES}, got '{policy}'")
    if b.n <= max_n:
        return b
    if policy == "uniform":
        chosen = rng_for(seed, "cap", b.patient_id, b.horizon).choice(b.n, size=max_n, replace=False)
        keep = np.sort(chosen)
    else:
        order = sorted(range(b.n), key=lambda i: (b.instants[i], i))
        keep = np.sort(np.asarray(order[-max_n:]))
    capped = b.subset(keep)
    capped.meta["capped_from"] = b.n
    return capped


def filter_modalities(b, modality_ids):
    """Keeps the instances whose modality is in `modality_ids`; None if none remain."""
    keep = np.flatnonzero(np.isin(b.modality_ids, list(modality_ids)))
    if len(keep) == 0:
        return None
    if len(keep) == b.n:
        return b
    return b.subset(keep)


# --- WMB1 container ---

def pack_container(header, embeddings_bytes, modality_bytes):
    """Serializes a header dict and raw payloads into a WMB1 byte string."""
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = struct.pack("<I", len(header_bytes)) + header_bytes + embeddings_bytes + modality_bytes
    return MAGIC + zlib.compress(body, 6)


def write_bag(b, path):
    header = {
        "patient_id": b.patient_id,
        "horizon": b.horizon,
        "n": b.n,
        "dim": b.dim,
        "target": b.target,
        "instants": [t.isoformat() for t in b.instants],
    }
    payload = pack_container(
        header,
        b.embeddings.astype("<f4").tobytes(),
        b.modality_ids.astype(np.uint8).tobytes(),
    )
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(payload)
    return path


def decode_bag(raw, expected_dim=None):
    """Parses WMB1 bytes; offsets in errors refer to the file for the magic, to the body otherwise."""
    # Magic, then a zlib body
    if len(raw) < len(MAGIC):
        raise FormatError("file shorter than the WMB1 magic", len(raw))
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0)
    try:
        body = zlib.decompress(raw[4:])
    except zlib.error as e:
        raise FormatError(f"corrupt compressed body: {e}", 4) from e

    # Body: u32 header length, JSON header, float32 embeddings, uint8 modality ids
    if len(body) < 4:
        raise FormatError("body shorter than its header length prefix", len(body))
    (header_len,) = struct.unpack_from("<I", body, 0)
    if 4 + header_len > len(body):
        raise FormatError(f"header of {header_len} bytes truncated", len(body))
    try:
        header = json.loads(body[4:4 + header_len].decode("utf-8"))
        n, dim = int(header["n"]), int(header["dim"])
        instants = [datetime.fromisoformat(t) for t in header["instants"]]
        patient_id, horizon, target = header["patient_id"], header["horizon"], header["target"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise FormatError(f"invalid bag header: {e}", 4) from e
    if expected_dim is not None and dim != expected_dim:
        raise FormatError(f"embedding dimension {dim} does not match expected {expected_dim}", 4)
    if len(instants) != n:
        raise FormatError(f"header lists {len(instants)} instants for n={n}", 4)
    # Payload must be exactly n*dim floats plus n modality bytes
    offset = 4 + header_len
    emb_len = n * dim * 4
    available = len(body) - offset
    if available < emb_len + n:
        rows = min(n, available // (dim * 4)) if dim else 0
        raise FormatError(f"truncated: header n={n} but {rows} embedding rows present", len(body))
    if available > emb_len + n:
        raise FormatError(f"{available - emb_len - n} trailing bytes after modality ids", offset + emb_len + n)
    embeddings = np.frombuffer(body, dtype="<f4", count=n * dim, offset=offset).reshape(n, dim).astype(np.float32)
    modality_ids = np.frombuffer(body, dtype=np.uint8, count=n, offset=offset + emb_len).copy()
    if n and modality_ids.max() >= len(MODALITY_NAMES):
        raise FormatError(f"modality id {modality_ids.max()} out of range", offset + emb_len)
    return Bag(patient_id, horizon, embeddings, modality_ids, instants, target)


def read_bag(path, expected_dim=None):
    with open(path, "rb") as f:
        raw = f.read()
    return decode_bag(raw, expected_dim)


def bag_filename(b):
    return f"{b.bag_id}{BAG_SUFFIX}"


def write_bags(bags, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    return [write_bag(b, os.path.join(out_dir, bag_filename(b))) for b in bags]


def load_bag_dir(bag_dir, horizon=None, verbose=True):
    """
    Reads every *.wmb file in a directory, optionally only one horizon.

    Unreadable files are reported and counted; a missing directory raises
    FileNotFoundError.
    """
    if not os.path.isdir(bag_dir):
        raise FileNotFoundError(f"bag directory '{bag_dir}' not found")
    wanted = normalize_horizon(horizon) if horizon else None
    bags, failed = [], 0
    for filename in sorted(os.listdir(bag_dir)):
        if not filename.endswith(BAG_SUFFIX):
            continue
        try:
            b = read_bag(os.path.join(bag_dir, filename))
        except FormatError as e:
            print(f"  -> Error reading {filename}: {e}. Skipping.")
            failed += 1
            continue
        if wanted is None or b.horizon == wanted:
            bags.append(b)
    if verbose:
        print(f"Loaded {len(bags)} bags from '{bag_dir}' (failed: {failed})")
    return sorted(bags, key=lambda b: (b.patient_id, b.horizon))


def tabulate_bag_counts(bags):
    """
    Modality x horizon table of instance and bag counts.

    Returns:
        pd.DataFrame: one row per modality plus "total", columns
        `<H>_instances` and `<H>_bags` per horizon present.
    """
    horizons = sorted({b.horizon for b in bags})
    rows = []
    for modality_id, name in list(MODALITY_NAMES.items()) + [(None, "total")]:
        row = {"modality": name}
        for h in horizons:
            in_h = [b for b in bags if b.horizon == h]
            if modality_id is None:
                row[f"{h}_instances"] = int(sum(b.n for b in in_h))
                row[f"{h}_bags"] = len(in_h)
            else:
                counts = [int(np.count_nonzero(b.modality_ids == modality_id)) for b in in_h]
                row[f"{h}_instances"] = int(sum(counts))
                row[f"{h}_bags"] = int(sum(1 for c in counts if c > 0))
        rows.append(row)
    columns = ["modality"] + [f"{h}_{kind}" for h in horizons for kind in ("instances", "bags")]
    return pd.DataFrame(rows, columns=columns)
