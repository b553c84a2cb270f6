"""
Gated dual-encoder fusion of instance images into 192-d embeddings.

    z_k  = enc_k(LN_img(image))                 k = 1, 2; each 96-d
    z^_k = LN_k(z_k) * gate_k(z_k)
    e    = LN_out([z^_1; z^_2])

gate(z) = Hardtanh(0,1)(W ELU(z) + b). Layer norms here carry no affine
terms. Sub-encoders are pluggable; the reference one is a seeded random
projection of the pooled raster.
"""
import json
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .errors import ConfigurationError, DataError, FormatError
from .utils.config_utils import EncoderConfig
from .utils.image_utils import RASTER_SIZE
from .utils.seed_utils import derive_seed, rng_for

SUBENCODER_DIM = 96
EMBEDDING_DIM = 2 * SUBENCODER_DIM
LN_EPS = 1e-5


@dataclass
class Embedding:
    values: np.ndarray
    modality_id: int
    patient_id: str
    instant: datetime
    view_kind: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (EMBEDDING_DIM,):
            raise ValueError(f"embedding must have {EMBEDDING_DIM} values, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite embedding for {self.patient_id} at {self.instant}")


@dataclass
class GateParams:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        d = self.bias.shape[0]
        if self.weight.shape != (d, d):
            raise ConfigurationError(f"gate weight shape {self.weight.shape} does not match bias ({d},)")

    @classmethod
    def constant(cls, value, dim=SUBENCODER_DIM):
        return cls(np.zeros((dim, dim)), np.full(dim, float(value)))

    @classmethod
    def seeded(cls, seed, branch, dim=SUBENCODER_DIM):
        rng = rng_for(seed, "gate", branch)
        bound = 1.0 / np.sqrt(dim)
        return cls(rng.uniform(-bound, bound, size=(dim, dim)), rng.uniform(0.25, 0.75, size=dim))


def layer_norm(x, eps=LN_EPS):
    """(x - mean) / sqrt(var + eps) with the population variance; no affine terms."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise ValueError("layer_norm needs at least 2 values")
    centered = x - x.mean()
    return centered / np.sqrt((centered ** 2).mean() + eps)


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def gate(z, p):
    """Hardtanh(0,1)(W ELU(z) + b); every output lies in [0,1]."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != p.bias.shape:
        raise ValueError(f"gate input has shape {z.shape}, parameters expect {p.bias.shape}")
    return np.clip(p.weight @ _elu(z) + p.bias, 0.0, 1.0)


class SubEncoder(ABC):
    """An image -> 96-d map with a stable identity; deterministic for a fixed seed."""

    dim = SUBENCODER_DIM

    def __init__(self, seed=0):
        self.seed = int(seed)

    @property
    @abstractmethod
    def identity(self):
        ...

    @abstractmethod
    def encode_pixels(self, channels):
        """Maps a (3, 224, 224) array to a vector of length `dim`."""

    def __call__(self, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = np.broadcast_to(pixels, (3,) + pixels.shape)
        return np.asarray(self.encode_pixels(pixels), dtype=np.float64)


class ReferenceSubEncoder(SubEncoder):
    """4x4 average pooling, flatten, seeded +-1/sqrt(n) sign projection, tanh."""

    def __init__(self, seed=0, pool=4, dim=SUBENCODER_DIM):
        super().__init__(seed)
        if RASTER_SIZE % pool:
            raise ConfigurationError(f"pool size {pool} does not divide the raster size {RASTER_SIZE}")
        self.pool = pool
        self.dim = dim
        side = RASTER_SIZE // pool
        n_in = side * side
        signs = rng_for(self.seed, "subencoder_projection").integers(0, 2, size=(n_in, dim)) * 2 - 1
        self.projection = signs / np.sqrt(n_in)

    @property
    def identity(self):
        return f"reference-rp-pool{self.pool}-d{self.dim}-seed{self.seed}"

    def encode_pixels(self, channels):
        gray = channels.mean(axis=0)
        side = gray.shape[0] // self.pool
        pooled = gray.reshape(side, self.pool, side, self.pool).mean(axis=(1, 3))
        return np.tanh(pooled.ravel() @ self.projection)


def reference_subencoder(img, seed):
    """The reference sub-encoder applied to an InstanceImage (or raw raster)."""
    pixels = img.pixels if hasattr(img, "pixels") else img
    return ReferenceSubEncoder(seed)(pixels)


def fuse_subencoder_outputs(z1, z2, gates, return_parts=False):
    """
    Gated fusion of two 96-d sub-encoder outputs into the 192-d embedding.

    Returns:
        np.ndarray, or (embedding, pre-normalization concatenation) when
        `return_parts` is set.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    for k, z in enumerate((z1, z2), start=1):
        if z.shape != (SUBENCODER_DIM,):
            raise ConfigurationError(f"sub-encoder {k} produced {z.shape[-1] if z.ndim else 0} dims, expected {SUBENCODER_DIM}")
    # each branch: LN(z_k) scaled by its gate, then concatenated and normalized again
    gate1, gate2 = gates
    fused = np.concatenate([layer_norm(z1) * gate(z1, gate1), layer_norm(z2) * gate(z2, gate2)])
    e = layer_norm(fused)
    return (e, fused) if return_parts else e


def encode_instance(img, enc1, enc2, gates):
    """
    Embeds one InstanceImage.

    The pixel matrix is layer-normalized as a whole, passed through both
    sub-encoders, gated and fused. Modality, patient and instant are copied
    from the image and never influence the values.

    Raises:
        ConfigurationError: when a sub-encoder output is not 96-d.
    """
    pixels = np.asarray(img.pixels, dtype=np.float64)
    # one layer norm over the whole raster
    normalized = layer_norm(pixels.ravel()).reshape(pixels.shape)
    z1, z2 = enc1(normalized), enc2(normalized)
    values = fuse_subencoder_outputs(z1, z2, gates)
    return Embedding(
        values=values,
        modality_id=img.modality_id,
        patient_id=img.patient_id,
        instant=img.instant,
        view_kind=img.view_kind,
    )


class DualEncoder:
    """Two sub-encoders plus their gates, fixed at construction."""

    def __init__(self, enc1, enc2, gates):
        self.enc1 = enc1
        self.enc2 = enc2
        self.gates = tuple(gates)

    @property
    def identity(self):
        return f"{self.enc1.identity}+{self.enc2.identity}"

    def encode(self, img):
        return encode_instance(img, self.enc1, self.enc2, self.gates)

    def encode_all(self, images):
        return [self.encode(img) for img in images]


def reference_encoder(seed, cfg=None):
    """Reference dual encoder; branch seeds and gate weights derive from the run seed."""
    cfg = cfg or EncoderConfig()
    if cfg.dim != SUBENCODER_DIM:
        raise ConfigurationError(f"encoder.dim must be {SUBENCODER_DIM}, got {cfg.dim}")
    enc1 = ReferenceSubEncoder(derive_seed(seed, "encoder", 1), cfg.pool, cfg.dim)
    enc2 = ReferenceSubEncoder(derive_seed(seed, "encoder", 2), cfg.pool, cfg.dim)
    gates = (GateParams.seeded(seed, 1, cfg.dim), GateParams.seeded(seed, 2, cfg.dim))
    return DualEncoder(enc1, enc2, gates)


# --- Embedding cache (one .npz per patient) ---

def write_embeddings(path, embeddings):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    if embeddings:
        values = np.stack([e.values for e in embeddings])
    else:
        values = np.zeros((0, EMBEDDING_DIM))
    np.savez_compressed(
        path,
        values=values,
        modality_ids=np.array([e.modality_id for e in embeddings], dtype=np.uint8),
        patient_ids=np.array([e.patient_id for e in embeddings], dtype=str),
        instants=np.array([e.instant.isoformat() for e in embeddings], dtype=str),
        view_kinds=np.array([e.view_kind for e in embeddings], dtype=str),
    )
    return path


def read_embeddings(path):
    try:
        with np.load(path, allow_pickle=False) as data:
            values = data["values"]
            return [
                Embedding(values[i], int(m), str(pid), datetime.fromisoformat(str(t)), str(v))
                for i, (m, pid, t, v) in enumerate(zip(
                    data["modality_ids"], data["patient_ids"], data["instants"], data["view_kinds"]))
            ]
    except (KeyError, ValueError, OSError) as e:
        raise DataError(f"cannot read embedding cache {path}: {e}") from e


# --- External sub-encoder vectors ---

def write_external_vectors(path, vectors, encoder_id):
    """Writes an n x 96 matrix as little-endian float32 plus a `<path>.json` sidecar {n, d, encoder_id}."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != SUBENCODER_DIM:
        raise ConfigurationError(f"external vectors must be n x {SUBENCODER_DIM}, got {vectors.shape}")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(vectors.astype("<f4").tobytes())
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump({"n": vectors.shape[0], "d": SUBENCODER_DIM, "encoder_id": encoder_id}, f, sort_keys=True)
    return path


def read_external_vectors(path):
    """Returns (n x 96 float64 matrix, sidecar dict)."""
    sidecar_path = path + ".json"
    if not os.path.isfile(sidecar_path):
        raise DataError(f"missing sidecar {sidecar_path}")
    with open(sidecar_path, "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    n, d = int(sidecar["n"]), int(sidecar["d"])
    if d != SUBENCODER_DIM:
        raise ConfigurationError(f"external encoder '{sidecar.get('encoder_id')}' has d={d}, expected {SUBENCODER_DIM}")
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) != n * d * 4:
        raise FormatError(f"expected {n * d * 4} bytes for n={n}, d={d}, found {len(raw)}", min(len(raw), n * d * 4))
    return np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64), sidecar


def fuse_external(vectors1, vectors2, images, gates):
    """Embeds images whose sub-encoder outputs were produced by an external process."""
    if not len(vectors1) == len(vectors2) == len(images):
        raise DataError("external vector files and instance list differ in length")
    return [
        Embedding(fuse_subencoder_outputs(z1, z2, gates), img.modality_id, img.patient_id, img.instant, img.view_kind)
        for z1, z2, img in zip(vectors1, vectors2, images)
    ]
