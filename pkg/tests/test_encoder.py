# Unit tests for encoder.py

from datetime import datetime

import numpy as np
import pytest

from wearmil.ecg_transforms import MODALITY_ACTIVITY, MODALITY_ECG, InstanceImage
from wearmil.encoder import (
    EMBEDDING_DIM,
    SUBENCODER_DIM,
    GateParams,
    ReferenceSubEncoder,
    encode_instance,
    fuse_external,
    fuse_subencoder_outputs,
    gate,
    layer_norm,
    read_embeddings,
    read_external_vectors,
    reference_encoder,
    reference_subencoder,
    write_embeddings,
    write_external_vectors,
)
from wearmil.errors import ConfigurationError, FormatError
from wearmil.utils.config_utils import EncoderConfig
from wearmil.utils.image_utils import RASTER_SIZE


def _image(seed=0, modality_id=MODALITY_ECG, view_kind="recurrence", instant=datetime(2024, 1, 8, 9)):
    pixels = np.random.default_rng(seed).random((RASTER_SIZE, RASTER_SIZE))
    return InstanceImage(pixels, modality_id, view_kind, instant, "P001")


@pytest.fixture(scope="module")
def encoder():
    return reference_encoder(0)


def test_embedding_shape_and_normalization(encoder):
    e = encoder.encode(_image())
    assert e.values.shape == (EMBEDDING_DIM,)
    assert e.values.mean() == pytest.approx(0.0, abs=1e-9)
    assert np.mean(e.values ** 2) == pytest.approx(1.0, abs=1e-3)
    assert e.modality_id == MODALITY_ECG
    assert e.patient_id == "P001"


def test_encoding_is_deterministic(encoder):
    img = _image(3)
    assert np.array_equal(encoder.encode(img).values, reference_encoder(0).encode(img).values)
    assert not np.array_equal(encoder.encode(img).values, reference_encoder(1).encode(img).values)


def test_metadata_never_changes_values(encoder):
    a = encoder.encode(_image(5, MODALITY_ECG, "recurrence", datetime(2024, 1, 1)))
    b = encoder.encode(_image(5, MODALITY_ACTIVITY, "activity_heatmap", datetime(2025, 6, 1)))
    assert np.array_equal(a.values, b.values)


def test_gate_outputs_in_unit_interval():
    p = GateParams.seeded(0, 1)
    rng = np.random.default_rng(1)
    for _ in range(50):
        g = gate(rng.normal(scale=5.0, size=SUBENCODER_DIM), p)
        assert g.min() >= 0.0 and g.max() <= 1.0


def test_open_gates_reduce_to_normalized_concatenation():
    rng = np.random.default_rng(2)
    z1, z2 = rng.normal(size=SUBENCODER_DIM), rng.normal(size=SUBENCODER_DIM)
    gates = (GateParams.constant(1.0), GateParams.constant(1.0))
    e, fused = fuse_subencoder_outputs(z1, z2, gates, return_parts=True)
    assert np.allclose(fused, np.concatenate([layer_norm(z1), layer_norm(z2)]))
    assert np.allclose(e, layer_norm(fused))


def test_closed_gate_silences_its_branch():
    rng = np.random.default_rng(3)
    z1, z2 = rng.normal(size=SUBENCODER_DIM), rng.normal(size=SUBENCODER_DIM)
    gates = (GateParams.constant(0.0), GateParams.constant(1.0))
    _, fused = fuse_subencoder_outputs(z1, z2, gates, return_parts=True)
    assert np.all(fused[:SUBENCODER_DIM] == 0.0)


def test_wrong_subencoder_width_is_configuration_error():
    class Narrow(ReferenceSubEncoder):
        def encode_pixels(self, channels):
            return np.zeros(64)

    gates = (GateParams.seeded(0, 1), GateParams.seeded(0, 2))
    with pytest.raises(ConfigurationError):
        encode_instance(_image(), Narrow(0), ReferenceSubEncoder(1), gates)
    with pytest.raises(ConfigurationError):
        reference_encoder(0, EncoderConfig(dim=64))


def test_layer_norm_needs_two_values():
    with pytest.raises(ValueError):
        layer_norm(np.array([1.0]))


def test_reference_subencoder_is_odd():
    assert np.all(reference_subencoder(np.zeros((RASTER_SIZE, RASTER_SIZE)), seed=2) == 0.0)
    img = _image(seed=4)
    z = reference_subencoder(img, seed=2)
    assert z.shape == (SUBENCODER_DIM,)
    assert np.array_equal(reference_subencoder(-img.pixels, seed=2), -z)
    # one 4x4 pooling block changed
    other = img.pixels.copy()
    other[:4, :4] += 0.5
    assert not np.array_equal(reference_subencoder(other, seed=2), z)


def test_identity_names_both_branches(encoder):
    assert encoder.identity.count("reference-rp") == 2


def test_embedding_cache(tmp_path, encoder):
    embeddings = encoder.encode_all([_image(i) for i in range(3)])
    path = write_embeddings(str(tmp_path / "P001.npz"), embeddings)
    back = read_embeddings(path)
    assert len(back) == 3
    assert all(np.array_equal(a.values, b.values) and a.instant == b.instant for a, b in zip(embeddings, back))


def test_external_vectors(tmp_path):
    rng = np.random.default_rng(4)
    v1 = rng.normal(size=(2, SUBENCODER_DIM))
    v2 = rng.normal(size=(2, SUBENCODER_DIM))
    p1 = write_external_vectors(str(tmp_path / "enc1.f32"), v1, "backbone-a")
    p2 = write_external_vectors(str(tmp_path / "enc2.f32"), v2, "backbone-b")
    m1, sidecar = read_external_vectors(p1)
    m2, _ = read_external_vectors(p2)
    assert sidecar == {"n": 2, "d": SUBENCODER_DIM, "encoder_id": "backbone-a"}
    gates = (GateParams.seeded(0, 1), GateParams.seeded(0, 2))
    embeddings = fuse_external(m1, m2, [_image(0), _image(1)], gates)
    assert len(embeddings) == 2
    assert np.allclose(embeddings[0].values, fuse_subencoder_outputs(m1[0], m2[0], gates))


def test_external_vectors_format_errors(tmp_path):
    path = tmp_path / "bad.f32"
    path.write_bytes(np.zeros(10, dtype="<f4").tobytes())
    (tmp_path / "bad.f32.json").write_text('{"n": 1, "d": 64, "encoder_id": "x"}')
    with pytest.raises(ConfigurationError):
        read_external_vectors(str(path))
    (tmp_path / "bad.f32.json").write_text('{"n": 1, "d": 96, "encoder_id": "x"}')
    with pytest.raises(FormatError):
        read_external_vectors(str(path))
    with pytest.raises(ConfigurationError):
        write_external_vectors(str(tmp_path / "x.f32"), np.zeros((2, 5)), "x")
