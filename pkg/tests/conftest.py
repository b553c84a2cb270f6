import os
from datetime import datetime, timedelta

import numpy as np
import pytest

from wearmil.bags import Bag
from wearmil.mil_model import TrainConfig

TEST_DATA_DIR = os.path.join(os.path.dirname(__file__), "test_data")


def make_bag(patient_id, target, n=6, dim=192, modality_ids=None, horizon="M3", seed=0, signal=0.0):
    """Random bag whose first embedding column is shifted by `signal * target`."""
    rng = np.random.default_rng(seed)
    embeddings = rng.normal(size=(n, dim))
    embeddings[:, 0] += signal * target
    if modality_ids is None:
        modality_ids = np.arange(n) % 3
    start = datetime(2024, 1, 1)
    return Bag(
        patient_id=patient_id,
        horizon=horizon,
        embeddings=embeddings,
        modality_ids=np.asarray(modality_ids),
        instants=[start + timedelta(days=i) for i in range(n)],
        target=float(target),
    )


@pytest.fixture
def tiny_train_config():
    """Narrow widths and few epochs so a whole LOSO run takes seconds."""
    return TrainConfig(
        max_epochs=6,
        patience=3,
        warmup_epochs=2,
        batch_bags=4,
        projector_hidden=16,
        projector_out=16,
        attention_hidden=8,
        head_hidden=8,
    )


@pytest.fixture
def cohort_bags():
    """Eight patients, one M3 bag each, targets spread over the PSS range."""
    targets = [4, 9, 13, 18, 22, 27, 31, 36]
    return [make_bag(f"P{i + 1:03d}", t, n=5, seed=i, signal=0.05) for i, t in enumerate(targets)]
