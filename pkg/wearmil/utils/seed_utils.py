import hashlib

import numpy as np


def derive_seed(seed, *parts):
    """
    Derives a stage-specific seed from the single run seed.

    The derivation hashes the run seed together with the stage name and any
    further identifiers (patient id, horizon, epoch, ...), so that every random
    draw in the pipeline is reproducible from one `--seed` and independent of
    the order in which patients, folds or windows are processed.

    Args:
        seed (int): The run seed.
        *parts: Stage name followed by identifiers; converted with str().

    Returns:
        int: A 63-bit non-negative seed.
    """
    key = "|".join([str(int(seed))] + [str(p) for p in parts])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(seed, *parts):
    """Returns a numpy Generator seeded by derive_seed(seed, *parts)."""
    return np.random.default_rng(derive_seed(seed, *parts))
