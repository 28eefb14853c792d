"""
Synthetic embedding datasets standing in for the proprietary voice corpus.
"""

import numpy as np

from src.guard.domain import EMBED_DIM, EmbeddingDataset, Label
from utils.splitmix import SplitMix64

CORPUS_SAFE = 4310
CORPUS_MALICIOUS = 2000


def two_gaussian_dataset(n_per_class: int, dim: int = EMBED_DIM, sigma: float = 0.1,
                         separation: float = 1.0, seed: int = 0) -> EmbeddingDataset:
    """Two isotropic Gaussian clusters whose centres lie `separation` apart

    The centres sit at +/- separation / 2 along a seeded random unit direction.
    Records are interleaved safe, malicious, safe, ...
    """
    rng = SplitMix64(seed)
    direction = rng.normal(dim)
    direction /= np.linalg.norm(direction)
    offset = 0.5 * separation * direction

    noise = rng.normal(2 * n_per_class * dim).reshape(2 * n_per_class, dim) * sigma
    labels = np.tile(np.array([Label.SAFE, Label.MALICIOUS], dtype=np.uint8), n_per_class)
    centres = np.where(labels[:, None] == Label.MALICIOUS, offset, -offset)
    return EmbeddingDataset((centres + noise).astype(np.float32), labels)


def corpus_label_vector() -> np.ndarray:
    """Labels with the corpus composition: 4310 safe followed by 2000 malicious"""
    return np.concatenate([np.full(CORPUS_SAFE, Label.SAFE, dtype=np.uint8),
                           np.full(CORPUS_MALICIOUS, Label.MALICIOUS, dtype=np.uint8)])
