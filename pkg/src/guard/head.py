"""
Classification path: mean pooling, Linear -> GELU -> Dropout -> Linear head,
softmax and the threshold decision.

Arrays follow the PyTorch Linear layout (w1 is hidden x input). Functions accept
a single vector or a batch of row vectors. The dtype of HeadParams sets the
working precision; float64 heads are the verification mode.
"""

import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import erf

from src.guard.domain import (
    Decision,
    DEFAULT_THRESHOLD,
    EMBED_DIM,
    EmbeddingSequence,
    HEAD_PARAMETER_COUNT,
    HIDDEN_DIM,
    HeadParams,
    Label,
    N_CLASSES,
    REVIEW_BAND,
)
from src.guard.errors import EmptySequence, HeadShapeError, NonFiniteInput, OutOfRange
from utils.binary_formats import read_head, write_head
from utils.splitmix import SplitMix64

logger = logging.getLogger(__name__)

DROPOUT_P = 0.1
_SQRT_HALF = np.sqrt(0.5)


def mean_pool(embeddings: Union[EmbeddingSequence, np.ndarray]) -> np.ndarray:
    """Component-wise mean over the time axis"""
    values = embeddings.values if isinstance(embeddings, EmbeddingSequence) else np.asarray(embeddings)
    if values.ndim != 2 or values.shape[0] == 0:
        raise EmptySequence(f"need at least one embedding row, got shape {values.shape}")
    # float64 accumulator over the 1500 rows
    return values.mean(axis=0, dtype=np.float64).astype(values.dtype)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, x * Phi(x)"""
    return x * 0.5 * (1.0 + erf(x * _SQRT_HALF))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def init_head(rng: SplitMix64, dims: Tuple[int, int, int] = (EMBED_DIM, HIDDEN_DIM, N_CLASSES),
              dtype=np.float32) -> HeadParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, the nn.Linear default"""
    d_in, d_hidden, d_out = dims

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform_range(-bound, bound, int(np.prod(shape))).reshape(shape).astype(dtype)

    return HeadParams(
        w1=uniform(d_in, (d_hidden, d_in)),
        b1=uniform(d_in, (d_hidden,)),
        w2=uniform(d_hidden, (d_out, d_hidden)),
        b2=uniform(d_hidden, (d_out,)),
    )


def dropout_mask(rng: SplitMix64, shape, p: float, dtype=np.float32) -> np.ndarray:
    """Inverted dropout mask: 0 or 1 / (1 - p)"""
    if p <= 0.0:
        return np.ones(shape, dtype=dtype)
    keep = 1.0 - p
    return (rng.bernoulli_mask(shape, keep) / keep).astype(dtype)


def forward_cache(h: np.ndarray, params: HeadParams, mask: Optional[np.ndarray] = None):
    """Forward pass keeping intermediates for backpropagation

    Returns:
        (pre_activation, hidden_after_dropout, logits)
    """
    z1 = h @ params.w1.T + params.b1
    a1 = gelu(z1)
    if mask is not None:
        a1 = a1 * mask
    logits = a1 @ params.w2.T + params.b2
    return z1, a1, logits


def head_forward(h: np.ndarray, params: HeadParams, rng: Optional[SplitMix64] = None,
                 dropout_p: float = DROPOUT_P) -> np.ndarray:
    """Logits of the head

    Args:
        h: Pooled embedding (input,) or batch (n, input)
        params: Head parameters
        rng: Train mode when given (dropout masks drawn from it); infer mode when None
        dropout_p: Drop probability in train mode

    Raises:
        NonFiniteInput: h contains NaN or infinity
    """
    h = np.asarray(h, dtype=params.dtype)
    if not np.isfinite(h).all():
        raise NonFiniteInput("pooled embedding contains non-finite values")
    mask = None
    if rng is not None:
        mask = dropout_mask(rng, h.shape[:-1] + (params.b1.shape[0],), dropout_p, params.dtype)
    return forward_cache(h, params, mask)[2]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction"""
    logits = np.asarray(logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def decide(p_malicious: float, threshold: float = DEFAULT_THRESHOLD,
           review_band: Tuple[float, float] = REVIEW_BAND) -> Decision:
    """MALICIOUS iff p >= threshold (fail-closed); review iff p in the closed band"""
    if not 0.0 <= p_malicious <= 1.0:
        raise OutOfRange(f"p_malicious must lie in [0, 1], got {p_malicious}")
    if not 0.0 < threshold < 1.0:
        raise OutOfRange(f"threshold must lie in (0, 1), got {threshold}")
    low, high = review_band
    label = Label.MALICIOUS if p_malicious >= threshold else Label.SAFE
    return Decision(label=label, p_malicious=float(p_malicious), threshold=float(threshold),
                    review=bool(low <= p_malicious <= high))


def predict_proba(h_batch: np.ndarray, params: HeadParams) -> np.ndarray:
    """p_malicious per row, infer mode"""
    return softmax(head_forward(h_batch, params))[..., Label.MALICIOUS].astype(np.float64)


def classify_embeddings(embeddings: EmbeddingSequence, params: HeadParams,
                        threshold: float = DEFAULT_THRESHOLD,
                        review_band: Tuple[float, float] = REVIEW_BAND) -> Decision:
    """mean_pool -> head_forward(infer) -> softmax -> decide"""
    pooled = mean_pool(embeddings)
    return decide(float(predict_proba(pooled, params)), threshold, review_band)


def save_head(params: HeadParams, path: Union[str, Path]) -> None:
    write_head(params.astype(np.float32), path)
    logger.info("Wrote head with %d parameters to %s", params.n_parameters, path)


def load_head(path: Union[str, Path], expected_count: Optional[int] = HEAD_PARAMETER_COUNT) -> HeadParams:
    """Read a VSHP1 head, asserting its parameter count

    Raises:
        HeadShapeError: Parameter count differs from expected_count
        NonFiniteInput: Stored weights contain NaN or infinity
    """
    params = read_head(path)
    if expected_count is not None and params.n_parameters != expected_count:
        raise HeadShapeError(
            f"head {path} has {params.n_parameters} parameters, expected {expected_count}")
    if not params.is_finite():
        raise NonFiniteInput(f"head {path} contains non-finite weights")
    return params
