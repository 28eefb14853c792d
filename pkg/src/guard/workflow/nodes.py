import logging
import time
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from src.guard.domain import HeadParams, LogMelSpectrogram, MelFilterbank
from src.guard.head import decide, mean_pool, predict_proba
from utils.audio_io import prepare_audio
from utils.encoder_client import EncoderBackend
from utils.mel_frontend import log_mel_spectrogram

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassificationResources:
    """Immutable state shared by every request running through the graph"""
    filterbank: MelFilterbank
    backend: EncoderBackend
    head: HeadParams
    review_band: Tuple[float, float]
    transcription_pool: Optional[Executor] = None


def _timed(name: str, start: float) -> Dict[str, Dict[str, float]]:
    return {"timings": {name: (time.perf_counter() - start) * 1000.0}}


def _transcribe_safely(backend: EncoderBackend, spec: LogMelSpectrogram) -> Optional[str]:
    try:
        return backend.transcribe(spec)
    except Exception:
        # transcripts are advisory; a failure never touches the decision
        logger.exception("Transcription failed on backend %s", backend.kind)
        return None


def prepare_node(state: Dict[str, Any], resources: ClassificationResources) -> Dict[str, Any]:
    """Node to decode the request body into 30 s of 16 kHz mono audio

    Args:
        state: Current workflow state with 'audio_bytes' key

    Returns:
        Dict with 'buffer' key
    """
    start = time.perf_counter()
    buffer = prepare_audio(state["audio_bytes"])
    return {"buffer": buffer, **_timed("prepare", start)}


def features_node(state: Dict[str, Any], resources: ClassificationResources) -> Dict[str, Any]:
    """Node to compute the log-Mel spectrogram

    When a transcript is requested and the backend can produce one, transcription
    is submitted here so it runs alongside the rest of the classification path.
    """
    start = time.perf_counter()
    spec = log_mel_spectrogram(state["buffer"], resources.filterbank)
    update: Dict[str, Any] = {"spectrogram": spec, **_timed("features", start)}

    if state.get("transcribe"):
        if resources.backend.supports_transcription and resources.transcription_pool is not None:
            update["transcript_future"] = resources.transcription_pool.submit(
                _transcribe_safely, resources.backend, spec)
        else:
            logger.debug("Transcript requested but backend %s cannot transcribe", resources.backend.kind)
    return update


def encode_node(state: Dict[str, Any], resources: ClassificationResources) -> Dict[str, Any]:
    start = time.perf_counter()
    embeddings = resources.backend.encode(state["spectrogram"])
    return {"embeddings": embeddings, **_timed("encode", start)}


def pool_node(state: Dict[str, Any], resources: ClassificationResources) -> Dict[str, Any]:
    start = time.perf_counter()
    pooled = mean_pool(state["embeddings"])
    return {"pooled": pooled, **_timed("pool", start)}


def head_node(state: Dict[str, Any], resources: ClassificationResources) -> Dict[str, Any]:
    """Node to run the head in infer mode and read off p_malicious"""
    start = time.perf_counter()
    p_malicious = float(np.clip(predict_proba(state["pooled"], resources.head), 0.0, 1.0))
    return {"p_malicious": p_malicious, **_timed("head", start)}


def decide_node(state: Dict[str, Any], resources: ClassificationResources) -> Dict[str, Any]:
    start = time.perf_counter()
    decision = decide(state["p_malicious"], state["threshold"], resources.review_band)
    return {"decision": decision, **_timed("decide", start)}
