"""
Encoder backends producing the 1500 x 512 embedding sequence.

StubEncoder is a deterministic, shape-preserving stand-in used for tests and
desk-scale work. OnnxEncoder runs an exported pretrained encoder (and, when
configured, a generation graph for transcripts) through onnxruntime.
"""

import json
import logging
import re
from pathlib import Path
from typing import Dict, Optional, Protocol

import numpy as np

from src.guard.config import BackendDescriptor
from src.guard.domain import (
    EMBED_DIM,
    EmbeddingSequence,
    LogMelSpectrogram,
    N_ENCODED_FRAMES,
    N_FRAMES,
    N_MELS,
)
from src.guard.errors import (
    BackendInferenceError,
    BackendLoadFailure,
    ShapeMismatch,
    TranscriptionUnsupported,
)
from utils.splitmix import SplitMix64

logger = logging.getLogger(__name__)

PROJECTION_SCALE = 0.05
_SPECIAL_TOKEN = re.compile(r"^<\|.*\|>$")


class EncoderBackend(Protocol):
    kind: str
    supports_transcription: bool

    def encode(self, spec: LogMelSpectrogram) -> EmbeddingSequence: ...

    def transcribe(self, spec: LogMelSpectrogram) -> Optional[str]: ...


def _check_spectrogram(spec: LogMelSpectrogram) -> None:
    if spec.values.shape != (N_MELS, N_FRAMES):
        raise ShapeMismatch(f"expected a {N_MELS}x{N_FRAMES} spectrogram, got {spec.values.shape}")


def projection_matrix(seed: int) -> np.ndarray:
    """80 x 512 projection, uniform in [-0.05, 0.05], drawn row-major from SplitMix64(seed)"""
    rng = SplitMix64(seed)
    values = rng.uniform_range(-PROJECTION_SCALE, PROJECTION_SCALE, N_MELS * EMBED_DIM)
    matrix = values.reshape(N_MELS, EMBED_DIM).astype(np.float32)
    matrix.setflags(write=False)
    return matrix


class StubEncoder:
    """Pair-average frames 3000 -> 1500, project 80 -> 512, tanh"""

    kind = "stub"
    supports_transcription = False

    def __init__(self, seed: int):
        self.seed = seed
        self.projection = projection_matrix(seed)

    def encode(self, spec: LogMelSpectrogram) -> EmbeddingSequence:
        _check_spectrogram(spec)
        frames = spec.values.T.reshape(N_ENCODED_FRAMES, 2, N_MELS).mean(axis=1)
        return EmbeddingSequence(np.tanh(frames @ self.projection).astype(np.float32))

    def transcribe(self, spec: LogMelSpectrogram) -> Optional[str]:
        raise TranscriptionUnsupported("the stub encoder has no decoder")

    def __repr__(self) -> str:
        return f"StubEncoder(seed={self.seed})"


def _open_session(path: str):
    try:
        import onnxruntime as ort
    except ImportError as e:
        raise BackendLoadFailure("onnxruntime is not installed") from e
    try:
        return ort.InferenceSession(path, providers=["CPUExecutionProvider"])
    except Exception as e:
        raise BackendLoadFailure(f"cannot load ONNX model {path}: {e}") from e


class OnnxEncoder:
    """Pretrained encoder (and optional generation graph) exported to ONNX"""

    kind = "external_model"

    def __init__(self, descriptor: BackendDescriptor):
        self.descriptor = descriptor
        self.input_name = descriptor.input_name
        self.output_name = descriptor.output_name
        self._session = _open_session(descriptor.model_path)
        self._decoder = None
        self._vocab: Dict[int, str] = {}
        if descriptor.supports_transcription:
            self._decoder = _open_session(descriptor.decoder_model_path)
            self._vocab = self._load_vocab(descriptor.vocab_path)
        logger.info("Loaded ONNX encoder %s (transcription=%s)",
                    descriptor.model_path, self.supports_transcription)

    @property
    def supports_transcription(self) -> bool:
        return self._decoder is not None

    @staticmethod
    def _load_vocab(path: str) -> Dict[int, str]:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise BackendLoadFailure(f"cannot load vocabulary {path}: {e}") from e
        return {int(k): v for k, v in raw.items()}

    def _features(self, spec: LogMelSpectrogram) -> np.ndarray:
        _check_spectrogram(spec)
        return spec.values[None, :, :].astype(np.float32)

    @staticmethod
    def _run(session, output_names, feeds) -> list:
        """session.run with runtime failures (InvalidArgument, Fail, MemoryError) as GuardErrors"""
        try:
            return session.run(output_names, feeds)
        except Exception as e:
            raise BackendInferenceError(f"inference failed: {type(e).__name__}: {e}") from e

    def encode(self, spec: LogMelSpectrogram) -> EmbeddingSequence:
        outputs = self._run(self._session, [self.output_name], {self.input_name: self._features(spec)})
        hidden = np.asarray(outputs[0])
        if hidden.shape != (1, N_ENCODED_FRAMES, EMBED_DIM):
            raise ShapeMismatch(
                f"encoder output {hidden.shape}, expected (1, {N_ENCODED_FRAMES}, {EMBED_DIM})")
        hidden = hidden[0].astype(np.float32)
        if not np.isfinite(hidden).all():
            raise ShapeMismatch("encoder output contains non-finite values")
        return EmbeddingSequence(hidden)

    def transcribe(self, spec: LogMelSpectrogram) -> Optional[str]:
        if self._decoder is None:
            raise TranscriptionUnsupported("no decoder model configured")
        outputs = self._run(self._decoder, None, {self.input_name: self._features(spec)})
        token_ids = np.asarray(outputs[0]).reshape(-1, np.asarray(outputs[0]).shape[-1])[0]
        return self.detokenize(token_ids)

    def detokenize(self, token_ids) -> str:
        pieces = []
        for token in token_ids:
            piece = self._vocab.get(int(token), "")
            if _SPECIAL_TOKEN.match(piece):
                continue
            pieces.append(piece)
        return "".join(pieces).replace("Ġ", " ").strip()

    def __repr__(self) -> str:
        return f"OnnxEncoder(model={self.descriptor.model_path})"


def load_backend(descriptor: BackendDescriptor) -> EncoderBackend:
    """Build the backend a descriptor names"""
    if descriptor.kind == "stub":
        return StubEncoder(descriptor.seed)
    return OnnxEncoder(descriptor)
