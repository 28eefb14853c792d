"""
SafetyEngine: loaded once, shared by the CLI, the service and the bench harness.
"""

import functools
import logging
import time
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

from src.guard.audit import AuditLog, input_digest, now_ms
from src.guard.config import EngineConfig
from src.guard.domain import AuditRecord, Decision, HEAD_PARAMETER_COUNT, HeadParams, N_MELS, N_FFT, SAMPLE_RATE
from src.guard.errors import GuardError, HeadShapeError, OutOfRange, UsageError
from src.guard.head import load_head
from src.guard.workflow import create_classification_workflow
from src.guard.workflow.nodes import ClassificationResources
from src.guard.workflow.workflow import classification_latency_ms
from utils.audio_io import read_audio_file
from utils.encoder_client import EncoderBackend, load_backend
from utils.mel_frontend import build_mel_filterbank

logger = logging.getLogger(__name__)


@dataclass
class ClassificationResult:
    decision: Decision
    transcript: Optional[str]
    audit_record: AuditRecord
    timings: Dict[str, float]
    # transcript requested but not ready when the response was due
    transcript_pending: bool = False

    def to_dict(self) -> Dict:
        response = self.decision.to_dict()
        if self.transcript is not None:
            response["transcript"] = self.transcript
        elif self.transcript_pending:
            response["transcript"] = None
            response["transcript_pending"] = True
        return response


def _log_late_transcript(digest: str, future: Future) -> None:
    if not future.cancelled() and future.result() is not None:
        logger.debug("Transcript for %s arrived after its response", digest)


def _parse_threshold(value: Union[float, str]) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise OutOfRange(f"threshold must be a number, got {value!r}") from None


class SafetyEngine:
    """Owns the immutable filterbank, backend and head plus the compiled workflow

    Safe to share across threads: per-request data lives only in the workflow
    state, and the audit log serializes its own writes.
    """

    def __init__(self, cfg: EngineConfig, backend: Optional[EncoderBackend] = None,
                 head: Optional[HeadParams] = None, audit_log: Optional[AuditLog] = None):
        self.cfg = cfg
        self.filterbank = build_mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE)
        self.backend = backend if backend is not None else load_backend(cfg.backend)
        if head is None:
            if not cfg.head_path:
                raise UsageError("no head configured; pass --head or set head_path")
            head = load_head(cfg.head_path)
        if head.n_parameters != HEAD_PARAMETER_COUNT:
            raise HeadShapeError(f"head has {head.n_parameters} parameters, expected {HEAD_PARAMETER_COUNT}")
        self.head = head
        self.audit_log = audit_log if audit_log is not None else AuditLog(cfg.audit_log_path)

        self._transcription_pool = ThreadPoolExecutor(
            max_workers=cfg.transcription_workers, thread_name_prefix="transcribe")
        self.resources = ClassificationResources(
            filterbank=self.filterbank,
            backend=self.backend,
            head=self.head,
            review_band=cfg.review_band,
            transcription_pool=self._transcription_pool,
        )
        self.workflow = create_classification_workflow(self.resources)
        logger.info("Engine ready: backend=%s head_parameters=%d threshold=%.3f",
                    self.backend.kind, self.head.n_parameters, cfg.threshold)

    @classmethod
    def from_config(cls, cfg: EngineConfig) -> 'SafetyEngine':
        return cls(cfg)

    @property
    def head_parameters(self) -> int:
        return self.head.n_parameters

    def classify_bytes(self, data: bytes, threshold: Optional[Union[float, str]] = None,
                       transcribe: Optional[bool] = None,
                       await_transcript: bool = False) -> ClassificationResult:
        """Classify one WAV payload and append its audit record

        The decision and its audit record are complete before any transcript is
        looked at, and the transcript is then awaited for at most
        cfg.transcript_wait_ms. Every failure, rejected input or not, is audited
        as an error event and re-raised.

        Args:
            data: Raw WAV bytes
            threshold: Decision threshold, numeric or its text form; the configured one when None
            transcribe: Request a transcript; the configured default when None
            await_transcript: Wait for the transcript without a bound (bench only)

        Returns:
            ClassificationResult with decision, optional transcript and audit record
        """
        start = time.perf_counter()
        transcribe = self.cfg.transcribe if transcribe is None else transcribe
        digest = input_digest(data)

        try:
            threshold = self.cfg.threshold if threshold is None else _parse_threshold(threshold)
            if not 0.0 < threshold < 1.0:
                raise OutOfRange(f"threshold must lie in (0, 1), got {threshold}")
            state = self.workflow.invoke({
                "audio_bytes": data,
                "threshold": threshold,
                "transcribe": bool(transcribe),
                "timings": {},
            })
        except GuardError as e:
            logger.warning("Rejected input %s: %s", digest, e)
            self._audit_error(digest, e, threshold)
            raise
        except Exception as e:
            logger.exception("Classification of %s failed", digest)
            self._audit_error(digest, e, threshold)
            raise

        decision: Decision = state["decision"]
        classification_ms = classification_latency_ms(state)
        record = AuditRecord(
            timestamp_ms=now_ms(),
            input_digest=digest,
            p_malicious=decision.p_malicious,
            threshold=decision.threshold,
            label=decision.label.name,
            review=decision.review,
            latency_classification_ms=classification_ms,
            latency_total_ms=(time.perf_counter() - start) * 1000.0,
            backend_kind=self.backend.kind,
            transcript_requested=bool(transcribe),
        )
        self.audit_log.record_decision(record)

        transcript, pending = None, False
        future = state.get("transcript_future")
        if future is not None:
            timeout = None if await_transcript else self.cfg.transcript_wait_ms / 1000.0
            try:
                transcript = future.result(timeout=timeout)
            except FutureTimeout:
                pending = True
                future.add_done_callback(functools.partial(_log_late_transcript, digest))
        total_ms = (time.perf_counter() - start) * 1000.0
        timings = dict(state.get("timings", {}), classification=classification_ms, total=total_ms)
        if decision.review:
            logger.info("Input %s routed to human review (p=%.4f)", digest, decision.p_malicious)
        return ClassificationResult(decision=decision, transcript=transcript,
                                    audit_record=record, timings=timings,
                                    transcript_pending=pending)

    def _audit_error(self, digest: str, error: Exception, threshold) -> None:
        if not isinstance(threshold, float):
            threshold = None
        self.audit_log.record_error(digest, error, threshold)

    def classify_file(self, path: Union[str, Path], threshold: Optional[float] = None,
                      transcribe: Optional[bool] = None) -> ClassificationResult:
        return self.classify_bytes(read_audio_file(path), threshold, transcribe)

    def close(self) -> None:
        self._transcription_pool.shutdown(wait=True, cancel_futures=True)

    def __enter__(self) -> 'SafetyEngine':
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __repr__(self) -> str:
        return f"SafetyEngine(backend={self.backend.kind}, head_parameters={self.head_parameters})"


def classify_file(path: Union[str, Path], cfg: EngineConfig,
                  transcribe: Optional[bool] = None) -> ClassificationResult:
    """One-shot classification of a WAV file under cfg"""
    with SafetyEngine(cfg) as engine:
        return engine.classify_file(path, transcribe=transcribe)
