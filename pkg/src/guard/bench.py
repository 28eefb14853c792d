"""
Latency harness: classification path versus full pipeline, single-threaded.
"""

import contextlib
import logging
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from src.guard.audit import AuditLog
from src.guard.config import EngineConfig
from src.guard.engine import SafetyEngine
from src.guard.errors import UsageError
from utils.audio_io import read_audio_file

logger = logging.getLogger(__name__)

MIN_REPETITIONS = 10
WARMUP_RUNS = 2


@dataclass(frozen=True)
class LatencyStats:
    p50: float
    p95: float
    mean: float

    @classmethod
    def from_samples(cls, samples_ms: Sequence[float]) -> 'LatencyStats':
        values = np.asarray(samples_ms, dtype=np.float64)
        return cls(p50=float(np.percentile(values, 50)),
                   p95=float(np.percentile(values, 95)),
                   mean=float(values.mean()))


@dataclass
class LatencyReport:
    classification: LatencyStats
    full_pipeline: LatencyStats
    n_runs: int
    backend_kind: str
    transcription: bool
    # decisions the engine audited during the timed and warm-up runs
    audited: int = 0

    def to_dict(self) -> Dict:
        return {
            "classification": vars(self.classification),
            "full_pipeline": vars(self.full_pipeline),
            "n_runs": self.n_runs,
            "backend": self.backend_kind,
            "transcription": self.transcription,
            "audited": self.audited,
        }


def bench(paths: Sequence[Union[str, Path]], repetitions: int = MIN_REPETITIONS,
          cfg: Optional[EngineConfig] = None, warmup: int = WARMUP_RUNS,
          engine: Optional[SafetyEngine] = None) -> LatencyReport:
    """Time every file `repetitions` times after `warmup` untimed runs

    The classification path covers log-Mel features through the decision; the
    full pipeline adds WAV decoding, resampling, the audit write and, when the
    backend supports it, the whole transcript. An engine built here audits
    into a temporary sink that is discarded afterwards, so the configured
    audit log only ever holds production decisions.

    Raises:
        UsageError: No paths, or fewer than 10 repetitions
    """
    if not paths:
        raise UsageError("bench needs at least one audio file")
    if repetitions < MIN_REPETITIONS:
        raise UsageError(f"bench needs at least {MIN_REPETITIONS} repetitions, got {repetitions}")

    classification: List[float] = []
    full: List[float] = []
    with contextlib.ExitStack() as stack:
        if engine is None:
            sink = Path(stack.enter_context(tempfile.TemporaryDirectory(prefix="vsg-bench-")))
            engine = stack.enter_context(
                SafetyEngine(cfg or EngineConfig(), audit_log=AuditLog(sink / "audit.jsonl")))
        payloads = [read_audio_file(p) for p in paths]
        transcribe = engine.backend.supports_transcription
        audited_before = _audit_count(engine)

        for data in payloads:
            for _ in range(warmup):
                engine.classify_bytes(data, transcribe=transcribe, await_transcript=True)
            for _ in range(repetitions):
                result = engine.classify_bytes(data, transcribe=transcribe, await_transcript=True)
                classification.append(result.timings["classification"])
                full.append(result.timings["total"])
        audited = _audit_count(engine) - audited_before

    report = LatencyReport(
        classification=LatencyStats.from_samples(classification),
        full_pipeline=LatencyStats.from_samples(full),
        n_runs=len(full),
        backend_kind=engine.backend.kind,
        transcription=transcribe,
        audited=audited,
    )
    logger.info("Bench over %d runs: classification p50 %.2f ms, full pipeline p50 %.2f ms",
                report.n_runs, report.classification.p50, report.full_pipeline.p50)
    return report


def _audit_count(engine: SafetyEngine) -> int:
    return len(engine.audit_log.read())


def format_latency_table(report: LatencyReport) -> str:
    header = f"{'Statistic':<10}{'Classification (ms)':>22}{'Full pipeline (ms)':>22}"
    lines = [header, "-" * len(header)]
    for name in ("p50", "p95", "mean"):
        lines.append(f"{name:<10}{getattr(report.classification, name):>22.2f}"
                     f"{getattr(report.full_pipeline, name):>22.2f}")
    suffix = "with transcription" if report.transcription else "no transcription"
    lines.append(f"backend={report.backend_kind}, runs={report.n_runs}, {suffix}")
    return "\n".join(lines)
