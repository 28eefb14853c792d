from dataclasses import dataclass, field, asdict
from enum import IntEnum
from typing import Dict, List, Optional, Tuple

import numpy as np

SAMPLE_RATE = 16000
N_SAMPLES = 480000  # 30 s at 16 kHz
N_FFT = 400
HOP_LENGTH = 160
N_MELS = 80
N_FRAMES = 3000
N_ENCODED_FRAMES = 1500
EMBED_DIM = 512
HIDDEN_DIM = 256
N_CLASSES = 2
HEAD_PARAMETER_COUNT = EMBED_DIM * HIDDEN_DIM + HIDDEN_DIM + HIDDEN_DIM * N_CLASSES + N_CLASSES

DEFAULT_THRESHOLD = 0.2
REVIEW_BAND = (0.4, 0.6)


class Label(IntEnum):
    """Class index convention: 0 safe, 1 malicious"""
    SAFE = 0
    MALICIOUS = 1


@dataclass
class AudioBuffer:
    """Mono audio samples in [-1, 1] with their sample rate"""
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)

    def __repr__(self) -> str:
        return f"AudioBuffer(samples={len(self.samples)}, sample_rate={self.sample_rate})"


@dataclass
class MelFilterbank:
    """Triangular mel filters, one row per mel band over rfft bins"""
    weights: np.ndarray
    sample_rate: int = SAMPLE_RATE
    n_fft: int = N_FFT

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


@dataclass
class LogMelSpectrogram:
    """Normalized log-Mel features, n_mels x n_frames"""
    values: np.ndarray

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class EmbeddingSequence:
    """Encoder output, T x 512"""
    values: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass
class HeadParams:
    """Weights of the two-layer classification head

    w1 is hidden x input, w2 is classes x hidden (PyTorch Linear layout).
    """
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    NAMES = ("w1", "b1", "w2", "b2")

    def arrays(self) -> List[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def dims(self) -> Tuple[int, int, int]:
        """(input, hidden, classes)"""
        return self.w1.shape[1], self.w1.shape[0], self.w2.shape[0]

    @property
    def dtype(self):
        return self.w1.dtype

    @property
    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays())

    def astype(self, dtype) -> 'HeadParams':
        return HeadParams(*(a.astype(dtype) for a in self.arrays()))

    def copy(self) -> 'HeadParams':
        return HeadParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> 'HeadParams':
        return HeadParams(*(np.zeros_like(a) for a in self.arrays()))

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    @classmethod
    def zeros(cls, dims: Tuple[int, int, int] = (EMBED_DIM, HIDDEN_DIM, N_CLASSES),
              dtype=np.float32) -> 'HeadParams':
        d_in, d_hidden, d_out = dims
        return cls(
            w1=np.zeros((d_hidden, d_in), dtype=dtype),
            b1=np.zeros(d_hidden, dtype=dtype),
            w2=np.zeros((d_out, d_hidden), dtype=dtype),
            b2=np.zeros(d_out, dtype=dtype),
        )

    def __repr__(self) -> str:
        return f"HeadParams(dims={self.dims}, parameters={self.n_parameters}, dtype={self.dtype})"


@dataclass(frozen=True)
class Decision:
    """Thresholded safety decision with its raw probability"""
    label: Label
    p_malicious: float
    threshold: float
    review: bool

    def to_dict(self) -> Dict:
        return {
            "label": self.label.name,
            "p_malicious": self.p_malicious,
            "threshold": self.threshold,
            "review": self.review,
        }


@dataclass
class AuditRecord:
    """One line of the audit log; always carries the raw probability"""
    timestamp_ms: int
    input_digest: str
    p_malicious: float
    threshold: float
    label: str
    review: bool
    latency_classification_ms: float
    latency_total_ms: float
    backend_kind: str
    event: str = "decision"
    transcript_requested: bool = False

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'AuditRecord':
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


@dataclass
class EmbeddingDataset:
    """Pooled embeddings with binary labels"""
    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.labels):
            raise ValueError(
                f"embeddings {self.embeddings.shape} do not match labels {self.labels.shape}")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def n_safe(self) -> int:
        return int(np.count_nonzero(self.labels == Label.SAFE))

    @property
    def n_malicious(self) -> int:
        return int(np.count_nonzero(self.labels == Label.MALICIOUS))

    def subset(self, indices) -> 'EmbeddingDataset':
        indices = np.asarray(indices, dtype=np.int64)
        return EmbeddingDataset(self.embeddings[indices], self.labels[indices])

    def __len__(self) -> int:
        return len(self.labels)

    def __repr__(self) -> str:
        return f"EmbeddingDataset(n={len(self)}, safe={self.n_safe}, malicious={self.n_malicious}, dim={self.dim})"


@dataclass
class ConfusionMatrix:
    tn: int = 0
    fp: int = 0
    fn: int = 0
    tp: int = 0

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    fnr: float
    fpr: float
    threshold: Optional[float] = None
    roc_auc: Optional[float] = None
    degenerate: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class SweepRow:
    tau: float
    f1: float
    precision: float
    recall: float
    fnr: float
    fpr: float


@dataclass(frozen=True)
class FoldSummary:
    mean: float
    std: float
    min: float
    max: float


@dataclass
class FoldResult:
    fold: int
    n_train: int
    n_validation: int
    f1: float
    precision: float
    recall: float
    roc_auc: float
    best_step: int


@dataclass
class CrossValidationReport:
    folds: List[FoldResult]
    summary: Dict[str, FoldSummary]


@dataclass
class HistoryEntry:
    step: int
    lr: float
    train_loss: float
    val_loss: float
    val_f1: float


@dataclass
class TrainingHistory:
    class_weights: Tuple[float, float]
    entries: List[HistoryEntry] = field(default_factory=list)
    best_step: int = 0
    best_val_f1: float = -1.0
