"""
Configuration models and loading.

Precedence, lowest to highest: model defaults, the flat key-value config file,
VSG_ environment variables, then CLI flags.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.guard.domain import DEFAULT_THRESHOLD, REVIEW_BAND

logger = logging.getLogger(__name__)

project_root = Path(__file__).resolve().parent.parent.parent
DEFAULT_CONFIG_PATH = project_root / "config.json"
ENV_PREFIX = "VSG_"

# deployment profiles: threshold per use case
PROFILES = {
    "general": DEFAULT_THRESHOLD,
    "high_security": 0.15,
}

BACKEND_KEYS = ("model_path", "decoder_model_path", "vocab_path", "input_name", "output_name", "seed")


class BackendDescriptor(BaseModel):
    """Which encoder backend to load and how"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["external_model", "stub"] = "stub"
    model_path: Optional[str] = None
    decoder_model_path: Optional[str] = None
    vocab_path: Optional[str] = None
    input_name: str = "input_features"
    output_name: str = "last_hidden_state"
    supports_transcription: Optional[bool] = None
    seed: int = Field(default=0, ge=0, lt=2 ** 64)

    @model_validator(mode="before")
    @classmethod
    def _resolve_transcription(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("supports_transcription") is None:
            data = dict(data)
            data["supports_transcription"] = (
                data.get("kind") == "external_model"
                and bool(data.get("decoder_model_path"))
                and bool(data.get("vocab_path"))
            )
        return data

    @model_validator(mode="after")
    def _check_kind(self) -> 'BackendDescriptor':
        if self.kind == "external_model" and not self.model_path:
            raise ValueError("external_model backend requires model_path")
        if self.supports_transcription:
            if self.kind == "stub":
                raise ValueError("the stub backend cannot transcribe")
            if not (self.decoder_model_path and self.vocab_path):
                raise ValueError("transcription requires decoder_model_path and vocab_path")
        return self


class EngineConfig(BaseModel):
    """Everything the classification engine and its service need"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    backend: BackendDescriptor = Field(default_factory=BackendDescriptor)
    head_path: Optional[str] = None
    threshold: float = Field(default=DEFAULT_THRESHOLD, gt=0.0, lt=1.0)
    review_low: float = Field(default=REVIEW_BAND[0], ge=0.0, le=1.0)
    review_high: float = Field(default=REVIEW_BAND[1], ge=0.0, le=1.0)
    audit_log_path: str = "audit/audit.jsonl"
    service_host: str = "127.0.0.1"
    service_port: int = Field(default=8080, ge=0, lt=65536)
    log_level: str = "INFO"
    transcribe: bool = False
    transcription_workers: int = Field(default=2, ge=1)
    # longest the response holds for a transcript once the decision exists
    transcript_wait_ms: float = Field(default=100.0, ge=0.0)

    @model_validator(mode="after")
    def _check_band(self) -> 'EngineConfig':
        if not self.review_low < self.review_high:
            raise ValueError(f"review band low {self.review_low} must be below high {self.review_high}")
        return self

    @property
    def review_band(self):
        return self.review_low, self.review_high

    @classmethod
    def from_flat(cls, values: Mapping[str, Any]) -> 'EngineConfig':
        """Build from flat string keys, routing backend keys into the descriptor"""
        values = {k: v for k, v in values.items() if v is not None}
        backend = {k: values.pop(k) for k in BACKEND_KEYS if k in values}
        kind = values.pop("backend", "stub")
        backend["kind"] = "external_model" if kind in ("external", "external_model") else kind
        return cls(backend=BackendDescriptor(**backend), **values)


class TrainConfig(BaseModel):
    """Hyperparameters of head training"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr_max: float = Field(default=3e-5, gt=0.0)
    warmup_steps: int = Field(default=200, ge=0)
    max_steps: int = Field(default=3000, gt=0)
    batch_size: int = Field(default=32, gt=0)
    micro_batch_size: int = Field(default=32, gt=0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    beta1: float = Field(default=0.9, gt=0.0, lt=1.0)
    beta2: float = Field(default=0.999, gt=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, gt=0.0)
    dropout_p: float = Field(default=0.1, ge=0.0, lt=1.0)
    eval_every: int = Field(default=100, gt=0)
    eval_threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    hidden_dim: int = Field(default=256, gt=0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)

    @model_validator(mode="after")
    def _check_schedule(self) -> 'TrainConfig':
        if self.warmup_steps >= self.max_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} must be below max_steps {self.max_steps}")
        if self.batch_size % self.micro_batch_size:
            raise ValueError(
                f"batch_size {self.batch_size} must be a multiple of micro_batch_size {self.micro_batch_size}")
        return self

    @property
    def accumulation_steps(self) -> int:
        return self.batch_size // self.micro_batch_size


def setup_environment() -> None:
    """Load .env from the project root if it exists"""
    load_dotenv(dotenv_path=project_root / ".env")


def load_config(path: Optional[Path] = None) -> Dict[str, Any]:
    """Read the flat key-value config file

    Returns:
        Dict of config values; empty if the default file is missing
    """
    config_path = Path(path) if path else DEFAULT_CONFIG_PATH
    if not config_path.exists():
        if path:
            raise FileNotFoundError(f"config file {config_path} not found")
        return {}
    with open(config_path, "r", encoding="utf-8") as config_file:
        values = json.load(config_file)
    nested = [k for k, v in values.items() if isinstance(v, (dict, list))]
    if nested:
        raise ValueError(f"config file must be flat; nested values under {nested}")
    return values


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    """VSG_THRESHOLD=0.15 -> {"threshold": "0.15"}"""
    environ = os.environ if environ is None else environ
    return {k[len(ENV_PREFIX):].lower(): v for k, v in environ.items() if k.startswith(ENV_PREFIX)}


def resolve_engine_config(config_path: Optional[Path] = None,
                          cli_overrides: Optional[Mapping[str, Any]] = None,
                          environ: Optional[Mapping[str, str]] = None) -> EngineConfig:
    """Merge defaults, config file, environment and CLI flags in that order"""
    values: Dict[str, Any] = {}
    values.update(load_config(config_path))
    values.update(env_overrides(environ))
    values.update({k: v for k, v in (cli_overrides or {}).items() if v is not None})
    logger.debug("Resolved engine configuration keys: %s", sorted(values))
    return EngineConfig.from_flat(values)
