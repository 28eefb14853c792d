import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to sys.path
project_root = str(Path(__file__).parent.parent)
sys.path.insert(0, project_root)

from src.guard.config import EngineConfig
from src.guard.domain import AudioBuffer, HeadParams
from src.guard.head import init_head, save_head
from utils.audio_io import encode_wav
from utils.splitmix import SplitMix64


def sine(freq: float, seconds: float = 1.0, rate: int = 16000, amplitude: float = 1.0) -> AudioBuffer:
    t = np.arange(int(round(seconds * rate))) / rate
    return AudioBuffer(amplitude * np.sin(2 * np.pi * freq * t), rate)


def constant_head(p_malicious: float) -> HeadParams:
    """Full-size head whose output ignores its input: softmax gives p_malicious"""
    params = HeadParams.zeros()
    params.b2[1] = np.log(p_malicious / (1.0 - p_malicious))
    return params


@pytest.fixture
def silence_wav() -> bytes:
    return encode_wav(AudioBuffer(np.zeros(16000), 16000))


@pytest.fixture
def tone_wav() -> bytes:
    return encode_wav(sine(440.0, seconds=2.0, amplitude=0.5))


@pytest.fixture
def head_params() -> HeadParams:
    return init_head(SplitMix64(0))


@pytest.fixture
def head_file(tmp_path, head_params) -> Path:
    path = tmp_path / "head.vshp"
    save_head(head_params, path)
    return path


@pytest.fixture
def engine_config(tmp_path, head_file) -> EngineConfig:
    return EngineConfig.from_flat({
        "backend": "stub",
        "seed": 0,
        "head_path": str(head_file),
        "audit_log_path": str(tmp_path / "audit" / "audit.jsonl"),
    })
