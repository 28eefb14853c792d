"""
RIFF/WAVE codec, resampler and length normalization.

Produces the fixed 30 second, 16 kHz mono buffer the log-Mel frontend expects.
Only little-endian PCM16 and IEEE float32 WAVE files are accepted.
"""

import struct
from fractions import Fraction
from pathlib import Path
from typing import Union

import numpy as np
from scipy import signal

from src.guard.domain import AudioBuffer, N_SAMPLES, SAMPLE_RATE
from src.guard.errors import (
    AudioReadError,
    EmptyInput,
    MalformedContainer,
    OutOfRange,
    UnsupportedEncoding,
    WrongRate,
)

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE

PCM16_SCALE = 32768.0
TAPS_PER_PHASE = 32
KAISER_BETA = 5.0
# header rates outside this range are rejected before any allocation
MIN_SAMPLE_RATE = 1000
MAX_SAMPLE_RATE = 384000
# bounds the polyphase factors, and with them the kernel length
MAX_POLYPHASE_FACTOR = 16000


def _parse_chunks(data: bytes) -> dict:
    """Map chunk id to its payload, validating every chunk size"""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedContainer("not a RIFF/WAVE container")

    chunks = {}
    offset = 12
    while offset < len(data):
        if offset + 8 > len(data):
            raise MalformedContainer(f"truncated chunk header at byte {offset}")
        chunk_id, size = struct.unpack_from("<4sI", data, offset)
        body_start = offset + 8
        if body_start + size > len(data):
            raise MalformedContainer(
                f"chunk {chunk_id!r} of {size} bytes overruns the file ({len(data)} bytes)")
        chunks.setdefault(chunk_id, data[body_start:body_start + size])
        # chunks are word aligned
        offset = body_start + size + (size & 1)
    return chunks


def _format_tag(fmt: bytes) -> int:
    tag = struct.unpack_from("<H", fmt, 0)[0]
    if tag == WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 40:
            raise MalformedContainer("extensible fmt chunk shorter than 40 bytes")
        # first two bytes of the sub-format GUID hold the plain format tag
        tag = struct.unpack_from("<H", fmt, 24)[0]
    return tag


def decode_wav(data: bytes) -> AudioBuffer:
    """Decode a RIFF/WAVE byte string into a mono buffer

    Args:
        data: Complete WAVE file contents

    Returns:
        AudioBuffer with channels averaged and samples scaled to [-1, 1]

    Raises:
        MalformedContainer: Bad magic, missing chunks or inconsistent sizes
        UnsupportedEncoding: Anything but PCM16 / float32 with 1-2 channels,
            or a sample rate outside MIN_SAMPLE_RATE..MAX_SAMPLE_RATE
        EmptyInput: The data chunk holds no samples
    """
    chunks = _parse_chunks(data)
    fmt = chunks.get(b"fmt ")
    payload = chunks.get(b"data")
    if fmt is None or len(fmt) < 16:
        raise MalformedContainer("missing or short fmt chunk")
    if payload is None:
        raise MalformedContainer("missing data chunk")

    _, channels, sample_rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    tag = _format_tag(fmt)

    if tag == WAVE_FORMAT_PCM and bits == 16:
        dtype = np.dtype("<i2")
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype = np.dtype("<f4")
    else:
        raise UnsupportedEncoding(f"format tag 0x{tag:04x} with {bits} bits per sample")
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"{channels} channels (only mono and stereo)")
    if sample_rate == 0:
        raise MalformedContainer("sample rate of 0 Hz")
    if not MIN_SAMPLE_RATE <= sample_rate <= MAX_SAMPLE_RATE:
        raise UnsupportedEncoding(
            f"sample rate {sample_rate} Hz outside {MIN_SAMPLE_RATE}-{MAX_SAMPLE_RATE} Hz")
    if block_align != channels * dtype.itemsize:
        raise MalformedContainer(
            f"block align {block_align} does not match {channels} x {dtype.itemsize} bytes")
    if len(payload) % block_align:
        raise MalformedContainer("data chunk is not a whole number of frames")
    if not payload:
        raise EmptyInput("WAVE file contains no samples")

    raw = np.frombuffer(payload, dtype=dtype)
    if dtype.kind == "i":
        samples = raw.astype(np.float32) / PCM16_SCALE
    else:
        samples = raw.astype(np.float32)
        if not np.isfinite(samples).all():
            raise MalformedContainer("non-finite float samples")
        samples = np.clip(samples, -1.0, 1.0)

    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1, dtype=np.float32)
    return AudioBuffer(samples, sample_rate)


def encode_wav(buffer: AudioBuffer, encoding: str = "pcm16") -> bytes:
    """Write a mono buffer as a canonical WAVE file

    Args:
        buffer: Audio to write
        encoding: "pcm16" or "float32"

    Returns:
        The complete file as bytes
    """
    samples = np.clip(buffer.samples, -1.0, 1.0)
    if encoding == "pcm16":
        tag, bits = WAVE_FORMAT_PCM, 16
        payload = np.clip(np.round(samples * PCM16_SCALE), -32768, 32767).astype("<i2").tobytes()
    elif encoding == "float32":
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
        payload = samples.astype("<f4").tobytes()
    else:
        raise UnsupportedEncoding(f"cannot encode as {encoding!r}")

    block_align = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, buffer.sample_rate,
                      buffer.sample_rate * block_align, block_align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def _poly_factors(rate: int, target_rate: int) -> tuple:
    """Up/down factors of the conversion, both at most MAX_POLYPHASE_FACTOR

    Exact for every common rate pair; a coprime rate such as 44101 Hz gets the
    nearest bounded ratio, with a relative rate error below 1e-4.
    """
    ratio = Fraction(target_rate, rate)
    if ratio <= 1:
        ratio = ratio.limit_denominator(MAX_POLYPHASE_FACTOR)
    else:
        ratio = 1 / (1 / ratio).limit_denominator(MAX_POLYPHASE_FACTOR)
    return ratio.numerator, ratio.denominator


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Polyphase windowed-sinc sample rate conversion

    The anti-aliasing kernel has TAPS_PER_PHASE taps per polyphase branch and
    cuts off at the lower of the two Nyquist frequencies.

    Raises:
        EmptyInput: The buffer has no samples
        OutOfRange: target_rate is not positive
        UnsupportedEncoding: Either rate lies outside MIN_SAMPLE_RATE..MAX_SAMPLE_RATE
    """
    if len(buffer) == 0:
        raise EmptyInput("cannot resample an empty buffer")
    if target_rate <= 0:
        raise OutOfRange(f"target rate must be positive, got {target_rate}")
    if buffer.sample_rate == target_rate:
        return buffer
    for rate in (buffer.sample_rate, target_rate):
        if not MIN_SAMPLE_RATE <= rate <= MAX_SAMPLE_RATE:
            raise UnsupportedEncoding(
                f"cannot resample at {rate} Hz (supported {MIN_SAMPLE_RATE}-{MAX_SAMPLE_RATE} Hz)")

    up, down = _poly_factors(buffer.sample_rate, target_rate)
    n_taps = TAPS_PER_PHASE * max(up, down) + 1
    # resample_poly applies the gain of `up` itself
    kernel = signal.firwin(n_taps, 1.0 / max(up, down), window=("kaiser", KAISER_BETA))

    out = signal.resample_poly(buffer.samples.astype(np.float64), up, down, window=kernel)
    return AudioBuffer(np.clip(out, -1.0, 1.0).astype(np.float32), target_rate)


def pad_or_trim(buffer: AudioBuffer) -> AudioBuffer:
    """Zero-pad at the end or truncate to exactly 30 s at 16 kHz"""
    if buffer.sample_rate != SAMPLE_RATE:
        raise WrongRate(f"expected {SAMPLE_RATE} Hz, got {buffer.sample_rate} Hz")
    n = len(buffer)
    if n == N_SAMPLES:
        return buffer
    if n > N_SAMPLES:
        return AudioBuffer(buffer.samples[:N_SAMPLES].copy(), SAMPLE_RATE)
    return AudioBuffer(np.pad(buffer.samples, (0, N_SAMPLES - n)), SAMPLE_RATE)


def _leading_window(buffer: AudioBuffer) -> AudioBuffer:
    """Drop input beyond 30 s plus one second of kernel margin

    Only the first N_SAMPLES output samples survive pad_or_trim, and the
    margin exceeds the kernel half-length, so those samples are unchanged.
    """
    keep = (N_SAMPLES // SAMPLE_RATE + 1) * buffer.sample_rate
    if len(buffer) <= keep:
        return buffer
    return AudioBuffer(buffer.samples[:keep], buffer.sample_rate)


def prepare_audio(data: bytes) -> AudioBuffer:
    """decode -> resample to 16 kHz -> pad or trim to 30 s"""
    return pad_or_trim(resample(_leading_window(decode_wav(data)), SAMPLE_RATE))


def read_audio_file(path: Union[str, Path]) -> bytes:
    """Read raw WAVE bytes from disk"""
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise AudioReadError(f"cannot read {path}: {e}") from e
