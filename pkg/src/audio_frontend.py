"""Audio ingest, 30-second framing, log-mel features and STNR estimation"""

import struct
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Union

import librosa
import numpy as np
import soundfile as sf
from pydantic import BaseModel, ConfigDict
from scipy.signal import firwin, resample_poly

from src.errors import (
    AudioReadError,
    DegenerateSignalError,
    EmptyAudioError,
    ShapeMismatchError,
    UnsupportedEncodingError,
)
from src.logging_config import get_logger

logger = get_logger(__name__)

SAMPLE_RATE = 16000
RECEPTIVE_FIELD_S = 30.0
N_FFT = 400
HOP_LENGTH = 160
N_MELS = 80
N_FRAMES = int(RECEPTIVE_FIELD_S * SAMPLE_RATE) // HOP_LENGTH  # 3000

# Resampler: Kaiser-windowed sinc, fixed so outputs are reproducible
KAISER_BETA = 8.6
TAPS_PER_PHASE = 64

MIN_INPUT_RATE = 8000
MAX_INPUT_RATE = 192000
PCM_SUBTYPES = {"PCM_U8", "PCM_S8", "PCM_16", "PCM_24", "PCM_32"}

# STNR framing: 20 ms frames, 10 ms hop
STNR_FRAME = 320
STNR_HOP = 160
STNR_HIST_BIN_DB = 1.0
STNR_SPEECH_PERCENTILE = 95.0

PathLike = Union[str, Path]


@dataclass(frozen=True)
class AudioClip:
    """Mono float32 audio at a known sample rate"""
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.samples.ndim != 1:
            raise ShapeMismatchError(f"AudioClip expects 1-D samples, got shape {self.samples.shape}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class MelFeatures:
    """Log-mel matrix [n_mels x n_frames]"""
    values: np.ndarray

    @property
    def n_mels(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[1])


class StnrEstimate(BaseModel):
    """Speech-to-noise ratio from the frame power distribution"""
    model_config = ConfigDict(frozen=True)

    stnr_db: float
    speech_level_db: float
    noise_level_db: float


def resample_to_16k(samples: np.ndarray, sample_rate_hz: int) -> np.ndarray:
    """Polyphase windowed-sinc resampling to 16 kHz.

    Output length is ceil(n * up / down), so duration is preserved to within
    one output sample.
    """
    if sample_rate_hz == SAMPLE_RATE:
        return samples
    ratio = Fraction(SAMPLE_RATE, sample_rate_hz)
    up, down = ratio.numerator, ratio.denominator
    taps = firwin(TAPS_PER_PHASE * up + 1, 1.0 / max(up, down), window=("kaiser", KAISER_BETA))
    out = resample_poly(samples.astype(np.float64), up, down, window=taps)
    logger.debug(f"Resampled {len(samples)} samples at {sample_rate_hz} Hz -> {len(out)} at {SAMPLE_RATE} Hz")
    return out.astype(np.float32)


def ingest(path: PathLike) -> AudioClip:
    """Read a PCM WAV file as a mono 16 kHz clip in [-1, 1]"""
    path = Path(path)
    try:
        info = sf.info(str(path))
    except (RuntimeError, OSError) as e:
        raise AudioReadError(f"Cannot read audio file {path}: {e}") from e

    if info.format not in ("WAV", "WAVEX") or info.subtype not in PCM_SUBTYPES:
        raise UnsupportedEncodingError(
            f"{path}: unsupported encoding {info.format}/{info.subtype} (PCM WAV required)"
        )
    if not MIN_INPUT_RATE <= info.samplerate <= MAX_INPUT_RATE:
        raise UnsupportedEncodingError(f"{path}: sample rate {info.samplerate} Hz outside 8-192 kHz")
    if info.frames == 0:
        raise EmptyAudioError(f"{path}: zero-length audio")

    try:
        data, sample_rate = sf.read(str(path), dtype="float32", always_2d=True)
    except (RuntimeError, OSError) as e:
        raise AudioReadError(f"Cannot decode audio file {path}: {e}") from e

    mono = data.mean(axis=1, dtype=np.float64).astype(np.float32)
    mono = resample_to_16k(mono, int(sample_rate))
    mono = np.clip(mono, -1.0, 1.0).astype(np.float32)
    logger.debug(f"Ingested {path.name}: {info.channels} ch, {info.samplerate} Hz, {len(mono) / SAMPLE_RATE:.2f} s")
    return AudioClip(samples=mono, sample_rate_hz=SAMPLE_RATE)


def save_wav(path: PathLike, clip: AudioClip, subtype: str = "PCM_16") -> None:
    """Write a clip as PCM WAV"""
    sf.write(str(path), clip.samples, clip.sample_rate_hz, subtype=subtype)


def pad_or_trim(clip: AudioClip, target_s: float = RECEPTIVE_FIELD_S) -> AudioClip:
    """Zero-pad at the end or truncate so the clip lasts exactly target_s"""
    if target_s <= 0:
        raise ValueError(f"target duration must be positive, got {target_s}")
    target_len = int(round(target_s * clip.sample_rate_hz))
    samples = clip.samples
    if len(samples) == target_len:
        return clip
    if len(samples) < target_len:
        samples = np.pad(samples, (0, target_len - len(samples)), "constant")
    else:
        samples = samples[:target_len]
    return AudioClip(samples=samples, sample_rate_hz=clip.sample_rate_hz)


@lru_cache(maxsize=None)
def mel_filters(n_mels: int = N_MELS) -> np.ndarray:
    """Slaney-normalised triangular filters spanning 0-8000 Hz, [n_mels x n_fft/2+1]"""
    filters = librosa.filters.mel(sr=SAMPLE_RATE, n_fft=N_FFT, n_mels=n_mels, fmin=0.0, fmax=SAMPLE_RATE / 2)
    filters.setflags(write=False)
    return filters


def log_mel(clip: AudioClip, n_frames: int = N_FRAMES) -> MelFeatures:
    """Log-mel spectrogram over a window of n_frames hops (3000 = 30 s).

    The clip is padded or trimmed to n_frames * 160 samples first, so trailing
    audio beyond the receptive field never changes the result.
    """
    if clip.sample_rate_hz != SAMPLE_RATE:
        raise ValueError(f"log_mel expects {SAMPLE_RATE} Hz audio, got {clip.sample_rate_hz} Hz")
    n_samples = n_frames * HOP_LENGTH
    if n_samples < N_FFT:
        raise ValueError(f"clip shorter than one analysis window ({n_samples} < {N_FFT} samples)")

    audio = pad_or_trim(clip, n_samples / SAMPLE_RATE).samples.astype(np.float32)
    stft = librosa.stft(audio, n_fft=N_FFT, hop_length=HOP_LENGTH, window="hann", center=True, pad_mode="reflect")
    magnitudes = np.abs(stft[:, :-1]) ** 2
    mel_spec = mel_filters() @ magnitudes

    log_spec = np.log10(np.clip(mel_spec, 1e-10, None))
    log_spec = np.maximum(log_spec, log_spec.max() - 8.0)
    log_spec = (log_spec + 4.0) / 4.0
    return MelFeatures(values=log_spec.astype(np.float32))


def save_mel(path: PathLike, mel: MelFeatures) -> None:
    """Cache blob: u32 n_mels, u32 n_frames, then little-endian float32 row-major"""
    with open(path, "wb") as f:
        f.write(struct.pack("<II", mel.n_mels, mel.n_frames))
        f.write(np.ascontiguousarray(mel.values, dtype="<f4").tobytes())


def load_mel(path: PathLike) -> MelFeatures:
    """Read a blob written by save_mel"""
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise ValueError(f"{path}: mel cache truncated")
    n_mels, n_frames = struct.unpack_from("<II", blob, 0)
    expected = 8 + 4 * n_mels * n_frames
    if len(blob) != expected:
        raise ValueError(f"{path}: mel cache has {len(blob)} bytes, expected {expected}")
    values = np.frombuffer(blob, dtype="<f4", offset=8).reshape(n_mels, n_frames).astype(np.float32)
    return MelFeatures(values=values)


def frame_power_db(clip: AudioClip) -> np.ndarray:
    """Mean-square power of 20 ms frames (10 ms hop) in dB; all-zero frames dropped"""
    x = clip.samples.astype(np.float64)
    frames = np.lib.stride_tricks.sliding_window_view(x, STNR_FRAME)[::STNR_HOP]
    power = np.mean(frames**2, axis=1)
    power = power[power > 0]
    if power.size == 0:
        raise DegenerateSignalError()
    return 10.0 * np.log10(power)


def estimate_stnr(clip: AudioClip) -> StnrEstimate:
    """Histogram STNR estimate.

    Noise level is the modal 1 dB bin of the lower half of the frame power
    range (refined to the mean power inside that bin); speech level is the
    95th percentile of frame power.
    """
    if clip.duration_s < 1.0:
        raise ValueError(f"STNR needs at least 1 s of audio, got {clip.duration_s:.3f} s")
    db = frame_power_db(clip)

    lo, hi = float(db.min()), float(db.max())
    midpoint = (lo + hi) / 2.0
    lower = db[db <= midpoint]
    edges = np.arange(np.floor(lo), np.floor(midpoint) + 2 * STNR_HIST_BIN_DB, STNR_HIST_BIN_DB)
    counts, edges = np.histogram(lower, bins=edges)
    mode = int(np.argmax(counts))
    in_bin = lower[(lower >= edges[mode]) & (lower <= edges[mode + 1])]
    noise_level = float(in_bin.mean())

    speech_level = float(np.percentile(db, STNR_SPEECH_PERCENTILE))
    return StnrEstimate(
        stnr_db=speech_level - noise_level,
        speech_level_db=speech_level,
        noise_level_db=noise_level,
    )
