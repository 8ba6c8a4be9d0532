"""Waveform handling: WAV io, trimming, stereo panning, mixing, log-mel.

All audio is 16 kHz PCM16 RIFF on disk and float64 in [-1, 1] in memory
(integer samples divided by 32768). Panning follows the linear law
left = (1 - alpha) * w, right = alpha * w, so left + right reconstructs the
mono source exactly; a constant-power law is available as an option.
"""

from __future__ import annotations

import io
import wave
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .blobio import load_f32, save_f32

SAMPLE_RATE = 16000
CLIP_SECONDS = 10.0
INT16_SCALE = 32768.0

# analysis frontend constants
STFT_WINDOW_SECONDS = 0.025
STFT_HOP_SECONDS = 0.010
STFT_FFT_LENGTH = 512
MEL_BANDS = 64
MEL_MIN_HZ = 125.0
MEL_MAX_HZ = 7500.0
LOG_OFFSET = 1e-6


class AudioFormatError(ValueError):
    pass


@dataclass
class Waveform:
    """Channel-major samples, shape (channels, n), float64, 16 kHz."""

    data: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[np.newaxis, :]
        if arr.ndim != 2 or arr.shape[0] not in (1, 2):
            raise AudioFormatError(
                f"waveform must be (channels, samples) with 1 or 2 channels, "
                f"got shape {arr.shape}"
            )
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(
                f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}"
            )
        self.data = arr

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def num_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def peak(self) -> float:
        return float(np.abs(self.data).max()) if self.num_samples else 0.0


def load_wav(data: bytes) -> Waveform:
    """Decode a RIFF PCM16 little-endian mono or stereo file."""
    try:
        with wave.open(io.BytesIO(data)) as wf:
            channels = wf.getnchannels()
            rate = wf.getframerate()
            width = wf.getsampwidth()
            comp = wf.getcomptype()
            frames = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"not a readable RIFF wave file: {exc}") from None
    if comp != "NONE":
        raise AudioFormatError(f"compression type must be NONE, got {comp!r}")
    if width != 2:
        raise AudioFormatError(f"sample width must be 16-bit, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"sample_rate must be {SAMPLE_RATE}, got {rate}")
    if channels not in (1, 2):
        raise AudioFormatError(f"channels must be 1 or 2, got {channels}")
    samples = np.frombuffer(frames, dtype="<i2").astype(np.float64) / INT16_SCALE
    return Waveform(samples.reshape(-1, channels).T)


def write_wav(w: Waveform) -> bytes:
    """Encode as RIFF PCM16; inverse of :func:`load_wav` on conforming data."""
    ints = np.clip(np.round(w.data * INT16_SCALE), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(w.channels)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(ints.T.tobytes())
    return buf.getvalue()


def trim(w: Waveform, seconds: float = CLIP_SECONDS) -> Waveform:
    """First ``seconds`` of the clip; shorter clips are looped to full length."""
    if w.num_samples == 0:
        raise AudioFormatError("cannot trim an empty waveform")
    target = int(round(seconds * w.sample_rate))
    if target <= 0:
        raise AudioFormatError(f"trim length must be positive, got {seconds}")
    if w.num_samples >= target:
        return Waveform(w.data[:, :target].copy())
    reps = -(-target // w.num_samples)
    return Waveform(np.tile(w.data, (1, reps))[:, :target])


def pan_alpha(center_col: float, width: int) -> float:
    """Pan position from mask geometry: horizontal center over image width."""
    if width <= 0:
        raise AudioFormatError(f"image width must be positive, got {width}")
    if not 0.0 <= center_col <= width:
        raise AudioFormatError(
            f"center column {center_col} outside [0, {width}]"
        )
    return center_col / width


def apply_pan(w: Waveform, alpha: float, law: str = "linear") -> Waveform:
    """Spread a mono clip into stereo; alpha=0 is hard left, 1 hard right."""
    if w.channels != 1:
        raise AudioFormatError("panning expects a mono waveform")
    if not 0.0 <= alpha <= 1.0:
        raise AudioFormatError(f"pan position {alpha} outside [0, 1]")
    mono = w.data[0]
    if law == "linear":
        # left is formed by subtraction, not by a (1 - alpha) gain, so that
        # left + right reproduces the mono samples bit for bit on
        # PCM-sourced data for any alpha
        right = alpha * mono
        left = mono - right
    elif law == "constant_power":
        angle = alpha * np.pi / 2.0
        left = float(np.cos(angle)) * mono
        right = float(np.sin(angle)) * mono
    else:
        raise AudioFormatError(f"unknown pan law {law!r}")
    return Waveform(np.stack([left, right]))


def mix(clips: Sequence[Waveform]) -> Waveform:
    """Samplewise sum; if the summed peak exceeds 1 the whole mix is scaled
    by 1/peak so the clipped output peaks at exactly 1."""
    if not clips:
        raise AudioFormatError("cannot mix zero clips")
    shape = clips[0].data.shape
    for c in clips[1:]:
        if c.data.shape != shape:
            raise AudioFormatError(
                f"mix inputs disagree in shape: {shape} vs {c.data.shape}"
            )
    total = np.sum([c.data for c in clips], axis=0)
    peak = np.abs(total).max()
    if peak > 1.0:
        total = total / peak
    return Waveform(total)


# ---------------------------------------------------------------------------
# log-mel frontend


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    num_bands: int = MEL_BANDS,
    fft_length: int = STFT_FFT_LENGTH,
    sample_rate: int = SAMPLE_RATE,
    min_hz: float = MEL_MIN_HZ,
    max_hz: float = MEL_MAX_HZ,
) -> tuple[np.ndarray, np.ndarray]:
    """Triangular filters, peak 1, linear in mel between equally spaced edges.

    Returns (weights of shape (num_bins, num_bands), band center frequencies
    in Hz). num_bins = fft_length // 2 + 1.
    """
    num_bins = fft_length // 2 + 1
    bin_hz = np.linspace(0.0, sample_rate / 2.0, num_bins)
    bin_mel = _hz_to_mel(bin_hz)
    edges = np.linspace(_hz_to_mel(min_hz), _hz_to_mel(max_hz), num_bands + 2)
    weights = np.zeros((num_bins, num_bands))
    for k in range(num_bands):
        lower, center, upper = edges[k], edges[k + 1], edges[k + 2]
        up = (bin_mel - lower) / (center - lower)
        down = (upper - bin_mel) / (upper - center)
        weights[:, k] = np.maximum(0.0, np.minimum(up, down))
    centers_hz = _mel_to_hz(edges[1:-1])
    return weights, centers_hz


def _stft_power(mono: np.ndarray, sample_rate: int) -> np.ndarray:
    win_len = int(round(STFT_WINDOW_SECONDS * sample_rate))
    hop = int(round(STFT_HOP_SECONDS * sample_rate))
    if mono.size < win_len:
        raise AudioFormatError(
            f"waveform of {mono.size} samples shorter than one analysis window "
            f"({win_len} samples)"
        )
    num_frames = 1 + (mono.size - win_len) // hop
    idx = np.arange(win_len)[np.newaxis, :] + hop * np.arange(num_frames)[:, np.newaxis]
    frames = mono[idx] * np.hanning(win_len)
    spectrum = np.fft.rfft(frames, n=STFT_FFT_LENGTH, axis=1)
    return np.abs(spectrum) ** 2


@dataclass
class MelSpectrogram:
    """Frames by bands; stereo inputs concatenate the per-channel bands."""

    values: np.ndarray  # (frames, bands * channels)
    window_seconds: int
    channels: int
    bands_per_channel: int = MEL_BANDS

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise AudioFormatError("mel spectrogram contains non-finite values")


def log_mel(w: Waveform, window_seconds: int) -> MelSpectrogram:
    """Log mel-filterbank energies over the first 1 s or 3 s of the clip.

    25 ms Hann windows, 10 ms hop, 512-point FFT, 64 triangular mel bands
    from 125 to 7500 Hz, log(energy + 1e-6). Silence maps to log(1e-6)
    everywhere. Stereo clips produce band-concatenated per-channel features.
    """
    if window_seconds not in (1, 3):
        raise AudioFormatError(
            f"window_seconds must be 1 or 3, got {window_seconds}"
        )
    needed = window_seconds * w.sample_rate
    if w.num_samples < needed:
        raise AudioFormatError(
            f"waveform covers {w.num_samples} samples, needs {needed} "
            f"for a {window_seconds}s analysis window"
        )
    weights, _ = mel_filterbank()
    per_channel = []
    for ch in range(w.channels):
        power = _stft_power(w.data[ch, :needed], w.sample_rate)
        per_channel.append(np.log(power @ weights + LOG_OFFSET))
    return MelSpectrogram(
        np.concatenate(per_channel, axis=1), window_seconds, w.channels
    )


def save_mel(path, mel: MelSpectrogram) -> None:
    rows, cols = mel.values.shape
    save_f32(
        path,
        mel.values,
        extra={
            "rows": rows,
            "cols": cols,
            "window_seconds": mel.window_seconds,
            "channels": mel.channels,
        },
    )


def load_mel(path) -> MelSpectrogram:
    values, meta = load_f32(path)
    return MelSpectrogram(
        values,
        window_seconds=int(meta["window_seconds"]),
        channels=int(meta["channels"]),
    )
