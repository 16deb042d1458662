"""Multichannel wave / STFT containers, analysis-synthesis transforms and framing."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

__all__ = [
    "FrameParams",
    "MultiChannelWave",
    "MultiChannelSpectrogram",
    "UtteranceSegmentation",
    "SegmentFrames",
    "stft",
    "istft",
    "segment_frames",
    "read_wav",
    "write_wav",
]

DEFAULT_SAMPLE_RATE = 16000


def _sqrt_hann(n: int) -> np.ndarray:
    # periodic Hann, so sqrt-Hann analysis x synthesis is COLA at n/2 hop
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n))


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


_WINDOWS = {
    "sqrt_hann": (_sqrt_hann, _sqrt_hann),
    # analysis-only Hann with rectangular synthesis
    "hann": (_hann, np.ones),
    "rect": (np.ones, np.ones),
}


@dataclass(frozen=True)
class FrameParams:
    fft_size: int = 512
    hop_size: int = 256
    window: str = "sqrt_hann"

    def __post_init__(self):
        n = self.fft_size
        if n < 2 or n & (n - 1):
            raise ValueError("invalid frame params: fft_size must be a power of two")
        if self.hop_size < 1 or n % self.hop_size:
            raise ValueError("invalid frame params: hop_size must divide fft_size")
        if self.window not in _WINDOWS:
            raise ValueError(f"invalid frame params: unknown window {self.window!r}")
        cola = self.cola_sum()
        if np.ptp(cola) > 1e-9 * np.abs(cola).max():
            raise ValueError("invalid frame params: window pair is not COLA at this hop")

    @property
    def bin_count(self) -> int:
        return self.fft_size // 2 + 1

    def analysis_window(self) -> np.ndarray:
        return _WINDOWS[self.window][0](self.fft_size)

    def synthesis_window(self) -> np.ndarray:
        return _WINDOWS[self.window][1](self.fft_size)

    def cola_sum(self) -> np.ndarray:
        """Overlapped analysis*synthesis window product over one hop period."""
        prod = self.analysis_window() * self.synthesis_window()
        return prod.reshape(-1, self.hop_size).sum(axis=0)

    def frame_count(self, length: int) -> int:
        if length <= self.fft_size:
            return 1
        return -(-(length - self.fft_size) // self.hop_size) + 1


@dataclass(frozen=True)
class MultiChannelWave:
    """Real-valued M-channel signal, shape (M, T), full scale +-1.0."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("samples must have shape (channels, length)")
        x = x.copy()
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]

    def channel(self, m: int) -> np.ndarray:
        return self.samples[m]


@dataclass(frozen=True)
class MultiChannelSpectrogram:
    """One-sided STFT, complex array of shape (M, N frames, K bins)."""

    frames: np.ndarray
    frame_params: FrameParams = field(default_factory=FrameParams)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        y = np.asarray(self.frames, dtype=np.complex128)
        if y.ndim == 2:
            y = y[None]
        if y.ndim != 3:
            raise ValueError("frames must have shape (channels, frames, bins)")
        if y.shape[2] != self.frame_params.bin_count:
            raise ValueError(
                f"bin count {y.shape[2]} inconsistent with fft_size {self.frame_params.fft_size}"
            )
        y.flags.writeable = False
        object.__setattr__(self, "frames", y)

    @property
    def channel_count(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_count(self) -> int:
        return self.frames.shape[1]

    @property
    def bin_count(self) -> int:
        return self.frames.shape[2]


@dataclass(frozen=True)
class UtteranceSegmentation:
    context_start: int
    context_end: int
    hotword_start: int
    hotword_end: int
    query_end: int

    def __post_init__(self):
        cs, ce, hs, he, qe = (
            self.context_start,
            self.context_end,
            self.hotword_start,
            self.hotword_end,
            self.query_end,
        )
        if not 0 <= cs <= ce <= hs < he <= qe:
            raise ValueError(
                "invalid segmentation: requires "
                "context_start <= context_end <= hotword_start < hotword_end <= query_end"
            )
        if hs != ce:
            raise ValueError("invalid segmentation: requires hotword_start == context_end")

    @classmethod
    def from_boundaries(cls, context_start, hotword_start, hotword_end, query_end):
        return cls(context_start, hotword_start, hotword_start, hotword_end, query_end)

    def shifted(self, offset: int) -> "UtteranceSegmentation":
        return UtteranceSegmentation(
            self.context_start + offset,
            self.context_end + offset,
            self.hotword_start + offset,
            self.hotword_end + offset,
            self.query_end + offset,
        )

    def to_dict(self, sample_rate: int | None = None) -> dict:
        d = {
            "context_start": self.context_start,
            "hotword_start": self.hotword_start,
            "hotword_end": self.hotword_end,
            "query_end": self.query_end,
        }
        if sample_rate is not None:
            d["sample_rate"] = sample_rate
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UtteranceSegmentation":
        hs = int(d["hotword_start"])
        return cls(
            int(d.get("context_start", 0)),
            int(d.get("context_end", hs)),
            hs,
            int(d["hotword_end"]),
            int(d["query_end"]),
        )


def stft(wave: MultiChannelWave, params: FrameParams = FrameParams()) -> MultiChannelSpectrogram:
    """Windowed one-sided STFT of every channel.

    Frames start at sample 0; the tail is zero-padded so that a final partial
    frame is kept.
    """
    x = wave.samples
    if x.shape[1] == 0:
        raise ValueError("empty input")
    n_fft, hop = params.fft_size, params.hop_size
    n_frames = params.frame_count(x.shape[1])
    padded_len = (n_frames - 1) * hop + n_fft
    xp = np.zeros((x.shape[0], padded_len))
    xp[:, : x.shape[1]] = x
    view = np.lib.stride_tricks.sliding_window_view(xp, n_fft, axis=1)[:, ::hop]
    frames = view * params.analysis_window()
    spec = np.fft.rfft(frames, n=n_fft, axis=-1)
    return MultiChannelSpectrogram(spec, params, wave.sample_rate)


def istft(spec: MultiChannelSpectrogram) -> MultiChannelWave:
    """Overlap-add synthesis; output length (N - 1) * hop + fft_size."""
    params = spec.frame_params
    n_fft, hop = params.fft_size, params.hop_size
    if spec.bin_count != params.bin_count:
        raise ValueError("inconsistent bin count")
    frames = np.fft.irfft(spec.frames, n=n_fft, axis=-1) * params.synthesis_window()
    gain = params.cola_sum().mean()
    if abs(gain - 1.0) > 1e-12:
        frames /= gain
    m, n_frames, _ = frames.shape
    out = np.zeros((m, (n_frames - 1) * hop + n_fft))
    # overlap-add in hop-sized blocks: fixed summation order
    blocks = frames.reshape(m, n_frames, n_fft // hop, hop)
    for j in range(n_fft // hop):
        seg = blocks[:, :, j, :].reshape(m, -1)
        out[:, j * hop : j * hop + seg.shape[1]] += seg
    return MultiChannelWave(out, spec.sample_rate)


@dataclass(frozen=True)
class SegmentFrames:
    """Half-open frame-index ranges for each utterance segment."""

    context: range
    hotword: range
    query: range

    @property
    def hotword_query(self) -> range:
        return range(self.hotword.start, self.query.stop)


def _frames_with_center_in(start: int, stop: int, params: FrameParams) -> range:
    half = params.fft_size // 2
    hop = params.hop_size
    # smallest n with n*hop + half >= start, and smallest n with n*hop + half >= stop
    lo = max(0, -(-(start - half) // hop))
    hi = max(0, -(-(stop - half) // hop))
    return range(lo, max(lo, hi))


def segment_frames(seg: UtteranceSegmentation, params: FrameParams = FrameParams()) -> SegmentFrames:
    """Assign frames to segments by the position of their center sample."""
    for name, length in (
        ("context", seg.context_end - seg.context_start),
        ("hotword", seg.hotword_end - seg.hotword_start),
    ):
        if length < params.fft_size:
            raise ValueError(f"segment too short: {name} spans {length} samples")
    return SegmentFrames(
        context=_frames_with_center_in(seg.context_start, seg.context_end, params),
        hotword=_frames_with_center_in(seg.hotword_start, seg.hotword_end, params),
        query=_frames_with_center_in(seg.hotword_end, seg.query_end, params),
    )


def read_wav(path, expected_rate: int | None = None) -> MultiChannelWave:
    """Read a PCM16 / float32 WAV, normalized to +-1.0 full scale."""
    rate, data = wavfile.read(Path(path))
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"sample rate mismatch: file has {rate} Hz, expected {expected_rate} Hz")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif np.issubdtype(data.dtype, np.floating):
        x = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype}")
    x = x.T if x.ndim == 2 else x[None, :]
    return MultiChannelWave(x, rate)


def write_wav(path, wave: MultiChannelWave, fmt: str = "float32") -> None:
    """Write interleaved WAV. ``fmt`` is 'float32' or 'pcm16'."""
    x = wave.samples.T
    if fmt == "float32":
        data = x.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    if data.shape[1] == 1:
        data = data[:, 0]
    wavfile.write(Path(path), wave.sample_rate, data)
