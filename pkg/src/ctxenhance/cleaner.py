"""Speech Cleaner: per-subband multichannel adaptive noise canceller.

For every STFT bin, a tapped-delay-line filter on the auxiliary channels
1..M-1 predicts the reference channel. The filter is trained by exponentially
weighted RLS on the noise context, frozen at hotword onset, and then applied
unchanged to the hotword and query.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .signal_core import MultiChannelSpectrogram

__all__ = [
    "CleanerFilterBank",
    "DelayLine",
    "new_filter_bank",
    "cleaner_output",
    "rls_adapt",
    "freeze",
    "apply_cleaner",
    "save_filter_bank",
    "load_filter_bank",
]

FORGETTING_FACTOR = 0.9995
DELTA = 1e-2


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.complex128, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class CleanerFilterBank:
    """Taps U_m(k, l), shape (K, M-1, L), plus RLS state.

    ``inverse_corr`` holds P(k) of shape (K, (M-1)L, (M-1)L) while adapting;
    it is dropped on freeze. ``frames_seen`` counts processed context frames.
    """

    taps: np.ndarray
    frozen: bool = False
    forgetting_factor: float = FORGETTING_FACTOR
    delta: float = DELTA
    inverse_corr: np.ndarray | None = None
    frames_seen: int = 0
    ref_channel: int = 0

    def __post_init__(self):
        t = np.asarray(self.taps)
        if t.ndim != 3 or t.shape[1] < 1 or t.shape[2] < 1:
            raise ValueError("taps must have shape (bins, M-1 >= 1, L >= 1)")
        object.__setattr__(self, "taps", _readonly(t))

    @property
    def bin_count(self) -> int:
        return self.taps.shape[0]

    @property
    def channel_count(self) -> int:
        return self.taps.shape[1] + 1

    @property
    def tap_count(self) -> int:
        return self.taps.shape[2]

    def aux_channels(self) -> list[int]:
        return [m for m in range(self.channel_count) if m != self.ref_channel]

    def min_inverse_corr_eigenvalue(self) -> float:
        if self.inverse_corr is None:
            raise ValueError("no RLS state (bank is frozen)")
        return float(np.linalg.eigvalsh(self.inverse_corr).min())


def new_filter_bank(
    bin_count: int,
    channel_count: int,
    tap_count: int = 3,
    forgetting_factor: float = FORGETTING_FACTOR,
    delta: float = DELTA,
    ref_channel: int = 0,
) -> CleanerFilterBank:
    """Zero taps with P(k) = I / delta."""
    if channel_count < 2:
        raise ValueError("speech cleaner requires >= 2 channels")
    if tap_count < 1:
        raise ValueError("tap count must be >= 1")
    if not 0.0 < forgetting_factor <= 1.0 or delta <= 0.0:
        raise ValueError("invalid RLS hyperparameters")
    dim = (channel_count - 1) * tap_count
    p0 = np.broadcast_to(np.eye(dim) / delta, (bin_count, dim, dim)).astype(np.complex128)
    return CleanerFilterBank(
        np.zeros((bin_count, channel_count - 1, tap_count), dtype=np.complex128),
        forgetting_factor=forgetting_factor,
        delta=delta,
        inverse_corr=p0,
        ref_channel=ref_channel,
    )


@dataclass
class DelayLine:
    """Last L spectral frames of each auxiliary channel, newest first."""

    bin_count: int
    aux_count: int
    length: int
    _buf: deque = field(init=False, repr=False)

    def __post_init__(self):
        zero = np.zeros((self.bin_count, self.aux_count), dtype=np.complex128)
        self._buf = deque([zero] * self.length, maxlen=self.length)

    def push(self, aux_frame: np.ndarray) -> None:
        """``aux_frame`` has shape (K, M-1)."""
        self._buf.appendleft(np.asarray(aux_frame, dtype=np.complex128))

    def vector(self) -> np.ndarray:
        """Delay-line contents as (K, M-1, L)."""
        return np.stack(list(self._buf), axis=-1)


def cleaner_output(bank: CleanerFilterBank, frame: np.ndarray, delay: DelayLine) -> np.ndarray:
    """Z(k) = Y_ref(k) - sum_m U_m(k)^H Ytilde_m(k) for one frame.

    ``frame`` has shape (K, M); ``delay`` must already hold this frame's
    auxiliary values.
    """
    frame = np.asarray(frame)
    if frame.shape != (bank.bin_count, bank.channel_count):
        raise ValueError("frame shape mismatch")
    ytil = delay.vector()
    if ytil.shape != bank.taps.shape:
        raise ValueError("delay line shape mismatch")
    return frame[:, bank.ref_channel] - np.sum(bank.taps.conj() * ytil, axis=(1, 2))


def _regressors(y_aux: np.ndarray, start: int, stop: int, tap_count: int) -> np.ndarray:
    """Stacked delay-line regressors for frames start..stop-1.

    ``y_aux`` is (M-1, N, K). Returns (stop-start, K, (M-1)*L) ordered
    channel-major, i.e. index m*L + l holds Y_m(n - l). Frames before 0 are zero.
    """
    aux, _, k = y_aux.shape
    n = stop - start
    out = np.zeros((n, k, aux, tap_count), dtype=np.complex128)
    for l in range(tap_count):
        lo = start - l
        src_lo = max(lo, 0)
        dst_lo = src_lo - lo
        if stop - l > src_lo:
            out[dst_lo:, :, :, l] = np.transpose(y_aux[:, src_lo : stop - l, :], (1, 2, 0))
    return out.reshape(n, k, aux * tap_count)


def _split(spec: MultiChannelSpectrogram, bank: CleanerFilterBank):
    if spec.channel_count != bank.channel_count or spec.bin_count != bank.bin_count:
        raise ValueError("shape mismatch between filter bank and spectrogram")
    y = spec.frames
    return y[bank.ref_channel], y[bank.aux_channels()]


def rls_adapt(bank: CleanerFilterBank, spec: MultiChannelSpectrogram, frames) -> CleanerFilterBank:
    """Run exponentially weighted RLS over ``frames`` (in time order).

    Delay lines are filled from the spectrogram itself, so frames preceding
    ``frames.start`` act as history.
    """
    if bank.frozen:
        raise ValueError("filter frozen")
    frames = range(frames.start, frames.stop)
    if len(frames) == 0:
        raise ValueError("no frames in segment")
    y_ref, y_aux = _split(spec, bank)
    u_all = _regressors(y_aux, frames.start, frames.stop, bank.tap_count)
    lam = bank.forgetting_factor
    k_bins = bank.bin_count
    w = bank.taps.reshape(k_bins, -1).copy()
    p = bank.inverse_corr.copy()
    for i, n in enumerate(frames):
        u = u_all[i]  # (K, D)
        pu = np.einsum("kij,kj->ki", p, u)
        denom = lam + np.real(np.sum(u.conj() * pu, axis=1))
        gain = pu / denom[:, None]
        err = y_ref[n] - np.sum(w.conj() * u, axis=1)  # a priori error
        w += gain * err.conj()[:, None]
        # P <- (P - g u^H P) / lambda, with P Hermitian so u^H P = (P u)^H
        p = (p - gain[:, :, None] * pu.conj()[:, None, :]) / lam
        p = 0.5 * (p + np.conj(np.swapaxes(p, 1, 2)))
    return replace(
        bank,
        taps=w.reshape(bank.taps.shape),
        inverse_corr=p,
        frames_seen=bank.frames_seen + len(frames),
    )


def freeze(bank: CleanerFilterBank) -> CleanerFilterBank:
    """Freeze taps; RLS state is discarded. Idempotent."""
    if bank.frozen:
        return bank
    return replace(bank, frozen=True, inverse_corr=None)


def apply_cleaner(bank: CleanerFilterBank, spec: MultiChannelSpectrogram, frames) -> np.ndarray:
    """Frozen-filter output for each frame in ``frames``; shape (len, K).

    Delay lines are seeded with the L-1 frames preceding the range (zeros
    before frame 0).
    """
    if not bank.frozen:
        raise ValueError("filter bank must be frozen before application")
    frames = range(frames.start, frames.stop)
    y_ref, y_aux = _split(spec, bank)
    u = _regressors(y_aux, frames.start, frames.stop, bank.tap_count)
    w = bank.taps.reshape(bank.bin_count, -1)
    return y_ref[frames.start : frames.stop] - np.einsum("kd,nkd->nk", w.conj(), u, optimize=True)


_BANK_HEADER = struct.Struct("<QQQQ")


def save_filter_bank(path, bank: CleanerFilterBank) -> None:
    """Binary sidecar: uint64 K, M, then (M-1, L) shape header, then re/im float64 LE."""
    t = bank.taps
    data = np.empty(t.shape + (2,), dtype="<f8")
    data[..., 0] = t.real
    data[..., 1] = t.imag
    header = _BANK_HEADER.pack(t.shape[0], t.shape[1] + 1, t.shape[1], t.shape[2])
    Path(path).write_bytes(header + data.tobytes())


def load_filter_bank(path, ref_channel: int = 0) -> CleanerFilterBank:
    """Load a sidecar as a frozen bank."""
    raw = Path(path).read_bytes()
    k, m, aux, taps = _BANK_HEADER.unpack_from(raw)
    if aux != m - 1:
        raise ValueError("corrupt filter bank header")
    data = np.frombuffer(raw, dtype="<f8", offset=_BANK_HEADER.size)
    if data.size != k * aux * taps * 2:
        raise ValueError("truncated filter bank sidecar")
    data = data.reshape(k, aux, taps, 2)
    return CleanerFilterBank(data[..., 0] + 1j * data[..., 1], frozen=True, ref_channel=ref_channel)
