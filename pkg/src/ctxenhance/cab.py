"""Context aware beamforming.

Desired-source spatial covariance is estimated as the difference between the
hotword (speech + noise) covariance and the noise-context covariance; its
principal eigenvector steers a filter-and-sum beamformer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signal_core import MultiChannelSpectrogram

__all__ = [
    "SubbandCovariance",
    "BeamformerWeights",
    "estimate_covariance",
    "oracle_covariance",
    "subtract_covariance",
    "project_psd",
    "principal_eigenvector",
    "reference_weights",
    "floor_unreliable_bins",
    "apply_beamformer",
    "adapt_lms_mvdr",
    "save_weights",
    "load_weights",
]

NOISY, NOISE, DESIRED, ORACLE = "noisy", "noise", "desired", "oracle"
_KINDS = (NOISY, NOISE, DESIRED, ORACLE)

DEGENERATE_TRACE_RATIO = 1e-12
POWER_MAX_ITER = 200
POWER_TOL = 1e-12
_SQUARINGS = 5
_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class SubbandCovariance:
    """Per-bin M x M Hermitian matrices, shape (K, M, M)."""

    matrices: np.ndarray
    frame_count_used: int
    kind: str

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        a = np.asarray(self.matrices, dtype=np.complex128)
        if a.ndim != 3 or a.shape[1] != a.shape[2]:
            raise ValueError("covariance matrices must have shape (bins, M, M)")
        object.__setattr__(self, "matrices", a)

    @property
    def channel_count(self) -> int:
        return self.matrices.shape[1]

    @property
    def bin_count(self) -> int:
        return self.matrices.shape[0]

    def traces(self) -> np.ndarray:
        return np.real(np.trace(self.matrices, axis1=1, axis2=2))


@dataclass(frozen=True)
class BeamformerWeights:
    """Per-bin complex weights W(k), shape (K, M); output is W^H Y.

    ``normalization`` records the convention the weights satisfy:
    ``"unit_max_real"`` (unit norm, largest entry real non-negative),
    ``"reference"`` (distortionless toward the reference-channel image) or
    ``"distortionless"`` (W^H d = 1 for the initial steering d).
    """

    weights: np.ndarray
    normalization: str = "unit_max_real"
    degenerate: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.complex128)
        if w.ndim != 2:
            raise ValueError("weights must have shape (bins, M)")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        if self.degenerate is None:
            object.__setattr__(self, "degenerate", np.zeros(w.shape[0], dtype=bool))

    @property
    def bin_count(self) -> int:
        return self.weights.shape[0]

    @property
    def channel_count(self) -> int:
        return self.weights.shape[1]


def _frame_slice(frames) -> slice:
    if isinstance(frames, slice):
        return frames
    frames = range(*frames) if isinstance(frames, tuple) else frames
    if frames.step != 1:
        raise ValueError("frame range must be contiguous")
    return slice(frames.start, frames.stop)


def _covariance(spec: MultiChannelSpectrogram, frames, kind: str) -> SubbandCovariance:
    if spec.channel_count < 2:
        raise ValueError("beamforming requires >= 2 channels")
    y = spec.frames[:, _frame_slice(frames), :]
    n = y.shape[1]
    if n == 0:
        raise ValueError("no frames in segment")
    # (K, M, M): mean over frames of Y Y^H
    phi = np.einsum("mnk,pnk->kmp", y, y.conj(), optimize=True) / n
    phi = 0.5 * (phi + np.conj(np.swapaxes(phi, 1, 2)))
    return SubbandCovariance(phi, n, kind)


def estimate_covariance(spec: MultiChannelSpectrogram, frames, kind: str = NOISY) -> SubbandCovariance:
    """Average outer product Y(k,n) Y(k,n)^H over a frame range."""
    if kind not in (NOISY, NOISE):
        raise ValueError("estimate_covariance produces noisy or noise covariances")
    return _covariance(spec, frames, kind)


def oracle_covariance(clean_spec: MultiChannelSpectrogram, frames) -> SubbandCovariance:
    """Desired-source covariance from the isolated clean rendering."""
    return _covariance(clean_spec, frames, ORACLE)


def project_psd(cov: SubbandCovariance) -> SubbandCovariance:
    """Clip negative eigenvalues to zero (Frobenius-nearest PSD matrix)."""
    a = cov.matrices
    a = 0.5 * (a + np.conj(np.swapaxes(a, 1, 2)))
    vals, vecs = np.linalg.eigh(a)
    if np.all(vals >= 0):
        return SubbandCovariance(a, cov.frame_count_used, cov.kind)
    clipped = np.clip(vals, 0.0, None)
    out = np.einsum("kij,kj,klj->kil", vecs, clipped, vecs.conj(), optimize=True)
    out = 0.5 * (out + np.conj(np.swapaxes(out, 1, 2)))
    return SubbandCovariance(out, cov.frame_count_used, cov.kind)


def subtract_covariance(noisy: SubbandCovariance, noise: SubbandCovariance) -> SubbandCovariance:
    """Desired covariance estimate Phi_YY - Phi_VV, projected onto the PSD cone.

    Both inputs are per-frame averages, so segments of different length are
    directly comparable.
    """
    if noisy.kind != NOISY or noise.kind != NOISE:
        raise ValueError("subtract_covariance expects (noisy, noise) covariances")
    if noisy.matrices.shape != noise.matrices.shape:
        raise ValueError(
            f"shape mismatch: {noisy.matrices.shape} vs {noise.matrices.shape}"
        )
    diff = SubbandCovariance(noisy.matrices - noise.matrices, noisy.frame_count_used, DESIRED)
    return project_psd(diff)


def _normalize_phase(v: np.ndarray) -> np.ndarray:
    """Unit norm per row; largest entry real non-negative, ties to lowest index."""
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    mag = np.abs(v)
    near_max = mag >= mag.max(axis=1, keepdims=True) * (1.0 - _TIE_RTOL)
    pivot = np.argmax(near_max, axis=1)
    p = v[np.arange(v.shape[0]), pivot]
    return v * (np.conj(p) / np.abs(p))[:, None]


def _power_iteration(a: np.ndarray) -> np.ndarray:
    """Top eigenvectors of a stack of Hermitian PSD matrices (K, M, M)."""
    k, m, _ = a.shape
    # repeated squaring gives a start vector already close to the top eigenvector
    b = a / np.real(np.trace(a, axis1=1, axis2=2))[:, None, None]
    for _ in range(_SQUARINGS):
        b = b @ b
        b = 0.5 * (b + np.conj(np.swapaxes(b, 1, 2)))
        b /= np.real(np.trace(b, axis1=1, axis2=2))[:, None, None]
    col = np.argmax(np.linalg.norm(b, axis=1), axis=1)
    v = b[np.arange(k), :, col]
    v /= np.linalg.norm(v, axis=1, keepdims=True)

    lam = np.real(np.einsum("ki,kij,kj->k", v.conj(), a, v))
    active = np.ones(k, dtype=bool)
    for _ in range(POWER_MAX_ITER):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        w = np.einsum("kij,kj->ki", b[idx], v[idx])
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        new_lam = np.real(np.einsum("ki,kij,kj->k", w.conj(), a[idx], w))
        step = np.linalg.norm(w - v[idx] * np.exp(1j * np.angle(np.sum(v[idx].conj() * w, axis=1)))[:, None], axis=1)
        converged = (np.abs(new_lam - lam[idx]) <= POWER_TOL * np.abs(new_lam)) & (step <= 1e-14)
        v[idx] = w
        lam[idx] = new_lam
        active[idx[converged]] = False
    return v


def principal_eigenvector(cov: SubbandCovariance) -> BeamformerWeights:
    """Principal eigenvector of every bin's covariance.

    Bins whose trace is (near) zero relative to the mean trace fall back to the
    passthrough vector e_1 and are flagged in ``degenerate``.
    """
    if cov.channel_count < 2:
        raise ValueError("beamforming requires >= 2 channels")
    a = cov.matrices
    tr = cov.traces()
    mean_tr = tr.mean()
    degenerate = ~(tr > DEGENERATE_TRACE_RATIO * mean_tr) | ~(tr > 0)
    v = np.zeros((cov.bin_count, cov.channel_count), dtype=np.complex128)
    v[:, 0] = 1.0
    ok = ~degenerate
    if ok.any():
        v[ok] = _power_iteration(a[ok])
    return BeamformerWeights(_normalize_phase(v), "unit_max_real", degenerate)


def floor_unreliable_bins(
    weights: BeamformerWeights, desired: SubbandCovariance, noise: SubbandCovariance, floor: float
) -> BeamformerWeights:
    """Mark bins whose desired-to-noise trace ratio is below ``floor`` as degenerate.

    Degenerate bins get e_1 weights here and passthrough after
    :func:`reference_weights`. ``floor = 0`` leaves the weights unchanged.
    """
    if floor <= 0:
        return weights
    ratio = desired.traces() / np.maximum(noise.traces(), np.finfo(float).tiny)
    degenerate = weights.degenerate | (ratio < floor)
    w = np.array(weights.weights)
    w[degenerate] = 0.0
    w[degenerate, 0] = 1.0
    return BeamformerWeights(w, weights.normalization, degenerate)


def reference_weights(weights: BeamformerWeights, ref_channel: int = 0) -> BeamformerWeights:
    """Rescale steering vectors so the output reproduces the reference-channel image.

    For a rank-1 desired covariance sigma^2 d d^H with unit eigenvector v, the
    weights conj(v_ref) v give W^H d = d_ref, i.e. the desired component of the
    output equals what the reference microphone received. The result does not
    depend on the eigenvector's arbitrary phase.
    """
    v = weights.weights
    w = np.conj(v[:, ref_channel])[:, None] * v
    w[weights.degenerate] = 0.0
    w[weights.degenerate, ref_channel] = 1.0
    return BeamformerWeights(w, "reference", weights.degenerate)


def apply_beamformer(weights: BeamformerWeights, spec: MultiChannelSpectrogram) -> np.ndarray:
    """Filter-and-sum X(k,n) = W(k)^H Y(k,n); returns shape (N, K)."""
    w = weights.weights
    if w.shape != (spec.bin_count, spec.channel_count):
        raise ValueError(
            f"shape mismatch: weights {w.shape}, spectrogram bins/channels "
            f"{(spec.bin_count, spec.channel_count)}"
        )
    return np.einsum("km,mnk->nk", w.conj(), spec.frames, optimize=True)


def adapt_lms_mvdr(
    weights: BeamformerWeights,
    spec: MultiChannelSpectrogram,
    step: float = 0.05,
    noise_cov: SubbandCovariance | None = None,
    frames=None,
    eps: float = 1e-6,
) -> BeamformerWeights:
    """Frost constrained LMS: minimize output power subject to W^H d = 1.

    ``d`` is the steering direction of the initial ``weights``. Each frame
    applies a normalized gradient step mu / (eps + |Y|^2) followed by an exact
    projection back onto the constraint plane. If ``noise_cov`` is given, bins
    whose adapted weights would pass more noise power (W^H Phi_VV W) than the
    initial distortionless weights keep the initial weights.
    """
    if step <= 0:
        raise ValueError("LMS step must be positive")
    d = weights.weights.copy()
    if d.shape != (spec.bin_count, spec.channel_count):
        raise ValueError("shape mismatch between weights and spectrogram")
    dd = np.real(np.sum(d.conj() * d, axis=1))
    f = d / dd[:, None]  # quiescent weights, satisfy f^H d = 1
    w0 = f.copy()
    w = f.copy()
    y = spec.frames if frames is None else spec.frames[:, _frame_slice(frames), :]
    for n in range(y.shape[1]):
        yn = y[:, n, :].T  # (K, M)
        out = np.sum(w.conj() * yn, axis=1)
        norm = eps + np.real(np.sum(yn.conj() * yn, axis=1))
        w = w - (step / norm * out.conj())[:, None] * yn
        # project onto {w : w^H d = 1}
        resid = np.sum(d.conj() * w, axis=1) - 1.0
        w = w - d * (resid / dd)[:, None]
    if noise_cov is not None:
        phi = noise_cov.matrices
        p_new = np.real(np.einsum("ki,kij,kj->k", w.conj(), phi, w))
        p_old = np.real(np.einsum("ki,kij,kj->k", w0.conj(), phi, w0))
        keep = p_new > p_old
        w[keep] = w0[keep]
    return BeamformerWeights(w, "distortionless", weights.degenerate)


_WEIGHTS_HEADER = struct.Struct("<QQ")


def save_weights(path, weights: BeamformerWeights) -> None:
    """Binary sidecar: uint64 K, uint64 M, then interleaved re/im float64 (LE)."""
    w = weights.weights
    data = np.empty(w.shape + (2,), dtype="<f8")
    data[..., 0] = w.real
    data[..., 1] = w.imag
    Path(path).write_bytes(_WEIGHTS_HEADER.pack(*w.shape) + data.tobytes())


def load_weights(path, normalization: str = "unit_max_real") -> BeamformerWeights:
    raw = Path(path).read_bytes()
    k, m = _WEIGHTS_HEADER.unpack_from(raw)
    data = np.frombuffer(raw, dtype="<f8", offset=_WEIGHTS_HEADER.size)
    if data.size != k * m * 2:
        raise ValueError("truncated weights sidecar")
    data = data.reshape(k, m, 2)
    return BeamformerWeights(data[..., 0] + 1j * data[..., 1], normalization)
