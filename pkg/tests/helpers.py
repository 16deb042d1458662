"""Independent reference computations shared by the test modules."""

import numpy as np
import scipy.linalg

from ctxenhance.signal_core import FrameParams, MultiChannelSpectrogram


def random_psd(rng, m, rank=None):
    rank = m if rank is None else rank
    a = rng.standard_normal((m, rank)) + 1j * rng.standard_normal((m, rank))
    return a @ a.conj().T


def dense_top_eigvec(a):
    """Top eigenvector from LAPACK's Hermitian solver."""
    _, vecs = scipy.linalg.eigh(a)
    return vecs[:, -1]


def subspace_angle(u, v):
    """Angle between the complex lines spanned by u and v, in radians."""
    u = u / np.linalg.norm(u)
    v = v / np.linalg.norm(v)
    c = np.vdot(u, v)
    # sine form stays accurate for tiny angles, unlike arccos
    return float(np.arctan2(np.linalg.norm(v - c * u), abs(c)))


def nearest_psd_higham(a):
    """Frobenius-nearest PSD matrix via (A + |A|) / 2 with |A| = sqrtm(A^2)."""
    h = 0.5 * (a + a.conj().T)
    absval = scipy.linalg.sqrtm(h @ h)
    out = 0.5 * (h + absval)
    return 0.5 * (out + out.conj().T)


def complex_noise(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def spectrogram(frames, fft_size=512):
    """Wrap an (M, N, K) array; K must match fft_size."""
    return MultiChannelSpectrogram(np.asarray(frames), FrameParams(fft_size, fft_size // 2))


def batch_rls_oracle(y_ref, regs, lam, delta):
    """Exponentially weighted, regularized LS taps for one bin.

    Minimizes sum_n lam^(N-1-n) |y(n) - w^H u(n)|^2 + delta lam^N |w|^2, which
    is what RLS with P(0) = I / delta converges to exactly after N steps.
    regs has shape (N, D) with rows u(n).
    """
    n, d = regs.shape
    weights = lam ** np.arange(n - 1, -1, -1)
    r = (regs.T * weights) @ regs.conj() + delta * lam**n * np.eye(d)
    p = (regs.T * weights) @ np.conj(y_ref)
    return np.linalg.solve(r, p)
