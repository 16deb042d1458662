"""Objective signal metrics used in place of recognition error rates."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import correlate

__all__ = [
    "MetricReport",
    "si_sdr",
    "segmental_snr",
    "align",
    "evaluate_run",
    "REPORT_FIELDS",
    "append_report_rows",
]

SI_SDR_CEILING = 80.0
SEG_SNR_RANGE = (-10.0, 35.0)
SEG_ACTIVE_DBFS = -60.0


def _as_1d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        x = x.reshape(-1)
    return x


def _si_ratio(est: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    """(target energy, distortion energy) of the scale-invariant projection."""
    alpha = np.dot(est, ref) / np.dot(ref, ref)
    target = alpha * ref
    return float(np.dot(target, target)), float(np.sum((est - target) ** 2))


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, capped at +80 dB."""
    est, ref = _as_1d(estimate), _as_1d(reference)
    if est.shape != ref.shape or est.size == 0:
        raise ValueError("si_sdr needs equal-length non-empty signals")
    if not np.any(ref):
        raise ValueError("reference is identically zero")
    t, d = _si_ratio(est, ref)
    if t == 0.0:
        return -SI_SDR_CEILING
    if d <= t * 10 ** (-SI_SDR_CEILING / 10):
        return SI_SDR_CEILING
    return float(10 * np.log10(t / d))


def segmental_snr(estimate, reference, sample_rate: int = 16000, window_ms: float = 32.0) -> float:
    """Mean per-window (scale-invariant) SNR, each window clamped to [-10, 35] dB.

    Only windows whose reference power exceeds -60 dBFS count.
    """
    est, ref = _as_1d(estimate), _as_1d(reference)
    if est.shape != ref.shape:
        raise ValueError("segmental_snr needs equal-length signals")
    win = max(1, int(round(sample_rate * window_ms / 1000.0)))
    n = est.size // win
    lo, hi = SEG_SNR_RANGE
    vals = []
    for i in range(n):
        r = ref[i * win : (i + 1) * win]
        if np.mean(r**2) <= 10 ** (SEG_ACTIVE_DBFS / 10):
            continue
        t, d = _si_ratio(est[i * win : (i + 1) * win], r)
        if t == 0.0:
            vals.append(lo)
        elif d == 0.0:
            vals.append(hi)
        else:
            vals.append(float(np.clip(10 * np.log10(t / d), lo, hi)))
    if not vals:
        raise ValueError("no active windows in reference")
    return float(np.mean(vals))


def align(estimate, reference, max_lag: int) -> tuple[np.ndarray, int]:
    """Shift ``estimate`` by the cross-correlation peak within +-max_lag samples."""
    est, ref = _as_1d(estimate), _as_1d(reference)
    xc = correlate(est, ref, mode="full", method="fft")
    zero = ref.size - 1
    lo, hi = max(0, zero - max_lag), min(xc.size, zero + max_lag + 1)
    lag = int(np.argmax(np.abs(xc[lo:hi])) + lo - zero)
    if lag == 0:
        return est, 0
    out = np.zeros_like(est)
    if lag > 0:
        out[:-lag] = est[lag:]
    else:
        out[-lag:] = est[:lag]
    return out, lag


@dataclass(frozen=True)
class MetricReport:
    si_sdr_db: float
    si_sdr_improvement_db: float
    seg_snr_db: float
    noise_reduction_db: float
    passthrough_si_sdr_db: float
    lag: int = 0


def evaluate_run(
    enhanced,
    reference,
    passthrough,
    noise_in=None,
    noise_out=None,
    sample_rate: int = 16000,
    max_lag: int = 512,
) -> MetricReport:
    """Score an enhanced span against the clean reference-channel target.

    ``passthrough`` is the reference channel taken through the same STFT round
    trip over the same span. ``noise_in`` / ``noise_out`` are the noise-only
    rendering before and after the (frozen, linear) enhancement; their power
    ratio is the noise reduction. Without them the field is NaN.
    """
    ref = _as_1d(reference)
    est, lag = align(enhanced, ref, max_lag)
    base, _ = align(passthrough, ref, max_lag)
    s_est = si_sdr(est, ref)
    s_base = si_sdr(base, ref)
    seg = segmental_snr(est, ref, sample_rate)
    if noise_in is not None and noise_out is not None:
        p_in = float(np.mean(_as_1d(noise_in) ** 2))
        p_out = float(np.mean(_as_1d(noise_out) ** 2))
        nr = 10 * np.log10(p_in / max(p_out, 1e-300)) if p_in > 0 else float("nan")
    else:
        nr = float("nan")
    return MetricReport(s_est, s_est - s_base, seg, float(nr), s_base, lag)


REPORT_SCHEMA = "ctxenhance-report v1"
REPORT_FIELDS = (
    "scene_id",
    "snr_db",
    "algorithm",
    "si_sdr",
    "improvement",
    "seg_snr",
    "noise_reduction",
    "decision",
    "runtime_ms",
    "status",
)


def append_report_rows(path, rows) -> None:
    """Append dict rows to a CSV report, writing the versioned header if new."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        if new:
            fh.write(f"# {REPORT_SCHEMA}\n")
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, extrasaction="ignore")
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in REPORT_FIELDS})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return v


def report_as_dict(report: MetricReport) -> dict:
    return asdict(report)
