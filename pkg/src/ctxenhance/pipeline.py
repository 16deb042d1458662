"""Utterance-level orchestration: SNR estimate, algorithm selection, enhancement."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from enum import Enum

import numpy as np

from . import cab, cleaner
from .signal_core import (
    FrameParams,
    MultiChannelSpectrogram,
    MultiChannelWave,
    UtteranceSegmentation,
    istft,
    segment_frames,
    stft,
)

__all__ = [
    "Algorithm",
    "SnrEstimate",
    "EnhancementDecision",
    "CleanerConfig",
    "CabConfig",
    "PipelineConfig",
    "EnhancementResult",
    "estimate_snr",
    "select_algorithm",
    "enhance_utterance",
    "enhance_forced",
]

logger = logging.getLogger(__name__)

SNR_FLOOR_DB = -40.0
MIN_SEGMENT_S = 0.1


class Algorithm(str, Enum):
    SPEECH_CLEANER = "SpeechCleaner"
    CAB = "CAB"
    ORACLE = "Oracle"
    PASSTHROUGH = "Passthrough"

    @classmethod
    def from_mode(cls, mode: str) -> "Algorithm":
        key = mode.strip().lower()
        table = {
            "sc": cls.SPEECH_CLEANER,
            "speechcleaner": cls.SPEECH_CLEANER,
            "cab": cls.CAB,
            "oracle": cls.ORACLE,
            "passthrough": cls.PASSTHROUGH,
        }
        if key not in table:
            raise ValueError(f"unknown mode {mode!r}")
        return table[key]


@dataclass(frozen=True)
class SnrEstimate:
    hotword_power: float
    context_power: float
    floor_db: float = SNR_FLOOR_DB

    def __post_init__(self):
        if self.hotword_power < 0:
            raise ValueError("hotword power must be non-negative")
        if not self.context_power > 0:
            raise ValueError("silent context")

    @property
    def linear(self) -> float:
        return self.hotword_power / self.context_power - 1.0

    @property
    def db(self) -> float:
        floor = 10 ** (self.floor_db / 10)
        return float(10 * np.log10(max(self.linear, floor)))


@dataclass(frozen=True)
class EnhancementDecision:
    chosen: Algorithm
    snr: SnrEstimate | None
    gamma_db: float


@dataclass(frozen=True)
class CleanerConfig:
    taps: int = 3
    forgetting_factor: float = cleaner.FORGETTING_FACTOR
    delta: float = cleaner.DELTA


@dataclass(frozen=True)
class CabConfig:
    lms_enabled: bool = False
    lms_step: float = 0.05
    psd_floor: float = 0.0


@dataclass(frozen=True)
class PipelineConfig:
    frame_params: FrameParams = field(default_factory=FrameParams)
    gamma_db: float = 6.0
    context_length_s: float = 8.0
    cleaner: CleanerConfig = field(default_factory=CleanerConfig)
    cab: CabConfig = field(default_factory=CabConfig)
    reference_channel: int = 0
    sample_rate: int = 16000

    def __post_init__(self):
        if not self.context_length_s > 0:
            raise ValueError("context_length_s must be > 0")
        if self.cleaner.taps < 1:
            raise ValueError("cleaner taps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "frame_params" in d:
            d["frame_params"] = FrameParams(**d["frame_params"])
        if "cleaner" in d:
            d["cleaner"] = CleanerConfig(**d["cleaner"])
        if "cab" in d:
            d["cab"] = CabConfig(**d["cab"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))


def estimate_snr(wave: MultiChannelWave, seg: UtteranceSegmentation, ref_channel: int = 0) -> SnrEstimate:
    """Broadband SNR: hotword power over context power, minus one."""
    min_len = int(round(MIN_SEGMENT_S * wave.sample_rate))
    if seg.hotword_end - seg.hotword_start < min_len or seg.context_end - seg.context_start < min_len:
        raise ValueError("SNR estimation needs hotword and context of at least 0.1 s")
    x = wave.channel(ref_channel)
    p_hot = float(np.mean(x[seg.hotword_start : seg.hotword_end] ** 2))
    p_ctx = float(np.mean(x[seg.context_start : seg.context_end] ** 2))
    if p_ctx == 0.0:
        raise ValueError("silent context")
    return SnrEstimate(p_hot, p_ctx)


def select_algorithm(snr: SnrEstimate, gamma_db: float = 6.0) -> EnhancementDecision:
    """Speech Cleaner strictly below gamma, CAB at or above."""
    chosen = Algorithm.SPEECH_CLEANER if snr.db < gamma_db else Algorithm.CAB
    return EnhancementDecision(chosen, snr, gamma_db)


@dataclass
class EnhancementResult:
    """Enhanced hotword+query audio plus the frozen processor that produced it.

    ``process`` re-applies the same (linear) frozen enhancement to another
    multichannel spectrogram of the same layout; the harness uses it to push
    clean-only and noise-only renderings through the identical operator.
    """

    enhanced: np.ndarray
    decision: EnhancementDecision
    diagnostics: dict
    span: tuple[int, int]
    output_frames: range
    frame_params: FrameParams
    weights: cab.BeamformerWeights | None = None
    filter_bank: cleaner.CleanerFilterBank | None = None
    reference_channel: int = 0

    def process(self, spec: MultiChannelSpectrogram) -> np.ndarray:
        frames = self.output_frames
        if self.weights is not None:
            sub = spec.frames[:, frames.start : frames.stop, :]
            part = MultiChannelSpectrogram(sub, spec.frame_params, spec.sample_rate)
            return cab.apply_beamformer(self.weights, part)
        if self.filter_bank is not None:
            return cleaner.apply_cleaner(self.filter_bank, spec, frames)
        return spec.frames[self.reference_channel, frames.start : frames.stop, :]

    def apply_to(self, wave: MultiChannelWave) -> np.ndarray:
        """Run the frozen enhancement on ``wave`` and return the output span."""
        padded = _pad_tail(wave, self.frame_params)
        return _synthesize(self.process(stft(padded, self.frame_params)), self.output_frames, padded, self.span, self.frame_params)


def _pad_tail(wave: MultiChannelWave, params: FrameParams) -> MultiChannelWave:
    """Append fft_size - hop zeros so the last input samples are fully overlapped."""
    pad = np.zeros((wave.channel_count, params.fft_size - params.hop_size))
    return MultiChannelWave(np.concatenate([wave.samples, pad], axis=1), wave.sample_rate)


def _output_frames(seg: UtteranceSegmentation, params: FrameParams, n_frames: int) -> range:
    """Every frame overlapping [hotword_start, query_end)."""
    hop, n_fft = params.hop_size, params.fft_size
    lo = max(0, (seg.hotword_start - n_fft) // hop + 1)
    hi = min(n_frames, -(-seg.query_end // hop))
    return range(lo, hi)


def _synthesize(out: np.ndarray, frames: range, wave: MultiChannelWave, span, params: FrameParams) -> np.ndarray:
    n_frames = params.frame_count(len(wave))
    full = np.zeros((n_frames, params.bin_count), dtype=np.complex128)
    full[frames.start : frames.stop] = out
    y = istft(MultiChannelSpectrogram(full[None], params, wave.sample_rate)).samples[0]
    return y[span[0] : span[1]].copy()


def _check_channels(wave: MultiChannelWave, config: PipelineConfig):
    if not 0 <= config.reference_channel < wave.channel_count:
        raise ValueError("reference channel out of range")


def enhance_utterance(
    wave: MultiChannelWave,
    seg: UtteranceSegmentation,
    config: PipelineConfig = PipelineConfig(),
) -> EnhancementResult:
    """SNR-based selection between Speech Cleaner and CAB, then enhancement."""
    _check_channels(wave, config)
    if wave.channel_count < 2:
        logger.warning("single-channel input: passthrough")
        return _run(wave, seg, config, Algorithm.PASSTHROUGH, None, warning="single channel input")
    t0 = time.perf_counter()
    snr = estimate_snr(wave, seg, config.reference_channel)
    decision = select_algorithm(snr, config.gamma_db)
    t_sel = time.perf_counter() - t0
    return _run(wave, seg, config, decision.chosen, decision, select_s=t_sel)


def enhance_forced(
    wave: MultiChannelWave,
    seg: UtteranceSegmentation,
    config: PipelineConfig = PipelineConfig(),
    mode: Algorithm | str = Algorithm.CAB,
    clean: MultiChannelWave | None = None,
) -> EnhancementResult:
    """Run one algorithm with selection bypassed. Oracle mode needs ``clean``."""
    mode = Algorithm.from_mode(mode) if isinstance(mode, str) else mode
    _check_channels(wave, config)
    if mode is Algorithm.ORACLE and clean is None:
        raise ValueError("oracle requires clean reference")
    if mode is not Algorithm.PASSTHROUGH and wave.channel_count < 2:
        raise ValueError(f"{mode.value} requires >= 2 channels")
    snr = None
    try:
        snr = estimate_snr(wave, seg, config.reference_channel)
    except ValueError:
        pass
    decision = EnhancementDecision(mode, snr, config.gamma_db)
    return _run(wave, seg, config, mode, decision, clean=clean)


def _run(wave, seg, config, mode, decision, clean=None, select_s=0.0, warning=None) -> EnhancementResult:
    params = config.frame_params
    if wave.sample_rate != config.sample_rate:
        raise ValueError(
            f"sample rate mismatch: input {wave.sample_rate} Hz, config {config.sample_rate} Hz"
        )
    if seg.query_end > len(wave):
        raise ValueError("segmentation extends past the end of the input")
    timings = {"select_s": select_s}
    diagnostics: dict = {}
    if warning:
        diagnostics["warning"] = warning
    if decision is None:
        decision = EnhancementDecision(mode, None, config.gamma_db)

    t = time.perf_counter()
    wave = _pad_tail(wave, params)
    spec = stft(wave, params)
    timings["stft_s"] = time.perf_counter() - t
    frames = segment_frames(seg, params)
    out_frames = _output_frames(seg, params, spec.frame_count)
    ref = config.reference_channel
    weights = bank = None

    t = time.perf_counter()
    if mode is Algorithm.SPEECH_CLEANER:
        ctx = frames.context
        if len(ctx) < max(1, config.cleaner.taps):
            raise ValueError("context shorter than minimum")
        c = config.cleaner
        bank = cleaner.new_filter_bank(
            spec.bin_count, spec.channel_count, c.taps, c.forgetting_factor, c.delta, ref
        )
        bank = cleaner.freeze(cleaner.rls_adapt(bank, spec, ctx))
        out = cleaner.apply_cleaner(bank, spec, out_frames)
    elif mode in (Algorithm.CAB, Algorithm.ORACLE):
        if len(frames.context) < 1:
            raise ValueError("context shorter than minimum")
        if mode is Algorithm.ORACLE:
            clean_spec = stft(clean, params)
            desired = cab.oracle_covariance(clean_spec, frames.hotword)
        else:
            noise = cab.estimate_covariance(spec, frames.context, cab.NOISE)
            noisy = cab.estimate_covariance(spec, frames.hotword, cab.NOISY)
            desired = cab.subtract_covariance(noisy, noise)
        steer = cab.principal_eigenvector(desired)
        if mode is Algorithm.CAB:
            steer = cab.floor_unreliable_bins(steer, desired, noise, config.cab.psd_floor)
        diagnostics["eigenvalue_ratio"] = _eigen_ratios(desired).round(4).tolist()
        diagnostics["degenerate_bins"] = int(steer.degenerate.sum())
        if config.cab.lms_enabled:
            noise_cov = cab.estimate_covariance(spec, frames.context, cab.NOISE)
            lms_frames = range(frames.hotword.start, out_frames.stop)
            weights = cab.adapt_lms_mvdr(steer, spec, config.cab.lms_step, noise_cov, lms_frames)
            # scale the distortionless weights to the reference-channel image
            gain = np.conj(steer.weights[:, ref])[:, None]
            weights = cab.BeamformerWeights(weights.weights * gain, "reference", steer.degenerate)
        else:
            weights = cab.reference_weights(steer, ref)
        sub = MultiChannelSpectrogram(spec.frames[:, out_frames.start : out_frames.stop, :], params, wave.sample_rate)
        out = cab.apply_beamformer(weights, sub)
    elif mode is Algorithm.PASSTHROUGH:
        out = spec.frames[ref, out_frames.start : out_frames.stop, :]
    else:  # pragma: no cover
        raise ValueError(f"unsupported mode {mode}")
    timings["enhance_s"] = time.perf_counter() - t

    t = time.perf_counter()
    span = (seg.hotword_start, seg.query_end)
    enhanced = _synthesize(out, out_frames, wave, span, params)
    timings["istft_s"] = time.perf_counter() - t

    diagnostics.update(
        decision=decision.chosen.value,
        snr_db=None if decision.snr is None else decision.snr.db,
        gamma_db=config.gamma_db,
        timings=timings,
        config=config.to_dict(),
    )
    return EnhancementResult(enhanced, decision, diagnostics, span, out_frames, params, weights, bank, ref)


def _eigen_ratios(cov: cab.SubbandCovariance) -> np.ndarray:
    """Per-bin largest eigenvalue over trace (1 for rank one)."""
    vals = np.linalg.eigvalsh(cov.matrices)
    tr = np.clip(vals.sum(axis=1), 1e-300, None)
    return np.where(vals.sum(axis=1) > 0, vals[:, -1] / tr, 0.0)
