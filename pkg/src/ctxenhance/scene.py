"""Synthetic experiment harness: array rendering and SNR-calibrated mixing."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, firwin2, lfilter

from .signal_core import MultiChannelWave, UtteranceSegmentation, read_wav

__all__ = [
    "SourceSpec",
    "SceneSpec",
    "SceneMix",
    "fractional_delay",
    "render_source",
    "mix_scene",
    "truncate_context",
    "synth_speech",
    "pink_noise",
    "far_field_delays",
    "exact_fir_scene_spec",
    "ARRAY_PRESETS",
    "POSITIONS_DEG",
    "make_scene_spec",
    "scene_spec_from_manifest",
]

SPEED_OF_SOUND = 343.0
FRAC_DELAY_TAPS = 32
_KAISER_BETA = 8.6

# Two mics on top 7.1 cm apart plus one on the front face (metres).
ARRAY_PRESETS = {
    2: np.array([[-0.0355, 0.0, 0.0], [0.0355, 0.0, 0.0]]),
    3: np.array([[-0.0355, 0.0, 0.0], [0.0355, 0.0, 0.0], [0.0, 0.045, -0.04]]),
}
# seven source positions around the array, tags "p0".."p6"
POSITIONS_DEG = {f"p{i}": az for i, az in enumerate((0, 50, 100, 150, 210, 260, 310))}


@dataclass(frozen=True)
class SourceSpec:
    """Mono source and how it reaches each microphone.

    Either ``delays`` (fractional samples, >= 0) and ``gains``, or per-channel
    impulse responses ``rirs`` sampled at ``rir_rate``.
    """

    wave: np.ndarray
    position_tag: str
    delays: tuple[float, ...] | None = None
    gains: tuple[float, ...] | None = None
    rirs: tuple[np.ndarray, ...] | None = None
    rir_rate: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "wave", np.asarray(self.wave, dtype=np.float64).reshape(-1))
        if self.rirs is None:
            if self.delays is None:
                raise ValueError("source needs delays/gains or rirs")
            gains = self.gains if self.gains is not None else (1.0,) * len(self.delays)
            if len(gains) != len(self.delays):
                raise ValueError("delays and gains differ in length")
            if any(d < 0 for d in self.delays):
                raise ValueError("delays must be >= 0")
            if not any(g != 0 for g in gains):
                raise ValueError("at least one channel gain must be nonzero")
            object.__setattr__(self, "gains", tuple(float(g) for g in gains))
            object.__setattr__(self, "delays", tuple(float(d) for d in self.delays))

    @property
    def channel_count(self) -> int:
        return len(self.rirs) if self.rirs is not None else len(self.delays)


@dataclass(frozen=True)
class SceneSpec:
    target: SourceSpec
    interferer: SourceSpec
    snr_db: float
    hotword_start: int
    hotword_end: int
    query_end: int
    context_length_s: float = 8.0
    desired_in_context: bool = False
    sample_rate: int = 16000
    channel_count: int = 3
    reference_channel: int = 0
    boundary_jitter_ms: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.target.position_tag == self.interferer.position_tag:
            raise ValueError("target and interferer must come from different positions")
        if not self.context_length_s > 0:
            raise ValueError("context length must be > 0")
        if not 0 <= self.hotword_start < self.hotword_end <= self.query_end <= self.target.wave.size:
            raise ValueError("target boundary metadata out of range")
        for src in (self.target, self.interferer):
            if src.channel_count != self.channel_count:
                raise ValueError("source rendering does not match channel count")


@dataclass(frozen=True)
class SceneMix:
    """Mixture with ground truth; ``mixture == clean_target + noise_only``."""

    mixture: MultiChannelWave
    seg: UtteranceSegmentation
    clean_target: MultiChannelWave
    noise_only: MultiChannelWave
    interferer_gain: float
    snr_db: float
    true_seg: UtteranceSegmentation | None = None

    def truncated(self, new_length_s: float, fft_size: int = 512) -> "SceneMix":
        _, seg = truncate_context(self.mixture, self.seg, new_length_s, fft_size)
        drop = self.seg.hotword_start - seg.hotword_start
        cut = lambda w: MultiChannelWave(w.samples[:, drop:], w.sample_rate)  # noqa: E731
        return replace(
            self,
            mixture=cut(self.mixture),
            seg=seg,
            clean_target=cut(self.clean_target),
            noise_only=cut(self.noise_only),
            true_seg=None if self.true_seg is None else _drop_context(self.true_seg, drop),
        )


def _drop_context(seg: UtteranceSegmentation, drop: int) -> UtteranceSegmentation:
    return UtteranceSegmentation.from_boundaries(
        max(0, seg.context_start - drop), seg.hotword_start - drop, seg.hotword_end - drop, seg.query_end - drop
    )


def _frac_kernel(frac: float) -> np.ndarray:
    half = FRAC_DELAY_TAPS // 2
    j = np.arange(-half + 1, half + 1)  # -15..16
    x = (j - frac) / (half + 0.5)
    win = np.i0(_KAISER_BETA * np.sqrt(np.clip(1.0 - x**2, 0.0, None))) / np.i0(_KAISER_BETA)
    return np.sinc(j - frac) * win


def fractional_delay(x: np.ndarray, delay: float, length: int | None = None) -> np.ndarray:
    """y[t] ~ x(t - delay) by 32-tap Kaiser-windowed sinc; exact for integer delays."""
    x = np.asarray(x, dtype=np.float64)
    length = x.size if length is None else length
    whole = int(np.floor(delay))
    frac = delay - whole
    out = np.zeros(length)
    if frac == 0.0:
        n = max(0, min(length - whole, x.size))
        out[whole : whole + n] = x[:n]
        return out
    h = _frac_kernel(frac)
    y = np.convolve(x, h)
    # y[i] = sum_j h[j+15] x[i - 15 - j]  ->  out[t] = y[t - whole + 15]
    offset = FRAC_DELAY_TAPS // 2 - 1 - whole
    lo = max(0, -offset)
    hi = min(length, y.size - offset)
    if hi > lo:
        out[lo:hi] = y[lo + offset : hi + offset]
    return out


def render_source(src: SourceSpec, length: int, channel_count: int, sample_rate: int = 16000) -> MultiChannelWave:
    """Render a mono source onto each microphone, trimmed / zero-padded to ``length``."""
    if src.channel_count != channel_count:
        raise ValueError("source rendering does not match channel count")
    out = np.zeros((channel_count, length))
    if src.rirs is not None:
        if src.rir_rate is not None and src.rir_rate != sample_rate:
            raise ValueError(f"RIR sample rate {src.rir_rate} does not match scene rate {sample_rate}")
        for m, h in enumerate(src.rirs):
            y = fftconvolve(src.wave, np.asarray(h, dtype=np.float64))[:length]
            out[m, : y.size] = y
    else:
        for m, (d, g) in enumerate(zip(src.delays, src.gains)):
            out[m] = g * fractional_delay(src.wave, d, length)
    return MultiChannelWave(out, sample_rate)


def _power(x: np.ndarray) -> float:
    return float(np.mean(x**2)) if x.size else 0.0


def mix_scene(spec: SceneSpec) -> SceneMix:
    """Interferer from t=0, target from the end of the noise context on."""
    fs, m, ref = spec.sample_rate, spec.channel_count, spec.reference_channel
    ctx = int(round(spec.context_length_s * fs))
    utt = spec.target.wave[spec.hotword_start : spec.query_end]
    hot_len = spec.hotword_end - spec.hotword_start
    total = ctx + utt.size
    if spec.interferer.wave.size < total:
        raise ValueError(
            f"interferer too short: {spec.interferer.wave.size} samples, need {total}"
        )
    hs, he, qe = ctx, ctx + hot_len, total

    target = np.zeros((m, total))
    target[:, ctx:] = render_source(replace(spec.target, wave=utt), utt.size, m, fs).samples
    if spec.desired_in_context:
        query = spec.target.wave[spec.hotword_end : spec.query_end]
        if query.size == 0:
            raise ValueError("desired_in_context needs non-empty query audio")
        reps = -(-ctx // query.size)
        filler = np.tile(query, reps)[-ctx:]
        target[:, :ctx] = render_source(replace(spec.target, wave=filler), ctx, m, fs).samples

    interf = render_source(
        replace(spec.interferer, wave=spec.interferer.wave[:total]), total, m, fs
    ).samples
    p_t = _power(target[ref, hs:qe])
    p_n = _power(interf[ref, hs:qe])
    if p_t == 0.0:
        raise ValueError("target is silent over the hotword+query span")
    if np.isinf(spec.snr_db) and spec.snr_db > 0:
        gain = 0.0
    else:
        if p_n == 0.0:
            raise ValueError("interferer is silent over the hotword+query span")
        gain = float(np.sqrt(p_t / (p_n * 10 ** (spec.snr_db / 10))))
    noise = gain * interf
    mixture = target + noise

    true_seg = UtteranceSegmentation.from_boundaries(0, hs, he, qe)
    seg = true_seg
    if spec.boundary_jitter_ms:
        rng = np.random.default_rng(spec.seed + 7919)
        j = int(round(spec.boundary_jitter_ms * fs / 1000))
        dh, de = rng.integers(-j, j + 1, size=2)
        seg = UtteranceSegmentation.from_boundaries(0, hs + dh, max(hs + dh + 1, he + de), qe)

    return SceneMix(
        MultiChannelWave(mixture, fs),
        seg,
        MultiChannelWave(target, fs),
        MultiChannelWave(noise, fs),
        gain,
        spec.snr_db,
        true_seg,
    )


def truncate_context(mixture: MultiChannelWave, seg: UtteranceSegmentation, new_length_s: float, fft_size: int = 512):
    """Keep only the last ``new_length_s`` seconds of noise context."""
    new_len = int(round(new_length_s * mixture.sample_rate))
    cur = seg.hotword_start - seg.context_start
    if new_len > cur:
        raise ValueError("new context length exceeds current context length")
    if new_len < fft_size:
        raise ValueError("context shorter than one STFT frame")
    drop = seg.hotword_start - new_len
    out = MultiChannelWave(mixture.samples[:, drop:], mixture.sample_rate)
    new_seg = UtteranceSegmentation.from_boundaries(
        0, seg.hotword_start - drop, seg.hotword_end - drop, seg.query_end - drop
    )
    return out, new_seg


# --- synthetic sources ------------------------------------------------------


def _resonator(x: np.ndarray, freq: float, bw: float, fs: int) -> np.ndarray:
    """Two-pole resonator with unit gain at ``freq``."""
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    peak = abs(a[0] + a[1] * np.exp(-1j * theta) + a[2] * np.exp(-2j * theta))
    return lfilter([peak], a, x)


def synth_speech(
    duration_s: float,
    sample_rate: int = 16000,
    seed: int = 0,
    f0_range: tuple[float, float] = (95.0, 210.0),
    pause_prob: float = 0.25,
    rms: float = 0.05,
) -> np.ndarray:
    """Crude speech-like signal: formant-filtered glottal pulses, fricatives, pauses."""
    rng = np.random.default_rng(seed)
    fs = sample_rate
    n_total = int(round(duration_s * fs))
    out = np.zeros(n_total)
    t = 0
    while t < n_total:
        n = int(rng.uniform(0.10, 0.32) * fs)
        n = min(n, n_total - t)
        env = np.abs(np.sin(np.pi * np.arange(n) / max(n - 1, 1))) ** 0.6
        if rng.random() < 0.8:
            f0 = np.linspace(*rng.uniform(*f0_range, size=2), n)
            phase = np.cumsum(f0 / fs)
            pulses = np.diff(np.floor(phase), prepend=0.0)
            src = lfilter([1.0], [1.0, -0.9], pulses) + 0.02 * rng.standard_normal(n)
            y = np.zeros(n)
            for lo, hi, bw, w in ((300, 850, 90, 1.0), (850, 2300, 120, 0.5), (2300, 3400, 180, 0.3)):
                y += w * _resonator(src, rng.uniform(lo, hi), bw, fs)
        else:
            y = _resonator(rng.standard_normal(n), rng.uniform(2500, 6000), 1500, fs)
            y = y * 0.06
        out[t : t + n] = y * env * rng.uniform(0.4, 1.0)
        t += n
        if rng.random() < pause_prob:
            t += int(rng.uniform(0.03, 0.2) * fs)
    p = np.sqrt(np.mean(out**2))
    return out * (rms / p) if p > 0 else out


def pink_noise(duration_s: float, sample_rate: int = 16000, seed: int = 0, rms: float = 0.05) -> np.ndarray:
    """White noise shaped to -10 dB/decade by a 63-tap FIR."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    freqs = np.linspace(0.0, 1.0, 257)
    gains = 1.0 / np.sqrt(np.maximum(freqs, freqs[1]))
    h = firwin2(63, freqs, gains / gains.max())
    y = lfilter(h, [1.0], rng.standard_normal(n + 62))[62:]
    return y * (rms / np.sqrt(np.mean(y**2)))


def far_field_delays(
    azimuth_deg: float, mic_positions: np.ndarray, sample_rate: int = 16000, c: float = SPEED_OF_SOUND
) -> tuple[float, ...]:
    """Plane-wave arrival delays in samples, shifted so the earliest is 0."""
    az = np.deg2rad(azimuth_deg)
    u = np.array([np.cos(az), np.sin(az), 0.0])  # unit vector toward the source
    tau = -(mic_positions @ u) / c * sample_rate
    return tuple(float(v) for v in tau - tau.min())


HOTWORD_SEED = 424242


def make_scene_spec(
    snr_db: float,
    channel_count: int = 3,
    seed: int = 0,
    noise: str = "speech",
    context_length_s: float = 8.0,
    desired_in_context: bool = False,
    target_position: str = "p0",
    interferer_position: str = "p3",
    hotword_s: float = 0.8,
    query_s: float = 2.2,
    sample_rate: int = 16000,
    boundary_jitter_ms: float = 0.0,
) -> SceneSpec:
    """Fully synthetic scene on the preset array geometry."""
    fs = sample_rate
    mics = ARRAY_PRESETS[channel_count]
    hot = synth_speech(hotword_s, fs, seed=HOTWORD_SEED, f0_range=(110, 190), pause_prob=0.0)
    query = synth_speech(query_s, fs, seed=seed * 2 + 1, f0_range=(110, 190))
    utt = np.concatenate([hot, query])
    total_s = context_length_s + hotword_s + query_s + 0.1
    if noise == "speech":
        nz = synth_speech(total_s, fs, seed=seed * 2 + 2, f0_range=(85, 150), pause_prob=0.1)
    elif noise == "pink":
        nz = pink_noise(total_s, fs, seed=seed * 2 + 2)
    else:
        raise ValueError(f"unknown noise type {noise!r}")
    target = SourceSpec(utt, target_position, far_field_delays(POSITIONS_DEG[target_position], mics, fs))
    interf = SourceSpec(nz, interferer_position, far_field_delays(POSITIONS_DEG[interferer_position], mics, fs))
    return SceneSpec(
        target,
        interf,
        snr_db,
        0,
        hot.size,
        utt.size,
        context_length_s,
        desired_in_context,
        fs,
        channel_count,
        boundary_jitter_ms=boundary_jitter_ms,
        seed=seed,
    )


EXACT_FIR_TAPS = (0.8, -0.45, 0.25)


def exact_fir_scene_spec(
    snr_db: float,
    seed: int = 0,
    context_length_s: float = 8.0,
    desired_in_context: bool = False,
    target_channels: str = "ref",
    taps: tuple[float, ...] = EXACT_FIR_TAPS,
    hop_size: int = 256,
    hotword_s: float = 0.8,
    query_s: float = 2.2,
    sample_rate: int = 16000,
) -> SceneSpec:
    """Two-channel scene whose channel-0 noise is an exact subband FIR of channel 1.

    Channel 0 receives sum_l taps[l] * noise(t - l * hop). A whole-hop delay is
    a whole-frame shift in the STFT, so per bin Y_0(n) = sum_l taps[l] Y_1(n - l)
    holds exactly. ``target_channels`` is "ref" (target on channel 0 only) or
    "both" (target identical on both channels).
    """
    fs = sample_rate
    hot = synth_speech(hotword_s, fs, seed=HOTWORD_SEED, f0_range=(110, 190), pause_prob=0.0)
    query = synth_speech(query_s, fs, seed=seed * 2 + 1, f0_range=(110, 190))
    utt = np.concatenate([hot, query])
    nz = pink_noise(context_length_s + hotword_s + query_s + 0.1, fs, seed=seed * 2 + 2)
    h0 = np.zeros((len(taps) - 1) * hop_size + 1)
    h0[::hop_size] = taps
    noise_rirs = (h0, np.array([1.0]))
    if target_channels == "ref":
        target_rirs = (np.array([1.0]), np.array([0.0]))
    elif target_channels == "both":
        target_rirs = (np.array([1.0]), np.array([1.0]))
    else:
        raise ValueError(f"unknown target_channels {target_channels!r}")
    return SceneSpec(
        SourceSpec(utt, "near", rirs=target_rirs, rir_rate=fs),
        SourceSpec(nz, "far", rirs=noise_rirs, rir_rate=fs),
        snr_db,
        0,
        hot.size,
        utt.size,
        context_length_s,
        desired_in_context,
        fs,
        2,
        seed=seed,
    )


def _source_from_manifest(d: dict, base: Path, fs: int, m: int, seed: int, min_s: float) -> SourceSpec:
    if "path" in d:
        wave = read_wav(base / d["path"], expected_rate=fs).samples[0]
    elif "synth" in d:
        kind = d["synth"]
        dur = float(d.get("duration_s", min_s))
        if kind == "speech":
            wave = synth_speech(dur, fs, seed=int(d.get("seed", seed)))
        elif kind == "pink":
            wave = pink_noise(dur, fs, seed=int(d.get("seed", seed)))
        else:
            raise ValueError(f"unknown synthetic source {kind!r}")
    else:
        raise ValueError("source needs 'path' or 'synth'")
    tag = str(d.get("position", d.get("position_tag", "")))
    if "rirs" in d:
        rirs = []
        for p in d["rirs"]:
            r = read_wav(base / p)
            if r.sample_rate != fs:
                raise ValueError(f"RIR {p} sample rate {r.sample_rate} does not match scene rate {fs}")
            rirs.append(r.samples[0])
        return SourceSpec(wave, tag, rirs=tuple(rirs), rir_rate=fs)
    if "delays" in d:
        delays = tuple(d["delays"])
    elif tag in POSITIONS_DEG and m in ARRAY_PRESETS:
        delays = far_field_delays(POSITIONS_DEG[tag], ARRAY_PRESETS[m], fs)
    else:
        raise ValueError(f"source at {tag!r} needs delays or rirs")
    return SourceSpec(wave, tag, delays, tuple(d.get("gains", (1.0,) * len(delays))))


def scene_spec_from_manifest(manifest: dict | str | Path, base_dir: Path | None = None) -> SceneSpec:
    """Build a SceneSpec from a JSON manifest (dict or file path)."""
    if not isinstance(manifest, dict):
        path = Path(manifest)
        base_dir = path.parent if base_dir is None else base_dir
        manifest = json.loads(path.read_text())
    base = Path(base_dir or ".")
    fs = int(manifest.get("sample_rate", 16000))
    m = int(manifest.get("channels", 3))
    seed = int(manifest.get("seed", 0))
    ctx = float(manifest.get("context_length_s", 8.0))
    tgt = manifest["target"]
    target = _source_from_manifest(tgt, base, fs, m, seed * 2 + 1, 3.0)
    hs = int(tgt.get("hotword_start", 0))
    he = int(tgt.get("hotword_end", min(target.wave.size, int(0.8 * fs))))
    qe = int(tgt.get("query_end", target.wave.size))
    if "interferer" not in manifest:
        raise ValueError("manifest has no interferer")
    interf = _source_from_manifest(
        manifest["interferer"], base, fs, m, seed * 2 + 2, ctx + (qe - hs) / fs + 0.1
    )
    snr = manifest.get("snr_db", 0.0)
    snr = float("inf") if snr in (None, "inf", "clean") else float(snr)
    return SceneSpec(
        target,
        interf,
        snr,
        hs,
        he,
        qe,
        ctx,
        bool(manifest.get("desired_in_context", False)),
        fs,
        m,
        int(manifest.get("reference_channel", 0)),
        float(manifest.get("boundary_jitter_ms", 0.0)),
        seed,
    )
