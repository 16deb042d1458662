import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctxenhance import cab
from ctxenhance.signal_core import MultiChannelWave, istft, stft
from ctxenhance.metrics import si_sdr
from helpers import (
    complex_noise,
    dense_top_eigvec,
    nearest_psd_higham,
    random_psd,
    spectrogram,
    subspace_angle,
)

K = 257


def cov(mats, kind=cab.NOISY):
    mats = np.asarray(mats, dtype=complex)
    if mats.ndim == 2:
        mats = mats[None]
    return cab.SubbandCovariance(mats, 1, kind)


def pad_bins(frames):
    """Place a (M, N, k) block in the low bins of a full 257-bin spectrogram."""
    m, n, k = frames.shape
    out = np.zeros((m, n, K), dtype=complex)
    out[:, :, :k] = frames
    return spectrogram(out)


def test_single_frame_outer_product():
    y = np.zeros((2, 1, K), complex)
    y[:, 0, 5] = [1, 1j]
    phi = cab.estimate_covariance(spectrogram(y), range(0, 1)).matrices[5]
    assert np.allclose(phi, [[1, -1j], [1j, 1]])


def test_brute_force_accumulation(rng):
    y = complex_noise(rng, (3, 40, 4))
    phi = cab.estimate_covariance(pad_bins(y), range(5, 37)).matrices
    for k in range(4):
        ref = np.zeros((3, 3), complex)
        for n in range(5, 37):
            ref += np.outer(y[:, n, k], y[:, n, k].conj())
        assert np.allclose(phi[k], ref / 32, atol=1e-13)


def test_law_of_large_numbers(rng):
    y = complex_noise(rng, (3, 10000, 2))
    phi = cab.estimate_covariance(pad_bins(y), range(0, 10000)).matrices[:2]
    assert np.max(np.abs(phi - np.eye(3))) < 0.05


def test_covariance_errors():
    spec = pad_bins(np.zeros((2, 4, 1)))
    with pytest.raises(ValueError, match="no frames in segment"):
        cab.estimate_covariance(spec, range(2, 2))
    with pytest.raises(ValueError, match=">= 2 channels"):
        cab.estimate_covariance(pad_bins(np.zeros((1, 4, 1))), range(0, 4))


@given(st.integers(0, 2**31), st.integers(2, 4))
def test_covariance_hermitian_psd(seed, m):
    y = complex_noise(np.random.default_rng(seed), (m, 7, 3))
    phi = cab.estimate_covariance(pad_bins(y), range(0, 7)).matrices
    assert np.allclose(phi, np.conj(np.swapaxes(phi, 1, 2)))
    assert np.linalg.eigvalsh(phi).min() > -1e-12


def test_subtraction_examples():
    eye = np.eye(2)
    d = cab.subtract_covariance(cov(2 * eye, cab.NOISY), cov(eye, cab.NOISE))
    assert d.kind == cab.DESIRED and np.allclose(d.matrices[0], eye)
    d = cab.subtract_covariance(cov(eye, cab.NOISY), cov(2 * eye, cab.NOISE))
    assert np.allclose(d.matrices[0], 0)
    with pytest.raises(ValueError, match="shape mismatch"):
        cab.subtract_covariance(cov(eye, cab.NOISY), cov(np.eye(3), cab.NOISE))


def test_project_psd_examples():
    p = cab.project_psd(cov(np.diag([3.0, -1.0]), cab.DESIRED)).matrices[0]
    assert np.allclose(p, np.diag([3.0, 0.0]))
    a = random_psd(np.random.default_rng(3), 3)
    assert np.allclose(cab.project_psd(cov(a, cab.DESIRED)).matrices[0], a, atol=1e-12)


@given(st.integers(0, 2**31), st.integers(2, 4))
def test_project_psd_matches_higham(seed, m):
    r = np.random.default_rng(seed)
    a = random_psd(r, m) - random_psd(r, m)
    p = cab.project_psd(cov(a, cab.DESIRED)).matrices[0]
    assert np.allclose(p, nearest_psd_higham(a), atol=1e-9 * np.abs(a).max())
    assert np.linalg.eigvalsh(p).min() >= -1e-12


def test_steering_recovery_from_simulated_scene(rng):
    # desired source on d at 10 dB over white sensor noise
    m, n = 3, 5000
    d = np.exp(1j * np.array([0.0, 0.7, -1.9]))
    s = complex_noise(rng, (n, 1)) * np.sqrt(10.0 / 3.0)
    v = complex_noise(rng, (m, n, 1))
    hot = d[:, None, None] * s.T[:, :, None] + v
    ctx = complex_noise(rng, (m, n, 1))
    both = np.concatenate([ctx, hot], axis=1)
    spec = pad_bins(both)
    noise = cab.estimate_covariance(spec, range(0, n), cab.NOISE)
    noisy = cab.estimate_covariance(spec, range(n, 2 * n), cab.NOISY)
    w = cab.principal_eigenvector(cab.subtract_covariance(noisy, noise))
    assert np.degrees(subspace_angle(w.weights[0], d)) <= 3.0


def test_principal_eigenvector_examples():
    w = cab.principal_eigenvector(cov(np.diag([3.0, 1.0]), cab.DESIRED)).weights[0]
    assert np.allclose(w, [1, 0])
    d = np.array([1, 1j]) / np.sqrt(2)
    w = cab.principal_eigenvector(cov(np.outer(d, d.conj()), cab.DESIRED)).weights[0]
    assert np.allclose(w, d, atol=1e-12)


@given(st.integers(0, 2**31), st.integers(2, 4))
def test_power_iteration_matches_dense_solver(seed, m):
    a = random_psd(np.random.default_rng(seed), m)
    w = cab.principal_eigenvector(cov(a, cab.DESIRED)).weights[0]
    assert subspace_angle(w, dense_top_eigvec(a)) <= 1e-6
    lam = np.linalg.eigvalsh(a)[-1]
    assert np.linalg.norm(a @ w - lam * w) <= 1e-6 * lam
    assert np.isclose(np.linalg.norm(w), 1.0)
    p = np.argmax(np.abs(w))
    assert abs(w[p].imag) < 1e-12 and w[p].real > 0


@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_eigenvector_scale_invariant(seed, c):
    a = random_psd(np.random.default_rng(seed), 3)
    w1 = cab.principal_eigenvector(cov(a, cab.DESIRED)).weights[0]
    w2 = cab.principal_eigenvector(cov(c * a, cab.DESIRED)).weights[0]
    assert np.allclose(w1, w2, atol=1e-9)


def test_degenerate_bins_fall_back_to_passthrough():
    mats = np.stack([np.eye(2), np.zeros((2, 2))])
    w = cab.principal_eigenvector(cab.SubbandCovariance(mats, 1, cab.DESIRED))
    assert w.degenerate.tolist() == [False, True]
    assert np.allclose(w.weights[1], [1, 0])


def test_oracle_noiseless_source_recovers_steering(rng):
    d = np.exp(1j * np.array([0.0, 2.1, 0.4]))
    s = complex_noise(rng, (1, 300, 1))
    clean = pad_bins(d[:, None, None] * s)
    phi = cab.oracle_covariance(clean, range(0, 300))
    assert phi.kind == cab.ORACLE
    w = cab.principal_eigenvector(phi).weights[0]
    assert subspace_angle(w, d) <= 1e-6


def test_oracle_zero_clean_gives_passthrough():
    phi = cab.oracle_covariance(pad_bins(np.zeros((2, 10, 1))), range(0, 10))
    w = cab.principal_eigenvector(phi)
    assert w.degenerate.all() and np.allclose(w.weights[:, 0], 1)


def test_oracle_weights_time_domain_si_sdr(rng):
    # noiseless single source with random per-bin transfer functions
    x = rng.standard_normal(16000)
    s_spec = stft(MultiChannelWave(x)).frames[0]
    h = complex_noise(rng, (3, K))
    h[:, 0] = h[:, 0].real
    h[:, -1] = h[:, -1].real
    y = h[:, None, :] * s_spec[None]
    spec = spectrogram(y)
    w = cab.reference_weights(cab.principal_eigenvector(cab.oracle_covariance(spec, range(0, y.shape[1]))))
    out = cab.apply_beamformer(w, spec)
    ref = istft(spectrogram(y[:1])).samples[0]
    est = istft(spectrogram(out[None])).samples[0]
    assert si_sdr(est, ref) >= 40


def test_oracle_improves_two_source_mixture(rng):
    x, z = rng.standard_normal((2, 32000))
    s_spec = stft(MultiChannelWave(x)).frames[0]
    v_spec = stft(MultiChannelWave(z)).frames[0]
    hd, hv = complex_noise(rng, (2, 3, K))
    for h in (hd, hv):
        h[:, [0, -1]] = h[:, [0, -1]].real
    target = hd[:, None, :] * s_spec[None]
    y = target + hv[:, None, :] * v_spec[None]
    w = cab.reference_weights(cab.principal_eigenvector(cab.oracle_covariance(spectrogram(target), range(0, y.shape[1]))))
    est = istft(spectrogram(cab.apply_beamformer(w, spectrogram(y))[None])).samples[0]
    ref = istft(spectrogram(target[:1])).samples[0]
    ch0 = istft(spectrogram(y[:1])).samples[0]
    assert si_sdr(est, ref) - si_sdr(ch0, ref) > 0


def test_apply_examples(rng):
    y = complex_noise(rng, (3, 5, K))
    e1 = np.zeros((K, 3), complex)
    e1[:, 0] = 1
    out = cab.apply_beamformer(cab.BeamformerWeights(e1), spectrogram(y))
    assert np.array_equal(out, y[0])
    d = np.array([1, 1j, -1]) / np.sqrt(3)
    s = complex_noise(rng, (5, K))
    w = np.tile(d / np.linalg.norm(d), (K, 1))
    out = cab.apply_beamformer(cab.BeamformerWeights(w), spectrogram(d[:, None, None] * s[None]))
    assert np.allclose(out, np.linalg.norm(d) * s)
    with pytest.raises(ValueError, match="shape mismatch"):
        cab.apply_beamformer(cab.BeamformerWeights(np.ones((K, 2))), spectrogram(y))


def test_beamformer_is_frame_local(rng):
    y = complex_noise(rng, (2, 20, K))
    w = cab.BeamformerWeights(complex_noise(rng, (K, 2)))
    base = cab.apply_beamformer(w, spectrogram(y))
    y2 = y.copy()
    y2[:, 10:] = complex_noise(rng, (2, 10, K))
    assert np.array_equal(cab.apply_beamformer(w, spectrogram(y2))[:10], base[:10])


def test_reference_weights_reproduce_reference_image(rng):
    d = complex_noise(rng, (K, 3))
    vmat = np.einsum("ki,kj->kij", d, d.conj())
    w = cab.reference_weights(cab.principal_eigenvector(cab.SubbandCovariance(vmat, 1, cab.DESIRED)))
    assert np.allclose(np.sum(w.weights.conj() * d, axis=1), d[:, 0], atol=1e-9)


def test_lms_zero_input_keeps_quiescent_weights():
    d = np.tile(np.array([1.0, 0.0]), (K, 1)).astype(complex)
    w = cab.adapt_lms_mvdr(cab.BeamformerWeights(d), spectrogram(np.zeros((2, 30, K))))
    assert np.allclose(w.weights, d)


def test_lms_constraint_holds_after_every_update(rng):
    d = complex_noise(rng, (K, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    w = cab.BeamformerWeights(d)
    y = complex_noise(rng, (3, 25, K))
    for n in range(25):
        w = cab.BeamformerWeights(
            cab.adapt_lms_mvdr(cab.BeamformerWeights(d), spectrogram(y), frames=range(0, n + 1)).weights
        )
        resid = np.abs(np.sum(w.weights.conj() * d, axis=1) - 1)
        assert resid.max() <= 1e-10


def test_lms_reduces_stationary_interferer(rng):
    d = np.tile(np.array([1.0, 1.0, 1.0]) / np.sqrt(3), (K, 1)).astype(complex)
    e = np.exp(1j * np.array([0.0, 1.3, -2.2]))
    v = e[:, None, None] * complex_noise(rng, (1, 2000, K)) + 0.05 * complex_noise(rng, (3, 2000, K))
    spec = spectrogram(v)
    steer = cab.BeamformerWeights(d)
    w = cab.adapt_lms_mvdr(steer, spec, step=0.05, frames=range(0, 1000))
    quiescent = d / 1.0
    test = spectrogram(v[:, 1000:])
    p_adapt = np.mean(np.abs(cab.apply_beamformer(w, test)) ** 2)
    p_quiet = np.mean(np.abs(cab.apply_beamformer(cab.BeamformerWeights(quiescent), test)) ** 2)
    assert p_adapt <= p_quiet


def test_weights_sidecar_round_trip(tmp_path, rng):
    w = cab.BeamformerWeights(complex_noise(rng, (K, 3)))
    cab.save_weights(tmp_path / "w.bin", w)
    back = cab.load_weights(tmp_path / "w.bin")
    assert np.array_equal(back.weights, w.weights)
    raw = (tmp_path / "w.bin").read_bytes()
    assert int.from_bytes(raw[:8], "little") == K and int.from_bytes(raw[8:16], "little") == 3


def test_floor_unreliable_bins():
    desired = cab.SubbandCovariance(np.stack([np.eye(2), 0.01 * np.eye(2)]), 1, cab.DESIRED)
    noise = cab.SubbandCovariance(np.stack([np.eye(2), np.eye(2)]), 1, cab.NOISE)
    w = cab.principal_eigenvector(desired)
    assert cab.floor_unreliable_bins(w, desired, noise, 0.0) is w
    f = cab.floor_unreliable_bins(w, desired, noise, 0.1)
    assert f.degenerate.tolist() == [False, True]
    assert np.array_equal(f.weights[0], w.weights[0])
    assert np.allclose(f.weights[1], [1, 0])


def test_steering_approaches_oracle_as_snr_grows():
    from ctxenhance import scene
    from ctxenhance.signal_core import segment_frames

    medians = []
    for snr in (0.0, 10.0, 20.0, 40.0):
        mix = scene.mix_scene(scene.make_scene_spec(snr, 3, seed=4, context_length_s=2.0, query_s=0.5))
        spec, clean = stft(mix.mixture), stft(mix.clean_target)
        f = segment_frames(mix.seg)
        desired = cab.subtract_covariance(
            cab.estimate_covariance(spec, f.hotword), cab.estimate_covariance(spec, f.context, cab.NOISE)
        )
        est = cab.principal_eigenvector(desired).weights
        ora = cab.principal_eigenvector(cab.oracle_covariance(clean, f.hotword)).weights
        medians.append(np.median([subspace_angle(a, b) for a, b in zip(est, ora)]))
    assert all(b < a for a, b in zip(medians, medians[1:]))
