import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ctxenhance.cli import main
from ctxenhance.signal_core import FrameParams, MultiChannelWave, istft, read_wav, stft, write_wav


def write_manifest(path, snr_db=0.0, interferer="n.wav", seed=0):
    rng = np.random.default_rng(seed)
    base = path.parent
    write_wav(base / "t.wav", MultiChannelWave(0.1 * rng.standard_normal(24000)))
    if interferer == "n.wav":
        write_wav(base / interferer, MultiChannelWave(0.1 * rng.standard_normal(48000)))
    m = {
        "id": "s0",
        "channels": 2,
        "snr_db": snr_db,
        "seed": seed,
        "context_length_s": 1.0,
        "target": {"path": "t.wav", "position": "p0", "hotword_start": 0, "hotword_end": 8000, "query_end": 24000},
    }
    if interferer is not None:
        m["interferer"] = {"path": interferer, "position": "p3"}
    path.write_text(json.dumps(m))
    return path


@pytest.fixture
def mixed(tmp_path):
    man = write_manifest(tmp_path / "m.json")
    out = tmp_path / "out"
    assert main(["mix", str(man), "--out", str(out)]) == 0
    return out


def test_mix_closure_and_determinism(tmp_path, mixed):
    seg = json.loads((mixed / "s0_seg.json").read_text())
    clean = read_wav(mixed / "s0_clean.wav").samples[0, seg["hotword_start"] : seg["query_end"]]
    noise = read_wav(mixed / "s0_noise.wav").samples[0, seg["hotword_start"] : seg["query_end"]]
    assert abs(10 * np.log10(np.mean(clean**2) / np.mean(noise**2))) <= 0.01
    out2 = tmp_path / "out2"
    assert main(["mix", str(tmp_path / "m.json"), "--out", str(out2)]) == 0
    for name in ("s0_mixture.wav", "s0_clean.wav", "s0_noise.wav", "s0_seg.json"):
        assert (mixed / name).read_bytes() == (out2 / name).read_bytes()


def test_mix_missing_interferer_file(tmp_path, capsys):
    man = write_manifest(tmp_path / "m.json", interferer="missing.wav")
    out = tmp_path / "out"
    assert main(["mix", str(man), "--out", str(out)]) == 2
    assert not out.exists()
    assert "missing.wav" in capsys.readouterr().err


def test_mix_manifest_without_interferer(tmp_path):
    man = write_manifest(tmp_path / "m.json", interferer=None)
    assert main(["mix", str(man), "--out", str(tmp_path / "o")]) == 2


def test_enhance_passthrough_is_round_trip(tmp_path, mixed):
    out = tmp_path / "e.wav"
    rc = main(["enhance", str(mixed / "s0_mixture.wav"), str(mixed / "s0_seg.json"), "--mode", "passthrough", "--out", str(out)])
    assert rc == 0
    seg = json.loads((mixed / "s0_seg.json").read_text())
    x = read_wav(mixed / "s0_mixture.wav").samples[:1]
    params = FrameParams()
    padded = np.concatenate([x, np.zeros((1, params.fft_size - params.hop_size))], axis=1)
    ref = istft(stft(MultiChannelWave(padded))).samples[0, seg["hotword_start"] : seg["query_end"]]
    got = read_wav(out).samples[0]
    assert np.allclose(got, ref, atol=1e-7)


def test_enhance_select_at_low_snr_picks_cleaner(tmp_path, capsys):
    man = write_manifest(tmp_path / "m.json", snr_db=-12.0)
    main(["mix", str(man), "--out", str(tmp_path / "o")])
    capsys.readouterr()
    rc = main(["enhance", str(tmp_path / "o/s0_mixture.wav"), str(tmp_path / "o/s0_seg.json"), "--out", str(tmp_path / "e.wav")])
    assert rc == 0
    diag = json.loads(capsys.readouterr().out)
    assert diag["decision"] == "SpeechCleaner" and diag["snr_db"] < 6


def test_enhance_oracle_needs_clean_ref(tmp_path, mixed, capsys):
    rc = main(["enhance", str(mixed / "s0_mixture.wav"), str(mixed / "s0_seg.json"), "--mode", "oracle", "--out", str(tmp_path / "e.wav")])
    assert rc == 2
    assert "oracle requires clean reference" in capsys.readouterr().err
    rc = main(["enhance", str(mixed / "s0_mixture.wav"), str(mixed / "s0_seg.json"), "--mode", "oracle",
               "--clean-ref", str(mixed / "s0_clean.wav"), "--out", str(tmp_path / "e.wav")])
    assert rc == 0


def test_enhance_invalid_segmentation(tmp_path, mixed, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"context_start": 0, "hotword_start": 9000, "hotword_end": 8000, "query_end": 24000}))
    rc = main(["enhance", str(mixed / "s0_mixture.wav"), str(bad), "--out", str(tmp_path / "e.wav")])
    assert rc == 2
    assert "hotword_start < hotword_end" in capsys.readouterr().err


def test_enhance_bad_inputs(tmp_path, mixed):
    seg = str(mixed / "s0_seg.json")
    assert main(["enhance", str(tmp_path / "nope.wav"), seg, "--out", str(tmp_path / "e.wav")]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert main(["enhance", str(mixed / "s0_mixture.wav"), seg, "--config", str(cfg), "--out", str(tmp_path / "e.wav")]) == 2
    cfg.write_text(json.dumps({"sample_rate": 8000}))
    assert main(["enhance", str(mixed / "s0_mixture.wav"), seg, "--config", str(cfg), "--out", str(tmp_path / "e.wav")]) == 2


def test_evaluate_appends_row(tmp_path, mixed):
    e = tmp_path / "e.wav"
    main(["enhance", str(mixed / "s0_mixture.wav"), str(mixed / "s0_seg.json"), "--mode", "passthrough", "--out", str(e)])
    report = tmp_path / "r.csv"
    rc = main(["evaluate", str(e), "--clean-ref", str(mixed / "s0_clean.wav"), "--mixture", str(mixed / "s0_mixture.wav"),
               "--seg", str(mixed / "s0_seg.json"), "--algorithm", "passthrough", "--out", str(report)])
    assert rc == 0
    rows = list(csv.DictReader(report.read_text().splitlines()[1:]))
    assert abs(float(rows[0]["improvement"])) < 1e-3


def test_sweep_grid(tmp_path, capsys):
    spec = {"grid": {"snr_db": [-12, 0, 12], "channels": 3}, "algorithms": ["cab", "sc", "select"]}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    out = tmp_path / "r.csv"
    assert main(["sweep", str(tmp_path / "s.json"), "--out", str(out), "--workers", "2"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# ctxenhance-report v1")
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 9
    keys = [(float(r["snr_db"]), r["algorithm"]) for r in rows]
    assert keys == sorted(keys)
    assert "snr_db" in capsys.readouterr().out


def test_sweep_context_lengths(tmp_path):
    spec = {"grid": {"snr_db": [12], "context_s": [8, 3, 1, 0.5, 0.25]}, "algorithms": ["cab"]}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    out = tmp_path / "r.csv"
    assert main(["sweep", str(tmp_path / "s.json"), "--out", str(out)]) == 0
    assert len(list(csv.DictReader(out.read_text().splitlines()[1:]))) == 5


def test_sweep_partial_failure(tmp_path):
    write_manifest(tmp_path / "ok.json")
    spec = {"scenes": [json.loads((tmp_path / "ok.json").read_text()),
                       {"id": "bad", "target": {"path": "missing.wav"}, "interferer": {"path": "n.wav"}}],
            "algorithms": ["passthrough"]}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    out = tmp_path / "r.csv"
    assert main(["sweep", str(tmp_path / "s.json"), "--out", str(out), "--workers", "1"]) == 1
    rows = list(csv.DictReader(out.read_text().splitlines()[1:]))
    assert sorted(r["status"] == "ok" for r in rows) == [False, True]


def test_sweep_invalid_spec(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"grid": {"snr_db": []}, "algorithms": ["cab"]}))
    assert main(["sweep", str(tmp_path / "s.json")]) == 2
    (tmp_path / "s.json").write_text(json.dumps({"grid": {"snr_db": [0]}, "algorithms": []}))
    assert main(["sweep", str(tmp_path / "s.json")]) == 2


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "ctxenhance.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "sweep" in r.stdout
    r = subprocess.run([sys.executable, "-m", "ctxenhance.cli", "enhance"], capture_output=True, text=True)
    assert r.returncode == 2
