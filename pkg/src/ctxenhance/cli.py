"""Command line: ``mix``, ``enhance``, ``evaluate`` and ``sweep``.

Exit codes: 0 success, 1 partial sweep failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .experiment import ALGORITHM_NAMES, run_scene
from .metrics import append_report_rows, evaluate_run
from .pipeline import Algorithm, PipelineConfig, enhance_forced, enhance_utterance
from .scene import exact_fir_scene_spec, make_scene_spec, mix_scene, scene_spec_from_manifest, truncate_context
from .signal_core import MultiChannelWave, UtteranceSegmentation, read_wav, write_wav

logger = logging.getLogger("ctxenhance")

EXIT_OK, EXIT_PARTIAL, EXIT_INVALID = 0, 1, 2


class InputError(Exception):
    """Invalid user input; reported on stderr with exit code 2."""


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise InputError(f"cannot read {path}: file not found") from e
    except json.JSONDecodeError as e:
        raise InputError(f"{path} is not valid JSON: {e}") from e


def _load_config(args) -> PipelineConfig:
    d = _load_json(args.config) if getattr(args, "config", None) else {}
    if getattr(args, "gamma_db", None) is not None:
        d["gamma_db"] = args.gamma_db
    if getattr(args, "context_s", None) is not None:
        d["context_length_s"] = args.context_s
    try:
        return PipelineConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise InputError(f"invalid config: {e}") from e


def _load_seg(path) -> tuple[UtteranceSegmentation, int | None]:
    d = _load_json(path)
    try:
        return UtteranceSegmentation.from_dict(d), d.get("sample_rate")
    except KeyError as e:
        raise InputError(f"segmentation missing field {e}") from e
    except ValueError as e:
        raise InputError(str(e)) from e


def _read(path, rate=None) -> MultiChannelWave:
    try:
        return read_wav(path, rate)
    except FileNotFoundError as e:
        raise InputError(f"cannot read {path}: file not found") from e
    except ValueError as e:
        raise InputError(f"{path}: {e}") from e


def _select_channels(wave: MultiChannelWave, n: int | None) -> MultiChannelWave:
    if n is None:
        return wave
    if not 1 <= n <= wave.channel_count:
        raise InputError(f"--channels {n} out of range for {wave.channel_count}-channel input")
    return MultiChannelWave(wave.samples[:n], wave.sample_rate)


# --- mix ---------------------------------------------------------------------


def cmd_mix(args) -> int:
    manifest = _load_json(args.manifest)
    base = Path(args.manifest).parent
    scenes = manifest.get("scenes", [manifest])
    rendered = []
    for i, sc in enumerate(scenes):
        sc = dict(sc)
        if args.seed is not None:
            sc["seed"] = args.seed
        if args.channels is not None:
            sc["channels"] = args.channels
        if args.context_s is not None:
            sc["context_length_s"] = args.context_s
        try:
            spec = scene_spec_from_manifest(sc, base)
            mix = mix_scene(spec)
        except FileNotFoundError as e:
            raise InputError(f"scene {i}: cannot read {e.filename}") from e
        except (KeyError, ValueError, TypeError) as e:
            raise InputError(f"scene {i}: {e}") from e
        rendered.append((str(sc.get("id", f"scene{i:03d}")), mix))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid, mix in rendered:
        write_wav(out / f"{sid}_mixture.wav", mix.mixture)
        write_wav(out / f"{sid}_clean.wav", mix.clean_target)
        write_wav(out / f"{sid}_noise.wav", mix.noise_only)
        seg = mix.seg.to_dict(mix.mixture.sample_rate)
        seg["snr_db"] = None if np.isinf(mix.snr_db) else mix.snr_db
        (out / f"{sid}_seg.json").write_text(json.dumps(seg, indent=2) + "\n")
        print(f"{sid}: {len(mix.mixture)} samples, {mix.mixture.channel_count} channels -> {out}")
    return EXIT_OK


# --- enhance -----------------------------------------------------------------


def cmd_enhance(args) -> int:
    config = _load_config(args)
    seg, seg_rate = _load_seg(args.seg)
    wave = _select_channels(_read(args.input, config.sample_rate), args.channels)
    if seg_rate is not None and seg_rate != wave.sample_rate:
        raise InputError("sample rate mismatch between WAV and segmentation")
    clean = None
    if args.clean_ref:
        clean = _select_channels(_read(args.clean_ref, config.sample_rate), args.channels)
    if args.mode == "oracle" and clean is None:
        raise InputError("oracle requires clean reference (--clean-ref)")
    if args.mode != "passthrough" and args.mode != "select" and wave.channel_count < 2:
        raise InputError(f"mode {args.mode} requires >= 2 channels")
    if args.context_s is not None:
        try:
            wave2, seg2 = truncate_context(wave, seg, args.context_s, config.frame_params.fft_size)
            if clean is not None:
                drop = seg.hotword_start - seg2.hotword_start
                clean = MultiChannelWave(clean.samples[:, drop:], clean.sample_rate)
        except ValueError as e:
            raise InputError(str(e)) from e
        wave, seg = wave2, seg2
    try:
        if args.mode == "select":
            res = enhance_utterance(wave, seg, config)
        else:
            res = enhance_forced(wave, seg, config, Algorithm.from_mode(args.mode), clean=clean)
    except ValueError as e:
        raise InputError(str(e)) from e
    write_wav(args.out, MultiChannelWave(res.enhanced, wave.sample_rate))
    diag = dict(res.diagnostics)
    if not args.verbose:
        diag.pop("eigenvalue_ratio", None)
    diag["output"] = str(args.out)
    print(json.dumps(diag, indent=2, default=str))
    return EXIT_OK


# --- evaluate ----------------------------------------------------------------


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    seg, _ = _load_seg(args.seg)
    enhanced = _read(args.enhanced, config.sample_rate).samples[0]
    clean = _read(args.clean_ref, config.sample_rate)
    mixture = _read(args.mixture, config.sample_rate)
    lo, hi = seg.hotword_start, seg.query_end
    if enhanced.size != hi - lo:
        raise InputError(f"enhanced audio has {enhanced.size} samples, segmentation span is {hi - lo}")
    ref = config.reference_channel
    try:
        passthrough = enhance_forced(mixture, seg, config, Algorithm.PASSTHROUGH)
        report = evaluate_run(
            enhanced,
            clean.samples[ref, lo:hi],
            passthrough.enhanced,
            sample_rate=mixture.sample_rate,
            max_lag=config.frame_params.fft_size,
        )
    except ValueError as e:
        raise InputError(str(e)) from e
    row = {
        "scene_id": args.scene_id or Path(args.enhanced).stem,
        "snr_db": "",
        "algorithm": args.algorithm or "",
        "si_sdr": report.si_sdr_db,
        "improvement": report.si_sdr_improvement_db,
        "seg_snr": report.seg_snr_db,
        "noise_reduction": report.noise_reduction_db,
        "decision": "",
        "runtime_ms": "",
        "status": "ok",
    }
    if args.out:
        append_report_rows(args.out, [row])
    print(json.dumps(row, indent=2, default=str))
    return EXIT_OK


# --- sweep -------------------------------------------------------------------


def _sweep_tasks(spec: dict) -> list[dict]:
    if "scenes" in spec:
        return [{"manifest": m, "index": i} for i, m in enumerate(spec["scenes"])]
    grid = spec.get("grid")
    if not grid:
        raise InputError("sweep spec needs 'grid' or 'scenes'")
    snrs = grid.get("snr_db", [])
    contexts = grid.get("context_s", [8.0])
    noise = grid.get("noise", "speech")
    dic = grid.get("desired_in_context", [False])
    dic = dic if isinstance(dic, list) else [dic]
    channels = int(grid.get("channels", 3))
    positions = int(grid.get("positions", 1))
    scenario = grid.get("scenario", "array")
    if scenario not in ("array", "exact_fir"):
        raise InputError(f"unknown scenario {scenario!r}")
    seed = int(spec.get("seed", 0))
    if not snrs or not contexts:
        raise InputError("sweep grid must be non-empty")
    if noise not in ("speech", "pink"):
        raise InputError(f"unknown noise type {noise!r}")
    tasks = []
    for snr in snrs:
        for ctx in contexts:
            for d in dic:
                for p in range(positions):
                    tasks.append(
                        dict(snr_db=float(snr), context_s=float(ctx), noise=noise,
                             desired_in_context=bool(d), channels=channels,
                             position=p, seed=seed + p, scenario=scenario)
                    )
    return tasks


def position_pair(p: int) -> tuple[str, str]:
    """Target / interferer position tags for sweep slot ``p`` (never equal)."""
    return f"p{p % 7}", f"p{(p + 3) % 7}"


def _scene_id(task: dict) -> str:
    if "manifest" in task:
        m = task["manifest"]
        return str(m.get("id", f"scene{task['index']:03d}")) if isinstance(m, dict) else Path(m).stem
    kind = "fir" if task.get("scenario") == "exact_fir" else task["noise"]
    return (
        f"snr{task['snr_db']:+g}_ctx{task['context_s']:g}_{kind}"
        f"{'_dic' if task['desired_in_context'] else ''}_p{task['position']}"
    )


def _run_task(task: dict, algorithms: list[str], config_dict: dict, base_dir: str) -> list[dict]:
    config = PipelineConfig.from_dict(config_dict)
    sid = _scene_id(task)
    snr = task.get("snr_db", "")
    try:
        if "manifest" in task:
            spec = scene_spec_from_manifest(task["manifest"], Path(base_dir))
            snr = spec.snr_db
            mix = mix_scene(spec)
        elif task.get("scenario") == "exact_fir":
            spec = exact_fir_scene_spec(
                task["snr_db"], seed=task["seed"], context_length_s=8.0,
                desired_in_context=task["desired_in_context"],
            )
            mix = mix_scene(spec)
            if task["context_s"] < 8.0:
                mix = mix.truncated(task["context_s"], config.frame_params.fft_size)
        else:
            tgt, itf = position_pair(task["position"])
            spec = make_scene_spec(
                task["snr_db"], task["channels"], seed=task["seed"], noise=task["noise"],
                context_length_s=8.0, desired_in_context=task["desired_in_context"],
                target_position=tgt, interferer_position=itf,
            )
            mix = mix_scene(spec)
            if task["context_s"] < 8.0:
                mix = mix.truncated(task["context_s"], config.frame_params.fft_size)
    except Exception as e:  # noqa: BLE001 - scene failures become failed rows
        return [_failed_row(sid, snr, a, e) for a in algorithms]
    rows = []
    for alg in algorithms:
        try:
            out = run_scene(mix, alg, config)
        except Exception as e:  # noqa: BLE001
            rows.append(_failed_row(sid, snr, alg, e))
            continue
        r = out.report
        rows.append(
            dict(scene_id=sid, snr_db=snr, algorithm=alg, si_sdr=r.si_sdr_db,
                 improvement=r.si_sdr_improvement_db, seg_snr=r.seg_snr_db,
                 noise_reduction=r.noise_reduction_db,
                 decision=out.result.decision.chosen.value,
                 runtime_ms=out.runtime_ms, status="ok")
        )
    return rows


def _failed_row(sid, snr, alg, err) -> dict:
    return dict(scene_id=sid, snr_db=snr, algorithm=alg, si_sdr=float("nan"),
                improvement=float("nan"), seg_snr=float("nan"), noise_reduction=float("nan"),
                decision="", runtime_ms="", status=f"failed: {err}")


def _sort_key(row):
    snr = row["snr_db"]
    snr = float(snr) if snr != "" else float("nan")
    return (np.inf if np.isnan(snr) else snr, row["algorithm"], row["scene_id"])


def run_sweep(spec: dict, base_dir: Path, config: PipelineConfig, workers: int | None = None) -> list[dict]:
    algorithms = list(spec.get("algorithms", []))
    if not algorithms:
        raise InputError("sweep needs at least one algorithm")
    bad = [a for a in algorithms if a not in ALGORITHM_NAMES]
    if bad:
        raise InputError(f"unknown algorithms {bad}")
    tasks = _sweep_tasks(spec)
    workers = workers or int(spec.get("workers", 0)) or os.cpu_count() or 1
    args = [(t, algorithms, config.to_dict(), str(base_dir)) for t in tasks]
    if workers == 1 or len(tasks) == 1:
        results = [_run_task(*a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_task, *zip(*args)))
    rows = [r for rs in results for r in rs]
    return sorted(rows, key=_sort_key)


def summarize(rows: list[dict]) -> str:
    """Mean SI-SDR improvement per (snr, algorithm) as a text table."""
    ok = [r for r in rows if r["status"] == "ok"]
    algs = sorted({r["algorithm"] for r in ok})
    snrs = sorted({r["snr_db"] for r in ok}, key=float)
    lines = ["snr_db".rjust(8) + "".join(a.rjust(12) for a in algs)]
    for s in snrs:
        cells = []
        for a in algs:
            v = [r["improvement"] for r in ok if r["snr_db"] == s and r["algorithm"] == a]
            cells.append(f"{np.mean(v):12.2f}" if v else " " * 12)
        lines.append(f"{float(s):8g}" + "".join(cells))
    return "\n".join(lines)


def cmd_sweep(args) -> int:
    spec = _load_json(args.spec)
    config = _load_config(args)
    out = Path(args.out or spec.get("out", "sweep_report.csv"))
    rows = run_sweep(spec, Path(args.spec).parent, config, args.workers)
    if out.exists():
        out.unlink()
    append_report_rows(out, rows)
    print(summarize(rows))
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} rows -> {out} ({failed} failed)")
    return EXIT_PARTIAL if failed else EXIT_OK


# --- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxenhance", description="Multichannel enhancement of hotword-triggered utterances.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mix", help="render scenes from a JSON manifest")
    m.add_argument("manifest")
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--seed", type=int)
    m.add_argument("--channels", type=int)
    m.add_argument("--context-s", type=float)
    m.set_defaults(func=cmd_mix)

    e = sub.add_parser("enhance", help="enhance one utterance")
    e.add_argument("input")
    e.add_argument("seg")
    e.add_argument("--config")
    e.add_argument("--mode", choices=["select", "cab", "sc", "oracle", "passthrough"], default="select")
    e.add_argument("--gamma-db", type=float)
    e.add_argument("--context-s", type=float)
    e.add_argument("--channels", type=int)
    e.add_argument("--clean-ref", help="isolated multichannel target (oracle mode)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("evaluate", help="score an enhanced WAV")
    v.add_argument("enhanced")
    v.add_argument("--clean-ref", required=True)
    v.add_argument("--mixture", required=True)
    v.add_argument("--seg", required=True)
    v.add_argument("--config")
    v.add_argument("--algorithm")
    v.add_argument("--scene-id")
    v.add_argument("--out", help="CSV report to append to")
    v.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="run an experiment grid")
    s.add_argument("spec")
    s.add_argument("--config")
    s.add_argument("--gamma-db", type=float)
    s.add_argument("--out")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
