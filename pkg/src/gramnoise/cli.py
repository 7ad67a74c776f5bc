"""Command-line entry point: ``gramnoise <command> ...``.

Exit codes: 0 success, 2 usage/configuration error, 3 data error,
4 numerical failure. Set GRAMNOISE_LOG=DEBUG for verbose logs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (bark_envelope, envelope_db, log_spectrogram, pairwise_deviation_std, save_grid,
                       save_image, temporal_envelope)
from .checkpoint import CheckpointError, file_hash
from .config import ConfigError, parse_config
from .dataset import (AudioAsset, DataError, batch_iterator, normalize_median_rms, read_manifest,
                      read_wav, write_manifest, write_wav)
from .denoiser import NetworkDenoiser, NumericalError
from .guides import GuideError, PRESETS, compose_guide, preset, render_corpus
from .sampler import SamplerRun, assemble_track, sample_guided, sample_unconditional, stream
from .trainer import TrainState, train

log = logging.getLogger("gramnoise")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _config(args):
    return parse_config(args.config, args.set or [])


def _write_output(path, samples, fs, manifest: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_wav(path, AudioAsset(np.asarray(samples, dtype=np.float32), fs, str(path)))
    manifest = {"version": __version__, **manifest, "output": path.name}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _manifest(args, cfg, run: SamplerRun | None = None, checkpoint=None, **extra) -> dict:
    m = {"command": args.command, "argv": sys.argv[1:] if args.argv is None else args.argv,
         "seed": args.seed, "config_hash": cfg.digest()}
    if run is not None:
        m["run"] = run.to_dict()
    if checkpoint is not None:
        m["checkpoint_hash"] = file_hash(checkpoint)
    m.update(extra)
    return m


def _load_model(path):
    state = TrainState.load(path)
    return state, NetworkDenoiser(state.params.ema_network())


def _load_guide(args, cfg, state):
    fs, n = state.fs, state.params.config.sample_count
    if args.guide:
        asset = read_wav(args.guide)
        if asset.fs != fs:
            raise DataError(f"{args.guide}: sample rate {asset.fs} Hz differs from the model rate {fs} Hz")
        if len(asset) < n:
            raise DataError(f"{args.guide}: {len(asset)} samples, need one revolution ({n})")
        guide = asset.samples[:n].astype(np.float64)
    else:
        spec = preset(args.preset, fs) if args.preset else cfg.guide
        if spec is None:
            raise UsageError("guided sampling needs --guide WAV, --preset NAME or a guide section in the config")
        spec.fs, spec.length = fs, n / fs
        guide = compose_guide(spec, stream(args.seed, 1000))
    if not args.raw_guide:
        guide = normalize_median_rms(guide, state.normalization)
    return guide


def cmd_train(args):
    cfg = _config(args)
    manifest = args.corpus or cfg.data.get("manifest")
    if not manifest:
        raise UsageError("train needs --corpus MANIFEST (or data.manifest in the config)")
    if args.resume:
        state = TrainState.load(args.resume)
        if args.iterations is not None:
            state.config.total_iterations = args.iterations
    else:
        if args.seed is not None:
            cfg.training.seed = args.seed
        if args.iterations is not None:
            cfg.training.total_iterations = args.iterations
        state = TrainState.fresh(cfg.network, cfg.training, cfg.fs, cfg.normalization)
    corpus = read_manifest(manifest, state.fs)
    batches = batch_iterator(corpus, state.params.config.sample_count, state.config.batch_size,
                             state.normalization, state.data_rng)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    reports = train(state, batches, sink=lambda s: s.save(out), progress_log=args.log)
    if reports:
        log.info("trained to iteration %d, last loss %.4f", state.iteration, reports[-1].loss)
    print(json.dumps({"iteration": state.iteration, "checkpoint": str(out),
                      "final_loss": reports[-1].loss if reports else None}))


def cmd_sample(args):
    cfg = _config(args)
    state, denoiser = _load_model(args.checkpoint)
    run = SamplerRun(steps=args.steps, seed=args.seed)
    frame = sample_unconditional(denoiser, run, state.params.config.sample_count)
    _write_output(args.out, frame, state.fs, _manifest(args, cfg, run, args.checkpoint))


def _frames_to_track(args, frames, fs):
    if args.frames_dir:
        d = Path(args.frames_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, f in enumerate(frames):
            write_wav(d / f"revolution_{i:03d}.wav", AudioAsset(np.asarray(f, dtype=np.float32), fs))
    duration = args.duration if args.duration is not None else len(frames) * len(frames[0]) / fs
    return assemble_track(list(frames), duration, fs, stream(args.seed, 2000), overlap=args.overlap)


def cmd_guided(args):
    cfg = _config(args)
    state, denoiser = _load_model(args.checkpoint)
    run = SamplerRun(steps=args.steps, tau0=args.tau0, tau_p=args.tau_p, revolutions=args.revolutions,
                     seed=args.seed)
    guide = _load_guide(args, cfg, state)
    out = sample_guided(denoiser, guide, run)
    if run.tau_p is not None:
        out = _frames_to_track(args, out, state.fs)
    _write_output(args.out, out, state.fs, _manifest(args, cfg, run, args.checkpoint,
                                                       guide=args.guide or args.preset))


def cmd_variations(args):
    cfg = _config(args)
    state, denoiser = _load_model(args.checkpoint)
    run = SamplerRun(steps=args.steps, tau0=args.tau0, tau_p=args.tau_p, revolutions=args.revolutions,
                     seed=args.seed)
    if run.tau0 < 1.0:
        frames = sample_guided(denoiser, _load_guide(args, cfg, state), run)
    else:
        frames = sample_unconditional(denoiser, run, state.params.config.sample_count)
    track = _frames_to_track(args, frames, state.fs)
    _write_output(args.out, track, state.fs, _manifest(args, cfg, run, args.checkpoint,
                                                         duration=args.duration, overlap=args.overlap))


def cmd_guide_synth(args):
    cfg = _config(args)
    fs = args.fs or cfg.fs
    if args.corpus_dir:
        name = args.preset or "hiss-clicks"
        d = Path(args.corpus_dir)
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, x in enumerate(render_corpus(name, args.count, args.duration or 10.0, fs, args.seed)):
            p = d / f"{name}_{i:03d}.wav"
            write_wav(p, AudioAsset(x.astype(np.float32), fs, str(p)))
            paths.append(p)
        write_manifest(d / "manifest.txt", paths)
        (d / "manifest.json").write_text(json.dumps(_manifest(args, cfg, preset=name, fs=fs), indent=2) + "\n")
        print(d / "manifest.txt")
        return
    if not args.out:
        raise UsageError("guide-synth needs --out WAV or --corpus-dir DIR")
    spec = preset(args.preset, fs) if args.preset else cfg.guide
    if spec is None:
        raise UsageError("guide-synth needs --preset NAME or a guide section in the config")
    spec.fs = fs
    if args.duration:
        spec.length = args.duration
    x = compose_guide(spec, np.random.default_rng(args.seed))
    _write_output(args.out, x, fs, _manifest(args, cfg, guide=spec.to_dict()))


def cmd_analyze(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    assets = [read_wav(p) for p in args.inputs]
    fs = assets[0].fs
    if any(a.fs != fs for a in assets):
        raise DataError("analyzed files must share one sample rate")
    n = min(len(a) for a in assets)
    xs = [a.samples[:n].astype(np.float64) for a in assets]
    ref = None
    if args.reference:
        r = read_wav(args.reference)
        if r.fs != fs:
            raise DataError("reference sample rate differs from the inputs")
        n = min(n, len(r))
        xs = [x[:n] for x in xs]
        ref = r.samples[:n].astype(np.float64)
    summary = {"files": [str(p) for p in args.inputs], "reference": args.reference, "fs": fs}
    envs = [temporal_envelope(x, fs, args.window) for x in xs]
    save_grid(out / "temporal_envelopes.csv", np.stack([e.values for e in envs]))
    barks = [bark_envelope(x, fs, args.fft_size) for x in xs]
    save_grid(out / "bark_envelopes.csv", np.stack([b.band_magnitudes for b in barks]))
    if ref is not None or len(xs) >= 2:
        ref_env = temporal_envelope(ref, fs, args.window) if ref is not None else None
        ref_bark = bark_envelope(ref, fs, args.fft_size) if ref is not None else None
        t_dev = pairwise_deviation_std(envs, reference=ref_env)
        b_dev = pairwise_deviation_std(barks, reference=ref_bark)
        save_grid(out / "temporal_deviation.csv", t_dev)
        save_grid(out / "bark_deviation.csv", b_dev)
        summary["mean_temporal_deviation"] = float(np.mean(t_dev))
        summary["mean_bark_deviation_db"] = float(np.mean(b_dev))
    for i, (p, x) in enumerate(zip(args.inputs, xs)):
        spec = log_spectrogram(x, fs, args.fft_size, args.hop)
        stem = f"{i:03d}_{Path(p).stem}"
        save_grid(out / f"{stem}_spectrogram.csv", spec)
        save_image(out / f"{stem}_spectrogram.png", spec)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


def cmd_info(args):
    state = TrainState.load(args.checkpoint)
    info = {
        "checkpoint": str(args.checkpoint),
        "sha256": file_hash(args.checkpoint),
        "iteration": state.iteration,
        "fs": state.fs,
        "frame_samples": state.params.config.sample_count,
        "parameters": sum(p.numel() for p in state.params.network.parameters()),
        "network": state.params.config.to_dict(),
        "training": state.config.__dict__,
        "normalization": state.normalization.__dict__,
    }
    print(json.dumps(info, indent=2, default=str))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gramnoise", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0):
        p.add_argument("--config", help="YAML config file or built-in profile name (desk)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
        p.add_argument("--seed", type=int, default=seed_default)

    def sampling(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int, default=150)

    def guide_source(p):
        p.add_argument("--guide", help="guide WAV (first revolution is used)")
        p.add_argument("--preset", choices=PRESETS, help="synthesise the guide from a preset")
        p.add_argument("--raw-guide", action="store_true", help="skip median-RMS normalisation of the guide")

    def track(p):
        p.add_argument("--duration", type=float, help="track length in seconds (default: all revolutions)")
        p.add_argument("--overlap", type=float, default=0.0, help="crossfade length in seconds")
        p.add_argument("--frames-dir", help="also write each revolution as its own WAV")

    p = sub.add_parser("train", help="train the denoiser on a WAV corpus")
    common(p, seed_default=None)
    p.add_argument("--corpus", help="manifest listing WAV files")
    p.add_argument("--out", required=True, help="checkpoint path (rewritten periodically)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--log", help="append JSON-lines progress records here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="unconditional sampling of one revolution")
    common(p)
    sampling(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("guided", help="refine a guide from truncation step tau0")
    common(p)
    sampling(p)
    guide_source(p)
    p.add_argument("--tau0", type=float, default=0.5, help="truncation step (0.33, 0.5, 0.66 or any value in [0, 1])")
    p.add_argument("--tau-p", type=float, help="bifurcation step; writes a track of revolutions")
    p.add_argument("--revolutions", type=int, default=1)
    track(p)
    p.set_defaults(func=cmd_guided)

    p = sub.add_parser("variations", help="bifurcated revolutions assembled into a track")
    common(p)
    sampling(p)
    guide_source(p)
    p.add_argument("--tau0", type=float, default=1.0, help="below 1 starts from a guide")
    p.add_argument("--tau-p", type=float, default=0.33)
    p.add_argument("--revolutions", type=int, default=4)
    track(p)
    p.set_defaults(func=cmd_variations)

    p = sub.add_parser("guide-synth", help="render a DSP guide or a training corpus")
    common(p)
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--fs", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--out")
    p.add_argument("--corpus-dir", help="write --count long excerpts plus manifest.txt here")
    p.add_argument("--count", type=int, default=8)
    p.set_defaults(func=cmd_guide_synth)

    p = sub.add_parser("analyze", help="envelopes, deviation profiles and spectrograms")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--reference", help="compare every input against this WAV instead of all pairs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--window", type=float, default=0.025)
    p.add_argument("--fft-size", type=int, default=512)
    p.add_argument("--hop", type=int, default=128)
    p.set_defaults(func=cmd_analyze, seed=None)

    p = sub.add_parser("info", help="print checkpoint metadata")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_info, seed=None)
    return parser


def run(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GRAMNOISE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    try:
        args.func(args)
    except (UsageError, ConfigError) as e:
        return _fail(e, EXIT_USAGE)
    except NumericalError as e:
        return _fail(e, EXIT_NUMERIC)
    except (DataError, CheckpointError, GuideError, FileNotFoundError, OSError) as e:
        return _fail(e, EXIT_DATA)
    except ValueError as e:
        return _fail(e, EXIT_USAGE)
    return EXIT_OK


def _fail(e: Exception, code: int) -> int:
    module = type(e).__module__.rsplit(".", 1)[-1]
    if module == "builtins":
        # name the innermost package module the error came from
        module = "cli"
        for frame, _ in traceback.walk_tb(e.__traceback__):
            name = frame.f_globals.get("__name__", "")
            if name.startswith("gramnoise."):
                module = name.rsplit(".", 1)[-1]
    print(f"gramnoise: {module}: {e}", file=sys.stderr)
    return code


def main():
    sys.exit(run())
