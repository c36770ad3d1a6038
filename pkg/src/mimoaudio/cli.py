"""``mimoaudio`` command line.

Exit codes: 0 success, 1 verification failure, 2 input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from . import dsp, framing, rvq, tokenfile, tokenizer, verify
from .model import (GenerationSettings, RunConfig, StageWeights, TrainConfig, build_model,
                    dump_config, generate, load_config, synthetic_corpus, train)
from .model.config import BYTE_VOCAB, CONTROL_NAMES
from .framing import InterleavedSequence, Text
from .nn import checkpoint, gradient_check, param_tree

log = logging.getLogger("mimoaudio")

EXIT_OK, EXIT_VERIFY, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def _seed(default: int) -> int:
    env = os.environ.get("MIMT_SEED")
    return int(env) if env else default


def _run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    if not Path(path).exists():
        raise InputError(f"config file not found: {path}")
    try:
        return load_config(path)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _delays(text: str) -> framing.DelayConfig:
    return framing.DelayConfig(tuple(int(v) for v in text.replace(",", "-").split("-") if v))


def _read_wav_24k(path) -> dsp.Waveform:
    w = dsp.read_wav(path)
    if w.sample_rate != dsp.SAMPLE_RATE:
        print(f"notice: resampling {path} from {w.sample_rate} Hz to {dsp.SAMPLE_RATE} Hz", file=sys.stderr)
        w = dsp.resample_linear(w, dsp.SAMPLE_RATE)
    return w


def _load_codec(path) -> tokenizer.Codec:
    if not Path(path).exists():
        raise InputError(f"codebook checkpoint not found: {path}")
    return tokenizer.Codec.load(path)


# ------------------------------------------------------------------ subcommands


def cmd_tokenize(args) -> int:
    codec = _load_codec(args.codebooks)
    w = _read_wav_24k(args.inp)
    if tokenizer.frame_count(len(w)) == 0:
        raise InputError(f"{args.inp}: input too short for one 25 Hz frame")
    indices = codec.encode(w)
    tf = tokenfile.TokenFile(indices, codec.sizes, Fraction(25, 1), args.g)
    tokenfile.write_tokens(args.out, tf)
    print(f"{args.out}: {tf.num_frames} frames x {len(codec.sizes)} codebooks = {indices.size} indices")
    return EXIT_OK


def cmd_detokenize(args) -> int:
    codec = _load_codec(args.codebooks)
    tf = tokenfile.read_tokens(args.inp)
    if tuple(tf.codebook_sizes) != tuple(codec.sizes[: len(tf.codebook_sizes)]):
        raise InputError(f"token file codebook sizes {tf.codebook_sizes} do not match checkpoint {codec.sizes}")
    a = tf.indices
    a = a[~np.all(a == framing.EMPTY, axis=1)]
    if np.any(a == framing.EMPTY):
        raise InputError("token file contains EMPTY slots; undelay it first")
    w = codec.decode(a, iterations=args.iterations, seed=_seed(args.seed))
    dsp.write_wav(args.out, w)
    msg = {"out": str(args.out), "seconds": w.duration}
    if args.source:
        src = _read_wav_24k(args.source)
        n = min(len(src), len(w))
        msg["multiscale_mel_loss"] = dsp.multiscale_mel_loss(dsp.Waveform(src.samples[:n]),
                                                             dsp.Waveform(w.samples[:n]))
    print(json.dumps(msg))
    return EXIT_OK


def cmd_delay(args) -> int:
    tf = tokenfile.read_tokens(args.inp)
    d = _delays(args.delays)
    rows = [framing.delay_apply(p, d).frames for p in framing.patchify(tf.indices, tf.g)]
    out = np.vstack(rows) if rows else np.zeros((0, len(tf.codebook_sizes)), dtype=np.int64)
    tokenfile.write_tokens(args.out, tokenfile.TokenFile(out, tf.codebook_sizes, tf.frame_rate, tf.g))
    print(f"{args.out}: {len(rows)} delayed patches of {d.delayed_length(tf.g)} slots")
    return EXIT_OK


def cmd_undelay(args) -> int:
    tf = tokenfile.read_tokens(args.inp)
    d = _delays(args.delays)
    length = d.delayed_length(tf.g)
    if tf.num_frames % length:
        raise InputError(f"{tf.num_frames} rows is not a multiple of the delayed length {length}")
    patches = [framing.delay_remove(tf.indices[i:i + length], d, tf.g) for i in range(0, tf.num_frames, length)]
    out = framing.unpatchify(patches, len(tf.codebook_sizes))
    tokenfile.write_tokens(args.out, tokenfile.TokenFile(out, tf.codebook_sizes, tf.frame_rate, tf.g))
    print(f"{args.out}: {out.shape[0]} frames")
    return EXIT_OK


def info_lines(cfg: RunConfig) -> list[str]:
    sizes = cfg.model.audio_vocab
    bps = verify.bitrate_bps(sizes, cfg.frame_rate)
    g = cfg.model.g
    return [
        f"codebooks {'-'.join(map(str, sizes))}",
        f"frame rate {cfg.frame_rate:g} Hz",
        f"tokens per second {cfg.frame_rate * len(sizes):g}",
        f"bitrate {bps:g} bps = {bps / 1000:.2f} kbps",
        f"patch size G {g}",
        f"patch rate {cfg.frame_rate / g:g} Hz",
        f"delays {'-'.join(map(str, cfg.model.delays))}",
        f"delayed length {g + max(cfg.model.delays)}",
    ]


def cmd_info(args) -> int:
    for line in info_lines(_run_config(args.config)):
        print(line)
    return EXIT_OK


def cmd_train_rvq(args) -> int:
    seed = _seed(args.seed)
    sizes = rvq.codebook_sizes(args.layers) if args.sizes is None else \
        [int(v) for v in args.sizes.replace(",", "-").split("-")]
    if args.inp:
        feats = np.vstack([tokenizer.frame_features(_read_wav_24k(p)) for p in args.inp])
    else:
        feats = synthetic_features(seed)
    if feats.shape[0] < 2:
        raise InputError("not enough audio to train on")
    codec, history = tokenizer.train_codec(feats, sizes, dim=args.dim, epochs=args.epochs, seed=seed)
    codec.save(args.out)
    z = codec.latents(feats)
    first = rvq.RvqState(codec.state.layers[:1])
    report = {
        "frames": int(feats.shape[0]),
        "rvq_mse": rvq.quantization_mse(z, codec.state),
        "layer1_mse": rvq.quantization_mse(z, first),
        "final": history[-1],
    }
    # Lloyd is only a meaningful reference when the data outnumbers the first codebook
    if feats.shape[0] >= 4 * sizes[0]:
        _, lloyd_mse = rvq.lloyd(z, sizes[0], seed=seed, restarts=3)
        report["lloyd_mse"] = lloyd_mse
        report["layer1_vs_lloyd"] = report["layer1_mse"] / max(lloyd_mse, 1e-300)
    else:
        report["lloyd_mse"] = None
        report["note"] = f"Lloyd comparison skipped: {feats.shape[0]} frames < 4 x {sizes[0]} entries"
    print(json.dumps(report))
    return EXIT_OK


def synthetic_features(seed: int, clips: int = 32, seconds: float = 1.0) -> np.ndarray:
    """Frame features of random two-tone clips with noise, used when no WAVs are given."""
    rng = np.random.default_rng(seed)
    n = int(seconds * dsp.SAMPLE_RATE)
    t = np.arange(n) / dsp.SAMPLE_RATE
    feats = []
    for _ in range(clips):
        x = sum(rng.uniform(0.05, 0.4) * np.sin(2 * np.pi * rng.uniform(100, 4000) * t) for _ in range(2))
        x = x + 0.01 * rng.standard_normal(n)
        feats.append(tokenizer.frame_features(dsp.Waveform(np.clip(x, -1, 1))))
    return np.vstack(feats)


def cmd_train_lm(args) -> int:
    cfg = _run_config(args.config)
    tc = cfg.train
    overrides = {k: v for k, v in (("stage", args.stage), ("steps", args.steps), ("seed", args.seed)) if v is not None}
    tc = TrainConfig(**{**tc.__dict__, **overrides})
    tc = TrainConfig(**{**tc.__dict__, "seed": _seed(tc.seed)})
    weights = StageWeights.preset(tc.stage, cfg.model.num_layers)
    print(json.dumps({"stage": tc.stage, "loss_weights": weights.describe(), "audio_weights": list(weights.rvq)}))
    corpus = synthetic_corpus(cfg.model, args.sequences, seed=tc.seed)
    model = build_model(cfg.model, seed=tc.seed)
    log_fh = open(args.log, "w") if args.log else sys.stdout
    try:
        state = train(model, corpus, tc, log=log_fh, stop_below=args.stop_below)
    finally:
        if args.log:
            log_fh.close()
    checkpoint.save_params(args.out, param_tree(model))
    Path(str(args.out) + ".ini").write_text(dump_config(RunConfig(cfg.model, tc, cfg.frame_rate)))
    print(json.dumps({"steps": state.step, "final_loss": state.history[-1]["loss"], "checkpoint": str(args.out)}))
    return EXIT_OK


def _model_from_checkpoint(path, config):
    if not Path(path).exists():
        raise InputError(f"checkpoint not found: {path}")
    cfg_path = config or (str(path) + ".ini" if Path(str(path) + ".ini").exists() else None)
    cfg = _run_config(cfg_path)
    model = build_model(cfg.model)
    checkpoint.load_into(model, checkpoint.load_params(path))
    return model, cfg


def cmd_generate(args) -> int:
    model, cfg = _model_from_checkpoint(args.checkpoint, args.config)
    prompt = [Text(b) for b in args.prompt.encode("utf-8")] or [Text(BYTE_VOCAB)]
    settings = GenerationSettings(args.temperature, args.top_k, args.max_elements, _seed(args.seed))
    seq = generate(model, InterleavedSequence(prompt), settings)
    a = framing.unpatchify(seq.patches, cfg.model.num_layers)
    tokenfile.write_tokens(args.out, tokenfile.TokenFile(a, cfg.model.audio_vocab, Fraction(25, 1), cfg.model.g))
    text = "".join(chr(t) if t < BYTE_VOCAB else CONTROL_NAMES.get(t, f"<{t}>") for t in seq.text_ids)
    result = {"out": str(args.out), "frames": int(a.shape[0]), "text": text}
    if args.wav:
        if not args.codebooks:
            raise InputError("--wav needs --codebooks")
        codec = _load_codec(args.codebooks)
        if a.shape[0]:
            dsp.write_wav(args.wav, codec.decode(a))
            result["wav"] = str(args.wav)
    print(json.dumps(result))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model, f = verify.gradcheck_problem(_seed(args.seed))
    rep = gradient_check(f, param_tree(model), eps=args.eps, max_coords=args.coords)
    groups = {"encoder": ("audio_embed", "encoder", "enc_proj"),
              "backbone": ("text_embed", "backbone", "text_head"),
              "decoder": ("dec_in", "decoder", "heads")}
    for comp, prefixes in groups.items():
        errs = [e for n, e in rep.per_tensor.items() if n.startswith(prefixes)]
        print(f"{comp}: max rel error {max(errs):.3e}")
    print(f"overall: max rel error {rep.max_rel_error:.3e} ({rep.coords_checked} coordinates)")
    return EXIT_OK if rep.max_rel_error < 1e-4 else EXIT_VERIFY


def cmd_verify(args) -> int:
    results = verify.run_all(args.suite or None)
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_loss(args) -> int:
    x, y = _read_wav_24k(args.ref), _read_wav_24k(args.est)
    if len(x) != len(y):
        raise InputError(f"length mismatch: {len(x)} vs {len(y)} samples")
    print(json.dumps({"multiscale_mel_loss": dsp.multiscale_mel_loss(x, y)}))
    return EXIT_OK


def cmd_gan_smoke(args) -> int:
    from . import ganloss
    res = ganloss.gan_smoke(args.steps, seed=_seed(args.seed))
    for h in res.history[:: max(1, args.steps // 10)]:
        print(json.dumps(h))
    lo, hi = res.d_loss_range
    ok = res.all_finite and lo >= 0 and hi <= 4
    print(json.dumps({"finite": res.all_finite, "d_loss_min": lo, "d_loss_max": hi}))
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mimoaudio", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("tokenize", help="WAV -> token file")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--codebooks", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--g", type=int, default=framing.DEFAULT_G)
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("detokenize", help="token file -> WAV (Griffin-Lim)")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--codebooks", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--source", help="original WAV; logs the multi-scale mel loss")
    s.add_argument("--iterations", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_detokenize)

    for name, fn in (("delay", cmd_delay), ("undelay", cmd_undelay)):
        s = sub.add_parser(name, help=f"{name} every patch of a token file")
        s.add_argument("--in", dest="inp", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--delays", default="0-1-2-3-4-5-6-7")
        s.set_defaults(func=fn)

    s = sub.add_parser("info", help="print rate and bitrate arithmetic")
    s.add_argument("--config")
    s.set_defaults(func=cmd_info)

    s = sub.add_parser("train-rvq", help="fit the linear map and EMA codebooks")
    s.add_argument("--in", dest="inp", nargs="*", default=[])
    s.add_argument("--out", required=True)
    s.add_argument("--layers", type=int, default=rvq.LM_LAYERS)
    s.add_argument("--sizes", help="dash-separated codebook sizes (overrides --layers)")
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_rvq)

    s = sub.add_parser("train-lm", help="train the toy LM on a synthetic interleaved corpus")
    s.add_argument("--config")
    s.add_argument("--stage", choices=("understanding", "joint"))
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--sequences", type=int, default=32)
    s.add_argument("--stop-below", type=float)
    s.add_argument("--log", help="JSON-lines metrics file (default stdout)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_lm)

    s = sub.add_parser("generate", help="sample an interleaved continuation")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config")
    s.add_argument("--prompt", default="")
    s.add_argument("--out", required=True)
    s.add_argument("--wav")
    s.add_argument("--codebooks")
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--top-k", type=int, default=1)
    s.add_argument("--max-elements", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("gradcheck", help="finite-difference check of the toy model")
    s.add_argument("--eps", type=float, default=5e-5)
    s.add_argument("--coords", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("verify", help="run the property suites")
    s.add_argument("--suite", action="append", choices=sorted(verify.SUITES))
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("loss", help="multi-scale mel loss between two WAVs")
    s.add_argument("--ref", required=True)
    s.add_argument("--est", required=True)
    s.set_defaults(func=cmd_loss)

    s = sub.add_parser("gan-smoke", help="short adversarial run with toy discriminators")
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gan_smoke)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, FileNotFoundError, dsp.AudioError, tokenfile.TokenFileError, rvq.RvqError,
            framing.FramingError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
