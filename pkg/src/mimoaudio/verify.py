"""Self-check suites run by ``mimoaudio verify`` and reused by the test-suite."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import dsp, framing, ganloss, rvq, tokenfile
from .model import (Batch, ModelConfig, StageWeights, build_model, count_params, synthetic_corpus)
from .nn import checkpoint, gradient_check, param_tree

GRADCHECK_CONFIG = ModelConfig(
    audio_vocab=(16, 16, 8, 8, 8, 8, 8, 8), enc_dim=16, enc_layers=1, enc_heads=2,
    backbone_dim=24, backbone_layers=2, backbone_heads=2, dec_layers=1, dec_heads=2, context=32)


@dataclass
class SuiteResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def delay_roundtrip(trials: int = 10_000, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        g = int(rng.integers(1, 9))
        r = int(rng.integers(1, 9))
        d = framing.DelayConfig(tuple(int(v) for v in rng.integers(0, 8, size=r)))
        p = framing.Patch(rng.integers(0, 1024, size=(g, r)))
        dp = framing.delay_apply(p, d)
        if dp.frames.shape[0] != g + max(d.delays):
            return SuiteResult("delay_roundtrip", False, f"bad length for G={g}, D={d.delays}")
        if framing.delay_remove(dp, d, g) != p:
            return SuiteResult("delay_roundtrip", False, f"round trip failed for G={g}, D={d.delays}")
    length = framing.DelayConfig().delayed_length(4)
    return SuiteResult("delay_roundtrip", length == 11, f"{trials} round trips exact; G=4 delayed length {length}")


def exhaustive_indices(x: np.ndarray, s: rvq.RvqState) -> np.ndarray:
    """Reference RVQ: direct differences to every entry, first minimum wins."""
    out = np.zeros((x.shape[0], s.num_layers), dtype=np.int64)
    res = np.array(x, dtype=np.float64)
    for r, cb in enumerate(s.layers):
        dist = ((res[:, None, :] - cb.entries[None, :, :]) ** 2).sum(-1)
        out[:, r] = np.argmin(dist, axis=1)
        res = res - cb.entries[out[:, r]]
    return out


def rvq_oracle(frames: int = 1000, dim: int = 16, seed: int = 0) -> SuiteResult:
    s = rvq.RvqState.random(rvq.codebook_sizes(8), dim, seed=seed)
    x = np.random.default_rng(seed + 1).normal(size=(frames, dim))
    fast = rvq.quantize(x, s).indices
    ref = exhaustive_indices(x, s)
    mism = int((fast != ref).sum())
    return SuiteResult("rvq_oracle", mism == 0, f"{frames} frames x 8 layers, {mism} mismatches")


def rvq_monotonic(inputs: int = 100, dim: int = 16, seed: int = 0) -> SuiteResult:
    s = rvq.RvqState.random(rvq.codebook_sizes(8), dim, seed=seed).with_zero_entry()
    x = np.random.default_rng(seed + 2).normal(size=(inputs, dim))
    bad = 0
    for row in x:
        errs = [float(np.mean((row - rvq.quantize(row[None], s, n).quantized[0]) ** 2)) for n in range(1, 9)]
        bad += any(b > a for a, b in zip(errs, errs[1:]))
    return SuiteResult("rvq_monotonic", bad == 0, f"{inputs} inputs, {bad} non-monotone")


def gaussian_mixture(seed: int, n: int = 10_000, dim: int = 16, k: int = 8) -> np.ndarray:
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=3.0, size=(k, dim))
    return centers[rng.integers(k, size=n)] + rng.normal(size=(n, dim))


def rvq_ema(seeds: int = 5) -> SuiteResult:
    ratios = []
    for seed in range(seeds):
        x = gaussian_mixture(seed)
        s = rvq.train_ema(x, rvq.RvqState.random([8], 16, seed=seed), seed=seed)
        _, ref = rvq.lloyd(x, 8, seed=seed, restarts=10)
        ratios.append(rvq.quantization_mse(x, s) / ref)
    med = float(np.median(ratios))
    return SuiteResult("rvq_ema", med <= 1.05, f"median EMA/Lloyd MSE ratio {med:.4f} over {seeds} seeds")


def loss_identities() -> SuiteResult:
    x = dsp.sine(440, 0.25)
    checks = {
        "mel(x,x)=0": dsp.multiscale_mel_loss(x, x) == 0.0,
        "hinge(2,-2)=0": float(ganloss.hinge_d_loss([torch.full((5,), 2.0)], [torch.full((5,), -2.0)])) == 0.0,
        "hinge(0,0)=2": float(ganloss.hinge_d_loss([torch.zeros(5)], [torch.zeros(5)])) == 2.0,
        "G(1,1,1)=4": ganloss.generator_total(1.0, 1.0, 1.0) == 4.0,
        "S1(1,1,1)=12": ganloss.stage1_total(1.0, 1.0, 1.0) == 12.0,
    }
    failed = [k for k, v in checks.items() if not v]
    return SuiteResult("loss_identities", not failed, "all exact" if not failed else f"failed {failed}")


def model_gradcheck(seed: int = 0, eps: float = 5e-5, max_coords: int = 200) -> SuiteResult:
    model, f = gradcheck_problem(seed)
    rep = gradient_check(f, param_tree(model), eps=eps, max_coords=max_coords)
    n = count_params(model)
    ok = rep.max_rel_error < 1e-4 and n <= 50_000
    return SuiteResult("model_gradcheck", ok,
                       f"max rel error {rep.max_rel_error:.2e} over {rep.coords_checked} coords, {n} params")


def gradcheck_problem(seed: int = 0):
    """Float64 toy model with O(1) weights and a joint-stage loss closure."""
    model = build_model(GRADCHECK_CONFIG, seed=seed, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "norm" not in name:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.3)
    corpus = synthetic_corpus(GRADCHECK_CONFIG, 2, text_len=4, n_patches=3, ratio=(2, 2), seed=seed + 1)
    batch = Batch.from_sequences(corpus, GRADCHECK_CONFIG)
    weights = StageWeights.preset("joint", GRADCHECK_CONFIG.num_layers)
    return model, lambda: model.sequence_loss(batch, weights).normalized


def interleaver(trials: int = 1000, seed: int = 0) -> SuiteResult:
    p = [framing.Patch(np.full((4, 8), i)) for i in range(10)]
    pat = framing.interleave_schedule(list(range(10)), p, (5, 5)).pattern()
    if pat != [("t", 5), ("p", 5), ("t", 5), ("p", 5)]:
        return SuiteResult("interleaver", False, f"5:5 pattern was {pat}")
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        nt, npch = int(rng.integers(0, 40)), int(rng.integers(0, 40))
        ratio = (int(rng.integers(1, 8)), int(rng.integers(1, 8)))
        text = rng.integers(0, 256, size=nt).tolist()
        patches = [framing.Patch(np.full((2, 2), i)) for i in range(npch)]
        seq = framing.interleave_schedule(text, patches, ratio)
        if seq.text_ids != text or [int(q.frames[0, 0]) for q in seq.patches] != list(range(npch)):
            return SuiteResult("interleaver", False, f"order/multiset broken for {nt}, {npch}, {ratio}")
    return SuiteResult("interleaver", True, f"5:5 pattern ok; {trials} random streams preserved")


def formats(seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    sizes = tuple(rvq.codebook_sizes(8))
    a = np.stack([rng.integers(k, size=30) for k in sizes], axis=1)
    a[-1, 3:] = framing.EMPTY
    b1 = tokenfile.to_bytes(tokenfile.TokenFile(a, sizes))
    b2 = tokenfile.to_bytes(tokenfile.from_bytes(b1))
    s = rvq.RvqState.random([8, 4], 3, seed=seed)
    c1 = rvq.codebooks_to_bytes(s)
    c2 = rvq.codebooks_to_bytes(rvq.codebooks_from_bytes(c1))
    m = build_model(GRADCHECK_CONFIG, seed=seed)
    p1 = checkpoint.params_to_bytes(param_tree(m))
    p2 = checkpoint.params_to_bytes(checkpoint.params_from_bytes(p1))
    rejected = 0
    for bad, loader in ((b"XXXX" + b1[4:], tokenfile.from_bytes), (b"XXXX" + c1[4:], rvq.codebooks_from_bytes),
                        (b"XXXX" + p1[4:], checkpoint.params_from_bytes)):
        try:
            loader(bad)
        except ValueError as exc:
            rejected += "magic" in str(exc)
    corrupt = bytearray(b1)
    corrupt[-2:] = (2000).to_bytes(2, "little")
    try:
        tokenfile.from_bytes(bytes(corrupt))
    except tokenfile.TokenFileError as exc:
        rejected += str(exc) == "index out of range"
    ok = b1 == b2 and c1 == c2 and p1 == p2 and rejected == 4
    return SuiteResult("formats", ok, f"byte-identical round trips: {b1 == b2 and c1 == c2 and p1 == p2}; "
                                      f"{rejected}/4 corruptions rejected")


def rate_arithmetic() -> SuiteResult:
    from .tokenizer import frame_count
    m = frame_count(dsp.SAMPLE_RATE)
    indices = m * 8
    kbps = bitrate_bps(rvq.codebook_sizes(8)) / 1000
    ok = indices == 200 and abs(kbps - 1.55) < 1e-12 and framing.DelayConfig().delayed_length(4) == 11
    return SuiteResult("rate_arithmetic", ok, f"1 s -> {m} frames / {indices} indices; {kbps:.2f} kbps")


def bitrate_bps(sizes, frame_rate: float = 25.0) -> float:
    return frame_rate * sum(math.log2(k) for k in sizes)


def dsp_properties() -> SuiteResult:
    z = dsp.Waveform(np.zeros(960))
    spec = dsp.stft(z, 240, 120)
    checks = {
        "zero stft T=9": spec.shape[0] == 9 and not np.any(spec),
        "1 kHz bin 40": dsp.dominant_bin(dsp.sine(1000, 0.5), 960, 480) == 40,
        "scale 5/7 params": dsp.scale_params(5) == (32, 240, 120) and dsp.scale_params(7) == (128, 960, 480),
        "silence floor": bool(np.all(dsp.mel_spectrogram(dsp.Waveform(np.zeros(24000)), 5).frames
                                     == np.log(dsp.LOG_FLOOR))),
        "filter rows > 0": all(dsp.mel_filterbank(*dsp.scale_params(i)[:2]).sum(1).min() > 0 for i in (5, 6, 7)),
    }
    failed = [k for k, v in checks.items() if not v]
    return SuiteResult("dsp_properties", not failed, "all hold" if not failed else f"failed {failed}")


def gan_smoke(steps: int = 200) -> SuiteResult:
    res = ganloss.gan_smoke(steps)
    lo, hi = res.d_loss_range
    ok = res.all_finite and 0.0 <= lo and hi <= 4.0
    return SuiteResult("gan_smoke", ok, f"{steps} steps finite={res.all_finite}, d_loss in [{lo:.3f}, {hi:.3f}]")


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "delay_roundtrip": delay_roundtrip,
    "rvq_oracle": rvq_oracle,
    "rvq_monotonic": rvq_monotonic,
    "rvq_ema": rvq_ema,
    "loss_identities": loss_identities,
    "model_gradcheck": model_gradcheck,
    "interleaver": interleaver,
    "formats": formats,
    "rate_arithmetic": rate_arithmetic,
    "dsp_properties": dsp_properties,
    "gan_smoke": gan_smoke,
}


def run_all(names=None, echo: Callable[[str], None] = print) -> list[SuiteResult]:
    results = []
    for name in names or SUITES:
        t = time.time()
        try:
            res = SUITES[name]()
        except Exception as exc:  # a crashing suite is a failing suite
            res = SuiteResult(name, False, f"raised {type(exc).__name__}: {exc}")
        res.seconds = time.time() - t
        echo(res.line())
        results.append(res)
    return results
