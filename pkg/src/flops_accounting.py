"""Analytic FLOP model for dense/factored inference, and the instrumented oracle.

Both paths share the convention in src.kernels and the same scope names, so
their per-scope breakdowns can be compared key by key.
"""

import csv
import math
from pathlib import Path
from typing import Optional, Union

from pydantic import BaseModel

from src.audio_frontend import N_FFT, MelFeatures
from src.kernels import (
    ELEMENTWISE,
    GELU_FLOPS,
    LAYERNORM_FLOPS,
    MATMUL_FMA_FLOPS,
    MATRIX,
    SOFTMAX_FLOPS,
    TRANSCENDENTAL,
    FlopCounter,
    conv1d_output_length,
)
from src.logging_config import get_logger
from src.model_core import LinearLayer, ModelBundle, Transcript, encode, greedy_decode
from src.tokenizer import Tokenizer

logger = get_logger(__name__)

FLOP_SCHEMA_VERSION = 1

# Feature extraction convention, per STFT frame / output element
FFT_FLOPS_PER_POINT_LOG = 5
POWER_FLOPS_PER_BIN = 3
LOG_RESCALE_FLOPS = 4


class FlopReport(BaseModel):
    schema_version: int = FLOP_SCHEMA_VERSION
    n_decoded_tokens: int
    feature_flops: int
    encoder_flops: int
    decoder_flops: int
    # Encoder + decoder; total adds feature extraction on top
    model_flops: int
    total_flops: int
    gflops: float
    categories: dict[str, int]
    breakdown: dict[str, int]


class InstrumentedCount(BaseModel):
    transcript: Transcript
    counted_flops: int
    report: FlopReport


def flops_linear(d_in: int, d_out: int, rows: int, rank: Optional[int] = None, bias: bool = True) -> int:
    """Dense: 2 rows d_in d_out; factored: 2 rows k (d_in + d_out); plus rows d_out bias adds"""
    if min(d_in, d_out, rows) <= 0:
        raise ValueError("flops_linear needs positive dimensions")
    if rank is None:
        matrix = MATMUL_FMA_FLOPS * rows * d_in * d_out
    else:
        if rank <= 0:
            raise ValueError(f"rank must be positive, got {rank}")
        matrix = MATMUL_FMA_FLOPS * rows * rank * (d_in + d_out)
    return matrix + (rows * d_out if bias else 0)


def feature_flops(n_frames: int, n_mels: int = 80) -> int:
    """Log-mel extraction: window, FFT, power, mel projection, log and rescale"""
    n_bins = N_FFT // 2 + 1
    stft_frames = n_frames + 1
    fft = int(round(FFT_FLOPS_PER_POINT_LOG * N_FFT * math.log2(N_FFT)))
    total = stft_frames * (N_FFT + fft)
    total += n_frames * n_bins * POWER_FLOPS_PER_BIN
    total += n_frames * MATMUL_FMA_FLOPS * n_mels * n_bins
    total += n_frames * n_mels * LOG_RESCALE_FLOPS
    return total


class _Analytic:
    """Walks a bundle and books the FLOPs each inference step would count"""

    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle
        self.cfg = bundle.config
        self.counter = FlopCounter()

    def linear(self, scope: str, layer: LinearLayer, rows: int) -> None:
        self.counter.add(MATRIX, flops_linear(layer.d_in, layer.d_out, rows, layer.rank, bias=False), scope)
        if layer.bias is not None:
            self.counter.add(MATRIX, rows * layer.d_out, scope)

    def layer_norm(self, scope: str, rows: int) -> None:
        self.counter.add(TRANSCENDENTAL, LAYERNORM_FLOPS * rows * self.cfg.d_model, scope)

    def attention(self, scope: str, rows: int, keys: int) -> None:
        d, h = self.cfg.d_model, self.cfg.n_heads
        self.counter.add(ELEMENTWISE, rows * d, scope)
        self.counter.add(MATRIX, MATMUL_FMA_FLOPS * rows * keys * d, scope)
        self.counter.add(TRANSCENDENTAL, SOFTMAX_FLOPS * h * rows * keys, scope)
        self.counter.add(MATRIX, MATMUL_FMA_FLOPS * rows * keys * d, scope)

    def residual(self, scope: str, rows: int) -> None:
        self.counter.add(ELEMENTWISE, rows * self.cfg.d_model, scope)

    def mlp(self, prefix: str, block, rows: int) -> None:
        self.linear(f"{prefix}.mlp_fc1", block.mlp_fc1, rows)
        self.counter.add(TRANSCENDENTAL, GELU_FLOPS * rows * self.cfg.d_mlp, f"{prefix}.mlp_act")
        self.linear(f"{prefix}.mlp_fc2", block.mlp_fc2, rows)

    def conv(self, scope: str, c_in: int, length: int, stride: int) -> int:
        d = self.cfg.d_model
        l_out = conv1d_output_length(length, stride)
        self.counter.add(MATRIX, MATMUL_FMA_FLOPS * d * 3 * c_in * l_out, scope)
        self.counter.add(MATRIX, d * l_out, scope)
        self.counter.add(TRANSCENDENTAL, GELU_FLOPS * d * l_out, scope)
        return l_out

    def encoder(self) -> None:
        cfg = self.cfg
        t = cfg.n_audio_ctx
        length = self.conv("encoder.conv1", cfg.n_mels, cfg.n_frames, 1)
        self.conv("encoder.conv2", cfg.d_model, length, 2)
        self.counter.add(ELEMENTWISE, t * cfg.d_model, "encoder.positional")
        for i, block in enumerate(self.bundle.encoder_layers):
            prefix = f"encoder.layers.{i}"
            self.layer_norm(f"{prefix}.norm", t)
            for part in ("q", "k", "v"):
                self.linear(f"{prefix}.attn_{part}", getattr(block.attn, part), t)
            self.attention(f"{prefix}.attention", t, t)
            self.linear(f"{prefix}.attn_out", block.attn.out, t)
            self.residual(f"{prefix}.residual", t)
            self.layer_norm(f"{prefix}.norm", t)
            self.mlp(prefix, block, t)
            self.residual(f"{prefix}.residual", t)
        self.layer_norm("encoder.ln_post", t)

    def decoder(self, n_decoded_tokens: int, n_prompt: int) -> None:
        cfg = self.cfg
        t = cfg.n_audio_ctx
        for i, block in enumerate(self.bundle.decoder_layers):
            prefix = f"decoder.layers.{i}"
            self.linear(f"{prefix}.cross_k", block.cross_attn.k, t)
            self.linear(f"{prefix}.cross_v", block.cross_attn.v, t)

        n_steps = n_prompt - 1 + n_decoded_tokens
        for position in range(n_steps):
            self.counter.add(ELEMENTWISE, cfg.d_model, "decoder.embedding")
            for i, block in enumerate(self.bundle.decoder_layers):
                prefix = f"decoder.layers.{i}"
                self.layer_norm(f"{prefix}.norm", 1)
                for part in ("q", "k", "v"):
                    self.linear(f"{prefix}.attn_{part}", getattr(block.attn, part), 1)
                # Self-attention over the cached prefix including this position
                self.attention(f"{prefix}.attention", 1, position + 1)
                self.linear(f"{prefix}.attn_out", block.attn.out, 1)
                self.residual(f"{prefix}.residual", 1)
                self.layer_norm(f"{prefix}.norm", 1)
                self.linear(f"{prefix}.cross_q", block.cross_attn.q, 1)
                self.attention(f"{prefix}.attention", 1, t)
                self.linear(f"{prefix}.cross_out", block.cross_attn.out, 1)
                self.residual(f"{prefix}.residual", 1)
                self.layer_norm(f"{prefix}.norm", 1)
                self.mlp(prefix, block, 1)
                self.residual(f"{prefix}.residual", 1)

        for _ in range(n_decoded_tokens):
            self.counter.add(TRANSCENDENTAL, LAYERNORM_FLOPS * cfg.d_model, "decoder.logits")
            self.counter.add(MATRIX, MATMUL_FMA_FLOPS * cfg.d_model * cfg.n_vocab, "decoder.logits")


def report_from_counter(counter: FlopCounter, n_decoded_tokens: int, n_frames: int, n_mels: int) -> FlopReport:
    breakdown = counter.breakdown()
    encoder = sum(v for k, v in breakdown.items() if k.startswith("encoder."))
    decoder = sum(v for k, v in breakdown.items() if k.startswith("decoder."))
    features = feature_flops(n_frames, n_mels)
    model = counter.total
    total = model + features
    return FlopReport(
        n_decoded_tokens=n_decoded_tokens,
        feature_flops=features,
        encoder_flops=encoder,
        decoder_flops=decoder,
        model_flops=model,
        total_flops=total,
        gflops=total / 1e9,
        categories=dict(counter.categories),
        breakdown=breakdown,
    )


def flops_model(bundle: ModelBundle, n_decoded_tokens: int, n_prompt: Optional[int] = None) -> FlopReport:
    """Analytic FLOPs of one transcription emitting n_decoded_tokens tokens"""
    if n_decoded_tokens < 1:
        raise ValueError(f"n_decoded_tokens must be at least 1, got {n_decoded_tokens}")
    if n_prompt is None:
        n_prompt = len(bundle.tokenizer.sot_sequence)
    analytic = _Analytic(bundle)
    analytic.encoder()
    analytic.decoder(n_decoded_tokens, n_prompt)
    cfg = bundle.config
    return report_from_counter(analytic.counter, n_decoded_tokens, cfg.n_frames, cfg.n_mels)


def instrumented_count(
    bundle: ModelBundle,
    mel: MelFeatures,
    max_tokens: int,
    tokenizer: Optional[Tokenizer] = None,
) -> InstrumentedCount:
    """Run inference in counting mode; every kernel books its FLOPs"""
    counter = FlopCounter()
    enc = encode(bundle, mel, counter=counter)
    transcript = greedy_decode(bundle, enc, max_tokens, tokenizer=tokenizer, counter=counter)
    cfg = bundle.config
    report = report_from_counter(counter, transcript.n_decoded_tokens, cfg.n_frames, cfg.n_mels)
    logger.debug(f"Instrumented run: {counter.total} model FLOPs over {transcript.n_decoded_tokens} tokens")
    return InstrumentedCount(transcript=transcript, counted_flops=counter.total, report=report)


def write_breakdown_csv(report: FlopReport, path: Union[str, Path]) -> None:
    """One row per scope, then the feature and total rows"""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["scope", "flops"])
        for scope, flops in report.breakdown.items():
            writer.writerow([scope, flops])
        writer.writerow(["features", report.feature_flops])
        writer.writerow(["total", report.total_flops])
