"""Synthetic bundles and signals for demos, tests and smoke benchmarks.

Nothing here needs external weights or audio: every builder is seeded and
deterministic.
"""

import dataclasses
from typing import Iterable, Mapping, Sequence

import numpy as np

from src.audio_frontend import SAMPLE_RATE, AudioClip
from src.model_core import (
    LINEAR_KINDS,
    AttentionParams,
    ConvFrontend,
    DenseLinear,
    LayerNormParams,
    ModelBundle,
    ModelConfig,
    ResidualBlock,
)

# Forced-token decoder: token embedding scale and positional scale
FORCED_EMBED_SCALE = 1e-3
FORCED_POSITION_SCALE = 10.0


def toy_config(
    d_model: int = 64,
    n_heads: int = 4,
    n_audio_layers: int = 2,
    n_text_layers: int = 2,
    n_audio_ctx: int = 8,
    n_vocab: int = 259,
    n_text_ctx: int = 32,
) -> ModelConfig:
    """Small config that runs in milliseconds; 259 = 256 bytes + 3 specials"""
    return ModelConfig(
        n_mels=80,
        n_audio_ctx=n_audio_ctx,
        n_audio_layers=n_audio_layers,
        n_text_layers=n_text_layers,
        d_model=d_model,
        n_heads=n_heads,
        n_vocab=n_vocab,
        n_text_ctx=n_text_ctx,
    )


def _dense(rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True) -> DenseLinear:
    weight = rng.standard_normal((d_out, d_in)).astype(np.float32) / np.float32(np.sqrt(d_in))
    b = (0.02 * rng.standard_normal(d_out)).astype(np.float32) if bias else None
    return DenseLinear(weight=weight, bias=b)


def _ln(d: int) -> LayerNormParams:
    return LayerNormParams(weight=np.ones(d, dtype=np.float32), bias=np.zeros(d, dtype=np.float32))


def _attention(rng: np.random.Generator, d: int) -> AttentionParams:
    # Key projection has no bias
    return AttentionParams(
        q=_dense(rng, d, d),
        k=_dense(rng, d, d, bias=False),
        v=_dense(rng, d, d),
        out=_dense(rng, d, d),
    )


def _block(rng: np.random.Generator, d: int, decoder: bool) -> ResidualBlock:
    return ResidualBlock(
        attn=_attention(rng, d),
        attn_ln=_ln(d),
        mlp_fc1=_dense(rng, d, 4 * d),
        mlp_fc2=_dense(rng, 4 * d, d),
        mlp_ln=_ln(d),
        cross_attn=_attention(rng, d) if decoder else None,
        cross_attn_ln=_ln(d) if decoder else None,
    )


def random_bundle(config: ModelConfig, seed: int = 0) -> ModelBundle:
    """Bundle with Gaussian weights scaled by 1/sqrt(d_in) and unit layer norms"""
    rng = np.random.default_rng(seed)
    d = config.d_model
    conv = ConvFrontend(
        conv1_weight=(rng.standard_normal((d, config.n_mels, 3)) / np.sqrt(3 * config.n_mels)).astype(np.float32),
        conv1_bias=np.zeros(d, dtype=np.float32),
        conv2_weight=(rng.standard_normal((d, d, 3)) / np.sqrt(3 * d)).astype(np.float32),
        conv2_bias=np.zeros(d, dtype=np.float32),
    )
    encoder_layers = tuple(_block(rng, d, decoder=False) for _ in range(config.n_audio_layers))
    token_embedding = (0.02 * rng.standard_normal((config.n_vocab, d))).astype(np.float32)
    positional = (0.01 * rng.standard_normal((config.n_text_ctx, d))).astype(np.float32)
    decoder_layers = tuple(_block(rng, d, decoder=True) for _ in range(config.n_text_layers))
    return ModelBundle(
        config=config,
        conv=conv,
        encoder_layers=encoder_layers,
        encoder_ln=_ln(d),
        token_embedding=token_embedding,
        decoder_positional=positional,
        decoder_layers=decoder_layers,
        decoder_ln=_ln(d),
    )


def low_rank_matrix(rng: np.random.Generator, d_out: int, d_in: int, rank: int, scale: float = 1.0) -> np.ndarray:
    """d_out x d_in matrix with exactly `rank` equal nonzero singular values"""
    u, _ = np.linalg.qr(rng.standard_normal((d_out, rank)))
    v, _ = np.linalg.qr(rng.standard_normal((d_in, rank)))
    return (scale * u @ v.T).astype(np.float32)


def matrix_with_spectrum(rng: np.random.Generator, singular_values: Sequence[float]) -> np.ndarray:
    """Square matrix U diag(s) V^T with random orthogonal U, V"""
    n = len(singular_values)
    u, _ = np.linalg.qr(rng.standard_normal((n, n)))
    v, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return ((u * np.asarray(singular_values, dtype=np.float64)) @ v.T).astype(np.float32)


def low_rank_bundle(config: ModelConfig, ranks: Mapping[str, int], seed: int = 0) -> ModelBundle:
    """Random bundle whose encoder layers of the given kinds have exact ranks.

    ranks maps a linear kind (e.g. "mlp_fc1") to its rank in every encoder
    layer; the other layers stay full-rank Gaussian.
    """
    unknown = set(ranks) - set(LINEAR_KINDS)
    if unknown:
        raise ValueError(f"unknown linear kinds: {sorted(unknown)}")
    bundle = random_bundle(config, seed)
    rng = np.random.default_rng([seed, 1])
    layers = []
    for block in bundle.encoder_layers:
        for kind, rank in ranks.items():
            layer = block.linear(kind)
            weight = low_rank_matrix(rng, layer.d_out, layer.d_in, rank)
            block = block.with_linear(kind, DenseLinear(weight=weight, bias=layer.bias))
        layers.append(block)
    return replace_encoder_layers(bundle, layers)


def replace_encoder_layers(bundle: ModelBundle, layers: Iterable[ResidualBlock]) -> ModelBundle:
    return dataclasses.replace(bundle, encoder_layers=tuple(layers))


def _silenced(layer: DenseLinear) -> DenseLinear:
    bias = np.zeros_like(layer.bias) if layer.bias is not None else None
    return DenseLinear(weight=np.zeros_like(layer.weight), bias=bias)


def forced_token_bundle(config: ModelConfig, sequence: Sequence[int], seed: int = 0) -> ModelBundle:
    """Bundle whose greedy decode emits `sequence` regardless of the audio.

    Every decoder sub-layer writes zero into the residual stream, so the
    state at position j is E[token] + P[j]. P[j] points along a direction
    u_j owned by sequence[j], and only sequence[j]'s embedding row has a
    component along u_j, so it wins the argmax at position j.
    """
    d = config.d_model
    if len(set(sequence)) != len(sequence):
        raise ValueError("forced sequence tokens must be distinct")
    if not sequence or 2 * len(sequence) > d:
        raise ValueError(f"forced sequence length must lie in [1, {d // 2}]")
    if len(sequence) > config.n_text_ctx:
        raise ValueError("forced sequence longer than the text context")
    if any(not 0 <= t < config.n_vocab for t in sequence):
        raise ValueError("forced token outside the vocabulary")

    bundle = random_bundle(config, seed)
    token_embedding = np.zeros((config.n_vocab, d), dtype=np.float32)
    positional = np.zeros((config.n_text_ctx, d), dtype=np.float32)
    for j, token in enumerate(sequence):
        direction = np.zeros(d, dtype=np.float32)
        direction[2 * j], direction[2 * j + 1] = 1.0, -1.0
        direction /= np.float32(np.sqrt(2.0))
        token_embedding[token] = FORCED_EMBED_SCALE * direction
        positional[j] = FORCED_POSITION_SCALE * direction

    decoder_layers = []
    for block in bundle.decoder_layers:
        attn = AttentionParams(q=block.attn.q, k=block.attn.k, v=block.attn.v, out=_silenced(block.attn.out))
        cross = AttentionParams(
            q=block.cross_attn.q, k=block.cross_attn.k, v=block.cross_attn.v, out=_silenced(block.cross_attn.out)
        )
        decoder_layers.append(
            ResidualBlock(
                attn=attn,
                attn_ln=block.attn_ln,
                mlp_fc1=block.mlp_fc1,
                mlp_fc2=_silenced(block.mlp_fc2),
                mlp_ln=block.mlp_ln,
                cross_attn=cross,
                cross_attn_ln=block.cross_attn_ln,
            )
        )
    return ModelBundle(
        config=config,
        conv=bundle.conv,
        encoder_layers=bundle.encoder_layers,
        encoder_ln=bundle.encoder_ln,
        token_embedding=token_embedding,
        decoder_positional=positional,
        decoder_layers=tuple(decoder_layers),
        decoder_ln=_ln(d),
    )


def tone_clip(
    freq_hz: float = 1000.0,
    duration_s: float = 1.0,
    rms_db: float = -10.0,
    sample_rate_hz: int = SAMPLE_RATE,
) -> AudioClip:
    """Sine tone at a given RMS level (dB re full scale)"""
    t = np.arange(int(round(duration_s * sample_rate_hz))) / sample_rate_hz
    amplitude = np.sqrt(2.0) * 10.0 ** (rms_db / 20.0)
    return AudioClip(samples=(amplitude * np.sin(2 * np.pi * freq_hz * t)).astype(np.float32), sample_rate_hz=sample_rate_hz)


def noise_clip(duration_s: float = 1.0, rms_db: float = -40.0, seed: int = 0, sample_rate_hz: int = SAMPLE_RATE) -> AudioClip:
    """White Gaussian noise at a given RMS level"""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate_hz))
    samples = 10.0 ** (rms_db / 20.0) * rng.standard_normal(n)
    return AudioClip(samples=np.clip(samples, -1.0, 1.0).astype(np.float32), sample_rate_hz=sample_rate_hz)


def speech_like_clip(
    noise_s: float = 5.0,
    speech_s: float = 5.0,
    noise_db: float = -40.0,
    speech_db: float = -10.0,
    freq_hz: float = 440.0,
    seed: int = 0,
) -> AudioClip:
    """Noise-only stretch followed by noise plus a tone ("speech") stretch"""
    noise = noise_clip(noise_s + speech_s, noise_db, seed).samples.astype(np.float64)
    tone = tone_clip(freq_hz, speech_s, speech_db).samples.astype(np.float64)
    start = len(noise) - len(tone)
    noise[start:] += tone
    return AudioClip(samples=np.clip(noise, -1.0, 1.0).astype(np.float32), sample_rate_hz=SAMPLE_RATE)


def calibration_clips(n: int, duration_s: float = 1.0, seed: int = 0) -> list[AudioClip]:
    """Distinct noisy tone clips for activation calibration"""
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n):
        freq = float(rng.uniform(200.0, 3000.0))
        tone = tone_clip(freq, duration_s, rms_db=-20.0).samples
        noise = noise_clip(duration_s, rms_db=-45.0, seed=seed * 100003 + i).samples
        clips.append(AudioClip(samples=np.clip(tone + noise, -1.0, 1.0).astype(np.float32), sample_rate_hz=SAMPLE_RATE))
    return clips
