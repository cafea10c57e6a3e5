"""
Model core tests
Tests configs, linear layers, encoding, greedy decoding and the weight container
"""

import dataclasses
import struct

import numpy as np
import pytest
from pydantic import ValidationError

from src import model_core
from src.audio_frontend import AudioClip, MelFeatures, log_mel
from src.errors import ContainerFormatError, InferenceError, ShapeMismatchError
from src.kernels import conv1d, gelu, layer_norm, softmax
from src.model_core import (
    LINEAR_KINDS,
    DenseLinear,
    FactoredLinear,
    ModelConfig,
    attend,
    encode,
    greedy_decode,
    linear_apply,
    param_count,
    sinusoids,
)
from src.synthetic import forced_token_bundle, random_bundle, toy_config, tone_clip
from src.weights_io import bundle_from_bytes, bundle_to_bytes, load_bundle, save_bundle


def print_section(title: str):
    """Print a test section header"""
    print(f"\n{'='*70}")
    print(f"  {title}")
    print(f"{'='*70}\n")


def _mel(config: ModelConfig) -> MelFeatures:
    return log_mel(tone_clip(440.0, 1.0), n_frames=config.n_frames)


def _forced(text: str = "hi"):
    config = toy_config()
    eot = config.n_vocab - 2
    return forced_token_bundle(config, [*text.encode("utf-8"), eot], seed=0)


# --- config and layers ------------------------------------------------------

def test_config_rejects_bad_shapes():
    with pytest.raises(ValidationError):
        ModelConfig(n_audio_ctx=8, n_audio_layers=1, n_text_layers=1, d_model=30, n_heads=4, n_vocab=259, n_text_ctx=8)
    with pytest.raises(ValidationError):
        ModelConfig(n_audio_ctx=0, n_audio_layers=1, n_text_layers=1, d_model=32, n_heads=4, n_vocab=259, n_text_ctx=8)


def test_preset_derived_shapes():
    cfg = ModelConfig.preset("tiny.en")
    assert (cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp) == (384, 6, 64, 1536)
    assert cfg.n_frames == 3000
    with pytest.raises(ValueError):
        ModelConfig.preset("large")


def test_linear_param_counts():
    rng = np.random.default_rng(0)
    dense = DenseLinear(weight=rng.standard_normal((384, 384)).astype(np.float32), bias=np.zeros(384, np.float32))
    assert dense.param_count == 147_840
    factored = FactoredLinear(
        a=np.zeros((384, 100), np.float32), b=np.zeros((100, 384), np.float32), bias=np.zeros(384, np.float32)
    )
    assert factored.param_count == 77_184
    assert factored.rank == 100


def test_factored_matches_dense_product():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((48, 5)).astype(np.float32)
    b = rng.standard_normal((5, 32)).astype(np.float32)
    bias = rng.standard_normal(48).astype(np.float32)
    x = rng.standard_normal((7, 32)).astype(np.float32)
    factored = FactoredLinear(a=a, b=b, bias=bias)
    dense = DenseLinear(weight=factored.dense_weight(), bias=bias)
    np.testing.assert_allclose(linear_apply(factored, x), linear_apply(dense, x), rtol=1e-4, atol=1e-4)


def test_full_rank_factorization_matches_dense():
    rng = np.random.default_rng(5)
    weight = (0.1 * rng.standard_normal((24, 32))).astype(np.float32)
    bias = rng.standard_normal(24).astype(np.float32)
    u, s, vt = np.linalg.svd(weight.astype(np.float64), full_matrices=False)
    factored = FactoredLinear(a=(u * s).astype(np.float32), b=vt.astype(np.float32), bias=bias)
    assert factored.rank == 24
    x = rng.standard_normal((9, 32)).astype(np.float32)
    dense = DenseLinear(weight=weight, bias=bias)
    np.testing.assert_allclose(linear_apply(factored, x), linear_apply(dense, x), rtol=0, atol=1e-5)


def test_linear_rejects_wrong_input():
    layer = DenseLinear(weight=np.zeros((4, 3), np.float32))
    with pytest.raises(ShapeMismatchError):
        linear_apply(layer, np.zeros((2, 4), np.float32))
    with pytest.raises(ShapeMismatchError):
        FactoredLinear(a=np.zeros((4, 2), np.float32), b=np.zeros((3, 3), np.float32))


def test_tiny_en_param_counts():
    counts = param_count(random_bundle(ModelConfig.preset("tiny.en"), seed=0))
    assert counts.encoder == 7_632_384
    assert counts.decoder == 29_551_872
    assert counts.total == counts.encoder + counts.decoder


# --- inference ---------------------------------------------------------------

def test_attend_uniform_keys_average_values():
    q = np.ones((2, 4), np.float32)
    k = np.zeros((3, 4), np.float32)
    v = np.arange(12, dtype=np.float32).reshape(3, 4)
    out = attend(q, k, v, n_heads=2)
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (2, 1)), rtol=1e-6)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(6)
    logits = (10.0 * rng.standard_normal((3, 5, 7))).astype(np.float32)
    probs = softmax(logits)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, rtol=0, atol=1e-6)

    # Per-head identity values make attend return its attention weights
    q = rng.standard_normal((5, 6)).astype(np.float32)
    k = rng.standard_normal((3, 6)).astype(np.float32)
    v = np.concatenate([np.eye(3), np.eye(3)], axis=1).astype(np.float32)
    weights = attend(q, k, v, n_heads=2)
    np.testing.assert_allclose(weights[:, :3].sum(axis=1), 1.0, rtol=0, atol=1e-6)
    np.testing.assert_allclose(weights[:, 3:].sum(axis=1), 1.0, rtol=0, atol=1e-6)


def test_silenced_blocks_leave_normed_stem():
    bundle = random_bundle(toy_config(), seed=3)
    layers = []
    for block in bundle.encoder_layers:
        for kind in LINEAR_KINDS:
            layer = block.linear(kind)
            block = block.with_linear(kind, DenseLinear(weight=np.zeros_like(layer.weight), bias=None))
        layers.append(block)
    bundle = dataclasses.replace(bundle, encoder_layers=tuple(layers))
    mel = _mel(bundle.config)

    conv = bundle.conv
    stem = gelu(conv1d(mel.values.astype(np.float32), conv.conv1_weight, conv.conv1_bias, 1))
    stem = gelu(conv1d(stem, conv.conv2_weight, conv.conv2_bias, 2)).T
    stem = stem + sinusoids(bundle.config.n_audio_ctx, bundle.config.d_model)
    expected = layer_norm(stem, bundle.encoder_ln.weight, bundle.encoder_ln.bias)
    np.testing.assert_allclose(encode(bundle, mel), expected, rtol=1e-5, atol=1e-5)


def test_encode_shape_and_determinism():
    bundle = random_bundle(toy_config(), seed=2)
    mel = _mel(bundle.config)
    enc = encode(bundle, mel)
    assert enc.shape == (bundle.config.n_audio_ctx, bundle.config.d_model)
    assert np.all(np.isfinite(enc))
    np.testing.assert_array_equal(enc, encode(bundle, mel))


def test_encode_rejects_wrong_mel_shape():
    bundle = random_bundle(toy_config(), seed=2)
    with pytest.raises(ShapeMismatchError):
        encode(bundle, MelFeatures(values=np.zeros((80, 10), np.float32)))


def test_capture_sees_every_encoder_linear():
    bundle = random_bundle(toy_config(n_audio_layers=2), seed=2)
    seen = []
    encode(bundle, _mel(bundle.config), capture=lambda layer_id, x: seen.append((layer_id, x.shape)))
    assert len(seen) == 2 * 6
    assert seen[0] == ("encoder.layers.0.attn_q", (8, 64))
    assert ("encoder.layers.1.mlp_fc2", (8, 256)) in seen


def test_non_finite_logits_raise_inference_error(monkeypatch):
    bundle = _forced("hi")
    monkeypatch.setattr(model_core, "_logits", lambda *args: np.full(bundle.config.n_vocab, np.nan, np.float32))
    with pytest.raises(InferenceError):
        greedy_decode(bundle, encode(bundle, _mel(bundle.config)), max_tokens=4)


def test_forced_bundle_decodes_text():
    bundle = _forced("hi")
    transcript = greedy_decode(bundle, encode(bundle, _mel(bundle.config)), max_tokens=10)
    assert transcript.text == "hi"
    assert transcript.token_ids == [ord("h"), ord("i"), bundle.tokenizer.eot]
    assert transcript.n_decoded_tokens == 3


def test_decode_output_does_not_depend_on_audio():
    bundle = _forced("ok")
    silence = AudioClip(samples=np.zeros(16000, np.float32), sample_rate_hz=16000)
    enc_a = encode(bundle, _mel(bundle.config))
    enc_b = encode(bundle, log_mel(silence, n_frames=bundle.config.n_frames))
    assert greedy_decode(bundle, enc_a, 10).text == greedy_decode(bundle, enc_b, 10).text == "ok"


def test_decode_respects_max_tokens():
    bundle = _forced("help")
    enc = encode(bundle, _mel(bundle.config))
    assert greedy_decode(bundle, enc, 0).token_ids == []
    short = greedy_decode(bundle, enc, 2)
    assert short.token_ids == [ord("h"), ord("e")]
    assert short.text == "he"
    with pytest.raises(ValueError):
        greedy_decode(bundle, enc, bundle.config.n_text_ctx + 1)


def test_decode_stops_at_text_context():
    config = toy_config(n_text_ctx=4)
    bundle = forced_token_bundle(config, [10, 11, 12, 13], seed=0)
    transcript = greedy_decode(bundle, encode(bundle, _mel(config)), max_tokens=4)
    assert transcript.token_ids == [10, 11, 12, 13]


# --- weight container -------------------------------------------------------

def test_container_save_load(tmp_path):
    bundle = random_bundle(toy_config(), seed=4)
    path = tmp_path / "toy.eakw"
    save_bundle(bundle, path)
    loaded = load_bundle(path)
    assert loaded.config == bundle.config
    assert bundle_to_bytes(loaded) == path.read_bytes()
    assert loaded.encoder_layers[0].attn.k.bias is None


def test_container_keeps_factored_layers():
    bundle = random_bundle(toy_config(), seed=4)
    block = bundle.encoder_layers[0]
    factored = FactoredLinear(
        a=np.ones((64, 3), np.float32), b=np.ones((3, 64), np.float32), bias=block.attn.q.bias
    )
    layers = (block.with_linear("attn_q", factored), *bundle.encoder_layers[1:])
    bundle = dataclasses.replace(bundle, encoder_layers=layers)
    loaded = bundle_from_bytes(bundle_to_bytes(bundle))
    assert isinstance(loaded.encoder_layers[0].attn.q, FactoredLinear)
    assert loaded.encoder_layers[0].attn.q.rank == 3


def test_container_rejects_corruption():
    blob = bundle_to_bytes(random_bundle(toy_config(), seed=4))
    with pytest.raises(ContainerFormatError, match="magic"):
        bundle_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ContainerFormatError, match="version"):
        bundle_from_bytes(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(ContainerFormatError, match="truncated"):
        bundle_from_bytes(blob[:-4])
    with pytest.raises(ContainerFormatError, match="trailing"):
        bundle_from_bytes(blob + b"\x00\x00\x00\x00")
    with pytest.raises(ContainerFormatError, match="non-finite"):
        bundle_from_bytes(blob[:-4] + struct.pack("<f", float("nan")))


def test_container_rejects_indivisible_heads():
    blob = bytearray(bundle_to_bytes(random_bundle(toy_config(d_model=64, n_heads=4), seed=4)))
    # magic, version, then the config fields in order
    offset = 8 + 4 * ModelConfig.FIELD_ORDER.index("n_heads")
    assert struct.unpack_from("<I", blob, offset) == (4,)
    struct.pack_into("<I", blob, offset, 5)
    with pytest.raises(ContainerFormatError, match="not divisible"):
        bundle_from_bytes(bytes(blob))


def test_container_missing_file(tmp_path):
    with pytest.raises(ContainerFormatError):
        load_bundle(tmp_path / "missing.eakw")


if __name__ == "__main__":
    print_section("MODEL CORE TESTS")
    test_linear_param_counts()
    test_full_rank_factorization_matches_dense()
    test_softmax_rows_sum_to_one()
    test_encode_shape_and_determinism()
    test_silenced_blocks_leave_normed_stem()
    test_forced_bundle_decodes_text()
    test_decode_respects_max_tokens()
    test_container_rejects_corruption()
    test_container_rejects_indivisible_heads()
    print("✅ Model core tests passed")
