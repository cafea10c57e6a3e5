"""
Low-rank compression tests
Tests rank selection, weight-SVD and activation-SVD factoring, calibration and bundle reports
"""

import numpy as np
import pytest
from pydantic import ValidationError

from src.audio_frontend import log_mel
from src.errors import CalibrationError
from src.lowrank_compress import (
    CompressionPolicy,
    collect_calibration,
    compress_bundle,
    compress_layer,
    select_rank,
    substitution_pays,
)
from src.model_core import DenseLinear, FactoredLinear, encode, linear_apply, param_count
from src.synthetic import (
    calibration_clips,
    low_rank_bundle,
    matrix_with_spectrum,
    random_bundle,
    tone_clip,
    toy_config,
)


def print_section(title: str):
    """Print a test section header"""
    print(f"\n{'='*70}")
    print(f"  {title}")
    print(f"{'='*70}\n")


WEIGHT_SVD = CompressionPolicy(mode="weight-svd", threshold_theta=0.999)


# --- rank selection ---------------------------------------------------------

def test_select_rank_examples():
    assert select_rank([3.0, 1.0, 0.1], 0.999) == 2
    assert select_rank([0.5**i for i in range(32)], 0.999) == 5
    assert select_rank([1.0] * 384, 0.999) == 384
    assert select_rank([2.0, 1.0, 0.0], 1.0) == 2


def test_select_rank_is_monotonic_in_theta():
    s = [0.8**i for i in range(40)]
    ranks = [select_rank(s, theta) for theta in (0.5, 0.9, 0.99, 0.999, 1.0)]
    assert ranks == sorted(ranks)


def test_select_rank_rejects_bad_input():
    with pytest.raises(ValueError):
        select_rank([1.0, 2.0], 0.9)
    with pytest.raises(ValueError):
        select_rank([1.0], 0.0)
    with pytest.raises(ValueError):
        select_rank([0.0, 0.0], 0.9)


def test_substitution_rule():
    assert substitution_pays(384, 384, 100)
    assert not substitution_pays(384, 384, 192)
    assert not substitution_pays(384, 384, 384)


def test_policy_validation():
    with pytest.raises(ValidationError):
        CompressionPolicy(threshold_theta=1.5)
    with pytest.raises(ValidationError):
        CompressionPolicy(target_kinds=("attn_q", "conv1"))
    policy = CompressionPolicy(target_kinds=("mlp_fc2", "attn_q"))
    assert policy.target_kinds == ("attn_q", "mlp_fc2")


# --- single layers ----------------------------------------------------------

def test_identity_is_not_substituted():
    layer = DenseLinear(weight=np.eye(384, dtype=np.float32), bias=np.zeros(384, np.float32))
    new_layer, entry = compress_layer(layer, None, WEIGHT_SVD, layer_id="identity")
    assert entry.selected_rank == 384
    assert not entry.substituted
    assert new_layer is layer
    assert entry.new_params == entry.original_params == 147_840


def test_geometric_spectrum_weight_svd():
    rng = np.random.default_rng(0)
    w = matrix_with_spectrum(rng, [0.5**i for i in range(64)])
    layer = DenseLinear(weight=w)
    new_layer, entry = compress_layer(layer, None, WEIGHT_SVD, layer_id="geo")
    assert entry.selected_rank == 5
    assert entry.substituted
    assert isinstance(new_layer, FactoredLinear)
    assert new_layer.param_count == 5 * 128
    err = np.linalg.norm(new_layer.dense_weight() - w) / np.linalg.norm(w)
    assert err == pytest.approx(0.03125, rel=1e-2)
    assert entry.energy_captured >= 0.999


SWEEP_THETAS = (0.9, 0.99, 0.999)


def _effective_weight(layer) -> np.ndarray:
    if isinstance(layer, FactoredLinear):
        return layer.a.astype(np.float64) @ layer.b.astype(np.float64)
    return layer.weight.astype(np.float64)


def test_geometric_spectra_sweep():
    """100 seeded 384x384 matrices: rank monotone in theta, output error within sigma_(k+1)"""
    rng = np.random.default_rng(2024)
    thetas = np.linspace(0.5, 1.0, 26)
    for _ in range(100):
        s = rng.uniform(0.5, 0.95) ** np.arange(384)
        w = matrix_with_spectrum(rng, s)
        grid = [select_rank(s, theta) for theta in thetas]
        assert grid == sorted(grid)

        x = rng.standard_normal((32, 384))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        ranks = []
        for theta in SWEEP_THETAS:
            policy = CompressionPolicy(mode="weight-svd", threshold_theta=theta)
            layer, entry = compress_layer(DenseLinear(weight=w), None, policy)
            k = entry.selected_rank
            ranks.append(k)
            bound = s[k] if k < len(s) else 0.0
            err = np.linalg.norm(x @ (w.astype(np.float64) - _effective_weight(layer)).T, axis=1)
            assert np.all(err <= bound + 1e-5)
        assert ranks == sorted(ranks)


def test_rank_one_weight_gives_rank_one():
    rng = np.random.default_rng(1)
    w = np.outer(rng.standard_normal(32), rng.standard_normal(48)).astype(np.float32)
    new_layer, entry = compress_layer(DenseLinear(weight=w), None, WEIGHT_SVD)
    assert entry.selected_rank == 1
    np.testing.assert_allclose(new_layer.dense_weight(), w, rtol=1e-4, atol=1e-4)


def test_zero_weight_stays_dense():
    layer = DenseLinear(weight=np.zeros((16, 16), np.float32))
    new_layer, entry = compress_layer(layer, None, WEIGHT_SVD)
    assert new_layer is layer
    assert entry.selected_rank == 0
    assert not entry.substituted


def test_already_factored_layer_rejected():
    layer = FactoredLinear(a=np.ones((4, 1), np.float32), b=np.ones((1, 4), np.float32))
    with pytest.raises(ValueError):
        compress_layer(layer, None, WEIGHT_SVD)


def test_activation_svd_needs_matching_activations():
    layer = DenseLinear(weight=np.eye(8, dtype=np.float32))
    policy = CompressionPolicy(mode="activation-svd")
    with pytest.raises(CalibrationError):
        compress_layer(layer, None, policy)
    with pytest.raises(CalibrationError):
        compress_layer(layer, np.ones((10, 7), np.float32), policy)


def test_activation_svd_ignores_unused_input_directions():
    # Inputs live in a 3-dim subspace, so only 3 output directions carry energy
    rng = np.random.default_rng(2)
    basis = rng.standard_normal((3, 32))
    x = (rng.standard_normal((200, 3)) @ basis).astype(np.float32)
    w = rng.standard_normal((32, 32)).astype(np.float32)
    policy = CompressionPolicy(mode="activation-svd", threshold_theta=1.0)
    new_layer, entry = compress_layer(DenseLinear(weight=w), x, policy)
    assert entry.selected_rank == 3
    np.testing.assert_allclose(linear_apply(new_layer, x), x @ w.T, rtol=1e-3, atol=1e-3)


# --- calibration and bundles ------------------------------------------------

def test_collect_calibration_rows_and_determinism():
    bundle = random_bundle(toy_config(), seed=0)
    policy = CompressionPolicy(calibration_samples=3, target_kinds=("attn_q",), max_rows=20, seed=7)
    clips = calibration_clips(5)
    calib = collect_calibration(bundle, clips, policy)
    assert calib.n_clips == 3
    assert sorted(calib.activations) == ["encoder.layers.0.attn_q", "encoder.layers.1.attn_q"]
    assert calib.rows("encoder.layers.0.attn_q") == 20
    again = collect_calibration(bundle, clips, policy)
    np.testing.assert_array_equal(calib.activations["encoder.layers.1.attn_q"], again.activations["encoder.layers.1.attn_q"])


def test_collect_calibration_rejects_empty():
    with pytest.raises(CalibrationError):
        collect_calibration(random_bundle(toy_config()), [], CompressionPolicy())


def test_weight_svd_recovers_exact_ranks():
    bundle = low_rank_bundle(toy_config(), {"attn_q": 4, "mlp_fc1": 6}, seed=3)
    policy = CompressionPolicy(mode="weight-svd", target_kinds=("attn_q", "mlp_fc1", "attn_v"))
    compressed, report = compress_bundle(bundle, None, policy)

    ranks = {e.layer_id: e.selected_rank for e in report.entries}
    assert ranks["encoder.layers.0.attn_q"] == 4
    assert ranks["encoder.layers.1.mlp_fc1"] == 6
    assert not next(e for e in report.entries if e.layer_id == "encoder.layers.0.attn_v").substituted
    assert report.n_substituted == 4
    assert report.params_saved == report.params_before - report.params_after > 0
    assert param_count(compressed).encoder == report.params_after
    # The decoder is shared, untouched
    assert compressed.decoder_layers is bundle.decoder_layers

    mel = log_mel(tone_clip(700.0, 1.0), n_frames=bundle.config.n_frames)
    np.testing.assert_allclose(encode(compressed, mel), encode(bundle, mel), rtol=1e-3, atol=1e-3)


def test_activation_svd_on_low_rank_bundle():
    bundle = low_rank_bundle(toy_config(), {"attn_q": 4}, seed=5)
    policy = CompressionPolicy(threshold_theta=1.0, target_kinds=("attn_q",), calibration_samples=16)
    calib = collect_calibration(bundle, calibration_clips(16, seed=1), policy)
    compressed, report = compress_bundle(bundle, calib, policy, workers=2)
    assert [e.selected_rank for e in report.entries] == [4, 4]
    assert [e.layer_id for e in report.entries] == ["encoder.layers.0.attn_q", "encoder.layers.1.attn_q"]
    assert all(isinstance(b.attn.q, FactoredLinear) for b in compressed.encoder_layers)


def test_compress_bundle_carries_factored_layers_over():
    bundle = low_rank_bundle(toy_config(), {"mlp_fc2": 2}, seed=6)
    policy = CompressionPolicy(mode="weight-svd", target_kinds=("mlp_fc2",))
    once, _ = compress_bundle(bundle, None, policy)
    twice, report = compress_bundle(once, None, policy)
    assert [e.layer_id for e in report.entries] == ["encoder.layers.0.mlp_fc2", "encoder.layers.1.mlp_fc2"]
    assert all(not e.substituted and e.selected_rank == 2 for e in report.entries)
    assert all(e.new_params == e.original_params for e in report.entries)
    assert report.params_saved == 0
    assert any("already factored" in note for note in report.notes)
    assert twice.encoder_layers[0].mlp_fc2 is once.encoder_layers[0].mlp_fc2


def test_activation_mode_without_calibration():
    with pytest.raises(CalibrationError):
        compress_bundle(random_bundle(toy_config()), None, CompressionPolicy(mode="activation-svd"))


def test_report_table_lists_layers():
    bundle = low_rank_bundle(toy_config(), {"attn_q": 4}, seed=3)
    _, report = compress_bundle(bundle, None, CompressionPolicy(mode="weight-svd", target_kinds=("attn_q",)))
    table = report.to_table()
    assert "encoder.layers.0.attn_q" in table
    assert f"saved {report.params_saved}" in table


if __name__ == "__main__":
    print_section("LOW-RANK COMPRESSION TESTS")
    test_select_rank_examples()
    test_identity_is_not_substituted()
    test_geometric_spectrum_weight_svd()
    test_geometric_spectra_sweep()
    test_weight_svd_recovers_exact_ranks()
    print("✅ Low-rank compression tests passed")
