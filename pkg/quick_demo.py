#!/usr/bin/env python
"""Quick demo: the whole toolkit on a toy model and synthetic audio, no downloads"""

import sys
import tempfile
from pathlib import Path

from src.audio_frontend import estimate_stnr, log_mel, save_wav
from src.bench_harness import BundleEngine, bench_suite
from src.corpus_filter import FilterConfig, UtteranceRecord, run_pipeline
from src.eval_wer import corpus_wer
from src.flops_accounting import flops_model
from src.logging_config import setup_logging
from src.lowrank_compress import CompressionPolicy, collect_calibration, compress_bundle
from src.model_core import encode, greedy_decode, param_count
from src.synthetic import calibration_clips, forced_token_bundle, speech_like_clip, toy_config
from src.telemetry import SyntheticTelemetryProvider
from src.weights_io import load_bundle, save_bundle

# Setup logging to see what's happening
setup_logging(log_level="INFO")


def main():
    print("\n" + "="*70)
    print("  EDGE ASR TOOLKIT DEMO")
    print("="*70 + "\n")

    try:
        work = Path(tempfile.mkdtemp(prefix="edge_asr_demo_"))

        print("📦 Building a toy bundle that always says 'hi'...")
        config = toy_config()
        toy = forced_token_bundle(config, [ord("h"), ord("i"), config.n_vocab - 2], seed=0)
        save_bundle(toy, work / "toy.eakw")
        bundle = load_bundle(work / "toy.eakw")
        print(f"✅ Bundle saved and reloaded: {param_count(bundle).model_dump()}\n")

        print("🎙️  Synthesizing a clip (5 s noise, 5 s tone)...")
        clip = speech_like_clip()
        save_wav(work / "clip.wav", clip)
        print(f"✅ STNR: {estimate_stnr(clip).stnr_db:.1f} dB\n")

        print("📝 Transcribing...")
        mel = log_mel(clip, n_frames=config.n_frames)
        transcript = greedy_decode(bundle, encode(bundle, mel), max_tokens=8)
        print(f"✅ Transcript: {transcript.text!r} ({transcript.n_decoded_tokens} tokens)\n")

        print("🗜️  Compressing encoder layers (activation SVD)...")
        policy = CompressionPolicy(threshold_theta=0.99, calibration_samples=4)
        calib = collect_calibration(bundle, calibration_clips(4), policy)
        compressed, report = compress_bundle(bundle, calib, policy)
        print(report.to_table())
        after = greedy_decode(compressed, encode(compressed, mel), max_tokens=8)
        print(f"✅ Compressed transcript: {after.text!r}\n")

        print("🧮 FLOPs...")
        for name, b in [("dense", bundle), ("compressed", compressed)]:
            print(f"   {name}: {flops_model(b, max(1, transcript.n_decoded_tokens)).gflops:.4f} GFLOPs")
        print()

        print("⏱️  Benchmarking with synthetic telemetry...")
        summary = bench_suite(
            [BundleEngine(bundle, name="dense", max_tokens=8), BundleEngine(compressed, name="compressed", max_tokens=8)],
            [clip],
            n_runs=2,
            provider=SyntheticTelemetryProvider.ramp(60.0, 82.0, 5),
            period_s=0.01,
        )
        for cell in summary.cells:
            print(f"   {cell.model_name}: mean RTF {cell.mean_rtf:.4f}")
        print(f"   telemetry samples: {len(summary.telemetry)}, throttle events: {summary.throttle_events}\n")

        print("📊 WER...")
        result = corpus_wer([("hi", after.text), ("hello there", "hello their")])
        print(f"✅ Corpus WER: {result.wer:.3f}\n")

        print("🧹 Filtering a toy manifest (version D)...")
        manifest = [
            UtteranceRecord(utt_id=f"u{i}", session_id="s1", split="train", audio_path="", transcript="one two three four",
                            duration_s=d, ref_hyp="one two three four", order_index=i, stnr_db=20.0)
            for i, d in enumerate([10.0, 12.0, 6.0, 20.0, 9.0])
        ]
        filtered = run_pipeline(manifest, FilterConfig.for_version("D"))
        print(filtered.report.to_table())

        print(f"\n✅ Demo complete! Artifacts in {work}")

    except KeyboardInterrupt:
        print("\n\n⏹️  Demo interrupted by user")
        sys.exit(1)
    except Exception as e:
        print(f"\n❌ Error during demo: {e}")
        import traceback
        traceback.print_exc()
        sys.exit(1)


if __name__ == "__main__":
    main()
