"""Command-line interface for the edge ASR toolkit"""

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.audio_frontend import estimate_stnr, ingest, log_mel
from src.bench_harness import (
    BundleEngine,
    StubEngine,
    bench_suite,
    normalized_latency,
    write_records_csv,
    write_summary_json,
    write_telemetry_csv,
)
from src.config import (
    BenchConfig,
    CompressionConfig,
    TelemetryConfig,
    ToolkitConfig,
    validate_all_configs,
)
from src.corpus_filter import (
    FilterConfig,
    attach_ref_hyps,
    read_manifest,
    run_pipeline,
    write_manifest,
)
from src.eval_wer import corpus_wer, pair_by_id, read_pairs_jsonl, read_tsv, write_utterances_csv
from src.flops_accounting import flops_model, write_breakdown_csv
from src.logging_config import get_logger, setup_logging
from src.lowrank_compress import CompressionPolicy, collect_calibration, compress_bundle
from src.model_core import LINEAR_KINDS, ModelConfig, encode, greedy_decode
from src.synthetic import forced_token_bundle, random_bundle
from src.telemetry import SyntheticTelemetryProvider, SystemTelemetryProvider
from src.tokenizer import ByteTokenizer
from src.weights_io import load_bundle, save_bundle

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3


class CliConfig(BaseModel):
    """Resolved settings: defaults < environment < --config file < explicit flags"""
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, ge=0)
    output_dir: str = "outputs"
    log_level: str = "INFO"
    log_file: str = ""
    # compress
    threshold: float = Field(default=0.999, gt=0.0, le=1.0)
    calibration_samples: int = Field(default=500, ge=1)
    max_calibration_rows: int = Field(default=8192, ge=1)
    mode: str = "activation-svd"
    kinds: list[str] = Field(default_factory=lambda: list(LINEAR_KINDS))
    workers: int = Field(default=1, ge=1)
    # transcribe / bench
    max_tokens: int = Field(default=224, ge=0)
    runs: int = Field(default=10, ge=1)
    period: float = Field(default=0.5, gt=0)
    meminfo_path: str = ""
    thermal_path: str = ""
    # filter
    wer_threshold: float = Field(default=0.5, ge=0)
    min_words: int = Field(default=3, ge=1)

    @classmethod
    def from_env(cls) -> dict:
        return dict(
            seed=ToolkitConfig.seed,
            output_dir=ToolkitConfig.output_dir,
            log_level=ToolkitConfig.log_level,
            log_file=ToolkitConfig.log_file,
            threshold=CompressionConfig.threshold,
            calibration_samples=CompressionConfig.calibration_samples,
            max_calibration_rows=CompressionConfig.max_calibration_rows,
            max_tokens=BenchConfig.max_tokens,
            runs=BenchConfig.n_runs,
            period=TelemetryConfig.period_s,
            meminfo_path=TelemetryConfig.meminfo_path,
            thermal_path=TelemetryConfig.thermal_path,
        )


def resolve_config(args: argparse.Namespace) -> CliConfig:
    settings = CliConfig.from_env()
    if args.config:
        try:
            file_settings = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ValueError(f"Cannot read config file {args.config}: {e}") from e
        if not isinstance(file_settings, dict):
            raise ValueError(f"{args.config}: config file must hold a JSON object")
        settings.update(file_settings)
    for name in CliConfig.model_fields:
        value = getattr(args, name, None)
        if value is not None:
            settings[name] = value
    return CliConfig(**settings)


def emit(data: str) -> None:
    sys.stdout.write(data.rstrip("\n") + "\n")


def output_path(cfg: CliConfig, explicit: Optional[str], default_name: str) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        path = Path(cfg.output_dir) / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_filter(args: argparse.Namespace, cfg: CliConfig) -> int:
    manifest = read_manifest(args.manifest)
    if args.refs:
        manifest = attach_ref_hyps(manifest, read_tsv(args.refs))
    filter_cfg = FilterConfig.for_version(
        args.version,
        wer_threshold=cfg.wer_threshold,
        min_words=cfg.min_words,
        check_silence=not args.no_silence_check,
    )
    result = run_pipeline(manifest, filter_cfg)
    out = output_path(cfg, args.out, f"manifest_{args.version}.jsonl")
    write_manifest(result.manifest, out)
    report_path = output_path(cfg, args.report, f"filter_report_{args.version}.json")
    report_path.write_text(result.report.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Filtered manifest written to {out}\n{result.report.to_table()}")
    emit(result.report.model_dump_json(indent=2))
    return EXIT_OK


def cmd_transcribe(args: argparse.Namespace, cfg: CliConfig) -> int:
    bundle = load_bundle(args.bundle)
    max_tokens = min(cfg.max_tokens, bundle.config.n_text_ctx)
    for path in args.audio:
        clip = ingest(path)
        start = time.perf_counter()
        mel = log_mel(clip, n_frames=bundle.config.n_frames)
        transcript = greedy_decode(bundle, encode(bundle, mel), max_tokens)
        latency = time.perf_counter() - start
        emit(json.dumps({
            "schema_version": 1,
            "utt": Path(path).stem,
            "text": transcript.text,
            "tokens": transcript.token_ids,
            "latency_s": latency,
            "decoding": "greedy",
        }))
    return EXIT_OK


def _calibration_clips(args: argparse.Namespace) -> list:
    paths = list(args.calib_audio or [])
    if args.calib_manifest:
        paths.extend(r.audio_path for r in read_manifest(args.calib_manifest))
    return [ingest(p) for p in paths]


def cmd_compress(args: argparse.Namespace, cfg: CliConfig) -> int:
    bundle = load_bundle(args.bundle)
    policy = CompressionPolicy(
        threshold_theta=cfg.threshold,
        calibration_samples=cfg.calibration_samples,
        mode=cfg.mode,
        target_kinds=tuple(cfg.kinds),
        seed=cfg.seed,
        max_rows=cfg.max_calibration_rows,
    )
    calib = None
    if policy.mode == "activation-svd":
        clips = _calibration_clips(args)
        calib = collect_calibration(bundle, clips, policy)
    compressed, report = compress_bundle(bundle, calib, policy, workers=cfg.workers)
    out = output_path(cfg, args.out, "compressed.eakw")
    save_bundle(compressed, out)
    if args.report:
        output_path(cfg, args.report, "").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"\n{report.to_table()}")
    emit(report.model_dump_json(indent=2))
    return EXIT_OK


def cmd_flops(args: argparse.Namespace, cfg: CliConfig) -> int:
    if args.bundle:
        bundle = load_bundle(args.bundle)
    else:
        bundle = random_bundle(ModelConfig.preset(args.preset), seed=cfg.seed)
    report = flops_model(bundle, args.tokens)
    if args.breakdown:
        write_breakdown_csv(report, output_path(cfg, args.breakdown, ""))
    emit(report.model_dump_json(indent=2))
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, cfg: CliConfig) -> int:
    if args.stub_sleep is not None:
        engines = [StubEngine(args.stub_sleep)]
    elif args.bundle:
        engines = [BundleEngine(load_bundle(p), name=Path(p).stem, max_tokens=cfg.max_tokens) for p in args.bundle]
    else:
        raise ValueError("bench needs --bundle paths or --stub-sleep")
    clips = [ingest(p) for p in args.audio]

    provider = None
    if args.telemetry == "system":
        provider = SystemTelemetryProvider(meminfo_path=cfg.meminfo_path, thermal_path=cfg.thermal_path)
    elif args.telemetry == "synthetic":
        provider = SyntheticTelemetryProvider()

    summary = bench_suite(
        engines,
        clips,
        n_runs=cfg.runs,
        clip_ids=[Path(p).stem for p in args.audio],
        provider=provider,
        period_s=cfg.period,
    )
    write_summary_json(summary, output_path(cfg, args.summary, "bench_summary.json"))
    write_records_csv(summary, output_path(cfg, args.records_csv, "bench_records.csv"))
    if summary.telemetry:
        write_telemetry_csv(summary.telemetry, output_path(cfg, args.telemetry_csv, "telemetry.csv"))
        if args.plot:
            from src.plotting import plot_telemetry

            plot_telemetry(summary.telemetry, output_path(cfg, args.plot, ""), title="Benchmark telemetry")
    if args.baseline:
        logger.info(f"Normalized latency vs {args.baseline}: {normalized_latency(summary, args.baseline)}")

    failed = [c for c in summary.cells if c.failure]
    emit(summary.model_dump_json(indent=2, exclude={"telemetry"}))
    return EXIT_RUNTIME if failed and len(failed) == len(summary.cells) else EXIT_OK


def cmd_wer(args: argparse.Namespace, cfg: CliConfig) -> int:
    if args.pairs:
        triples = read_pairs_jsonl(args.pairs)
    elif args.ref and args.hyp:
        triples = pair_by_id(read_tsv(args.ref), read_tsv(args.hyp))
    else:
        raise ValueError("wer needs --ref and --hyp, or --pairs")
    result = corpus_wer([(ref, hyp) for _, ref, hyp in triples], utt_ids=[u for u, _, _ in triples])
    if args.per_utt:
        write_utterances_csv(result, output_path(cfg, args.per_utt, ""))
    emit(result.model_dump_json(indent=2, exclude={"utterances"}))
    return EXIT_OK


def cmd_stnr(args: argparse.Namespace, cfg: CliConfig) -> int:
    for path in args.audio:
        estimate = estimate_stnr(ingest(path))
        emit(json.dumps({"schema_version": 1, "path": str(path), **estimate.model_dump()}))
    return EXIT_OK


def cmd_toy_bundle(args: argparse.Namespace, cfg: CliConfig) -> int:
    config = ModelConfig(
        n_mels=80,
        n_audio_ctx=args.audio_ctx,
        n_audio_layers=args.layers,
        n_text_layers=args.layers,
        d_model=args.d_model,
        n_heads=args.heads,
        n_vocab=args.vocab,
        n_text_ctx=args.text_ctx,
    )
    if args.force is not None:
        byte_tokenizer = ByteTokenizer(config.n_vocab)
        sequence = byte_tokenizer.encode(args.force) + [byte_tokenizer.eot]
        bundle = forced_token_bundle(config, sequence, seed=cfg.seed)
    else:
        bundle = random_bundle(config, seed=cfg.seed)
    out = output_path(cfg, args.out, "toy.eakw")
    save_bundle(bundle, out)
    emit(json.dumps({"schema_version": 1, "path": str(out), "config": config.model_dump()}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edge-asr", description="Edge ASR toolkit: filter, compress, transcribe, benchmark")
    parser.add_argument("--config", help="JSON file with setting overrides")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--log-level", dest="log_level", choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
    parser.add_argument("--log-file", dest="log_file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter", help="Apply discards and F1/F2/F3 for a data version")
    p.add_argument("--manifest", required=True)
    p.add_argument("--version", choices=["A", "B", "C", "D"], default="A")
    p.add_argument("--refs", help="TSV of reference-model hypotheses (utt_id, text) for F1")
    p.add_argument("--out")
    p.add_argument("--report")
    p.add_argument("--wer-threshold", dest="wer_threshold", type=float)
    p.add_argument("--min-words", dest="min_words", type=int)
    p.add_argument("--no-silence-check", action="store_true")
    p.set_defaults(handler=cmd_filter)

    p = sub.add_parser("transcribe", help="Greedy transcription, one JSON line per file")
    p.add_argument("--bundle", required=True)
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    p.add_argument("audio", nargs="+")
    p.set_defaults(handler=cmd_transcribe)

    p = sub.add_parser("compress", help="Low-rank compression of encoder linear layers")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out")
    p.add_argument("--report")
    p.add_argument("--mode", choices=["weight-svd", "activation-svd"])
    p.add_argument("--theta", dest="threshold", type=float)
    p.add_argument("--calibration-samples", dest="calibration_samples", type=int)
    p.add_argument("--max-rows", dest="max_calibration_rows", type=int)
    p.add_argument("--kinds", nargs="+", choices=list(LINEAR_KINDS))
    p.add_argument("--workers", type=int)
    p.add_argument("--calib-manifest")
    p.add_argument("--calib-audio", nargs="+")
    p.set_defaults(handler=cmd_compress)

    p = sub.add_parser("flops", help="Analytic FLOP report")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--bundle")
    group.add_argument("--preset", choices=["tiny.en", "base.en", "small.en"])
    p.add_argument("--tokens", type=int, default=1)
    p.add_argument("--breakdown", help="write the per-scope CSV here")
    p.set_defaults(handler=cmd_flops)

    p = sub.add_parser("bench", help="Latency / RTF benchmark with telemetry")
    p.add_argument("--bundle", nargs="+")
    p.add_argument("--stub-sleep", type=float, help="benchmark a stub that sleeps this long instead")
    p.add_argument("--audio", nargs="+", required=True)
    p.add_argument("--runs", type=int)
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    p.add_argument("--telemetry", choices=["system", "synthetic", "none"], default="system")
    p.add_argument("--period", type=float)
    p.add_argument("--meminfo-path", dest="meminfo_path")
    p.add_argument("--thermal-path", dest="thermal_path")
    p.add_argument("--summary")
    p.add_argument("--records-csv")
    p.add_argument("--telemetry-csv")
    p.add_argument("--plot", help="write a RAM/temperature chart here")
    p.add_argument("--baseline", help="model name to normalize latencies against")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("wer", help="Corpus word error rate")
    p.add_argument("--ref")
    p.add_argument("--hyp")
    p.add_argument("--pairs", help="JSON-lines with utt_id, ref, hyp")
    p.add_argument("--per-utt", help="write per-utterance CSV here")
    p.set_defaults(handler=cmd_wer)

    p = sub.add_parser("stnr", help="Speech-to-noise ratio estimates")
    p.add_argument("audio", nargs="+")
    p.set_defaults(handler=cmd_stnr)

    p = sub.add_parser("toy-bundle", help="Write a small synthetic bundle")
    p.add_argument("--out")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--audio-ctx", type=int, default=8)
    p.add_argument("--vocab", type=int, default=259)
    p.add_argument("--text-ctx", type=int, default=32)
    p.add_argument("--force", help="text the bundle always transcribes")
    p.set_defaults(handler=cmd_toy_bundle)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        validate_all_configs()
        cfg = resolve_config(args)
        setup_logging(log_level=cfg.log_level, log_file=cfg.log_file or None)
        return args.handler(args, cfg)
    except (ValueError, ValidationError, FileNotFoundError) as e:
        logger.error(f"Invalid input: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:
        logger.error(f"Command failed: {e}", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
