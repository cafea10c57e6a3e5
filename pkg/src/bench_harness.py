"""Latency / real-time-factor benchmarks with concurrent telemetry.

Latency covers feature extraction, encoding, decoding and detokenization;
model and audio loading happen before the clock starts.
"""

import csv
import time
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.audio_frontend import AudioClip, log_mel
from src.config import BenchConfig
from src.flops_accounting import flops_model
from src.logging_config import get_logger
from src.model_core import ModelBundle, Transcript, encode, greedy_decode
from src.telemetry import (
    TelemetryProvider,
    TelemetrySample,
    TelemetrySampler,
    thermal_event_counts,
)

logger = get_logger(__name__)

BENCH_SCHEMA_VERSION = 1
WARMUP_RUNS = 1

PathLike = Union[str, Path]


class Engine(Protocol):
    name: str

    def transcribe(self, clip: AudioClip) -> Transcript: ...

    def gflops(self, n_decoded_tokens: int) -> float: ...


class BundleEngine:
    """Real inference on a model bundle"""

    def __init__(self, bundle: ModelBundle, name: str = "bundle", max_tokens: Optional[int] = None):
        self.bundle = bundle
        self.name = name
        self.max_tokens = min(max_tokens if max_tokens is not None else BenchConfig.max_tokens, bundle.config.n_text_ctx)
        self._gflops: dict[int, float] = {}

    def transcribe(self, clip: AudioClip) -> Transcript:
        mel = log_mel(clip, n_frames=self.bundle.config.n_frames)
        enc = encode(self.bundle, mel)
        return greedy_decode(self.bundle, enc, self.max_tokens)

    def gflops(self, n_decoded_tokens: int) -> float:
        if n_decoded_tokens < 1:
            return 0.0
        if n_decoded_tokens not in self._gflops:
            self._gflops[n_decoded_tokens] = flops_model(self.bundle, n_decoded_tokens).gflops
        return self._gflops[n_decoded_tokens]


class StubEngine:
    """Sleeps a fixed time per transcription; for harness tests"""

    def __init__(self, sleep_s: float, name: str = "stub", text: str = ""):
        self.sleep_s = sleep_s
        self.name = name
        self.text = text

    def transcribe(self, clip: AudioClip) -> Transcript:
        time.sleep(self.sleep_s)
        return Transcript(token_ids=[0], text=self.text, n_decoded_tokens=1)

    def gflops(self, n_decoded_tokens: int) -> float:
        return 0.0


class BenchRecord(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model_name: str
    clip_id: str
    run_index: int
    audio_duration_s: float
    latency_s: float
    rtf: float
    n_decoded_tokens: int
    gflops: float


class CellSummary(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model_name: str
    clip_id: str
    audio_duration_s: float
    n_runs: int
    records: list[BenchRecord] = Field(default_factory=list)
    mean_latency_s: Optional[float] = None
    var_latency_s: Optional[float] = None
    mean_rtf: Optional[float] = None
    var_rtf: Optional[float] = None
    failure: Optional[str] = None


class BenchSummary(BaseModel):
    schema_version: int = BENCH_SCHEMA_VERSION
    variance: str = "population"
    warmup_runs: int = WARMUP_RUNS
    n_runs: int
    cells: list[CellSummary]
    telemetry: list[TelemetrySample] = Field(default_factory=list)
    throttle_events: int = 0
    critical_events: int = 0


def bench_once(engine: Engine, clip: AudioClip, run_index: int = 0, clip_id: str = "clip") -> BenchRecord:
    """Time one transcription on the monotonic performance clock"""
    if clip.duration_s <= 0:
        raise ValueError("cannot benchmark an empty clip")
    start = time.perf_counter()
    transcript = engine.transcribe(clip)
    latency = time.perf_counter() - start
    return BenchRecord(
        model_name=engine.name,
        clip_id=clip_id,
        run_index=run_index,
        audio_duration_s=clip.duration_s,
        latency_s=latency,
        rtf=latency / clip.duration_s,
        n_decoded_tokens=transcript.n_decoded_tokens,
        gflops=engine.gflops(transcript.n_decoded_tokens),
    )


def _bench_cell(engine: Engine, clip: AudioClip, clip_id: str, n_runs: int) -> CellSummary:
    cell = CellSummary(model_name=engine.name, clip_id=clip_id, audio_duration_s=clip.duration_s, n_runs=n_runs)
    try:
        for _ in range(WARMUP_RUNS):
            engine.transcribe(clip)
        cell.records = [bench_once(engine, clip, run_index=i, clip_id=clip_id) for i in range(n_runs)]
    except Exception as e:
        logger.error(f"Benchmark cell {engine.name}/{clip_id} failed: {e}", exc_info=True)
        cell.records = []
        cell.failure = f"{type(e).__name__}: {e}"
        return cell

    latencies = np.array([r.latency_s for r in cell.records])
    rtfs = np.array([r.rtf for r in cell.records])
    cell.mean_latency_s = float(latencies.mean())
    cell.var_latency_s = float(latencies.var())
    cell.mean_rtf = float(rtfs.mean())
    cell.var_rtf = float(rtfs.var())
    logger.info(f"{engine.name}/{clip_id}: mean RTF {cell.mean_rtf:.3f} over {n_runs} runs")
    return cell


def bench_suite(
    engines: Sequence[Engine],
    clips: Sequence[AudioClip],
    n_runs: Optional[int] = None,
    clip_ids: Optional[Sequence[str]] = None,
    provider: Optional[TelemetryProvider] = None,
    period_s: Optional[float] = None,
) -> BenchSummary:
    """Every (engine, clip) cell: one warm-up, then n_runs timed runs.

    Cells run one after another. With a provider, telemetry is sampled for
    the whole suite.
    """
    n_runs = n_runs if n_runs is not None else BenchConfig.n_runs
    if n_runs < 1:
        raise ValueError(f"n_runs must be at least 1, got {n_runs}")
    if not engines or not clips:
        raise ValueError("bench_suite needs at least one engine and one clip")
    clip_ids = list(clip_ids) if clip_ids is not None else [f"clip{i}" for i in range(len(clips))]
    if len(clip_ids) != len(clips):
        raise ValueError(f"{len(clip_ids)} clip ids for {len(clips)} clips")

    sampler = TelemetrySampler(provider, period_s).start() if provider is not None else None
    try:
        cells = [
            _bench_cell(engine, clip, clip_id, n_runs)
            for engine in engines
            for clip, clip_id in zip(clips, clip_ids)
        ]
    finally:
        samples = sampler.stop() if sampler is not None else []

    throttle, critical = thermal_event_counts(samples)
    return BenchSummary(
        n_runs=n_runs,
        cells=cells,
        telemetry=samples,
        throttle_events=throttle,
        critical_events=critical,
    )


def normalized_latency(summary: BenchSummary, baseline: str) -> dict[str, float]:
    """Mean latency of each model relative to the baseline model, averaged over shared clips"""
    base = {c.clip_id: c.mean_latency_s for c in summary.cells if c.model_name == baseline and c.failure is None}
    if not base:
        raise ValueError(f"no successful cells for baseline model '{baseline}'")
    ratios: dict[str, list[float]] = {}
    for c in summary.cells:
        if c.failure is None and c.clip_id in base and base[c.clip_id] > 0:
            ratios.setdefault(c.model_name, []).append(c.mean_latency_s / base[c.clip_id])
    return {name: float(np.mean(values)) for name, values in ratios.items()}


def write_summary_json(summary: BenchSummary, path: PathLike) -> None:
    Path(path).write_text(summary.model_dump_json(indent=2), encoding="utf-8")


def write_records_csv(summary: BenchSummary, path: PathLike) -> None:
    fields = list(BenchRecord.model_fields)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for cell in summary.cells:
            for record in cell.records:
                writer.writerow(record.model_dump())


def write_telemetry_csv(samples: Sequence[TelemetrySample], path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["t_monotonic_s", "ram_used_pct", "cpu_temp_c", "thermal_status"])
        for s in samples:
            writer.writerow([f"{s.t_monotonic_s:.6f}", f"{s.ram_used_pct:.2f}", f"{s.cpu_temp_c:.2f}", s.thermal_status])
