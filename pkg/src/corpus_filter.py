"""Corpus manifest filtering: long/silent discards, F1 (reference-model WER),
F2 (minimum word count) and F3 (in-session packing into 25-30 s samples).

Data versions:
    A  discards only
    B  A + F1 + F2
    C  A + F3
    D  A + F1 + F2 + F3   (F1/F2 before F3)
"""

from collections import defaultdict
from pathlib import Path
from typing import Callable, Literal, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.audio_frontend import estimate_stnr, ingest
from src.errors import FilterInputError
from src.eval_wer import load_rules, normalize, wer
from src.logging_config import get_logger

logger = get_logger(__name__)

FILTER_SCHEMA_VERSION = 1
PACKED_SPLITS = ("train", "dev")
LONG_DISCARD_SPLITS = ("train", "dev")
SPLITS = ("train", "dev", "test")

Split = Literal["train", "dev", "test"]
DataVersion = Literal["A", "B", "C", "D"]
PathLike = Union[str, Path]


class UtteranceRecord(BaseModel):
    """One manifest line"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    utt_id: str
    session_id: str
    split: Split
    audio_path: str
    transcript: str
    duration_s: float = Field(gt=0)
    ref_hyp: Optional[str] = None
    order_index: int = Field(ge=0)
    # Precomputed STNR; when absent the audio is read to estimate it
    stnr_db: Optional[float] = None
    # Set on F3 packs: the utterances concatenated into this sample
    source_utt_ids: list[str] = Field(default_factory=list)
    segment_paths: list[str] = Field(default_factory=list)


Manifest = list[UtteranceRecord]


class FilterConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    wer_threshold: float = Field(default=0.50, ge=0)
    min_words: int = Field(default=3, ge=1)
    pack_min_s: float = Field(default=25.0, gt=0)
    pack_max_s: float = 30.0
    max_utt_s: float = Field(default=30.0, gt=0)
    silence_stnr_db: float = 3.0
    check_silence: bool = True
    apply_f1: bool = False
    apply_f2: bool = False
    apply_f3: bool = False
    version: Optional[DataVersion] = None

    @model_validator(mode="after")
    def _check_window(self) -> "FilterConfig":
        if self.pack_min_s > self.pack_max_s:
            raise ValueError(f"pack_min_s={self.pack_min_s} exceeds pack_max_s={self.pack_max_s}")
        return self

    @classmethod
    def for_version(cls, version: str, **overrides) -> "FilterConfig":
        flags = {
            "A": dict(apply_f1=False, apply_f2=False, apply_f3=False),
            "B": dict(apply_f1=True, apply_f2=True, apply_f3=False),
            "C": dict(apply_f1=False, apply_f2=False, apply_f3=True),
            "D": dict(apply_f1=True, apply_f2=True, apply_f3=True),
        }
        if version not in flags:
            raise ValueError(f"unknown data version '{version}', choose from A, B, C, D")
        return cls(version=version, **{**overrides, **flags[version]})


class Discard(BaseModel):
    utt_id: str
    split: str
    stage: str
    reason: str


class SplitStats(BaseModel):
    count: int = 0
    hours: float = 0.0


class StageSummary(BaseModel):
    stage: str
    splits: dict[str, SplitStats]


class FilterReport(BaseModel):
    schema_version: int = FILTER_SCHEMA_VERSION
    version: Optional[str] = None
    notes: list[str]
    stages: list[StageSummary]
    discards: list[Discard]

    def to_table(self) -> str:
        """Hours [count] per split after each stage"""
        header = f"{'stage':<10}" + "".join(f"{split:>20}" for split in SPLITS)
        lines = [f"# {note}" for note in self.notes] + [header]
        for stage in self.stages:
            cells = "".join(
                f"{f'{stage.splits[s].hours:.2f} [{stage.splits[s].count}]':>20}" for s in SPLITS
            )
            lines.append(f"{stage.stage:<10}{cells}")
        return "\n".join(lines)


class FilterResult(BaseModel):
    manifest: list[UtteranceRecord]
    report: FilterReport


def _stats(manifest: Sequence[UtteranceRecord], stage: str) -> StageSummary:
    splits = {split: SplitStats() for split in SPLITS}
    for r in manifest:
        splits[r.split].count += 1
        splits[r.split].hours += r.duration_s / 3600.0
    return StageSummary(stage=stage, splits=splits)


def validate_manifest(manifest: Sequence[UtteranceRecord]) -> None:
    """utt_id unique; order_index unique within (session, split)"""
    seen_ids: set[str] = set()
    seen_slots: set[tuple[str, str, int]] = set()
    for r in manifest:
        if r.utt_id in seen_ids:
            raise FilterInputError(f"duplicate utt_id {r.utt_id}")
        slot = (r.session_id, r.split, r.order_index)
        if slot in seen_slots:
            raise FilterInputError(f"order_index {r.order_index} repeated in session {r.session_id}/{r.split}")
        seen_ids.add(r.utt_id)
        seen_slots.add(slot)


def _audio_stnr(record: UtteranceRecord) -> float:
    return estimate_stnr(ingest(record.audio_path)).stnr_db


def discard_long_and_empty(
    manifest: Sequence[UtteranceRecord],
    cfg: FilterConfig,
    stnr_fn: Callable[[UtteranceRecord], float] = _audio_stnr,
) -> tuple[Manifest, list[Discard]]:
    """Drop train/dev utterances over max_utt_s, and silent utterances from every split"""
    kept: Manifest = []
    discards: list[Discard] = []
    for r in manifest:
        if r.split in LONG_DISCARD_SPLITS and r.duration_s > cfg.max_utt_s:
            discards.append(Discard(utt_id=r.utt_id, split=r.split, stage="discard", reason=f"longer than {cfg.max_utt_s:g} s"))
            continue
        if cfg.check_silence:
            reason = None
            try:
                stnr = r.stnr_db if r.stnr_db is not None else stnr_fn(r)
                if stnr < cfg.silence_stnr_db:
                    reason = f"silent (STNR {stnr:.1f} dB < {cfg.silence_stnr_db:g} dB)"
            except ValueError as e:
                reason = str(e)
            if reason is not None:
                discards.append(Discard(utt_id=r.utt_id, split=r.split, stage="discard", reason=reason))
                continue
        kept.append(r)
    logger.info(f"Discard stage: {len(manifest)} -> {len(kept)} utterances")
    return kept, discards


def filter_f1(manifest: Sequence[UtteranceRecord], cfg: FilterConfig) -> tuple[Manifest, list[Discard]]:
    """Drop utterances where the reference model's WER is more than wer_threshold"""
    missing = [r.utt_id for r in manifest if r.ref_hyp is None]
    if missing:
        raise FilterInputError(
            f"F1 requires ref_hyp (reference-model hypotheses); missing for {len(missing)} records: {missing[:10]}"
        )
    kept: Manifest = []
    discards: list[Discard] = []
    for r in manifest:
        score = wer(r.transcript, r.ref_hyp).wer
        if score > cfg.wer_threshold:
            discards.append(Discard(utt_id=r.utt_id, split=r.split, stage="F1", reason=f"wer {score:.3f} > {cfg.wer_threshold:g}"))
        else:
            kept.append(r)
    logger.info(f"F1: {len(manifest)} -> {len(kept)} utterances")
    return kept, discards


def word_count(text: str) -> int:
    return len(normalize(text).split())


def filter_f2(manifest: Sequence[UtteranceRecord], cfg: FilterConfig) -> tuple[Manifest, list[Discard]]:
    """Drop utterances with fewer than min_words normalized words"""
    kept: Manifest = []
    discards: list[Discard] = []
    for r in manifest:
        n = word_count(r.transcript)
        if n < cfg.min_words:
            discards.append(Discard(utt_id=r.utt_id, split=r.split, stage="F2", reason=f"{n} words < {cfg.min_words}"))
        else:
            kept.append(r)
    logger.info(f"F2: {len(manifest)} -> {len(kept)} utterances")
    return kept, discards


def _pack(group: Sequence[UtteranceRecord], total_s: float) -> UtteranceRecord:
    first = group[0]
    ref_hyps = [r.ref_hyp for r in group]
    return UtteranceRecord(
        utt_id="+".join(r.utt_id for r in group),
        session_id=first.session_id,
        split=first.split,
        audio_path=first.audio_path,
        transcript=" ".join(r.transcript.strip() for r in group),
        duration_s=total_s,
        ref_hyp=" ".join(h.strip() for h in ref_hyps) if all(h is not None for h in ref_hyps) else None,
        order_index=first.order_index,
        source_utt_ids=[r.utt_id for r in group],
        segment_paths=[r.audio_path for r in group],
    )


def _pack_session(records: Sequence[UtteranceRecord], cfg: FilterConfig) -> tuple[Manifest, list[Discard]]:
    out: Manifest = []
    discards: list[Discard] = []
    group: list[UtteranceRecord] = []
    total = 0.0

    def drop(reason: str) -> None:
        for r in group:
            discards.append(Discard(utt_id=r.utt_id, split=r.split, stage="F3", reason=reason))

    for r in sorted(records, key=lambda rec: rec.order_index):
        if cfg.pack_min_s <= r.duration_s <= cfg.pack_max_s:
            drop("pack interrupted by a full-length utterance")
            group, total = [], 0.0
            out.append(r)
            continue
        if r.duration_s > cfg.pack_max_s:
            drop("pack interrupted by an over-length utterance")
            group, total = [], 0.0
            discards.append(Discard(utt_id=r.utt_id, split=r.split, stage="F3", reason="longer than pack window"))
            continue
        if total + r.duration_s > cfg.pack_max_s:
            drop(f"pack of {total:.2f} s below {cfg.pack_min_s:g} s")
            group, total = [], 0.0
        group.append(r)
        total += r.duration_s
        if total >= cfg.pack_min_s:
            out.append(_pack(group, total))
            group, total = [], 0.0
    drop(f"trailing pack of {total:.2f} s below {cfg.pack_min_s:g} s")
    return out, discards


def pack_f3(manifest: Sequence[UtteranceRecord], cfg: FilterConfig) -> tuple[Manifest, list[Discard]]:
    """Concatenate consecutive in-session train/dev utterances into [pack_min_s, pack_max_s] samples.

    Records are never reordered; a group that cannot reach pack_min_s is
    discarded. Test records pass through untouched.
    """
    sessions: dict[tuple[str, str], list[UtteranceRecord]] = defaultdict(list)
    out: Manifest = []
    for r in manifest:
        if r.split in PACKED_SPLITS:
            sessions[(r.session_id, r.split)].append(r)
        else:
            out.append(r)

    discards: list[Discard] = []
    for key in sorted(sessions):
        packed, dropped = _pack_session(sessions[key], cfg)
        out.extend(packed)
        discards.extend(dropped)
        if dropped:
            logger.debug(f"F3 session {key[0]}/{key[1]}: {len(dropped)} utterances discarded")
    logger.info(f"F3: {len(manifest)} -> {len(out)} records")
    return out, discards


def run_pipeline(
    manifest: Sequence[UtteranceRecord],
    cfg: FilterConfig,
    stnr_fn: Callable[[UtteranceRecord], float] = _audio_stnr,
) -> FilterResult:
    """discard -> F1 -> F2 -> F3, each stage as enabled by cfg"""
    validate_manifest(manifest)
    version, _ = load_rules()
    notes = [
        f"F1 scores with the WER normalizer v{version}; discards wer > {cfg.wer_threshold:g}",
        "F1 and F2 run before F3",
        "F3 never reorders utterances within a session",
        f"silent = STNR below {cfg.silence_stnr_db:g} dB or degenerate signal",
    ]
    stages = [_stats(manifest, "input")]
    current, discards = discard_long_and_empty(manifest, cfg, stnr_fn)
    stages.append(_stats(current, "discard"))

    steps = [("F1", cfg.apply_f1, filter_f1), ("F2", cfg.apply_f2, filter_f2), ("F3", cfg.apply_f3, pack_f3)]
    for name, enabled, step in steps:
        if not enabled:
            continue
        current, dropped = step(current, cfg)
        discards.extend(dropped)
        stages.append(_stats(current, name))

    report = FilterReport(version=cfg.version, notes=notes, stages=stages, discards=discards)
    return FilterResult(manifest=current, report=report)


def read_manifest(path: PathLike) -> Manifest:
    """JSON-lines manifest, one UtteranceRecord per line"""
    records: Manifest = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(UtteranceRecord.model_validate_json(line))
            except ValidationError as e:
                raise FilterInputError(f"{path}:{line_no}: invalid manifest record: {e}") from e
    return records


def write_manifest(manifest: Sequence[UtteranceRecord], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in manifest:
            f.write(r.model_dump_json(exclude_defaults=True) + "\n")


def attach_ref_hyps(manifest: Sequence[UtteranceRecord], ref_hyps: dict[str, str]) -> Manifest:
    """Fill ref_hyp from an id -> hypothesis map (e.g. a TSV of reference-model output)"""
    return [r.model_copy(update={"ref_hyp": ref_hyps[r.utt_id]}) if r.utt_id in ref_hyps else r for r in manifest]
