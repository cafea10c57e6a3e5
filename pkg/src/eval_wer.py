"""Text normalization and word error rate.

Scoring is word-level Levenshtein with unit costs. Among minimum-cost
alignments the one with the fewest insertions plus deletions wins, i.e.
substitutions are preferred over insertion/deletion pairs.
"""

import csv
import json
import re
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from pydantic import BaseModel

from src.logging_config import get_logger

logger = get_logger(__name__)

WER_SCHEMA_VERSION = 1
RULES_PATH = Path(__file__).parent / "data" / "normalizer_rules.json"

PathLike = Union[str, Path]

_MARKER_RE = re.compile(r"\[[^\]]*\]|<[^>]*>")
_NON_WORD_RE = re.compile(r"[^\w\s']|_")
_STRAY_APOSTROPHE_RE = re.compile(r"(?<!\w)'|'(?!\w)")
_CURLY_APOSTROPHES = str.maketrans({"’": "'", "‘": "'", "ʼ": "'"})


@lru_cache(maxsize=None)
def load_rules(path: PathLike = RULES_PATH) -> tuple[int, dict[str, str]]:
    """(version, word -> expansion) from the shipped rule table"""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return int(data["version"]), dict(data["expansions"])


def normalize(text: str) -> str:
    """Lowercase, drop bracketed markers and punctuation, expand the rule table"""
    _, expansions = load_rules()
    text = text.lower().translate(_CURLY_APOSTROPHES)
    text = _MARKER_RE.sub(" ", text)
    text = _NON_WORD_RE.sub(" ", text)
    text = _STRAY_APOSTROPHE_RE.sub(" ", text)
    words = [expansions.get(w, w) for w in text.split()]
    return " ".join(" ".join(words).split())


class WerBreakdown(BaseModel):
    substitutions: int
    deletions: int
    insertions: int
    n_ref_words: int
    wer: float
    # Empty reference: wer is I / max(1, N)
    degenerate_reference: bool = False

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


class UtteranceWer(BaseModel):
    utt_id: str
    reference: str
    hypothesis: str
    breakdown: WerBreakdown


class CorpusWer(WerBreakdown):
    """Pooled counts (sum of errors / sum of reference words) plus per-utterance records"""
    schema_version: int = WER_SCHEMA_VERSION
    normalizer_version: int
    n_utterances: int
    utterances: list[UtteranceWer]


class DurationBucket(BaseModel):
    lo_s: float
    hi_s: float
    n_utterances: int
    n_ref_words: int
    wer: Optional[float]


def align_counts(ref: Sequence[str], hyp: Sequence[str]) -> tuple[int, int, int]:
    """(S, D, I) of a minimum-cost alignment, substitution-preferring on ties"""
    # Cell: (cost, deletions + insertions, S, D, I); min() compares the first two
    prev = [(j, j, 0, 0, j) for j in range(len(hyp) + 1)]
    for i in range(1, len(ref) + 1):
        cur = [(i, i, 0, i, 0)]
        for j in range(1, len(hyp) + 1):
            c, di, s, d, ins = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (c, di, s, d, ins)
            else:
                diag = (c + 1, di, s + 1, d, ins)
            c, di, s, d, ins = prev[j]
            delete = (c + 1, di + 1, s, d + 1, ins)
            c, di, s, d, ins = cur[j - 1]
            insert = (c + 1, di + 1, s, d, ins + 1)
            cur.append(min(diag, delete, insert, key=lambda cell: cell[:2]))
        prev = cur
    _, _, s, d, ins = prev[-1]
    return s, d, ins


def _breakdown(s: int, d: int, ins: int, n: int) -> WerBreakdown:
    return WerBreakdown(
        substitutions=s,
        deletions=d,
        insertions=ins,
        n_ref_words=n,
        wer=(s + d + ins) / max(1, n),
        degenerate_reference=n == 0,
    )


def wer(ref: str, hyp: str) -> WerBreakdown:
    """Word error rate of one pair; both sides are normalized first"""
    ref_words = normalize(ref).split()
    hyp_words = normalize(hyp).split()
    s, d, ins = align_counts(ref_words, hyp_words)
    return _breakdown(s, d, ins, len(ref_words))


def corpus_wer(pairs: Sequence[tuple[str, str]], utt_ids: Optional[Sequence[str]] = None) -> CorpusWer:
    """Pooled WER over (ref, hyp) pairs"""
    if not pairs:
        raise ValueError("corpus_wer needs at least one pair")
    if utt_ids is None:
        utt_ids = [str(i) for i in range(len(pairs))]
    if len(utt_ids) != len(pairs):
        raise ValueError(f"{len(utt_ids)} utterance ids for {len(pairs)} pairs")

    utterances = [
        UtteranceWer(utt_id=utt_id, reference=ref, hypothesis=hyp, breakdown=wer(ref, hyp))
        for utt_id, (ref, hyp) in zip(utt_ids, pairs)
    ]
    s = sum(u.breakdown.substitutions for u in utterances)
    d = sum(u.breakdown.deletions for u in utterances)
    ins = sum(u.breakdown.insertions for u in utterances)
    n = sum(u.breakdown.n_ref_words for u in utterances)
    if n == 0:
        raise ValueError("all references are empty after normalization")
    pooled = _breakdown(s, d, ins, n)
    version, _ = load_rules()
    return CorpusWer(
        **pooled.model_dump(),
        normalizer_version=version,
        n_utterances=len(utterances),
        utterances=utterances,
    )


def relative_change(base: float, new: float) -> float:
    """(new - base) / base, e.g. the WER increase of a compressed model"""
    if base == 0:
        raise ValueError("relative change undefined for a zero baseline")
    return (new - base) / base


def wer_by_duration(
    records: Iterable[tuple[float, str, str]],
    edges: Sequence[float],
) -> list[DurationBucket]:
    """Pooled WER per [edges[i], edges[i+1]) duration bucket"""
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must be at least two strictly increasing values")
    totals = [[0, 0, 0] for _ in range(len(edges) - 1)]  # n_utts, errors, n_words
    for duration_s, ref, hyp in records:
        for idx, (lo, hi) in enumerate(zip(edges, edges[1:])):
            if lo <= duration_s < hi:
                result = wer(ref, hyp)
                totals[idx][0] += 1
                totals[idx][1] += result.errors
                totals[idx][2] += result.n_ref_words
                break
    return [
        DurationBucket(
            lo_s=lo,
            hi_s=hi,
            n_utterances=n_utts,
            n_ref_words=n_words,
            wer=errors / n_words if n_words else None,
        )
        for (lo, hi), (n_utts, errors, n_words) in zip(zip(edges, edges[1:]), totals)
    ]


def read_tsv(path: PathLike) -> dict[str, str]:
    """Two-column TSV: utterance id, text (text may be empty)"""
    texts: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            utt_id, _, text = line.partition("\t")
            if utt_id in texts:
                raise ValueError(f"{path}:{line_no}: duplicate utterance id {utt_id}")
            texts[utt_id] = text
    return texts


def read_pairs_jsonl(path: PathLike) -> list[tuple[str, str, str]]:
    """JSON-lines with utt_id, ref and hyp keys"""
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                pairs.append((str(row["utt_id"]), row["ref"], row["hyp"]))
            except (json.JSONDecodeError, KeyError) as e:
                raise ValueError(f"{path}:{line_no}: bad pair record: {e}") from e
    return pairs


def pair_by_id(refs: dict[str, str], hyps: dict[str, str]) -> list[tuple[str, str, str]]:
    """Join refs and hyps on utterance id; a missing hypothesis scores as empty"""
    missing = [u for u in refs if u not in hyps]
    extra = [u for u in hyps if u not in refs]
    if missing:
        logger.warning(f"{len(missing)} references have no hypothesis; scored as empty")
    if extra:
        logger.warning(f"{len(extra)} hypotheses have no reference; ignored")
    return [(u, refs[u], hyps.get(u, "")) for u in refs]


def write_summary_json(result: CorpusWer, path: PathLike) -> None:
    Path(path).write_text(result.model_dump_json(indent=2, exclude={"utterances"}), encoding="utf-8")


def write_utterances_csv(result: CorpusWer, path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["utt_id", "substitutions", "deletions", "insertions", "n_ref_words", "wer"])
        for u in result.utterances:
            b = u.breakdown
            writer.writerow([u.utt_id, b.substitutions, b.deletions, b.insertions, b.n_ref_words, f"{b.wer:.6f}"])
