"""
Corpus filter tests
Tests the discard stage, F1 (reference-model WER), F2 (word count), F3 packing and data versions
"""

import numpy as np
import pytest
from pydantic import ValidationError

from src.audio_frontend import save_wav
from src.corpus_filter import (
    FilterConfig,
    UtteranceRecord,
    attach_ref_hyps,
    discard_long_and_empty,
    filter_f1,
    filter_f2,
    pack_f3,
    read_manifest,
    run_pipeline,
    validate_manifest,
    write_manifest,
)
from src.errors import FilterInputError
from src.synthetic import noise_clip, speech_like_clip


def print_section(title: str):
    """Print a test section header"""
    print(f"\n{'='*70}")
    print(f"  {title}")
    print(f"{'='*70}\n")


def rec(utt_id, duration_s, order_index=0, session="s1", split="train", transcript="one two three four",
        ref_hyp=None, stnr_db=20.0, audio_path=""):
    return UtteranceRecord(
        utt_id=utt_id,
        session_id=session,
        split=split,
        audio_path=audio_path or f"{utt_id}.wav",
        transcript=transcript,
        duration_s=duration_s,
        ref_hyp=ref_hyp,
        order_index=order_index,
        stnr_db=stnr_db,
    )


def session(durations, session_id="s1", split="train"):
    return [rec(f"{session_id}_{i}", d, i, session_id, split) for i, d in enumerate(durations)]


CFG = FilterConfig(check_silence=False)


# --- discard stage ----------------------------------------------------------

def test_long_utterances_dropped_from_train_and_dev_only():
    manifest = [rec("a", 31.0), rec("b", 31.0, split="dev"), rec("c", 31.0, split="test"), rec("d", 30.0)]
    kept, discards = discard_long_and_empty(manifest, CFG)
    assert [r.utt_id for r in kept] == ["c", "d"]
    assert {d.utt_id for d in discards} == {"a", "b"}


def test_silent_utterances_dropped_everywhere():
    manifest = [rec("quiet", 5.0, stnr_db=1.0), rec("loud", 5.0, 1, stnr_db=25.0), rec("t", 5.0, split="test", stnr_db=0.5)]
    kept, discards = discard_long_and_empty(manifest, FilterConfig())
    assert [r.utt_id for r in kept] == ["loud"]
    assert all(d.stage == "discard" for d in discards)


def test_silence_check_reads_audio(tmp_path):
    speech = tmp_path / "speech.wav"
    noise = tmp_path / "noise.wav"
    save_wav(speech, speech_like_clip())
    save_wav(noise, noise_clip(4.0, rms_db=-35.0, seed=2))
    manifest = [
        rec("speech", 10.0, 0, stnr_db=None, audio_path=str(speech)),
        rec("noise", 4.0, 1, stnr_db=None, audio_path=str(noise)),
        rec("missing", 4.0, 2, stnr_db=None, audio_path=str(tmp_path / "gone.wav")),
    ]
    kept, discards = discard_long_and_empty(manifest, FilterConfig())
    assert [r.utt_id for r in kept] == ["speech"]
    reasons = {d.utt_id: d.reason for d in discards}
    assert "silent" in reasons["noise"]
    assert "gone.wav" in reasons["missing"]


# --- F1 / F2 ---------------------------------------------------------------

def test_f1_threshold_is_strict():
    manifest = [
        rec("exact", 5.0, 0, transcript="a b c d", ref_hyp="a b x y"),  # wer 0.5, kept
        rec("worse", 5.0, 1, transcript="a b c d", ref_hyp="a x y z"),  # wer 0.75
        rec("clean", 5.0, 2, transcript="Hello, world", ref_hyp="hello world"),
    ]
    kept, discards = filter_f1(manifest, CFG)
    assert [r.utt_id for r in kept] == ["exact", "clean"]
    assert discards[0].utt_id == "worse"
    assert discards[0].stage == "F1"


def test_f1_just_over_threshold_is_dropped():
    reference = " ".join(f"w{i}" for i in range(100))
    hypothesis = " ".join(f"x{i}" if i < 51 else f"w{i}" for i in range(100))
    kept, discards = filter_f1([rec("u", 5.0, transcript=reference, ref_hyp=hypothesis)], CFG)
    assert kept == []
    assert discards[0].utt_id == "u"


def test_f1_requires_reference_hypotheses():
    with pytest.raises(FilterInputError):
        filter_f1([rec("a", 5.0)], CFG)


def test_f2_counts_normalized_words():
    manifest = [
        rec("short", 5.0, 0, transcript="[noise] hi there"),
        rec("ok", 5.0, 1, transcript="gonna go"),  # "going to go"
        rec("long", 5.0, 2, transcript="one two three"),
    ]
    kept, discards = filter_f2(manifest, CFG)
    assert [r.utt_id for r in kept] == ["ok", "long"]
    assert discards[0].reason == "2 words < 3"


def test_f1_and_f2_commute():
    rng = np.random.default_rng(11)
    vocab = ["a", "b", "c", "d", "e"]
    manifest = []
    for i in range(500):
        words = list(rng.choice(vocab, size=rng.integers(1, 7)))
        hyp = [w if rng.random() < 0.6 else str(rng.choice(vocab)) for w in words]
        hyp = hyp[: rng.integers(0, len(hyp) + 1)]
        manifest.append(rec(f"u{i}", 5.0, i, transcript=" ".join(words), ref_hyp=" ".join(hyp)))
    f1_first, _ = filter_f2(filter_f1(manifest, CFG)[0], CFG)
    f2_first, _ = filter_f1(filter_f2(manifest, CFG)[0], CFG)
    assert [r.utt_id for r in f1_first] == [r.utt_id for r in f2_first]
    assert 0 < len(f1_first) < len(manifest)


# --- F3 ---------------------------------------------------------------------

def test_f3_packing_example():
    packed, discards = pack_f3(session([10, 12, 6, 20, 9]), CFG)
    assert [r.duration_s for r in packed] == [28, 29]
    assert packed[0].utt_id == "s1_0+s1_1+s1_2"
    assert packed[0].source_utt_ids == ["s1_0", "s1_1", "s1_2"]
    assert packed[0].segment_paths == ["s1_0.wav", "s1_1.wav", "s1_2.wav"]
    assert packed[0].transcript == "one two three four one two three four one two three four"
    assert discards == []


def test_f3_passes_full_length_and_drops_short_tail():
    packed, _ = pack_f3(session([26]), CFG)
    assert [r.utt_id for r in packed] == ["s1_0"]
    packed, discards = pack_f3(session([10, 10]), CFG)
    assert packed == []
    assert [d.utt_id for d in discards] == ["s1_0", "s1_1"]
    assert all(d.stage == "F3" for d in discards)


def test_f3_never_reorders_or_crosses_sessions():
    manifest = list(reversed(session([12, 14], "s1"))) + session([20, 9], "s2")
    packed, discards = pack_f3(manifest, CFG)
    assert [r.utt_id for r in packed] == ["s1_0+s1_1", "s2_0+s2_1"]
    for r in packed:
        assert 25 <= r.duration_s <= 30
    assert discards == []


def test_f3_random_sessions_stay_in_window():
    rng = np.random.default_rng(7)
    manifest = []
    for s in range(1000):
        durations = rng.uniform(0.5, 30.0, size=rng.integers(1, 12)).round(2)
        manifest.extend(session(list(durations), f"s{s}"))
    result = run_pipeline(manifest, FilterConfig.for_version("C", check_silence=False))
    for r in result.manifest:
        assert 25.0 <= r.duration_s <= 30.0
        assert len({u.split("_")[0] for u in r.source_utt_ids or [r.utt_id]}) == 1
    hours = [stage.splits["train"].hours for stage in result.report.stages]
    assert hours == sorted(hours, reverse=True)
    packed_ids = {u for r in result.manifest for u in (r.source_utt_ids or [r.utt_id])}
    discarded_ids = {d.utt_id for d in result.report.discards}
    assert packed_ids | discarded_ids == {r.utt_id for r in manifest}
    assert not packed_ids & discarded_ids


def test_f3_leaves_test_split_alone():
    manifest = session([5, 5], "t", split="test")
    packed, discards = pack_f3(manifest, CFG)
    assert packed == manifest
    assert discards == []


def test_f3_group_that_would_overflow_is_dropped():
    # 20 + 12 > 30, so the 20 s group cannot grow and is discarded
    packed, discards = pack_f3(session([20, 12, 14]), CFG)
    assert [r.utt_id for r in packed] == ["s1_1+s1_2"]
    assert [d.utt_id for d in discards] == ["s1_0"]


# --- pipeline ---------------------------------------------------------------

def test_versions_select_stages():
    assert [FilterConfig.for_version(v).apply_f3 for v in "ABCD"] == [False, False, True, True]
    assert [FilterConfig.for_version(v).apply_f1 for v in "ABCD"] == [False, True, False, True]
    with pytest.raises(ValueError):
        FilterConfig.for_version("E")
    with pytest.raises(ValidationError):
        FilterConfig(pack_min_s=31.0)


def test_pipeline_version_d():
    manifest = [
        rec("a", 10.0, 0, ref_hyp="one two three four"),
        rec("bad", 10.0, 1, ref_hyp="something else entirely"),
        rec("b", 12.0, 2, ref_hyp="one two three four"),
        rec("few", 3.0, 3, transcript="hi", ref_hyp="hi"),
        rec("c", 6.0, 4, ref_hyp="one two three four"),
        rec("t", 4.0, 0, split="test", ref_hyp="one two three four"),
    ]
    result = run_pipeline(manifest, FilterConfig.for_version("D"))
    assert [r.utt_id for r in result.manifest] == ["t", "a+b+c"]
    assert [s.stage for s in result.report.stages] == ["input", "discard", "F1", "F2", "F3"]
    stages = {d.utt_id: d.stage for d in result.report.discards}
    assert stages == {"bad": "F1", "few": "F2"}
    assert result.report.stages[-1].splits["train"].count == 1
    assert result.report.stages[0].splits["train"].hours == pytest.approx(41.0 / 3600)
    assert "F3" in result.report.to_table()


def test_pipeline_version_a_keeps_everything_short():
    manifest = session([5, 6, 7])
    result = run_pipeline(manifest, FilterConfig.for_version("A"))
    assert result.manifest == manifest
    assert [s.stage for s in result.report.stages] == ["input", "discard"]


def test_manifest_validation():
    with pytest.raises(FilterInputError):
        validate_manifest([rec("a", 1.0), rec("a", 1.0, 1)])
    with pytest.raises(FilterInputError):
        validate_manifest([rec("a", 1.0), rec("b", 1.0)])
    with pytest.raises(ValidationError):
        rec("a", 0.0)


def test_manifest_files(tmp_path):
    path = tmp_path / "m.jsonl"
    write_manifest(session([10, 12]), path)
    loaded = read_manifest(path)
    assert [r.utt_id for r in loaded] == ["s1_0", "s1_1"]
    with_hyps = attach_ref_hyps(loaded, {"s1_1": "hyp"})
    assert [r.ref_hyp for r in with_hyps] == [None, "hyp"]

    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"utt_id": "x"}\n', encoding="utf-8")
    with pytest.raises(FilterInputError):
        read_manifest(bad)


if __name__ == "__main__":
    print_section("CORPUS FILTER TESTS")
    test_f1_threshold_is_strict()
    test_f1_and_f2_commute()
    test_f3_packing_example()
    test_f3_passes_full_length_and_drops_short_tail()
    test_pipeline_version_d()
    print("✅ Corpus filter tests passed")
