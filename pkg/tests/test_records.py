from __future__ import annotations

import json

import pytest

from ded.records import (CorpusError, CorpusManifest, EmbeddingRecord, LogprobRecord,
                         PassRateStats, ScoreRecord, VerificationVerdict, content_hash,
                         lineage_chain, load_manifest, parse_corpus, save_manifest,
                         write_corpus, write_manifest)

from conftest import make_question, make_trajectory, well_formed_text


def _write_lines(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def test_parse_trajectories_round_trip(tmp_path):
    q = make_question(1)
    records = [make_trajectory(q, j, well_formed_text(q, j)) for j in range(3)]
    records[1].extra["custom_field"] = {"nested": [1, 2]}
    path = tmp_path / "traj.jsonl"
    write_corpus(path, records)
    parsed = parse_corpus(path, "trajectories")
    assert parsed == records
    assert parsed[1].extra["custom_field"] == {"nested": [1, 2]}


def test_parse_reports_line_number_and_offset(tmp_path):
    q = make_question(1)
    good = json.dumps(make_trajectory(q, 0, well_formed_text(q, 0)).to_dict())
    path = tmp_path / "bad.jsonl"
    path.write_text(good + "\n{\n", encoding="utf-8")
    with pytest.raises(CorpusError) as err:
        parse_corpus(path, "trajectories")
    assert "line 2" in str(err.value)
    assert err.value.line == 2
    assert err.value.offset == len(good.encode()) + 1


def test_parse_duplicate_sample_key_names_both_lines(tmp_path):
    q = make_question(2)
    a = make_trajectory(q, 0, well_formed_text(q, 0))
    b = make_trajectory(q, 0, well_formed_text(q, 1))
    b.trajectory_id = "distinct-id"
    path = tmp_path / "dup.jsonl"
    _write_lines(path, [a.to_dict(), b.to_dict()])
    with pytest.raises(CorpusError) as err:
        parse_corpus(path, "trajectories")
    assert "lines 1 and 2" in str(err.value)


def test_parse_rejects_char_len_mismatch(tmp_path):
    q = make_question(3)
    row = make_trajectory(q, 0, well_formed_text(q, 0)).to_dict()
    row["char_len"] = 1
    path = tmp_path / "chlen.jsonl"
    _write_lines(path, [row])
    with pytest.raises(CorpusError) as err:
        parse_corpus(path, "trajectories")
    assert "char_len" in str(err.value)


def test_parse_questions_rejects_bad_domain(tmp_path):
    row = make_question(0).to_dict()
    row["domain"] = "chemistry"
    path = tmp_path / "q.jsonl"
    _write_lines(path, [row])
    with pytest.raises(CorpusError) as err:
        parse_corpus(path, "questions")
    assert "domain" in str(err.value)


def test_parse_logprobs_validates_mass_and_order(tmp_path):
    path = tmp_path / "lp.jsonl"
    _write_lines(path, [
        {"trajectory_id": "t", "position": 0, "top_k": [["a", 0.6], ["b", 0.4]],
         "residual_mass": 0.0},
    ])
    recs = parse_corpus(path, "logprobs")
    assert recs[0].top_k == [("a", 0.6), ("b", 0.4)]

    _write_lines(path, [
        {"trajectory_id": "t", "position": 0, "top_k": [["a", 0.3], ["b", 0.4]],
         "residual_mass": 0.3},
    ])
    with pytest.raises(CorpusError):
        parse_corpus(path, "logprobs")

    _write_lines(path, [
        {"trajectory_id": "t", "position": 0, "top_k": [["a", 0.5]], "residual_mass": 0.1},
    ])
    with pytest.raises(CorpusError):
        parse_corpus(path, "logprobs")


def test_parse_embeddings_rejects_mixed_dimension(tmp_path):
    path = tmp_path / "emb.jsonl"
    _write_lines(path, [
        {"item_id": "a", "phase": "before", "vector": [1.0, 2.0]},
        {"item_id": "b", "phase": "after", "vector": [1.0, 2.0, 3.0]},
    ])
    with pytest.raises(CorpusError) as err:
        parse_corpus(path, "embeddings")
    assert "dimension" in str(err.value)


def test_round_trip_all_kinds(tmp_path):
    q = make_question(4)
    cases = {
        "questions": [q],
        "trajectories": [make_trajectory(q, 0, well_formed_text(q, 0))],
        "logprobs": [LogprobRecord("t", 0, [("x", 0.9), ("y", 0.05)], 0.05)],
        "embeddings": [EmbeddingRecord("a", "before", [0.5, -1.5])],
        "scores": [ScoreRecord("t1", "s1", "bench", "79.58", 14096.0, "13.95")],
    }
    for kind, records in cases.items():
        path = tmp_path / f"{kind}.jsonl"
        write_corpus(path, records)
        assert parse_corpus(path, kind) == records


def test_verdict_invariants():
    VerificationVerdict("malformed_format", "format").validate()
    with pytest.raises(CorpusError):
        VerificationVerdict("malformed_format", "rule").validate()
    with pytest.raises(CorpusError):
        VerificationVerdict("correct", "format").validate()
    with pytest.raises(CorpusError):
        VerificationVerdict("overlength", "judge").validate()


def test_pass_rate_stats_exactness():
    stats = PassRateStats("q", runs=16, successes=12)
    stats.validate()
    assert stats.pass_rate * 16 == 12
    with pytest.raises(CorpusError):
        PassRateStats("q", runs=16, successes=17).validate()


def test_content_hash_order_insensitive_and_field_sensitive():
    q = make_question(5)
    a = make_trajectory(q, 0, well_formed_text(q, 0))
    b = make_trajectory(q, 1, well_formed_text(q, 1))
    assert content_hash([a, b]) == content_hash([b, a])
    mutated = make_trajectory(q, 1, well_formed_text(q, 1) + " ")
    assert content_hash([a, b]) != content_hash([a, mutated])


def test_write_manifest_counts_and_determinism():
    q = make_question(6)
    trajectories = [make_trajectory(q, j, well_formed_text(q, j)) for j in range(4)]
    raw = write_manifest("raw", [q] + trajectories, config={"seed": 1},
                         created_at="2026-01-01T00:00:00+00:00")
    assert raw.question_count == 1
    assert raw.trajectory_count == 4
    again = write_manifest("raw", [q] + trajectories, config={"seed": 1},
                           created_at="2026-01-01T00:00:00+00:00")
    assert raw.content_hash == again.content_hash
    assert raw.to_dict() == again.to_dict()


def test_write_manifest_empty_set_is_flagged():
    manifest = write_manifest("raw", [], created_at="2026-01-01T00:00:00+00:00")
    assert manifest.question_count == 0
    assert manifest.trajectory_count == 0
    assert "empty record set" in manifest.notes


def test_stage_regression_rejected():
    q = make_question(7)
    raw = write_manifest("raw", [q])
    right = write_manifest("right", [q], parent=raw)
    hard = write_manifest("right_hard", [q], parent=right)
    diverse = write_manifest("right_hard_diverse", [q], parent=hard)
    with pytest.raises(CorpusError):
        write_manifest("right_hard", [q], parent=diverse)
    with pytest.raises(CorpusError):
        write_manifest("raw", [q], parent=raw)
    with pytest.raises(CorpusError):
        write_manifest("right", [q], parent=None)
    # mixed may follow any stage
    write_manifest("mixed", [q], parent=diverse)
    write_manifest("mixed", [q], parent=raw)


def test_manifest_save_load_and_lineage(tmp_path):
    q = make_question(8)
    trajectories = [make_trajectory(q, j, well_formed_text(q, j)) for j in range(3)]
    raw = write_manifest("raw", [q] + trajectories)
    right = write_manifest("right", trajectories, parent=raw)
    hard = write_manifest("right_hard", trajectories[:2], parent=right)
    diverse = write_manifest("right_hard_diverse", trajectories[:1], parent=hard)
    path = tmp_path / "m.json"
    save_manifest(diverse, path)
    loaded = load_manifest(path)
    assert loaded == diverse
    by_hash = {m.content_hash: m for m in (raw, right, hard)}
    chain = lineage_chain(loaded, by_hash)
    assert [m.stage for m in chain] == ["right_hard_diverse", "right_hard", "right", "raw"]
    assert len(chain) <= 4


def test_manifest_from_dict_round_trip():
    m = CorpusManifest(stage="raw", question_count=1, trajectory_count=2,
                       config_snapshot={"seed": 3}, content_hash="abc",
                       parent_manifest=None, created_at="t", notes=[])
    assert CorpusManifest.from_dict(m.to_dict()) == m
