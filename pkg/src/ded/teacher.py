"""Teacher smoke tests and ranking by distilled-student improvement.

The expensive fine-tuning step between corpus construction and scoring is
external by design: this module emits per-teacher smoke corpora plus a
training manifest, and later ingests a score file to rank the candidates
by how much each one improved the student, not by the teacher's own
benchmark numbers.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

from .clients import Client, SamplingRequest
from .filtering import FilterConfig, GateResult, run_quality_gate
from .records import (CorpusManifest, QuestionRecord, ScoreRecord, TrajectoryRecord,
                      write_corpus, write_manifest)

# Echoed into every training manifest so the external fine-tuning step and
# the corpus stay in one auditable bundle.
TRAINING_HYPERPARAMETERS = {
    "context_window": 16384,
    "batch_size": 48,
    "learning_rate": 1e-5,
    "optimizer": "adamw",
    "epochs": 10,
}


class TeacherSelectError(ValueError):
    pass


@dataclass
class SmokeCorpus:
    teacher_id: str
    gate: GateResult
    manifest: CorpusManifest
    dropped_questions: list[str]


def build_smoke_corpus(questions: Sequence[QuestionRecord],
                       teacher_ids: Sequence[str],
                       client: Client,
                       filter_config: FilterConfig | None = None,
                       temperature: float = 0.7,
                       seed: int | None = None,
                       created_at: str | None = None,
                       out_dir: str | Path | None = None) -> dict[str, SmokeCorpus]:
    """One trajectory per question per teacher, passed through the gate.

    When out_dir is given, each teacher gets a corpus file, a manifest, and
    a training manifest listing the files and fine-tuning hyperparameters.
    """
    filter_config = filter_config or FilterConfig()
    results: dict[str, SmokeCorpus] = {}
    for teacher_id in teacher_ids:
        trajectories: list[TrajectoryRecord] = []
        for q in sorted(questions, key=lambda q: q.question_id):
            texts = client.sample_trajectories(SamplingRequest(
                prompt=q.prompt, teacher_id=teacher_id, samples=1,
                temperature=temperature, seed=seed))
            trajectories.append(TrajectoryRecord(
                trajectory_id=f"{q.question_id}:{teacher_id}:000",
                question_id=q.question_id,
                teacher_id=teacher_id,
                sample_index=0,
                text=texts[0],
            ))
        gate = run_quality_gate(trajectories, questions, filter_config)
        kept_qids = {t.question_id for t in gate.kept}
        dropped = sorted(q.question_id for q in questions if q.question_id not in kept_qids)
        config_snapshot = {
            "smoke_test": True,
            "teacher_id": teacher_id,
            "samples_per_question": 1,
            "temperature": temperature,
            "seed": seed,
            "max_token_len": filter_config.max_token_len,
        }
        raw_manifest = write_manifest("raw", list(questions) + trajectories,
                                      config=config_snapshot, created_at=created_at)
        manifest = write_manifest("right", gate.kept, parent=raw_manifest,
                                  config=config_snapshot, created_at=created_at)
        results[teacher_id] = SmokeCorpus(teacher_id=teacher_id, gate=gate,
                                          manifest=manifest, dropped_questions=dropped)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            corpus_path = out / f"smoke_{teacher_id}.jsonl"
            write_corpus(corpus_path, gate.kept)
            training_manifest = {
                "teacher_id": teacher_id,
                "corpus_files": [corpus_path.name],
                "trajectory_count": len(gate.kept),
                "dropped_questions": dropped,
                "hyperparameters": TRAINING_HYPERPARAMETERS,
            }
            with open(out / f"training_{teacher_id}.json", "w", encoding="utf-8",
                      newline="\n") as fh:
                json.dump(training_manifest, fh, indent=2, sort_keys=True)
                fh.write("\n")
    return results


_SCORE_FIELDS = ("teacher_id", "student_id", "benchmark", "acc", "mean_response_len", "base_acc")


def _score_from_row(row: dict[str, Any], where: str) -> ScoreRecord:
    missing = [f for f in _SCORE_FIELDS if row.get(f) in (None, "")]
    if missing:
        raise TeacherSelectError(f"{where}: missing fields {missing}")
    try:
        acc = Decimal(str(row["acc"]))
        base = Decimal(str(row["base_acc"]))
    except InvalidOperation as exc:
        raise TeacherSelectError(f"{where}: bad decimal: {exc}") from exc
    if not (Decimal(0) <= acc <= Decimal(100)):
        raise TeacherSelectError(f"{where}: acc {acc} outside [0, 100]")
    if not (Decimal(0) <= base <= Decimal(100)):
        raise TeacherSelectError(f"{where}: base_acc {base} outside [0, 100]")
    record = ScoreRecord(
        teacher_id=str(row["teacher_id"]),
        student_id=str(row["student_id"]),
        benchmark=str(row["benchmark"]),
        acc=str(acc),
        mean_response_len=float(row["mean_response_len"]),
        delta_acc=str(acc - base),
    )
    record.validate()
    return record


def ingest_scores(path: str | Path) -> list[ScoreRecord]:
    """Load a score file (CSV or JSONL) and compute deltas against the base.

    Accuracies are percentages; delta_acc = acc - base_acc with exact
    decimal arithmetic, so 79.58 - 65.63 really is 13.95.
    """
    path = Path(path)
    if not path.exists():
        raise TeacherSelectError(f"no such score file: {path}")
    records: list[ScoreRecord] = []
    if path.suffix.lower() == ".csv":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for i, row in enumerate(reader, start=2):
                records.append(_score_from_row(row, f"{path.name} line {i}"))
    else:
        with open(path, "r", encoding="utf-8") as fh:
            for i, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                records.append(_score_from_row(json.loads(line), f"{path.name} line {i}"))
    return records


@dataclass
class TeacherRanking:
    teacher_id: str
    score: Fraction
    mean_response_len: float

    def to_dict(self) -> dict[str, Any]:
        return {"teacher_id": self.teacher_id, "score": float(self.score),
                "mean_response_len": self.mean_response_len}


def rank_teachers(records: Sequence[ScoreRecord],
                  weights: dict[str, float | Fraction] | None = None) -> list[TeacherRanking]:
    """Order teachers by weighted mean delta accuracy, descending.

    Ties break toward the smaller mean response length (cheaper student
    inference), then the teacher id. The score matrix must be complete for
    the chosen benchmark set.
    """
    if not records:
        raise TeacherSelectError("no score records")
    teachers = sorted({r.teacher_id for r in records})
    benchmarks = sorted({r.benchmark for r in records})
    if weights is None:
        weights = {b: Fraction(1, len(benchmarks)) for b in benchmarks}
    wsum = sum(Fraction(str(w)) if not isinstance(w, Fraction) else w
               for w in weights.values())
    if abs(wsum - 1) > Fraction(1, 10 ** 9):
        raise TeacherSelectError(f"benchmark weights must sum to 1, got {float(wsum)}")

    cell: dict[tuple[str, str], ScoreRecord] = {}
    for r in records:
        cell[(r.teacher_id, r.benchmark)] = r
    missing = [(t, b) for t in teachers for b in weights if (t, b) not in cell]
    if missing:
        raise TeacherSelectError(f"incomplete score matrix, missing cells: {missing}")

    rankings = []
    for t in teachers:
        score = Fraction(0)
        lens = []
        for b, w in weights.items():
            w = Fraction(str(w)) if not isinstance(w, Fraction) else w
            r = cell[(t, b)]
            score += w * Fraction(Decimal(r.delta_acc))
            lens.append(r.mean_response_len)
        rankings.append(TeacherRanking(teacher_id=t, score=score,
                                       mean_response_len=sum(lens) / len(lens)))
    rankings.sort(key=lambda r: (-r.score, r.mean_response_len, r.teacher_id))
    return rankings
