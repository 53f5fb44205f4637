"""Question compression: estimate student pass rates, keep hard questions.

Pass rates come from fresh student rollouts, not from reused teacher
trajectories. The keep boundary is inclusive: a question survives when its
pass rate is at most the threshold, since anything strictly above it is
considered too easy for the student.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

from .clients import Client, JudgeRequest, SamplingRequest, map_concurrent
from .filtering import THINK_CLOSE, extract_final_answer, rule_verify
from .records import PassRateStats, QuestionRecord


class CompressError(ValueError):
    pass


def pass_rate(outcomes: Sequence[bool], runs: int, question_id: str = "") -> PassRateStats:
    """Exact rational success rate over a fixed number of runs."""
    if runs < 1:
        raise CompressError("runs must be >= 1")
    if len(outcomes) != runs:
        raise CompressError(f"expected {runs} outcomes, got {len(outcomes)}")
    stats = PassRateStats(question_id=question_id, runs=runs,
                          successes=sum(1 for o in outcomes if o))
    stats.validate()
    return stats


def _as_fraction(tau: float | Fraction | str) -> Fraction:
    # Going through str keeps decimal thresholds like 0.3 exact.
    if isinstance(tau, Fraction):
        return tau
    return Fraction(str(tau))


@dataclass
class CompressionReport:
    tau: float
    runs: int
    total: int
    retained: int
    filtered_ids: list[str]

    @property
    def retention_ratio(self) -> float:
        return self.retained / self.total if self.total else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {"tau": self.tau, "runs": self.runs, "total": self.total,
                "retained": self.retained, "retention_ratio": self.retention_ratio,
                "filtered_ids": list(self.filtered_ids)}


def select_hard(questions: Sequence[QuestionRecord],
                stats: Sequence[PassRateStats],
                tau: float | Fraction) -> tuple[list[QuestionRecord], CompressionReport]:
    """Retain questions whose pass rate is at most tau, ordered by id."""
    tau_frac = _as_fraction(tau)
    if not (0 <= tau_frac <= 1):
        raise CompressError("tau must be in [0, 1]")
    by_qid = {s.question_id: s for s in stats}
    missing = sorted(q.question_id for q in questions if q.question_id not in by_qid)
    if missing:
        raise CompressError(f"missing pass-rate stats for questions: {missing}")
    runs = {by_qid[q.question_id].runs for q in questions}
    if len(runs) > 1:
        raise CompressError(f"inconsistent runs counts across questions: {sorted(runs)}")

    ordered = sorted(questions, key=lambda q: q.question_id)
    retained = [q for q in ordered if by_qid[q.question_id].pass_rate <= tau_frac]
    filtered = [q.question_id for q in ordered if by_qid[q.question_id].pass_rate > tau_frac]
    report = CompressionReport(tau=float(tau_frac), runs=next(iter(runs)) if runs else 0,
                               total=len(ordered), retained=len(retained),
                               filtered_ids=filtered)
    return retained, report


def response_is_correct(text: str, question: QuestionRecord,
                        client: Client | None = None) -> bool:
    """Correctness path shared with the quality gate.

    Math with ground truth goes through boxed extraction and rule
    verification; everything else is delegated to the judge, and counts as
    a failure when no judge is available or the verdict is not correct.
    """
    if question.domain == "math" and question.ground_truth:
        answer = extract_final_answer(text)
        if answer is None:
            return False
        return rule_verify(answer, question.ground_truth).status == "correct"
    if client is None:
        return False
    idx = text.rfind(THINK_CLOSE)
    candidate = text[idx + len(THINK_CLOSE):].strip() if idx >= 0 else text.strip()
    if not candidate:
        return False
    verdict = client.judge(JudgeRequest(
        question=question.prompt,
        candidate_answer=candidate,
        ground_truth=str(question.ground_truth or "unspecified")))
    return verdict.status == "correct"


class RolloutCheckpoint:
    """Append-only per-question results so interrupted runs resume cheaply."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self.done: dict[str, PassRateStats] = {}
        if self.path and self.path.exists():
            with open(self.path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        stats = PassRateStats.from_dict(json.loads(line))
                        self.done[stats.question_id] = stats

    def record(self, stats: PassRateStats) -> None:
        with self._lock:
            self.done[stats.question_id] = stats
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                    fh.write(json.dumps(stats.to_dict(), sort_keys=True) + "\n")


def student_rollout(questions: Sequence[QuestionRecord],
                    client: Client,
                    runs: int = 16,
                    student_id: str = "student",
                    temperature: float = 0.7,
                    seed: int | None = None,
                    checkpoint: str | Path | RolloutCheckpoint | None = None,
                    max_in_flight: int = 1) -> list[PassRateStats]:
    """Sample the student on every question and verify each response.

    Each question gets `runs` independent samples in one batched request;
    results are checkpointed per question, and already-checkpointed
    questions are skipped on resume.
    """
    if runs < 1:
        raise CompressError("runs must be >= 1")
    ckpt = checkpoint if isinstance(checkpoint, RolloutCheckpoint) else RolloutCheckpoint(checkpoint)
    pending = [q for q in questions if q.question_id not in ckpt.done]

    def roll(question: QuestionRecord) -> PassRateStats:
        responses = client.sample_trajectories(SamplingRequest(
            prompt=question.prompt, teacher_id=student_id, samples=runs,
            temperature=temperature, seed=seed))
        outcomes = [response_is_correct(r, question, client) for r in responses]
        stats = pass_rate(outcomes, runs, question_id=question.question_id)
        ckpt.record(stats)
        return stats

    map_concurrent(roll, pending, max_in_flight=max_in_flight)
    ordered = sorted(questions, key=lambda q: q.question_id)
    return [ckpt.done[q.question_id] for q in ordered]
