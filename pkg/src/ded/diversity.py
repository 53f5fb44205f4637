"""Pairwise edit distances within a question and farthest-point selection.

Two independent engines compute the Levenshtein distance: a bit-parallel
scanner for exact distances, and a banded dynamic program that touches only
cells within a diagonal band of width 2*cap+1 and reports "at least cap"
for anything farther. Selection is greedy max-min dispersion, deterministic
under explicit tie-breaks.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .filtering import THINK_CLOSE, THINK_OPEN
from .records import TrajectoryRecord

_INF = np.int64(2 ** 31)


class DiversityError(ValueError):
    pass


def _strip_common(a: Sequence, b: Sequence) -> tuple[Sequence, Sequence]:
    """Drop the shared prefix and suffix; neither affects the distance."""
    lo = 0
    hi_a, hi_b = len(a), len(b)
    while lo < hi_a and lo < hi_b and a[lo] == b[lo]:
        lo += 1
    while hi_a > lo and hi_b > lo and a[hi_a - 1] == b[hi_b - 1]:
        hi_a -= 1
        hi_b -= 1
    return a[lo:hi_a], b[lo:hi_b]


def _myers_distance(a: Sequence, b: Sequence) -> int:
    # Bit-parallel column scanner; one arbitrary-precision word spans all of a.
    m = len(a)
    full = (1 << m) - 1
    top = 1 << (m - 1)
    peq: dict[Any, int] = {}
    for i, ch in enumerate(a):
        peq[ch] = peq.get(ch, 0) | (1 << i)
    vp, vn, score = full, 0, m
    get = peq.get
    for ch in b:
        eq = get(ch, 0)
        xv = eq | vn
        xh = (((eq & vp) + vp) ^ vp) | eq
        ph = vn | (~(xh | vp) & full)
        mh = vp & xh
        if ph & top:
            score += 1
        if mh & top:
            score -= 1
        ph = ((ph << 1) | 1) & full
        mh = (mh << 1) & full
        vp = mh | (~(xv | ph) & full)
        vn = ph & xv
    return score


def levenshtein(a: str | Sequence, b: str | Sequence) -> int:
    """Unit-cost edit distance between two sequences (characters or tokens)."""
    a, b = _strip_common(a, b)
    if not a:
        return len(b)
    if not b:
        return len(a)
    if len(a) > len(b):
        a, b = b, a
    return _myers_distance(a, b)


def _codes(seq: Sequence, vocab: dict[Any, int] | None = None) -> np.ndarray:
    if isinstance(seq, str):
        return np.frombuffer(seq.encode("utf-32-le"), dtype=np.uint32).astype(np.int64)
    if vocab is None:
        vocab = {}
    out = np.empty(len(seq), dtype=np.int64)
    for i, tok in enumerate(seq):
        out[i] = vocab.setdefault(tok, len(vocab))
    return out


def levenshtein_bounded(a: str | Sequence, b: str | Sequence,
                        cap: int | float) -> int | None:
    """Exact distance when it is below cap, else None meaning "at least cap".

    Uses a banded dynamic program over the diagonals j - i in [-cap, cap],
    so the work per row is proportional to the band width rather than to
    the sequence length. cap may be math.inf for a full-width band.
    """
    if cap < 0:
        raise DiversityError("cap must be >= 0")
    a, b = _strip_common(a, b)
    m, n = len(a), len(b)
    if abs(m - n) >= cap:
        return None
    if m == 0 or n == 0:
        d = max(m, n)
        return d if d < cap else None

    finite = math.isfinite(cap)
    k = min(int(cap), max(m, n)) if finite else max(m, n)
    width = 2 * k + 1

    vocab: dict[Any, int] = {}
    acode = _codes(a, vocab)
    bcode = _codes(b, vocab)
    # bpad[k + 1 + t] holds b[t]; out-of-range window slots read a -1 filler.
    bpad = np.full(max(m, n) + 2 * k + 2, -1, dtype=np.int64)
    bpad[k + 1:k + 1 + n] = bcode

    offs = np.arange(width, dtype=np.int64)
    prev = np.full(width, _INF, dtype=np.int64)
    js0 = offs - k
    base = (js0 >= 0) & (js0 <= n)
    prev[base] = js0[base]
    cur = np.empty(width, dtype=np.int64)
    shifted = np.empty(width, dtype=np.int64)

    for i in range(1, m + 1):
        # diagonal slot d maps to column j = i + d - k
        win = bpad[i:i + width]
        eq = (win != acode[i - 1])
        np.add(prev, eq, out=cur)
        shifted[:-1] = prev[1:]
        shifted[-1] = _INF
        np.minimum(cur, shifted + 1, out=cur)
        # in-row insertions: min-plus prefix scan along the band
        t = cur - offs
        np.minimum.accumulate(t, out=t)
        np.minimum(cur, t + offs, out=cur)
        lo = k - i            # slots with j < 0
        if lo > 0:
            cur[:lo] = _INF
        hi = n - i + k        # last slot with j <= n
        if hi < width - 1:
            cur[hi + 1:] = _INF
        if finite and int(cur.min()) >= cap:
            return None
        prev, cur = cur, prev

    d = int(prev[n - m + k])
    return d if d < cap else None


def clamped_distance(a: str | Sequence, b: str | Sequence,
                     cap: int | None, engine: str = "auto") -> int:
    """min(levenshtein(a, b), cap): the truncated metric used for selection.

    A pair at or beyond the cap is treated as maximally distant. The banded
    engine and the full engine give identical results here; "auto" picks by
    a cost model (the band only wins once it is much narrower than the
    sequences).
    """
    if cap is None:
        return levenshtein(a, b)
    if cap <= 0:
        return 0
    if abs(len(a) - len(b)) >= cap:
        return cap
    if engine == "auto":
        short = min(len(a), len(b))
        engine = "banded" if short >= 16384 and cap <= short // 16 else "full"
    if engine == "banded":
        d = levenshtein_bounded(a, b, cap)
        return cap if d is None else d
    if engine == "full":
        return min(levenshtein(a, b), cap)
    raise DiversityError(f"unknown engine {engine!r}")


@dataclass
class DistanceMatrix:
    """Symmetric pairwise distances for one question's trajectories."""

    ids: list[str]
    distances: np.ndarray
    cap: int | None = None

    def validate(self) -> None:
        n = len(self.ids)
        if self.distances.shape != (n, n):
            raise DiversityError(f"distance matrix shape {self.distances.shape} != ({n}, {n})")
        if (self.distances < 0).any():
            raise DiversityError("distances must be non-negative")
        if (np.diag(self.distances) != 0).any():
            raise DiversityError("diagonal must be zero")
        if (self.distances != self.distances.T).any():
            raise DiversityError("matrix must be symmetric")

    def check_triangle(self) -> None:
        d = self.distances
        n = len(self.ids)
        for j in range(n):
            if (d > d[:, j, None] + d[None, j, :]).any():
                raise DiversityError("triangle inequality violated")

    def to_dict(self) -> dict[str, Any]:
        return {"ids": list(self.ids), "distances": self.distances.tolist(),
                "cap": self.cap}


def trajectory_surface(text: str, unit: str = "char") -> str | list[str]:
    """Comparison surface: the think delimiters themselves carry no signal.

    In token mode the delimiters act as separators so they never fuse the
    think segment's last token with the answer's first.
    """
    if unit == "char":
        return text.replace(THINK_OPEN, "").replace(THINK_CLOSE, "")
    if unit == "token":
        return text.replace(THINK_OPEN, " ").replace(THINK_CLOSE, " ").split()
    raise DiversityError(f"unknown unit {unit!r}; expected char or token")


def pairwise_distances(trajectories: Sequence[TrajectoryRecord],
                       unit: str = "char",
                       cap: int | None = None,
                       engine: str = "auto") -> DistanceMatrix:
    """Full symmetric distance matrix over one question's trajectories."""
    if not trajectories:
        raise DiversityError("at least one trajectory required")
    qids = {t.question_id for t in trajectories}
    if len(qids) > 1:
        raise DiversityError(f"mixed question_ids in one distance matrix: {sorted(qids)}")
    ordered = sorted(trajectories, key=lambda t: t.trajectory_id)
    ids = [t.trajectory_id for t in ordered]
    surfaces = [trajectory_surface(t.text, unit) for t in ordered]
    return surface_distances(ids, surfaces, cap=cap, engine=engine)


def surface_distances(ids: Sequence[str], surfaces: Sequence,
                      cap: int | None = None, engine: str = "auto") -> DistanceMatrix:
    n = len(ids)
    dist = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            d = clamped_distance(surfaces[i], surfaces[j], cap, engine)
            dist[i, j] = dist[j, i] = d
    return DistanceMatrix(ids=list(ids), distances=dist, cap=cap)


def select_farthest(matrix: DistanceMatrix, p: int) -> list[str]:
    """Greedy max-min dispersion: seed with the farthest pair, then grow.

    Ties break toward the lexicographically smallest pair and then the
    smallest id, making the selection fully deterministic.
    """
    if p < 1:
        raise DiversityError("p must be >= 1")
    n = len(matrix.ids)
    if p >= n:
        return sorted(matrix.ids)

    order = sorted(range(n), key=lambda i: matrix.ids[i])
    d = matrix.distances
    best_pair: tuple[int, int] | None = None
    best_val = -1
    for oi in range(n):
        for oj in range(oi + 1, n):
            i, j = order[oi], order[oj]
            val = int(d[i, j])
            if val > best_val:
                best_val = val
                best_pair = (i, j)
    assert best_pair is not None
    i, j = best_pair
    if p == 1:
        return [matrix.ids[i]]

    selected = [i, j]
    chosen = {i, j}
    min_dist = np.minimum(d[i], d[j])
    while len(selected) < p:
        best_idx = -1
        best_min = -1
        for oi in range(n):
            c = order[oi]
            if c in chosen:
                continue
            val = int(min_dist[c])
            if val > best_min:
                best_min = val
                best_idx = c
        selected.append(best_idx)
        chosen.add(best_idx)
        np.minimum(min_dist, d[best_idx], out=min_dist)
    return [matrix.ids[k] for k in selected]


def _select_for_question(args: tuple) -> tuple[str, list[str], dict[str, Any]]:
    qid, ids, surfaces, p, cap, engine = args
    matrix = surface_distances(ids, surfaces, cap=cap, engine=engine)
    chosen = select_farthest(matrix, p)
    idx = {tid: k for k, tid in enumerate(matrix.ids)}
    pair_dists = sorted(
        int(matrix.distances[idx[x], idx[y]])
        for a_i, x in enumerate(chosen) for y in chosen[a_i + 1:])
    row: dict[str, Any] = {
        "available": len(ids),
        "selected": list(chosen),
        "cap": cap,
        "min_distance": pair_dists[0] if pair_dists else None,
        "median_distance": pair_dists[(len(pair_dists) - 1) // 2] if pair_dists else None,
    }
    return qid, chosen, row


def diversify_corpus(trajectories: Sequence[TrajectoryRecord],
                     p: int,
                     unit: str = "char",
                     cap_ratio: float | None = 0.6,
                     questions: Sequence | None = None,
                     engine: str = "auto",
                     workers: int = 1) -> tuple[list[TrajectoryRecord], dict[str, Any]]:
    """Keep the farthest p trajectories per question.

    Returns the diversified corpus sorted by (question_id, trajectory_id)
    and a report with per-question selection stats. Questions with no
    surviving trajectory are recorded as dropped.
    """
    if p < 1:
        raise DiversityError("p must be >= 1")
    if cap_ratio is not None and not (0 < cap_ratio <= 1):
        raise DiversityError("cap_ratio must be in (0, 1]")

    groups: dict[str, list[TrajectoryRecord]] = {}
    for t in trajectories:
        groups.setdefault(t.question_id, []).append(t)

    tasks = []
    for qid in sorted(groups):
        members = sorted(groups[qid], key=lambda t: t.trajectory_id)
        ids = [t.trajectory_id for t in members]
        surfaces = [trajectory_surface(t.text, unit) for t in members]
        cap = None
        if cap_ratio is not None:
            longest = max((len(s) for s in surfaces), default=0)
            cap = max(1, math.ceil(cap_ratio * longest))
        tasks.append((qid, ids, surfaces, p, cap, engine))

    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_select_for_question, tasks, chunksize=4))
    else:
        outcomes = [_select_for_question(task) for task in tasks]

    by_id = {t.trajectory_id: t for t in trajectories}
    selected: list[TrajectoryRecord] = []
    per_question: dict[str, Any] = {}
    for qid, chosen, row in outcomes:
        per_question[qid] = row
        selected.extend(by_id[tid] for tid in chosen)
    selected.sort(key=lambda t: (t.question_id, t.trajectory_id))

    dropped = []
    if questions is not None:
        dropped = sorted(q.question_id for q in questions if q.question_id not in groups)

    report = {
        "p": p,
        "unit": unit,
        "cap_ratio": cap_ratio,
        "question_count": len(groups),
        "selected_count": len(selected),
        "dropped_questions": dropped,
        "per_question": per_question,
    }
    return selected, report
