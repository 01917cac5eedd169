"""Note-level transcription scoring: tolerance matching, F1, aggregation."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .events import ComponentMap, NoteList, remap

DEFAULT_ONSET_TOLERANCE = 0.05
DEFAULT_VELOCITY_TOLERANCE = 0.1

_INF = float("inf")


def _hopcroft_karp(adjacency: list[list[int]], n_right: int) -> list[int]:
    """Maximum bipartite matching; returns match_left (right index or -1)."""
    n_left = len(adjacency)
    match_left = [-1] * n_left
    match_right = [-1] * n_right
    dist = [0.0] * n_left

    def bfs() -> bool:
        queue = deque()
        for u in range(n_left):
            if match_left[u] == -1:
                dist[u] = 0
                queue.append(u)
            else:
                dist[u] = _INF
        found = False
        while queue:
            u = queue.popleft()
            for v in adjacency[u]:
                w = match_right[v]
                if w == -1:
                    found = True
                elif dist[w] == _INF:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return found

    def dfs(u: int) -> bool:
        for v in adjacency[u]:
            w = match_right[v]
            if w == -1 or (dist[w] == dist[u] + 1 and dfs(w)):
                match_left[u] = v
                match_right[v] = u
                return True
        dist[u] = _INF
        return False

    while bfs():
        for u in range(n_left):
            if match_left[u] == -1:
                dfs(u)
    return match_left


@dataclass
class MatchResult:
    """One-to-one onset matching between a reference and an estimate."""

    pairs: list[tuple[int, int]]          # (ref index, est index)
    unmatched_ref: list[int]
    unmatched_est: list[int]


def match_notes(ref: NoteList, est: NoteList, tolerance: float = DEFAULT_ONSET_TOLERANCE) -> MatchResult:
    """Maximum-cardinality matching of same-component notes within tolerance."""
    if tolerance <= 0:
        raise ValueError(f"tolerance must be positive, got {tolerance}")
    ref_notes = list(ref)
    est_notes = list(est)
    adjacency: list[list[int]] = []
    for r in ref_notes:
        edges = [j for j, e in enumerate(est_notes)
                 if e.component == r.component and abs(e.time - r.time) <= tolerance]
        adjacency.append(edges)
    match_left = _hopcroft_karp(adjacency, len(est_notes))
    pairs = [(i, j) for i, j in enumerate(match_left) if j != -1]
    matched_est = {j for _, j in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_ref=[i for i, j in enumerate(match_left) if j == -1],
        unmatched_est=[j for j in range(len(est_notes)) if j not in matched_est],
    )


@dataclass
class Scores:
    tp: int
    fp: int
    fn: int
    per_component: dict[int, "Scores"] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if p + r else 0.0


def _count_by_component(ref: NoteList, est: NoteList,
                        matched_pairs: Sequence[tuple[int, int]]) -> Scores:
    ref_notes = list(ref)
    est_notes = list(est)
    components = {n.component for n in ref_notes} | {n.component for n in est_notes}
    matched_ref = {i for i, _ in matched_pairs}
    matched_est = {j for _, j in matched_pairs}
    per_component = {}
    for comp in sorted(components):
        tp = sum(1 for i, _ in matched_pairs if ref_notes[i].component == comp)
        fn = sum(1 for i, n in enumerate(ref_notes)
                 if n.component == comp and i not in matched_ref)
        fp = sum(1 for j, n in enumerate(est_notes)
                 if n.component == comp and j not in matched_est)
        per_component[comp] = Scores(tp=tp, fp=fp, fn=fn)
    total = Scores(
        tp=len(matched_pairs),
        fp=len(est_notes) - len(matched_est),
        fn=len(ref_notes) - len(matched_ref),
        per_component=per_component,
    )
    return total


def onset_scores(ref: NoteList, est: NoteList,
                 tolerance: float = DEFAULT_ONSET_TOLERANCE) -> Scores:
    """Note-wise onset precision/recall/F1, overall and per component."""
    result = match_notes(ref, est, tolerance)
    return _count_by_component(ref, est, result.pairs)


def velocity_scores(ref: NoteList, est: NoteList,
                    tolerance: float = DEFAULT_ONSET_TOLERANCE,
                    vel_tolerance: float = DEFAULT_VELOCITY_TOLERANCE,
                    rescale: bool = True) -> Scores:
    """Onset matching plus a velocity validity check on matched pairs.

    Estimated velocities are first rescaled onto the reference by a global
    least-squares factor over matched pairs (the transcription-velocity
    convention); a pair counts as a true positive only if the rescaled
    error is within vel_tolerance * 127.
    """
    result = match_notes(ref, est, tolerance)
    ref_notes = list(ref)
    est_notes = list(est)
    scale = 1.0
    if rescale and result.pairs:
        num = sum(ref_notes[i].velocity * est_notes[j].velocity for i, j in result.pairs)
        den = sum(est_notes[j].velocity ** 2 for i, j in result.pairs)
        if den > 0:
            scale = num / den
    valid_pairs = [
        (i, j) for i, j in result.pairs
        if abs(scale * est_notes[j].velocity - ref_notes[i].velocity) <= vel_tolerance * 127.0
    ]
    return _count_by_component(ref, est, valid_pairs)


def _pool(per_clip: list[Scores]) -> Scores:
    total = Scores(tp=0, fp=0, fn=0)
    for s in per_clip:
        total.tp += s.tp
        total.fp += s.fp
        total.fn += s.fn
        for comp, sub in s.per_component.items():
            agg = total.per_component.setdefault(comp, Scores(tp=0, fp=0, fn=0))
            agg.tp += sub.tp
            agg.fp += sub.fp
            agg.fn += sub.fn
    return total


def evaluate(ref_corpus: Sequence[NoteList], est_corpus: Sequence[NoteList],
             component_map: Optional[ComponentMap] = None,
             tolerance: float = DEFAULT_ONSET_TOLERANCE,
             velocity: bool = False) -> tuple[Scores, list[Scores]]:
    """Micro-averaged corpus scores (pooled counts) plus the per-clip table."""
    if len(ref_corpus) != len(est_corpus):
        raise ValueError(
            f"clip count mismatch: {len(ref_corpus)} ref vs {len(est_corpus)} est")
    per_clip = []
    for ref, est in zip(ref_corpus, est_corpus):
        if component_map is not None:
            ref = remap(ref, component_map)
            est = remap(est, component_map)
        if velocity:
            per_clip.append(velocity_scores(ref, est, tolerance))
        else:
            per_clip.append(onset_scores(ref, est, tolerance))
    return _pool(per_clip), per_clip


def scores_csv(per_clip: list[Scores]) -> str:
    """CSV rows `clip,component,tp,fp,fn,precision,recall,f1` (component -1 = all)."""
    lines = ["clip,component,tp,fp,fn,precision,recall,f1"]
    for idx, s in enumerate(per_clip):
        rows = [(-1, s)] + sorted(s.per_component.items())
        for comp, sub in rows:
            lines.append(
                f"{idx},{comp},{sub.tp},{sub.fp},{sub.fn},"
                f"{sub.precision:.4f},{sub.recall:.4f},{sub.f1:.4f}")
    return "\n".join(lines) + "\n"


def summary_text(total: Scores, component_names: Optional[Sequence[str]] = None) -> str:
    lines = [
        "component        tp    fp    fn  precision  recall      f1",
        f"{'all':<12} {total.tp:>6} {total.fp:>5} {total.fn:>5} "
        f"{total.precision:>10.4f} {total.recall:>7.4f} {total.f1:>7.4f}",
    ]
    for comp, sub in sorted(total.per_component.items()):
        name = component_names[comp] if component_names and comp < len(component_names) else str(comp)
        lines.append(
            f"{name:<12} {sub.tp:>6} {sub.fp:>5} {sub.fn:>5} "
            f"{sub.precision:>10.4f} {sub.recall:>7.4f} {sub.f1:>7.4f}")
    return "\n".join(lines) + "\n"
