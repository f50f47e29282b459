"""Word error rate and frame-level LID accuracy reports.

WER uses unit-cost Levenshtein distance. The DP table is computed with
numpy over arbitrary leading batch dimensions so whole corpora of short
pairs can be scored at once; the per-utterance backtrace prefers a
substitution over an insertion/deletion pair when both are optimal.

An empty reference with a nonempty hypothesis is flagged (``N == 0``):
its insertions still count in an aggregate's error total but contribute
nothing to the aggregate's reference length.
"""

from __future__ import annotations

import csv
import io
import itertools
from collections import deque
from dataclasses import dataclass, field

import numpy as np


# ---------------------------------------------------------------- edit distance

def edit_table(ref, hyp) -> np.ndarray:
    """Levenshtein DP table ``(..., m+1, n+1)`` for ``ref (..., m)`` vs ``hyp (..., n)``."""
    ref = np.asarray(ref)
    hyp = np.asarray(hyp)
    m, n = ref.shape[-1], hyp.shape[-1]
    batch = np.broadcast_shapes(ref.shape[:-1], hyp.shape[:-1])
    D = np.zeros(batch + (m + 1, n + 1), dtype=np.int64)
    D[..., :, 0] = np.arange(m + 1)
    D[..., 0, :] = np.arange(n + 1)
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            sub = D[..., i - 1, j - 1] + (ref[..., i - 1] != hyp[..., j - 1])
            D[..., i, j] = np.minimum(sub, np.minimum(D[..., i - 1, j], D[..., i, j - 1]) + 1)
    return D


def edit_distance(ref, hyp):
    """Edit distance; broadcasts over leading dimensions of equal-length batches."""
    return edit_table(ref, hyp)[..., -1, -1]


def edit_ops(ref, hyp) -> tuple:
    """Minimal ``(substitutions, insertions, deletions)`` for one pair."""
    ref, hyp = list(ref), list(hyp)
    D = edit_table(np.array(ref, dtype=np.int64), np.array(hyp, dtype=np.int64))
    i, j = len(ref), len(hyp)
    S = I = Dl = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i, j] == D[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and D[i, j] == D[i - 1, j] + 1:
            Dl += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return int(S), int(I), int(Dl)


def all_pairs_edit_distance_bfs(alphabet, max_len):
    """Exhaustive oracle: shortest single-edit paths between every string of length <= ``max_len``.

    Returns ``(strings, dist)``. An optimal script can always delete first,
    substitute, then insert, so paths never need strings longer than the
    longer endpoint; the graph is therefore closed under the length bound.
    """
    strings = [s for L in range(max_len + 1) for s in itertools.product(alphabet, repeat=L)]
    index = {s: k for k, s in enumerate(strings)}
    nbrs = [[] for _ in strings]
    for k, s in enumerate(strings):
        out = set()
        for p in range(len(s)):
            out.add(s[:p] + s[p + 1:])
            for a in alphabet:
                if a != s[p]:
                    out.add(s[:p] + (a,) + s[p + 1:])
        if len(s) < max_len:
            for p in range(len(s) + 1):
                for a in alphabet:
                    out.add(s[:p] + (a,) + s[p:])
        nbrs[k] = [index[o] for o in out]
    n = len(strings)
    dist = np.full((n, n), -1, dtype=np.int64)
    for src in range(n):
        row = dist[src]
        row[src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in nbrs[u]:
                if row[v] < 0:
                    row[v] = row[u] + 1
                    queue.append(v)
    return strings, dist


# ---------------------------------------------------------------- WER

@dataclass
class WerReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0
    utterances: int = 0
    empty_refs: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        """Percentage; NaN when no reference tokens were scored."""
        return 100.0 * self.errors / self.ref_len if self.ref_len else float("nan")

    def __add__(self, other: "WerReport") -> "WerReport":
        return WerReport(self.substitutions + other.substitutions, self.insertions + other.insertions,
                         self.deletions + other.deletions, self.ref_len + other.ref_len,
                         self.utterances + other.utterances, self.empty_refs + other.empty_refs)


def wer(ref, hyp) -> WerReport:
    S, I, D = edit_ops(ref, hyp)
    return WerReport(S, I, D, len(ref), 1, int(len(ref) == 0))


def corpus_wer(refs, hyps, groups=None) -> dict:
    """``{"all": WerReport, <group>: WerReport, ...}`` for aligned lists."""
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps differ in length")
    out = {"all": WerReport()}
    for k, (r, h) in enumerate(zip(refs, hyps)):
        rep = wer(r, h)
        out["all"] = out["all"] + rep
        if groups is not None:
            out[groups[k]] = out.get(groups[k], WerReport()) + rep
    return out


# ---------------------------------------------------------------- LID accuracy

INF = "inf"


@dataclass
class LidReport:
    """Accuracy rows in percent: ``avg``, one per frame index, and ``inf`` (last frame)."""

    rows: dict
    counts: dict
    by_group: dict = field(default_factory=dict)

    def row_names(self):
        return list(self.rows)


def _accuracy_rows(traces, labels, frame_indices):
    correct_all, frames_all = 0, 0
    at_k = {k: [0, 0] for k in frame_indices}
    last = [0, 0]
    for pred, lab in zip(traces, labels):
        hits = pred == lab
        correct_all += int(hits.sum())
        frames_all += len(hits)
        for k in frame_indices:
            if len(hits) > k:
                at_k[k][0] += int(hits[k])
                at_k[k][1] += 1
        last[0] += int(hits[-1])
        last[1] += 1
    rows = {"avg": 100.0 * correct_all / frames_all}
    counts = {"avg": frames_all}
    for k in frame_indices:
        c, n = at_k[k]
        rows[str(k)] = 100.0 * c / n if n else float("nan")
        counts[str(k)] = n
    rows[INF] = 100.0 * last[0] / last[1]
    counts[INF] = last[1]
    return rows, counts


def lid_accuracy(traces, labels, frame_indices=(0, 5, 10), class_map=None, names=None) -> LidReport:
    """Frame-level LID accuracy.

    ``traces``: per-utterance ``(T_i, K)`` posteriors (or ``(T_i,)`` predicted
    indices). ``class_map``: optional integer array mapping each class index
    to a coarser class (both prediction and label are mapped). ``names``:
    display names of the (mapped) classes for the per-group breakdown.
    """
    if len(traces) == 0:
        raise ValueError("lid_accuracy: empty evaluation set")
    if len(traces) != len(labels):
        raise ValueError("traces and labels differ in length")
    preds = []
    for tr in traces:
        tr = np.asarray(tr)
        if tr.ndim == 2:
            tr = np.argmax(tr, axis=-1)
        if tr.size == 0:
            raise ValueError("lid_accuracy: empty trace")
        preds.append(tr)
    labels = np.asarray(labels)
    if class_map is not None:
        class_map = np.asarray(class_map)
        preds = [class_map[p] for p in preds]
        labels = class_map[labels]
    rows, counts = _accuracy_rows(preds, labels, frame_indices)
    by_group = {}
    for g in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == g)
        name = names[g] if names is not None else str(g)
        by_group[name] = _accuracy_rows([preds[i] for i in idx], labels[idx], frame_indices)[0]
    return LidReport(rows, counts, by_group)


# ---------------------------------------------------------------- tables

def _fmt(x):
    return "nan" if isinstance(x, float) and np.isnan(x) else (f"{x:.2f}" if isinstance(x, float) else str(x))


def wer_csv(tables: dict) -> str:
    """``tables``: ``{pass_name: {group: WerReport}}`` -> CSV text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pass", "group", "S", "I", "D", "N", "utterances", "empty_refs", "wer"])
    for p, groups in tables.items():
        for g, r in groups.items():
            w.writerow([p, g, r.substitutions, r.insertions, r.deletions, r.ref_len, r.utterances,
                        r.empty_refs, _fmt(r.wer)])
    return buf.getvalue()


def parse_wer_csv(text: str) -> dict:
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        rep = WerReport(int(row["S"]), int(row["I"]), int(row["D"]), int(row["N"]), int(row["utterances"]),
                        int(row["empty_refs"]))
        out.setdefault(row["pass"], {})[row["group"]] = rep
    return out


def lid_csv(reports: dict) -> str:
    """``reports``: ``{view_name: LidReport}`` -> CSV with one line per (view, group, row)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["view", "group", "row", "accuracy", "count"])
    for view, rep in reports.items():
        for row, acc in rep.rows.items():
            w.writerow([view, "all", row, _fmt(acc), rep.counts[row]])
        for g, rows in rep.by_group.items():
            for row, acc in rows.items():
                w.writerow([view, g, row, _fmt(acc), ""])
    return buf.getvalue()


def parse_lid_csv(text: str) -> dict:
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        out.setdefault(row["view"], {}).setdefault(row["group"], {})[row["row"]] = float(row["accuracy"])
    return out


def render_table(header, rows) -> str:
    """Aligned plain-text table."""
    cells = [list(map(str, header))] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def wer_text(systems: dict) -> str:
    """``systems``: ``{name: {pass_name: WerReport}}`` -> one row per system, one column per pass."""
    passes = sorted({p for s in systems.values() for p in s})
    rows = [[name] + [s[p].wer if p in s else float("nan") for p in passes] for name, s in systems.items()]
    return render_table(["system"] + [f"{p} %WER" for p in passes], rows)


def lid_text(reports: dict) -> str:
    """``reports``: ``{column_name: LidReport}`` -> rows avg / frame k / inf."""
    names = list(reports)
    row_keys = reports[names[0]].row_names()
    rows = [[("avg." if k == "avg" else "∞" if k == INF else k)] + [reports[n].rows.get(k, float("nan"))
                                                                        for n in names] for k in row_keys]
    return render_table(["frame"] + names, rows)
