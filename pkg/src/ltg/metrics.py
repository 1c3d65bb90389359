"""Assignment quality metrics.

Predictions fall into four tallies: correctly and incorrectly assigned
generatable designs (cgi / igi), and correctly and incorrectly identified
not-generatable designs (cni / ini).  A generatable design predicted as the
wrong generatable class counts as igi.  Every ratio with a zero denominator
is reported as None ("undefined") rather than coerced to a number.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class ConfusionCounts:
    cgi: int = 0  # generatable, assigned its true class
    igi: int = 0  # assigned generatable but wrong (wrong class or truly NG)
    cni: int = 0  # not-generatable, flagged as such
    ini: int = 0  # flagged not-generatable but actually generatable

    @property
    def total(self) -> int:
        return self.cgi + self.igi + self.cni + self.ini

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.cgi + other.cgi, self.igi + other.igi,
                               self.cni + other.cni, self.ini + other.ini)

    def scaled(self, k: int) -> "ConfusionCounts":
        return ConfusionCounts(self.cgi * k, self.igi * k,
                               self.cni * k, self.ini * k)


def tally(predictions, labels, ng_index: int) -> ConfusionCounts:
    """Count outcomes for predictions with .is_ng and .decided attributes."""
    c = ConfusionCounts()
    for pred, label in zip(predictions, labels):
        if pred.is_ng:
            if label == ng_index:
                c.cni += 1
            else:
                c.ini += 1
        else:
            if label == pred.decided:
                c.cgi += 1
            else:
                c.igi += 1
    return c


def weighted_counts(per_design: list[ConfusionCounts],
                    instance_counts: list[int]) -> ConfusionCounts:
    """Per-instance view: each design's tally multiplied by its placement count."""
    total = ConfusionCounts()
    for counts, n in zip(per_design, instance_counts):
        total = total + counts.scaled(n)
    return total


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def precision(c: ConfusionCounts) -> float | None:
    return _ratio(c.cgi, c.cgi + c.igi)


def recall(c: ConfusionCounts) -> float | None:
    return _ratio(c.cgi, c.cgi + c.ini)


def accuracy(c: ConfusionCounts) -> float | None:
    return _ratio(c.cgi + c.cni, c.total)


def f_half(c: ConfusionCounts) -> float | None:
    """F-beta with beta = 0.5: precision weighted over recall."""
    p, r = precision(c), recall(c)
    if p is None or r is None or (0.25 * p + r) == 0:
        return None
    return 1.25 * p * r / (0.25 * p + r)


def ng_identification_rate(c: ConfusionCounts) -> float | None:
    """Share of truly not-generatable designs that were flagged as such."""
    return _ratio(c.cni, c.cni + c.ini)


def topk_accuracy(predictions, labels, k: int) -> float | None:
    """Fraction of designs whose true class appears in the top-k ranking.

    The not-generatable class participates like any other: an NG design is
    a top-k hit when the NG class ranks among the first k.
    """
    if not predictions:
        return None
    hits = 0
    for pred, label in zip(predictions, labels):
        hits += any(idx == label for idx, _ in pred.top[:k])
    return hits / len(predictions)


def summarize(c: ConfusionCounts) -> dict:
    return {
        "counts": {"cgi": c.cgi, "igi": c.igi, "cni": c.cni, "ini": c.ini},
        "precision": precision(c),
        "recall": recall(c),
        "accuracy": accuracy(c),
        "f_half": f_half(c),
        "ng_identification_rate": ng_identification_rate(c),
    }


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    topk: dict[int, float | None]
    per_class: list[dict]
    runtime_ms: float | None = None

    def to_json_dict(self) -> dict:
        out = summarize(self.counts)
        out["topk_accuracy"] = {str(k): v for k, v in self.topk.items()}
        out["per_class"] = self.per_class
        out["runtime_ms"] = self.runtime_ms
        return out

    def to_text(self) -> str:
        def pct(v: float | None) -> str:
            return "undefined" if v is None else f"{100 * v:.2f}%"

        c = self.counts
        lines = [
            f"designs: {c.total}  (cgi={c.cgi} igi={c.igi} cni={c.cni} ini={c.ini})",
            f"precision {pct(precision(c))}   recall {pct(recall(c))}   "
            f"F0.5 {pct(f_half(c))}   accuracy {pct(accuracy(c))}",
            f"NG identification {pct(ng_identification_rate(c))}",
        ]
        for k in sorted(self.topk):
            lines.append(f"top-{k} accuracy {pct(self.topk[k])}")
        if self.per_class:
            width = max(len(r["label"]) for r in self.per_class)
            lines.append(f"{'class'.ljust(width)}  total  correct")
            for r in self.per_class:
                lines.append(f"{r['label'].ljust(width)}  {r['total']:5d}  "
                             f"{r['correct']:7d}")
        if self.runtime_ms is not None:
            lines.append(f"runtime {self.runtime_ms:.0f} ms")
        return "\n".join(lines)
