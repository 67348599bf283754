"""Answer-quality metrics: EM, BLEU, ROUGE-L, METEOR (exact + stem), CIDEr, 3D IoU accuracies."""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .prompt import parse_choice, parse_grounding_answer
from .scene import BBox3D

__all__ = [
    "MetricReport",
    "PredictionRecord",
    "bleu",
    "choice_accuracy",
    "cider",
    "evaluate",
    "exact_match",
    "format_report_table",
    "grounding_accuracy",
    "iou_3d",
    "meteor_simple",
    "normalize_answer",
    "rouge_l",
    "text_tokens",
]

_PUNCT = str.maketrans({c: " " for c in string.punctuation})
_ARTICLES = re.compile(r"\b(a|an|the)\b")


def normalize_answer(text: str) -> str:
    text = text.lower().translate(_PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(pred: str, refs: Sequence[str]) -> int:
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(r) for r in refs))


def text_tokens(text: str) -> list[str]:
    """Lowercased tokens with punctuation removed (shared by the n-gram metrics)."""
    return text.lower().translate(_PUNCT).split()


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(pred: str, refs: Sequence[str], max_n: int = 4, eps: float = 1e-9) -> float:
    """Sentence BLEU with uniform weights, closest-reference brevity penalty and add-epsilon smoothing."""
    hyp = text_tokens(pred)
    ref_toks = [text_tokens(r) for r in refs]
    if not hyp or not ref_toks:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        counts = _ngrams(hyp, n)
        max_ref: Counter = Counter()
        for r in ref_toks:
            max_ref |= _ngrams(r, n)
        total = sum(counts.values())
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        p = clipped / total if total else 0.0
        log_p += math.log(p if p > 0 else eps) / max_n
    c = len(hyp)
    r = min((len(t) for t in ref_toks), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c >= r else math.exp(1 - r / c)
    return bp * math.exp(log_p)


def _lcs(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(pred: str, refs: Sequence[str]) -> float:
    """LCS F1 (beta = 1), max over references."""
    hyp = text_tokens(pred)
    if not hyp:
        return 0.0
    best = 0.0
    for ref in refs:
        r = text_tokens(ref)
        lcs = _lcs(hyp, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(hyp), lcs / len(r)
        best = max(best, 2 * p * rec / (p + rec))
    return best


_SUFFIXES = ("ing", "es", "ed", "s")


def _stem(word: str) -> str:
    for suf in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            return word[: -len(suf)]
    return word


def _align(hyp: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Greedy exact then stem alignment, each preferring the nearest unused reference position."""
    used_h, used_r = set(), set()
    pairs = []
    for key in (lambda w: w, _stem):
        for i, w in enumerate(hyp):
            if i in used_h:
                continue
            cands = [j for j, v in enumerate(ref) if j not in used_r and key(v) == key(w)]
            if cands:
                j = min(cands, key=lambda j: (abs(j - i), j))
                pairs.append((i, j))
                used_h.add(i)
                used_r.add(j)
    return sorted(pairs)


def _chunks(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_simple(pred: str, refs: Sequence[str]) -> float:
    hyp = text_tokens(pred)
    if not hyp:
        return 0.0
    best = 0.0
    for ref in refs:
        r = text_tokens(ref)
        pairs = _align(hyp, r)
        m = len(pairs)
        if m == 0:
            continue
        p, rec = m / len(hyp), m / len(r)
        fmean = 10 * p * rec / (rec + 9 * p)
        penalty = 0.5 * (_chunks(pairs) / m) ** 3
        best = max(best, fmean * (1 - penalty))
    return best


def cider(corpus: Sequence[tuple[str, Sequence[str]]], max_n: int = 4) -> tuple[float, list[float]]:
    """Corpus CIDEr on the raw [0, 10] scale; returns ``(mean, per-sample scores)``.

    Document frequency counts the samples whose reference set contains an
    n-gram; idf is ``log((N + 1) / max(1, df))``.
    """
    if not corpus:
        raise ValueError("CIDEr needs a non-empty corpus")
    n_docs = len(corpus)
    hyps = [text_tokens(p) for p, _ in corpus]
    refs = [[text_tokens(r) for r in rs] for _, rs in corpus]
    df: Counter = Counter()
    for rs in refs:
        seen = set()
        for r in rs:
            for n in range(1, max_n + 1):
                seen.update(_ngrams(r, n))
        df.update(seen)
    log_n = math.log(n_docs + 1.0)

    def vec(tokens: list[str], n: int) -> tuple[dict, float]:
        v = {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in _ngrams(tokens, n).items()}
        return v, math.sqrt(sum(x * x for x in v.values()))

    scores = []
    for hyp, rs in zip(hyps, refs):
        per_n = []
        for n in range(1, max_n + 1):
            hv, hnorm = vec(hyp, n)
            sims = []
            for r in rs:
                rv, rnorm = vec(r, n)
                dot = sum(x * rv.get(g, 0.0) for g, x in hv.items())
                sims.append(dot / (hnorm * rnorm) if hnorm > 0 and rnorm > 0 else 0.0)
            per_n.append(sum(sims) / len(sims))
        scores.append(10.0 * sum(per_n) / max_n)
    return sum(scores) / n_docs, scores


def iou_3d(a: BBox3D, b: BBox3D) -> float:
    lo = [max(x, y) for x, y in zip(a.lo, b.lo)]
    hi = [min(x, y) for x, y in zip(a.hi, b.hi)]
    inter = 1.0
    for l, h in zip(lo, hi):
        inter *= max(0.0, h - l)
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


@dataclass
class PredictionRecord:
    sample_id: str
    task: str
    prediction: str
    references: list[str] = field(default_factory=list)
    gt_box: BBox3D | None = None
    gt_letter: str | None = None


def grounding_accuracy(records: Iterable[PredictionRecord], thresholds=(0.25, 0.5)) -> tuple[float, ...]:
    """``(acc@t for t in thresholds..., parse_failure_rate)``; unparseable predictions score IoU 0."""
    ious, failures = [], 0
    for rec in records:
        if rec.gt_box is None:
            raise ValueError(f"{rec.sample_id}: grounding record without gt box")
        _, box = parse_grounding_answer(rec.prediction)
        if box is None:
            failures += 1
            ious.append(0.0)
        else:
            ious.append(iou_3d(box, rec.gt_box))
    if not ious:
        return tuple(0.0 for _ in thresholds) + (0.0,)
    n = len(ious)
    return tuple(sum(v >= t for v in ious) / n for t in thresholds) + (failures / n,)


def choice_accuracy(records: Iterable[PredictionRecord]) -> float:
    records = list(records)
    if not records:
        return 0.0
    return sum(parse_choice(r.prediction) == r.gt_letter for r in records) / len(records)


# ---------------------------------------------------------------------------
# Reports

TEXT_COLUMNS = ("EM", "BLEU-1", "BLEU-4", "METEOR", "ROUGE", "CIDEr")
GROUNDING_COLUMNS = ("Acc@0.25", "Acc@0.5")


@dataclass
class MetricReport:
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    parse_failures: dict[str, int] = field(default_factory=dict)
    unmatched: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "counts": self.counts,
            "parse_failures": self.parse_failures,
            "unmatched": self.unmatched,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "MetricReport":
        return cls(dict(doc["metrics"]), dict(doc["counts"]), dict(doc.get("parse_failures", {})), list(doc.get("unmatched", [])))


def _text_metrics(records: list[PredictionRecord]) -> dict[str, float]:
    n = len(records)
    cider_mean, _ = cider([(r.prediction, r.references) for r in records])
    return {
        "EM": sum(exact_match(r.prediction, r.references) for r in records) / n,
        "BLEU-1": sum(bleu(r.prediction, r.references, 1) for r in records) / n,
        "BLEU-4": sum(bleu(r.prediction, r.references, 4) for r in records) / n,
        "METEOR": sum(meteor_simple(r.prediction, r.references) for r in records) / n,
        "ROUGE": sum(rouge_l(r.prediction, r.references) for r in records) / n,
        "CIDEr": cider_mean,
    }


def evaluate(predictions: Mapping[str, str], samples: Iterable) -> MetricReport:
    """Join ``sample_id -> prediction`` with instruction samples and score each task.

    Predictions whose id has no sample are listed in ``unmatched``; samples
    without a prediction are scored as empty answers.
    """
    by_task: dict[str, list[PredictionRecord]] = {}
    known = set()
    for s in samples:
        known.add(s.sample_id)
        rec = PredictionRecord(
            s.sample_id,
            s.task,
            predictions.get(s.sample_id, ""),
            [s.answer],
            s.gt_box if s.task == "grounding" else None,
            s.meta.get("gt_letter") if s.task == "multiple_choice" else None,
        )
        by_task.setdefault(s.task, []).append(rec)
    report = MetricReport(unmatched=sorted(set(predictions) - known))
    for task in sorted(by_task):
        recs = by_task[task]
        report.counts[task] = len(recs)
        if task == "grounding":
            a25, a50, fail = grounding_accuracy(recs)
            report.metrics[task] = {"Acc@0.25": a25, "Acc@0.5": a50}
            report.parse_failures[task] = round(fail * len(recs))
        elif task == "multiple_choice":
            report.metrics[task] = {"Acc": choice_accuracy(recs)}
            report.parse_failures[task] = sum(parse_choice(r.prediction) is None for r in recs)
        else:
            report.metrics[task] = _text_metrics(recs)
    return report


def format_report_table(reports: Mapping[str, MetricReport]) -> str:
    """Aligned method x metric tables (values x100), one block per task."""
    tasks = sorted({t for rep in reports.values() for t in rep.metrics})
    lines = []
    for task in tasks:
        cols: list[str] = []
        for rep in reports.values():
            for c in rep.metrics.get(task, {}):
                if c not in cols:
                    cols.append(c)
        header = ["method"] + cols
        rows = []
        for name, rep in reports.items():
            vals = rep.metrics.get(task)
            if vals is None:
                continue
            rows.append([name] + [f"{100 * vals[c]:.2f}" if c in vals else "-" for c in cols])
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        fmt = lambda r: "  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths)))  # noqa: E731
        lines.append(f"[{task}]")
        lines.append(fmt(header))
        lines.extend(fmt(r) for r in rows)
        lines.append("")
    return "\n".join(lines)
