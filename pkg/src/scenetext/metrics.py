"""Soft-voting VQA accuracy, ANLS, and CIDEr-D."""

from __future__ import annotations

import json
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .text import tokenize

_ARTICLES = {"a", "an", "the"}
_WS = re.compile(r"\s+")


class MetricError(ValueError):
    pass


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and English articles, collapse whitespace."""
    return " ".join(t for t in tokenize(text) if t not in _ARTICLES)


def vqa_accuracy(pred: str, answers: Sequence[str]) -> float:
    """Mean over leave-one-out subsets of ``min(matches / 3, 1)``."""
    if len(answers) < 10:
        raise MetricError(f"soft-voting accuracy needs 10 answers, got {len(answers)}")
    p = normalize_answer(pred)
    hits = [normalize_answer(a) == p for a in answers]
    total = sum(hits)
    # dropping answer i removes one match iff answer i matched
    return sum(min((total - h) / 3.0, 1.0) for h in hits) / len(hits)


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _anls_norm(s: str) -> str:
    return _WS.sub(" ", s.strip().lower())


def normalized_levenshtein(a: str, b: str) -> float:
    a, b = _anls_norm(a), _anls_norm(b)
    if not a and not b:
        return 0.0
    return levenshtein(a, b) / max(len(a), len(b))


def anls(pred: str, gt_answers: Sequence[str], threshold: float = 0.5) -> float:
    if not gt_answers:
        raise MetricError("ANLS needs at least one ground-truth answer")
    if not 0.0 < threshold < 1.0:
        raise MetricError("ANLS threshold must be in (0, 1)")
    best = 0.0
    for gt in gt_answers:
        nl = normalized_levenshtein(pred, gt)
        if nl < threshold:
            best = max(best, 1.0 - nl)
    return best


# ---------------------------------------------------------------- CIDEr-D


def _ngrams(words: Sequence[str], n: int) -> Counter:
    c: Counter = Counter()
    for k in range(1, n + 1):
        for i in range(len(words) - k + 1):
            c[tuple(words[i : i + k])] += 1
    return c


class CiderD:
    """Corpus-level CIDEr-D: document frequencies come from the reference sets.

    Per n-gram order, candidate and reference tf-idf vectors are compared with
    a clipped cosine (``min(c, r) * r``), damped by a Gaussian on the length
    difference; orders are averaged, references averaged, and the result
    scaled by 10.
    """

    def __init__(self, n: int = 4, sigma: float = 6.0):
        self.n = n
        self.sigma = sigma

    def _vec(self, counts: Counter, df: Mapping, log_docs: float):
        vec = [dict() for _ in range(self.n)]
        norm = [0.0] * self.n
        for gram, tf in counts.items():
            k = len(gram) - 1
            w = tf * (log_docs - math.log(max(1.0, df.get(gram, 0.0))))
            vec[k][gram] = w
            norm[k] += w * w
        return vec, [math.sqrt(x) for x in norm]

    def _sim(self, vh, nh, lh, vr, nr, lr) -> list[float]:
        penalty = math.exp(-((lh - lr) ** 2) / (2 * self.sigma**2))
        out = []
        for k in range(self.n):
            val = sum(min(w, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, w in vh[k].items())
            if nh[k] != 0 and nr[k] != 0:
                val /= nh[k] * nr[k]
            out.append(val * penalty)
        return out

    def compute(self, candidates: Sequence[str], references: Sequence[Sequence[str]]) -> tuple[float, list[float]]:
        if not candidates:
            raise MetricError("CIDEr needs a non-empty corpus")
        if len(candidates) != len(references):
            raise MetricError("one reference set per candidate required")
        if any(len(r) == 0 for r in references):
            raise MetricError("every candidate needs at least one reference")
        refs_tok = [[tokenize(r) for r in refs] for refs in references]
        df: dict = defaultdict(float)
        for refs in refs_tok:
            for gram in set(g for r in refs for g in _ngrams(r, self.n)):
                df[gram] += 1
        log_docs = math.log(float(len(references)))
        scores = []
        for cand, refs in zip(candidates, refs_tok):
            ct = tokenize(cand)
            vh, nh = self._vec(_ngrams(ct, self.n), df, log_docs)
            total = [0.0] * self.n
            for r in refs:
                vr, nr = self._vec(_ngrams(r, self.n), df, log_docs)
                for k, v in enumerate(self._sim(vh, nh, len(ct), vr, nr, len(r))):
                    total[k] += v
            scores.append(sum(total) / self.n / len(refs) * 10.0)
        return sum(scores) / len(scores), scores


def cider(candidates: Sequence[str], references: Sequence[Sequence[str]], n: int = 4, sigma: float = 6.0):
    """Corpus CIDEr-D and per-sample scores."""
    return CiderD(n, sigma).compute(candidates, references)


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    metric: str
    per_sample: list[dict]
    params: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> float:
        if not self.per_sample:
            return 0.0
        return sum(r["score"] for r in self.per_sample) / len(self.per_sample)

    def to_dict(self) -> dict:
        return {"metric": self.metric, "params": self.params, "aggregate": self.aggregate, "count": len(self.per_sample)}


TASK_METRICS = {"vqa": ("accuracy", "anls"), "caption": ("cider",)}


def score_predictions(
    predictions: Mapping[str, str],
    ground_truth: Mapping[str, Sequence[str]],
    metrics: Iterable[str],
    anls_threshold: float = 0.5,
    cider_sigma: float = 6.0,
    cider_n: int = 4,
) -> dict[str, MetricReport]:
    """Score ``{sample_id: prediction}`` against ``{sample_id: answers or references}``."""
    ids = list(predictions)
    missing = [i for i in ids if i not in ground_truth]
    if missing:
        raise MetricError(f"no ground truth for {len(missing)} predictions, e.g. {missing[0]!r}")
    out = {}
    for m in metrics:
        if m == "accuracy":
            rows = [{"sample_id": i, "prediction": predictions[i], "score": vqa_accuracy(predictions[i], ground_truth[i])} for i in ids]
            out[m] = MetricReport(m, rows)
        elif m == "anls":
            rows = [{"sample_id": i, "prediction": predictions[i], "score": anls(predictions[i], ground_truth[i], anls_threshold)} for i in ids]
            out[m] = MetricReport(m, rows, {"threshold": anls_threshold})
        elif m == "cider":
            _, per = cider([predictions[i] for i in ids], [ground_truth[i] for i in ids], cider_n, cider_sigma)
            rows = [{"sample_id": i, "prediction": predictions[i], "score": s} for i, s in zip(ids, per)]
            out[m] = MetricReport(m, rows, {"sigma": cider_sigma, "n": cider_n})
        else:
            raise MetricError(f"unknown metric {m!r}")
    return out


def ground_truth_for(samples, task: str) -> dict[str, list[str]]:
    gt = {}
    for s in samples:
        if task == "vqa":
            if not s.answers:
                raise MetricError(f"sample {s.sample_id} has no answers for a VQA evaluation")
            gt[s.sample_id] = list(s.answers)
        elif task == "caption":
            if not s.caption:
                raise MetricError(f"sample {s.sample_id} has no caption for a caption evaluation")
            gt[s.sample_id] = [s.caption]
        else:
            raise MetricError(f"unknown task {task!r}")
    return gt


def check_task_metrics(task: str, metrics: Iterable[str]) -> list[str]:
    metrics = list(metrics) or list(TASK_METRICS.get(task, ()))
    allowed = TASK_METRICS.get(task)
    if allowed is None:
        raise MetricError(f"unknown task {task!r}")
    bad = [m for m in metrics if m not in allowed]
    if bad:
        raise MetricError(f"metric(s) {bad} do not apply to task {task!r}")
    return metrics


def read_predictions(path: str | Path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[str(rec["sample_id"])] = str(rec["prediction"])
    return out


def write_predictions(predictions: Mapping[str, str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sid, pred in predictions.items():
            f.write(json.dumps({"sample_id": sid, "prediction": pred}) + "\n")


def write_report(reports: Mapping[str, MetricReport], path: str | Path) -> None:
    """One JSON line per sample with every metric's score, then a summary line."""
    names = list(reports)
    first = reports[names[0]].per_sample if names else []
    with open(path, "w", encoding="utf-8") as f:
        for k, row in enumerate(first):
            rec = {"sample_id": row["sample_id"], "prediction": row["prediction"]}
            for m in names:
                rec[m] = reports[m].per_sample[k]["score"]
            f.write(json.dumps(rec) + "\n")
        f.write(json.dumps({"summary": {m: r.to_dict() for m, r in reports.items()}}) + "\n")
