"""Identification metrics: rank-one accuracy, class-averaged Recall@K / CMC,
multi-run aggregation, CSV and SVG output."""
import csv
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Mapping, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np


@dataclass
class CMCResult:
    """``recall[k-1]`` is Recall@k for k = 1..num_classes."""

    recall: np.ndarray
    num_queries: int
    num_classes: int
    seeds: List[int] = field(default_factory=list)
    std: np.ndarray = None

    def __post_init__(self):
        self.recall = np.asarray(self.recall, dtype=np.float64)
        if self.std is None:
            self.std = np.zeros_like(self.recall)

    def at(self, k: int) -> float:
        return float(self.recall[k - 1])


def _as_arrays(scores, labels=None) -> Tuple[np.ndarray, np.ndarray]:
    if labels is None:
        # list of (score vector, true class)
        vecs, labels = zip(*scores)
        scores = np.stack([np.asarray(v, dtype=np.float64) for v in vecs])
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"scores {scores.shape} do not match {labels.shape[0]} labels")
    if scores.shape[0] == 0:
        raise ValueError("no queries")
    return scores, labels


def true_class_ranks(scores, labels) -> np.ndarray:
    """1-based rank of the true class; tied classes all count as ranked ahead."""
    scores, labels = _as_arrays(scores, labels)
    true = scores[np.arange(len(labels)), labels]
    return (scores >= true[:, None]).sum(axis=1)


def _per_class(hits: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    present = np.bincount(labels, minlength=num_classes)
    missing = np.flatnonzero(present == 0)
    if missing.size:
        raise ValueError(f"class {int(missing[0])} has no query")
    counts = np.bincount(labels, weights=hits, minlength=num_classes)
    # exact rational mean, rounded once, so the value does not depend on query order
    return float(sum(Fraction(int(h), int(n)) for h, n in zip(counts, present)) / num_classes)


def recall_at_k(scores, labels=None, K: int = 1) -> float:
    """Class-averaged Recall@K.

    ``scores`` is an (N, num_classes) matrix with ``labels`` the true classes,
    or a list of ``(score_vector, true_class)`` pairs (pass ``labels=None``).
    """
    scores, labels = _as_arrays(scores, labels)
    k_max = scores.shape[1]
    if not 1 <= K <= k_max:
        raise ValueError(f"K must lie in [1, {k_max}], got {K}")
    ranks = true_class_ranks(scores, labels)
    return _per_class((ranks <= K).astype(np.float64), labels, k_max)


def cmc_curve(scores, labels=None, seeds=()) -> CMCResult:
    scores, labels = _as_arrays(scores, labels)
    k_max = scores.shape[1]
    ranks = true_class_ranks(scores, labels)
    recall = np.array([_per_class((ranks <= k).astype(np.float64), labels, k_max) for k in range(1, k_max + 1)])
    return CMCResult(recall, len(labels), k_max, list(seeds))


def rank_one_accuracy(scores, labels=None) -> float:
    """Query-weighted fraction whose argmax (lowest index on ties) is correct."""
    scores, labels = _as_arrays(scores, labels)
    return float(np.mean(scores.argmax(axis=1) == labels))


def aggregate_runs(results: Sequence[CMCResult]) -> CMCResult:
    """Element-wise mean and population std over runs."""
    if not results:
        raise ValueError("no runs to aggregate")
    k = {r.num_classes for r in results}
    if len(k) != 1:
        raise ValueError(f"mismatched class counts across runs: {sorted(k)}")
    stack = np.stack([r.recall for r in results])
    seeds = [s for r in results for s in r.seeds]
    return CMCResult(stack.mean(axis=0), sum(r.num_queries for r in results), k.pop(), seeds,
                     stack.std(axis=0, ddof=0))


def write_metrics_csv(path, rows: Sequence[Tuple[str, str, CMCResult]], ks: Sequence[int] = None) -> None:
    """Rows of ``(run_id, curve_name, CMCResult)``; std is the population std."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "curve_name", "K", "recall", "std"])
        for run_id, name, res in rows:
            for k in (ks or range(1, res.num_classes + 1)):
                if k > res.num_classes:
                    continue
                w.writerow([run_id, name, k, f"{res.recall[k - 1]:.6f}", f"{res.std[k - 1]:.6f}"])


def read_metrics_csv(path) -> Dict[str, Dict[str, Dict[int, Tuple[float, float]]]]:
    out: Dict[str, Dict[str, Dict[int, Tuple[float, float]]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["run_id"], {}).setdefault(row["curve_name"], {})[int(row["K"])] = \
                (float(row["recall"]), float(row["std"]))
    return out


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")


def emit_cmc_plot(curves: Mapping[str, CMCResult], path, width=640, height=420, title="CMC") -> None:
    """Standalone SVG: one polyline per curve, Recall@K against K, legend."""
    if not curves:
        raise ValueError("need at least one curve")
    pad_l, pad_r, pad_t, pad_b = 56, 160, 30, 44
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b
    k_max = max(len(c.recall) for c in curves.values())

    def sx(k):
        return pad_l + (0.5 * pw if k_max == 1 else (k - 1) * pw / (k_max - 1))

    def sy(v):
        return pad_t + (1.0 - v) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<text x="{pad_l}" y="{pad_t - 10}" font-size="14" font-family="sans-serif">{escape(title)}</text>',
             f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
             f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>']
    for v in np.linspace(0, 1, 6):
        parts.append(f'<text x="{pad_l - 8}" y="{sy(v) + 4:.1f}" font-size="10" text-anchor="end" '
                     f'font-family="sans-serif">{v:.1f}</text>')
    for k in sorted({1, k_max, *range(1, k_max + 1, max(1, k_max // 5))}):
        parts.append(f'<text x="{sx(k):.1f}" y="{pad_t + ph + 16}" font-size="10" text-anchor="middle" '
                     f'font-family="sans-serif">{k}</text>')
    parts.append(f'<text x="{pad_l + pw / 2}" y="{height - 8}" font-size="12" text-anchor="middle" '
                 f'font-family="sans-serif">rank K</text>')
    parts.append(f'<text x="14" y="{pad_t + ph / 2}" font-size="12" text-anchor="middle" font-family="sans-serif" '
                 f'transform="rotate(-90 14 {pad_t + ph / 2})">Recall@K</text>')
    for i, (name, res) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(k):.2f},{sy(v):.2f}" for k, v in enumerate(res.recall, start=1))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = pad_t + 14 + 18 * i
        lx = pad_l + pw + 12
        parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 26}" y="{ly + 4}" font-size="11" font-family="sans-serif">'
                     f'{escape(name)}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
