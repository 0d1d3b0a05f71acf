"""AUC, relative improvement, per-scenario breakdowns, and mutual-unit traces.

AUC uses the rank-sum (Mann-Whitney) estimator with tied scores counting half
a win, which equals the brute-force pairwise count exactly. Relative
improvement rescales both AUCs around the 0.5 random baseline:

    rela_impr = ((measured - 0.5) / (base - 0.5) - 1) * 100
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import MetricError, ShapeError
from .model import predict

METRICS_FORMAT = "scenarioctr.metrics.v1"
TRACE_FORMAT = "scenarioctr.trace.v1"


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.shape != self.labels.shape:
            raise ShapeError(
                f"scores {self.scores.shape} and labels {self.labels.shape} differ")


def auc(scores, labels=None):
    """Probability that a random positive outscores a random negative.

    Ties count 0.5. Computed from tie-averaged ranks in O(n log n); exactly
    equal to counting all positive/negative pairs.
    """
    if labels is None:
        scores, labels = scores.scores, scores.labels
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n = len(s)
    n_pos = int((y == 1).sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError(
            f"AUC undefined: need both classes, got {n_pos} positives / {n_neg} negatives")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(n, dtype=np.float64)
    sorted_s = s[order]
    boundaries = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [n]])
    for lo, hi in zip(starts, ends):
        ranks[order[lo:hi]] = 0.5 * (lo + hi - 1) + 1.0
    pos_rank_sum = ranks[y == 1].sum()
    return (pos_rank_sum - 0.5 * n_pos * (n_pos + 1)) / (n_pos * n_neg)


def rela_impr(measured_auc, base_auc):
    """Percentage improvement over a baseline, both measured from random 0.5."""
    if base_auc == 0.5:
        raise MetricError("relative improvement undefined for a random baseline (AUC 0.5)")
    return ((measured_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0


def scored_table(scores, labels, scenarios, num_scenarios):
    """Per-scenario AUC rows plus the pooled overall entry.

    Scenarios holding a single label class get a flagged row with no AUC; the
    pooled set must still contain both classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    scenarios = np.asarray(scenarios)
    rows = []
    for s in range(num_scenarios):
        sel = scenarios == s
        count = int(sel.sum())
        positives = int((labels[sel] == 1).sum())
        single = count == 0 or positives == 0 or positives == count
        rows.append({
            "scenario": s,
            "count": count,
            "positives": positives,
            "single_class": single,
            "auc": None if single else auc(scores[sel], labels[sel]),
        })
    overall = {
        "count": len(scores),
        "positives": int((labels == 1).sum()),
        "auc": auc(scores, labels),
    }
    return {"overall": overall, "scenarios": rows}


def predict_all(model, encoded, chunk_size=512):
    """Score a whole encoded dataset in fixed-size chunks."""
    parts = [predict(model, encoded.take(np.arange(lo, min(lo + chunk_size, encoded.n))))
             for lo in range(0, encoded.n, chunk_size)]
    return np.concatenate(parts) if parts else np.zeros(0)


def per_scenario_eval(model, encoded):
    """Evaluate a model per scenario and pooled; see scored_table."""
    scores = predict_all(model, encoded)
    return scored_table(scores, encoded.label, encoded.scenario,
                        model.schema.num_scenarios)


class MutualTrace:
    """Running means of the mutual unit's mixing weights and gates.

    ``accumulate`` folds in one batch of alpha matrices (B, N, N) and gate
    values (B, N). When ``owners`` is given, branch i's statistics only count
    the samples branch i owns; otherwise every sample counts for every branch.
    Gate values additionally feed a fixed-bin histogram per branch.
    """

    def __init__(self, num_scenarios, bins=20):
        self.num_scenarios = num_scenarios
        self.bins = bins
        self.edges = np.linspace(0.0, 1.0, bins + 1)
        self.counts = np.zeros(num_scenarios, dtype=np.int64)
        self._alpha_sum = np.zeros((num_scenarios, num_scenarios))
        self._g_sum = np.zeros(num_scenarios)
        self._g_hist = np.zeros((num_scenarios, bins), dtype=np.int64)

    def accumulate(self, alpha, gates, owners=None):
        alpha = np.asarray(alpha)
        gates = np.asarray(gates)
        N = self.num_scenarios
        if alpha.ndim != 3 or alpha.shape[1:] != (N, N):
            raise ShapeError(f"alpha shape {alpha.shape} does not match (B, {N}, {N})")
        if gates.shape != alpha.shape[:1] + (N,):
            raise ShapeError(f"gates shape {gates.shape} does not match (B, {N})")
        for i in range(N):
            sel = slice(None) if owners is None else np.asarray(owners) == i
            rows = alpha[sel, i]
            g = gates[sel, i]
            self.counts[i] += len(g)
            self._alpha_sum[i] += rows.sum(axis=0)
            self._g_sum[i] += g.sum()
            hist, _ = np.histogram(g, bins=self.edges)
            self._g_hist[i] += hist
        return self

    def mean_alpha(self):
        out = np.zeros_like(self._alpha_sum)
        live = self.counts > 0
        out[live] = self._alpha_sum[live] / self.counts[live, None]
        return out

    def mean_g(self):
        out = np.zeros_like(self._g_sum)
        live = self.counts > 0
        out[live] = self._g_sum[live] / self.counts[live]
        return out

    def export(self, path):
        mean_alpha = self.mean_alpha()
        for i in range(self.num_scenarios):
            if self.counts[i] and abs(mean_alpha[i].sum() - 1.0) > 1e-6:
                raise MetricError(f"mean alpha row {i} sums to {mean_alpha[i].sum()}")
        payload = {
            "format": TRACE_FORMAT,
            "num_scenarios": self.num_scenarios,
            "counts": self.counts.tolist(),
            "mean_alpha": mean_alpha.tolist(),
            "mean_g": self.mean_g().tolist(),
            "g_histogram": {
                "edges": self.edges.tolist(),
                "counts": self._g_hist.tolist(),
            },
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
        return payload


def accumulate_mutual_trace(trace, alpha, gates, owners=None):
    return trace.accumulate(alpha, gates, owners)


def export_trace(trace, path):
    return trace.export(path)


def write_metrics_report(path, table, rela=None, extra=None):
    """Write an evaluation report; ``rela`` names a baseline and its numbers."""
    payload = {"format": METRICS_FORMAT}
    payload.update(table)
    if rela is not None:
        payload["rela_impr"] = rela
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return payload


def read_metrics_report(path):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != METRICS_FORMAT:
        raise MetricError(f"{path}: not a metrics report")
    return payload
