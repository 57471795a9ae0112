"""Retrieval metrics (CMC@K, CMC@1%, mAP) and ablation harnesses.

Metric internals accumulate with plain Python floats in ranking order so an
independent recount that walks raw score matrices in the same order can be
compared bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .ranking import RankingList

METRIC_KEYS = ("cmc1", "cmc5", "cmc10", "cmc1pct", "map", "n_queries")


@dataclass
class MetricsReport:
    cmc: dict[int, float]
    cmc_at_1pct: float
    mean_ap: float
    num_queries: int

    def to_json_dict(self) -> dict:
        return {
            "cmc1": self.cmc.get(1),
            "cmc5": self.cmc.get(5),
            "cmc10": self.cmc.get(10),
            "cmc1pct": self.cmc_at_1pct,
            "map": self.mean_ap,
            "n_queries": self.num_queries,
        }


def _check_relevance(rankings: Sequence[RankingList],
                     relevance: Mapping[int, set]) -> None:
    for r in rankings:
        relevant = relevance.get(r.query_id)
        if not relevant:
            raise ValueError(f"query {r.query_id} has no relevant gallery item")


def cmc_at_k(rankings: Sequence[RankingList], relevance: Mapping[int, set],
             k: int, query_landmarks: Mapping[int, int] | None = None) -> float:
    """Fraction of queries whose top-k contains a relevant item.

    With ``query_landmarks`` the per-query hits are first averaged within each
    landmark, then across landmarks.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1 (got {k})")
    _check_relevance(rankings, relevance)
    hits = []
    for r in rankings:
        relevant = relevance[r.query_id]
        hits.append(1.0 if any(g in relevant for g in r.gallery_ids[:k]) else 0.0)
    if query_landmarks is None:
        return sum(hits) / len(hits)
    groups: dict[int, list[float]] = {}
    for r, h in zip(rankings, hits):
        groups.setdefault(query_landmarks[r.query_id], []).append(h)
    per_landmark = [sum(v) / len(v) for _, v in sorted(groups.items())]
    return sum(per_landmark) / len(per_landmark)


def cmc_at_1pct(rankings: Sequence[RankingList], relevance: Mapping[int, set],
                gallery_size: int,
                query_landmarks: Mapping[int, int] | None = None) -> float:
    """CMC@K with K = ceil(1% of the gallery size), so K is always >= 1."""
    if gallery_size < 1:
        raise ValueError(f"gallery_size must be >= 1 (got {gallery_size})")
    return cmc_at_k(rankings, relevance, math.ceil(0.01 * gallery_size),
                    query_landmarks)


def average_precision(ranking: RankingList, relevant: set) -> float:
    hits = 0
    terms = []
    for pos, gid in enumerate(ranking.gallery_ids, start=1):
        if gid in relevant:
            hits += 1
            terms.append(hits / pos)
    if not terms:
        raise ValueError(f"query {ranking.query_id} has no relevant gallery item")
    return sum(terms) / len(terms)


def mean_average_precision(rankings: Sequence[RankingList],
                           relevance: Mapping[int, set]) -> float:
    _check_relevance(rankings, relevance)
    aps = [average_precision(r, relevance[r.query_id]) for r in rankings]
    return sum(aps) / len(aps)


def metrics_report(rankings: Sequence[RankingList], relevance: Mapping[int, set],
                   gallery_size: int, ks: Sequence[int] = (1, 5, 10),
                   query_landmarks: Mapping[int, int] | None = None) -> MetricsReport:
    cmc = {k: cmc_at_k(rankings, relevance, min(k, gallery_size), query_landmarks)
           for k in ks}
    return MetricsReport(
        cmc=cmc,
        cmc_at_1pct=cmc_at_1pct(rankings, relevance, gallery_size, query_landmarks),
        mean_ap=mean_average_precision(rankings, relevance),
        num_queries=len(rankings),
    )


def report_to_json(report: MetricsReport) -> str:
    return json.dumps(report.to_json_dict(), sort_keys=True) + "\n"


def reports_to_csv(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    """Aligned-column CSV, one row per (variant, report)."""
    header = ["variant", *METRIC_KEYS]
    table = [header]
    for name, report in rows:
        d = report.to_json_dict()
        table.append([name] + [
            f"{d[k]:.6f}" if isinstance(d[k], float) else str(d[k])
            for k in METRIC_KEYS
        ])
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = [",".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in table]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# ablation suites
# ---------------------------------------------------------------------------

ABLATION_SUITES = ("mapping-methods", "with-without-drone", "peer-steps",
                   "one-vs-two-branch", "alpha-sweep", "tau-sweep")


@dataclass
class AblationResult:
    suite: str
    rows: list[tuple[str, MetricsReport]]
    signs: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        return reports_to_csv(self.rows)

    def to_json(self) -> str:
        payload = {
            "suite": self.suite,
            "rows": [{"variant": name, **r.to_json_dict()} for name, r in self.rows],
            "signs": self.signs,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _sign(a: float, b: float) -> int:
    return (a > b) - (a < b)


def pairwise_signs(rows: Sequence[tuple[str, MetricsReport]],
                   metric: str = "cmc1pct") -> list[dict]:
    signs = []
    for i, (name_a, rep_a) in enumerate(rows):
        for name_b, rep_b in rows[i + 1 :]:
            va = rep_a.to_json_dict()[metric]
            vb = rep_b.to_json_dict()[metric]
            signs.append({"a": name_a, "b": name_b, "metric": metric,
                          "sign": _sign(va, vb)})
    return signs


def run_ablation(suite: str, cfg, split=None, models=None) -> AblationResult:
    """Train (or reuse) models and emit one metrics row per variant.

    ``cfg`` is a RunConfig; ``split``/``models`` can be passed to reuse a
    trained pipeline, otherwise training runs in place with the config seed.
    """
    from . import pipeline  # local import: pipeline builds on these metrics

    if suite not in ABLATION_SUITES:
        raise ValueError(
            f"unknown ablation suite {suite!r}; valid suites: {', '.join(ABLATION_SUITES)}"
        )
    if split is None:
        split = pipeline.make_split(cfg)
    if models is None and suite != "tau-sweep":
        models = pipeline.train_all(cfg, split)

    rows: list[tuple[str, MetricsReport]] = []
    if suite == "mapping-methods":
        for mode in ("direct-cosine", "chain", "diffusion"):
            rows.append((mode, pipeline.evaluate_mode(cfg, split, models, mode)))
    elif suite == "with-without-drone":
        for mode in ("diffusion", "chain"):
            rows.append((f"{mode}+drones", pipeline.evaluate_mode(cfg, split, models, mode)))
        rows.append(("direct-cosine-no-drones",
                     pipeline.evaluate_mode(cfg, split, models, "direct-cosine")))
    elif suite == "peer-steps":
        base = pipeline.train_base_two_branch(cfg, split)
        rows.append(("two-branch", pipeline.evaluate_ground_drone(
            cfg, split, base[0], base[1])))
        rows.append(("two-branch+S", pipeline.evaluate_ground_drone(
            cfg, split, models.senior_ground, models.senior_drone)))
        rows.append(("two-branch+S+J", pipeline.evaluate_ground_drone(
            cfg, split, models.junior_ground, models.junior_drone)))
        rows.append(("two-branch+S+J+B", pipeline.evaluate_ground_drone(
            cfg, split, models.junior_ground, models.junior_drone, best_region=True)))
    elif suite == "one-vs-two-branch":
        one = pipeline.train_one_model(cfg, split)
        for task in ("ground-drone", "drone-satellite", "ground-satellite"):
            rows.append((f"one-model:{task}",
                         pipeline.evaluate_task(cfg, split, one, task, shared=True)))
            rows.append((f"two-branch:{task}",
                         pipeline.evaluate_task(cfg, split, models, task)))
    elif suite == "alpha-sweep":
        for alpha in cfg.alpha_sweep:
            rows.append((f"alpha={alpha}", pipeline.evaluate_mode(
                cfg, split, models, "diffusion", alpha=alpha)))
    elif suite == "tau-sweep":
        rows = pipeline.tau_sweep(cfg, split)

    return AblationResult(suite=suite, rows=rows, signs=pairwise_signs(rows))
