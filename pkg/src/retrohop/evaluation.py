"""Metrics, ranking baselines, and the inference benchmark.

Two accuracy notions: template top-k (is the labeled template among the
first k ranked ids) and reactant top-k (is the ground-truth reactant set
among the first k successfully generated candidate sets, compared by
canonical-SMILES set equality).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .chemgraph import (
    ReactionTemplate,
    RewriteError,
    apply_template,
    canonical_smiles,
    parse_smiles,
)
from .data import ReactionRecord
from .fingerprints import path_fp
from .screen import fpf_check

DEFAULT_BUDGETS = (1, 3, 5, 10, 20, 50)

_Z95 = 1.959963984540054


@dataclass(frozen=True)
class RankedPrediction:
    record_id: str
    label: int
    ranked_template_ids: tuple[int, ...]

    def rank_of_label(self) -> int | None:
        """0-based rank, or None if the label was not ranked."""
        try:
            return self.ranked_template_ids.index(self.label)
        except ValueError:
            return None


def model_rankings(model, records: list[ReactionRecord]) -> list[RankedPrediction]:
    """Rank the full template set for every record with one batched pass."""
    if not records:
        return []
    fps = model.featurizer.matrix([r.product_mol() for r in records])
    p = model.forward_batch(fps)
    out = []
    for col, r in enumerate(records):
        ranked = tuple(int(t) for t in model.rank_templates(p[:, col]))
        out.append(RankedPrediction(record_id=r.id, label=r.template_id, ranked_template_ids=ranked))
    return out


def template_topk(predictions: list[RankedPrediction], k: int) -> float:
    if not predictions:
        raise ValueError("no predictions")
    hits = sum(
        1
        for p in predictions
        if (rank := p.rank_of_label()) is not None and rank < k
    )
    return hits / len(predictions)


def reactant_topk(
    records: list[ReactionRecord],
    predictions: list[RankedPrediction],
    templates_by_id: dict[int, ReactionTemplate],
    k: int,
    use_screen: bool = True,
    width: int = 4096,
) -> float:
    """Fraction of records whose true reactant set appears among the
    first k candidate sets produced by executing templates in rank order.

    The budget counts produced candidate sets, not attempted templates;
    templates that fail to apply do not consume it.
    """
    if len(records) != len(predictions):
        raise ValueError("records and predictions differ in length")
    hits = 0
    for r, pred in zip(records, predictions):
        mol = parse_smiles(r.product)
        truth = tuple(sorted(canonical_smiles(parse_smiles(s)) for s in r.reactants))
        mol_bits = path_fp(mol, width) if use_screen else None
        produced = 0
        found = False
        for tid in pred.ranked_template_ids:
            if produced >= k or found:
                break
            t = templates_by_id[tid]
            if use_screen and not fpf_check(path_fp(t.product_pattern, width), mol_bits):
                continue
            try:
                outcomes = apply_template(t, mol)
            except RewriteError:
                continue
            for reactants in outcomes:
                if produced >= k:
                    break
                produced += 1
                key = tuple(sorted(canonical_smiles(m) for m in reactants))
                if key == truth:
                    found = True
                    break
        hits += int(found)
    return hits / len(records)


# ---------------------------------------------------------------------------
# baselines


def _popularity_order(templates: list[ReactionTemplate]) -> list[int]:
    return [
        t.id
        for t in sorted(templates, key=lambda t: (-t.train_count, t.id))
    ]


def popularity_rank(templates: list[ReactionTemplate]) -> tuple[int, ...]:
    """Global ranking by training count, ties by ascending id."""
    return tuple(_popularity_order(templates))


def pop_fpf_rank(
    templates: list[ReactionTemplate],
    record: ReactionRecord,
    width: int = 4096,
) -> tuple[int, ...]:
    """Popularity ranking with screen survivors promoted to the front."""
    mol_bits = path_fp(parse_smiles(record.product), width)
    survives = {
        t.id: fpf_check(path_fp(t.product_pattern, width), mol_bits) for t in templates
    }
    order = _popularity_order(templates)
    return tuple([t for t in order if survives[t]] + [t for t in order if not survives[t]])


def pop_app_rank(
    templates: list[ReactionTemplate],
    applicable_ids: set[int],
) -> tuple[int, ...]:
    """Popularity ranking with exactly-applicable templates promoted."""
    order = _popularity_order(templates)
    return tuple(
        [t for t in order if t in applicable_ids]
        + [t for t in order if t not in applicable_ids]
    )


def baseline_rankings(
    templates: list[ReactionTemplate],
    records: list[ReactionRecord],
    mode: str = "pop",
    applicability_rows: list[tuple[int, ...]] | None = None,
    width: int = 4096,
) -> list[RankedPrediction]:
    out = []
    if mode == "pop":
        ranking = popularity_rank(templates)
    for i, r in enumerate(records):
        if mode == "pop":
            ranked = ranking
        elif mode == "pop-fpf":
            ranked = pop_fpf_rank(templates, r, width)
        elif mode == "pop-app":
            ranked = pop_app_rank(templates, set(applicability_rows[i]))
        else:
            raise ValueError(f"unknown baseline mode {mode!r}")
        out.append(RankedPrediction(record_id=r.id, label=r.template_id, ranked_template_ids=ranked))
    return out


# ---------------------------------------------------------------------------
# bucketed accuracy


def wilson_interval(hits: int, n: int, z: float = _Z95) -> tuple[float, float]:
    """95 % score interval for a binomial proportion."""
    if n == 0:
        raise ValueError("empty sample")
    p = hits / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def bucketed_accuracy(
    predictions: list[RankedPrediction],
    bucket_of_template: dict[int, str],
    bucket_order: list[str],
    k: int,
) -> dict[str, dict | None]:
    """Top-k accuracy per training-count bucket with a Wilson 95 % CI.

    Buckets with no samples map to None.
    """
    grouped: dict[str, list[RankedPrediction]] = {b: [] for b in bucket_order}
    for p in predictions:
        grouped[bucket_of_template[p.label]].append(p)
    out: dict[str, dict | None] = {}
    for b in bucket_order:
        preds = grouped[b]
        if not preds:
            out[b] = None
            continue
        hits = sum(
            1
            for p in preds
            if (rank := p.rank_of_label()) is not None and rank < k
        )
        lo, hi = wilson_interval(hits, len(preds))
        out[b] = {"n": len(preds), "accuracy": hits / len(preds), "ci95": (lo, hi)}
    return out


# ---------------------------------------------------------------------------
# inference benchmark


@dataclass
class BenchRow:
    budget: int
    median_seconds: float
    mols_per_second: float
    mean_executed: float
    accuracy: float  # reactant top-k accuracy at k = budget
    coverage: float  # fraction of records hitting the budget or exhausting


@dataclass
class BenchReport:
    rows: list[BenchRow]
    use_screen: bool
    repeats: int
    fingerprint_seconds: float
    forward_seconds: float

    def summary(self) -> str:
        lines = [
            f"screen={self.use_screen} repeats={self.repeats} "
            f"fingerprint={self.fingerprint_seconds:.4f}s forward={self.forward_seconds:.4f}s"
        ]
        for r in self.rows:
            lines.append(
                f"budget={r.budget}\tmedian_seconds={r.median_seconds:.6f}\t"
                f"mols_per_second={r.mols_per_second:.2f}\t"
                f"mean_executed={r.mean_executed:.2f}\taccuracy={r.accuracy:.3f}\t"
                f"coverage={r.coverage:.3f}"
            )
        return "\n".join(lines) + "\n"


def _run_budget(records, predictions, templates_by_id, tbits, mol_bits, truths, budget, use_screen):
    """One pass; returns (seconds, executions, records filled, hits)."""
    executed = 0
    filled = 0
    hits = 0
    t0 = time.perf_counter()
    for i, (r, pred) in enumerate(zip(records, predictions)):
        mol = parse_smiles(r.product)
        produced = 0
        found = False
        for tid in pred.ranked_template_ids:
            if produced >= budget:
                break
            if use_screen and tbits[tid].bits & ~mol_bits[i].bits != 0:
                continue
            executed += 1
            try:
                outcomes = apply_template(templates_by_id[tid], mol)
            except RewriteError:
                continue
            for reactants in outcomes:
                if produced >= budget:
                    break
                produced += 1
                if tuple(sorted(canonical_smiles(m) for m in reactants)) == truths[i]:
                    found = True
        filled += int(produced >= budget)
        hits += int(found)
    return time.perf_counter() - t0, executed, filled, hits


def bench_inference(
    model,
    records: list[ReactionRecord],
    templates: list[ReactionTemplate],
    budgets=DEFAULT_BUDGETS,
    repeats: int = 3,
    use_screen: bool = True,
    width: int = 4096,
) -> BenchReport:
    """Wall-clock cost of producing k reactant candidates per product.

    Ranks once, then times the execution phase per budget: median of
    ``repeats`` runs after one warm-up pass.
    """
    if repeats < 3:
        raise ValueError("need at least 3 repeats for a stable median")
    t0 = time.perf_counter()
    mols = [parse_smiles(r.product) for r in records]
    fps = model.featurizer.matrix(mols)
    mol_bits = [path_fp(m, width) for m in mols]
    t1 = time.perf_counter()
    p = model.forward_batch(fps)
    predictions = [
        RankedPrediction(
            record_id=r.id,
            label=r.template_id,
            ranked_template_ids=tuple(int(t) for t in model.rank_templates(p[:, col])),
        )
        for col, r in enumerate(records)
    ]
    t2 = time.perf_counter()
    templates_by_id = {t.id: t for t in templates}
    tbits = {t.id: path_fp(t.product_pattern, width) for t in templates}
    truths = [
        tuple(sorted(canonical_smiles(parse_smiles(s)) for s in r.reactants))
        for r in records
    ]

    rows = []
    for budget in sorted(budgets):
        _run_budget(
            records, predictions, templates_by_id, tbits, mol_bits, truths, budget, use_screen
        )
        times, execs, fills, hits = [], [], [], []
        for _ in range(repeats):
            secs, executed, filled, hit = _run_budget(
                records, predictions, templates_by_id, tbits, mol_bits, truths, budget, use_screen
            )
            times.append(secs)
            execs.append(executed)
            fills.append(filled)
            hits.append(hit)
        med = float(np.median(times))
        rows.append(
            BenchRow(
                budget=budget,
                median_seconds=med,
                mols_per_second=len(records) / med if med > 0 else float("inf"),
                mean_executed=float(np.mean(execs)) / len(records),
                accuracy=hits[0] / len(records),
                coverage=float(np.mean(fills)) / len(records),
            )
        )
    return BenchReport(
        rows=rows,
        use_screen=use_screen,
        repeats=repeats,
        fingerprint_seconds=t1 - t0,
        forward_seconds=t2 - t1,
    )


# ---------------------------------------------------------------------------
# embedding export


def export_embeddings(model, position: int = 0) -> str:
    """Stored template patterns as a tab-separated table with a header."""
    emb = model.template_embeddings(position)
    d = emb.shape[1]
    header = "template_id\t" + "\t".join(f"e{i}" for i in range(d))
    lines = [header]
    for t, row in zip(model.templates, emb):
        lines.append(str(t.id) + "\t" + "\t".join(f"{v:.8g}" for v in row))
    return "\n".join(lines) + "\n"
