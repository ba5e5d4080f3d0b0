"""Per-class mining of frequent closed relation sets from fuzzy evaluations.

Transactions are training images; items are relation evaluations whose label
tuple mentions the target class (one-vs-all).  Support is the mean over
transactions of the minimum degree over the itemset, and the closure of an
itemset adds every item whose inclusion leaves support unchanged.  The miner
enumerates generators level-wise (an itemset none of whose items can be
dropped without raising support) and records their closures; the model for a
class keeps the frequent sets of maximal cardinality.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

SUPPORT_TOLERANCE = 1e-12

MODEL_SCHEMA = "relation-class-models"


class MiningBudgetExceeded(Exception):
    """Raised when the generator search outgrows an explicit work budget."""


@dataclass(frozen=True)
class RelationItem:
    """One evaluated relation over class labels (not segments)."""

    relation: str
    labels: tuple

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"labels in {self.relation!r} item must be distinct")

    def sort_key(self):
        return (self.relation, self.labels)


class TransactionTable:
    """Rows of degrees, one per training image, aligned with an item list."""

    def __init__(self, items, rows, image_ids=None):
        self.items = tuple(items)
        arr = np.array(rows, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError("transaction table needs at least one row")
        if arr.shape[1] != len(self.items):
            raise ValueError(
                f"row width {arr.shape[1]} does not match {len(self.items)} items"
            )
        if (arr < -1e-9).any() or (arr > 1 + 1e-9).any():
            raise ValueError("transaction degrees outside [0, 1]")
        np.clip(arr, 0.0, 1.0, out=arr)
        arr.setflags(write=False)
        self.rows = arr
        self.image_ids = tuple(image_ids) if image_ids is not None else None
        self.index = {item: i for i, item in enumerate(self.items)}

    @property
    def n_rows(self):
        return self.rows.shape[0]


@dataclass(frozen=True)
class FrequentSet:
    items: frozenset
    support: float

    def sort_key(self):
        return (len(self.items), sorted(i.sort_key() for i in self.items))


@dataclass
class ClassModel:
    """Mining result for one label: its threshold and the maximal-size
    frequent relation sets."""

    label: str
    threshold: float
    max_sets: tuple
    warning: Optional[str] = None


def build_transactions(evaluations, target_label) -> TransactionTable:
    """One-vs-all transaction table for a label.

    ``evaluations`` is a sequence of (EvaluationTable, label map) pairs where
    the label map sends each segment id to its ground-truth label; every image
    must contain exactly one segment per label.  Items are all relation/label
    tuples that mention the target label in any argument position.
    """
    if not evaluations:
        raise ValueError("no training evaluations")
    first_map = evaluations[0][1]
    labels = tuple(sorted(set(first_map.values())))
    if target_label not in labels:
        raise ValueError(f"target label {target_label!r} not among training labels")

    arities = {}
    for (relation, seg_tuple) in evaluations[0][0].entries:
        arities[relation] = len(seg_tuple)

    candidates = []
    for relation in sorted(arities):
        if arities[relation] == 1:
            candidates.append(RelationItem(relation, (target_label,)))
        else:
            for other in labels:
                if other == target_label:
                    continue
                candidates.append(RelationItem(relation, (target_label, other)))
                candidates.append(RelationItem(relation, (other, target_label)))
    items = tuple(sorted(candidates, key=RelationItem.sort_key))

    rows = []
    image_ids = []
    for table, label_map in evaluations:
        segment_of = {}
        for seg_id, label in label_map.items():
            if label in segment_of:
                raise ValueError(
                    f"image {table.image_id!r} has two segments labelled {label!r}"
                )
            segment_of[label] = seg_id
        for label in labels:
            if label not in segment_of:
                raise ValueError(f"image {table.image_id!r} missing label {label!r}")
        row = []
        for item in items:
            seg_tuple = tuple(segment_of[l] for l in item.labels)
            try:
                row.append(table.entries[(item.relation, seg_tuple)])
            except KeyError:
                raise ValueError(
                    f"image {table.image_id!r} lacks an evaluation of "
                    f"{item.relation!r} on segments {seg_tuple}"
                ) from None
        rows.append(row)
        image_ids.append(table.image_id)
    return TransactionTable(items, rows, image_ids)


def _item_indices(itemset, table: TransactionTable):
    try:
        return [table.index[item] for item in itemset]
    except KeyError as exc:
        raise ValueError(f"unknown item {exc.args[0]!r}") from None


def fuzzy_support(itemset, table: TransactionTable) -> float:
    """Mean over transactions of the min degree over the itemset; 1 when empty."""
    idx = _item_indices(itemset, table)
    if not idx:
        return 1.0
    return float(table.rows[:, idx].min(axis=1).mean())


def closure(itemset, table: TransactionTable) -> frozenset:
    """Support-preserving extension: add every item whose inclusion keeps the
    support unchanged (within tolerance)."""
    idx = _item_indices(itemset, table)
    if idx:
        row_min = table.rows[:, idx].min(axis=1)
    else:
        row_min = np.ones(table.n_rows)
    support = row_min.mean()
    extended = np.minimum(row_min[:, None], table.rows).mean(axis=0)
    keep = np.nonzero(extended >= support - SUPPORT_TOLERANCE)[0]
    return frozenset(table.items[i] for i in keep)


def mine_frequent_closed(table: TransactionTable, threshold: float,
                         max_generators: Optional[int] = None) -> set:
    """All frequent closed itemsets, as FrequentSet values.

    Level-wise search over generators: an itemset is a generator when every
    item strictly lowers the support of the rest, which with min-aggregation
    bounds generator size by the number of rows.  Every frequent closed set
    is the closure of some frequent generator, so recording closures of the
    generators (plus the closure of the empty set) is exhaustive.  The empty
    itemset itself is never reported.

    ``max_generators`` bounds the search for callers probing pathologically
    low thresholds; exceeding it raises MiningBudgetExceeded.
    """
    if not (0 < threshold <= 1):
        raise ValueError(f"threshold {threshold!r} outside (0, 1]")
    rows = table.rows
    n, m = rows.shape
    tol = SUPPORT_TOLERANCE

    closed = {}

    def record(row_min, support):
        extended = np.minimum(row_min[:, None], rows).mean(axis=0)
        key = frozenset(np.nonzero(extended >= support - tol)[0].tolist())
        if key and key not in closed:
            closed[key] = support

    column_support = rows.mean(axis=0)
    full_columns = np.nonzero(column_support >= 1.0 - tol)[0]
    if full_columns.size:
        closed[frozenset(full_columns.tolist())] = 1.0

    generators = {}
    level = []
    for j in range(m):
        support = float(column_support[j])
        if support < threshold:
            continue
        if support >= 1.0 - tol:
            continue  # not a generator; covered by the closure of the empty set
        generators[(j,)] = support
        row_min = rows[:, j]
        record(row_min, support)
        level.append(((j,), row_min, support))

    produced = len(level)
    while level:
        buckets = defaultdict(list)
        for entry in level:
            buckets[entry[0][:-1]].append(entry)
        next_level = []
        for prefix_group in buckets.values():
            prefix_group.sort(key=lambda e: e[0])
            for i in range(len(prefix_group)):
                tuple_a, row_min_a, _ = prefix_group[i]
                for k in range(i + 1, len(prefix_group)):
                    tuple_b = prefix_group[k][0]
                    candidate = tuple_a + (tuple_b[-1],)
                    subsets = [candidate[:p] + candidate[p + 1:]
                               for p in range(len(candidate))]
                    if any(s not in generators for s in subsets):
                        continue
                    row_min = np.minimum(row_min_a, rows[:, candidate[-1]])
                    support = float(row_min.mean())
                    if support < threshold:
                        continue
                    if any(support >= generators[s] - tol for s in subsets):
                        continue  # support ties a subset: not a generator
                    generators[candidate] = support
                    record(row_min, support)
                    next_level.append((candidate, row_min, support))
                    produced += 1
                    if max_generators is not None and produced > max_generators:
                        raise MiningBudgetExceeded(
                            f"more than {max_generators} generators at threshold "
                            f"{threshold}"
                        )
        level = next_level

    return {
        FrequentSet(frozenset(table.items[i] for i in key), support)
        for key, support in closed.items()
        if support >= threshold
    }


def maximal_frequent(closed_sets, threshold: float) -> set:
    """Frequent sets of maximal cardinality.

    The closure of any frequent set is a frequent closed superset with equal
    support, so the maximal-size frequent sets are exactly the maximal-size
    frequent closed sets: a cardinality filter suffices.
    """
    frequent = [fs for fs in closed_sets if fs.support >= threshold]
    if not frequent:
        return set()
    top = max(len(fs.items) for fs in frequent)
    return {fs for fs in frequent if len(fs.items) == top}


def build_class_models(evaluations, labels, thresholds,
                       max_generators: Optional[int] = None) -> dict:
    """Mine one ClassModel per label (one-vs-all), each at its own threshold."""
    models = {}
    for label in labels:
        if label not in thresholds:
            raise ValueError(f"no threshold given for label {label!r}")
        threshold = thresholds[label]
        if not (0 < threshold <= 1):
            raise ValueError(f"threshold {threshold!r} for {label!r} outside (0, 1]")
        table = build_transactions(evaluations, label)
        closed_sets = mine_frequent_closed(table, threshold, max_generators)
        max_sets = maximal_frequent(closed_sets, threshold)
        warning = None
        if not max_sets:
            warning = f"class {label!r} underfit at threshold {threshold}"
            logger.warning(warning)
        ordered = tuple(sorted(max_sets, key=FrequentSet.sort_key))
        models[label] = ClassModel(label, threshold, ordered, warning)
    return models


def save_models(models: dict, path):
    """Write class models as line-oriented JSON (the trained-model artifact)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": MODEL_SCHEMA, "version": 1}) + "\n")
        for label in sorted(models):
            model = models[label]
            record = {
                "label": model.label,
                "threshold": model.threshold,
                "warning": model.warning,
                "max_sets": [
                    {
                        "support": fs.support,
                        "items": [
                            {"relation": item.relation, "labels": list(item.labels)}
                            for item in sorted(fs.items, key=RelationItem.sort_key)
                        ],
                    }
                    for fs in model.max_sets
                ],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_models(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise ValueError(f"empty model file {path}")
    header = json.loads(lines[0])
    if header.get("schema") != MODEL_SCHEMA:
        raise ValueError(f"{path} is not a model file (schema {header.get('schema')!r})")
    models = {}
    for line in lines[1:]:
        rec = json.loads(line)
        max_sets = tuple(
            FrequentSet(
                frozenset(RelationItem(i["relation"], tuple(i["labels"]))
                          for i in entry["items"]),
                entry["support"],
            )
            for entry in rec["max_sets"]
        )
        models[rec["label"]] = ClassModel(rec["label"], rec["threshold"],
                                          max_sets, rec["warning"])
    return models
