"""Flexible constraint satisfaction over segment labelings.

Mined relation sets become graded constraints over label roles.  Annotating a
test image means finding the AllDifferent assignment of labels to segments
that maximizes the minimum constraint degree.  The search is backtracking
branch-and-bound: the minimum over already-grounded constraints bounds any
completion from above (ungrounded constraints count optimistically as 1), and
arc-consistency pruning is re-run as the incumbent improves.

Equal-consistency ties are resolved by larger total degree, then by the
lexicographically smallest (segment id, label) assignment, so results are
deterministic and independent of search order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .relations import EvaluationTable


@dataclass(frozen=True)
class FlexibleConstraint:
    """A graded constraint on label roles, e.g. (right_kidney, left_kidney)
    under "to the right of"; ``sources`` are the classes whose maximal
    frequent sets produced it."""

    relation: str
    labels: tuple
    sources: frozenset = frozenset()

    def sort_key(self):
        return (self.relation, self.labels)


class DomainWipeout(Exception):
    """A domain emptied during arc consistency: proof that no assignment
    exceeds the level, not a failure."""

    def __init__(self, alpha, segment_id):
        super().__init__(f"inconsistent at level {alpha}: "
                         f"segment {segment_id} has no surviving label")
        self.alpha = alpha
        self.segment_id = segment_id


@dataclass
class FcspInstance:
    segment_ids: tuple
    labels: tuple
    constraints: tuple
    table: dict
    domains: dict


@dataclass
class Solution:
    """Best assignment found, with its consistency and the degree of every
    constraint under it."""

    assignment: dict
    consistency: float
    constraint_degrees: tuple


def translate_constraints(models: dict) -> tuple:
    """Union of constraints from every maximal frequent set of every class.

    Identical (relation, label tuple) constraints mined for several classes
    merge into one, retaining all source labels.
    """
    merged = {}
    for label in sorted(models):
        for frequent_set in models[label].max_sets:
            for item in frequent_set.items:
                merged.setdefault((item.relation, item.labels), set()).add(label)
    if not merged:
        raise ValueError("no constraints learned")
    return tuple(
        FlexibleConstraint(relation, labels, frozenset(sources))
        for (relation, labels), sources in sorted(merged.items())
    )


def build_instance(constraints, evaluation: EvaluationTable, labels,
                   segment_ids=None) -> FcspInstance:
    """FCSP for one test image: a variable per segment, every domain the full
    label set, constraints grounded against the image's evaluation table."""
    if segment_ids is None:
        ids = set()
        for (_, seg_tuple) in evaluation.entries:
            ids.update(seg_tuple)
        if not ids:
            raise ValueError("cannot derive segment ids from an empty evaluation")
        segment_ids = ids
    segments = tuple(sorted(segment_ids))
    label_set = tuple(sorted(labels))
    constraints = tuple(constraints)
    table = dict(evaluation.entries)
    for c in constraints:
        for role in c.labels:
            if role not in label_set:
                raise ValueError(f"constraint role {role!r} is not a known label")
        if len(c.labels) == 1:
            needed = [(c.relation, (s,)) for s in segments]
        else:
            needed = [(c.relation, (s1, s2))
                      for s1 in segments for s2 in segments if s1 != s2]
        for key in needed:
            if key not in table:
                raise ValueError(
                    f"missing evaluation for relation {c.relation!r} on "
                    f"segments {key[1]}"
                )
    domains = {s: frozenset(label_set) for s in segments}
    return FcspInstance(segments, label_set, constraints, table, domains)


def constraint_degree(constraint: FlexibleConstraint, assignment: dict,
                      table: dict) -> Optional[float]:
    """Grounded degree of the constraint under a partial assignment, or None
    while any role label is unassigned (optimistically 1 for bounding)."""
    segment_of = {label: seg for seg, label in assignment.items()}
    segments = []
    for role in constraint.labels:
        if role not in segment_of:
            return None
        segments.append(segment_of[role])
    return table[(constraint.relation, tuple(segments))]


def fac3_prune(instance: FcspInstance, alpha: float) -> dict:
    """Arc-consistency fixpoint at level alpha.

    A label survives in a segment's domain only while every constraint
    mentioning it can still be satisfied above alpha by some partner
    segment/label pair; unary constraints prune directly.  Sound: a value on
    any assignment of consistency strictly above alpha is never removed.
    """
    if alpha > 1.0 or alpha < -1e-6:
        raise ValueError(f"alpha {alpha!r} outside [0, 1]")
    table = instance.table
    segments = instance.segment_ids
    labels = instance.labels
    label_index = {l: i for i, l in enumerate(labels)}
    n = len(segments)
    dom = np.zeros((n, len(labels)), dtype=bool)
    for i, s in enumerate(segments):
        for l in instance.domains[s]:
            dom[i, label_index[l]] = True

    unary = []
    binary = []
    for c in instance.constraints:
        if len(c.labels) == 1:
            degrees = np.array([table[(c.relation, (s,))] for s in segments])
            unary.append((label_index[c.labels[0]], degrees > alpha))
        else:
            mat = np.full((n, n), -1.0)
            for i, s1 in enumerate(segments):
                for j, s2 in enumerate(segments):
                    if i != j:
                        mat[i, j] = table[(c.relation, (s1, s2))]
            binary.append((label_index[c.labels[0]], label_index[c.labels[1]],
                           mat > alpha))

    def check_wipeout():
        empty = ~dom.any(axis=1)
        if empty.any():
            raise DomainWipeout(alpha, segments[int(np.argmax(empty))])

    changed = True
    while changed:
        changed = False
        for role, keep in unary:
            new = dom[:, role] & keep
            if not np.array_equal(new, dom[:, role]):
                dom[:, role] = new
                changed = True
        for subject, reference, ok in binary:
            supported = (ok & dom[:, reference][None, :]).any(axis=1)
            new = dom[:, subject] & supported
            if not np.array_equal(new, dom[:, subject]):
                dom[:, subject] = new
                changed = True
            supported = (ok & dom[:, subject][:, None]).any(axis=0)
            new = dom[:, reference] & supported
            if not np.array_equal(new, dom[:, reference]):
                dom[:, reference] = new
                changed = True
        if changed:
            check_wipeout()
    check_wipeout()
    return {
        s: frozenset(labels[j] for j in np.nonzero(dom[i])[0])
        for i, s in enumerate(segments)
    }


@dataclass
class _Incumbent:
    consistency: float = -1.0
    degree_sum: float = -math.inf
    key: Optional[tuple] = None
    assignment: Optional[dict] = None

    def may_improve(self, bound_consistency, bound_sum) -> bool:
        """Keep a branch whose optimistic (consistency, sum) is not strictly
        below the incumbent; equality stays open for the lexicographic tie."""
        if bound_consistency != self.consistency:
            return bound_consistency > self.consistency
        return bound_sum >= self.degree_sum

    def offer(self, consistency, degree_sum, assignment):
        key = tuple(sorted(assignment.items()))
        better = (
            consistency > self.consistency
            or (consistency == self.consistency and degree_sum > self.degree_sum)
            or (consistency == self.consistency and degree_sum == self.degree_sum
                and (self.key is None or key < self.key))
        )
        if better:
            improved = consistency > self.consistency
            self.consistency = consistency
            self.degree_sum = degree_sum
            self.key = key
            self.assignment = dict(assignment)
            return improved
        return False


def solve(instance: FcspInstance) -> Solution:
    """Most-consistent AllDifferent labeling by branch-and-bound backtracking.

    Variable order: most-constrained (smallest live domain) first.  Value
    order: highest optimistic degree over the constraints the value grounds.
    Neither changes the returned optimum.
    """
    segments = instance.segment_ids
    labels = instance.labels
    if len(segments) != len(labels):
        raise ValueError(
            f"variable/label count mismatch: {len(segments)} segments for "
            f"{len(labels)} labels"
        )
    constraints = instance.constraints
    table = instance.table
    n_constraints = len(constraints)
    by_label = {y: [] for y in labels}
    for c in constraints:
        for role in set(c.labels):
            by_label[role].append(c)

    best = _Incumbent()

    def grounding(segment, label, segment_of):
        """Degrees of the constraints that assigning segment := label grounds."""
        degrees = []
        for c in by_label[label]:
            grounded_segments = []
            complete = True
            for role in c.labels:
                if role == label:
                    grounded_segments.append(segment)
                elif role in segment_of:
                    grounded_segments.append(segment_of[role])
                else:
                    complete = False
                    break
            if complete:
                degrees.append(table[(c.relation, tuple(grounded_segments))])
        return degrees

    def pick_variable(unassigned, domains, used):
        return min(
            unassigned,
            key=lambda s: (sum(1 for l in domains[s] if l not in used), s),
        )

    def greedy_dive(domains):
        """Follow the heuristics without backtracking to seed the incumbent."""
        segment_of, assignment, used = {}, {}, set()
        unassigned = set(segments)
        cur_min, cur_sum = 1.0, 0.0
        while unassigned:
            var = pick_variable(unassigned, domains, used)
            choice = None
            for label in sorted(domains[var]):
                if label in used:
                    continue
                degrees = grounding(var, label, segment_of)
                gmin = min(degrees) if degrees else 1.0
                candidate = (-gmin, label, degrees)
                if choice is None or candidate < choice:
                    choice = candidate
            _, label, degrees = choice
            assignment[var] = label
            segment_of[label] = var
            used.add(label)
            unassigned.discard(var)
            cur_min = min(cur_min, min(degrees)) if degrees else cur_min
            cur_sum += sum(degrees)
        best.offer(cur_min, cur_sum, assignment)

    def dfs(domains, unassigned, assignment, segment_of, used,
            cur_min, cur_sum, n_grounded):
        optimistic_sum = cur_sum + (n_constraints - n_grounded)
        if not best.may_improve(cur_min, optimistic_sum):
            return
        if not unassigned:
            best.offer(cur_min, cur_sum, assignment)
            return
        var = pick_variable(unassigned, domains, used)
        options = []
        for label in domains[var]:
            if label in used:
                continue
            degrees = grounding(var, label, segment_of)
            gmin = min(degrees) if degrees else 1.0
            options.append((-gmin, label, degrees))
        options.sort(key=lambda o: (o[0], o[1]))
        unassigned.discard(var)
        for _, label, degrees in options:
            assignment[var] = label
            segment_of[label] = var
            used.add(label)
            dfs(domains, unassigned, assignment, segment_of, used,
                min(cur_min, min(degrees)) if degrees else cur_min,
                cur_sum + sum(degrees),
                n_grounded + len(degrees))
            del assignment[var]
            del segment_of[label]
            used.discard(label)
        unassigned.add(var)

    domains = {s: frozenset(instance.domains[s]) for s in segments}
    if segments:
        greedy_dive(domains)
    # Alternate arc-consistency pruning with complete search until the
    # incumbent stops improving; pruning keeps every assignment that can
    # still reach the incumbent's consistency.
    while True:
        alpha = math.nextafter(best.consistency, -math.inf)
        try:
            domains = fac3_prune(replace(instance, domains=domains), alpha)
        except DomainWipeout:
            break
        before = best.consistency
        dfs(domains, set(segments), {}, {}, set(), 1.0, 0.0, 0)
        if best.consistency <= before:
            break

    assignment = dict(sorted(best.assignment.items())) if best.assignment else {}
    degrees = tuple(
        (c, constraint_degree(c, assignment, table)) for c in constraints
    )
    consistency = min((d for _, d in degrees), default=1.0)
    return Solution(assignment, consistency, degrees)


def solution_record(solution: Solution) -> dict:
    """JSON-able record of a solution (consumed by explanations and the CLI)."""
    return {
        "assignment": {str(seg): label for seg, label in sorted(solution.assignment.items())},
        "consistency": solution.consistency,
        "constraints": [
            {
                "relation": c.relation,
                "labels": list(c.labels),
                "sources": sorted(c.sources),
                "degree": degree,
            }
            for c, degree in solution.constraint_degrees
        ],
    }
