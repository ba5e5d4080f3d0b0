"""Natural-language explanations for annotations: "output BECAUSE causes".

Every constraint touching an annotated label becomes one clause, realized
from the relation's linguistic template; the least satisfied of them sets a
certainty hedge that moderates the sentence.
"""

from __future__ import annotations

from dataclasses import dataclass

from .fcsp import Solution
from .relations import Vocabulary


@dataclass(frozen=True)
class HedgeScale:
    """Ordered (lower bound, hedge word) pairs with strictly decreasing
    bounds, the last at 0 so the scale covers [0, 1]."""

    entries: tuple

    def __post_init__(self):
        bounds = [b for b, _ in self.entries]
        if not bounds or any(b2 >= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError("hedge bounds must be strictly decreasing")
        if bounds[-1] != 0.0:
            raise ValueError("hedge scale must cover [0, 1] (last bound 0)")

    def word_for(self, degree: float) -> str:
        for bound, word in self.entries:
            if degree >= bound:
                return word
        return self.entries[-1][1]

    @property
    def words(self):
        return tuple(word for _, word in self.entries)


DEFAULT_HEDGES = HedgeScale(((0.9, "very likely"), (0.7, "likely"),
                             (0.5, "possibly"), (0.0, "uncertain")))

NO_SUPPORT_TEXT = "no learned relations support this label"


@dataclass
class Explanation:
    """One annotated segment with its hedge, causes and final sentence.

    ``causes`` is an ordered tuple of (constraint, degree, clause); it is
    empty only for the fallback explanation of a label no constraint touches.
    """

    segment_id: int
    label: str
    hedge: str
    causes: tuple
    text: str


def constraints_for_label(solution: Solution, label: str):
    """All of the solution's constraints whose role tuple contains the label,
    with their grounded degrees, sorted by descending degree."""
    if label not in solution.assignment.values():
        raise ValueError(f"label {label!r} is not assigned in the solution")
    matches = [
        (c, degree)
        for c, degree in solution.constraint_degrees
        if label in c.labels
    ]
    matches.sort(key=lambda pair: (-pair[1], pair[0].sort_key()))
    return matches


def certainty(degrees, scale: HedgeScale = DEFAULT_HEDGES) -> str:
    """Hedge word for the least satisfied constraint."""
    values = list(degrees)
    if not values:
        raise ValueError("certainty needs at least one degree")
    return scale.word_for(min(values))


def display_label(label: str) -> str:
    return label.replace("_", " ")


def render_clause(constraint, label: str, vocab: Vocabulary,
                  segment_of: dict) -> str:
    """Instantiate the relation template: the explained label reads "it", the
    partner reads as its display name with its segment id in parentheses."""
    template = vocab.by_id[constraint.relation].template
    phrases = []
    for role in constraint.labels:
        if role == label:
            phrases.append("it")
        else:
            phrases.append(f"the {display_label(role)} (organ {segment_of[role]})")
    return template.format(*phrases)


def _join_clauses(clauses) -> str:
    if len(clauses) == 1:
        return clauses[0]
    return ", ".join(clauses[:-1]) + " and " + clauses[-1]


def realize(segment_id, label: str, hedge: str, clauses) -> str:
    """Deterministic sentence "Organ <id> is <hedge> to be annotated as the
    <label> because <clauses>."."""
    name = display_label(label)
    if not clauses:
        return (f"Organ {segment_id} is annotated as the {name} by elimination "
                f"because {NO_SUPPORT_TEXT}.")
    return (f"Organ {segment_id} is {hedge} to be annotated as the {name} "
            f"because {_join_clauses(list(clauses))}.")


def explain_solution(solution: Solution, vocab: Vocabulary,
                     scale: HedgeScale = DEFAULT_HEDGES):
    """One Explanation per annotated segment, in segment id order."""
    segment_of = {label: seg for seg, label in solution.assignment.items()}
    explanations = []
    for segment_id, label in sorted(solution.assignment.items()):
        pairs = constraints_for_label(solution, label)
        if not pairs:
            explanations.append(Explanation(
                segment_id, label, scale.words[-1], (),
                realize(segment_id, label, scale.words[-1], ()),
            ))
            continue
        hedge = certainty([d for _, d in pairs], scale)
        causes = tuple(
            (c, degree, render_clause(c, label, vocab, segment_of))
            for c, degree in pairs
        )
        text = realize(segment_id, label, hedge, [clause for _, _, clause in causes])
        explanations.append(Explanation(segment_id, label, hedge, causes, text))
    return explanations


def explanation_record(explanation: Explanation) -> dict:
    """JSON-able structured record so downstream tools can audit explanations."""
    return {
        "segment": explanation.segment_id,
        "label": explanation.label,
        "hedge": explanation.hedge,
        "causes": [
            {
                "relation": c.relation,
                "labels": list(c.labels),
                "degree": degree,
                "clause": clause,
            }
            for c, degree, clause in explanation.causes
        ],
        "text": explanation.text,
    }
