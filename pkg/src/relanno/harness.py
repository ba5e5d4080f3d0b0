"""Training and evaluation orchestration.

Relations are evaluated once per image; mining, solving and scoring all work
from the cached evaluation tables.  Per-class frequency thresholds are tuned
on inner folds with Bayesian optimization (Gaussian-process surrogate,
expected-improvement acquisition) or plain random search, and nested
cross-validation reports unbiased accuracy.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .dataset import nested_folds
from .fcsp import build_instance, solve, translate_constraints
from .mining import MiningBudgetExceeded, build_class_models
from .relations import SegmentSet, Vocabulary, evaluate_vocabulary

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "annotation-report"

GP_EI = "gaussian_process_ei"
RANDOM_SEARCH = "random_search"

FAILED_SCORE = -1.0


@dataclass
class TuningConfig:
    iterations: int = 20
    strategy: str = GP_EI
    search_range: tuple = (0.5, 1.0)
    seed: int = 0
    # Generator budget per class while probing candidate thresholds; a
    # candidate that blows it is scored as failed rather than mined forever.
    mining_budget: Optional[int] = 20000

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("tuning needs at least one iteration")
        if self.strategy not in (GP_EI, RANDOM_SEARCH):
            raise ValueError(f"unknown tuning strategy {self.strategy!r}")
        lo, hi = self.search_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"search range {self.search_range!r} outside (0, 1]")


@dataclass(frozen=True)
class AnnotatedEvaluation:
    """Evaluation table of one image plus its ground truth."""

    image_id: str
    table: object
    truth: dict
    segment_ids: tuple


@dataclass
class ImageRecord:
    image_id: str
    fold: int
    predicted: dict
    actual: dict
    consistency: Optional[float]


@dataclass
class FoldRecord:
    index: int
    train_images: tuple
    test_images: tuple
    thresholds: dict
    accuracy: float
    tuning_history: tuple


@dataclass
class EvaluationReport:
    folds: tuple
    images: tuple
    mean_accuracy: float
    phases: dict


@dataclass
class TuningResult:
    thresholds: dict
    history: tuple  # (thresholds, score) per iteration


def evaluate_images(dataset, vocab: Vocabulary):
    """Evaluate the vocabulary once per image; everything downstream reuses
    the resulting tables."""
    examples = []
    for image in dataset:
        table = evaluate_vocabulary(image, vocab)
        examples.append(AnnotatedEvaluation(
            image.image_id, table, image.labels(),
            tuple(s.id for s in image.segments),
        ))
    return examples


def accuracy(predictions, truths) -> float:
    """Fraction of correct annotations over all segments of all images."""
    predictions = list(predictions)
    truths = list(truths)
    if len(predictions) != len(truths):
        raise ValueError(
            f"{len(predictions)} predictions against {len(truths)} ground truths"
        )
    if not predictions:
        raise ValueError("no predictions to score")
    correct = sum(1 for p, t in zip(predictions, truths) if p == t)
    return correct / len(predictions)


def fit_and_score(train, test, labels, thresholds,
                  mining_budget: Optional[int] = None, fold: int = -1):
    """Mine class models on the training tables, translate constraints, solve
    every test image and score accuracy.

    An unsolvable test image records per-segment failures (predictions of
    None) instead of aborting the run.
    """
    models = build_class_models(
        [(ex.table, ex.truth) for ex in train], labels, thresholds, mining_budget
    )
    constraints = translate_constraints(models)
    records = []
    predicted_flat = []
    truth_flat = []
    for ex in test:
        try:
            instance = build_instance(constraints, ex.table, labels, ex.segment_ids)
            solution = solve(instance)
            predicted = dict(solution.assignment)
            consistency = solution.consistency
        except Exception as exc:
            logger.warning("image %r not solvable: %s", ex.image_id, exc)
            predicted = {s: None for s in ex.segment_ids}
            consistency = None
        records.append(ImageRecord(ex.image_id, fold, predicted, dict(ex.truth),
                                   consistency))
        for seg in ex.segment_ids:
            predicted_flat.append(predicted.get(seg))
            truth_flat.append(ex.truth[seg])
    return accuracy(predicted_flat, truth_flat), records, models


def _gp_expected_improvement(observed_x, observed_y, candidates,
                             length_scale=0.1, noise=1e-4):
    """EI of candidate threshold vectors under a squared-exponential GP fit
    to the observations (unit kernel variance)."""
    X = np.asarray(observed_x)
    y = np.asarray(observed_y)
    C = np.asarray(candidates)

    def kernel(a, b):
        sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-sq / (2.0 * length_scale ** 2))

    K = kernel(X, X) + noise * np.eye(len(X))
    L = np.linalg.cholesky(K)
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, y))
    k_star = kernel(X, C)
    mu = k_star.T @ alpha
    v = np.linalg.solve(L, k_star)
    var = np.clip(1.0 - (v * v).sum(axis=0), 1e-12, None)
    sigma = np.sqrt(var)
    best = y.max()
    improvement = mu - best
    z = improvement / sigma
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return improvement * ndtr(z) + sigma * pdf


def tune_thresholds(train, labels, inner_folds, config: TuningConfig) -> TuningResult:
    """Pick per-class frequency thresholds maximizing mean inner-fold accuracy.

    Each iteration proposes one threshold vector (GP-EI over 512 sampled
    candidates after a short random warm-up, or uniform random under
    random_search), trains on inner-train and scores on the held-out inner
    fold.  Ties prefer higher mean thresholds (sparser constraint sets).
    Deterministic under the config seed.
    """
    labels = list(labels)
    rng = np.random.default_rng(config.seed)
    lo, hi = config.search_range
    by_id = {ex.image_id: ex for ex in train}

    splits = []
    for validation_ids in inner_folds:
        validation = [by_id[i] for i in validation_ids]
        fit = [ex for ex in train if ex.image_id not in set(validation_ids)]
        splits.append((fit, validation))

    def score(vector):
        thresholds = dict(zip(labels, vector))
        fold_scores = []
        for fit, validation in splits:
            try:
                acc, _, _ = fit_and_score(fit, validation, labels, thresholds,
                                          config.mining_budget)
            except (ValueError, MiningBudgetExceeded) as exc:
                logger.debug("candidate %s failed: %s", vector, exc)
                return FAILED_SCORE, str(exc)
            fold_scores.append(acc)
        return float(np.mean(fold_scores)), None

    history = []
    observed_x = []
    observed_y = []
    best = None  # (score, mean threshold, vector)
    n_warmup = min(5, config.iterations)
    all_failed_no_constraints = True
    for iteration in range(config.iterations):
        if config.strategy == RANDOM_SEARCH or iteration < n_warmup or best is None:
            vector = rng.uniform(lo, hi, size=len(labels))
        else:
            candidates = rng.uniform(lo, hi, size=(512, len(labels)))
            ei = _gp_expected_improvement(observed_x, observed_y, candidates)
            vector = candidates[int(np.argmax(ei))]
        vector = np.asarray(vector, dtype=float)
        value, failure = score(vector)
        if failure is None or "no constraints" not in failure:
            all_failed_no_constraints = all_failed_no_constraints and value == FAILED_SCORE
        observed_x.append(vector)
        observed_y.append(value)
        history.append((dict(zip(labels, vector.tolist())), value))
        key = (value, float(vector.mean()))
        if value > FAILED_SCORE and (best is None or key > best[0]):
            best = (key, vector)
    if best is None:
        if all_failed_no_constraints:
            raise ValueError(
                "search range too high: every candidate produced no constraints"
            )
        raise ValueError("threshold tuning failed for every candidate")
    thresholds = dict(zip(labels, best[1].tolist()))
    return TuningResult(thresholds, tuple(history))


def nested_cv(examples, outer_k: int, inner_k: int, config: TuningConfig,
              labels=None) -> EvaluationReport:
    """Nested cross-validation over pre-evaluated images.

    Per outer fold: tune thresholds on the outer-train via its inner folds,
    retrain on the full outer-train, solve each outer-test image, and score.
    Every image is tagged with the phases that consumed it, so leakage is
    checkable from the report alone.
    """
    examples = list(examples)
    if labels is None:
        labels = sorted(set(examples[0].truth.values()))
    plan = nested_folds([ex.image_id for ex in examples], outer_k, inner_k,
                        config.seed)
    by_id = {ex.image_id: ex for ex in examples}
    phases = {ex.image_id: [] for ex in examples}
    fold_records = []
    image_records = []
    for index, fold in enumerate(plan):
        train = [by_id[i] for i in fold.train]
        test = [by_id[i] for i in fold.test]
        for image_id in fold.train:
            phases[image_id].extend([f"tune@fold{index}", f"train@fold{index}"])
        for image_id in fold.test:
            phases[image_id].append(f"test@fold{index}")
        tuning = tune_thresholds(train, labels, fold.inner, config)
        acc, records, _ = fit_and_score(train, test, labels, tuning.thresholds,
                                        config.mining_budget, fold=index)
        fold_records.append(FoldRecord(index, fold.train, fold.test,
                                       tuning.thresholds, acc, tuning.history))
        image_records.extend(records)
    mean_accuracy = float(np.mean([f.accuracy for f in fold_records]))
    return EvaluationReport(tuple(fold_records), tuple(image_records),
                            mean_accuracy, phases)


def report_records(report: EvaluationReport):
    """Flatten a report into JSON-able records (header first)."""
    records = [{"schema": REPORT_SCHEMA, "version": 1}]
    records.append({"type": "summary", "mean_accuracy": report.mean_accuracy,
                    "folds": len(report.folds)})
    for fold in report.folds:
        records.append({
            "type": "fold",
            "index": fold.index,
            "train_images": list(fold.train_images),
            "test_images": list(fold.test_images),
            "thresholds": fold.thresholds,
            "accuracy": fold.accuracy,
        })
        for iteration, (thresholds, score) in enumerate(fold.tuning_history):
            records.append({
                "type": "tuning",
                "fold": fold.index,
                "iteration": iteration,
                "thresholds": thresholds,
                "score": score,
            })
    for image in report.images:
        records.append({
            "type": "image",
            "image": image.image_id,
            "fold": image.fold,
            "predicted": {str(k): v for k, v in sorted(image.predicted.items())},
            "actual": {str(k): v for k, v in sorted(image.actual.items())},
            "consistency": image.consistency,
        })
    records.append({
        "type": "phases",
        "phases": {k: list(v) for k, v in sorted(report.phases.items())},
    })
    return records


def save_report(report: EvaluationReport, path):
    with open(path, "w", encoding="utf-8") as fh:
        for record in report_records(report):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
