"""Fused overlapping-sequence inference, metrics, and LOSO cross-validation.

At test time every stride-1 window of L consecutive epochs is classified, so
each interior epoch collects L probability vectors (one per sequence position
that covers it; the first and last L-1 epochs collect fewer). The ensemble is
aggregated by probabilistic multiplicative fusion: sum of clamped logs,
renormalized. Predicted label is the argmax, ties broken toward the lower
class index.

Metrics are computed from the 5x5 confusion matrix alone (rows = reference,
columns = prediction): accuracy, Cohen's kappa, macro F1, macro sensitivity
(mean per-class recall) and macro specificity (mean per-class one-vs-rest
true-negative rate). Note the macro averaging of sensitivity/specificity: a
single overall number requires choosing an averaging rule and that choice
affects comparability with other reports.

LOSO: each subject serves once as the held-out test set; the remaining
subjects are split ~79/21 into finetuning and validation subjects (at least
one validation subject) by a seeded shuffle. Pooled metrics come from the
summed confusion matrix; per-fold reports are also returned.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import network
from .dataio import TooShortRecording
from .network import ModelParams

N_CLASSES = 5
FUSE_CLAMP = 1e-12


class EmptyDecisionSet(ValueError):
    pass


class EmptyConfusion(ValueError):
    pass


class CohortTooSmall(ValueError):
    pass


def multiplicative_fuse(decisions) -> np.ndarray:
    """Fuse probability vectors by a normalized product, in log space."""
    decisions = np.asarray(decisions, dtype=np.float64)
    if decisions.ndim == 1:
        decisions = decisions[None, :]
    if decisions.shape[0] == 0:
        raise EmptyDecisionSet("cannot fuse an empty decision set")
    logs = np.log(np.maximum(decisions, FUSE_CLAMP)).sum(axis=0)
    logs -= logs.max()
    fused = np.exp(logs)
    return fused / fused.sum()


def sliding_infer(predict_fn, images: np.ndarray, seq_len: int):
    """Classify every stride-1 window and fuse the per-epoch ensembles.

    ``predict_fn`` maps a (1, L, F, T) batch to (1, L, C) probabilities; each
    window is evaluated in its own singleton batch so results are independent
    of any batching strategy. Returns (fused (n, C), labels (n,)).
    """
    images = np.asarray(images)
    n = images.shape[0]
    if n < seq_len:
        raise TooShortRecording(f"recording has {n} epochs, inference needs >= {seq_len}")
    decisions = [[] for _ in range(n)]
    for w in range(n - seq_len + 1):
        probs = predict_fn(images[w : w + seq_len][None])[0]
        for j in range(seq_len):
            decisions[w + j].append(probs[j])
    fused = np.stack([multiplicative_fuse(np.asarray(d)) for d in decisions])
    labels = fused.argmax(axis=1)
    return fused, labels


def predict_recording(params: ModelParams, images: np.ndarray):
    """Fused per-epoch probabilities and labels for one recording."""
    return sliding_infer(
        lambda batch: network.predict_proba(params, batch), images, params.hp.seq_len
    )


def confusion_matrix(reference, predicted, n_classes: int = N_CLASSES) -> np.ndarray:
    reference = np.asarray(reference, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if reference.shape != predicted.shape:
        raise ValueError(f"length mismatch: {reference.shape} vs {predicted.shape}")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (reference, predicted), 1)
    return conf


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows = reference, columns = prediction
    accuracy: float
    kappa: float
    mf1: float
    sensitivity: float
    specificity: float

    @property
    def n_scored(self) -> int:
        return int(self.confusion.sum())

    def to_text(self) -> str:
        lines = [
            f"n_scored: {self.n_scored}",
            f"accuracy: {self.accuracy:.6f}",
            f"kappa: {self.kappa:.6f}",
            f"mf1: {self.mf1:.6f}",
            f"sensitivity: {self.sensitivity:.6f}",
            f"specificity: {self.specificity:.6f}",
            "confusion:",
        ]
        for row in self.confusion:
            lines.append("\t".join(str(int(c)) for c in row))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_scored": self.n_scored,
                "accuracy": self.accuracy,
                "kappa": self.kappa,
                "mf1": self.mf1,
                "sensitivity": self.sensitivity,
                "specificity": self.specificity,
                "confusion": self.confusion.tolist(),
            },
            indent=2,
        )


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    mask = den > 0
    out[mask] = num[mask] / den[mask]
    return out


def compute_metrics(confusion) -> EvalReport:
    """All overall metrics from a confusion matrix; 0/0 rates count as 0."""
    conf = np.asarray(confusion)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {conf.shape}")
    if np.any(conf < 0):
        raise ValueError("confusion matrix entries must be nonnegative")
    c = conf.astype(np.float64)
    total = c.sum()
    if total <= 0:
        raise EmptyConfusion("confusion matrix has no scored epochs")
    tp = np.diag(c)
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    accuracy = tp.sum() / total
    p_expected = float(rows @ cols) / (total * total)
    if abs(1.0 - p_expected) < 1e-15:
        kappa = 1.0 if accuracy >= 1.0 - 1e-15 else 0.0
    else:
        kappa = (accuracy - p_expected) / (1.0 - p_expected)
    recall = _safe_div(tp, rows)
    precision = _safe_div(tp, cols)
    f1 = _safe_div(2.0 * precision * recall, precision + recall)
    fp = cols - tp
    tn = total - rows - fp
    tnr = _safe_div(tn, tn + fp)
    return EvalReport(
        confusion=conf.astype(np.int64),
        accuracy=float(accuracy),
        kappa=float(kappa),
        mf1=float(f1.mean()),
        sensitivity=float(recall.mean()),
        specificity=float(tnr.mean()),
    )


def evaluate_cohort(params: ModelParams, recordings):
    """Fused inference over recordings; returns (EvalReport, predictions).

    ``recordings`` may be Recording objects or PreparedRecording caches.
    ``predictions`` maps subject id to (fused probabilities, labels).
    """
    from .training import PreparedRecording, prepare_recording  # local: avoid cycle

    conf = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    predictions = {}
    for rec in recordings:
        prepared = rec if isinstance(rec, PreparedRecording) else prepare_recording(rec)
        fused, labels = predict_recording(params, prepared.images)
        conf += confusion_matrix(prepared.labels, labels)
        predictions[prepared.rec_id] = (fused, labels)
    return compute_metrics(conf), predictions


# ---------------------------------------------------------------------------
# leave-one-subject-out cross-validation
# ---------------------------------------------------------------------------

_STREAM_SPLIT = 4


def loso_splits(subject_ids, seed: int):
    """Deterministic fold plan: (test_id, train_ids, val_ids) per subject.

    The non-test subjects are shuffled with a per-fold seeded rng and split
    ~79/21 with at least one validation subject (20 subjects -> 15/4/1).
    """
    ids = sorted(subject_ids)
    if len(ids) < 3:
        raise CohortTooSmall(f"LOSO needs >= 3 subjects, got {len(ids)}")
    folds = []
    for k, test_id in enumerate(ids):
        rest = [s for s in ids if s != test_id]
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _STREAM_SPLIT, k])))
        order = rng.permutation(len(rest))
        n_val = max(1, round(0.21 * len(rest)))
        val_ids = [rest[i] for i in order[:n_val]]
        train_ids = [rest[i] for i in order[n_val:]]
        folds.append((test_id, train_ids, val_ids))
    return folds


def _run_fold(args):
    from . import transfer  # local import: transfer depends on this module

    params, regime, split, cfg = args
    _, report = transfer.run_regime(regime, params, split, cfg)
    return report


def loso_cv(cohort, params: ModelParams, regime, cfg, jobs: int = 1, log_fn=None):
    """Run one transfer regime across all LOSO folds.

    Returns (fold_reports, pooled_report) where fold_reports is a list of
    (test_subject_id, EvalReport) in sorted subject order and the pooled
    report is computed from the summed confusion matrix.
    """
    from . import transfer  # local import: transfer depends on this module

    by_id = {}
    for rec in cohort:
        if rec.subject_id in by_id:
            raise ValueError(f"duplicate subject id in cohort: {rec.subject_id!r}")
        by_id[rec.subject_id] = rec
    folds = loso_splits(by_id.keys(), cfg.seed)
    tasks = []
    for test_id, train_ids, val_ids in folds:
        split = transfer.CohortSplit(
            train=[by_id[s] for s in train_ids],
            val=[by_id[s] for s in val_ids],
            test=[by_id[test_id]],
        )
        tasks.append((params, regime, split, cfg))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_fold, tasks))
    else:
        reports = [_run_fold(t) for t in tasks]

    fold_reports = []
    pooled_conf = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for (test_id, _, _), report in zip(folds, reports):
        fold_reports.append((test_id, report))
        pooled_conf += report.confusion
        if log_fn:
            log_fn(f"fold {test_id}: accuracy={report.accuracy:.4f} kappa={report.kappa:.4f}")
    pooled = compute_metrics(pooled_conf)
    if log_fn:
        log_fn(f"pooled: accuracy={pooled.accuracy:.4f} kappa={pooled.kappa:.4f}")
    return fold_reports, pooled
