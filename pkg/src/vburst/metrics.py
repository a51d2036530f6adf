"""Challenge scoring: CCC, MAE, UAR/WAR, confusion matrices, and S_MTL.

All statistics are population (ddof 0) statistics.  Every function is pure
and operates on plain sequences or numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EMOTION_NAMES = (
    "amusement",
    "awe",
    "awkwardness",
    "distress",
    "excitement",
    "fear",
    "horror",
    "sadness",
    "surprise",
    "triumph",
)

N_EMOTIONS = len(EMOTION_NAMES)
N_COUNTRIES = 4

# Guards s_mtl against division by zero in degenerate perfect-age runs.
MAE_FLOOR = 1e-6


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns are predicted classes."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if self.counts.size == 0:
            raise ValueError("confusion matrix must be non-empty")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricReport:
    """One scored evaluation: per-emotion CCCs plus the scalar summaries."""

    per_emotion_ccc: list[float]
    mean_ccc: float
    uar: float
    war: float
    mae_years: float
    s_mtl: float
    country_confusion: ConfusionMatrix | None = field(default=None, repr=False)

    def as_text(self) -> str:
        """Key/value block, one line per field."""
        lines = [
            f"ccc_{name}={v:.6f}"
            for name, v in zip(EMOTION_NAMES, self.per_emotion_ccc)
        ]
        lines.append(f"mean_ccc={self.mean_ccc:.6f}")
        lines.append(f"uar={self.uar:.6f}")
        lines.append(f"war={self.war:.6f}")
        lines.append(f"mae_years={self.mae_years:.6f}")
        lines.append(f"s_mtl={self.s_mtl:.6f}")
        return "\n".join(lines) + "\n"

    def as_row(self) -> str:
        """Delimited row in table column order: CCC, UAR, MAE, S_MTL."""
        return (
            f"{self.mean_ccc:.3f}\t{self.uar:.3f}"
            f"\t{self.mae_years:.3f}\t{self.s_mtl:.3f}"
        )


def ccc(pred, truth) -> float:
    """Concordance correlation coefficient with population statistics.

    A zero denominator means both sequences are constant with equal means;
    the result is then 1.0 for identical constants and 0.0 otherwise.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.ndim != 1 or t.ndim != 1:
        raise ValueError("ccc expects one-dimensional sequences")
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} vs {t.shape[0]}")
    if p.shape[0] < 2:
        raise ValueError("ccc needs at least 2 items")
    pm, tm = p.mean(), t.mean()
    cov = ((p - pm) * (t - tm)).mean()
    denom = p.var() + t.var() + (pm - tm) ** 2
    if denom == 0.0:
        return 1.0 if np.array_equal(p, t) else 0.0
    return float(2.0 * cov / denom)


def mean_ccc(per_emotion) -> float:
    """Arithmetic mean of exactly 10 per-emotion CCCs."""
    v = np.asarray(per_emotion, dtype=np.float64)
    if v.shape != (N_EMOTIONS,):
        raise ValueError(f"expected {N_EMOTIONS} values, got {v.shape}")
    return float(v.mean())


def mae(pred_years, truth_years) -> float:
    """Mean absolute error in years."""
    p = np.asarray(pred_years, dtype=np.float64)
    t = np.asarray(truth_years, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("mae needs at least 1 item")
    return float(np.abs(p - t).mean())


def confusion_matrix(pred_classes, true_classes, n_classes: int) -> ConfusionMatrix:
    """Count matrix with counts[true][pred] incremented per item."""
    p = np.asarray(pred_classes, dtype=np.int64)
    t = np.asarray(true_classes, dtype=np.int64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError("prediction and truth lists must have equal length")
    if ((p < 0) | (p >= n_classes)).any() or ((t < 0) | (t >= n_classes)).any():
        raise ValueError(f"class id out of range [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def uar(cm: ConfusionMatrix) -> float:
    """Mean per-class recall; classes with zero true items are excluded."""
    counts = cm.counts
    row_sums = counts.sum(axis=1)
    present = row_sums > 0
    if not present.any():
        raise ValueError("confusion matrix has no scored items")
    recalls = counts.diagonal()[present] / row_sums[present]
    return float(recalls.mean())


def war(cm: ConfusionMatrix) -> float:
    """Support-weighted recall: trace over total (plain accuracy)."""
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix has no scored items")
    return float(cm.counts.trace() / total)


def s_mtl(ccc_value: float, uar_value: float, mae_years_value: float) -> float:
    """Harmonic-style combined score 3 / (1/ccc + mae + 1/uar)."""
    if ccc_value <= 0 or uar_value <= 0 or mae_years_value <= 0:
        raise ValueError("s_mtl is undefined for non-positive inputs")
    return float(3.0 / (1.0 / ccc_value + mae_years_value + 1.0 / uar_value))


def full_report(predictions: dict, labels: dict) -> MetricReport:
    """Score aligned predictions against labels.

    Both arguments map utterance id to a record with keys ``emotions``
    (10 reals), ``age`` (real), and either ``country_probs`` (4 reals,
    predictions) or ``country`` (class id, labels).  Result order does not
    depend on dict ordering: utterances are scored sorted by id.
    """
    missing = sorted(set(labels) - set(predictions))
    if missing:
        raise ValueError(f"missing predictions for utterances: {missing}")
    ids = sorted(labels)
    if not ids:
        raise ValueError("no utterances to score")

    pred_emo = np.array([predictions[u]["emotions"] for u in ids], dtype=np.float64)
    true_emo = np.array([labels[u]["emotions"] for u in ids], dtype=np.float64)
    per_emotion = [ccc(pred_emo[:, k], true_emo[:, k]) for k in range(N_EMOTIONS)]

    pred_age = [predictions[u]["age"] for u in ids]
    true_age = [labels[u]["age"] for u in ids]
    age_mae = mae(pred_age, true_age)

    pred_country = [int(np.argmax(predictions[u]["country_probs"])) for u in ids]
    true_country = [int(labels[u]["country"]) for u in ids]
    cm = confusion_matrix(pred_country, true_country, N_COUNTRIES)

    m_ccc = mean_ccc(per_emotion)
    u = uar(cm)
    return MetricReport(
        per_emotion_ccc=per_emotion,
        mean_ccc=m_ccc,
        uar=u,
        war=war(cm),
        mae_years=age_mae,
        s_mtl=s_mtl(m_ccc, u, max(age_mae, MAE_FLOOR)),
        country_confusion=cm,
    )
