"""Privacy and utility metrics for released point clouds.

Inter-space privacy is the adversary's misclassification rate; intra-space
privacy is the mean centroid distance error over trials the adversary
classified correctly. Utility (QoS) pairs each released point with its
nearest raw point and mixes position error with normal deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, SpatialIndex

__all__ = [
    "TrialRecord",
    "check_gamma",
    "distance_error",
    "inter_privacy",
    "intra_privacy",
    "privacy_band",
    "qos",
]


@dataclass(frozen=True)
class TrialRecord:
    """Outcome of one inference trial against a known ground truth."""

    true_label: str
    true_centroid: np.ndarray
    hyp_label: str | None
    hyp_centroid: np.ndarray | None
    abstained: bool = False
    radius: float = 0.0
    release_idx: int = 1
    max_planes: int | None = None
    q: float | None = None

    @property
    def correct(self) -> bool:
        return self.hyp_label == self.true_label


def distance_error(hyp_centroid: np.ndarray, true_centroid: np.ndarray) -> float:
    """Euclidean distance between hypothesis and true centroids, meters."""
    return float(np.linalg.norm(np.asarray(hyp_centroid, float) - np.asarray(true_centroid, float)))


def inter_privacy(trials: list[TrialRecord]) -> float:
    """Fraction of trials the adversary labeled wrongly (or could not label)."""
    if not trials:
        raise ValueError("no trials")
    wrong = sum(1 for t in trials if not t.correct)
    return wrong / len(trials)


def intra_privacy(trials: list[TrialRecord]) -> float | None:
    """Mean centroid error over correctly classified, non-abstaining trials.

    Returns None when no trial qualifies; abstentions are the caller's to
    count separately (see :func:`abstention_rate`).
    """
    errors = [
        distance_error(t.hyp_centroid, t.true_centroid)
        for t in trials
        if t.correct and not t.abstained and t.hyp_centroid is not None
    ]
    if not errors:
        return None
    return float(np.mean(errors))


def abstention_rate(trials: list[TrialRecord]) -> float:
    if not trials:
        raise ValueError("no trials")
    return sum(1 for t in trials if t.abstained) / len(trials)


def qos(transformed: PointCloud, raw: PointCloud, alpha: float = 0.5,
        beta: float = 0.5, symmetric: bool = False) -> float:
    """Mean transformation error between a released cloud and the truth.

    Every released point pairs with its nearest raw point; the error is
    alpha * position distance + beta * normal deviation. Normal deviation is
    computed as 0.5 * ||n - n'||^2, which equals 1 - n . n' for unit vectors
    but is exactly zero for identical ones. The symmetric mode averages in
    the reverse pairing so that raw structure missing from the release is
    also penalized.
    """
    if abs(alpha + beta - 1.0) > 1e-12 or not (0 <= alpha <= 1 and 0 <= beta <= 1):
        raise ValueError("need alpha, beta in [0, 1] with alpha + beta = 1")
    forward = _one_sided_qos(transformed, raw, alpha, beta)
    if not symmetric:
        return forward
    return 0.5 * (forward + _one_sided_qos(raw, transformed, alpha, beta))


def _one_sided_qos(src: PointCloud, dst: PointCloud, alpha: float, beta: float) -> float:
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("qos needs non-empty clouds")
    if not (src.has_normals and dst.has_normals):
        raise ValueError("qos needs normals on both clouds")
    dist, idx = SpatialIndex(dst).query(src.positions, k=1)
    dist = dist[:, 0]
    paired = dst.normals[idx[:, 0]]
    normal_dev = 0.5 * np.einsum(
        "ij,ij->i", src.normals - paired, src.normals - paired
    )
    return float(np.mean(alpha * dist + beta * normal_dev))


def check_gamma(q_value: float, gamma: float) -> bool:
    """Does the utility cost stay within the permissible error (inclusive)?"""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return q_value <= gamma


def privacy_band(pi1: float) -> str:
    """Qualitative band for an inter-space privacy value."""
    if not 0.0 <= pi1 <= 1.0:
        raise ValueError("pi1 must be in [0, 1]")
    if pi1 >= 0.75:
        return "high"
    if pi1 >= 0.5:
        return "medium"
    return "low"
