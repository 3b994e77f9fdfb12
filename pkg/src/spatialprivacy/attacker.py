"""Two-level spatial inference from descriptor matching.

The adversary holds a reference ensemble: per known space, the descriptor
sets of the raw capture plus one or more plane-generalized variants, pooled
per label. Inference runs in two stages. Inter-space matching 2-nn matches
every query descriptor against each label's pool, scores the label by
``(1 - mean kept NNDR) * kept_fraction``, and picks the argmax. Intra-space
matching then keeps only geometrically consistent keypoint pairs (pairwise
distances and internal angles of the matched complete graphs must agree) and
reports the centroid of the surviving reference keypoints as the location
hypothesis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .descriptors import (
    DescribedSpace,
    SpinParams,
    _dump_described,
    _load_described,
    describe,
)
from .geometry import PointCloud, knn_bruteforce
from .mechanisms import GeneralizationParams, project_to_planes, ransac_planes

__all__ = [
    "AttackParams",
    "Hypothesis",
    "InterSpaceResult",
    "IntraSpaceResult",
    "ReferenceEnsemble",
    "build_reference",
    "load_ensemble",
    "match_inter",
    "match_intra",
    "infer",
    "save_ensemble",
]


@dataclass(frozen=True)
class AttackParams:
    strict_nndr: bool = False     # pre-filter matches at NNDR < nndr_threshold
    nndr_threshold: float = 0.9
    t1: float = 0.9               # NNDR gate before the geometric check
    t2: float = 0.95              # combined geometric similarity gate


@dataclass
class _LabelPool:
    descriptors: np.ndarray
    positions: np.ndarray


class ReferenceEnsemble:
    """Per-label descriptor databases over raw + generalized variants.

    Immutable after construction; concurrent matching against it is safe.
    """

    def __init__(self, variants_by_label: dict[str, list[DescribedSpace]]):
        if not variants_by_label:
            raise ValueError("ensemble needs at least one label")
        for label, variants in variants_by_label.items():
            if not variants:
                raise ValueError(f"label {label!r} has no variants")
        self.variants_by_label = dict(variants_by_label)
        self.labels = list(variants_by_label.keys())
        self._pools = {
            label: _LabelPool(
                np.vstack([v.descriptors for v in variants]),
                np.vstack([v.positions for v in variants]),
            )
            for label, variants in variants_by_label.items()
        }

    def pool(self, label: str) -> _LabelPool:
        return self._pools[label]


@dataclass(frozen=True)
class MatchedPairs:
    """Accepted one-to-one keypoint matches between a query and one label."""

    query_indices: np.ndarray      # indices into the query's keypoints
    reference_indices: np.ndarray  # indices into the label's pooled keypoints
    nndr: np.ndarray


@dataclass(frozen=True)
class InterSpaceResult:
    scores: dict[str, float]
    winner: str
    pairs: dict[str, MatchedPairs]


@dataclass(frozen=True)
class IntraSpaceResult:
    abstained: bool
    survivor_mask: np.ndarray | None   # over the pairs passed the t1 gate
    similarity: np.ndarray | None
    centroid: np.ndarray | None


@dataclass(frozen=True)
class Hypothesis:
    label: str
    centroid: np.ndarray | None
    abstained: bool
    inter: InterSpaceResult
    intra: IntraSpaceResult


def _match_label(pool: _LabelPool, query: DescribedSpace, params: AttackParams):
    """Score one label and return its accepted unique pairs."""
    n_query = len(query)
    empty = MatchedPairs(
        np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp), np.zeros(0)
    )
    if len(pool.descriptors) < 2:
        return 0.0, empty
    dist, idx = knn_bruteforce(pool.descriptors, query.descriptors, k=2)
    dmax = dist.max()
    if dmax > 0:
        dist = dist / dmax
    second = dist[:, 1]
    # Exact duplicates give 0/0; closer is better, so define that as 0.
    nndr = np.divide(dist[:, 0], second, out=np.zeros(n_query), where=second > 0)
    candidates = np.arange(n_query)
    if params.strict_nndr:
        candidates = candidates[nndr[candidates] < params.nndr_threshold]
    if len(candidates) == 0:
        return 0.0, empty
    # One pair per query keypoint already; dedupe the reference side keeping
    # the lowest NNDR (ties by lower query index).
    priority = np.lexsort((candidates, nndr[candidates]))
    ordered = candidates[priority]
    refs = idx[ordered, 0]
    _, first_pos = np.unique(refs, return_index=True)
    kept = ordered[np.sort(first_pos)]
    kept_nndr = nndr[kept]
    score = float((1.0 - kept_nndr.mean()) * (len(kept) / n_query))
    return score, MatchedPairs(kept, idx[kept, 0], kept_nndr)


def match_inter(ensemble: ReferenceEnsemble, query: DescribedSpace,
                params: AttackParams = AttackParams()) -> InterSpaceResult:
    """Score every reference label against the query; argmax wins.

    Ties go to the label that comes first in ensemble order. A label whose
    pool has fewer than two descriptors scores zero.
    """
    if len(query) == 0:
        raise ValueError("query has no descriptors")
    scores: dict[str, float] = {}
    pairs: dict[str, MatchedPairs] = {}
    for label in ensemble.labels:
        scores[label], pairs[label] = _match_label(ensemble.pool(label), query, params)
    winner = max(ensemble.labels, key=lambda lab: scores[lab])
    return InterSpaceResult(scores, winner, pairs)


def _angle_vertex_similarity(qpos: np.ndarray, rpos: np.ndarray) -> np.ndarray:
    """Per-vertex cosine similarity of the internal-angle-cosine sets.

    At each vertex the angle set holds, for every unordered pair of incident
    edges, the cosine of the angle between them. Its inner products reduce to
    Frobenius norms of 3x3 edge-direction gram products, so the whole
    computation stays O(n^2).
    """
    n = len(qpos)
    out = np.ones(n)
    m = n - 1
    for v in range(n):
        uq = np.delete(qpos, v, axis=0) - qpos[v]
        ur = np.delete(rpos, v, axis=0) - rpos[v]
        uq /= np.maximum(np.linalg.norm(uq, axis=1), 1e-300)[:, None]
        ur /= np.maximum(np.linalg.norm(ur, axis=1), 1e-300)[:, None]
        dot_qr = (np.linalg.norm(uq.T @ ur) ** 2 - m) / 2.0
        norm_q = (np.linalg.norm(uq.T @ uq) ** 2 - m) / 2.0
        norm_r = (np.linalg.norm(ur.T @ ur) ** 2 - m) / 2.0
        if norm_q <= 0 or norm_r <= 0:
            out[v] = 1.0 if norm_q <= 0 and norm_r <= 0 else 0.0
        else:
            out[v] = dot_qr / np.sqrt(norm_q * norm_r)
    return out


def match_intra(query_positions: np.ndarray, reference_positions: np.ndarray,
                nndr: np.ndarray,
                params: AttackParams = AttackParams()) -> IntraSpaceResult:
    """Geometric consistency check over matched keypoint pairs.

    Pairs first pass the NNDR < t1 gate; fewer than three survivors means
    no geometry to check, so the matcher abstains. Each surviving vertex gets
    a distance similarity (mean of exp(-0.5 |edge length difference|) over its
    edges) and an angular similarity; their product must reach t2. The
    hypothesis is the centroid of the accepted reference keypoints.
    """
    query_positions = np.asarray(query_positions, dtype=np.float64)
    reference_positions = np.asarray(reference_positions, dtype=np.float64)
    nndr = np.asarray(nndr, dtype=np.float64)
    gate = nndr < params.t1
    if int(gate.sum()) < 3:
        return IntraSpaceResult(True, None, None, None)
    q = query_positions[gate]
    r = reference_positions[gate]
    dq = np.linalg.norm(q[:, None, :] - q[None, :, :], axis=2)
    dr = np.linalg.norm(r[:, None, :] - r[None, :, :], axis=2)
    edge_sim = np.exp(-0.5 * np.abs(dq - dr))
    np.fill_diagonal(edge_sim, 0.0)
    s_dist = edge_sim.sum(axis=1) / (len(q) - 1)
    s_angle = _angle_vertex_similarity(q, r)
    similarity = s_dist * s_angle
    survivors = similarity >= params.t2
    if not np.any(survivors):
        return IntraSpaceResult(True, survivors, similarity, None)
    centroid = r[survivors].mean(axis=0)
    return IntraSpaceResult(False, survivors, similarity, centroid)


def infer(ensemble: ReferenceEnsemble, query: PointCloud,
          desc_params: SpinParams = SpinParams(), factor: int = 5,
          params: AttackParams = AttackParams()) -> Hypothesis:
    """Full two-level inference for one query cloud."""
    described = describe(query, desc_params, factor)
    inter = match_inter(ensemble, described, params)
    matched = inter.pairs[inter.winner]
    pool = ensemble.pool(inter.winner)
    intra = match_intra(
        described.positions[matched.query_indices],
        pool.positions[matched.reference_indices],
        matched.nndr,
        params,
    )
    return Hypothesis(inter.winner, intra.centroid, intra.abstained, inter, intra)


def build_reference(
    spaces: list[PointCloud],
    variant_params: tuple[GeneralizationParams, ...] = (GeneralizationParams(),),
    desc_params: SpinParams = SpinParams(),
    factor: int = 5,
    seed: int = 0,
    cache_path=None,
) -> ReferenceEnsemble:
    """Describe each labeled space raw plus one generalized variant per spec.

    Variant seeds derive deterministically from the master seed, the space's
    position in the list, and the variant index, so rebuilding yields an
    identical ensemble. Optionally writes the cache file.
    """
    variants_by_label: dict[str, list[DescribedSpace]] = {}
    for space_idx, space in enumerate(spaces):
        label = space.label
        if label is None:
            raise ValueError("every reference space needs a label")
        if label in variants_by_label:
            raise ValueError(f"duplicate space label {label!r}")
        variants = [describe(space, desc_params, factor, label=label)]
        for v_idx, gen in enumerate(variant_params):
            rng = np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(space_idx, v_idx))
            )
            planes = ransac_planes(space, gen, rng)
            generalized = project_to_planes(space, planes)
            variants.append(describe(generalized, desc_params, factor, label=label))
        variants_by_label[label] = variants
    ensemble = ReferenceEnsemble(variants_by_label)
    if cache_path is not None:
        save_ensemble(ensemble, cache_path)
    return ensemble


_ENSEMBLE_MAGIC = b"SPEN"
_ENSEMBLE_VERSION = 1


def save_ensemble(ensemble: ReferenceEnsemble, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_ENSEMBLE_MAGIC)
        fh.write(struct.pack("<II", _ENSEMBLE_VERSION, len(ensemble.labels)))
        for label in ensemble.labels:
            variants = ensemble.variants_by_label[label]
            fh.write(struct.pack("<I", len(variants)))
            for variant in variants:
                _dump_described(variant, fh)


def load_ensemble(path) -> ReferenceEnsemble:
    with open(path, "rb") as fh:
        if fh.read(4) != _ENSEMBLE_MAGIC:
            raise ValueError("not an ensemble cache file")
        version, n_labels = struct.unpack("<II", fh.read(8))
        if version != _ENSEMBLE_VERSION:
            raise ValueError(f"unsupported ensemble cache version {version}")
        variants_by_label: dict[str, list[DescribedSpace]] = {}
        for _ in range(n_labels):
            (n_variants,) = struct.unpack("<I", fh.read(4))
            variants = [_load_described(fh) for _ in range(n_variants)]
            variants_by_label[variants[0].label] = variants
    return ReferenceEnsemble(variants_by_label)
