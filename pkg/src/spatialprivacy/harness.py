"""Experiment orchestration: seeded Monte-Carlo sweeps over release settings.

Three modes mirror how a space can be handed to an application: ``one-time``
(a single partial ball, raw or generalized), ``successive`` (a random-walk
sequence of accumulating releases), and ``conservative`` (successive releasing
swept over a cap on the number of released planes). Every trial derives its
RNG stream from the master seed and stable cell coordinates, never from sweep
position or scheduling, so runs are reproducible byte-for-byte at any worker
count and removing one sweep cell leaves the others unchanged.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacker import AttackParams, ReferenceEnsemble, build_reference, infer
from .descriptors import SpinParams, UnusableSpaceError, describe
from .geometry import (
    PointCloud,
    apply_transform,
    centroid,
    estimate_normals,
    extract_partial,
    random_rigid_transform,
)
from .mechanisms import (
    GeneralizationParams,
    ReleasePolicy,
    project_snapshot,
    project_to_planes,
    ransac_planes,
    release_sequence,
)
from .metrics import TrialRecord, distance_error, inter_privacy, privacy_band, qos
from .ply_io import load_ply
from .synthetic import default_space_specs, generate_space

__all__ = [
    "CellMetrics",
    "ExperimentConfig",
    "load_dataset",
    "report",
    "run_experiment",
    "self_query_check",
]

log = logging.getLogger(__name__)

_MODES = ("one-time", "successive", "conservative")
_KINDS = ("raw", "generalized")
_WALK_FAMILY = 2  # spawn-key family shared by successive and conservative walks


@dataclass(frozen=True)
class DatasetSpec:
    type: str = "synthetic"      # "synthetic" or "directory"
    path: str | None = None
    count: int = 7
    density: float = 80.0
    noise_sigma: float = 0.0
    seed: int = 0
    normals_k: int = 12          # for PLY files lacking normals


@dataclass(frozen=True)
class ExperimentConfig:
    """A full experiment description; unset counts fall back to paper-scale
    defaults (1000 one-time samples; 100 samples x 100 releases for the
    successive modes; radii 0.5/1.0/2.0; plane caps 1, 3, ..., 29)."""

    mode: str = "one-time"
    radii: tuple[float, ...] | None = None
    samples: int | None = None
    releases: int | None = None
    max_planes: tuple[int | None, ...] | None = None
    kinds: tuple[str, ...] | None = None
    seed: int = 0
    workers: int = 1
    variants: int = 1
    preflight: bool = True
    walk_step_max: float | None = None   # None: one ball radius per step
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    descriptor: SpinParams = field(default_factory=SpinParams)
    factor: int = 5
    generalization: GeneralizationParams = field(default_factory=GeneralizationParams)
    attack: AttackParams = field(default_factory=AttackParams)
    qos_alpha: float = 0.5
    qos_beta: float = 0.5
    qos_symmetric: bool = False
    translation_extent: float = 10.0

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}")
        if self.kinds is not None:
            for kind in self.kinds:
                if kind not in _KINDS:
                    raise ValueError(f"unknown release kind {kind!r}")

    def resolved_radii(self) -> tuple[float, ...]:
        return tuple(self.radii) if self.radii is not None else (0.5, 1.0, 2.0)

    def resolved_samples(self) -> int:
        if self.samples is not None:
            return self.samples
        return 1000 if self.mode == "one-time" else 100

    def resolved_releases(self) -> int:
        if self.mode == "one-time":
            return 1
        return self.releases if self.releases is not None else 100

    def resolved_caps(self) -> tuple[int | None, ...]:
        if self.mode == "conservative":
            if self.max_planes is not None:
                return tuple(self.max_planes)
            return tuple(range(1, 30, 2))
        return (None,)

    def resolved_kinds(self) -> tuple[str, ...]:
        if self.mode == "conservative":
            return ("generalized",)
        if self.kinds is not None:
            return tuple(self.kinds)
        return ("raw", "generalized") if self.mode == "one-time" else ("generalized",)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        for key, klass in (
            ("dataset", DatasetSpec),
            ("descriptor", SpinParams),
            ("generalization", GeneralizationParams),
            ("attack", AttackParams),
        ):
            if key in data and isinstance(data[key], dict):
                data[key] = klass(**data[key])
        for key in ("radii", "kinds"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        if data.get("max_planes") is not None:
            data["max_planes"] = tuple(
                None if v in (None, "inf") else int(v) for v in data["max_planes"]
            )
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CellMetrics:
    """Aggregated metrics for one sweep cell."""

    mode: str
    space_count: int
    radius: float
    release_idx: int
    max_planes: int | None
    pi1: float
    pi2: float | None
    abstain_rate: float
    q: float | None
    n_trials: int


def load_dataset(spec: DatasetSpec) -> dict[str, PointCloud]:
    """Labeled spaces, ordered by label; synthetic or a directory of PLYs."""
    if spec.type == "synthetic":
        specs = default_space_specs(spec.seed, spec.density, spec.noise_sigma)
        chosen = dict(list(specs.items())[: spec.count])
        return {label: generate_space(s, label) for label, s in chosen.items()}
    if spec.type == "directory":
        paths = sorted(Path(spec.path).glob("*.ply"))
        if not paths:
            raise ValueError(f"no .ply files under {spec.path}")
        spaces = {}
        for p in paths:
            cloud = load_ply(p)
            if not cloud.has_normals:
                cloud = estimate_normals(cloud, spec.normals_k)
            spaces[p.stem] = cloud.with_label(p.stem)
        return spaces
    raise ValueError(f"unknown dataset type {spec.type!r}")


def self_query_check(ensemble: ReferenceEnsemble, spaces: dict[str, PointCloud],
                     config: ExperimentConfig) -> None:
    """Pre-flight sanity gate: each raw space must match itself perfectly.

    The label must come back exactly, and because a self-query's surviving
    reference keypoints coincide with its own matched keypoints, the location
    hypothesis must sit on their centroid to within 1e-6.
    """
    for label, space in spaces.items():
        hyp = infer(ensemble, space, config.descriptor, config.factor, config.attack)
        if hyp.label != label:
            raise RuntimeError(
                f"self-query check failed: {label!r} classified as {hyp.label!r}"
            )
        if hyp.abstained:
            raise RuntimeError(f"self-query intra check abstained for {label!r}")
        described = describe(space, config.descriptor, config.factor)
        pairs = hyp.inter.pairs[label]
        gate = pairs.nndr < config.attack.t1
        matched = described.positions[pairs.query_indices[gate]]
        expected = matched[hyp.intra.survivor_mask].mean(axis=0)
        if distance_error(hyp.centroid, expected) > 1e-6:
            raise RuntimeError(f"self-query intra check failed for {label!r}")


def _trial_rng(seed: int, spawn_key: tuple[int, ...]) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=spawn_key))


def _radius_key(radius: float) -> int:
    return int(round(radius * 1_000_000))


def _kind_tag(kind: str) -> str:
    return "gen" if kind == "generalized" else "raw"


def _infer_or_abstain(ensemble, query, config) -> tuple[str | None, np.ndarray | None, bool]:
    if len(query) == 0:
        return None, None, True
    try:
        hyp = infer(ensemble, query, config.descriptor, config.factor, config.attack)
    except (UnusableSpaceError, ValueError):
        return None, None, True
    return hyp.label, hyp.centroid, hyp.abstained


def _cell_q(trials: list[TrialRecord]) -> float | None:
    values = [t.q for t in trials if t.q is not None]
    return float(np.mean(values)) if values else None


def _one_time_trial(ensemble, spaces_list, config, kind, radius, sample) -> TrialRecord:
    rng = _trial_rng(config.seed, (1, _KINDS.index(kind), _radius_key(radius), sample))
    space = spaces_list[int(rng.integers(len(spaces_list)))]
    center = space.positions[int(rng.integers(len(space)))]
    partial = extract_partial(space, center, radius)
    if kind == "generalized":
        planes = ransac_planes(partial, config.generalization, rng)
        released = project_to_planes(partial, planes)
    else:
        released = partial
    transform = random_rigid_transform(rng, config.translation_extent)
    q_value = None
    if len(released) and len(partial):
        q_value = qos(released, partial, config.qos_alpha, config.qos_beta,
                      config.qos_symmetric)
    query = apply_transform(released, transform) if len(released) else released
    hyp_label, hyp_centroid, abstained = _infer_or_abstain(ensemble, query, config)
    return TrialRecord(
        true_label=space.label,
        true_centroid=centroid(partial),
        hyp_label=hyp_label,
        hyp_centroid=hyp_centroid,
        abstained=abstained,
        radius=radius,
        release_idx=1,
        max_planes=None,
        q=q_value,
    )


def _sequence_trials(ensemble, spaces_list, config, kind, radius, caps, sample):
    """Trials for one trajectory, shared across every cap in the sweep.

    The generalization state never depends on the cap (the cap only filters
    which planes get projected at release time), so one unbounded sequence is
    run and each sweep cap re-projects from the per-release plane snapshots.
    Caps at or above the current plane count all emit the same cloud and share
    one inference result.
    """
    rng = _trial_rng(
        config.seed, (_WALK_FAMILY, _KINDS.index(kind), _radius_key(radius), sample)
    )
    space = spaces_list[int(rng.integers(len(spaces_list)))]
    policy = ReleasePolicy(radius=radius, num_releases=config.resolved_releases(),
                           max_planes=None, walk_step_max=config.walk_step_max)
    steps, state = release_sequence(space, policy, rng, config.generalization,
                                    generalize=(kind == "generalized"))
    trials = []
    for idx, step in enumerate(steps, start=1):
        accumulated = space.subset(step.accumulated_indices)
        true_centroid = centroid(accumulated)
        shared: dict[int, tuple] = {}
        for cap in caps:
            if kind != "generalized":
                released, query = step.released, step.query
                effective = -1
            else:
                effective = step.n_planes if cap is None else min(cap, step.n_planes)
                if effective == step.n_planes:
                    released, query = step.released, step.query
                else:
                    released = project_snapshot(state, step, effective)
                    query = (apply_transform(released, step.transform)
                             if len(released) else released)
            if effective not in shared:
                q_value = None
                if len(released) and len(accumulated):
                    q_value = qos(released, accumulated, config.qos_alpha,
                                  config.qos_beta, config.qos_symmetric)
                shared[effective] = (*_infer_or_abstain(ensemble, query, config),
                                     q_value)
            hyp_label, hyp_centroid, abstained, q_value = shared[effective]
            trials.append(
                TrialRecord(
                    true_label=space.label,
                    true_centroid=true_centroid,
                    hyp_label=hyp_label,
                    hyp_centroid=hyp_centroid,
                    abstained=abstained,
                    radius=radius,
                    release_idx=idx,
                    max_planes=cap,
                    q=q_value,
                )
            )
    return trials


def run_experiment(config: ExperimentConfig):
    """Build the reference ensemble, run every sweep cell, aggregate metrics.

    Returns ``(cells, trials)``. Deterministic for a given (config, seed)
    regardless of ``workers``.
    """
    spaces = load_dataset(config.dataset)
    if len(spaces) < 2:
        raise ValueError("inter-space inference needs at least 2 spaces")
    spaces_list = [spaces[label] for label in sorted(spaces)]
    ensemble = build_reference(
        spaces_list,
        variant_params=(config.generalization,) * config.variants,
        desc_params=config.descriptor,
        factor=config.factor,
        seed=config.seed,
    )
    if config.preflight:
        self_query_check(ensemble, dict(sorted(spaces.items())), config)

    samples = config.resolved_samples()
    tasks = []  # (cell_sort_key, callable) -> list[TrialRecord]
    if config.mode == "one-time":
        for kind in config.resolved_kinds():
            for radius in config.resolved_radii():
                for sample in range(samples):
                    tasks.append(
                        (
                            (kind, radius, None, sample),
                            lambda k=kind, r=radius, s=sample: [
                                _one_time_trial(ensemble, spaces_list, config, k, r, s)
                            ],
                        )
                    )
    else:
        caps = config.resolved_caps()
        for kind in config.resolved_kinds():
            for radius in config.resolved_radii():
                for sample in range(samples):
                    tasks.append(
                        (
                            (kind, radius, None, sample),
                            lambda k=kind, r=radius, s=sample:
                                _sequence_trials(
                                    ensemble, spaces_list, config, k, r, caps, s
                                ),
                        )
                    )

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(lambda t: t[1](), tasks))
    else:
        results = [t[1]() for t in tasks]

    by_cell: dict[tuple, list[TrialRecord]] = {}
    for (kind, radius, cap, _sample), trial_list in zip(
        (t[0] for t in tasks), results
    ):
        for trial in trial_list:
            key = (kind, radius, trial.max_planes, trial.release_idx)
            by_cell.setdefault(key, []).append(trial)

    cells = []
    all_trials = []
    for key in sorted(
        by_cell,
        key=lambda k: (k[0], k[1], -1 if k[2] is None else k[2], k[3]),
    ):
        kind, radius, cap, release_idx = key
        trials = by_cell[key]
        all_trials.extend(trials)
        errors = [
            distance_error(t.hyp_centroid, t.true_centroid)
            for t in trials
            if t.correct and not t.abstained and t.hyp_centroid is not None
        ]
        cells.append(
            CellMetrics(
                mode=f"{config.mode}-{_kind_tag(kind)}",
                space_count=len(spaces_list),
                radius=radius,
                release_idx=release_idx,
                max_planes=cap,
                pi1=inter_privacy(trials),
                pi2=float(np.mean(errors)) if errors else None,
                abstain_rate=sum(t.abstained for t in trials) / len(trials),
                q=_cell_q(trials),
                n_trials=len(trials),
            )
        )
    return cells, all_trials


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def cells_to_csv(cells: list[CellMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["mode", "space_count", "radius_m", "release_idx", "max_planes",
         "pi1", "pi2_m", "abstain_rate", "q", "n_trials"]
    )
    for c in cells:
        writer.writerow(
            [c.mode, c.space_count, _fmt(c.radius), c.release_idx,
             "inf" if c.max_planes is None else c.max_planes,
             _fmt(c.pi1), _fmt(c.pi2), _fmt(c.abstain_rate), _fmt(c.q),
             c.n_trials]
        )
    return buf.getvalue()


def report(cells: list[CellMetrics], out_dir) -> dict[str, Path]:
    """Write metrics.csv, metrics.json, and a plain-text summary."""
    if not cells:
        raise ValueError("empty metrics grid")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out / "metrics.csv",
        "json": out / "metrics.json",
        "summary": out / "summary.txt",
    }
    paths["csv"].write_text(cells_to_csv(cells))

    nested: dict = {}
    for c in cells:
        nested.setdefault(c.mode, {}).setdefault(_fmt(c.radius), []).append(
            {
                "release_idx": c.release_idx,
                "max_planes": c.max_planes,
                "pi1": c.pi1,
                "pi2_m": c.pi2,
                "abstain_rate": c.abstain_rate,
                "q": c.q,
                "n_trials": c.n_trials,
                "privacy_band": privacy_band(c.pi1),
            }
        )
    paths["json"].write_text(json.dumps(nested, indent=2, sort_keys=True) + "\n")

    lines = []
    for c in cells:
        cap = "inf" if c.max_planes is None else c.max_planes
        lines.append(
            f"{c.mode} r={_fmt(c.radius)} release={c.release_idx} "
            f"max_planes={cap} pi1={c.pi1:.4f} band={privacy_band(c.pi1)} "
            f"pi2={_fmt(c.pi2) or 'n/a'} q={_fmt(c.q) or 'n/a'} n={c.n_trials}"
        )
    # Headline statistic: the largest cap whose release-averaged pi1 stays
    # at or above the coin-flip bound.
    by_mode_radius: dict = {}
    for c in cells:
        if c.max_planes is not None:
            by_mode_radius.setdefault((c.mode, c.radius), {}).setdefault(
                c.max_planes, []
            ).append(c.pi1)
    for (mode, radius), caps in sorted(by_mode_radius.items()):
        safe = [
            cap for cap, values in sorted(caps.items())
            if float(np.mean(values)) >= 0.5
        ]
        verdict = max(safe) if safe else "none"
        lines.append(
            f"{mode} r={_fmt(radius)}: largest max_planes with mean pi1 >= 0.5: {verdict}"
        )
    paths["summary"].write_text("\n".join(lines) + "\n")
    return paths


def trials_to_jsonl(trials: list[TrialRecord]) -> str:
    rows = []
    for t in trials:
        rows.append(json.dumps(
            {
                "true_label": t.true_label,
                "true_centroid": [float(v) for v in t.true_centroid],
                "hyp_label": t.hyp_label,
                "hyp_centroid": None if t.hyp_centroid is None
                else [float(v) for v in t.hyp_centroid],
                "abstained": t.abstained,
                "radius": t.radius,
                "release_idx": t.release_idx,
                "max_planes": t.max_planes,
                "q": t.q,
            },
            sort_keys=True,
        ))
    return "\n".join(rows) + ("\n" if rows else "")
