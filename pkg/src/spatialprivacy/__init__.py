"""Spatial privacy for mixed-reality 3D point clouds.

Mechanisms (partial release, RANSAC plane generalization with subsumption,
conservative plane releasing), a two-level descriptor-matching adversary,
privacy/utility metrics, and a reproducible experiment harness.
"""

from .attacker import (
    AttackParams,
    Hypothesis,
    ReferenceEnsemble,
    build_reference,
    infer,
    load_ensemble,
    match_inter,
    match_intra,
    save_ensemble,
)
from .descriptors import (
    DescribedSpace,
    KeyPoint,
    SpinParams,
    UnusableSpaceError,
    describe,
    select_keypoints,
    spin_image,
)
from .geometry import (
    PointCloud,
    RigidTransform,
    SpatialIndex,
    apply_transform,
    centroid,
    estimate_normals,
    extract_partial,
    knn,
    knn_bruteforce,
    random_rigid_transform,
)
from .harness import (
    CellMetrics,
    ExperimentConfig,
    load_dataset,
    report,
    run_experiment,
)
from .mechanisms import (
    GeneralizationParams,
    Plane,
    ReleasePolicy,
    ReleaseState,
    conservative_release,
    project_to_planes,
    ransac_planes,
    release_sequence,
    subsume,
)
from .metrics import (
    TrialRecord,
    check_gamma,
    inter_privacy,
    intra_privacy,
    privacy_band,
    qos,
)
from .ply_io import PlyFormatError, load_ply, save_ply
from .synthetic import SyntheticSpaceSpec, default_space_specs, generate_space

__version__ = "0.1.0"
