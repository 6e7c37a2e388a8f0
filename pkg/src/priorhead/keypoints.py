"""Supervised keypoint selection, identity-swapped driving keypoints, relative motion and pose edits."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .prior import (
    LOWER_LIP,
    N_LANDMARKS,
    REGIONS,
    UPPER_LIP,
    FaceParams,
    SyntheticMorphableModel,
    axis_angle_to_matrix,
    landmarks_from_params,
)

# allocation priority for small budgets; mouth and eye count double
PRIORITY = ("mouth", "eye", "nose", "eyebrow", "contour")
WEIGHTS = {"mouth": 2, "eye": 2, "nose": 1, "eyebrow": 1, "contour": 1}
EVEN_FROM = 16


@dataclass(frozen=True, eq=False)
class KeypointFrame:
    rotation: np.ndarray
    translation: np.ndarray
    keypoints: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        x = np.asarray(self.keypoints, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("rotation is not a proper rotation matrix")
        if x.ndim != 2 or x.shape[1] != 3 or not 1 <= x.shape[0] <= N_LANDMARKS:
            raise ValueError(f"keypoints must be Kx3 with 1<=K<={N_LANDMARKS}, got {x.shape}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "keypoints", x)

    @property
    def K(self) -> int:
        return self.keypoints.shape[0]

    def __eq__(self, other):
        if not isinstance(other, KeypointFrame):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation)
                and np.array_equal(self.keypoints, other.keypoints))


@dataclass(frozen=True)
class SelectionPlan:
    budget: int
    per_region_counts: Dict[str, int]
    indices: Tuple[int, ...]

    def __post_init__(self):
        if sum(self.per_region_counts.values()) != self.budget:
            raise ValueError("region counts do not sum to the budget")
        if len(self.indices) != self.budget or len(set(self.indices)) != self.budget:
            raise ValueError("plan indices must be distinct and match the budget")

    def to_text(self) -> str:
        return " ".join(str(i) for i in self.indices)

    @classmethod
    def from_text(cls, text: str) -> "SelectionPlan":
        indices = tuple(int(tok) for tok in text.split())
        counts = {name: sum(i in REGIONS[name] for i in indices) for name in REGIONS}
        return cls(len(indices), counts, indices)

    @classmethod
    def from_indices(cls, indices) -> "SelectionPlan":
        return cls.from_text(" ".join(str(int(i)) for i in indices))


def _region_counts(budget: int) -> Dict[str, int]:
    counts = {name: 0 for name in PRIORITY}
    cap = {name: len(REGIONS[name]) for name in PRIORITY}
    for n in range(budget):
        open_ = [r for r in PRIORITY if counts[r] < cap[r]]
        if n < EVEN_FROM - 1:
            # weighted highest-averages: next pick maximises weight / (count + 1)
            pick = max(open_, key=lambda r: (WEIGHTS[r] / (counts[r] + 1), -PRIORITY.index(r)))
        else:
            # water filling towards equal counts
            pick = min(open_, key=lambda r: (counts[r], PRIORITY.index(r)))
        counts[pick] += 1
    return counts


def select_keypoints(budget: int) -> SelectionPlan:
    """Deterministic landmark subset of size ``budget``.

    Small budgets favour mouth and eyes (double weight, priority mouth > eye >
    nose > eyebrow > contour); from 16 keypoints on, extra points go to the
    least-covered region so counts even out.  Region counts never decrease as
    the budget grows.  Within a region indices are evenly spaced.
    """
    if not 1 <= budget <= N_LANDMARKS:
        raise ValueError(f"keypoint budget must be in [1, {N_LANDMARKS}], got {budget}")
    counts = _region_counts(budget)
    indices = []
    for name, members in REGIONS.items():
        n, c = len(members), counts[name]
        indices.extend(members[int((i + 0.5) * n / c)] for i in range(c))
    counts = {name: counts[name] for name in REGIONS}
    return SelectionPlan(budget, counts, tuple(sorted(indices)))


def keypoint_frame(params: FaceParams, plan: SelectionPlan,
                   model: SyntheticMorphableModel) -> KeypointFrame:
    pts = landmarks_from_params(model, params).points
    return KeypointFrame(axis_angle_to_matrix(params.head_rotation), model.offset,
                         pts[list(plan.indices)])


def driving_keypoints(source: FaceParams, driving: FaceParams, plan: SelectionPlan,
                      model: SyntheticMorphableModel) -> KeypointFrame:
    """Keypoints of the driving frame rendered with the source identity.

    The driving shape code is discarded so no identity can leak from the
    driver into the output.
    """
    return keypoint_frame(driving.replace(shape=source.shape), plan, model)


def _offset(s, first, t):
    # s + (t - first), arranged so that either degenerate case is exact
    if np.array_equal(s, first):
        return t.copy()
    return s + (t - first)


def relative_motion(source_kf: KeypointFrame, driving_first: KeypointFrame,
                    driving_t: KeypointFrame) -> KeypointFrame:
    if not source_kf.K == driving_first.K == driving_t.K:
        raise ValueError(
            f"keypoint counts differ: {source_kf.K}, {driving_first.K}, {driving_t.K}")
    keypoints = _offset(source_kf.keypoints, driving_first.keypoints, driving_t.keypoints)
    translation = _offset(source_kf.translation, driving_first.translation, driving_t.translation)
    if np.array_equal(driving_t.rotation, driving_first.rotation):
        rotation = source_kf.rotation
    elif np.array_equal(source_kf.rotation, driving_first.rotation):
        rotation = driving_t.rotation
    else:
        rotation = driving_t.rotation @ driving_first.rotation.T @ source_kf.rotation
    return KeypointFrame(rotation, translation, keypoints)


def edit_pose(kf_params: FaceParams, new_head_pose, plan: SelectionPlan,
              model: SyntheticMorphableModel) -> KeypointFrame:
    """Re-render keypoints with the head rotation replaced; jaw and expression are kept."""
    pose = kf_params.pose.copy()
    pose[:3] = np.asarray(new_head_pose, dtype=np.float64).reshape(3)
    return keypoint_frame(kf_params.replace(pose=pose), plan, model)


def mouth_opening(kf: KeypointFrame, plan: SelectionPlan,
                  upper: int = UPPER_LIP, lower: int = LOWER_LIP) -> float:
    """Lip distance measured in the head frame (rotation and offset removed)."""
    pos = {idx: row for row, idx in enumerate(plan.indices)}
    if upper not in pos or lower not in pos:
        raise KeyError("plan does not contain both lip landmarks")
    head = (kf.keypoints - kf.translation) @ kf.rotation
    return float(np.linalg.norm(head[pos[upper]] - head[pos[lower]]))
