"""Keypoint-induced flow fields, mask-weighted flow combination and feature-volume warping.

Coordinates are the normalized grid frame of ``torch.nn.functional.grid_sample``
(``align_corners=False``): x runs along width, y along height, z along depth,
each in [-1, 1].  Keypoint canonical units are the same frame, so keypoints can
be used on the grid without conversion.  Flows are absolute sampling
coordinates in the source volume, not displacements.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .keypoints import KeypointFrame


@dataclass
class FeatureVolume:
    data: torch.Tensor  # C x D x H x W

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ValueError(f"feature volume must be rank 4, got shape {tuple(self.data.shape)}")
        if min(self.data.shape[1:]) < 2:
            raise ValueError("feature volume needs D, H, W >= 2")

    @property
    def spatial(self):
        return tuple(self.data.shape[1:])


@dataclass
class MotionField:
    flow: torch.Tensor  # D x H x W x 3
    masks: torch.Tensor  # K x D x H x W
    occlusion: torch.Tensor  # H x W


def keypoint_flow(source_kf: KeypointFrame, driving_kf: KeypointFrame, k: int, p_d) -> np.ndarray:
    """Map a driving-volume point to the source volume through keypoint ``k``."""
    if not 0 <= k < min(source_kf.K, driving_kf.K):
        raise IndexError(f"keypoint index {k} out of range")
    p_d = np.asarray(p_d, dtype=np.float64)
    A = source_kf.rotation @ driving_kf.rotation.T
    return (p_d - driving_kf.keypoints[k]) @ A.T + source_kf.keypoints[k]


def identity_grid(depth: int, height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Voxel-centre coordinates, shape ``(D, H, W, 3)`` in (x, y, z) order."""
    def axis(n):
        return (2 * torch.arange(n, dtype=dtype) + 1) / n - 1
    z, y, x = torch.meshgrid(axis(depth), axis(height), axis(width), indexing="ij")
    return torch.stack([x, y, z], dim=-1)


def kf_tensors(frames: Sequence[KeypointFrame], dtype=torch.float32):
    """Stack keypoint frames into ``(B, 3, 3)`` rotations and ``(B, K, 3)`` keypoints."""
    R = torch.as_tensor(np.stack([f.rotation for f in frames]), dtype=dtype)
    x = torch.as_tensor(np.stack([f.keypoints for f in frames]), dtype=dtype)
    return R, x


def keypoint_flows(src_R, src_x, drv_R, drv_x, grid: torch.Tensor) -> torch.Tensor:
    """Per-keypoint flows on ``grid`` for a batch: returns ``(B, K, D, H, W, 3)``."""
    A = src_R @ drv_R.transpose(1, 2)  # B,3,3
    rel = grid[None, None] - drv_x[:, :, None, None, None, :]
    return torch.einsum("bkdhwj,bij->bkdhwi", rel, A) + src_x[:, :, None, None, None, :]


def sample_volume(volume: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Trilinear sampling of ``(B, C, D, H, W)`` at ``(B, D, H, W, 3)`` coordinates, zero padded."""
    return F.grid_sample(volume, flow, mode="bilinear", padding_mode="zeros", align_corners=False)


def warp_candidates(volume: torch.Tensor, flows: torch.Tensor) -> torch.Tensor:
    """Warp ``(B, C, D, H, W)`` by each of ``(B, K, D, H, W, 3)`` flows -> ``(B, K, C, D, H, W)``."""
    B, K = flows.shape[:2]
    rep = volume[:, None].expand(B, K, *volume.shape[1:]).reshape(B * K, *volume.shape[1:])
    out = sample_volume(rep, flows.reshape(B * K, *flows.shape[2:]))
    return out.view(B, K, *out.shape[1:])


def combine_flows(flows: torch.Tensor, logits: torch.Tensor):
    """Softmax masks over keypoints and the mask-weighted flow.

    ``flows`` is ``(B, K, D, H, W, 3)``, ``logits`` ``(B, K, D, H, W)``.
    """
    masks = torch.softmax(logits, dim=1)
    return (masks[..., None] * flows).sum(dim=1), masks


def candidate_warps(f_s: FeatureVolume, source_kf: KeypointFrame,
                    driving_kf: KeypointFrame) -> torch.Tensor:
    """One warped copy of ``f_s`` per keypoint, shape ``(K, C, D, H, W)``."""
    if source_kf.K != driving_kf.K:
        raise ValueError(f"keypoint counts differ: {source_kf.K} vs {driving_kf.K}")
    dtype = f_s.data.dtype
    grid = identity_grid(*f_s.spatial, dtype=dtype)
    sR, sx = kf_tensors([source_kf], dtype)
    dR, dx = kf_tensors([driving_kf], dtype)
    flows = keypoint_flows(sR, sx, dR, dx, grid)
    out = warp_candidates(f_s.data[None], flows)[0]
    # grid_sample only reproduces its own voxel centres up to rounding; an exact
    # identity flow is a plain copy
    if np.array_equal(source_kf.rotation, driving_kf.rotation):
        same = np.all(source_kf.keypoints == driving_kf.keypoints, axis=1)
        for k in np.flatnonzero(same):
            out[k] = f_s.data
    return out


def combine_flow(candidates: torch.Tensor, logits: torch.Tensor, source_kf: KeypointFrame,
                 driving_kf: KeypointFrame, occlusion: Optional[torch.Tensor] = None) -> MotionField:
    K = source_kf.K
    if driving_kf.K != K or candidates.shape[0] != K or logits.shape[0] != K:
        raise ValueError("candidates, logits and keypoint frames disagree on K")
    if tuple(logits.shape[1:]) != tuple(candidates.shape[2:]):
        raise ValueError(
            f"logit grid {tuple(logits.shape[1:])} does not match candidates {tuple(candidates.shape[2:])}")
    dtype = logits.dtype
    grid = identity_grid(*logits.shape[1:], dtype=dtype)
    sR, sx = kf_tensors([source_kf], dtype)
    dR, dx = kf_tensors([driving_kf], dtype)
    flow, masks = combine_flows(keypoint_flows(sR, sx, dR, dx, grid), logits[None])
    if occlusion is None:
        occlusion = torch.ones(logits.shape[2:], dtype=dtype)
    return MotionField(flow[0], masks[0], occlusion)


def warp(f_s: FeatureVolume, field: MotionField) -> FeatureVolume:
    if tuple(field.flow.shape[:3]) != f_s.spatial:
        raise ValueError(f"flow grid {tuple(field.flow.shape[:3])} does not match volume {f_s.spatial}")
    return FeatureVolume(sample_volume(f_s.data[None], field.flow[None])[0])
