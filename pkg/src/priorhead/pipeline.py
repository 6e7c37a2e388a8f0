"""Inference: reconstruction, re-enactment and batched synthesis from a trained checkpoint."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch

from .keypoints import (
    KeypointFrame,
    SelectionPlan,
    driving_keypoints,
    keypoint_frame,
    relative_motion,
)
from .networks import (
    ExpressionFeature,
    FaceVideoModel,
    condition_batch,
    image_to_tensor,
    load_checkpoint,
    tensor_to_image,
)
from .prior import FaceParams, SyntheticMorphableModel


class PlanMismatchError(ValueError):
    pass


@dataclass
class Synthesizer:
    model: FaceVideoModel
    plan: SelectionPlan
    morph: SyntheticMorphableModel
    batch: int = 16

    @classmethod
    def from_checkpoint(cls, path, batch: int = 16) -> "Synthesizer":
        model, plan_text, payload = load_checkpoint(path)
        plan = SelectionPlan.from_text(plan_text)
        if plan.budget != model.cfg.num_keypoints:
            raise PlanMismatchError("checkpoint plan size disagrees with its network")
        return cls(model, plan, SyntheticMorphableModel(payload["prior_seed"]), batch)

    @property
    def K(self) -> int:
        return self.plan.budget

    def check_plan(self, plan_indices: Sequence[int]):
        if tuple(plan_indices) != self.plan.indices:
            raise PlanMismatchError(
                f"keypoint plan {tuple(plan_indices)} does not match the checkpoint plan {self.plan.indices}")

    def keypoints(self, params: FaceParams) -> KeypointFrame:
        return keypoint_frame(params, self.plan, self.morph)

    def swap_keypoints(self, source: FaceParams, driving: FaceParams) -> KeypointFrame:
        return driving_keypoints(source, driving, self.plan, self.morph)

    def render(self, source_image, source_kf: KeypointFrame, driving_kfs: Sequence[KeypointFrame],
               exprs: Sequence[ExpressionFeature]) -> np.ndarray:
        """Generate one frame per driving keypoint frame; returns ``(T, H, W, 3)`` uint8."""
        if len(driving_kfs) != len(exprs):
            raise ValueError("need one expression feature per driving frame")
        if source_kf.K != self.K or any(k.K != self.K for k in driving_kfs):
            raise PlanMismatchError(f"keypoint frames must have K={self.K}")
        self.model.eval()
        dt = torch.float32
        out = []
        with torch.no_grad():
            f_s = self.model.appearance(image_to_tensor(source_image))
            sR = torch.as_tensor(source_kf.rotation, dtype=dt)[None]
            sx = torch.as_tensor(source_kf.keypoints, dtype=dt)[None]
            for i in range(0, len(driving_kfs), self.batch):
                kfs = driving_kfs[i:i + self.batch]
                n = len(kfs)
                dR = torch.as_tensor(np.stack([k.rotation for k in kfs]), dtype=dt)
                dx = torch.as_tensor(np.stack([k.keypoints for k in kfs]), dtype=dt)
                vol = f_s.expand(n, *f_s.shape[1:])
                flow, _, occ = self.model.motion(vol, sR.expand(n, 3, 3), sx.expand(n, -1, -1), dR, dx)
                warped = torch.nn.functional.grid_sample(vol, flow, mode="bilinear", padding_mode="zeros",
                                                         align_corners=False)
                img = self.model.generator(warped, occ, condition_batch(exprs[i:i + self.batch], dt))
                out.append(tensor_to_image(img))
        return np.concatenate(out) if out else np.zeros((0,) + np.asarray(source_image).shape, np.uint8)


def expression_stream(params: Sequence[FaceParams], E: int = 50) -> List[ExpressionFeature]:
    return [ExpressionFeature.from_params(p, E) for p in params]


def reconstruct(syn: Synthesizer, frames, params: Sequence[FaceParams], source_index: int = 0,
                E: int = 50) -> np.ndarray:
    """Same-identity reconstruction of a whole video from one of its frames."""
    src = params[source_index]
    kfs = [syn.swap_keypoints(src, p) for p in params]
    return syn.render(frames[source_index], syn.keypoints(src), kfs, expression_stream(params, E))


def reenact(syn: Synthesizer, source_image, source_params: FaceParams, driving_params: Sequence[FaceParams],
            relative: bool = True, E: int = 50) -> np.ndarray:
    """Drive ``source_image`` with another video's motion.

    By default the driver's frame-to-frame motion is transferred relative to its
    first frame; with ``relative=False`` absolute (identity-swapped) keypoints are used.
    """
    src_kf = syn.keypoints(source_params)
    kfs = [syn.swap_keypoints(source_params, p) for p in driving_params]
    if relative and kfs:
        first = kfs[0]
        kfs = [relative_motion(src_kf, first, k) for k in kfs]
    return syn.render(source_image, src_kf, kfs, expression_stream(driving_params, E))
