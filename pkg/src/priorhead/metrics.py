"""Reconstruction and semantic metrics, pluggable feature extractors and hard-subset selection."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from skimage.metrics import structural_similarity

from .prior import (
    EXPR_DIM,
    MOUTH_INDICES,
    N_LANDMARKS,
    SHAPE_DIM,
    FaceParams,
    ParamFitter,
    SyntheticMorphableModel,
    head_pose_variance,
)

log = logging.getLogger(__name__)

PSNR_INF = math.inf
FID_EPS = 1e-6
REPORT_COLUMNS = ("PSNR", "SSIM", "FID", "AKD", "AKD-M", "AED", "AEMOD")


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, data_range: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``math.inf``."""
    x, y = _pair(x, y)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10 * np.log10(data_range ** 2 / mse))


def ssim(x, y, data_range: float = 255.0) -> float:
    x, y = _pair(x, y)
    channel_axis = -1 if x.ndim == 3 else None
    return float(structural_similarity(x, y, data_range=data_range, channel_axis=channel_axis))


# ---------------------------------------------------------------- extractors

Images = np.ndarray  # N x H x W x 3


@dataclass
class ExtractorRegistry:
    """Batched feature extractors: each maps an ``(N, H, W, 3)`` stack to per-image outputs.

    ``keypoint_detector`` returns ``(N, 68, 2)`` pixel positions (rows of NaN
    mark frames where detection failed); the embedders return ``(N, d)``.
    """

    keypoint_detector: Callable[[Images], np.ndarray]
    identity_embedder: Callable[[Images], np.ndarray]
    emotion_embedder: Callable[[Images], np.ndarray]
    image_embedder: Callable[[Images], np.ndarray]
    name: str = "custom"


class _MemoFitter:
    """Per-image memo around the parameter fitter so repeated evaluation of the same frame is free."""

    def __init__(self, fitter: ParamFitter):
        self.fitter = fitter
        self.cache: Dict[str, np.ndarray] = {}

    def __call__(self, images) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        keys = [hashlib.sha256(np.ascontiguousarray(im).tobytes()).hexdigest() for im in images]
        todo = [i for i, k in enumerate(keys) if k not in self.cache]
        uniq = list(dict.fromkeys(keys[i] for i in todo))
        if uniq:
            first = {k: i for i, k in reversed(list(enumerate(keys)))}
            fitted = self.fitter.fit(images[[first[k] for k in uniq]])
            self.cache.update(zip(uniq, fitted))
        return np.stack([self.cache[k] for k in keys]) if keys else np.zeros((0, 156))


def pooled_pixels(images, grid: int = 4) -> np.ndarray:
    """Average-pool each image to ``grid x grid x 3`` and flatten (values in [0, 1])."""
    a = np.asarray(images, dtype=np.float64) / 255.0
    if a.ndim == 3:
        a = a[None]
    n, h, w, c = a.shape
    return a.reshape(n, grid, h // grid, grid, w // grid, c).mean(axis=(2, 4)).reshape(n, -1)


def synthetic_registry(model: Optional[SyntheticMorphableModel] = None, resolution: int = 64,
                       fitter: Optional[ParamFitter] = None) -> ExtractorRegistry:
    """Oracles backed by the synthetic prior.

    Detector, identity and emotion embedders all come from one analysis-by-synthesis
    fit per image: detected keypoints are the projected fitted landmarks, identity
    is the fitted shape code and emotion the fitted expression code.
    """
    model = model or SyntheticMorphableModel(0)
    memo = _MemoFitter(fitter or ParamFitter(model, resolution))

    def detector(images):
        vecs = memo(images)
        return np.stack([model.project(model.head_landmarks(FaceParams.from_vector(v))
                                       @ _rot(v).T + model.offset, resolution) for v in vecs])

    return ExtractorRegistry(
        keypoint_detector=detector,
        identity_embedder=lambda ims: memo(ims)[:, :SHAPE_DIM],
        emotion_embedder=lambda ims: memo(ims)[:, SHAPE_DIM:SHAPE_DIM + EXPR_DIM],
        image_embedder=pooled_pixels,
        name="synthetic",
    )


def _rot(v):
    from .prior import axis_angle_to_matrix
    return axis_angle_to_matrix(v[SHAPE_DIM + EXPR_DIM:SHAPE_DIM + EXPR_DIM + 3])


# ---------------------------------------------------------------- keypoint distance

def akd_detail(gen_video, ref_video, detector, region: str = "all") -> Tuple[float, int]:
    """``(AKD, skipped frame count)``; mean keypoint distance in pixels over frames and keypoints."""
    gen_video, ref_video = np.asarray(gen_video), np.asarray(ref_video)
    if len(gen_video) != len(ref_video):
        raise ValueError(f"videos differ in length: {len(gen_video)} vs {len(ref_video)}")
    if len(gen_video) == 0:
        raise ValueError("empty video")
    if region == "all":
        idx = list(range(N_LANDMARKS))
    elif region == "mouth":
        idx = list(MOUTH_INDICES)
    else:
        raise ValueError(f"unknown region {region!r}")
    kg = np.asarray(detector(gen_video), dtype=np.float64)[:, idx]
    kr = np.asarray(detector(ref_video), dtype=np.float64)[:, idx]
    ok = np.isfinite(kg).all(axis=(1, 2)) & np.isfinite(kr).all(axis=(1, 2))
    skipped = int((~ok).sum())
    if skipped:
        warnings.warn(f"keypoint detection failed on {skipped} frame(s); skipped")
    if not ok.any():
        raise ValueError("keypoint detection failed on every frame")
    return float(np.linalg.norm(kg[ok] - kr[ok], axis=-1).mean()), skipped


def akd(gen_video, ref_video, detector, region: str = "all") -> float:
    return akd_detail(gen_video, ref_video, detector, region)[0]


# ---------------------------------------------------------------- embedding distances

def aed(gen_video, source_video_frames, embedder, mode: str = "reenactment") -> float:
    """Identity distance.

    ``reenactment``: every generated frame against every frame of the source video.
    ``reconstruction``: generated frame t against reference frame t.
    """
    g = np.asarray(embedder(np.asarray(gen_video)), dtype=np.float64)
    r = np.asarray(embedder(np.asarray(source_video_frames)), dtype=np.float64)
    if len(g) == 0:
        raise ValueError("no generated frames")
    if len(r) == 0:
        raise ValueError("empty reference set")
    g, r = g.reshape(len(g), -1), r.reshape(len(r), -1)
    if mode == "reenactment":
        return float(np.linalg.norm(g[:, None] - r[None], axis=-1).mean())
    if mode == "reconstruction":
        if len(g) != len(r):
            raise ValueError("reconstruction mode needs one reference per generated frame")
        return float(np.linalg.norm(g - r, axis=-1).mean())
    raise ValueError(f"unknown AED mode {mode!r}")


def aemod(gen_video, driving_video, embedder) -> float:
    """Mean emotion-embedding distance between each generated frame and its driving frame."""
    g = np.asarray(embedder(np.asarray(gen_video)), dtype=np.float64)
    d = np.asarray(embedder(np.asarray(driving_video)), dtype=np.float64)
    if len(g) == 0:
        raise ValueError("no generated frames")
    if len(g) != len(d):
        raise ValueError("generated and driving videos differ in length")
    return float(np.linalg.norm(g.reshape(len(g), -1) - d.reshape(len(d), -1), axis=-1).mean())


def frechet_distance(f1, f2, eps: float = FID_EPS) -> float:
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.ndim == 1:
        f1, f2 = f1[:, None], f2[:, None]
    if len(f1) < 2 or len(f2) < 2:
        raise ValueError("FID needs at least 2 samples per side")
    mu1, mu2 = f1.mean(0), f2.mean(0)
    s1 = np.atleast_2d(np.cov(f1, rowvar=False, bias=False))
    s2 = np.atleast_2d(np.cov(f2, rowvar=False, bias=False))
    covmean, _ = linalg.sqrtm(s1 @ s2, disp=False)
    if not np.all(np.isfinite(covmean)) or np.linalg.cond(s1) > 1e12 or np.linalg.cond(s2) > 1e12:
        log.info("FID covariance near singular; adding %g to the diagonal", eps)
        off = eps * np.eye(s1.shape[0])
        covmean, _ = linalg.sqrtm((s1 + off) @ (s2 + off), disp=False)
    covmean = covmean.real
    return float(max(np.sum((mu1 - mu2) ** 2) + np.trace(s1 + s2 - 2 * covmean), 0.0))


def fid(gen_frames, real_frames, embedder=pooled_pixels) -> float:
    return frechet_distance(embedder(np.asarray(gen_frames)), embedder(np.asarray(real_frames)))


# ---------------------------------------------------------------- hard subset

@dataclass
class HardSubset:
    video_ids: List[str]
    source_frames: Dict[str, int]
    variances: Dict[str, float]


def hard_subset(videos: Mapping[str, Sequence[FaceParams]], fraction: float = 0.1) -> HardSubset:
    """Top ``floor(fraction * N)`` videos by head-pose variance (ties by ascending id).

    The hard source frame of each selected video is the one with the largest
    head-rotation norm.
    """
    if len(videos) < 10:
        raise ValueError(f"hard subset needs at least 10 videos, got {len(videos)}")
    var = {vid: head_pose_variance(ps) for vid, ps in videos.items()}
    n = int(math.floor(fraction * len(videos)))
    chosen = sorted(var, key=lambda v: (-var[v], v))[:n]
    src = {v: int(np.argmax([np.linalg.norm(p.head_rotation) for p in videos[v]])) for v in chosen}
    return HardSubset(chosen, src, var)


# ---------------------------------------------------------------- report

def video_row(gen, ref, source_frames, registry: ExtractorRegistry, mode: str = "reconstruction") -> Dict:
    gen, ref = np.asarray(gen), np.asarray(ref)
    row = {
        "PSNR": float(np.mean([psnr(g, r) for g, r in zip(gen, ref)])),
        "SSIM": float(np.mean([ssim(g, r) for g, r in zip(gen, ref)])),
        "FID": fid(gen, ref, registry.image_embedder) if len(gen) >= 2 else float("nan"),
        "AKD": akd(gen, ref, registry.keypoint_detector, "all"),
        "AKD-M": akd(gen, ref, registry.keypoint_detector, "mouth"),
        "AED": aed(gen, ref if mode == "reconstruction" else source_frames, registry.identity_embedder, mode),
        "AEMOD": aemod(gen, ref, registry.emotion_embedder),
    }
    return row


def evaluation_report(videos: Mapping[str, Tuple[np.ndarray, np.ndarray, np.ndarray]],
                      registry: ExtractorRegistry, mode: str = "reconstruction") -> List[Dict]:
    """One row per video plus a final ``ALL`` row.

    ``videos`` maps id -> (generated frames, reference frames, source-video frames).
    The aggregate FID pools all frames; other aggregate columns average the video rows.
    """
    rows = []
    for vid, (gen, ref, src) in videos.items():
        row = {"video": vid}
        row.update(video_row(gen, ref, src, registry, mode))
        rows.append(row)
    if rows:
        agg = {"video": "ALL"}
        for c in REPORT_COLUMNS:
            agg[c] = float(np.mean([r[c] for r in rows]))
        agg["FID"] = fid(np.concatenate([v[0] for v in videos.values()]),
                         np.concatenate([v[1] for v in videos.values()]), registry.image_embedder)
        rows.append(agg)
    return rows


def write_report(path, rows: Sequence[Dict], delimiter: str = "\t"):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter=delimiter)
        w.writerow(("video",) + REPORT_COLUMNS)
        for r in rows:
            w.writerow([r["video"]] + [f"{r[c]:.6g}" for c in REPORT_COLUMNS])


def read_report(path, delimiter: str = "\t") -> List[Dict]:
    with open(path, newline="") as f:
        rd = csv.DictReader(f, delimiter=delimiter)
        return [{k: (v if k == "video" else float(v)) for k, v in row.items()} for row in rd]
