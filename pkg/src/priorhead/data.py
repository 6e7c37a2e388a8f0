"""Dataset layout, synthetic dataset generation, face-crop preprocessing and the prior-parameter cache.

Layout::

    root/manifest.txt            one ``video_id split`` line per video
    root/meta.json               resolution and morphable-model seed
    root/videos/<id>/frame_0000.png ...
    root/videos/<id>/params.bin  156 little-endian float32 per frame
    root/videos/<id>/params.sha256  hash of the frames the sidecar was computed from
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .prior import (
    BACKGROUND,
    EXPR_DIM,
    EXPR_STD,
    HEAD_STD_RANGE,
    JAW_MEAN,
    JAW_STD,
    PARAM_DIM,
    SHAPE_DIM,
    SHAPE_STD,
    FaceParams,
    PriorBackend,
    SyntheticMorphableModel,
    render_synthetic_frame,
)

log = logging.getLogger(__name__)

PARAMS_FILE = "params.bin"
HASH_FILE = "params.sha256"
DRIFT_FRACTION = 0.2


class DatasetError(Exception):
    pass


class NoFaceError(DatasetError):
    pass


def atomic_write(path, data: bytes):
    """Write ``data`` to ``path`` through a temp file in the same directory and a rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_params(params: Sequence[FaceParams]) -> bytes:
    if not params:
        return b""
    return np.stack([p.to_vector() for p in params]).astype("<f4").tobytes()


def decode_params(raw: bytes) -> List[FaceParams]:
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size % PARAM_DIM:
        raise DatasetError(f"sidecar size {len(raw)} is not a multiple of {PARAM_DIM * 4} bytes")
    return [FaceParams.from_vector(v) for v in arr.reshape(-1, PARAM_DIM).astype(np.float64)]


@dataclass
class DatasetLayout:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    # paths
    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.txt"

    def video_dir(self, vid: str) -> Path:
        return self.root / "videos" / vid

    def params_path(self, vid: str) -> Path:
        return self.video_dir(vid) / PARAMS_FILE

    def hash_path(self, vid: str) -> Path:
        return self.video_dir(vid) / HASH_FILE

    # manifest
    def manifest(self) -> List[Tuple[str, str]]:
        if not self.manifest_path.exists():
            raise DatasetError(f"no manifest at {self.manifest_path}")
        rows = []
        for line in self.manifest_path.read_text().splitlines():
            if line.strip():
                vid, split = line.split()
                rows.append((vid, split))
        return rows

    def write_manifest(self, rows: Sequence[Tuple[str, str]]):
        ids = [r[0] for r in rows]
        if len(set(ids)) != len(ids):
            raise DatasetError("manifest lists a video twice")
        atomic_write(self.manifest_path, "".join(f"{v} {s}\n" for v, s in rows).encode())

    def video_ids(self, split: Optional[str] = None) -> List[str]:
        return [v for v, s in self.manifest() if split is None or s == split]

    @property
    def meta(self) -> Dict:
        p = self.root / "meta.json"
        return json.loads(p.read_text()) if p.exists() else {}

    # frames and sidecars
    def frame_paths(self, vid: str) -> List[Path]:
        return sorted(self.video_dir(vid).glob("frame_*.png"))

    def load_frames(self, vid: str) -> np.ndarray:
        paths = self.frame_paths(vid)
        if not paths:
            raise DatasetError(f"video {vid} has no frames")
        return np.stack([np.asarray(Image.open(p).convert("RGB")) for p in paths])

    def write_frames(self, vid: str, frames):
        d = self.video_dir(vid)
        d.mkdir(parents=True, exist_ok=True)
        for old in d.glob("frame_*.png"):
            old.unlink()
        for i, fr in enumerate(frames):
            Image.fromarray(np.asarray(fr, dtype=np.uint8)).save(d / f"frame_{i:04d}.png")

    def frames_hash(self, vid: str) -> str:
        h = hashlib.sha256()
        for p in self.frame_paths(vid):
            h.update(p.name.encode())
            h.update(p.read_bytes())
        return h.hexdigest()

    def load_params(self, vid: str) -> List[FaceParams]:
        p = self.params_path(vid)
        if not p.exists():
            raise DatasetError(f"missing prior sidecar for video {vid}")
        return decode_params(p.read_bytes())

    def write_params(self, vid: str, params: Sequence[FaceParams], frames_hash: Optional[str] = None):
        atomic_write(self.params_path(vid), encode_params(params))
        atomic_write(self.hash_path(vid), (frames_hash or self.frames_hash(vid)).encode())

    def sidecar_current(self, vid: str) -> bool:
        if not (self.params_path(vid).exists() and self.hash_path(vid).exists()):
            return False
        return self.hash_path(vid).read_text().strip() == self.frames_hash(vid)

    def validate(self):
        for vid in self.video_ids():
            n = len(self.frame_paths(vid))
            m = len(self.load_params(vid))
            if n != m:
                raise DatasetError(f"video {vid}: {n} frames but {m} parameter records")


# ---------------------------------------------------------------- synthetic data

def _ar1(rng, n, dim, rho, std, mean=0.0):
    """Stationary AR(1) walk of length ``n`` with marginal ``std``."""
    x = np.empty((n, dim))
    x[0] = rng.standard_normal(dim) * std
    innov = np.sqrt(1 - rho ** 2) * std
    for t in range(1, n):
        x[t] = rho * x[t - 1] + innov * rng.standard_normal(dim)
    return x + mean


def synthetic_video_params(rng: np.random.Generator, n_frames: int, head_std: Optional[float] = None,
                           rho: float = 0.9) -> List[FaceParams]:
    """Smooth random walk in expression and pose with a fixed identity."""
    if head_std is None:
        head_std = float(np.exp(rng.uniform(*np.log(HEAD_STD_RANGE))))
    shape = SHAPE_STD * rng.standard_normal(SHAPE_DIM)
    expr = _ar1(rng, n_frames, EXPR_DIM, rho, EXPR_STD)
    head = _ar1(rng, n_frames, 3, rho, head_std)
    jaw = _ar1(rng, n_frames, 3, rho, JAW_STD, JAW_MEAN)
    return [FaceParams(shape, expr[t], np.concatenate([head[t], jaw[t]])) for t in range(n_frames)]


def make_synthetic_dataset(root, n_videos: int, frames_per_video: int, seed: int = 0,
                           resolution: int = 64, test_fraction: float = 0.2,
                           model_seed: int = 0, n_test: Optional[int] = None) -> DatasetLayout:
    """Render a deterministic synthetic dataset with ground-truth sidecars.

    Per-video head-motion scale is log-uniform over ``HEAD_STD_RANGE`` so pose
    variance spans more than an order of magnitude across videos.
    """
    if n_videos < 1 or frames_per_video < 1:
        raise ValueError("n_videos and frames_per_video must be positive")
    layout = DatasetLayout(root)
    layout.root.mkdir(parents=True, exist_ok=True)
    model = SyntheticMorphableModel(model_seed)
    rng = np.random.default_rng(seed)
    if n_test is None:
        n_test = int(round(test_fraction * n_videos))
    if not 0 <= n_test <= n_videos:
        raise ValueError("test split larger than the dataset")
    is_test = np.zeros(n_videos, bool)
    is_test[rng.permutation(n_videos)[:n_test]] = True
    rows = []
    for i in range(n_videos):
        vid = f"vid{i:05d}"
        params = synthetic_video_params(rng, frames_per_video)
        frames = [render_synthetic_frame(model, p, resolution) for p in params]
        layout.write_frames(vid, frames)
        layout.write_params(vid, params)
        rows.append((vid, "test" if is_test[i] else "train"))
    layout.write_manifest(rows)
    atomic_write(layout.root / "meta.json",
                 json.dumps({"resolution": resolution, "model_seed": model_seed, "seed": seed}).encode())
    return layout


# ---------------------------------------------------------------- prior cache

@dataclass
class CacheReport:
    computed: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    failed: List[str] = field(default_factory=list)


def cache_priors(layout: DatasetLayout, backend: PriorBackend) -> CacheReport:
    """Extract prior parameters for every video whose sidecar is missing or stale.

    A sidecar is current when the stored hash matches the frames on disk.
    Failures are logged per video and the run continues.
    """
    report = CacheReport()
    for vid in layout.video_ids():
        digest = layout.frames_hash(vid)
        if layout.hash_path(vid).exists() and layout.params_path(vid).exists() \
                and layout.hash_path(vid).read_text().strip() == digest:
            report.skipped.append(vid)
            continue
        try:
            params = [backend.extract_params(fr) for fr in layout.load_frames(vid)]
            layout.write_params(vid, params, digest)
            report.computed.append(vid)
        except Exception as exc:  # keep going, one bad video must not stop the cache
            log.warning("prior extraction failed for %s: %s", vid, exc)
            report.failed.append(vid)
    return report


# ---------------------------------------------------------------- preprocessing

Box = Tuple[float, float, float, float]  # x0, y0, x1, y1 (pixels, exclusive end)


def synthetic_face_detector(frame: np.ndarray, tol: int = 8) -> Optional[Box]:
    """Bounding box of pixels that differ from the synthetic background."""
    diff = np.abs(np.asarray(frame, dtype=np.int16) - np.asarray(BACKGROUND, dtype=np.int16)).max(-1)
    ys, xs = np.nonzero(diff > tol)
    if len(xs) == 0:
        return None
    return float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)


def _center(b: Box):
    return np.array([(b[0] + b[2]) / 2, (b[1] + b[3]) / 2])


def _diag(b: Box) -> float:
    return float(np.hypot(b[2] - b[0], b[3] - b[1]))


@dataclass
class Clip:
    start: int
    end: int  # exclusive
    crop: Tuple[int, int, int, int]
    frames: np.ndarray


def square_crop(boxes: Sequence[Box], width: int, height: int, pad: float) -> Tuple[int, int, int, int]:
    """Smallest square covering all boxes (each grown by ``pad`` of its size), kept inside the frame."""
    x0 = min(b[0] - pad * (b[2] - b[0]) for b in boxes)
    y0 = min(b[1] - pad * (b[3] - b[1]) for b in boxes)
    x1 = max(b[2] + pad * (b[2] - b[0]) for b in boxes)
    y1 = max(b[3] + pad * (b[3] - b[1]) for b in boxes)
    side = min(max(x1 - x0, y1 - y0), width, height)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    left = int(round(min(max(cx - side / 2, 0), width - side)))
    top = int(round(min(max(cy - side / 2, 0), height - side)))
    side = int(round(side))
    return left, top, left + side, top + side


def preprocess(frames, detector: Callable[[np.ndarray], Optional[Box]], out_size: int = 256,
               min_size: int = 64, pad: float = 0.1, drift: float = DRIFT_FRACTION) -> List[Clip]:
    """Split a raw video into face-tracked clips and crop/resize each.

    A clip starts at a frame where the detector finds a face.  The box is
    tracked until its centre moves more than ``drift`` times the initial box
    diagonal (or the face is lost); the clip is cropped with the smallest
    square covering every tracked box.  Detection restarts on the first frame
    after the drift.  Crops smaller than ``min_size`` are dropped with a log
    entry.
    """
    frames = np.asarray(frames)
    T, H, W = frames.shape[:3]
    clips: List[Clip] = []
    found_any = False
    i = 0
    while i < T:
        first = detector(frames[i])
        if first is None:
            i += 1
            continue
        found_any = True
        boxes = [first]
        j = i + 1
        while j < T:
            b = detector(frames[j])
            if b is None or np.linalg.norm(_center(b) - _center(first)) > drift * _diag(first):
                break
            boxes.append(b)
            j += 1
        crop = square_crop(boxes, W, H, pad)
        side = crop[2] - crop[0]
        if side < min_size:
            log.info("dropping frames %d-%d: crop %d px is below %d px", i, j - 1, side, min_size)
        else:
            out = np.stack([np.asarray(Image.fromarray(f[crop[1]:crop[3], crop[0]:crop[2]])
                                       .resize((out_size, out_size), Image.BICUBIC)) for f in frames[i:j]])
            clips.append(Clip(i, j, crop, out))
        i = j
    if not found_any:
        raise NoFaceError("detector found no face in any frame")
    return clips
