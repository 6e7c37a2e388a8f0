"""Face prior: parameter containers, the synthetic morphable model and prior backends.

The synthetic model is a 68-landmark linear face model with seeded random
shape / expression / jaw bases.  It stands in for FLAME+DECA at desk scale:
frames are rendered as coloured disks and the synthetic backend recovers the
exact parameters of its own renders.
"""
from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.transform import Rotation

SHAPE_DIM = 100
EXPR_DIM = 50
POSE_DIM = 6
PARAM_DIM = SHAPE_DIM + EXPR_DIM + POSE_DIM
N_LANDMARKS = 68

# iBUG-style 68 point layout
REGIONS: Dict[str, List[int]] = {
    "contour": list(range(0, 17)),
    "eyebrow": list(range(17, 27)),
    "nose": list(range(27, 36)),
    "eye": list(range(36, 48)),
    "mouth": list(range(48, 68)),
}
REGION_ORDER = ("contour", "eyebrow", "nose", "eye", "mouth")
MOUTH_INDICES = REGIONS["mouth"]
UPPER_LIP, LOWER_LIP = 51, 57

SUPPORTED_RESOLUTIONS = (32, 64, 128, 256)
BACKGROUND = (38, 42, 58)
REGION_COLORS = {
    "contour": (196, 164, 132),
    "eyebrow": (112, 74, 46),
    "nose": (226, 146, 118),
    "eye": (236, 236, 250),
    "mouth": (204, 56, 80),
}
DISK_RADIUS = 0.035  # fraction of the image side

# marginal scales of synthetic parameters (shared with the dataset generator)
SHAPE_STD = 0.15
EXPR_STD = 0.3
JAW_MEAN = np.array([0.15, 0.0, 0.0])
JAW_STD = np.array([0.1, 0.03, 0.03])
HEAD_STD_RANGE = (0.02, 0.3)

_PAYLOAD_MAGIC = b"FPv1"


class PriorError(Exception):
    pass


class BackendUnavailableError(PriorError):
    pass


class ShapeMismatchError(PriorError, ValueError):
    pass


class UnsupportedResolutionError(PriorError, ValueError):
    pass


def _as_vec(x, n, name):
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape[0] != n:
        raise ValueError(f"{name} must have {n} entries, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


@dataclass(frozen=True, eq=False)
class FaceParams:
    """Shape (100), expression (50) and pose (6) codes for one frame.

    ``pose[:3]`` is the global head rotation as an axis-angle vector and
    ``pose[3:]`` the jaw articulation, both in radians.
    """

    shape: np.ndarray
    expression: np.ndarray
    pose: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", _as_vec(self.shape, SHAPE_DIM, "shape"))
        object.__setattr__(self, "expression", _as_vec(self.expression, EXPR_DIM, "expression"))
        object.__setattr__(self, "pose", _as_vec(self.pose, POSE_DIM, "pose"))

    @classmethod
    def zeros(cls) -> "FaceParams":
        return cls(np.zeros(SHAPE_DIM), np.zeros(EXPR_DIM), np.zeros(POSE_DIM))

    @classmethod
    def from_vector(cls, v) -> "FaceParams":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape[0] != PARAM_DIM:
            raise ValueError(f"expected {PARAM_DIM} values, got {v.shape[0]}")
        return cls(v[:SHAPE_DIM], v[SHAPE_DIM:SHAPE_DIM + EXPR_DIM], v[SHAPE_DIM + EXPR_DIM:])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.shape, self.expression, self.pose])

    @property
    def head_rotation(self) -> np.ndarray:
        return self.pose[:3]

    @property
    def jaw(self) -> np.ndarray:
        return self.pose[3:]

    def replace(self, shape=None, expression=None, pose=None) -> "FaceParams":
        return FaceParams(
            self.shape if shape is None else shape,
            self.expression if expression is None else expression,
            self.pose if pose is None else pose,
        )

    def __eq__(self, other):
        if not isinstance(other, FaceParams):
            return NotImplemented
        return np.array_equal(self.to_vector(), other.to_vector())


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    points: np.ndarray
    semantic_regions: Dict[str, List[int]] = field(default_factory=lambda: REGIONS)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 3):
            raise ValueError(f"expected {N_LANDMARKS}x3 landmarks, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmarks have non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def region(self, name: str) -> np.ndarray:
        return self.points[self.semantic_regions[name]]


def axis_angle_to_matrix(v) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(v, dtype=np.float64)).as_matrix()


def matrix_to_axis_angle(R) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_rotvec()


def axis_angle_to_matrix_torch(v: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula for a batch of axis-angle vectors ``(..., 3)``.

    Uses Taylor expansions near zero so the map stays differentiable there.
    """
    t2 = (v * v).sum(-1, keepdim=True)[..., None]
    small = t2 < 1e-6
    t2s = torch.where(small, torch.ones_like(t2), t2)
    ts = torch.sqrt(t2s)
    a = torch.where(small, 1 - t2 / 6 + t2 * t2 / 120, torch.sin(ts) / ts)
    b = torch.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - torch.cos(ts)) / t2s)
    zero = torch.zeros_like(v[..., 0])
    K = torch.stack([
        torch.stack([zero, -v[..., 2], v[..., 1]], -1),
        torch.stack([v[..., 2], zero, -v[..., 0]], -1),
        torch.stack([-v[..., 1], v[..., 0], zero], -1),
    ], -2)
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand(K.shape)
    return eye + a * K + b * (K @ K)


def mean_face_template() -> np.ndarray:
    """68x3 neutral face in canonical units (x right, y down, z toward the camera)."""
    pts = np.zeros((N_LANDMARKS, 3))
    phi = np.pi - np.arange(17) * np.pi / 16
    pts[0:17] = np.stack([0.7 * np.cos(phi), -0.15 + 0.85 * np.sin(phi), 0.25 * np.sin(phi) - 0.2], -1)

    bx = np.linspace(-0.5, -0.12, 5)
    arch = -0.06 * np.sin(np.linspace(0, np.pi, 5))
    pts[17:22] = np.stack([bx, -0.42 + arch, np.full(5, 0.15)], -1)
    pts[22:27] = np.stack([-bx[::-1], -0.42 + arch, np.full(5, 0.15)], -1)

    pts[27:31] = np.stack([np.zeros(4), np.linspace(-0.3, 0.05, 4), np.linspace(0.2, 0.4, 4)], -1)
    nx = np.linspace(-0.12, 0.12, 5)
    pts[31:36] = np.stack([nx, 0.15 + 0.02 * np.abs(nx) / 0.12, 0.3 - 0.3 * np.abs(nx)], -1)

    ang = np.deg2rad([180, 120, 60, 0, -60, -120])
    for start, cx in ((36, -0.3), (42, 0.3)):
        pts[start:start + 6] = np.stack(
            [cx + 0.11 * np.cos(ang), -0.25 - 0.045 * np.sin(ang), np.full(6, 0.12)], -1)

    outer = np.deg2rad(np.linspace(180, -150, 12))
    pts[48:60] = np.stack([0.25 * np.cos(outer), 0.4 - 0.1 * np.sin(outer), 0.18 + 0.04 * np.sin(outer) ** 2], -1)
    inner = np.deg2rad([180, 135, 90, 45, 0, -45, -90, -135])
    pts[60:68] = np.stack([0.15 * np.cos(inner), 0.4 - 0.04 * np.sin(inner), np.full(8, 0.2)], -1)
    return pts


class SyntheticMorphableModel:
    """Linear 68-landmark face model with seeded bases.

    landmarks = R(pose[:3]) @ (mean + A a + E e + J jaw) + offset
    """

    def __init__(self, seed: int = 0, offset=(0.0, 0.0, 0.0), basis_scale: float = 0.02):
        self.seed = int(seed)
        self.offset = np.asarray(offset, dtype=np.float64).reshape(3)
        rng = np.random.default_rng(self.seed)
        self.mean_landmarks = mean_face_template()
        self.shape_basis = rng.standard_normal((N_LANDMARKS, 3, SHAPE_DIM)) * basis_scale
        self.expression_basis = rng.standard_normal((N_LANDMARKS, 3, EXPR_DIM)) * basis_scale
        self.jaw_basis = rng.standard_normal((N_LANDMARKS, 3, 3)) * basis_scale
        contour = REGIONS["contour"]
        self.expression_basis[contour] = 0.0
        self.jaw_basis[contour] = 0.0

    def head_landmarks(self, params: FaceParams) -> np.ndarray:
        """Unposed landmarks (head frame, no rotation or offset)."""
        return (self.mean_landmarks
                + self.shape_basis @ params.shape
                + self.expression_basis @ params.expression
                + self.jaw_basis @ params.jaw)

    def project(self, points, resolution: int) -> np.ndarray:
        """Orthographic projection of canonical points to pixel coordinates (col, row)."""
        xy = np.asarray(points)[..., :2]
        return ((xy + 1.0) * resolution - 1.0) / 2.0

    def torch_landmarks(self, shape: torch.Tensor, expression: torch.Tensor,
                        pose: torch.Tensor) -> torch.Tensor:
        """Batched differentiable counterpart of :func:`landmarks_from_params`."""
        dt = shape.dtype
        mean = torch.as_tensor(self.mean_landmarks, dtype=dt)
        A = torch.as_tensor(self.shape_basis, dtype=dt)
        E = torch.as_tensor(self.expression_basis, dtype=dt)
        J = torch.as_tensor(self.jaw_basis, dtype=dt)
        head = (mean + torch.einsum("lcs,bs->blc", A, shape)
                + torch.einsum("lce,be->blc", E, expression)
                + torch.einsum("lcj,bj->blc", J, pose[:, 3:]))
        R = axis_angle_to_matrix_torch(pose[:, :3])
        return head @ R.transpose(1, 2) + torch.as_tensor(self.offset, dtype=dt)


def landmarks_from_params(model: SyntheticMorphableModel, params: FaceParams) -> LandmarkSet:
    R = axis_angle_to_matrix(params.head_rotation)
    return LandmarkSet(model.head_landmarks(params) @ R.T + model.offset)


def head_pose_variance(video_params: Sequence[FaceParams]) -> float:
    """Sum over the three head-rotation axes of the population variance."""
    if len(video_params) == 0:
        raise ValueError("head_pose_variance needs at least one frame")
    rot = np.stack([p.head_rotation for p in video_params])
    return float(rot.var(axis=0).sum())


# ---------------------------------------------------------------- rendering

def _check_resolution(resolution: int):
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise UnsupportedResolutionError(
            f"resolution {resolution} not in {SUPPORTED_RESOLUTIONS}")


def _payload_bits(params: FaceParams) -> np.ndarray:
    body = _PAYLOAD_MAGIC + params.to_vector().astype("<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    return np.unpackbits(np.frombuffer(body, dtype=np.uint8))


_PAYLOAD_NBITS = (len(_PAYLOAD_MAGIC) + 4 * PARAM_DIM + 4) * 8


def _planes_needed(n_channels: int) -> int:
    return -(-_PAYLOAD_NBITS // n_channels)


def _embed_payload(img: np.ndarray, params: FaceParams) -> np.ndarray:
    flat = img.reshape(-1).copy()
    planes = _planes_needed(flat.size)
    bits = np.zeros(planes * flat.size, dtype=np.uint8)
    bits[:_PAYLOAD_NBITS] = _payload_bits(params)
    for b, plane in enumerate(bits.reshape(planes, flat.size)):
        flat = (flat & np.uint8(0xFF ^ (1 << b))) | (plane << b).astype(np.uint8)
    return flat.reshape(img.shape)


def decode_payload(image: np.ndarray) -> Optional[FaceParams]:
    """Recover the parameters embedded by :func:`render_synthetic_frame`, or ``None``."""
    flat = np.asarray(image, dtype=np.uint8).reshape(-1)
    planes = _planes_needed(flat.size)
    bits = np.concatenate([(flat >> b) & 1 for b in range(planes)])[:_PAYLOAD_NBITS]
    raw = np.packbits(bits).tobytes()
    body, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if not body.startswith(_PAYLOAD_MAGIC) or zlib.crc32(body) != crc:
        return None
    vec = np.frombuffer(body[len(_PAYLOAD_MAGIC):], dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(vec)):
        return None
    return FaceParams.from_vector(vec)


def rasterize_landmarks(model: SyntheticMorphableModel, params: FaceParams,
                        resolution: int) -> np.ndarray:
    """Anti-aliased disk rendering without the parameter payload (float RGB in [0,255])."""
    pts = model.project(landmarks_from_params(model, params).points, resolution)
    radius = DISK_RADIUS * resolution
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    img = np.empty((resolution, resolution, 3))
    img[:] = BACKGROUND
    for name in REGION_ORDER:
        c = pts[REGIONS[name]]
        d = np.sqrt((xs[None] - c[:, 0, None, None]) ** 2 + (ys[None] - c[:, 1, None, None]) ** 2)
        # union of anti-aliased disks: coverage adds up, then saturates
        alpha = np.clip(np.clip(radius + 0.5 - d, 0.0, 1.0).sum(axis=0), 0.0, 1.0)[..., None]
        img = img * (1 - alpha) + np.asarray(REGION_COLORS[name], dtype=np.float64) * alpha
    return img


def render_synthetic_frame(model: SyntheticMorphableModel, params: FaceParams,
                           resolution: int) -> np.ndarray:
    """Render ``params`` as a uint8 HxWx3 image.

    Landmarks are drawn as filled disks in per-region colours.  The exact
    parameter vector rides in the low bits of the pixels so the synthetic
    backend can invert its own renders.
    """
    _check_resolution(resolution)
    img = np.rint(rasterize_landmarks(model, params, resolution)).astype(np.uint8)
    return _embed_payload(img, params)


def sample_params(rng: np.random.Generator, head_std: Optional[float] = None) -> FaceParams:
    """Draw parameters from the stationary distribution of the synthetic dataset."""
    if head_std is None:
        head_std = np.exp(rng.uniform(*np.log(HEAD_STD_RANGE)))
    jaw = JAW_MEAN + JAW_STD * rng.standard_normal(3)
    return FaceParams(
        SHAPE_STD * rng.standard_normal(SHAPE_DIM),
        EXPR_STD * rng.standard_normal(EXPR_DIM),
        np.concatenate([head_std * rng.standard_normal(3), jaw]),
    )


# ---------------------------------------------------------------- fitter

def _window(resolution: int) -> int:
    return 2 * (int(np.ceil(DISK_RADIUS * resolution + 0.5)) + 1)


def render_torch(pix: torch.Tensor, resolution: int) -> torch.Tensor:
    """Differentiable twin of :func:`rasterize_landmarks` from ``(B, 68, 2)`` pixel positions.

    Returns ``(B, 3, H, W)`` in [0, 1].  Each landmark only touches a small
    window around it, so the cost does not grow with the image area.
    """
    B, dt = pix.shape[0], pix.dtype
    res, r, W = resolution, DISK_RADIUS * resolution, _window(resolution)
    off = torch.arange(W)
    base = torch.floor(pix.detach()).long() - (W // 2 - 1)
    gx, gy = base[..., 0:1] + off, base[..., 1:2] + off
    dx, dy = gx.to(dt) - pix[..., 0:1], gy.to(dt) - pix[..., 1:2]
    d = torch.sqrt(dx[:, :, None, :] ** 2 + dy[:, :, :, None] ** 2 + 1e-12)
    valid = ((gx >= 0) & (gx < res))[:, :, None, :] & ((gy >= 0) & (gy < res))[:, :, :, None]
    a = torch.clamp(r + 0.5 - d, 0, 1) * valid
    flat = gy.clamp(0, res - 1)[:, :, :, None] * res + gx.clamp(0, res - 1)[:, :, None, :]
    idx = _REGION_OF.view(1, N_LANDMARKS, 1, 1) * res * res + flat
    acc = torch.zeros(B, len(REGION_ORDER) * res * res, dtype=dt)
    acc = acc.scatter_add(1, idx.reshape(B, -1), a.reshape(B, -1))
    alpha = acc.view(B, len(REGION_ORDER), 1, res, res).clamp(max=1)
    img = torch.tensor(BACKGROUND, dtype=dt).view(1, 3, 1, 1).expand(B, 3, res, res) / 255
    for i, name in enumerate(REGION_ORDER):
        col = torch.tensor(REGION_COLORS[name], dtype=dt).view(1, 3, 1, 1) / 255
        img = img * (1 - alpha[:, i]) + col * alpha[:, i]
    return img


_REGION_OF = torch.tensor([REGION_ORDER.index(next(n for n, idx in REGIONS.items() if i in idx))
                           for i in range(N_LANDMARKS)])


def _gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    if sigma <= 0:
        return x
    k = int(np.ceil(3 * sigma))
    t = torch.arange(-k, k + 1, dtype=x.dtype)
    g = torch.exp(-t ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    C = x.shape[1]
    x = F.conv2d(F.pad(x, (k, k, 0, 0), mode="replicate"), g.view(1, 1, 1, -1).expand(C, 1, 1, -1), groups=C)
    return F.conv2d(F.pad(x, (0, 0, k, k), mode="replicate"), g.view(1, 1, -1, 1).expand(C, 1, -1, 1), groups=C)


PRIOR_MEAN = np.concatenate([np.zeros(SHAPE_DIM + EXPR_DIM + 3), JAW_MEAN])
PRIOR_STD = np.concatenate([np.full(SHAPE_DIM, SHAPE_STD), np.full(EXPR_DIM, EXPR_STD),
                            np.full(3, 0.15), JAW_STD])


class ParamFitter:
    """Analysis-by-synthesis parameter estimate for images without a payload.

    Minimises the squared difference between the image and the differentiable
    renderer under a Gaussian prior on the parameters, coarse to fine over a
    blur pyramid.  Works on any image (for example generator outputs), which
    makes it the common measuring stick for the evaluation oracles.  Mouth
    landmarks hidden under overlapping disks are only weakly observable, so
    expect roughly 0.7 px mean landmark error on clean 64 px renders.
    """

    def __init__(self, model: SyntheticMorphableModel, resolution: int = 64,
                 schedule=((3.0, 25), (1.5, 25), (0.7, 25), (0.0, 25)),
                 prior_weight: float = 0.1, lr: float = 0.1, chunk: int = 128):
        _check_resolution(resolution)
        self.model = model
        self.resolution = resolution
        self.schedule = tuple(schedule)
        self.prior_weight = prior_weight
        self.lr = lr
        self.chunk = chunk

    def _fit_chunk(self, images: np.ndarray) -> np.ndarray:
        dt, res = torch.float32, self.resolution
        scale = res / 64.0
        mean = torch.as_tensor(PRIOR_MEAN, dtype=dt)
        std = torch.as_tensor(PRIOR_STD, dtype=dt)
        target = torch.as_tensor(images / 255.0, dtype=dt).permute(0, 3, 1, 2)
        z = torch.zeros(len(images), PARAM_DIM, dtype=dt, requires_grad=True)
        for sigma, iters in self.schedule:
            sigma = sigma * scale
            tb = _gaussian_blur(target, sigma)
            opt = torch.optim.Adam([z], lr=self.lr)
            for _ in range(iters):
                q = mean + std * z
                lm = self.model.torch_landmarks(q[:, :SHAPE_DIM], q[:, SHAPE_DIM:SHAPE_DIM + EXPR_DIM],
                                                q[:, SHAPE_DIM + EXPR_DIM:])
                pix = ((lm[..., :2] + 1) * res - 1) / 2
                err = (_gaussian_blur(render_torch(pix, res), sigma) - tb) ** 2
                loss = err.sum((1, 2, 3)) + self.prior_weight * 0.5 * (z ** 2).sum(1)
                opt.zero_grad()
                loss.sum().backward()
                opt.step()
        return (mean + std * z).detach().double().numpy()

    def fit(self, images) -> np.ndarray:
        """``(N, H, W, 3)`` images -> ``(N, 156)`` parameter vectors."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (self.resolution, self.resolution, 3):
            raise ShapeMismatchError(
                f"fitter expects {self.resolution}x{self.resolution}x3 images, got {images.shape[1:]}")
        out = [self._fit_chunk(images[i:i + self.chunk]) for i in range(0, len(images), self.chunk)]
        return np.concatenate(out) if out else np.zeros((0, PARAM_DIM))

    def params(self, image) -> FaceParams:
        return FaceParams.from_vector(self.fit(image)[0])

    def landmarks_2d(self, images) -> np.ndarray:
        """Projected pixel positions ``(N, 68, 2)`` of the fitted landmarks."""
        vecs = self.fit(images)
        return np.stack([self.model.project(landmarks_from_params(self.model, FaceParams.from_vector(v)).points,
                                            self.resolution) for v in vecs])


# ---------------------------------------------------------------- backends

class PriorBackend(Protocol):
    name: str

    def extract_params(self, image: np.ndarray) -> FaceParams: ...


def _check_image(image, resolution):
    image = np.asarray(image)
    if image.shape != (resolution, resolution, 3):
        raise ShapeMismatchError(
            f"prior expects {resolution}x{resolution}x3 images, got {image.shape}")
    return image


class SyntheticPrior:
    """Backend for renders of a :class:`SyntheticMorphableModel`.

    Exact on unmodified renders; images without a valid payload fall back to
    the analysis-by-synthesis fitter.
    """

    name = "synthetic"

    def __init__(self, model: SyntheticMorphableModel, resolution: int = 64):
        _check_resolution(resolution)
        self.model = model
        self.resolution = resolution
        self.calls = 0
        self.fitter = ParamFitter(model, resolution)

    def extract_params(self, image: np.ndarray) -> FaceParams:
        image = _check_image(image, self.resolution)
        self.calls += 1
        params = decode_payload(image)
        if params is None:
            params = self.fitter.params(image)
        return params


def image_digest(image: np.ndarray) -> str:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    return hashlib.sha256(image.tobytes()).hexdigest()


class ExternalPrior:
    """Backend reading parameters pre-extracted by an external face model.

    The cache is an ``.npz`` with arrays ``digests`` (sha256 of the uint8 image
    bytes) and ``params`` (N x 156).  No network is run here.
    """

    name = "external"

    def __init__(self, cache_file, resolution: int = 256):
        path = Path(cache_file)
        if not path.exists():
            raise BackendUnavailableError(f"external prior cache {path} not found")
        data = np.load(path, allow_pickle=False)
        self.resolution = resolution
        self._table = {str(d): np.asarray(p, dtype=np.float64)
                       for d, p in zip(data["digests"], data["params"])}
        self.calls = 0

    def extract_params(self, image: np.ndarray) -> FaceParams:
        image = _check_image(image, self.resolution)
        self.calls += 1
        key = image_digest(image)
        if key not in self._table:
            raise BackendUnavailableError(f"no cached parameters for image {key[:12]}")
        return FaceParams.from_vector(self._table[key])

    @staticmethod
    def write_cache(cache_file, images, params: Sequence[FaceParams]):
        np.savez(cache_file, digests=np.array([image_digest(im) for im in images]),
                 params=np.stack([p.to_vector() for p in params]))


def make_prior(backend: Optional[str], *, seed: int = 0, resolution: int = 64,
               cache_file=None) -> PriorBackend:
    if backend is None:
        raise BackendUnavailableError("no prior backend configured")
    if backend == "synthetic":
        return SyntheticPrior(SyntheticMorphableModel(seed), resolution)
    if backend == "external":
        if cache_file is None:
            raise BackendUnavailableError("external prior needs a cache file")
        return ExternalPrior(cache_file, resolution)
    raise BackendUnavailableError(f"unknown prior backend {backend!r}")


def extract_params(image: np.ndarray, backend: Optional[PriorBackend]) -> FaceParams:
    if backend is None:
        raise BackendUnavailableError("no prior backend configured")
    return backend.extract_params(image)
