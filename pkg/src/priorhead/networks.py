"""Appearance extractor, mask/occlusion predictor and the expression-conditioned SPADE generator."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .motionfield import (
    FeatureVolume,
    combine_flows,
    identity_grid,
    keypoint_flows,
    sample_volume,
    warp_candidates,
)
from .prior import EXPR_DIM, FaceParams

JAW_DIM = 3
EXPR_FEATURE_MAX = EXPR_DIM + JAW_DIM  # 53
N_DOWN = 2


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    base_channels: int = 64
    volume_channels: int = 32
    volume_depth: int = 16
    spade_blocks: int = 8
    spade_hidden: int = 32
    mask_channels: int = 4
    mask_width: int = 16
    num_keypoints: int = 16
    expression_dim_max: int = EXPR_FEATURE_MAX

    def __post_init__(self):
        if self.spade_blocks < 1:
            raise ValueError("spade_blocks must be >= 1")
        if self.image_size % (2 ** N_DOWN) or self.image_size < 2 ** (N_DOWN + 1):
            raise ValueError(f"image_size must be a multiple of {2 ** N_DOWN}, got {self.image_size}")
        if self.expression_dim_max != EXPR_FEATURE_MAX:
            raise ValueError(f"expression_dim_max must be {EXPR_FEATURE_MAX}")
        if not 1 <= self.num_keypoints <= 68:
            raise ValueError("num_keypoints must be in [1, 68]")
        if self.volume_depth < 2 or self.volume_channels < 1:
            raise ValueError("volume needs depth >= 2 and at least one channel")

    @property
    def feature_size(self) -> int:
        return self.image_size // 2 ** N_DOWN

    def to_dict(self):
        return asdict(self)


class ExpressionFeature:
    """Expression code followed by the 3 jaw entries; trailing expression entries may be dropped."""

    def __init__(self, values):
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        if not JAW_DIM <= v.size <= EXPR_FEATURE_MAX:
            raise ValueError(f"expression feature length must be in [3, 53], got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("expression feature has non-finite entries")
        self.values = v

    @classmethod
    def from_params(cls, params: FaceParams, E: int = EXPR_DIM) -> "ExpressionFeature":
        if not 0 <= E <= EXPR_DIM:
            raise ValueError(f"retained expression dims must be in [0, {EXPR_DIM}]")
        return cls(np.concatenate([params.expression[:E], params.jaw]))

    @property
    def expression(self) -> np.ndarray:
        return self.values[:-JAW_DIM]

    @property
    def jaw(self) -> np.ndarray:
        return self.values[-JAW_DIM:]

    @property
    def E(self) -> int:
        return self.values.size - JAW_DIM

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        return isinstance(other, ExpressionFeature) and np.array_equal(self.values, other.values)

    def truncated(self, E: int) -> "ExpressionFeature":
        if not 0 <= E <= self.E:
            raise ValueError(f"cannot keep {E} of {self.E} expression entries")
        return ExpressionFeature(np.concatenate([self.expression[:E], self.jaw]))

    def condition(self):
        """Fixed-width (values, validity) pair: dropped slots are zero with mask 0."""
        vals = np.zeros(EXPR_FEATURE_MAX)
        mask = np.zeros(EXPR_FEATURE_MAX)
        vals[:self.E] = self.expression
        mask[:self.E] = 1
        vals[EXPR_DIM:] = self.jaw
        mask[EXPR_DIM:] = 1
        return vals, mask


def condition_batch(exprs: Sequence[ExpressionFeature], dtype=torch.float32) -> torch.Tensor:
    rows = [np.concatenate(e.condition()) for e in exprs]
    return torch.as_tensor(np.stack(rows), dtype=dtype)


def _norm2d(c):
    return nn.BatchNorm2d(c)


def _norm3d(c):
    return nn.BatchNorm3d(c)


class DownBlock2d(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = _norm2d(cout)

    def forward(self, x):
        return F.avg_pool2d(F.leaky_relu(self.norm(self.conv(x)), 0.2), 2)


class ResBlock3d(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.n1, self.c1 = _norm3d(c), nn.Conv3d(c, c, 3, padding=1)
        self.n2, self.c2 = _norm3d(c), nn.Conv3d(c, c, 3, padding=1)

    def forward(self, x):
        h = self.c1(F.leaky_relu(self.n1(x), 0.2))
        h = self.c2(F.leaky_relu(self.n2(h), 0.2))
        return x + h


class AppearanceExtractor(nn.Module):
    """Image -> C x D x H/4 x W/4 feature volume."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        b = cfg.base_channels
        self.cfg = cfg
        self.stem = nn.Sequential(nn.Conv2d(3, b // 2, 7, padding=3), _norm2d(b // 2), nn.LeakyReLU(0.2))
        self.down = nn.Sequential(DownBlock2d(b // 2, b), DownBlock2d(b, 2 * b))
        self.lift = nn.Conv2d(2 * b, cfg.volume_channels * cfg.volume_depth, 1)
        self.res = ResBlock3d(cfg.volume_channels)

    def forward(self, img):
        s = self.cfg.image_size
        if img.dim() != 4 or img.shape[1] != 3 or tuple(img.shape[2:]) != (s, s):
            raise ValueError(f"expected Bx3x{s}x{s} images, got {tuple(img.shape)}")
        h = self.lift(self.down(self.stem(img)))
        B, _, H, W = h.shape
        return self.res(h.view(B, self.cfg.volume_channels, self.cfg.volume_depth, H, W))


class _Conv3dBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(nn.Conv3d(cin, cout, 3, padding=1), _norm3d(cout), nn.LeakyReLU(0.2))


class MaskPredictor(nn.Module):
    """Small 3D U-Net over the concatenated candidates; softmax logits plus a 2D occlusion head."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        K, w, mc = cfg.num_keypoints, cfg.mask_width, cfg.mask_channels
        self.cfg = cfg
        self.compress = nn.Conv3d(cfg.volume_channels, mc, 1, bias=False)
        self.enc1 = _Conv3dBlock(K * mc, w)
        self.enc2 = _Conv3dBlock(w, 2 * w)
        self.mid = _Conv3dBlock(2 * w, 2 * w)
        self.dec2 = _Conv3dBlock(4 * w, w)
        self.dec1 = _Conv3dBlock(2 * w, w)
        self.logits = nn.Conv3d(w, K, 3, padding=1)
        self.occlusion = nn.Conv2d(w, 1, 7, padding=3)

    @staticmethod
    def _up(x, like):
        return F.interpolate(x, size=like.shape[2:], mode="trilinear", align_corners=False)

    def forward(self, candidates):
        """``candidates``: ``(B, K, C, D, H, W)`` -> logits ``(B, K, D, H, W)``, occlusion ``(B, H, W)``."""
        B, K = candidates.shape[:2]
        x = self.compress(candidates.flatten(0, 1))
        return self.from_compressed(x.view(B, K, *x.shape[1:]))

    def from_compressed(self, comp):
        """Same as ``forward`` on candidates already passed through ``compress``.

        The compression is a bias-free per-voxel linear map, so it commutes with
        zero-padded trilinear sampling: warping the compressed volume equals
        compressing the warped one, at a fraction of the cost.
        """
        B, K = comp.shape[:2]
        if K != self.cfg.num_keypoints:
            raise ValueError(f"network built for K={self.cfg.num_keypoints}, got {K} candidates")
        x = comp.reshape(B, K * comp.shape[2], *comp.shape[3:])
        e1 = self.enc1(x)
        e2 = self.enc2(F.avg_pool3d(e1, 2, ceil_mode=True))
        m = self.mid(F.avg_pool3d(e2, 2, ceil_mode=True))
        d2 = self.dec2(torch.cat([self._up(m, e2), e2], 1))
        d1 = self.dec1(torch.cat([self._up(d2, e1), e1], 1))
        occ = torch.sigmoid(self.occlusion(d1.mean(dim=2)))[:, 0]
        return self.logits(d1), occ


class SPADE(nn.Module):
    def __init__(self, channels, cond_channels, hidden):
        super().__init__()
        self.norm = nn.BatchNorm2d(channels, affine=False)
        self.shared = nn.Sequential(nn.Conv2d(cond_channels, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, x, cond):
        h = self.shared(cond)
        return self.norm(x) * (1 + self.gamma(h)) + self.beta(h)


class SPADEResBlock(nn.Module):
    def __init__(self, channels, cond_channels, hidden):
        super().__init__()
        self.s1 = SPADE(channels, cond_channels, hidden)
        self.c1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.s2 = SPADE(channels, cond_channels, hidden)
        self.c2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, cond):
        h = self.c1(F.leaky_relu(self.s1(x, cond), 0.2))
        h = self.c2(F.leaky_relu(self.s2(h, cond), 0.2))
        return x + h


class OcclusionGate(nn.Module):
    """Multiplies the projected feature by the occlusion map; a separate module so hooks can inspect it."""

    def forward(self, feature, occlusion):
        return feature * occlusion[:, None]


class Generator(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        b = cfg.base_channels
        self.cfg = cfg
        self.project = nn.Conv2d(cfg.volume_channels * cfg.volume_depth, b, 3, padding=1)
        self.gate = OcclusionGate()
        cond_ch = b + 2 * EXPR_FEATURE_MAX
        self.blocks = nn.ModuleList(SPADEResBlock(b, cond_ch, cfg.spade_hidden)
                                    for _ in range(cfg.spade_blocks))
        self.up = nn.Sequential(
            nn.Upsample(scale_factor=2), nn.Conv2d(b, b // 2, 3, padding=1), _norm2d(b // 2), nn.LeakyReLU(0.2),
            nn.Upsample(scale_factor=2), nn.Conv2d(b // 2, b // 4, 3, padding=1), _norm2d(b // 4), nn.LeakyReLU(0.2),
        )
        self.out = nn.Conv2d(b // 4, 3, 7, padding=3)

    def forward(self, warped, occlusion, cond):
        """``warped`` ``(B, C, D, H, W)``, ``occlusion`` ``(B, H, W)``, ``cond`` ``(B, 106)``."""
        B, C, D, H, W = warped.shape
        if cond.shape != (B, 2 * EXPR_FEATURE_MAX):
            raise ValueError(f"expected condition of shape ({B}, {2 * EXPR_FEATURE_MAX}), got {tuple(cond.shape)}")
        x = self.gate(self.project(warped.reshape(B, C * D, H, W)), occlusion)
        cmap = torch.cat([x, cond[:, :, None, None].expand(B, cond.shape[1], H, W)], 1)
        for blk in self.blocks:
            x = blk(x, cmap)
        return torch.tanh(self.out(self.up(x)))


class FaceVideoModel(nn.Module):
    """Source image + keypoint frames + expression condition -> generated driving frame."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.appearance = AppearanceExtractor(cfg)
        self.masks = MaskPredictor(cfg)
        self.generator = Generator(cfg)
        self._grid = None

    def grid(self, dtype):
        if self._grid is None or self._grid.dtype != dtype:
            s = self.cfg.feature_size
            self._grid = identity_grid(self.cfg.volume_depth, s, s, dtype)
        return self._grid

    def motion(self, f_s, src_R, src_x, drv_R, drv_x):
        flows = keypoint_flows(src_R, src_x, drv_R, drv_x, self.grid(f_s.dtype))
        cands = warp_candidates(self.masks.compress(f_s), flows)
        logits, occ = self.masks.from_compressed(cands)
        flow, masks = combine_flows(flows, logits)
        return flow, masks, occ

    def forward(self, source, src_R, src_x, drv_R, drv_x, cond, return_aux=False):
        f_s = self.appearance(source)
        flow, masks, occ = self.motion(f_s, src_R, src_x, drv_R, drv_x)
        warped = sample_volume(f_s, flow)
        out = self.generator(warped, occ, cond)
        if return_aux:
            return out, dict(volume=f_s, flow=flow, masks=masks, occlusion=occ, warped=warped)
        return out


# single-item wrappers --------------------------------------------------------

def image_to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """HxWx3 uint8 image(s) -> Bx3xHxW in [-1, 1]."""
    a = np.asarray(image)
    if a.ndim == 3:
        a = a[None]
    t = torch.as_tensor(a.astype(np.float32) / 127.5 - 1.0, dtype=dtype)
    return t.permute(0, 3, 1, 2).contiguous()


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """Bx3xHxW in [-1, 1] -> BxHxWx3 uint8."""
    a = ((t.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return a.permute(0, 2, 3, 1).cpu().numpy()


def appearance_extract(model: FaceVideoModel, image) -> FeatureVolume:
    s = model.cfg.image_size
    a = np.asarray(image)
    if a.shape != (s, s, 3):
        raise ValueError(f"expected a {s}x{s}x3 image, got {a.shape}")
    with torch.no_grad():
        return FeatureVolume(model.appearance(image_to_tensor(a))[0])


def predict_masks(model: FaceVideoModel, candidates: torch.Tensor):
    """``candidates``: ``(K, C, D, H, W)`` -> logits ``(K, D, H, W)`` and occlusion ``(H, W)``."""
    with torch.no_grad():
        logits, occ = model.masks(candidates[None])
    return logits[0], occ[0]


def generate(model: FaceVideoModel, warped: FeatureVolume, occlusion: torch.Tensor,
             expr: ExpressionFeature) -> np.ndarray:
    if not isinstance(expr, ExpressionFeature):
        expr = ExpressionFeature(expr)
    cond = condition_batch([expr], warped.data.dtype)
    with torch.no_grad():
        out = model.generator(warped.data[None], occlusion[None], cond)
    return out[0]


# discriminator and perceptual embedder ----------------------------------------

class PatchDiscriminator(nn.Module):
    def __init__(self, channels=32, layers=3):
        super().__init__()
        sn = nn.utils.spectral_norm
        mods, c = [], 3
        for i in range(layers):
            mods += [sn(nn.Conv2d(c, channels * 2 ** i, 4, stride=2, padding=1)), nn.LeakyReLU(0.2)]
            c = channels * 2 ** i
        mods.append(sn(nn.Conv2d(c, 1, 3, padding=1)))
        self.net = nn.Sequential(*mods)

    def forward(self, x):
        return self.net(x)


class MultiScaleDiscriminator(nn.Module):
    """Unconditional patch discriminators on an image pyramid (scale i sees a 2^i downsample)."""

    def __init__(self, scales=2, channels=32):
        super().__init__()
        self.discs = nn.ModuleList(PatchDiscriminator(channels) for _ in range(scales))

    def forward(self, x):
        outs = []
        for i, d in enumerate(self.discs):
            outs.append(d(F.avg_pool2d(x, 2 ** i) if i else x))
        return outs


class PerceptualEmbedder(nn.Module):
    """Frozen conv pyramid with seeded random weights; returns features after each stage."""

    def __init__(self, seed=0, widths=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        c = 3
        for w in widths:
            conv = nn.Conv2d(c, w, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (c * 9)) ** 0.5)
                conv.bias.zero_()
            self.stages.append(conv)
            c = w
        self.requires_grad_(False)

    def forward(self, x, layers: Optional[Sequence[int]] = None):
        feats = []
        for i, conv in enumerate(self.stages):
            if i:
                x = F.avg_pool2d(x, 2)
            x = F.relu(conv(x))
            feats.append(x)
        if layers is None:
            return feats
        return [feats[i] for i in layers]


# checkpoints -------------------------------------------------------------------

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, model: FaceVideoModel, plan_text: str, prior_seed: int, **extra):
    """Single-file archive: weights, net config, keypoint plan, prior seed, format version."""
    import io
    from .data import atomic_write

    payload = dict(format_version=CHECKPOINT_VERSION, net_config=model.cfg.to_dict(), plan=plan_text,
                   prior_seed=int(prior_seed), model=model.state_dict(), **extra)
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write(path, buf.getvalue())


def read_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint archive")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format {payload['format_version']} unsupported (expected {CHECKPOINT_VERSION})")
    return payload


def load_checkpoint(path):
    """Returns ``(model in eval mode, plan text, payload dict)``."""
    payload = read_checkpoint(path)
    cfg = NetConfig(**payload["net_config"])
    model = FaceVideoModel(cfg)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, payload["plan"], payload
