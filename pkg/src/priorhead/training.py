"""Pair sampling, expression dropout, losses and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetError, DatasetLayout
from .keypoints import SelectionPlan, select_keypoints
from .networks import (
    EXPR_FEATURE_MAX,
    ExpressionFeature,
    FaceVideoModel,
    MultiScaleDiscriminator,
    NetConfig,
    PerceptualEmbedder,
    condition_batch,
    read_checkpoint,
    save_checkpoint,
)
from .prior import EXPR_DIM, PARAM_DIM, SHAPE_DIM, SyntheticMorphableModel, axis_angle_to_matrix_torch

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class MissingPriorCacheError(DatasetError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    epochs: int = 1
    batch: int = 4
    dropout_max: int = 50
    perceptual_layers: Tuple[int, ...] = (0, 1, 2)
    perceptual_weight: float = 1.0
    adversarial_weight: float = 0.1
    gan_scales: int = 2
    pyramid_scales: Tuple[float, ...] = (1.0, 0.5)
    steps_per_epoch: Optional[int] = None
    max_steps: Optional[int] = None
    seed: int = 0
    log_every: int = 10
    perceptual_seed: int = 0

    def __post_init__(self):
        self.perceptual_layers = tuple(int(i) for i in self.perceptual_layers)
        self.pyramid_scales = tuple(float(s) for s in self.pyramid_scales)
        errors = self.problems()
        if errors:
            raise ValueError("; ".join(errors))

    def problems(self) -> List[str]:
        errs = []
        if not self.lr > 0:
            errs.append("lr must be > 0")
        if not 0 <= self.dropout_max <= EXPR_DIM:
            errs.append(f"dropout_max must be in [0, {EXPR_DIM}]")
        if self.batch < 1:
            errs.append("batch must be >= 1")
        if self.epochs < 1:
            errs.append("epochs must be >= 1")
        if self.gan_scales < 1:
            errs.append("gan_scales must be >= 1")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            errs.append("adam betas must be in [0, 1)")
        if not self.perceptual_layers or any(not 0 <= i < 3 for i in self.perceptual_layers):
            errs.append("perceptual_layers must be a non-empty subset of {0, 1, 2}")
        if not self.pyramid_scales or any(not 0 < s <= 1 for s in self.pyramid_scales):
            errs.append("pyramid_scales must lie in (0, 1]")
        if self.perceptual_weight < 0 or self.adversarial_weight < 0:
            errs.append("loss weights must be >= 0")
        return errs


# ---------------------------------------------------------------- sampling

def sample_pair_indices(n_frames: int, rng: np.random.Generator) -> Tuple[int, int]:
    """Uniform ordered pair of distinct frame indices (source, driving)."""
    if n_frames < 2:
        raise ValueError(f"need at least 2 frames to sample a pair, got {n_frames}")
    i = int(rng.integers(n_frames))
    j = int(rng.integers(n_frames - 1))
    return i, j + (j >= i)


def sample_pair(video: Sequence, rng: np.random.Generator):
    """Random (source, driving) frames from one video; the driving frame is also the target."""
    i, j = sample_pair_indices(len(video), rng)
    return video[i], video[j]


def expression_dropout(expr: ExpressionFeature, rng: np.random.Generator,
                       dropout_max: int = EXPR_DIM) -> ExpressionFeature:
    """Drop the last k expression entries, k uniform on {0..dropout_max}; jaw is kept."""
    if len(expr) != EXPR_FEATURE_MAX:
        raise ValueError("expression dropout expects a full-length feature")
    k = int(rng.integers(dropout_max + 1))
    return expr.truncated(EXPR_DIM - k)


# ---------------------------------------------------------------- losses

@dataclass
class LossTerms:
    total: torch.Tensor
    perceptual: torch.Tensor
    adversarial: torch.Tensor

    def as_floats(self):
        return dict(L=self.total.item(), L_P=self.perceptual.item(), L_G=self.adversarial.item())


class GeneratorLoss:
    """L = L_P + L_G: frozen-embedder feature L1 over an image pyramid plus hinge adversarial term."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.embedder = PerceptualEmbedder(cfg.perceptual_seed)

    def perceptual(self, out, target):
        total = out.new_zeros(())
        for s in self.cfg.pyramid_scales:
            a, b = out, target
            if s != 1.0:
                a = F.interpolate(a, scale_factor=s, mode="area")
                b = F.interpolate(b, scale_factor=s, mode="area")
            for fa, fb in zip(self.embedder(a, self.cfg.perceptual_layers),
                              self.embedder(b, self.cfg.perceptual_layers)):
                total = total + (fa - fb).abs().mean()
        return self.cfg.perceptual_weight * total

    def adversarial(self, out, disc):
        if disc is None or self.cfg.adversarial_weight == 0:
            return out.new_zeros(())
        scores = disc(out)
        return self.cfg.adversarial_weight * sum(-s.mean() for s in scores) / len(scores)

    def __call__(self, out, target, disc=None) -> LossTerms:
        if out.shape != target.shape:
            raise ValueError(f"output {tuple(out.shape)} and target {tuple(target.shape)} differ in shape")
        lp = self.perceptual(out, target)
        lg = self.adversarial(out, disc)
        return LossTerms(lp + lg, lp, lg)


def discriminator_loss(disc, real, fake):
    real_s, fake_s = disc(real), disc(fake)
    terms = [F.relu(1 - r).mean() + F.relu(1 + f).mean() for r, f in zip(real_s, fake_s)]
    return sum(terms) / len(terms)


def psnr_batch(out: torch.Tensor, target: torch.Tensor) -> float:
    """Mean PSNR (dB, 8-bit scale) of [-1, 1] tensors after quantization."""
    q = lambda t: ((t.detach().clamp(-1, 1) + 1) * 127.5).round()
    mse = ((q(out) - q(target)) ** 2).flatten(1).mean(1)
    vals = 10 * torch.log10(255.0 ** 2 / mse.clamp(min=1e-10))
    return float(vals.mean())


# ---------------------------------------------------------------- keypoint path

class KeypointSource:
    """Keypoint frames from prior parameters through the morphable model (torch, batched)."""

    def __init__(self, morph: SyntheticMorphableModel, plan: SelectionPlan):
        self.morph = morph
        self.plan = plan
        self.idx = torch.as_tensor(plan.indices)

    def frames(self, shape, expression, pose):
        lm = self.morph.torch_landmarks(shape, expression, pose)[:, self.idx]
        return axis_angle_to_matrix_torch(pose[:, :3]), lm

    def pair(self, src_params: torch.Tensor, drv_params: torch.Tensor, detach: bool = True):
        """Source and driving keypoints; the driving shape code is replaced by the source's."""
        s_shape = src_params[:, :SHAPE_DIM]
        sR, sx = self.frames(s_shape, src_params[:, SHAPE_DIM:SHAPE_DIM + EXPR_DIM],
                             src_params[:, SHAPE_DIM + EXPR_DIM:])
        dR, dx = self.frames(s_shape, drv_params[:, SHAPE_DIM:SHAPE_DIM + EXPR_DIM],
                             drv_params[:, SHAPE_DIM + EXPR_DIM:])
        if detach:
            sR, sx, dR, dx = (t.detach() for t in (sR, sx, dR, dx))
        return sR, sx, dR, dx


def forward_batch(model: FaceVideoModel, kp: KeypointSource, source, src_params, drv_params, cond,
                  detach: bool = True):
    sR, sx, dR, dx = kp.pair(src_params, drv_params, detach)
    return model(source, sR, sx, dR, dx, cond)


# ---------------------------------------------------------------- data

class FrameStore:
    """In-memory frames and sidecar parameters of a dataset split; never touches a prior backend."""

    def __init__(self, layout: DatasetLayout, split: Optional[str] = "train",
                 video_ids: Optional[Sequence[str]] = None):
        ids = list(video_ids) if video_ids is not None else layout.video_ids(split)
        if not ids:
            raise DatasetError("no videos to train on")
        missing = [v for v in ids if not layout.params_path(v).exists()]
        if missing:
            raise MissingPriorCacheError(
                f"prior cache missing for {len(missing)} video(s), e.g. {missing[0]}; run cache-priors first")
        self.ids = ids
        self.frames = [layout.load_frames(v) for v in ids]
        self.params = [np.stack([p.to_vector() for p in layout.load_params(v)]) for v in ids]
        for v, fr, pr in zip(ids, self.frames, self.params):
            if len(fr) != len(pr):
                raise DatasetError(f"video {v}: {len(fr)} frames but {len(pr)} parameter records")
            if len(fr) < 2:
                raise DatasetError(f"video {v} is too short to sample pairs")
        self.resolution = self.frames[0].shape[1]

    @property
    def n_frames(self) -> int:
        return sum(len(f) for f in self.frames)

    def driving_order(self, rng) -> List[Tuple[int, int]]:
        """Every (video, frame) once, shuffled: one epoch of driving frames."""
        items = [(v, t) for v, fr in enumerate(self.frames) for t in range(len(fr))]
        return [items[i] for i in rng.permutation(len(items))]


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(images.astype(np.float32) / 127.5 - 1.0).permute(0, 3, 1, 2).contiguous()


@dataclass
class Batch:
    source: torch.Tensor
    target: torch.Tensor
    src_params: torch.Tensor
    drv_params: torch.Tensor
    cond: torch.Tensor
    kept: List[int] = field(default_factory=list)


def make_batch(store: FrameStore, items, rng, dropout_max: int = EXPR_DIM) -> Batch:
    """``items`` are (video, driving frame); a distinct source frame is drawn from the same video."""
    src, drv, sp, dp, exprs = [], [], [], [], []
    for v, t in items:
        n = len(store.frames[v])
        s = int(rng.integers(n - 1))
        s += s >= t
        src.append(store.frames[v][s])
        drv.append(store.frames[v][t])
        sp.append(store.params[v][s])
        dp.append(store.params[v][t])
        full = ExpressionFeature(np.concatenate([store.params[v][t][SHAPE_DIM:SHAPE_DIM + EXPR_DIM],
                                                 store.params[v][t][PARAM_DIM - 3:]]))
        exprs.append(expression_dropout(full, rng, dropout_max))
    return Batch(_to_tensor(np.stack(src)), _to_tensor(np.stack(drv)),
                 torch.as_tensor(np.stack(sp), dtype=torch.float32),
                 torch.as_tensor(np.stack(dp), dtype=torch.float32),
                 condition_batch(exprs), [e.E for e in exprs])


# ---------------------------------------------------------------- trainer

class Trainer:
    def __init__(self, cfg: TrainConfig, net_cfg: NetConfig, prior_seed: int = 0):
        self.cfg = cfg
        self.net_cfg = net_cfg
        self.prior_seed = prior_seed
        self.plan = select_keypoints(net_cfg.num_keypoints)
        self.kp = KeypointSource(SyntheticMorphableModel(prior_seed), self.plan)
        torch.manual_seed(cfg.seed)
        self.model = FaceVideoModel(net_cfg)
        self.use_gan = cfg.adversarial_weight > 0
        self.disc = MultiScaleDiscriminator(cfg.gan_scales) if self.use_gan else None
        self.loss = GeneratorLoss(cfg)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_g = torch.optim.Adam(self.model.parameters(), cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), cfg.lr, betas=betas) if self.use_gan else None
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.epoch = 0
        self.order: List[Tuple[int, int]] = []
        self.cursor = 0

    def train_step(self, batch: Batch) -> dict:
        self.model.train()
        out = forward_batch(self.model, self.kp, batch.source, batch.src_params, batch.drv_params, batch.cond)
        if self.use_gan:
            self.disc.requires_grad_(False)
        terms = self.loss(out, batch.target, self.disc)
        rec = terms.as_floats()
        if not all(math.isfinite(v) for v in rec.values()):
            raise TrainingError(f"non-finite loss at step {self.step}: {rec}")
        self.opt_g.zero_grad(set_to_none=True)
        terms.total.backward()
        self.opt_g.step()
        if self.use_gan:
            self.disc.requires_grad_(True)
            ld = discriminator_loss(self.disc, batch.target, out.detach())
            if not math.isfinite(ld.item()):
                raise TrainingError(f"non-finite discriminator loss at step {self.step}")
            self.opt_d.zero_grad(set_to_none=True)
            ld.backward()
            self.opt_d.step()
            rec["L_D"] = ld.item()
        rec["PSNR"] = psnr_batch(out, batch.target)
        self.step += 1
        rec["step"] = self.step
        return rec

    def next_items(self, store: FrameStore) -> List[Tuple[int, int]]:
        items = []
        while len(items) < self.cfg.batch:
            if self.cursor >= len(self.order):
                self.order = store.driving_order(self.rng)
                self.cursor = 0
            items.append(self.order[self.cursor])
            self.cursor += 1
        return items

    def steps_per_epoch(self, store: FrameStore) -> int:
        if self.cfg.steps_per_epoch:
            return self.cfg.steps_per_epoch
        return max(1, math.ceil(store.n_frames / self.cfg.batch))

    # persistence
    def save(self, path):
        extra = dict(
            train_config=asdict(self.cfg), step=self.step, epoch=self.epoch,
            opt_g=self.opt_g.state_dict(),
            disc=self.disc.state_dict() if self.use_gan else None,
            opt_d=self.opt_d.state_dict() if self.use_gan else None,
            np_rng=self.rng.bit_generator.state, torch_rng=torch.get_rng_state(),
            order=self.order, cursor=self.cursor,
        )
        save_checkpoint(path, self.model, self.plan.to_text(), self.prior_seed, **extra)

    @classmethod
    def resume(cls, path) -> "Trainer":
        payload = read_checkpoint(path)
        tcfg = TrainConfig(**payload["train_config"])
        t = cls(tcfg, NetConfig(**payload["net_config"]), payload["prior_seed"])
        if t.plan.to_text() != payload["plan"]:
            raise TrainingError("checkpoint keypoint plan does not match its network config")
        t.model.load_state_dict(payload["model"])
        t.opt_g.load_state_dict(payload["opt_g"])
        if t.use_gan:
            t.disc.load_state_dict(payload["disc"])
            t.opt_d.load_state_dict(payload["opt_d"])
        t.rng.bit_generator.state = payload["np_rng"]
        torch.set_rng_state(payload["torch_rng"])
        t.step, t.epoch = payload["step"], payload["epoch"]
        t.order, t.cursor = [tuple(x) for x in payload["order"]], payload["cursor"]
        return t


def train(layout: DatasetLayout, cfg: TrainConfig, net_cfg: NetConfig, out_dir, prior_seed: int = 0,
          split: Optional[str] = "train", video_ids=None, trainer: Optional[Trainer] = None,
          callback: Optional[Callable[[Trainer, dict], bool]] = None) -> Path:
    """Train and write ``checkpoint.pt`` (plus one archive per epoch) and ``train_log.jsonl`` under ``out_dir``.

    ``callback(trainer, record)`` runs after every step; returning True stops training.
    Returns the path of the final checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = FrameStore(layout, split, video_ids)
    if store.resolution != net_cfg.image_size:
        raise DatasetError(f"dataset frames are {store.resolution}px but the network expects {net_cfg.image_size}px")
    t = trainer or Trainer(cfg, net_cfg, prior_seed)
    per_epoch = t.steps_per_epoch(store)
    final = out_dir / "checkpoint.pt"
    stop = False
    with open(out_dir / "train_log.jsonl", "a") as logf:
        while t.epoch < cfg.epochs and not stop:
            while t.step < (t.epoch + 1) * per_epoch:
                batch = make_batch(store, t.next_items(store), t.rng, cfg.dropout_max)
                rec = t.train_step(batch)
                rec["epoch"] = t.epoch
                if t.step % cfg.log_every == 0 or t.step == 1:
                    logf.write(json.dumps(rec) + "\n")
                    logf.flush()
                if callback is not None and callback(t, rec):
                    stop = True
                if stop or (cfg.max_steps is not None and t.step >= cfg.max_steps):
                    stop = True
                    break
            if not stop or t.step >= (t.epoch + 1) * per_epoch:
                t.epoch += 1
            t.save(out_dir / f"ckpt_epoch{t.epoch:03d}.pt")
            t.save(final)
    return final
