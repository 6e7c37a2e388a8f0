import math
import warnings

import numpy as np
import pytest

from priorhead.metrics import (
    ExtractorRegistry,
    aed,
    aemod,
    akd,
    akd_detail,
    evaluation_report,
    fid,
    frechet_distance,
    hard_subset,
    pooled_pixels,
    psnr,
    read_report,
    ssim,
    synthetic_registry,
    write_report,
)
from priorhead.prior import FaceParams, render_synthetic_frame, sample_params


def imgs(seed, n=3, s=16):
    return np.random.default_rng(seed).integers(0, 250, (n, s, s, 3), dtype=np.uint8)


def test_psnr_ssim_identities():
    x = imgs(0)[0]
    assert psnr(x, x) == math.inf
    assert ssim(x, x) == 1.0
    assert psnr(x, x + 1) == pytest.approx(20 * math.log10(255), abs=1e-9)
    with pytest.raises(ValueError):
        psnr(x, x[:8])


def fake_detector(offset=(0.0, 0.0)):
    def det(images):
        n = len(images)
        base = np.tile(np.arange(68.0)[:, None], (1, 2))
        return np.broadcast_to(base + np.asarray(offset), (n, 68, 2)).copy()
    return det


def test_akd_examples():
    v = imgs(1)
    assert akd(v, v, fake_detector()) == 0
    shifted = lambda ims: fake_detector((3, 4))(ims) if ims is gen else fake_detector()(ims)
    gen = v.copy()
    assert akd(gen, v, shifted) == 5.0
    assert akd(gen, v, shifted, "mouth") == 5.0
    with pytest.raises(ValueError):
        akd(v, v[:2], fake_detector())


def test_akd_skips_failed_frames():
    v = imgs(2, n=4)

    def det(images):
        out = fake_detector()(images)
        out[1] = np.nan
        return out

    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        value, skipped = akd_detail(v, v, det)
    assert (value, skipped) == (0.0, 1) and w


def test_aed_aemod_examples():
    emb = lambda ims: np.asarray(ims, dtype=np.float64).reshape(len(ims), -1)[:, :1]
    gen = np.zeros((1, 1, 1, 3))
    refs = np.array([3.0, 4.0, 5.0])[:, None, None, None] * np.ones((3, 1, 1, 3))
    assert aed(gen, refs, emb) == pytest.approx(4.0)
    v = imgs(3)
    assert aemod(v, v, pooled_pixels) == 0
    assert aed(v, v, pooled_pixels, "reconstruction") == 0


def test_fid_examples():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(10_000), rng.standard_normal(10_000) + 3
    assert frechet_distance(a, b) == pytest.approx(9, abs=0.3)
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-6
    assert frechet_distance(a, a) < 1e-6
    v = imgs(4, n=8)
    assert fid(v, v) < 1e-6


def test_fid_singular_covariance():
    f = np.zeros((5, 3))
    f[:, 0] = np.arange(5)
    assert np.isfinite(frechet_distance(f, f + 1))


def _video(head_std, n=4, seed=0):
    rng = np.random.default_rng(seed)
    return [FaceParams(np.zeros(100), np.zeros(50), np.r_[rng.standard_normal(3) * head_std, np.zeros(3)])
            for _ in range(n)]


def test_hard_subset_522():
    rng = np.random.default_rng(0)
    videos = {f"v{i:04d}": _video(rng.uniform(0.01, 0.5), seed=i) for i in range(522)}
    hs = hard_subset(videos)
    assert len(hs.video_ids) == 52
    sel = set(hs.video_ids)
    assert min(hs.variances[v] for v in sel) >= max(hs.variances[v] for v in videos if v not in sel)
    for v in hs.video_ids:
        norms = [np.linalg.norm(p.head_rotation) for p in videos[v]]
        assert hs.source_frames[v] == int(np.argmax(norms))


def test_hard_subset_ties():
    videos = {f"v{i:02d}": _video(0.0) for i in range(30)}
    assert hard_subset(videos).video_ids == ["v00", "v01", "v02"]
    with pytest.raises(ValueError):
        hard_subset({"a": _video(0.1)})


def test_synthetic_registry_on_renders(morph):
    rng = np.random.default_rng(0)
    ps = [sample_params(rng) for _ in range(4)]
    frames = np.stack([render_synthetic_frame(morph, p, 64) for p in ps])
    reg = synthetic_registry(morph, 64)
    assert akd(frames, frames, reg.keypoint_detector) == 0
    assert aemod(frames, frames, reg.emotion_embedder) == 0
    assert reg.keypoint_detector(frames).shape == (4, 68, 2)
    # swapping frame order moves keypoints
    assert akd(frames, frames[::-1], reg.keypoint_detector) > 1


def test_report_roundtrip(tmp_path):
    det = fake_detector()
    reg = ExtractorRegistry(det, pooled_pixels, pooled_pixels, pooled_pixels)
    v = imgs(5, n=4)
    rows = evaluation_report({"a": (v, v, v), "b": (v, v[::-1], v)}, reg)
    assert rows[-1]["video"] == "ALL" and len(rows) == 3
    write_report(tmp_path / "r.tsv", rows)
    back = read_report(tmp_path / "r.tsv")
    assert [r["video"] for r in back] == ["a", "b", "ALL"]
    assert back[0]["AKD"] == 0 and back[0]["PSNR"] == math.inf
