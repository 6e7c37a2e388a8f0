import numpy as np
import pytest
import torch

from priorhead.keypoints import KeypointFrame
from priorhead.motionfield import (
    FeatureVolume,
    MotionField,
    candidate_warps,
    combine_flow,
    identity_grid,
    keypoint_flow,
    sample_volume,
    warp,
)
from priorhead.prior import axis_angle_to_matrix

I = np.eye(3)
RZ90 = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])


def kf(R, pts):
    return KeypointFrame(R, np.zeros(3), np.atleast_2d(pts))


def random_rot(rng):
    return axis_angle_to_matrix(rng.uniform(-1, 1, 3))


def test_flow_identity_exact():
    p = np.array([0.3, -0.7, 0.25])
    assert np.array_equal(keypoint_flow(kf(I, [0, 0, 0]), kf(I, [0, 0, 0]), 0, p), p)


def test_flow_hand_value():
    out = keypoint_flow(kf(RZ90, [0, 1, 0]), kf(I, [1, 0, 0]), 0, [2, 0, 0])
    np.testing.assert_allclose(out, [0, 2, 0], atol=1e-6)


def test_flow_pinning(rng):
    for _ in range(100):
        xs, xd = rng.uniform(-1, 1, (2, 3))
        out = keypoint_flow(kf(random_rot(rng), xs), kf(random_rot(rng), xd), 0, xd)
        np.testing.assert_allclose(out, xs, atol=1e-12)


def test_flow_bad_index():
    with pytest.raises(IndexError):
        keypoint_flow(kf(I, [0, 0, 0]), kf(I, [0, 0, 0]), 1, [0, 0, 0])


def test_grid_matches_grid_sample_frame():
    vol = torch.arange(2 * 3 * 4 * 5, dtype=torch.float64).reshape(1, 2, 3, 4, 5)
    out = sample_volume(vol, identity_grid(3, 4, 5, torch.float64)[None])
    torch.testing.assert_close(out, vol, atol=1e-12, rtol=0)


def test_candidates_identity_interior(rng):
    f = FeatureVolume(torch.randn(3, 6, 6, 6, generator=torch.Generator().manual_seed(0)))
    pts = rng.uniform(-1, 1, (4, 3))
    c = candidate_warps(f, kf(I, pts), kf(I, pts))
    assert c.shape == (4, 3, 6, 6, 6)
    for k in range(4):
        assert torch.equal(c[k][:, 1:-1, 1:-1, 1:-1], f.data[:, 1:-1, 1:-1, 1:-1])


def test_candidates_one_voxel_shift():
    f = FeatureVolume(torch.randn(2, 5, 6, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1)))
    pitch = 2 / 8  # width pitch in normalized units
    c = candidate_warps(f, kf(I, [pitch, 0, 0]), kf(I, [0, 0, 0]))[0]
    # driving voxel x samples source voxel x+1
    torch.testing.assert_close(c[..., 1:-2], f.data[..., 2:-1], atol=1e-12, rtol=0)


def test_candidates_outside_is_zero():
    f = FeatureVolume(torch.randn(2, 4, 4, 4))
    c = candidate_warps(f, kf(I, [5, 5, 5]), kf(I, [0, 0, 0]))
    assert torch.count_nonzero(c) == 0


def test_combine_single_keypoint(rng):
    s, d = kf(random_rot(rng), rng.uniform(-1, 1, 3)), kf(random_rot(rng), rng.uniform(-1, 1, 3))
    logits = torch.randn(1, 3, 4, 5, dtype=torch.float64)
    field = combine_flow(torch.zeros(1, 2, 3, 4, 5), logits, s, d)
    assert torch.equal(field.masks, torch.ones_like(field.masks))
    g = identity_grid(3, 4, 5, torch.float64).numpy()
    ref = keypoint_flow(s, d, 0, g.reshape(-1, 3)).reshape(g.shape)
    np.testing.assert_allclose(field.flow.numpy(), ref, atol=1e-12)


def test_combine_equal_logits(rng):
    pts = rng.uniform(-1, 1, (4, 3))
    field = combine_flow(torch.zeros(4, 1, 3, 3, 3), torch.zeros(4, 3, 3, 3), kf(I, pts), kf(I, pts))
    assert torch.allclose(field.masks, torch.full_like(field.masks, 0.25), atol=0)


def test_combine_saturated(rng):
    s, d = kf(random_rot(rng), rng.uniform(-1, 1, (4, 3))), kf(random_rot(rng), rng.uniform(-1, 1, (4, 3)))
    logits = torch.zeros(4, 3, 3, 3, dtype=torch.float64)
    logits[2] = 20.0
    field = combine_flow(torch.zeros(4, 1, 3, 3, 3), logits, s, d)
    g = identity_grid(3, 3, 3, torch.float64).numpy()
    ref = keypoint_flow(s, d, 2, g.reshape(-1, 3)).reshape(g.shape)
    # residual weight is at most 3 e^-20 times the flow spread
    assert np.abs(field.flow.numpy() - ref).max() < 1e-6


def test_combine_shape_errors(rng):
    pts = rng.uniform(-1, 1, (2, 3))
    with pytest.raises(ValueError):
        combine_flow(torch.zeros(2, 1, 3, 3, 3), torch.zeros(2, 3, 3, 4), kf(I, pts), kf(I, pts))
    with pytest.raises(ValueError):
        combine_flow(torch.zeros(3, 1, 3, 3, 3), torch.zeros(2, 3, 3, 3), kf(I, pts), kf(I, pts))


def test_mask_normalization():
    g = torch.Generator().manual_seed(0)
    for K in (1, 4, 16):
        pts = np.zeros((K, 3))
        for _ in range(100 // 3 + 1):
            logits = torch.randn(K, 3, 4, 4, generator=g, dtype=torch.float64) * 10
            f = combine_flow(torch.zeros(K, 1, 3, 4, 4), logits, kf(I, pts), kf(I, pts))
            assert (f.masks.sum(0) - 1).abs().max() < 1e-6


def _identity_field(shape, dtype=torch.float64):
    D, H, W = shape
    return MotionField(identity_grid(D, H, W, dtype), torch.ones(1, D, H, W, dtype=dtype),
                       torch.ones(H, W, dtype=dtype))


def test_warp_identity():
    f = FeatureVolume(torch.randn(3, 5, 5, 5, dtype=torch.float64))
    out = warp(f, _identity_field((5, 5, 5)))
    torch.testing.assert_close(out.data[:, 1:-1, 1:-1, 1:-1], f.data[:, 1:-1, 1:-1, 1:-1], atol=1e-12, rtol=0)


def test_warp_gradcheck():
    g = torch.Generator().manual_seed(3)
    vol = torch.randn(1, 2, 3, 3, 3, dtype=torch.float64, generator=g, requires_grad=True)
    # keep samples away from cell boundaries where trilinear interpolation has kinks
    flow = (identity_grid(3, 3, 3, torch.float64) + 0.1 * torch.rand(3, 3, 3, 3, generator=g, dtype=torch.float64)
            + 0.05)[None].requires_grad_(True)
    assert torch.autograd.gradcheck(sample_volume, (vol, flow), eps=1e-3, atol=1e-6, rtol=1e-4)


def test_warp_roundtrip_rigid():
    D = H = W = 16
    g = identity_grid(D, H, W, torch.float64)

    def field(p):
        x, y, z = p.unbind(-1)
        return torch.sin(1.5 * x) * torch.cos(y) + 0.5 * z

    vol = FeatureVolume(field(g)[None])
    R = torch.tensor(axis_angle_to_matrix([0, 0, 0.15]))
    fwd = MotionField(g @ R.T, torch.ones(1, D, H, W), torch.ones(H, W))
    bwd = MotionField(g @ R, torch.ones(1, D, H, W), torch.ones(H, W))
    once = warp(vol, fwd)
    back = warp(once, bwd)
    inner = (slice(None), slice(4, -4), slice(4, -4), slice(4, -4))
    direct = field(g @ R.T)[None]
    one_step = (once.data - direct)[inner].abs().max()
    round_trip = (back.data - vol.data)[inner].abs().max()
    # two interpolations accumulate at most twice the single-step error
    assert round_trip <= 2 * one_step + 1e-12
    assert one_step < 0.05


def test_feature_volume_validation():
    with pytest.raises(ValueError):
        FeatureVolume(torch.zeros(3, 4, 4))
    with pytest.raises(ValueError):
        FeatureVolume(torch.zeros(3, 1, 4, 4))
    with pytest.raises(ValueError):
        warp(FeatureVolume(torch.zeros(1, 3, 3, 3)), _identity_field((4, 4, 4)))
