import numpy as np
import pytest
import torch

from priorhead.keypoints import KeypointFrame
from priorhead.motionfield import FeatureVolume, candidate_warps, combine_flow, warp
from priorhead.networks import (
    CheckpointError,
    ExpressionFeature,
    FaceVideoModel,
    MultiScaleDiscriminator,
    NetConfig,
    PerceptualEmbedder,
    appearance_extract,
    condition_batch,
    generate,
    image_to_tensor,
    load_checkpoint,
    predict_masks,
    save_checkpoint,
    tensor_to_image,
)
from priorhead.prior import axis_angle_to_matrix

TINY = NetConfig(image_size=16, base_channels=8, volume_channels=4, volume_depth=4, spade_blocks=2,
                 spade_hidden=8, mask_width=8, num_keypoints=3)


@pytest.fixture
def tiny():
    torch.manual_seed(0)
    return FaceVideoModel(TINY).eval()


def test_netconfig_validation():
    with pytest.raises(ValueError):
        NetConfig(spade_blocks=0)
    with pytest.raises(ValueError):
        NetConfig(image_size=66)
    with pytest.raises(ValueError):
        NetConfig(expression_dim_max=50)


def test_expression_feature():
    for n in (3, 28, 53):
        assert len(ExpressionFeature(np.zeros(n))) == n
    for n in (2, 54):
        with pytest.raises(ValueError):
            ExpressionFeature(np.zeros(n))
    e = ExpressionFeature(np.arange(13.0))
    vals, mask = e.condition()
    assert vals.shape == mask.shape == (53,)
    assert mask.sum() == 13 and np.array_equal(vals[50:], [10, 11, 12])
    assert e.truncated(0) == ExpressionFeature([10, 11, 12])


def test_appearance_shape_default_config():
    torch.manual_seed(0)
    model = FaceVideoModel(NetConfig()).eval()
    img = np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    v = appearance_extract(model, img)
    assert tuple(v.data.shape) == (32, 16, 16, 16)
    assert torch.equal(v.data, appearance_extract(model, img.copy()).data)
    with pytest.raises(ValueError):
        appearance_extract(model, img[:32])


@pytest.mark.parametrize("K", [1, 5, 16])
def test_predict_masks_shapes(K):
    tiny = FaceVideoModel(NetConfig(**{**TINY.to_dict(), "num_keypoints": K})).eval()
    cands = torch.randn(K, 4, 4, 4, 4)
    logits, occ = predict_masks(tiny, cands)
    assert logits.shape == (K, 4, 4, 4)
    assert occ.shape == (4, 4)
    assert occ.min() >= 0 and occ.max() <= 1
    with pytest.raises(ValueError):
        predict_masks(tiny, torch.randn(K + 1, 4, 4, 4, 4))


def test_generate_lengths_and_determinism(tiny):
    warped = FeatureVolume(torch.randn(4, 4, 4, 4))
    occ = torch.rand(4, 4)
    outs = [generate(tiny, warped, occ, ExpressionFeature(np.ones(n))) for n in (3, 28, 53)]
    assert all(o.shape == (3, 16, 16) for o in outs)
    assert all(o.abs().max() <= 1 for o in outs)
    again = generate(tiny, warped, occ, ExpressionFeature(np.ones(28)))
    assert torch.equal(outs[1], again)
    with pytest.raises(ValueError):
        generate(tiny, warped, occ, np.ones(54))


def test_zero_occlusion_zeroes_generator_input(tiny):
    seen = {}
    tiny.generator.gate.register_forward_hook(lambda m, i, o: seen.setdefault("x", o))
    generate(tiny, FeatureVolume(torch.randn(4, 4, 4, 4)), torch.zeros(4, 4), ExpressionFeature(np.ones(53)))
    assert torch.count_nonzero(seen["x"]) == 0


def test_expression_changes_output(tiny):
    warped = FeatureVolume(torch.randn(4, 4, 4, 4))
    occ = torch.ones(4, 4)
    a = generate(tiny, warped, occ, ExpressionFeature(np.zeros(53)))
    b = generate(tiny, warped, occ, ExpressionFeature(np.r_[np.ones(50), 0, 0, 0]))
    assert (a - b).abs().sum() > 0


def _pipeline_scalar(model, img, weights, skf, dkf):
    f = FeatureVolume(model.appearance(img)[0])
    cands = candidate_warps(f, skf, dkf)
    logits, occ = model.masks(cands[None])
    field = combine_flow(cands, logits[0], skf, dkf, occ[0])
    w = warp(f, field)
    out = model.generator(w.data[None], field.occlusion[None], condition_batch([ExpressionFeature(np.ones(53))],
                                                                               torch.float64))
    return (out * weights).sum()


def test_end_to_end_pixel_gradient():
    torch.manual_seed(1)
    model = FaceVideoModel(TINY).double().eval()
    rng = np.random.default_rng(0)
    skf = KeypointFrame(axis_angle_to_matrix([0, 0.1, 0]), np.zeros(3), rng.uniform(-0.5, 0.5, (3, 3)))
    dkf = KeypointFrame(axis_angle_to_matrix([0.05, 0, 0]), np.zeros(3), rng.uniform(-0.5, 0.5, (3, 3)))
    img = torch.rand(1, 3, 16, 16, dtype=torch.float64) * 2 - 1
    weights = torch.randn(1, 3, 16, 16, dtype=torch.float64)
    x = img.clone().requires_grad_(True)
    _pipeline_scalar(model, x, weights, skf, dkf).backward()
    pix = (0, 1, 7, 9)
    analytic = x.grad[pix].item()
    h = 1e-5
    with torch.no_grad():
        up, dn = img.clone(), img.clone()
        up[pix] += h
        dn[pix] -= h
        numeric = (_pipeline_scalar(model, up, weights, skf, dkf)
                   - _pipeline_scalar(model, dn, weights, skf, dkf)).item() / (2 * h)
    assert abs(analytic - numeric) / max(abs(numeric), 1e-12) < 1e-3


def test_model_forward_matches_modular_path(tiny):
    """The batched compressed-before-warp path equals warping the full volume first."""
    rng = np.random.default_rng(2)
    skf = KeypointFrame(axis_angle_to_matrix([0, 0.2, 0]), np.zeros(3), rng.uniform(-0.5, 0.5, (3, 3)))
    dkf = KeypointFrame(np.eye(3), np.zeros(3), rng.uniform(-0.5, 0.5, (3, 3)))
    img = torch.rand(1, 3, 16, 16) * 2 - 1
    with torch.no_grad():
        f = FeatureVolume(tiny.appearance(img)[0])
        cands = candidate_warps(f, skf, dkf)
        logits, occ = tiny.masks(cands[None])
        f_s = f.data[None]
        flow, masks, occ2 = tiny.motion(f_s, *(torch.as_tensor(a, dtype=torch.float32)[None] for a in
                                               (skf.rotation, skf.keypoints, dkf.rotation, dkf.keypoints)))
    torch.testing.assert_close(torch.softmax(logits, 1), masks, atol=1e-5, rtol=1e-4)
    torch.testing.assert_close(occ, occ2, atol=1e-5, rtol=1e-4)


def test_image_tensor_roundtrip():
    img = np.random.default_rng(0).integers(0, 256, (2, 8, 8, 3), dtype=np.uint8)
    assert np.array_equal(tensor_to_image(image_to_tensor(img)), img)


def test_discriminator_and_embedder_shapes():
    d = MultiScaleDiscriminator(2, channels=8)
    outs = d(torch.randn(2, 3, 64, 64))
    assert len(outs) == 2 and outs[1].shape[-1] == outs[0].shape[-1] // 2
    e1, e2 = PerceptualEmbedder(3), PerceptualEmbedder(3)
    x = torch.randn(1, 3, 16, 16)
    assert all(torch.equal(a, b) for a, b in zip(e1(x), e2(x)))
    assert not any(p.requires_grad for p in e1.parameters())


def test_checkpoint_roundtrip(tmp_path, tiny):
    path = tmp_path / "m.pt"
    save_checkpoint(path, tiny, "1 2 3", prior_seed=4)
    model, plan, payload = load_checkpoint(path)
    assert plan == "1 2 3" and payload["prior_seed"] == 4 and not model.training
    for k, v in tiny.state_dict().items():
        assert torch.equal(v, model.state_dict()[k])


def test_checkpoint_rejects_bad_version(tmp_path, tiny):
    path = tmp_path / "m.pt"
    save_checkpoint(path, tiny, "1 2 3", prior_seed=0)
    payload = torch.load(path, weights_only=False)
    payload["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pt")
