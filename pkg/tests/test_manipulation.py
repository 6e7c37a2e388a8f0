import numpy as np
import pytest
import torch

from priorhead.codec import StreamHeader, encode_stream
from priorhead.keypoints import select_keypoints
from priorhead.manipulation import (
    EMOTIONS,
    ExpressionTranslator,
    UnknownTranslatorError,
    affine_directions,
    affine_translator,
    edit_expression,
    get_translator,
    identity_translator,
    render_edited,
)
from priorhead.networks import ExpressionFeature, FaceVideoModel, NetConfig, save_checkpoint
from priorhead.pipeline import PlanMismatchError, Synthesizer, reconstruct, reenact
from priorhead.prior import render_synthetic_frame, sample_params

NET = NetConfig(image_size=32, base_channels=16, volume_channels=4, volume_depth=4, spade_blocks=2,
                spade_hidden=8, mask_width=8, num_keypoints=5)


@pytest.fixture(scope="module")
def syn(tmp_path_factory):
    torch.manual_seed(0)
    model = FaceVideoModel(NET)
    path = tmp_path_factory.mktemp("ck") / "m.pt"
    save_checkpoint(path, model, select_keypoints(5).to_text(), prior_seed=0)
    return Synthesizer.from_checkpoint(path, batch=3)


@pytest.fixture(scope="module")
def video(morph):
    rng = np.random.default_rng(0)
    ps = [sample_params(rng) for _ in range(5)]
    return np.stack([render_synthetic_frame(morph, p, 32) for p in ps]), ps


def test_edit_expression_examples():
    e = ExpressionFeature(np.arange(53.0))
    assert edit_expression(e, identity_translator(), "happy") == e
    neutral = edit_expression(e, affine_translator(), "neutral")
    assert np.array_equal(neutral.expression, np.zeros(50)) and np.array_equal(neutral.jaw, e.jaw)
    v = affine_directions(3)["happy"]
    zero = ExpressionFeature(np.r_[np.zeros(50), 1, 2, 3])
    assert np.array_equal(edit_expression(zero, affine_translator(seed=3), "happy").expression - zero.expression, v)
    # away from zero the subtraction itself rounds, so compare to one ulp of the operands
    happy = edit_expression(e, affine_translator(seed=3), "happy")
    np.testing.assert_allclose(happy.expression - e.expression, v, rtol=0, atol=1e-13)
    assert np.array_equal(happy.jaw, e.jaw)


def test_translator_errors():
    with pytest.raises(UnknownTranslatorError):
        get_translator("nope")
    with pytest.raises(UnknownTranslatorError):
        affine_translator()(np.zeros(50), "bored")
    bad = ExpressionTranslator("bad", EMOTIONS, lambda e, label: e[:10])
    with pytest.raises(ValueError):
        bad(np.zeros(50), "happy")
    with pytest.raises(ValueError):
        edit_expression(ExpressionFeature(np.zeros(20)), identity_translator(), "happy")


def test_directions_are_seeded():
    a, b = affine_directions(1), affine_directions(1)
    assert all(np.array_equal(a[k], b[k]) for k in a) and "neutral" not in a
    assert all(np.linalg.norm(v) == pytest.approx(1.5) for v in a.values())


def test_identity_edit_equals_reconstruction(syn, video):
    frames, ps = video
    base = reconstruct(syn, frames, ps, source_index=0)
    edited = render_edited(syn, frames[0], ps[0], ps, identity_translator(), "sad")
    assert np.array_equal(base, edited.frames)
    assert base.shape == (5, 32, 32, 3) and base.dtype == np.uint8


def test_neutral_edit_keeps_keypoint_stream(syn, video):
    frames, ps = video
    hdr = StreamHeader(5, 50, syn.plan.indices)
    plain = render_edited(syn, frames[0], ps[0], ps, identity_translator(), "neutral")
    edited = render_edited(syn, frames[0], ps[0], ps, affine_translator(), "neutral")
    stream = lambda res: encode_stream(hdr, [(kf, p) for kf, p in zip(res.keypoints, ps)])
    assert stream(plain) == stream(edited)
    assert not np.array_equal(plain.frames, edited.frames)


def test_unknown_label_before_rendering(syn, video):
    frames, ps = video
    calls = []
    orig = syn.render
    syn.render = lambda *a, **k: calls.append(1) or orig(*a, **k)
    try:
        with pytest.raises(UnknownTranslatorError):
            render_edited(syn, frames[0], ps[0], ps, affine_translator(), "bored")
    finally:
        del syn.render
    assert calls == []


def test_every_E_has_same_shape(syn, video):
    frames, ps = video
    shapes = {reconstruct(syn, frames[:2], ps[:2], E=E).shape for E in range(51)}
    assert shapes == {(2, 32, 32, 3)}


def test_batching_does_not_change_output(syn, video):
    frames, ps = video
    a = reconstruct(syn, frames, ps)
    syn.batch = 1
    try:
        b = reconstruct(syn, frames, ps)
    finally:
        syn.batch = 3
    assert np.abs(a.astype(int) - b.astype(int)).max() <= 1


def test_reenact_relative_first_frame(syn, video, morph):
    frames, ps = video
    rng = np.random.default_rng(4)
    other = [sample_params(rng) for _ in range(3)]
    out = reenact(syn, frames[0], ps[0], other)
    assert out.shape == (3, 32, 32, 3)
    # relative motion starts at the source pose: first output equals a self-drive of the source
    kf = syn.keypoints(ps[0])
    first = syn.render(frames[0], kf, [kf], [ExpressionFeature.from_params(other[0])])
    assert np.array_equal(out[:1], first)


def test_plan_mismatch(syn):
    with pytest.raises(PlanMismatchError):
        syn.check_plan(select_keypoints(6).indices)
    syn.check_plan(select_keypoints(5).indices)
