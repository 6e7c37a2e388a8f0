import logging

import numpy as np
import pytest

from priorhead.data import (
    DatasetError,
    NoFaceError,
    cache_priors,
    decode_params,
    encode_params,
    make_synthetic_dataset,
    preprocess,
    square_crop,
    synthetic_face_detector,
)
from priorhead.prior import BACKGROUND, make_prior, render_synthetic_frame, sample_params


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_dataset_is_byte_deterministic(tmp_path):
    a = make_synthetic_dataset(tmp_path / "a", 3, 4, seed=9, resolution=32)
    b = make_synthetic_dataset(tmp_path / "b", 3, 4, seed=9, resolution=32)
    assert _tree_bytes(a.root) == _tree_bytes(b.root)
    c = make_synthetic_dataset(tmp_path / "c", 3, 4, seed=10, resolution=32)
    assert _tree_bytes(a.root) != _tree_bytes(c.root)


def test_layout_and_split(tmp_path):
    lay = make_synthetic_dataset(tmp_path, 10, 3, seed=0, resolution=32, test_fraction=0.2)
    assert len(lay.video_ids()) == 10 and len(lay.video_ids("test")) == 2
    assert lay.load_frames("vid00000").shape == (3, 32, 32, 3)
    assert len(lay.load_params("vid00000")) == 3
    assert lay.meta["resolution"] == 32
    lay.validate()
    with pytest.raises(DatasetError):
        lay.write_manifest([("a", "train"), ("a", "test")])


def test_params_codec_roundtrip(rng):
    ps = [sample_params(rng) for _ in range(3)]
    back = decode_params(encode_params(ps))
    for p, q in zip(ps, back):
        np.testing.assert_array_equal(q.to_vector(), p.to_vector().astype(np.float32))


def test_cache_idempotent_and_incremental(tmp_path):
    lay = make_synthetic_dataset(tmp_path, 3, 2, seed=0, resolution=64)
    ids = lay.video_ids()
    for v in ids:  # start from an empty cache
        lay.params_path(v).unlink()
        lay.hash_path(v).unlink()
    prior = make_prior("synthetic", resolution=64)
    first = cache_priors(lay, prior)
    assert first.computed == ids
    second = cache_priors(lay, prior)
    assert second.computed == [] and second.skipped == ids
    lay.params_path(ids[1]).unlink()
    assert cache_priors(lay, prior).computed == [ids[1]]
    # editing a frame invalidates its hash
    frames = lay.load_frames(ids[2])
    frames[0] = render_synthetic_frame(prior.model, sample_params(np.random.default_rng(1)), 64)
    lay.write_frames(ids[2], frames)
    assert not lay.sidecar_current(ids[2])
    assert cache_priors(lay, prior).computed == [ids[2]]


def test_cache_continues_after_failure(tmp_path):
    lay = make_synthetic_dataset(tmp_path, 2, 2, seed=0, resolution=64)
    for v in lay.video_ids():
        lay.params_path(v).unlink()

    class Flaky:
        def __init__(self):
            self.calls = 0

        def extract_params(self, img):
            self.calls += 1
            if self.calls == 1:
                raise RuntimeError("boom")
            return make_prior("synthetic").extract_params(img)

    rep = cache_priors(lay, Flaky())
    assert rep.failed == ["vid00000"] and rep.computed == ["vid00001"]


def _canvas(face, x, y, size=200):
    c = np.empty((size, size, 3), np.uint8)
    c[:] = BACKGROUND
    c[y:y + face.shape[0], x:x + face.shape[1]] = face
    return c


@pytest.fixture(scope="module")
def face(morph):
    return render_synthetic_frame(morph, sample_params(np.random.default_rng(0)), 64)


def test_preprocess_static(face):
    frames = np.stack([_canvas(face, 50, 60)] * 5)
    clips = preprocess(frames, synthetic_face_detector, out_size=32, min_size=16)
    assert len(clips) == 1
    first = synthetic_face_detector(frames[0])
    assert clips[0].crop == square_crop([first], 200, 200, 0.1)
    assert clips[0].frames.shape == (5, 32, 32, 3)


def test_preprocess_jump_gives_two_clips(face):
    frames = np.stack([_canvas(face, 20, 20)] * 3 + [_canvas(face, 120, 120)] * 4)
    clips = preprocess(frames, synthetic_face_detector, out_size=32, min_size=16)
    assert [(c.start, c.end) for c in clips] == [(0, 3), (3, 7)]


def test_preprocess_small_and_empty(face, caplog):
    frames = np.stack([_canvas(face, 50, 60)] * 2)
    with caplog.at_level(logging.INFO):
        assert preprocess(frames, synthetic_face_detector, min_size=150) == []
    assert "below" in caplog.text
    empty = np.stack([_canvas(face[:0], 0, 0)] * 2)
    with pytest.raises(NoFaceError):
        preprocess(empty, synthetic_face_detector)
