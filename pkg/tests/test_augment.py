import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exprcl.augment import (
    DOWNSTREAM_ORDER,
    EVAL_ORDER,
    PRETRAIN_ORDER,
    AugConfig,
    adjust_hue,
    augment_downstream_view,
    augment_pretrain_view,
    color_jitter,
    dataset_stats,
    eval_transform,
    grayscale,
    is_ordered_subsequence,
    normalize,
    resize,
)
from exprcl.data import Landmarks68, Role, load_image
from exprcl.faceops import as_float

QUIET = dict(p_flip=0.0, p_jitter=0.0, p_blur=0.0, p_gray=0.0, p_mask=0.0, p_swap=0.0)


def cfg(**kw):
    return AugConfig(**{"resize": 64, "crop": 56, **kw})


@pytest.fixture(scope="module")
def corpus():
    from exprcl.synthetic import generate_corpus

    return generate_corpus(4, 2, 4.0, 5.0, 0.15, seed=7)[0]


def next_frame(m):
    return lambda rec, rng: m.video_frames(rec.video_id)[1]


class TestConfig:
    def test_crop_larger_than_resize(self):
        with pytest.raises(ValueError, match="crop"):
            AugConfig(resize=64, crop=72)

    def test_probability_range(self):
        with pytest.raises(ValueError, match="p_gray"):
            AugConfig(p_gray=1.5)

    def test_blur_kernel_odd_and_about_a_tenth(self):
        for crop in (56, 112, 224):
            k = AugConfig(resize=crop, crop=crop).blur_kernel
            assert k % 2 == 1 and abs(k - 0.1 * crop) <= 1


class TestOps:
    def test_grayscale_equal_channels(self, rng):
        img = rng.random((8, 8, 3)).astype(np.float32)
        g = grayscale(img)
        assert np.array_equal(g[..., 0], g[..., 1]) and np.array_equal(g[..., 1], g[..., 2])
        assert np.allclose(g[..., 0], 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2], atol=1e-6)

    def test_hue_zero_shift_identity(self, rng):
        img = rng.random((8, 8, 3)).astype(np.float32)
        assert np.allclose(adjust_hue(img, 0.0), img, atol=1e-5)

    def test_hue_full_turn_identity(self, rng):
        img = rng.random((8, 8, 3)).astype(np.float32)
        assert np.allclose(adjust_hue(img, 1.0), img, atol=1e-4)

    def test_jitter_stays_in_range(self, rng):
        img = rng.random((16, 16, 3)).astype(np.float32)
        for _ in range(20):
            out = color_jitter(img, AugConfig(), rng)
            assert out.min() >= 0 and out.max() <= 1 and out.dtype == np.float32

    def test_normalize_layout(self):
        img = np.full((4, 4, 3), 0.75, np.float32)
        out = normalize(img, AugConfig(mean=(0.5, 0.5, 0.25), std=(0.5, 0.25, 0.5)))
        assert out.shape == (3, 4, 4)
        assert np.allclose(out[:, 0, 0], [0.5, 1.0, 1.0])

    def test_resize_noop(self, rng):
        img = rng.random((64, 64, 3)).astype(np.float32)
        assert resize(img, 64) is img

    def test_dataset_stats_match_numpy(self, rng):
        imgs = [rng.integers(0, 256, (10, 12, 3), dtype=np.uint8) for _ in range(3)]
        mean, std = dataset_stats(imgs)
        flat = np.concatenate([i.reshape(-1, 3) for i in imgs]).astype(np.float64) / 255
        assert np.allclose(mean, flat.mean(axis=0)) and np.allclose(std, flat.std(axis=0))


class TestOrdering:
    def test_subsequence_check(self):
        assert is_ordered_subsequence(["Resize", "Crop", "Normalize"], PRETRAIN_ORDER)
        assert not is_ordered_subsequence(["Crop", "Resize"], PRETRAIN_ORDER)
        assert not is_ordered_subsequence(["Resize", "Resize"], PRETRAIN_ORDER)
        assert not is_ordered_subsequence(["TimeAug"], DOWNSTREAM_ORDER)

    def test_pretrain_traces_ordered(self, corpus):
        rng = np.random.default_rng(0)
        c = cfg(p_swap=1.0)
        seen = set()
        for k in range(30):
            rec = corpus[k]
            partner = corpus[-1 - k]
            for role in Role:
                out = augment_pretrain_view(rec, role, c, rng, time_aug=next_frame(corpus),
                                            partner=partner, faceswap=True)
                assert is_ordered_subsequence(out.trace, PRETRAIN_ORDER)
                assert out.trace[-1] == "Normalize"
                if role is not Role.POSITIVE:
                    assert "TimeAug" not in out.trace and "FaceSwap" not in out.trace
                    assert out.source is rec
                seen.update(out.trace)
        assert seen == set(PRETRAIN_ORDER)

    def test_downstream_modes(self, corpus, rng):
        train = augment_downstream_view(corpus[0], cfg(), True, rng)
        assert is_ordered_subsequence(train.trace, DOWNSTREAM_ORDER)
        ev = augment_downstream_view(corpus[0], cfg(), False)
        assert tuple(ev.trace) == EVAL_ORDER

    def test_train_mode_needs_rng(self, corpus):
        with pytest.raises(ValueError):
            augment_downstream_view(corpus[0], cfg(), True)


class TestViews:
    def test_shape_and_dtype(self, corpus, rng):
        out = augment_pretrain_view(corpus[0], Role.ANCHOR, cfg(), rng)
        assert out.image.shape == (3, 56, 56) and out.image.dtype == np.float32

    def test_same_rng_same_output(self, corpus):
        a = augment_pretrain_view(corpus[3], Role.POSITIVE, cfg(), np.random.default_rng(4),
                                  time_aug=next_frame(corpus))
        b = augment_pretrain_view(corpus[3], Role.POSITIVE, cfg(), np.random.default_rng(4),
                                  time_aug=next_frame(corpus))
        assert np.array_equal(a.image, b.image) and a.trace == b.trace

    def test_quiet_chain_equals_eval(self, corpus, rng):
        c = cfg(resize=64, crop=64, **QUIET)
        out = augment_pretrain_view(corpus[0], Role.ANCHOR, c, rng)
        assert out.trace == ["Resize", "Crop", "Normalize"]
        assert np.array_equal(out.image, eval_transform(load_image(corpus[0]), c))

    def test_flip_mirrors(self, corpus):
        base = augment_downstream_view(corpus[0], cfg(**QUIET), True, np.random.default_rng(0), crop_origin=(4, 4))
        flipped = augment_downstream_view(corpus[0], cfg(**{**QUIET, "p_flip": 1.0}), True,
                                          np.random.default_rng(0), crop_origin=(4, 4))
        assert np.array_equal(flipped.image, base.image[:, :, ::-1])

    def test_eval_is_center_crop(self, corpus):
        c = cfg()
        out = eval_transform(load_image(corpus[0]), c)
        full = normalize(as_float(load_image(corpus[0])), c)
        assert np.array_equal(out, full[:, 4:60, 4:60])

    def test_timeaug_changes_source(self, corpus, rng):
        rec = corpus.video_frames(corpus.videos[0])[0]
        out = augment_pretrain_view(rec, Role.POSITIVE, cfg(), rng, time_aug=next_frame(corpus))
        assert out.source.key != rec.key and out.source.video_id == rec.video_id

    def test_swap_needs_partner(self, corpus, rng):
        with pytest.raises(ValueError, match="partner"):
            augment_pretrain_view(corpus[0], Role.POSITIVE, cfg(p_swap=1.0), rng, faceswap=True)

    def test_swap_failure_flags_and_falls_back(self, corpus, rng):
        from dataclasses import replace

        bad = replace(corpus[1], landmarks=Landmarks68(np.c_[np.arange(68.0), np.arange(68.0)]))
        c = cfg(resize=64, crop=64, **{**QUIET, "p_swap": 1.0})
        out = augment_pretrain_view(corpus[0], Role.POSITIVE, c, rng, partner=bad, faceswap=True)
        assert "faceswap_fallback" in out.flags and "FaceSwap" not in out.trace
        plain = augment_pretrain_view(corpus[0], Role.ANCHOR, c, rng)
        assert np.array_equal(out.image, plain.image)  # quiet chain, so the fallback is the raw frame

    def test_swap_keeps_partner_background(self, corpus, rng):
        c = cfg(resize=64, crop=64, **{**QUIET, "p_swap": 1.0})
        partner = corpus[-1]
        out = augment_pretrain_view(corpus[0], Role.POSITIVE, c, rng, partner=partner, faceswap=True)
        assert out.trace == ["FaceSwap", "Resize", "Crop", "Normalize"]
        ref = eval_transform(load_image(partner), c)
        assert np.array_equal(out.image[:, :3, :3], ref[:, :3, :3])

    def test_gray_view_has_equal_channels(self, corpus, rng):
        c = cfg(**{**QUIET, "p_gray": 1.0}, mean=(0.5,) * 3, std=(0.5,) * 3)
        out = augment_pretrain_view(corpus[0], Role.ANCHOR, c, rng)
        assert np.allclose(out.image[0], out.image[1]) and np.allclose(out.image[1], out.image[2])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), role=st.sampled_from(list(Role)))
def test_any_seed_gives_ordered_finite_view(seed, role):
    from exprcl.synthetic import generate_corpus

    m = generate_corpus(2, 1, 1.0, 5.0, 0.1, seed=1)[0]
    out = augment_pretrain_view(m[0], role, cfg(p_swap=1.0), np.random.default_rng(seed),
                                time_aug=next_frame(m), partner=m[-1], faceswap=True)
    assert is_ordered_subsequence(out.trace, PRETRAIN_ORDER)
    assert np.isfinite(out.image).all()
