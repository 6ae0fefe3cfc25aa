import numpy as np
import pytest

from cmbpipe.backends import ModelBackend, load_backend
from cmbpipe.catalog import SubjectRecord, Volume
from cmbpipe.detector import (
    DetectorHyperparams, PatchSample, SamplingPolicy, TinyDetector, augment, extract_training_patches,
    finetune_detector, infer_detector, instances_to_scores, scale_boxes, steps_per_epoch, tile_origins,
    upsample_patch,
)
from cmbpipe.errors import BackendFailure, NoLesions
from cmbpipe.training import AffineParams, AugmentRanges, apply_affine, run_epochs


def _subject(lesions, shape=(6, 128, 128), sid="101", seed=0):
    """Subject with cube lesions given as (slice, row, col, half-size)."""
    rng = np.random.default_rng(seed)
    t2s = rng.normal(1.0, 0.05, shape).astype(np.float32)
    ann = np.zeros(shape, np.uint8)
    for z, r, c, h in lesions:
        ann[z, r - h:r + h + 1, c - h:c + h + 1] = 1
    t2s[ann > 0] = -2.0
    vols = [Volume(t2s.copy()), Volume(t2s.copy()), Volume(t2s)]
    return SubjectRecord(sid, *vols, annotation=Volume(ann))


class DarkSpotBackend(ModelBackend):
    """Deterministic stand-in: one instance covering every pixel whose T2* channel is below -1."""

    def train_step(self, inputs, targets):
        return 0.0

    def eval_loss(self, inputs, targets):
        return 0.0

    def predict(self, inputs):
        out = []
        for tile in inputs:
            m = (tile[2] < -1).astype(np.float32)
            if not m.any():
                out.append({"boxes": np.zeros((0, 4)), "scores": np.zeros(0), "masks": np.zeros((0,) + m.shape)})
                continue
            rows, cols = np.nonzero(m)
            box = [rows.min(), cols.min(), rows.max() + 1, cols.max() + 1]
            out.append({"boxes": np.array([box], float), "scores": np.array([0.9]), "masks": m[None]})
        return out

    def save(self, path):
        raise NotImplementedError


def test_three_lesions_give_three_positives_and_three_negatives():
    s = _subject([(1, 30, 30, 1), (3, 70, 90, 1), (4, 100, 40, 2)])
    out = extract_training_patches(s, SamplingPolicy(), np.random.default_rng(0))
    pos = [p for p in out if len(p.boxes)]
    neg = [p for p in out if not len(p.boxes)]
    assert len(pos) == 3 and len(neg) == 3
    for p in out:
        assert p.image.shape == (3, 256, 256)
        assert p.masks.shape[1:] == (256, 256)
    for p in neg:
        _, z, r0, c0 = p.source
        assert not s.annotation.data[z, r0:r0 + 64, c0:c0 + 64].any()


def test_corner_lesion_window_clamped():
    s = _subject([(2, 1, 1, 1)])
    out = extract_training_patches(s, SamplingPolicy(jitter=0), np.random.default_rng(0))
    pos = [p for p in out if len(p.boxes)][0]
    assert pos.source[2:] == (0, 0)
    assert pos.boxes.tolist() == [[0, 0, 12, 12]]


def test_no_lesions_raises():
    s = _subject([])
    with pytest.raises(NoLesions):
        extract_training_patches(s, SamplingPolicy(), np.random.default_rng(0))
    neg = extract_training_patches(s, SamplingPolicy(allow_negative_only=True), np.random.default_rng(0))
    assert len(neg) == 1 and not len(neg[0].boxes)


def test_patches_deterministic_for_seed():
    s = _subject([(1, 30, 30, 1), (3, 70, 90, 1)])
    a = extract_training_patches(s, SamplingPolicy(), np.random.default_rng(7))
    b = extract_training_patches(s, SamplingPolicy(), np.random.default_rng(7))
    assert [p.source for p in a] == [p.source for p in b]


def test_upsample_single_pixel_block():
    mask = np.zeros((1, 64, 64), np.uint8)
    mask[0, 10, 10] = 1
    up = upsample_patch(mask, 4, "nearest")
    rows, cols = np.nonzero(up[0])
    assert (rows.min(), rows.max() + 1, cols.min(), cols.max() + 1) == (40, 44, 40, 44)
    assert up.sum() == 16


def test_scale_boxes():
    assert scale_boxes([[8, 8, 16, 16]]).tolist() == [[32, 32, 64, 64]]


def test_box_area_scales_by_sixteen():
    s = _subject([(2, 60, 60, 2)])
    out = extract_training_patches(s, SamplingPolicy(), np.random.default_rng(1))
    pos = [p for p in out if len(p.boxes)][0]
    r0, c0, r1, c1 = pos.boxes[0]
    assert (r1 - r0) * (c1 - c0) == 16 * 25


def _pos_sample(r0=100, c0=60, h=12, w=20):
    img = np.random.default_rng(0).normal(size=(3, 256, 256)).astype(np.float32)
    m = np.zeros((1, 256, 256), np.uint8)
    m[0, r0:r0 + h, c0:c0 + w] = 1
    return PatchSample(img, [[r0, c0, r0 + h, c0 + w]], m)


def test_flip_twice_is_identity():
    s = _pos_sample()
    p = AffineParams(flip=True)
    twice = augment(augment(s, None, params=p), None, params=p)
    np.testing.assert_array_equal(twice.image, s.image)
    np.testing.assert_array_equal(twice.masks, s.masks)
    np.testing.assert_array_equal(twice.boxes, s.boxes)


def test_zero_ranges_identity():
    s = _pos_sample()
    ranges = AugmentRanges(rotation_deg=0, scale_min=1, scale_max=1, translation=0, flip_probability=0)
    out = augment(s, np.random.default_rng(0), ranges)
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.boxes, s.boxes)


def test_rotation_90_moves_top_to_right():
    m = np.zeros((1, 9, 9), np.float32)
    m[0, 0, 4] = 1
    out = apply_affine(m, AffineParams(angle_deg=90.0), order=0)
    assert out[0, 4, 8] == 1 and out.sum() == 1


def test_augmented_boxes_stay_tight_and_inside():
    rng = np.random.default_rng(0)
    base = _pos_sample(120, 120, 8, 8)
    for _ in range(1000):
        out = augment(base, rng)
        (r0, c0, r1, c1), = out.boxes
        m = out.masks[0]
        assert 0 <= r0 < r1 <= 256 and 0 <= c0 < c1 <= 256
        assert m.sum() == m[r0:r1, c0:c1].sum()
        assert m[r0].any() and m[r1 - 1].any() and m[:, c0].any() and m[:, c1 - 1].any()


def test_tile_origins_cover_512():
    o = tile_origins(512)
    assert len(o) ** 2 == 225
    covered = np.zeros(512, int)
    for s in o:
        covered[s:s + 64] += 1
    assert covered.min() >= 1
    assert tile_origins(100)[-1] == 36


def test_instances_to_scores_max():
    masks = np.zeros((2, 4, 4), np.float32)
    masks[0, :2] = 1
    masks[1, 1:3] = 1
    got = instances_to_scores({"scores": np.array([0.5, 0.8]), "masks": masks}, (4, 4))
    assert got[0, 0] == 0.5 and got[1, 0] == pytest.approx(0.8) and got[3, 0] == 0


def test_inference_max_fusion_and_shape():
    s = _subject([(2, 64, 64, 2)])
    res = infer_detector(DarkSpotBackend(), s)
    assert res.score_volume.shape == s.shape
    assert res.score_volume.data[2, 64, 64] == pytest.approx(0.9)
    assert res.score_volume.data.max() <= 0.9 + 1e-6
    assert not res.score_volume.data[0].any()
    assert len(res.instances) == s.shape[0] and res.instances[2]


def test_inference_shift_by_one_stride():
    a = _subject([(2, 50, 50, 2), (3, 40, 70, 1)], seed=1)
    shifted = [(z, r + 32, c + 32, h) for z, r, c, h in [(2, 50, 50, 2), (3, 40, 70, 1)]]
    b = _subject(shifted, seed=1)
    sa = infer_detector(DarkSpotBackend(), a).score_volume.data
    sb = infer_detector(DarkSpotBackend(), b).score_volume.data
    np.testing.assert_allclose(sb[:, 32:, 32:], sa[:, :-32, :-32], atol=1e-6)


def test_inference_deterministic_and_stateless():
    s = _subject([(2, 64, 64, 2)])
    det = TinyDetector(width=4, seed=0)
    a = infer_detector(det, s).score_volume.data
    b = infer_detector(det, s).score_volume.data
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_backend_error_is_wrapped():
    class Broken(DarkSpotBackend):
        def predict(self, inputs):
            raise RuntimeError("boom")
    with pytest.raises(BackendFailure):
        infer_detector(Broken(), _subject([(1, 10, 10, 1)]))


class CountingBackend(DarkSpotBackend):
    def __init__(self):
        super().__init__()
        self.steps = 0

    def train_step(self, inputs, targets):
        self.steps += 1
        return 1.0 / self.steps

    @staticmethod
    def collate(batch):
        return batch, batch


def test_sixty_patches_batch_six():
    assert steps_per_epoch(60, 6) == 10
    b = CountingBackend()
    hist = run_epochs(b, list(range(60)), [], 15, 6, 0, None, b.collate)
    assert [h.steps for h in hist] == [10] * 15 and b.steps == 150


def test_finetune_reduces_loss(tmp_path):
    subjects = [_subject([(1, 30, 30, 1), (3, 70, 90, 2)], seed=i, sid=f"10{i}") for i in range(2)]
    rng = np.random.default_rng(0)
    patches = [p for s in subjects for p in extract_training_patches(s, SamplingPolicy(), rng)]
    hp = DetectorHyperparams(epochs=4, batch_size=4, learning_rate=3e-3)
    det = finetune_detector(patches, patches, hp, TinyDetector(width=4, seed=0), seed=0)
    losses = [h.train_loss for h in det.history]
    assert len(losses) == 4 and losses[-1] < losses[0]
    path = det.save(tmp_path / "det.pt")
    again = load_backend(path)
    x = np.stack([p.image for p in patches[:2]])
    np.testing.assert_array_equal(again.predict_prob(x), det.predict_prob(x))


def test_finetune_deterministic():
    s = _subject([(1, 30, 30, 1)])
    patches = extract_training_patches(s, SamplingPolicy(), np.random.default_rng(0))
    hp = DetectorHyperparams(epochs=2, batch_size=2, learning_rate=1e-3)
    a = finetune_detector(patches, [], hp, TinyDetector(width=4, seed=3), seed=5)
    b = finetune_detector(patches, [], hp, TinyDetector(width=4, seed=3), seed=5)
    assert [h.train_loss for h in a.history] == [h.train_loss for h in b.history]


def test_finetune_empty_train():
    with pytest.raises(ValueError):
        finetune_detector([], [], DetectorHyperparams(), TinyDetector(width=4))


def test_hyperparams_validation():
    hp = DetectorHyperparams()
    assert (hp.epochs, hp.batch_size, hp.learning_rate, hp.patch_side, hp.upsample_factor) == (15, 6, 5e-6, 64, 4)
    with pytest.raises(ValueError):
        DetectorHyperparams(patch_side=32)


@pytest.mark.slow
def test_maskrcnn_backend_smoke():
    pytest.importorskip("torchvision")
    from cmbpipe.detector import MaskRCNNDetector
    s = _subject([(1, 30, 30, 2)])
    patches = extract_training_patches(s, SamplingPolicy(), np.random.default_rng(0))
    det = MaskRCNNDetector(weights=None, seed=0)
    det.set_learning_rate(1e-4)
    imgs, tg = det.collate(patches)
    assert np.isfinite(det.train_step(imgs, tg))
    preds = det.predict(np.stack(imgs))
    assert len(preds) == len(patches)
    for p in preds:
        assert p["masks"].shape[1:] == (256, 256)
