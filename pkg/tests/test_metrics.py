"""Confusion accumulation and segmentation metrics."""
import numpy as np
import pytest

from mcdnet.data import Sample
from mcdnet.errors import DataError, ShapeError
from mcdnet.metrics import (
    ConfusionCounts,
    accumulate_confusion,
    compute_metrics,
    confusion_over,
    evaluate,
)
from mcdnet.tensor import Tensor


def mask_carrying_samples(rng, n=5, size=16):
    """Samples whose red channel equals the mask, so a model can read the answer off the image."""
    out = []
    for i in range(n):
        mask = (rng.uniform(size=(size, size)) < 0.3).astype(np.uint8)
        image = rng.uniform(0.0, 1.0, (3, size, size)).astype(np.float32)
        image[0] = mask
        out.append(Sample(f"m{i}", image, mask))
    return out


def oracle(images):
    red = images.data[:, 0]
    return Tensor(np.stack([1.0 - red, red], axis=1))


def all_background(images):
    logits = np.zeros((images.shape[0], 2) + images.shape[2:], np.float32)
    logits[:, 0] = 1.0
    return Tensor(logits)


class TestWorkedExample:
    @pytest.fixture
    def report(self):
        return compute_metrics(ConfusionCounts.from_moraine(tp=50, fp=25, fn=25, tn=900))

    def test_moraine_scores(self, report):
        assert report.iou[1] == 0.5
        assert report.dice == pytest.approx(2 / 3, abs=1e-12)
        assert report.precision == report.recall == pytest.approx(2 / 3, abs=1e-12)
        assert report.pixel_acc == 0.95

    def test_background_and_means(self, report):
        assert report.iou[0] == pytest.approx(900 / 950, abs=1e-12)
        assert report.miou == pytest.approx((0.5 + 900 / 950) / 2, abs=1e-12)
        assert report.mean_recall == pytest.approx((2 / 3 + 900 / 925) / 2, abs=1e-12)

    def test_as_dict_keys(self, report):
        assert set(report.as_dict()) == {"miou", "recall", "precision", "dice", "pixel_acc",
                                          "mrecall", "mprecision", "mf1"}


class TestIdentities:
    def test_perfect_prediction(self, rng):
        gt = rng.integers(0, 2, (3, 8, 8))
        report = compute_metrics(accumulate_confusion(gt, gt))
        assert report.iou == [1.0, 1.0]
        assert report.miou == report.dice == report.pixel_acc == 1.0

    def test_dice_from_iou(self, rng):
        for _ in range(50):
            tp, fp, fn, tn = rng.integers(1, 1000, 4).tolist()
            report = compute_metrics(ConfusionCounts.from_moraine(tp, fp, fn, tn))
            iou = report.iou[1]
            assert abs(report.dice - 2 * iou / (1 + iou)) <= 1e-12

    def test_missing_class_drops_out_of_mean(self):
        report = compute_metrics(ConfusionCounts.from_moraine(tp=0, fp=0, fn=0, tn=64))
        assert report.miou == 1.0
        assert report.iou[1] == 0.0 and report.precision == report.recall == 0.0

    def test_matches_elementwise_loop(self, rng):
        for _ in range(100):
            pred = rng.integers(0, 2, (16, 16))
            gt = rng.integers(0, 2, (16, 16))
            expected = np.zeros((2, 2), np.int64)
            for g, p in zip(gt.ravel(), pred.ravel()):
                expected[g, p] += 1
            np.testing.assert_array_equal(accumulate_confusion(pred, gt).matrix, expected)

    def test_accumulation_is_global(self, rng):
        preds = rng.integers(0, 2, (4, 8, 8))
        gts = rng.integers(0, 2, (4, 8, 8))
        counts = ConfusionCounts()
        for p, g in zip(preds, gts):
            accumulate_confusion(p, g, counts)
        np.testing.assert_array_equal(counts.matrix, accumulate_confusion(preds, gts).matrix)
        assert counts.total == preds.size


class TestErrors:
    def test_empty_counts(self):
        with pytest.raises(DataError):
            compute_metrics(ConfusionCounts())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            accumulate_confusion(np.zeros((4, 4), int), np.zeros((4, 5), int))

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            accumulate_confusion(np.full((2, 2), 2), np.zeros((2, 2), int))

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            confusion_over(oracle, [])


class TestEvaluate:
    def test_oracle_model_is_perfect(self, rng):
        report = evaluate(oracle, mask_carrying_samples(rng))
        assert report.miou == 1.0 and report.dice == 1.0 and report.pixel_acc == 1.0

    def test_constant_background_model(self, rng):
        samples = mask_carrying_samples(rng)
        background = sum(int((s.mask == 0).sum()) for s in samples) / sum(s.mask.size for s in samples)
        report = evaluate(all_background, samples)
        assert report.recall == 0.0 and report.iou[1] == 0.0
        assert report.pixel_acc == pytest.approx(background, abs=1e-12)

    def test_batch_size_does_not_matter(self, tiny_model64, synthetic_samples):
        batched = confusion_over(tiny_model64, synthetic_samples, batch_size=4)
        single = confusion_over(tiny_model64, synthetic_samples, batch_size=1)
        np.testing.assert_array_equal(batched.matrix, single.matrix)

    def test_restores_training_mode(self, tiny_model, synthetic_samples):
        tiny_model.train()
        confusion_over(tiny_model, synthetic_samples[:2])
        assert tiny_model.training
