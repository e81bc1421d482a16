import numpy as np
import pytest

from cloudmask.datapipe import Scene, generate_dataset
from cloudmask.evaluator import (
    EvalReport,
    EvaluationError,
    evaluate,
    evaluate_with,
    majority_baseline,
    pixel_accuracy,
    predict_scene,
    threshold_mask,
)
from cloudmask.unet import UNetConfig, build_unet


def test_threshold_is_strict():
    probs = np.array([0.5, np.nextafter(0.5, 1.0), 0.51, 0.49, 0.0, 1.0])
    np.testing.assert_array_equal(threshold_mask(probs), [0, 1, 1, 0, 0, 1])


def test_threshold_float32_half():
    assert threshold_mask(np.float32([0.5]))[0] == 0
    assert threshold_mask(np.float32([np.nextafter(np.float32(0.5), np.float32(1))]))[0] == 1


def test_threshold_rejects_out_of_range():
    for bad in ([1.2], [-0.1], [np.nan]):
        with pytest.raises(EvaluationError):
            threshold_mask(np.array(bad))


def test_pixel_accuracy_cases():
    truth = np.array([[1, 0], [1, 1]])
    assert pixel_accuracy(truth, truth) == 1.0
    assert pixel_accuracy(1 - truth, truth) == 0.0
    assert pixel_accuracy(np.ones((2, 2)), truth) == 0.75


def test_pixel_accuracy_shape_mismatch():
    with pytest.raises(EvaluationError, match="differ"):
        pixel_accuracy(np.ones((2, 2)), np.ones((2, 3)))


def _scenes():
    return generate_dataset(2, 40, 52, seed=11)


def test_constant_half_model_predicts_all_cloudy():
    scenes = _scenes()

    def half(patches):
        return np.full((len(patches),) + patches.shape[2:], 0.5, np.float32)

    report = evaluate_with(half, scenes, patch=16, stride=12)
    for acc, s in zip(report.accuracies, scenes):
        assert acc == pytest.approx(1.0 - s.mask.mean())


def test_perfect_model_gets_full_accuracy():
    def oracle(patches):
        # channel 0 carries the mask itself
        return patches[:, 0]

    for s in _scenes():
        image = s.image.copy()
        image[0] = s.mask.astype(np.float32)
        probs = predict_scene(oracle, image, 16, 12)
        assert pixel_accuracy(threshold_mask(probs), s.mask) == 1.0


def test_report_weights_by_pixels():
    report = EvalReport([1.0, 0.5], [100, 50], [100, 100], [0.1, 0.2])
    assert report.overall_accuracy == 0.75
    assert report.mean_scene_accuracy == 0.75
    uneven = EvalReport([1.0, 0.0], [300, 0], [300, 100], [0.1, 0.1])
    assert uneven.overall_accuracy == 0.75
    assert uneven.mean_scene_accuracy == 0.5
    assert uneven.total_infer_time == pytest.approx(0.2)


def test_batch_size_does_not_change_result():
    scenes = _scenes()
    params = build_unet(UNetConfig(depth=1, base_channels=2, patch_size=16), 0)
    a = evaluate(params, scenes, 16, 12, batch_size=1)
    b = evaluate(params, scenes, 16, 12, batch_size=64)
    assert a.accuracies == b.accuracies


def test_stride_equal_patch_on_divisible_scene():
    scene = generate_dataset(1, 32, 48, seed=3)[0]
    params = build_unet(UNetConfig(depth=1, base_channels=2, patch_size=16), 1)
    a = evaluate(params, [scene], 16, 16)
    b = evaluate(params, [scene], 16, 40)  # step capped at the patch size
    assert a.accuracies == b.accuracies


def test_scene_smaller_than_patch():
    params = build_unet(UNetConfig(depth=1, base_channels=2, patch_size=16), 0)
    tiny = Scene(np.zeros((9, 8, 8), np.float32), np.zeros((8, 8), np.uint8))
    with pytest.raises(EvaluationError, match="smaller"):
        evaluate(params, [tiny], 16, 12)


def test_patch_not_divisible_by_depth():
    params = build_unet(UNetConfig(depth=2, base_channels=2, patch_size=16), 0)
    with pytest.raises(EvaluationError, match="divisible"):
        evaluate(params, _scenes(), 18, 12)


def test_majority_baseline():
    a = Scene(np.zeros((1, 2, 2), np.float32), np.array([[1, 1], [1, 0]], np.uint8))
    b = Scene(np.zeros((1, 2, 2), np.float32), np.array([[0, 0], [0, 0]], np.uint8))
    assert majority_baseline([a]) == 0.75
    assert majority_baseline([a, b]) == 5 / 8


def test_eval_csv(tmp_path):
    report = EvalReport([1.0, 0.5], [4, 2], [4, 4], [0.1, 0.2])
    text = report.write_csv(tmp_path / "eval.csv").read_text().splitlines()
    assert text[0] == "scene_id,accuracy,infer_time_s"
    assert text[1].startswith("0,1.0,")
    assert text[-1].startswith("# overall,0.75,")
