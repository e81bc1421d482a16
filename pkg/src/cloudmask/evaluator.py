"""Full-scene inference: overlapping patches -> U-Net -> averaged probabilities
-> threshold -> pixel accuracy against the uncropped ground truth."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datapipe import Scene, extract_test_patches, reconstruct
from .ndtensor import Tensor, no_grad
from .unet import ModelParams, unet_forward

THRESHOLD = 0.5


class EvaluationError(ValueError):
    pass


@dataclass
class EvalReport:
    accuracies: list[float]
    correct: list[int]
    pixels: list[int]
    infer_times: list[float]
    threshold: float = THRESHOLD

    @property
    def overall_accuracy(self) -> float:
        """Pixel-weighted accuracy over every test pixel."""
        return sum(self.correct) / sum(self.pixels)

    @property
    def mean_scene_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def total_infer_time(self) -> float:
        return sum(self.infer_times)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scene_id", "accuracy", "infer_time_s"])
            for i, (acc, t) in enumerate(zip(self.accuracies, self.infer_times)):
                w.writerow([i, repr(acc), f"{t:.6f}"])
            w.writerow([
                "# overall", repr(self.overall_accuracy),
                f"{self.total_infer_time:.6f}",
            ])
        return path


def threshold_mask(probs, threshold: float = THRESHOLD) -> np.ndarray:
    """Clear-sky (1) where p > threshold strictly, cloudy (0) otherwise."""
    p = np.asarray(probs)
    if p.size and (np.isnan(p).any() or p.min() < 0.0 or p.max() > 1.0):
        raise EvaluationError("probabilities must lie in [0, 1]")
    return (p > threshold).astype(np.uint8)


def pixel_accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise EvaluationError(f"prediction {pred.shape} and truth {truth.shape} differ in size")
    return float((pred == truth).sum()) / pred.size


def predict_patches(params: ModelParams, patches: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(patches), batch_size):
            out.append(unet_forward(params, Tensor(patches[start:start + batch_size])).data[:, 0])
    return np.concatenate(out)


def predict_scene(
    predict: Callable[[np.ndarray], np.ndarray], image: np.ndarray, patch: int, stride: int
) -> np.ndarray:
    """Full-extent probability map from any batch predictor (N, C, P, P) -> (N, P, P)."""
    patches, grid = extract_test_patches(image, patch, stride)
    return reconstruct(predict(patches), grid)


def evaluate(
    params: ModelParams,
    scenes: Sequence[Scene],
    patch: int,
    stride: int,
    batch_size: int = 32,
    threshold: float = THRESHOLD,
) -> EvalReport:
    step = 2 ** params.config.depth
    if patch % step:
        raise EvaluationError(f"patch {patch} not divisible by 2**depth = {step}")

    def predict(patches):
        return predict_patches(params, patches, batch_size)

    return evaluate_with(predict, scenes, patch, stride, threshold)


def evaluate_with(predict, scenes: Sequence[Scene], patch: int, stride: int, threshold: float = THRESHOLD) -> EvalReport:
    accs, correct, pixels, times = [], [], [], []
    for k, scene in enumerate(scenes):
        if scene.height < patch or scene.width < patch:
            raise EvaluationError(
                f"scene {k} ({scene.height}x{scene.width}) is smaller than patch {patch}"
            )
        t0 = time.perf_counter()
        probs = predict_scene(predict, scene.image, patch, stride)
        pred = threshold_mask(probs, threshold)
        times.append(time.perf_counter() - t0)
        hits = int((pred == scene.mask).sum())
        correct.append(hits)
        pixels.append(scene.mask.size)
        accs.append(hits / scene.mask.size)
    return EvalReport(accs, correct, pixels, times, threshold)


def majority_baseline(scenes: Sequence[Scene]) -> float:
    """Accuracy of predicting the more common label everywhere."""
    clear = sum(int(s.mask.sum()) for s in scenes)
    total = sum(s.mask.size for s in scenes)
    return max(clear, total - clear) / total
