"""Segmentation/depth metrics and test-time protocols (sliding window, flip)."""

import warnings

import numpy as np

from .errors import ConfigError


class ConfusionState:
    """Pixel-count confusion matrix plus per-class intersection/union sums."""

    def __init__(self, num_classes, ignore_index=255):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, gt, pred):
        gt = np.asarray(gt).ravel()
        pred = np.asarray(pred).ravel()
        keep = gt != self.ignore_index
        gt, pred = gt[keep], pred[keep]
        idx = gt * self.num_classes + pred
        counts = np.bincount(idx, minlength=self.num_classes**2)
        self.matrix += counts.reshape(self.num_classes, self.num_classes)

    def merge(self, other):
        self.matrix += other.matrix

    @property
    def total(self):
        return int(self.matrix.sum())

    def intersections(self):
        return np.diag(self.matrix).astype(np.float64)

    def unions(self):
        inter = np.diag(self.matrix)
        return (self.matrix.sum(axis=0) + self.matrix.sum(axis=1) - inter).astype(np.float64)


def miou(conf: ConfusionState) -> float:
    """Mean over classes of intersection/union; classes never seen are skipped."""
    if conf.total == 0:
        warnings.warn("miou: no scored pixels")
        return float("nan")
    inter, union = conf.intersections(), conf.unions()
    present = union > 0
    return float((inter[present] / union[present]).mean())


def oiou(intersections, unions) -> float:
    """Dataset-pooled IoU: sum of intersections over sum of unions."""
    total_union = float(np.sum(unions))
    if total_union == 0:
        warnings.warn("oiou: no scored pixels")
        return float("nan")
    return float(np.sum(intersections) / total_union)


def depth_metrics(pred, gt, mask=None) -> dict:
    """RMSE, REL, log10 error and the three ratio-threshold accuracies."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if mask is None:
        mask = np.ones_like(gt, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    names = ("rmse", "rel", "log10", "delta1", "delta2", "delta3")
    if not mask.any():
        warnings.warn("depth_metrics: empty mask")
        return {k: float("nan") for k in names}
    p, g = pred[mask], gt[mask]
    ratio = np.maximum(p / g, g / p)
    return {
        "rmse": float(np.sqrt(np.mean((p - g) ** 2))),
        "rel": float(np.mean(np.abs(p - g) / g)),
        "log10": float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        "delta1": float(np.mean(ratio < 1.25)),
        "delta2": float(np.mean(ratio < 1.25**2)),
        "delta3": float(np.mean(ratio < 1.25**3)),
    }


def window_starts(length, crop, stride):
    """Window origins covering [0, length) with a final snapped window."""
    starts = list(range(0, length - crop + 1, stride))
    if starts[-1] + crop < length:
        starts.append(length - crop)
    return starts


def slide_inference(predict, image, crop, stride):
    """Accumulate window predictions and divide by per-pixel coverage.

    ``predict`` maps a (C, crop, crop) window to a (K, crop, crop) output.
    Returns (output, coverage_counts).
    """
    channels, h, w = image.shape
    if crop > h or crop > w:
        raise ConfigError(f"slide_inference: crop {crop} larger than image {h}x{w}")
    if stride > crop:
        raise ConfigError(f"slide_inference: stride {stride} exceeds crop {crop}")
    out = None
    counts = np.zeros((h, w), dtype=np.float32)
    for y in window_starts(h, crop, stride):
        for x in window_starts(w, crop, stride):
            window = image[:, y : y + crop, x : x + crop]
            pred = predict(window)
            if out is None:
                out = np.zeros((pred.shape[0], h, w), dtype=np.float64)
            out[:, y : y + crop, x : x + crop] += pred
            counts[y : y + crop, x : x + crop] += 1.0
    return (out / counts).astype(np.float32), counts


def flip_average(predict, image):
    """Average a prediction with the un-flipped prediction of the mirrored input."""
    straight = predict(image)
    flipped = predict(np.ascontiguousarray(image[..., ::-1]))
    return 0.5 * (straight + flipped[..., ::-1])
