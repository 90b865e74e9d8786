"""Confusion-matrix accounting, agreement metrics, and difference maps.

The confusion matrix is a (C, C) int64 array with reference classes on rows
and predicted classes on columns; accumulation only counts pixels flagged
valid. Metrics: Cohen's kappa, per-class producer's accuracy (recall,
diagonal over row sum), per-class user's accuracy (precision, diagonal over
column sum), and their unweighted macro means over classes with a nonzero
denominator.
"""

import csv

import numpy as np

from .errors import DataError, DimensionError, MetricError

DIFF_AGREE = 0
DIFF_DISAGREE = 1
DIFF_INVALID = 255

#: Display colors, one per class index: "other" black, corn yellow, soybean green.
CLASS_COLORS = ((0, 0, 0), (230, 200, 0), (0, 160, 0))
INVALID_COLOR = (128, 128, 128)


def new_confusion(num_classes):
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm, predicted, reference, valid):
    """Count valid pixels into cm (rows: reference, cols: predicted)."""
    predicted = np.asarray(predicted)
    reference = np.asarray(reference)
    valid = np.asarray(valid, dtype=bool)
    if not (predicted.shape == reference.shape == valid.shape):
        raise DimensionError(
            f"raster shapes disagree: prediction {predicted.shape}, "
            f"reference {reference.shape}, mask {valid.shape}"
        )
    c = cm.shape[0]
    p = predicted[valid]
    r = reference[valid]
    if p.size:
        if p.min() < 0 or p.max() >= c or r.min() < 0 or r.max() >= c:
            raise DataError(f"class indices must lie in [0, {c})")
        np.add.at(cm, (r, p), 1)
    return cm


def kappa(cm):
    """Chance-corrected agreement (p_o - p_e) / (1 - p_e).

    Degenerate case p_e == 1 (all mass concentrated so agreement by chance
    is certain) is defined as 1.0 when observed agreement is also perfect,
    else 0.0.
    """
    total = int(cm.sum())
    if total <= 0:
        raise DataError("confusion matrix is empty")
    po = float(np.trace(cm)) / total
    rows = cm.sum(axis=1).astype(np.float64)
    cols = cm.sum(axis=0).astype(np.float64)
    pe = float((rows * cols).sum()) / total**2
    if pe >= 1.0:
        return 1.0 if po == 1.0 else 0.0
    return (po - pe) / (1.0 - pe)


def class_accuracies(cm):
    """Per-class (producers, users) with NaN where the denominator is zero."""
    diag = np.diag(cm).astype(np.float64)
    rows = cm.sum(axis=1).astype(np.float64)
    cols = cm.sum(axis=0).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        producers = np.where(rows > 0, diag / np.where(rows > 0, rows, 1), np.nan)
        users = np.where(cols > 0, diag / np.where(cols > 0, cols, 1), np.nan)
    return producers, users


def _macro(values, what):
    present = ~np.isnan(values)
    if not present.any():
        raise MetricError(f"no class has a nonzero denominator for {what}")
    return float(values[present].mean())


def macro_producers_accuracy(cm):
    producers, _ = class_accuracies(cm)
    return _macro(producers, "producer's accuracy")


def macro_users_accuracy(cm):
    _, users = class_accuracies(cm)
    return _macro(users, "user's accuracy")


def difference_map(predicted, reference, valid):
    """Per-pixel agreement raster: 0 agree, 1 disagree, 255 invalid."""
    predicted = np.asarray(predicted)
    reference = np.asarray(reference)
    valid = np.asarray(valid, dtype=bool)
    if not (predicted.shape == reference.shape == valid.shape):
        raise DimensionError("difference map inputs must share one shape")
    out = np.full(predicted.shape, DIFF_INVALID, dtype=np.uint8)
    out[valid & (predicted == reference)] = DIFF_AGREE
    out[valid & (predicted != reference)] = DIFF_DISAGREE
    return out


def write_metrics_csv(path, cm, class_names=None):
    """Metrics report: per-class PA/UA and counts, macro means, kappa."""
    c = cm.shape[0]
    names = class_names or [f"class{i}" for i in range(c)]
    producers, users = class_accuracies(cm)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "class", "value"])
        for i in range(c):
            w.writerow(["producers_accuracy", names[i],
                        "" if np.isnan(producers[i]) else f"{producers[i]:.9f}"])
            w.writerow(["users_accuracy", names[i],
                        "" if np.isnan(users[i]) else f"{users[i]:.9f}"])
            w.writerow(["reference_pixels", names[i], int(cm[i].sum())])
            w.writerow(["predicted_pixels", names[i], int(cm[:, i].sum())])
        w.writerow(["macro_producers_accuracy", "", f"{macro_producers_accuracy(cm):.9f}"])
        w.writerow(["macro_users_accuracy", "", f"{macro_users_accuracy(cm):.9f}"])
        w.writerow(["kappa", "", f"{kappa(cm):.9f}"])
        w.writerow(["valid_pixels", "", int(cm.sum())])


def render_class_map_ppm(path, classes, valid=None):
    """Binary PPM (P6) rendering of a class raster with the fixed palette."""
    classes = np.asarray(classes)
    h, w = classes.shape
    palette = np.array(CLASS_COLORS, dtype=np.uint8)
    if classes.max(initial=0) >= len(palette):
        raise DataError(f"no display color for class {int(classes.max())}")
    img = palette[classes]
    if valid is not None:
        img[~np.asarray(valid, dtype=bool)] = INVALID_COLOR
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def render_difference_ppm(path, diff):
    """Difference raster rendering: agree white, disagree red, invalid gray."""
    diff = np.asarray(diff)
    h, w = diff.shape
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[diff == DIFF_AGREE] = (255, 255, 255)
    img[diff == DIFF_DISAGREE] = (200, 30, 30)
    img[diff == DIFF_INVALID] = INVALID_COLOR
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())
