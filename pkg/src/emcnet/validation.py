"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .imaging import Image, ensure_rgb, resize_bilinear
from .rng import substream


def check_image_batch(X, image_side: int | None = None) -> list[Image]:
    """Coerce a batch of images into RGB float64 :class:`Image` objects.

    Accepts an (n, H, W), (n, H, W, 1) or (n, H, W, 3) array, or a sequence
    of :class:`Image` / 2-D / 3-D arrays. uint8 input is scaled by 1/255;
    float input outside [0, 1] is min-max rescaled per image. With
    ``image_side`` set, every image is bilinearly resized to that square.
    """
    if isinstance(X, np.ndarray):
        if X.ndim == 3:
            items = [X[i] for i in range(X.shape[0])]
        elif X.ndim == 4:
            items = [X[i] for i in range(X.shape[0])]
        else:
            raise DimensionError(f"expected (n, H, W[, C]) image array, got shape {X.shape}")
    elif hasattr(X, "__len__"):
        items = list(X)
    else:
        raise DimensionError(f"cannot interpret {type(X).__name__} as an image batch")
    if len(items) == 0:
        raise DimensionError("empty image batch")

    images = []
    for item in items:
        if isinstance(item, Image):
            img = item
        else:
            arr = np.asarray(item)
            if arr.dtype == np.uint8:
                arr = arr.astype(np.float64) / 255.0
            else:
                arr = arr.astype(np.float64)
                if not np.all(np.isfinite(arr)):
                    raise DimensionError("image contains non-finite values")
                lo, hi = arr.min(), arr.max()
                if lo < 0.0 or hi > 1.0:
                    arr = (arr - lo) / (hi - lo) if hi > lo else np.clip(arr, 0.0, 1.0)
            img = Image(arr)
        img = ensure_rgb(img)
        if image_side is not None and (img.height, img.width) != (image_side, image_side):
            img = resize_bilinear(img, image_side, image_side)
        images.append(img)
    return images


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise DimensionError(f"labels of shape {y.shape} do not match {n_samples} samples")
    return y


def stratified_holdout(labels: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class deterministic split; the holdout may be empty for tiny classes."""
    rng = substream(seed, "holdout")
    train, held = [], []
    for c in np.unique(labels):
        members = np.nonzero(labels == c)[0]
        members = members[rng.permutation(len(members))]
        n_held = int(np.floor(fraction * len(members)))
        held.extend(members[:n_held].tolist())
        train.extend(members[n_held:].tolist())
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(held, dtype=int))
