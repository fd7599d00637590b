"""Input checks for image stacks and multimodal inputs."""
from typing import Dict, Mapping, Sequence

import numpy as np

from .tensor import DimensionError


def check_images(X, name="X", dtype=np.float64) -> np.ndarray:
    """Return X as a finite (N, C, H, W) array; (N, H, W) gains a channel axis."""
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise DimensionError(f"{name}: expected (N, C, H, W) images, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name}: no samples")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name}: contains NaN or inf")
    return X


def check_multimodal(X, modalities: Sequence[str] = None, dtype=np.float64) -> Dict[str, np.ndarray]:
    """Accept a mapping modality -> images, or a sequence in ``modalities`` order."""
    if isinstance(X, Mapping):
        keys = list(modalities) if modalities is not None else list(X)
        missing = [m for m in keys if m not in X]
        if missing:
            raise ValueError(f"missing modalities {missing}")
        out = {m: check_images(X[m], m, dtype) for m in keys}
    else:
        if modalities is None:
            raise ValueError("modalities must be given when X is a sequence")
        if len(X) != len(modalities):
            raise ValueError(f"expected {len(modalities)} modality arrays, got {len(X)}")
        out = {m: check_images(x, m, dtype) for m, x in zip(modalities, X)}
    sizes = {m: len(v) for m, v in out.items()}
    if len(set(sizes.values())) != 1:
        raise DimensionError(f"modalities disagree on sample count: {sizes}")
    return out


def n_samples(X) -> int:
    if isinstance(X, Mapping):
        return len(next(iter(X.values())))
    return len(X)
