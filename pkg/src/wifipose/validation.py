"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .errors import DataError


def check_csi(X, expected_shape=None) -> np.ndarray:
    """Validate a batch of CSI samples shaped (N, E, R, A, S, T) and return float32."""
    X = np.asarray(X)
    if X.ndim == 5:
        X = X[None]
    if X.ndim != 6:
        raise DataError(f"CSI input must be (N, E, R, A, S, T), got shape {X.shape}")
    if X.shape[0] == 0:
        raise DataError("CSI input is empty")
    if not np.issubdtype(X.dtype, np.number):
        raise DataError(f"CSI input must be numeric, got dtype {X.dtype}")
    if not np.all(np.isfinite(X)):
        raise DataError("CSI input contains non-finite values")
    if expected_shape is not None and tuple(X.shape[1:]) != tuple(expected_shape):
        raise DataError(f"CSI sample shape {X.shape[1:]} != fitted shape {tuple(expected_shape)}")
    return X.astype(np.float32, copy=False)


def check_poses(Y, n_samples: int, n_joints: int | None = None) -> np.ndarray:
    """Validate poses shaped (N, J, C) or (N, 1, J, C); returns (N, J, C) float32."""
    Y = np.asarray(Y)
    if Y.ndim == 4:
        if Y.shape[1] != 1:
            raise DataError(f"only one person per frame is supported, got M={Y.shape[1]}")
        Y = Y[:, 0]
    if Y.ndim != 3:
        raise DataError(f"poses must be (N, J, C) or (N, 1, J, C), got shape {Y.shape}")
    if Y.shape[0] != n_samples:
        raise DataError(f"{Y.shape[0]} poses for {n_samples} CSI samples")
    if Y.shape[2] not in (2, 3):
        raise DataError(f"pose coordinates must be 2-D or 3-D, got C={Y.shape[2]}")
    if n_joints is not None and Y.shape[1] != n_joints:
        raise DataError(f"poses have {Y.shape[1]} joints, skeleton has {n_joints}")
    if not np.all(np.isfinite(Y)):
        raise DataError("poses contain non-finite values")
    return Y.astype(np.float32, copy=False)


def check_groups(groups, n_samples: int, frame_index=None) -> tuple[np.ndarray, np.ndarray]:
    """Sequence ids and within-sequence frame indices for N samples.

    Without ``groups`` every sample belongs to one sequence in storage order.
    Without ``frame_index`` frames count up from 0 inside each run of equal ids.
    """
    if groups is None:
        groups = np.zeros(n_samples, dtype=np.int64)
    groups = np.asarray(groups).astype(np.int64)
    if groups.shape != (n_samples,):
        raise DataError(f"groups must have shape ({n_samples},), got {groups.shape}")
    if frame_index is None:
        frame_index = np.zeros(n_samples, dtype=np.int64)
        for i in range(1, n_samples):
            frame_index[i] = frame_index[i - 1] + 1 if groups[i] == groups[i - 1] else 0
    frame_index = np.asarray(frame_index).astype(np.int64)
    if frame_index.shape != (n_samples,):
        raise DataError(f"frame_index must have shape ({n_samples},), got {frame_index.shape}")
    return groups, frame_index


def check_is_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit first")
