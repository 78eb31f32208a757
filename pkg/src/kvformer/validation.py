"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_sequences(X, vocab_size: int | None = None, name: str = "X") -> np.ndarray:
    """Validate a 2-D array of non-negative integer token ids."""
    arr = check_array(X, dtype=None, ensure_2d=True, input_name=name)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise ValueError(f"{name} must contain integer token ids")
        arr = arr.astype(np.int64)
    arr = arr.astype(np.int64, copy=False)
    if arr.min() < 0:
        raise ValueError(f"{name} contains negative token ids")
    if vocab_size is not None and arr.max() >= vocab_size:
        raise ValueError(f"{name} contains token id {arr.max()} >= vocab_size {vocab_size}")
    return arr


def check_text(text) -> str:
    if not isinstance(text, str):
        raise TypeError(f"expected a string, got {type(text).__name__}")
    if not text:
        raise ValueError("text is empty")
    return text
