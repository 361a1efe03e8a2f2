"""Multi-focal prefusion: average per-plane features over the plane axis."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from edk.frame_encoder import FocalFeatureStack


def fuse(stack: FocalFeatureStack | np.ndarray) -> np.ndarray:
    """Plane-wise mean of an ``N x T x D`` stack, returned as ``T x D``.

    The sum is accumulated in float64 with the planes sorted elementwise, so
    the result does not depend on plane order, then cast back to the input
    precision. ``N == 1`` returns the single plane unchanged.
    """
    data = stack.data if isinstance(stack, FocalFeatureStack) else np.asarray(stack)
    if data.ndim != 3 or data.shape[0] == 0:
        raise ValueError("fuse needs a non-empty N x T x D stack")
    out_dtype = data.dtype if np.issubdtype(data.dtype, np.floating) else np.float64
    if data.shape[0] == 1:
        return data[0].astype(out_dtype, copy=True)
    acc = np.sort(data.astype(np.float64), axis=0).sum(axis=0) / data.shape[0]
    out = acc.astype(out_dtype)
    # rounding can push the mean one ulp outside the input range
    return np.clip(out, data.min(axis=0), data.max(axis=0))


def symmetric_planes(N: int, central: int, k: int) -> list[int]:
    """Indices of ``k`` planes chosen symmetrically around ``central``.

    Odd ``k`` is centred exactly; even ``k`` takes the extra plane below.
    """
    if not 1 <= k <= N:
        raise ValueError(f"cannot select {k} of {N} planes")
    lo = central - k // 2
    lo = min(max(lo, 0), N - k)
    return list(range(lo, lo + k))


def select_planes(stack: FocalFeatureStack, indices: Sequence[int]) -> FocalFeatureStack:
    idx = list(indices)
    if not idx:
        raise ValueError("empty plane selection")
    return FocalFeatureStack(stack.data[idx], stack.vocab, stack.labels)
