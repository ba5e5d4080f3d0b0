"""Elementary fuzzy-set machinery: membership degrees and 2-D membership fields."""

from __future__ import annotations

import numpy as np

# Numeric dilation kernels overshoot the unit interval by epsilon; anything
# further out is a real error, not round-off.
DEGREE_SLACK = 1e-9


def clamp_degree(value) -> float:
    """Validate a membership degree, folding epsilon overshoot back into [0, 1]."""
    v = float(value)
    if v < -DEGREE_SLACK or v > 1.0 + DEGREE_SLACK:
        raise ValueError(f"membership degree {v!r} outside [0, 1]")
    return min(1.0, max(0.0, v))


class ScalarField:
    """Immutable 2-D grid of membership degrees in [0, 1].

    Stored dense and row-major; images here are small (<= 512 squared) and
    dilation touches most pixels, so sparsity would not pay off.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"field must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"field dimensions must be positive, got {arr.shape}")
        out_of_range = (arr < -DEGREE_SLACK) | (arr > 1.0 + DEGREE_SLACK)
        if out_of_range.any():
            bad = float(arr[out_of_range][0])
            raise ValueError(f"field entry {bad!r} outside [0, 1]")
        np.clip(arr, 0.0, 1.0, out=arr)
        arr.setflags(write=False)
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ScalarField):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"ScalarField({self.width}x{self.height})"


def aggregate_min(degrees) -> float:
    """Minimum t-norm over a non-empty sequence of degrees."""
    values = [clamp_degree(d) for d in degrees]
    if not values:
        raise ValueError("empty aggregation")
    return min(values)


def field_sum(field: ScalarField) -> float:
    """Sum of all entries; 0 iff the field is all-zero."""
    return float(field.data.sum())


def alpha_cut(field: ScalarField, alpha) -> ScalarField:
    """Binary mask of entries >= alpha, for alpha in (0, 1]."""
    a = clamp_degree(alpha)
    if a <= 0.0:
        raise ValueError("alpha-cut at 0 would be the whole space")
    return ScalarField((field.data >= a).astype(np.float64))
