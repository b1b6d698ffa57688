"""Envelope geometry, quasi-random sampling, and uniformity metrics.

The envelope is the hyperrectangle of state/input deviations over which the
downstream models are meant to be valid.  Everything here is pure and
deterministic: the Halton generator is index-based, and the modified-L2
discrepancy is a closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Hyperrectangle",
    "ParameterSet",
    "halton_sample",
    "ml2_discrepancy",
    "normalize_to_unit",
    "denormalize_from_unit",
]

# First 100 primes; one per sampled dimension.
_PRIMES = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67,
    71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149,
    151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229,
    233, 239, 241, 251, 257, 263, 269, 271, 277, 281, 283, 293, 307, 311, 313,
    317, 331, 337, 347, 349, 353, 359, 367, 373, 379, 383, 389, 397, 401, 409,
    419, 421, 431, 433, 439, 443, 449, 457, 461, 463, 467, 479, 487, 491, 499,
    503, 509, 521, 523, 541,
]


@dataclass(frozen=True)
class Hyperrectangle:
    """Axis-aligned box of per-dimension bounds with optional labels."""

    lower: np.ndarray
    upper: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValueError("lower/upper must be 1-D arrays of equal length")
        if np.any(lower > upper):
            bad = int(np.argmax(lower > upper))
            raise ValueError(f"lower[{bad}] > upper[{bad}]")
        labels = tuple(self.labels) if self.labels else tuple(
            f"z{i}" for i in range(lower.size)
        )
        if len(labels) != lower.size:
            raise ValueError("labels length does not match dimension")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, points: np.ndarray, atol: float = 0.0) -> np.ndarray:
        """Boolean mask of which points (rows) lie inside the box."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all(
            (pts >= self.lower - atol) & (pts <= self.upper + atol), axis=1
        )

    def subbox(self, indices) -> "Hyperrectangle":
        idx = list(indices)
        return Hyperrectangle(
            self.lower[idx], self.upper[idx],
            tuple(self.labels[i] for i in idx),
        )


@dataclass(frozen=True)
class ParameterSet:
    """Box bounds on scheduling-parameter values and one-step increments."""

    value_bounds: np.ndarray  # (l, 2) rows [lo, hi]
    rate_bounds: np.ndarray   # (l, 2) rows [lo, hi] on p(k+1) - p(k)

    def __post_init__(self):
        vb = np.atleast_2d(np.asarray(self.value_bounds, dtype=float))
        rb = np.atleast_2d(np.asarray(self.rate_bounds, dtype=float))
        if vb.shape != rb.shape or vb.shape[1] != 2:
            raise ValueError("value/rate bounds must both be (l, 2)")
        if np.any(vb[:, 0] > vb[:, 1]) or np.any(rb[:, 0] > rb[:, 1]):
            raise ValueError("bound rows must satisfy lo <= hi")
        widths = vb[:, 1] - vb[:, 0]
        if np.any(np.abs(rb) > widths[:, None] + 1e-12):
            raise ValueError("rate bound magnitude exceeds value range")
        object.__setattr__(self, "value_bounds", vb)
        object.__setattr__(self, "rate_bounds", rb)

    @property
    def size(self) -> int:
        return self.value_bounds.shape[0]

    @classmethod
    def from_box(cls, box: Hyperrectangle, indices) -> "ParameterSet":
        """Parameter set for coordinates of an envelope; trivial rate bounds."""
        idx = list(indices)
        vb = np.column_stack([box.lower[idx], box.upper[idx]])
        w = vb[:, 1] - vb[:, 0]
        rb = np.column_stack([-w, w])
        return cls(vb, rb)


def _radical_inverse(index: int, base: int) -> float:
    inv = 0.0
    denom = 1.0
    while index > 0:
        index, digit = divmod(index, base)
        denom *= base
        inv += digit / denom
    return inv


def halton_sample(
    dim: int,
    count: int,
    box: Hyperrectangle | None = None,
    skip: int = 1,
) -> np.ndarray:
    """Deterministic Halton points, mapped into `box`.

    Dimension i uses the i-th prime as radical-inverse base.  `skip` drops the
    leading sequence entries; the default of 1 discards the all-zero point.

    Returns an array of shape (count, dim).
    """
    if dim < 1 or count < 1 or skip < 0:
        raise ValueError("need dim >= 1, count >= 1, skip >= 0")
    if dim > len(_PRIMES):
        raise ValueError(
            f"unsupported dimension {dim}: prime table holds {len(_PRIMES)}"
        )
    if box is not None and box.dim != dim:
        raise ValueError("box dimension does not match dim")
    unit = np.empty((count, dim))
    for j in range(dim):
        base = _PRIMES[j]
        unit[:, j] = [_radical_inverse(skip + i, base) for i in range(count)]
    if box is None:
        return unit
    return box.lower + unit * box.widths


def ml2_discrepancy(points: np.ndarray) -> float:
    """Modified L2-star discrepancy of a point set in the unit cube.

    Closed form:
        D^2 = (4/3)^d - (2/N) sum_i prod_k (3 - x_ik^2)/2
              + (1/N^2) sum_{i,j} prod_k (2 - max(x_ik, x_jk))
    with the result clamped at zero before the square root to absorb round-off.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise ValueError("need at least one point")
    if np.any(pts < 0.0) or np.any(pts > 1.0):
        raise ValueError("coordinates must lie in [0, 1]")
    n, d = pts.shape
    term1 = (4.0 / 3.0) ** d
    term2 = np.prod((3.0 - pts**2) / 2.0, axis=1).sum() * (2.0 / n)
    pairwise = np.prod(2.0 - np.maximum(pts[:, None, :], pts[None, :, :]), axis=2)
    term3 = pairwise.sum() / n**2
    return float(np.sqrt(max(term1 - term2 + term3, 0.0)))


def normalize_to_unit(points: np.ndarray, box: Hyperrectangle) -> np.ndarray:
    """Affine map of points in `box` onto the unit cube."""
    widths = box.widths
    if np.any(widths <= 0.0):
        bad = int(np.argmax(widths <= 0.0))
        raise ValueError(f"degenerate (zero-width) dimension {bad}")
    pts = np.asarray(points, dtype=float)
    return (pts - box.lower) / widths


def denormalize_from_unit(points: np.ndarray, box: Hyperrectangle) -> np.ndarray:
    """Inverse of :func:`normalize_to_unit`."""
    return box.lower + np.asarray(points, dtype=float) * box.widths
