"""Discrete candidate grid of open-loop power-control parameters.

A candidate is a pair ``(p0_dbm, alpha)``: the nominal received power
target in dBm and the fractional path-loss compensation factor. The
benchmark grid is the full cross product of

* ``p0_dbm`` in {-202, -200, ..., +22, +24}  (114 values, 2 dB steps)
* ``alpha``  in {0, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0}  (8 values)

for 912 candidates total. Surrogate models consume the affinely
rescaled ``normalized`` coordinates in [0, 1]^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

P0_MIN_DBM = -202.0
P0_MAX_DBM = 24.0
P0_STEP_DB = 2.0
ALPHA_VALUES = (0.0, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


@dataclass(frozen=True)
class InputPoint:
    """One power-control candidate with its normalized coordinates."""

    p0_dbm: float
    alpha: float
    normalized: tuple[float, float]

    def __post_init__(self) -> None:
        u, v = self.normalized
        if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
            raise ValueError(f"normalized coordinates outside [0,1]^2: {self.normalized}")


def normalize(p0_dbm: float, alpha: float,
              p0_min: float = P0_MIN_DBM, p0_max: float = P0_MAX_DBM,
              alpha_min: float = 0.0, alpha_max: float = 1.0) -> tuple[float, float]:
    """Affinely rescale (p0, alpha) into [0,1]^2 by the grid bounds."""
    return ((p0_dbm - p0_min) / (p0_max - p0_min),
            (alpha - alpha_min) / (alpha_max - alpha_min))


def make_point(p0_dbm: float, alpha: float, **bounds) -> InputPoint:
    return InputPoint(p0_dbm, alpha, normalize(p0_dbm, alpha, **bounds))


@dataclass(frozen=True)
class CandidateGrid:
    """Ordered candidate set plus a matrix view of normalized coordinates.

    Order is p0-major: all alphas for the smallest p0 first. ``normalized``
    has shape (n, 2) and row i corresponds to ``points[i]``.
    """

    points: tuple[InputPoint, ...]
    normalized: np.ndarray = field(repr=False)
    _lookup: dict = field(repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i: int) -> InputPoint:
        return self.points[i]

    def index_of(self, point: InputPoint) -> int:
        try:
            return self._lookup[(point.p0_dbm, point.alpha)]
        except KeyError:
            raise KeyError(f"point not on grid: {point}") from None


def default_p0_values() -> np.ndarray:
    n = int(round((P0_MAX_DBM - P0_MIN_DBM) / P0_STEP_DB)) + 1
    return P0_MIN_DBM + P0_STEP_DB * np.arange(n)


def build_grid(p0_values=None, alpha_values=ALPHA_VALUES) -> CandidateGrid:
    """Build the candidate grid (full benchmark cross product by default)."""
    if p0_values is None:
        p0_values = default_p0_values()
    p0_values = np.asarray(p0_values, dtype=float)
    alpha_values = np.asarray(alpha_values, dtype=float)
    p0_min, p0_max = p0_values.min(), p0_values.max()
    a_min, a_max = alpha_values.min(), alpha_values.max()
    if a_max == a_min:
        a_max = a_min + 1.0  # degenerate single-alpha grids normalize to 0
    points = []
    coords = []
    for p0 in p0_values:
        for a in alpha_values:
            z = normalize(p0, a, p0_min, p0_max, a_min, a_max)
            points.append(InputPoint(float(p0), float(a), z))
            coords.append(z)
    lookup = {(p.p0_dbm, p.alpha): i for i, p in enumerate(points)}
    if len(lookup) != len(points):
        raise ValueError("candidate grid contains duplicates")
    return CandidateGrid(tuple(points), np.asarray(coords, dtype=float), lookup)
