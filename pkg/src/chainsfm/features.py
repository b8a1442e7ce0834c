"""Matched observations across two or three views."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Segment2


@dataclass(frozen=True)
class LineMatch2V:
    """A line segment matched between two cameras.

    Each side carries the detected segment together with its normalized
    supporting line; `pair` holds the two camera indices in chain order.
    """

    pair: tuple[int, int]
    seg_i: Segment2
    seg_j: Segment2
    match_id: tuple[int, int] = (-1, -1)  # (segment id in i, segment id in j)

    @property
    def line_i(self) -> np.ndarray:
        return self.seg_i.line

    @property
    def line_j(self) -> np.ndarray:
        return self.seg_j.line


@dataclass(frozen=True)
class PointTriplet:
    """A point tracked across three consecutive cameras."""

    cameras: tuple[int, int, int]
    px: np.ndarray        # (3, 2) pixel observations
    normalized: np.ndarray  # (3, 3) homogeneous normalized observations
    track_id: int = -1
    feature_ids: tuple[int, int, int] = (-1, -1, -1)  # per-camera ids

    def __post_init__(self):
        object.__setattr__(self, "px", np.asarray(self.px, dtype=float))
        object.__setattr__(self, "normalized",
                           np.asarray(self.normalized, dtype=float))


@dataclass(frozen=True)
class LineTriplet:
    """A line segment tracked across three consecutive cameras."""

    cameras: tuple[int, int, int]
    segs: tuple[Segment2, Segment2, Segment2]
    track_id: int = -1
    feature_ids: tuple[int, int, int] = (-1, -1, -1)  # per-camera ids

    @property
    def lines(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(s.line for s in self.segs)


@dataclass(frozen=True)
class CoplanarPairHypothesis:
    """Two bifocal line matches sharing the middle camera, hypothesized
    to lie in one 3D plane: `la` seen in cameras 1-2, `lb` in cameras 2-3."""

    la: LineMatch2V
    lb: LineMatch2V


@dataclass(frozen=True)
class ScaleHypothesis:
    """A candidate baseline ratio with its provenance.

    Coplanar-pair provenance carries the ratio of the two baselines sharing
    camera 2; trifocal provenance carries the symmetrized ratio."""

    ratio: float
    provenance: str  # one of {"coplanar-pair", "trifocal-point", "trifocal-line"}
    feature_index: int = -1

    def __post_init__(self):
        if not np.isfinite(self.ratio) or self.ratio == 0.0:
            raise ValueError("scale ratio must be finite and nonzero")
        if self.provenance not in (
                "coplanar-pair", "trifocal-point", "trifocal-line"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
