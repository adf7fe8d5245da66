"""Planar primitives (polylines, oriented boxes, discs) and the differentiable
separation margins that all safety constraints are assembled from.

Constraint rows follow one convention throughout: a row ``(normal, offset)``
is satisfied by a point ``p`` iff ``normal . p - offset >= 0``, and the value
of that expression at the row's witness point equals the reported margin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = theta - TWO_PI * math.floor((theta + math.pi) / TWO_PI)
    if w <= -math.pi:
        w += TWO_PI
    return w


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized wrap to (-pi, pi]."""
    w = theta - TWO_PI * np.floor((theta + math.pi) / TWO_PI)
    w[w <= -math.pi] += TWO_PI
    return w


def unit(theta: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta)])


def perp(v: np.ndarray) -> np.ndarray:
    """Rotate a 2-vector by +90 degrees."""
    return np.array([-v[1], v[0]])


@dataclass(frozen=True)
class Pose2:
    """Planar pose; heading is normalized to (-pi, pi] on construction."""

    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


class Provenance(Enum):
    X_AXIS = "x_axis"
    Y_AXIS = "y_axis"
    CORNER = "corner"
    FREE_SPACE_FRONT = "free_space_front"
    FREE_SPACE_REAR = "free_space_rear"
    FREE_SPACE_LEFT = "free_space_left"
    FREE_SPACE_RIGHT = "free_space_right"
    LANE_LEFT = "lane_left"
    LANE_RIGHT = "lane_right"


@dataclass(frozen=True)
class LinearConstraintSet:
    """A family of halfplane rows ``normal . p >= offset`` with a common origin tag."""

    normals: np.ndarray  # (n, 2), unit rows
    offsets: np.ndarray  # (n,)
    provenance_tag: Provenance
    witness_points: np.ndarray | None = None  # (n, 2) generating points, if any

    def __post_init__(self):
        normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        offsets = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        if normals.shape != (offsets.shape[0], 2):
            raise ValueError("normals/offsets shape mismatch")
        norms = np.linalg.norm(normals, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("constraint normals must be unit vectors")
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)

    def margins(self, points: np.ndarray) -> np.ndarray:
        """Row-wise ``normal . p - offset`` for one point or one point per row."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[0] == 1 and len(self.offsets) > 1:
            pts = np.broadcast_to(pts, (len(self.offsets), 2))
        return np.einsum("ij,ij->i", self.normals, pts) - self.offsets

    def satisfied(self, point: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(self.margins(point) >= -tol))


@dataclass(frozen=True)
class Polyline:
    """Ordered waypoints with per-waypoint cumulative arclength."""

    xy: np.ndarray  # (n, 2)
    headings: np.ndarray  # (n,)
    cumulative_arclength: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=float)
        if xy.ndim != 2 or xy.shape[0] < 2 or xy.shape[1] != 2:
            raise ValueError("polyline needs at least 2 planar waypoints")
        if not np.all(np.isfinite(xy)):
            raise ValueError("polyline coordinates must be finite")
        seg = np.diff(xy, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        if np.any(seg_len <= 0.0):
            raise ValueError("polyline arclength must be strictly increasing")
        cum = np.concatenate(([0.0], np.cumsum(seg_len)))
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "headings", np.asarray(self.headings, dtype=float))
        object.__setattr__(self, "cumulative_arclength", cum)

    @classmethod
    def from_points(cls, xy, headings=None) -> "Polyline":
        xy = np.asarray(xy, dtype=float)
        if headings is None:
            seg = np.diff(xy, axis=0)
            hd = np.arctan2(seg[:, 1], seg[:, 0])
            headings = np.concatenate((hd, hd[-1:]))
        return cls(xy=xy, headings=np.asarray(headings, dtype=float))

    @property
    def total_length(self) -> float:
        return float(self.cumulative_arclength[-1])

    def point_at(self, s: float, extrapolate: bool = False) -> tuple[np.ndarray, float]:
        """Position and heading at arclength ``s`` (clamped unless extrapolating)."""
        cum = self.cumulative_arclength
        if extrapolate and s > cum[-1]:
            d = unit(self.headings[-1])
            return self.xy[-1] + (s - cum[-1]) * d, float(self.headings[-1])
        if extrapolate and s < 0.0:
            d = unit(self.headings[0])
            return self.xy[0] + s * d, float(self.headings[0])
        s = min(max(s, 0.0), cum[-1])
        i = int(np.searchsorted(cum, s, side="right") - 1)
        i = min(i, len(cum) - 2)
        t = (s - cum[i]) / (cum[i + 1] - cum[i])
        p = self.xy[i] + t * (self.xy[i + 1] - self.xy[i])
        seg = self.xy[i + 1] - self.xy[i]
        return p, math.atan2(seg[1], seg[0])


@dataclass(frozen=True)
class Projection:
    arclength: float
    signed_lateral: float
    segment_index: int


def project_to_polyline(point, line: Polyline) -> Projection:
    """Globally nearest projection of a point onto a polyline.

    ``signed_lateral`` is positive to the left of the travel direction;
    queries beyond the endpoints clamp to the nearest endpoint.
    """
    p = np.asarray(point, dtype=float)
    a = line.xy[:-1]
    d = line.xy[1:] - a
    seg_len2 = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", p - a, d) / seg_len2, 0.0, 1.0)
    proj = a + t[:, None] * d
    diff = p - proj
    dist2 = np.einsum("ij,ij->i", diff, diff)
    i = int(np.argmin(dist2))
    seg_len = math.sqrt(seg_len2[i])
    du = d[i] / seg_len
    lateral = du[0] * diff[i][1] - du[1] * diff[i][0]
    s = float(line.cumulative_arclength[i] + t[i] * seg_len)
    return Projection(arclength=s, signed_lateral=float(lateral), segment_index=i)


@dataclass(frozen=True)
class OrientedBox:
    center: Pose2
    half_length: float
    half_width: float

    def __post_init__(self):
        if self.half_length <= 0.0 or self.half_width <= 0.0:
            raise ValueError("box half extents must be positive")

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        e_x = unit(self.center.heading)
        return e_x, perp(e_x)

    def corners(self) -> np.ndarray:
        """The 4 corners, counter-clockwise from front-left. Shape (4, 2)."""
        e_x, e_y = self.axes
        c = self.center.xy
        hl, hw = self.half_length, self.half_width
        return np.array(
            [
                c + hl * e_x + hw * e_y,
                c - hl * e_x + hw * e_y,
                c - hl * e_x - hw * e_y,
                c + hl * e_x - hw * e_y,
            ]
        )

    def at_pose(self, x: float, y: float, heading: float) -> "OrientedBox":
        return OrientedBox(Pose2(x, y, heading), self.half_length, self.half_width)


@dataclass(frozen=True)
class Disc:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0.0:
            raise ValueError("disc radius must be positive")

    @property
    def xy(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)


@dataclass(frozen=True)
class BoxDiscResult:
    """Active-case separation between a box and a disc.

    ``margin`` is the exact signed distance between the shapes. ``grad_box``
    is d(margin)/d(box x, y, heading); ``grad_disc`` is d(margin)/d(disc x, y).
    """

    margin: float
    active_case: Provenance
    constraint: LinearConstraintSet
    grad_box: np.ndarray
    grad_disc: np.ndarray


def box_disc_margin(box: OrientedBox, disc: Disc) -> BoxDiscResult:
    """Separation via the maximum of the X-axis, Y-axis and corner cases.

    The corner case only competes when the disc center sits in the diagonal
    quadrant beyond both box extents; with that gating the maximum of the
    three case margins equals the exact signed distance everywhere. Ties are
    broken with fixed priority X_AXIS > Y_AXIS > CORNER.
    """
    e_x, e_y = box.axes
    c_b = box.center.xy
    c_d = disc.xy
    rel = c_d - c_b
    dx = float(e_x @ rel)
    dy = float(e_y @ rel)
    hl, hw, r = box.half_length, box.half_width, disc.radius

    m_x = abs(dx) - hl - r
    m_y = abs(dy) - hw - r
    corner_ok = abs(dx) >= hl and abs(dy) >= hw
    m_c = math.hypot(abs(dx) - hl, abs(dy) - hw) - r if corner_ok else -math.inf

    sx = 1.0 if dx >= 0.0 else -1.0
    sy = 1.0 if dy >= 0.0 else -1.0

    if m_x >= m_y and m_x >= m_c:
        normal = sx * e_x
        offset = float(normal @ c_b) + hl + r
        grad_box = np.array([-normal[0], -normal[1], sx * dy])
        result = (m_x, Provenance.X_AXIS, normal, offset, grad_box, normal)
    elif m_y >= m_c:
        normal = sy * e_y
        offset = float(normal @ c_b) + hw + r
        grad_box = np.array([-normal[0], -normal[1], -sy * dx])
        result = (m_y, Provenance.Y_AXIS, normal, offset, grad_box, normal)
    else:
        q = c_b + sx * hl * e_x + sy * hw * e_y
        u = c_d - q
        dist = float(np.linalg.norm(u))
        if dist < 1e-12:
            normal = (sx * e_x + sy * e_y) / math.sqrt(2.0)
        else:
            normal = u / dist
        offset = float(normal @ q) + r
        dq_dpsi = sx * hl * e_y - sy * hw * e_x
        grad_box = np.array([-normal[0], -normal[1], -float(normal @ dq_dpsi)])
        result = (m_c, Provenance.CORNER, normal, offset, grad_box, normal)

    margin, case, normal, offset, grad_box, grad_disc = result
    constraint = LinearConstraintSet(
        normals=normal[None, :],
        offsets=np.array([offset]),
        provenance_tag=case,
        witness_points=c_d[None, :],
    )
    return BoxDiscResult(
        margin=float(margin),
        active_case=case,
        constraint=constraint,
        grad_box=grad_box,
        grad_disc=np.asarray(grad_disc, dtype=float),
    )


_FREE_SPACE_TAGS = (
    Provenance.FREE_SPACE_FRONT,
    Provenance.FREE_SPACE_REAR,
    Provenance.FREE_SPACE_LEFT,
    Provenance.FREE_SPACE_RIGHT,
)


def box_free_halfspaces(box: OrientedBox, inflation: float = 0.0):
    """The 4 polytopic free spaces around an (optionally inflated) box.

    A point lies outside the inflated box iff it satisfies at least one of
    the returned families.
    """
    if inflation < 0.0:
        raise ValueError("inflation must be nonnegative")
    e_x, e_y = box.axes
    c = box.center.xy
    hl = box.half_length + inflation
    hw = box.half_width + inflation
    families = []
    for normal, extent, tag in (
        (e_x, hl, Provenance.FREE_SPACE_FRONT),
        (-e_x, hl, Provenance.FREE_SPACE_REAR),
        (e_y, hw, Provenance.FREE_SPACE_LEFT),
        (-e_y, hw, Provenance.FREE_SPACE_RIGHT),
    ):
        families.append(
            LinearConstraintSet(
                normals=normal[None, :],
                offsets=np.array([float(normal @ c) + extent]),
                provenance_tag=tag,
            )
        )
    return tuple(families)


@dataclass(frozen=True)
class BoxBoxResult:
    """Directional free-space constraints between two boxes.

    Rows come in two blocks of 5 (direction a->b then b->a): the other box's
    4 corners plus center must lie in the selected free-space family. The
    reported margin is the better of the two directional worst-point margins;
    it is positive iff the boxes are disjoint. ``grad_a[i]``/``grad_b[i]``
    are d(row margin)/d(x, y, heading) of box a / box b for row i.
    """

    margin: float
    constraints: LinearConstraintSet
    row_margins: np.ndarray  # (10,)
    grad_a: np.ndarray  # (10, 3)
    grad_b: np.ndarray  # (10, 3)


def _directional_rows(box_a: OrientedBox, box_b: OrientedBox):
    """Best free-space family of ``box_a`` covering ``box_b``'s 5 test points."""
    e_x, e_y = box_a.axes
    c_a = box_a.center.xy
    c_b = box_b.center.xy
    points = np.vstack([box_b.corners(), c_b[None, :]])

    candidates = (
        (e_x, e_y, box_a.half_length, Provenance.FREE_SPACE_FRONT),
        (-e_x, -e_y, box_a.half_length, Provenance.FREE_SPACE_REAR),
        (e_y, -e_x, box_a.half_width, Provenance.FREE_SPACE_LEFT),
        (-e_y, e_x, box_a.half_width, Provenance.FREE_SPACE_RIGHT),
    )
    best = None
    for normal, dnormal, extent, tag in candidates:
        offset = float(normal @ c_a) + extent
        margins = points @ normal - offset
        worst = float(margins.min())
        if best is None or worst > best[0]:
            best = (worst, normal, dnormal, offset, margins, tag)
    worst, normal, dnormal, offset, margins, tag = best

    grad_a = np.empty((5, 3))
    grad_a[:, 0:2] = -normal
    grad_a[:, 2] = (points - c_a) @ dnormal
    grad_b = np.empty((5, 3))
    grad_b[:, 0:2] = normal
    # corner points rotate with box b's heading; the center does not
    grad_b[:, 2] = np.array([float(normal @ perp(p - c_b)) for p in points])
    normals = np.broadcast_to(normal, (5, 2)).copy()
    offsets = np.full(5, offset)
    return worst, normals, offsets, points, margins, grad_a, grad_b, tag


def box_box_constraints(box_a: OrientedBox, box_b: OrientedBox) -> BoxBoxResult:
    """Linear separation rows between two boxes, both role orders."""
    worst_ab, n_ab, o_ab, p_ab, m_ab, ga_ab, gb_ab, tag_ab = _directional_rows(box_a, box_b)
    worst_ba, n_ba, o_ba, p_ba, m_ba, gb_ba, ga_ba, _ = _directional_rows(box_b, box_a)

    constraints = LinearConstraintSet(
        normals=np.vstack([n_ab, n_ba]),
        offsets=np.concatenate([o_ab, o_ba]),
        provenance_tag=tag_ab,
        witness_points=np.vstack([p_ab, p_ba]),
    )
    return BoxBoxResult(
        margin=float(max(worst_ab, worst_ba)),
        constraints=constraints,
        row_margins=np.concatenate([m_ab, m_ba]),
        grad_a=np.vstack([ga_ab, ga_ba]),
        grad_b=np.vstack([gb_ab, gb_ba]),
    )
