"""Visual receding-horizon planner: primitives, image projection, SEDF and cost-based selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffcore import ConfigError, UsageError
from .losses import ValidationError


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    psi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    def compose(self, other: "Pose2") -> "Pose2":
        """``self * other``: express a robot-frame pose in the frame of ``self``."""
        c, s = math.cos(self.psi), math.sin(self.psi)
        return Pose2(self.x + c * other.x - s * other.y, self.y + s * other.x + c * other.y,
                     self.psi + other.psi)

    def distance(self, other: "Pose2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi])


@dataclass(frozen=True)
class Primitive:
    v: float
    omega: float
    T: float
    poses: np.ndarray          # (m, 3) robot-frame x, y, psi

    @property
    def m(self) -> int:
        return len(self.poses)


def unicycle(v: float, omega: float, t):
    """Closed-form constant-control rollout from the origin."""
    t = np.asarray(t, dtype=np.float64)
    if abs(omega) < 1e-12:
        return v * t, np.zeros_like(t), np.zeros_like(t)
    return (v / omega) * np.sin(omega * t), (v / omega) * (1 - np.cos(omega * t)), omega * t


def generate_primitives(v: float, omegas: Sequence[float], T: float, m: int) -> list[Primitive]:
    if m < 2:
        raise ConfigError("a primitive needs at least two poses")
    if v <= 0 or T <= 0:
        raise ConfigError("v and T must be positive")
    t = np.linspace(0.0, T, m)
    lib = []
    for w in omegas:
        x, y, psi = unicycle(v, float(w), t)
        lib.append(Primitive(v, float(w), T, np.stack([x, y, psi], axis=1)))
    return lib


def default_library(v: float = 0.3, n: int = 7, max_omega: float = 0.6, T: float = 4.0,
                    m: int = 10) -> list[Primitive]:
    return generate_primitives(v, np.linspace(-max_omega, max_omega, n), T, m)


@dataclass(frozen=True)
class CameraModel:
    fx: float = 16.0
    fy: float = 16.0
    cx: float = 15.5
    cy: float = 15.5
    height: float = 0.5
    pitch: float = 0.8
    H: int = 32
    W: int = 32

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if self.height <= 0:
            raise ConfigError("camera height must be positive")

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Camera right, down and forward unit vectors in the robot frame (x fwd, y left, z up)."""
        c, s = math.cos(self.pitch), math.sin(self.pitch)
        right = np.array([0.0, -1.0, 0.0])
        down = np.array([-s, 0.0, -c])
        fwd = np.array([c, 0.0, -s])
        return right, down, fwd

    @property
    def horizon_row(self) -> float:
        return self.cy - self.fy * math.tan(self.pitch)


def project_points(xy: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project robot-frame ground points (N, 2); returns u, v and a validity mask.

    Points behind the camera are invalid; ground points in front always land below the horizon.
    """
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    rel = np.column_stack([xy[:, 0], xy[:, 1], np.full(len(xy), -cam.height)])
    right, down, fwd = cam.axes()
    xc, yc, zc = rel @ right, rel @ down, rel @ fwd
    ok = zc > 1e-9
    zs = np.where(ok, zc, 1.0)
    u = cam.cx + cam.fx * xc / zs
    v = cam.cy + cam.fy * yc / zs
    ok &= v > cam.horizon_row
    return u, v, ok


def project(pose: Pose2 | tuple[float, float], cam: CameraModel) -> tuple[float, float] | None:
    """Pixel (u, v) of a robot-frame ground point, or None when it cannot be projected."""
    x, y = (pose.x, pose.y) if isinstance(pose, Pose2) else pose
    u, v, ok = project_points(np.array([[x, y]]), cam)
    return (float(u[0]), float(v[0])) if ok[0] else None


def navigability_mask(seg: np.ndarray, table: Sequence[bool]) -> np.ndarray:
    seg = np.asarray(seg)
    if seg.size and seg.max() >= len(table):
        missing = sorted({int(c) for c in np.unique(seg) if c >= len(table)})
        raise ValidationError(f"navigability table has no entry for classes {missing}")
    return np.asarray(table, dtype=bool)[seg]


def obstacle_boundary(mask: np.ndarray) -> np.ndarray:
    """Per column, the first non-navigable pixel met scanning up from the bottom row."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    out = np.zeros_like(mask)
    blocked = ~mask[::-1]                  # row 0 is now the bottom row
    has = blocked.any(axis=0)
    first = blocked.argmax(axis=0)
    cols = np.nonzero(has)[0]
    out[h - 1 - first[cols], cols] = True
    return out


def _edt_1d(f: np.ndarray) -> np.ndarray:
    """Squared distance transform of a sampled function (lower envelope of parabolas)."""
    n = len(f)
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    z[0], z[1] = -np.inf, np.inf
    finite = np.isfinite(f)
    if not finite.any():
        return np.full(n, np.inf)
    first = int(np.argmax(finite))
    v[0] = first
    for q in range(first + 1, n):
        if not finite[q]:
            continue
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
                continue
            break
        k += 1
        v[k] = q
        z[k], z[k + 1] = s, np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = (q - p) ** 2 + f[p]
    return d


def distance_transform(seeds: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance of every pixel to the nearest True pixel (two separable passes)."""
    seeds = np.asarray(seeds, dtype=bool)
    if not seeds.any():
        return np.full(seeds.shape, np.inf)
    f = np.where(seeds, 0.0, np.inf)
    cols = np.stack([_edt_1d(f[:, j]) for j in range(f.shape[1])], axis=1)
    rows = np.stack([_edt_1d(cols[i, :]) for i in range(f.shape[0])], axis=0)
    return np.sqrt(rows)


@dataclass(frozen=True)
class SedfImage:
    field: np.ndarray
    alpha: float


def sedf(boundary: np.ndarray, alpha: float, shape: tuple[int, int] | None = None) -> SedfImage:
    """Risk field 1 - dist / (alpha * diagonal), clipped at 0; all zero without a boundary."""
    if alpha <= 0:
        raise ConfigError("SEDF scale factor must be positive")
    boundary = np.asarray(boundary, dtype=bool)
    if shape is not None and boundary.shape != tuple(shape):
        raise ValidationError(f"boundary shape {boundary.shape} != image size {shape}")
    h, w = boundary.shape
    if not boundary.any():
        return SedfImage(np.zeros((h, w)), alpha)
    dist = distance_transform(boundary)
    diag = math.hypot(h, w)
    return SedfImage(np.clip(1.0 - dist / (alpha * diag), 0.0, 1.0), alpha)


@dataclass(frozen=True)
class PlannerWeights:
    w1: float = 1.0
    w2: float = 1.0
    a: float = 0.25
    b: float = 1.0
    p: float = 2.0
    goal_radius: float = 0.3

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ConfigError("a and b must be strictly positive")
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigError("w1, w2 must be non-negative")
        if self.p < 1:
            raise ConfigError("exponent p must be >= 1")


def pose_lookup(poses_xy: np.ndarray, field: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Per-pose risk: nearest-pixel SEDF value, 1.0 when unprojectable or out of frame."""
    u, v, ok = project_points(poses_xy, cam)
    h, w = field.shape
    ui = np.rint(np.where(ok, u, -1)).astype(np.int64)
    vi = np.rint(np.where(ok, v, -1)).astype(np.int64)
    inside = ok & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    risk = np.ones(len(u))
    risk[inside] = field[vi[inside], ui[inside]]
    return risk


def collision_cost(primitive: Primitive, field: SedfImage | np.ndarray, cam: CameraModel) -> float:
    arr = field.field if isinstance(field, SedfImage) else np.asarray(field)
    return float(pose_lookup(primitive.poses[:, :2], arr, cam).sum())


def target_cost(pose: Pose2, goal: Pose2, weights: PlannerWeights) -> float:
    """Weighted SE(3) distance for planar poses (rotation about the vertical axis only)."""
    d_rot = abs(wrap_angle(goal.psi - pose.psi))
    d_trans = math.hypot(pose.x - goal.x, pose.y - goal.y)
    return (weights.a * d_rot ** weights.p + weights.b * d_trans ** weights.p) ** (1.0 / weights.p)


def goal_with_bearing(robot: Pose2, gx: float, gy: float) -> Pose2:
    return Pose2(gx, gy, math.atan2(gy - robot.y, gx - robot.x))


def primitive_target_cost(primitive: Primitive, robot: Pose2, goal: Pose2, weights: PlannerWeights) -> float:
    total = 0.0
    for x, y, psi in primitive.poses:
        total += target_cost(robot.compose(Pose2(x, y, psi)), goal, weights)
    return total


@dataclass
class PlanResult:
    index: int
    collision: np.ndarray
    target: np.ndarray
    total: np.ndarray
    library: list[Primitive] = field(repr=False, default_factory=list)

    def to_csv(self) -> str:
        lines = ["index,v,omega,collision,target,total,selected"]
        for i, p in enumerate(self.library):
            lines.append(f"{i},{p.v:.6g},{p.omega:.6g},{self.collision[i]:.6g},{self.target[i]:.6g},"
                         f"{self.total[i]:.6g},{int(i == self.index)}")
        return "\n".join(lines) + "\n"


def select_primitive(library: Sequence[Primitive], field: SedfImage | np.ndarray, cam: CameraModel,
                     robot: Pose2, goal: Pose2, weights: PlannerWeights) -> PlanResult:
    """Exhaustively score every primitive by w1 * C_c + w2 * C_t; ties go to the lowest index."""
    if len(library) == 0:
        raise UsageError("primitive library is empty")
    cc = np.array([collision_cost(p, field, cam) for p in library])
    ct = np.array([primitive_target_cost(p, robot, goal, weights) for p in library])
    total = weights.w1 * cc + weights.w2 * ct
    return PlanResult(int(np.argmin(total)), cc, ct, total, list(library))


def plan_from_segmentation(seg: np.ndarray, nav_table: Sequence[bool], library: Sequence[Primitive],
                           cam: CameraModel, robot: Pose2, goal: Pose2, weights: PlannerWeights,
                           alpha: float = 0.25) -> tuple[PlanResult, SedfImage]:
    mask = navigability_mask(seg, nav_table)
    field = sedf(obstacle_boundary(mask), alpha, mask.shape)
    return select_primitive(library, field, cam, robot, goal, weights), field
