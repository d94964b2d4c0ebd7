"""Closed-loop 2-D navigation with a synthetic ground-plane camera."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, SegSample, ShiftSpec, apply_shift, render_labels
from .diffcore import ConfigError
from .planner import (CameraModel, PlannerWeights, Pose2, Primitive, default_library, goal_with_bearing,
                      plan_from_segmentation, unicycle)

GRASS, OBSTACLE, SKY = 0, 1, 2
N_CLASSES = 3


@dataclass
class World:
    grid: np.ndarray                    # (R, C) class ids; row index grows with y
    resolution: float
    navigable: tuple[bool, ...]
    start: Pose2
    goal: Pose2
    outside_class: int = OBSTACLE

    def __post_init__(self):
        for name, p in (("start", self.start), ("goal", self.goal)):
            if not self.is_navigable(p.x, p.y):
                raise ConfigError(f"{name} pose ({p.x:.2f}, {p.y:.2f}) is not on a navigable cell")

    @property
    def extent(self) -> tuple[float, float]:
        r, c = self.grid.shape
        return c * self.resolution, r * self.resolution

    def cell(self, x, y):
        col = np.floor(np.asarray(x) / self.resolution).astype(np.int64)
        row = np.floor(np.asarray(y) / self.resolution).astype(np.int64)
        return row, col

    def class_at(self, x, y) -> np.ndarray:
        row, col = self.cell(x, y)
        r, c = self.grid.shape
        inside = (row >= 0) & (row < r) & (col >= 0) & (col < c)
        out = np.full(np.shape(row), self.outside_class, dtype=np.int64)
        out[inside] = self.grid[row[inside], col[inside]]
        return out

    def is_navigable(self, x: float, y: float) -> bool:
        return bool(self.navigable[int(self.class_at(x, y))])


def corridor_world(seed: int, size: float = 8.0, resolution: float = 0.1, gap: float = 2.0,
                   wall: tuple[float, float] = (3.5, 4.5), goal_offset: float = 0.0) -> World:
    """Open field crossed by a wall with one gap; start below the wall, goal above it."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    n = int(round(size / resolution))
    grid = np.full((n, n), GRASS, dtype=np.int64)
    wall_lo, wall_hi = int(round(wall[0] / resolution)), int(round(wall[1] / resolution))
    side = 1.0 if rng.random() < 0.5 else -1.0
    gap_c = size / 2 + side * rng.uniform(0.9, 1.8)      # off the start line, so reaching it takes a turn
    gap_lo, gap_hi = int(round((gap_c - gap / 2) / resolution)), int(round((gap_c + gap / 2) / resolution))
    grid[wall_lo:wall_hi, :] = OBSTACLE
    grid[wall_lo:wall_hi, gap_lo:gap_hi] = GRASS
    start = Pose2(size / 2 + rng.uniform(-0.3, 0.3), 1.0, math.pi / 2)
    goal_x = size / 2 + goal_offset * (gap_c - size / 2) + rng.uniform(-0.3, 0.3)
    goal = Pose2(goal_x, size - 1.2, math.pi / 2)
    return World(grid, resolution, (True, False), start, goal)


def open_world(goal_dist: float = 1.0, size: float = 6.0, resolution: float = 0.1) -> World:
    n = int(round(size / resolution))
    grid = np.full((n, n), GRASS, dtype=np.int64)
    start = Pose2(size / 2, 1.0, math.pi / 2)
    return World(grid, resolution, (True, False), start, Pose2(size / 2, 1.0 + goal_dist, math.pi / 2))


def pixel_rays(cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Robot-frame ground intersection (H, W, 2) for every pixel and the below-horizon mask."""
    right, down, fwd = cam.axes()
    v, u = np.mgrid[0:cam.H, 0:cam.W].astype(np.float64)
    d = (((u - cam.cx) / cam.fx)[..., None] * right + ((v - cam.cy) / cam.fy)[..., None] * down
         + fwd)
    ground = d[..., 2] < -1e-9
    t = np.where(ground, cam.height / np.where(ground, -d[..., 2], 1.0), 0.0)
    return np.stack([t * d[..., 0], t * d[..., 1]], axis=-1), ground


def render_camera(world: World, robot: Pose2, cam: CameraModel, shift: ShiftSpec | None = None,
                  seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Rendered (3, H, W) image and its true class map (sky above the horizon)."""
    pts, ground = pixel_rays(cam)
    c, s = math.cos(robot.psi), math.sin(robot.psi)
    wx = robot.x + c * pts[..., 0] - s * pts[..., 1]
    wy = robot.y + s * pts[..., 0] + c * pts[..., 1]
    seg = np.where(ground, world.class_at(wx, wy), SKY)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    img = render_labels(seg, rng, N_CLASSES)
    if shift is not None:
        img = apply_shift(img, seg, shift, rng)
    return img.astype(np.float32), seg


def random_view(world: World, rng: np.random.Generator) -> Pose2:
    """A navigable pose facing roughly up the map, mostly short of the wall."""
    w, h = world.extent
    while True:
        p = Pose2(rng.uniform(0.5, w - 0.5), rng.uniform(0.3, 0.75 * h), math.pi / 2 + rng.normal(0.0, 0.6))
        if world.is_navigable(p.x, p.y):
            return p


def camera_dataset(n: int, seed: int, cam: CameraModel | None = None, shift: ShiftSpec | None = None,
                   labeled: bool | None = None) -> Dataset:
    """Rendered camera views from random corridor worlds (world seeds kept clear of small test seeds)."""
    cam = cam or CameraModel()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 91]))
    is_target = shift is not None and not shift.is_identity()
    labeled = (not is_target) if labeled is None else labeled
    domain = "target" if is_target else "source"
    samples = []
    for i in range(n):
        world = corridor_world(10_000 + int(rng.integers(1_000_000)))
        img, seg = render_camera(world, random_view(world, rng), cam, shift, seed=int(rng.integers(2**31)))
        samples.append(SegSample(img, seg if labeled else None, domain))
    return Dataset(samples, N_CLASSES, (True, False, True), labeled, domain)


@dataclass
class StepRecord:
    step: int
    pose: Pose2
    prim_index: int
    coll_cost: float
    targ_cost: float
    violation: bool
    done: bool


@dataclass
class EpisodeLog:
    steps: list[StepRecord] = field(default_factory=list)
    path_length: float = 0.0
    reached: bool = False
    violated: bool = False

    @property
    def poses(self) -> list[Pose2]:
        return [r.pose for r in self.steps]

    @property
    def primitive_trace(self) -> list[int]:
        return [r.prim_index for r in self.steps if r.step > 0]

    def to_csv(self) -> str:
        lines = ["step,x,y,psi,prim_index,coll_cost,targ_cost,violation,done"]
        for r in self.steps:
            lines.append(f"{r.step},{r.pose.x:.6g},{r.pose.y:.6g},{r.pose.psi:.6g},{r.prim_index},"
                         f"{r.coll_cost:.6g},{r.targ_cost:.6g},{int(r.violation)},{int(r.done)}")
        return "\n".join(lines) + "\n"


# Dusk-like photometric change used as the navigation target domain. The standard hue shift maps the
# obstacle colour onto source grass, which no appearance-only adaptation can undo at this scale.
NAV_SHIFT = ShiftSpec(gain=(0.6, 0.6, 0.75), bias=(0.1, 0.1, 0.1), noise=0.05, seed=1)


def navigation_domains(n: int = 200, seed: int = 1, shift: ShiftSpec = NAV_SHIFT,
                       cam: CameraModel | None = None) -> tuple[Dataset, Dataset]:
    """Labeled source views and unlabeled shifted target views from disjoint random worlds."""
    return camera_dataset(n, seed, cam), camera_dataset(n, seed + 1, cam, shift)


# At 32x32 pixels a narrow SEDF and a collision-dominant weighting are needed for gaps to read as open.
NAV_WEIGHTS = PlannerWeights(w1=10.0, w2=1.0)


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 150
    alpha: float = 0.1
    exec_fraction: float = 0.25      # execute T/4 of the selected primitive before re-planning
    shift: ShiftSpec | None = None
    seed: int = 0


def run_episode(world: World, cam: CameraModel, segmenter=None, library: Sequence[Primitive] | None = None,
                weights: PlannerWeights | None = None, cfg: EpisodeConfig | None = None,
                on_step=None) -> EpisodeLog:
    """Render, segment, plan, execute the first slice of the best primitive, repeat.

    ``segmenter`` is None for ground-truth segmentation or a trained model with ``predict``.
    """
    cfg = cfg or EpisodeConfig()
    library = list(library) if library is not None else default_library()
    weights = weights or NAV_WEIGHTS
    if not world.is_navigable(world.start.x, world.start.y):
        raise ConfigError("start pose is not navigable")
    nav_table = tuple(world.navigable) + (True,)      # sky never meets a projected ground pose
    log = EpisodeLog()
    robot = world.start
    log.steps.append(StepRecord(0, robot, -1, float("nan"), float("nan"), False, False))
    if robot.distance(world.goal) <= weights.goal_radius:
        log.reached = True
        log.steps[-1].done = True
        return log

    for step in range(1, cfg.max_steps + 1):
        img, truth = render_camera(world, robot, cam, cfg.shift, seed=cfg.seed * 100003 + step)
        seg = truth if segmenter is None else segmenter.predict(img)
        goal = goal_with_bearing(robot, world.goal.x, world.goal.y)
        plan, field = plan_from_segmentation(seg, nav_table, library, cam, robot, goal, weights, cfg.alpha)
        prim = library[plan.index]
        dx, dy, dpsi = unicycle(prim.v, prim.omega, prim.T * cfg.exec_fraction)
        new = robot.compose(Pose2(float(dx), float(dy), float(dpsi)))
        log.path_length += robot.distance(new)
        robot = new
        violation = not world.is_navigable(robot.x, robot.y)
        reached = not violation and robot.distance(world.goal) <= weights.goal_radius
        done = violation or reached or step == cfg.max_steps
        log.steps.append(StepRecord(step, robot, plan.index, float(plan.collision[plan.index]),
                                    float(plan.target[plan.index]), violation, done))
        if on_step is not None:
            on_step(step, img, seg, field, plan)
        if violation:
            log.violated = True
            break
        if reached:
            log.reached = True
            break
    return log


def replay_violations(world: World, log: EpisodeLog) -> bool:
    return any(not world.is_navigable(p.x, p.y) for p in log.poses)


# ---------------------------------------------------------------- snapshots

def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Binary P6, 8-bit. ``rgb`` is (H, W, 3) floats in [0, 1] or uint8."""
    arr = np.asarray(rgb)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def field_to_rgb(field: np.ndarray) -> np.ndarray:
    """Blue (0) to yellow (1)."""
    f = np.clip(field, 0.0, 1.0)[..., None]
    return (1 - f) * np.array([0.2, 0.1, 0.6]) + f * np.array([1.0, 0.9, 0.1])


def topdown_overlay(world: World, log: EpisodeLog, scale: int = 4) -> np.ndarray:
    colours = np.array([[0.3, 0.6, 0.25], [0.35, 0.2, 0.1], [0.6, 0.75, 0.9]])
    img = colours[world.grid][::-1]                 # north up
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1).copy()
    r = world.grid.shape[0]

    def paint(p: Pose2, colour, rad=1):
        row, col = world.cell(p.x, p.y)
        row = (r - 1 - int(row)) * scale + scale // 2
        col = int(col) * scale + scale // 2
        img[max(row - rad, 0):row + rad + 1, max(col - rad, 0):col + rad + 1] = colour

    for p in log.poses:
        paint(p, (1.0, 1.0, 1.0))
    paint(world.start, (0.6, 0.2, 0.8), 3)
    paint(world.goal, (0.1, 0.3, 1.0), 3)
    return img
