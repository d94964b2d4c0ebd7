"""Shared test utilities: a central-difference gradient checker and small fixtures."""
from __future__ import annotations

import numpy as np

from cali import diffcore as dc
from cali.diffcore import Tensor


def leaf(rng: np.random.Generator, *shape, low=None, high=None) -> Tensor:
    if low is None:
        data = rng.normal(size=shape)
    else:
        data = rng.uniform(low, high, size=shape)
    return Tensor(data.astype(np.float64), requires_grad=True, dtype=np.float64)


# criterion number -> "criterion N: PASS|FAIL ..." filled in by test_acceptance
ACCEPTANCE_LINES: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


def numeric_grad(fn, t: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``t.data``."""
    g = np.zeros_like(t.data)
    it = np.nditer(t.data, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = t.data[i]
        t.data[i] = old + h
        up = fn().item()
        t.data[i] = old - h
        down = fn().item()
        t.data[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(num / den)


def check_grads(fn, leaves, h: float = 1e-6) -> float:
    """Worst relative error between backprop and central differences over ``leaves``."""
    for t in leaves:
        t.grad = None
    out = fn()
    dc.backward(out)
    analytic = [np.array(t.grad) for t in leaves]
    worst = 0.0
    for t, a in zip(leaves, analytic):
        worst = max(worst, rel_error(a, numeric_grad(fn, t, h)))
    return worst


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """Scalar probe sum(x * w) so every output element gets a distinct upstream gradient."""
    return (x * Tensor(w, dtype=x.dtype)).sum()


# ---------------------------------------------------------------- planner oracles (independent re-implementations)

def project_oracle(x: float, y: float, cam) -> tuple[float, float] | None:
    """Homogeneous transform pipeline: robot frame -> level camera -> pitched camera -> pixels."""
    rel = np.array([x, y, -cam.height])
    level = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])   # x right, y down, z fwd
    c, s = np.cos(cam.pitch), np.sin(cam.pitch)
    pitch = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    K = np.array([[cam.fx, 0.0, cam.cx], [0.0, cam.fy, cam.cy], [0.0, 0.0, 1.0]])
    pc = pitch @ level @ rel
    if pc[2] <= 1e-9:
        return None
    h = K @ pc
    return h[0] / h[2], h[1] / h[2]


def boundary_oracle(mask: np.ndarray) -> np.ndarray:
    out = np.zeros(mask.shape, dtype=bool)
    h, w = mask.shape
    for j in range(w):
        for i in range(h - 1, -1, -1):
            if not mask[i, j]:
                out[i, j] = True
                break
    return out


def sedf_oracle(boundary: np.ndarray, alpha: float) -> np.ndarray:
    h, w = boundary.shape
    pts = np.argwhere(boundary)
    if len(pts) == 0:
        return np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.full((h, w), np.inf)
    for r, c in pts:
        d = np.minimum(d, np.sqrt((yy - r) ** 2 + (xx - c) ** 2))
    return np.maximum(0.0, 1.0 - d / (alpha * np.hypot(h, w)))


def target_cost_oracle(x, y, psi, gx, gy, gpsi, a, b, p):
    d = (gpsi - psi + np.pi) % (2 * np.pi) - np.pi
    return (a * abs(d) ** p + b * np.hypot(x - gx, y - gy) ** p) ** (1.0 / p)


def cost_table_oracle(seg, table, library, cam, robot, goal, w1, w2, a, b, p, alpha):
    """Per-primitive (collision, target, total) with nothing borrowed from the planner module."""
    mask = np.asarray(table, dtype=bool)[seg]
    field = sedf_oracle(boundary_oracle(mask), alpha)
    h, w = field.shape
    rows = []
    for prim in library:
        cc = ct = 0.0
        for px, py, ppsi in prim.poses:
            uv = project_oracle(px, py, cam)
            if uv is None:
                cc += 1.0
            else:
                ui, vi = round(round(uv[0], 9)), round(round(uv[1], 9))   # exact half-pixel ties go to even
                cc += field[vi, ui] if 0 <= ui < w and 0 <= vi < h else 1.0
            cr, sr = np.cos(robot.psi), np.sin(robot.psi)
            wx, wy = robot.x + cr * px - sr * py, robot.y + sr * px + cr * py
            ct += target_cost_oracle(wx, wy, robot.psi + ppsi, goal.x, goal.y, goal.psi, a, b, p)
        rows.append((cc, ct, w1 * cc + w2 * ct))
    return np.array(rows)


def random_plan_instance(rng: np.random.Generator):
    """Random segmentation, table, library, poses and weights for the selection check."""
    from cali import planner as P

    h = w = 32
    seg = np.zeros((h, w), dtype=np.int64)
    for _ in range(int(rng.integers(1, 5))):
        r0, c0 = rng.integers(0, h, 2)
        seg[r0:r0 + int(rng.integers(2, 12)), c0:c0 + int(rng.integers(2, 12))] = int(rng.integers(1, 3))
    table = (True, bool(rng.random() < 0.3), bool(rng.random() < 0.5))
    omegas = np.sort(rng.uniform(-0.8, 0.8, int(rng.integers(1, 8))))
    lib = P.generate_primitives(float(rng.uniform(0.1, 0.6)), omegas, float(rng.uniform(1, 5)),
                                int(rng.integers(2, 12)))
    cam = P.CameraModel(pitch=float(rng.uniform(0.3, 1.0)))
    robot = P.Pose2(*rng.uniform(-2, 2, 2), float(rng.uniform(-np.pi, np.pi)))
    goal = P.Pose2(*rng.uniform(-4, 4, 2), float(rng.uniform(-np.pi, np.pi)))
    weights = P.PlannerWeights(float(rng.uniform(0, 3)), float(rng.uniform(0, 3)), float(rng.uniform(0.05, 2)),
                               float(rng.uniform(0.05, 2)), float(rng.uniform(1, 3)))
    alpha = float(rng.uniform(0.05, 1.0))
    return seg, table, lib, cam, robot, goal, weights, alpha
