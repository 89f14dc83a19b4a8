"""Run-and-tumble motion with hard-disc and wall collisions.

Collisions are resolved by revert-and-retumble: a move that would leave the
arena (body included) or overlap another agent is cancelled and the agent
starts a new tumble. All random draws are made up front with numpy so that the
compiled kernel stays deterministic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from ..geometry import Arena, ShapeKind

RUN, TUMBLE = 0, 1
_CIRCLE, _POLYGON = 0, 1


@dataclass
class MotionState:
    pos: np.ndarray  # (N, 2) mm
    heading: np.ndarray  # (N,) rad
    phase: np.ndarray  # (N,) RUN / TUMBLE
    left_kt: np.ndarray  # (N,) time left in the current phase

    @classmethod
    def start(cls, pos, rng: np.random.Generator) -> "MotionState":
        n = len(pos)
        return cls(np.array(pos, dtype=np.float64), rng.uniform(0, 2 * np.pi, n),
                   np.full(n, TUMBLE, dtype=np.int8), np.zeros(n))


@dataclass(frozen=True)
class MotionParams:
    speed_mm_per_kt: float
    step_kt: float
    run_kt: float
    tumble_mean_kt: float
    tumble_std_kt: float
    tumble_max_kt: float
    radius: float

    @classmethod
    def from_config(cls, cfg) -> "MotionParams":
        return cls(cfg.agent_speed / 31.0, cfg.motion_step_kt, cfg.run_kt, cfg.tumble_mean_kt,
                   cfg.tumble_std_kt, cfg.tumble_max_kt, cfg.agent_radius)


def arena_codes(arena: Arena):
    """Flatten an arena for the compiled containment test."""
    if arena.is_analytic:
        inner = arena.inner_radius if arena.kind is ShapeKind.ANNULUS else 0.0
        return _CIRCLE, np.array([arena.scale, inner]), np.zeros((1, 2))
    return _POLYGON, np.zeros(2), np.asarray(arena.vertices, dtype=np.float64)


@numba.njit(cache=True)
def _inside(x, y, code, circ, verts, margin):
    if code == _CIRCLE:
        r = math.hypot(x, y)
        return r <= circ[0] - margin and r >= circ[1] + margin
    n = verts.shape[0]
    inside = False
    j = n - 1
    for i in range(n):
        xi, yi = verts[i, 0], verts[i, 1]
        xj, yj = verts[j, 0], verts[j, 1]
        if (yi > y) != (yj > y):
            if x < (xj - xi) * (y - yi) / (yj - yi) + xi:
                inside = not inside
        # distance to edge (i, j)
        dx, dy = xj - xi, yj - yi
        L2 = dx * dx + dy * dy
        t = 0.0
        if L2 > 0:
            t = min(1.0, max(0.0, ((x - xi) * dx + (y - yi) * dy) / L2))
        ex, ey = xi + t * dx - x, yi + t * dy - y
        if ex * ex + ey * ey < margin * margin:
            return False
        j = i
    return inside


@numba.njit(cache=True)
def _advance(pos, heading, phase, left, n_steps, speed, step_kt, run_kt, t_mean, t_std, t_max, radius,
             code, circ, verts, angles, normals, order, tumble_log):
    n = pos.shape[0]
    min_d2 = (2.0 * radius) ** 2
    for k in range(n_steps):
        for m in range(n):
            i = order[k, m]
            budget = step_kt
            while budget > 1e-12:
                if left[i] <= 1e-12:
                    # phase switch
                    if phase[i] == 0:
                        phase[i] = 1
                        heading[i] = angles[k, i]
                        dur = t_mean + t_std * normals[k, i]
                        left[i] = min(t_max, max(0.0, dur))
                    else:
                        phase[i] = 0
                        left[i] = run_kt
                    if left[i] <= 1e-12:
                        continue
                dt = min(budget, left[i])
                if phase[i] == 0:
                    nx = pos[i, 0] + speed * dt * math.cos(heading[i])
                    ny = pos[i, 1] + speed * dt * math.sin(heading[i])
                    ok = _inside(nx, ny, code, circ, verts, radius)
                    if ok:
                        for j in range(n):
                            if j != i:
                                ddx = nx - pos[j, 0]
                                ddy = ny - pos[j, 1]
                                if ddx * ddx + ddy * ddy < min_d2:
                                    ok = False
                                    break
                    if ok:
                        pos[i, 0] = nx
                        pos[i, 1] = ny
                        left[i] -= dt
                    else:
                        # revert: stay put and tumble immediately
                        left[i] = 0.0
                        phase[i] = 0
                        budget = 0.0
                        continue
                else:
                    left[i] -= dt
                budget -= dt
            tumble_log[k, i] = phase[i]


def advance(state: MotionState, arena: Arena, params: MotionParams, duration_kt: float,
            rng: np.random.Generator) -> np.ndarray:
    """Move every agent for ``duration_kt``; returns the per-step phase log (steps, N)."""
    n_steps = int(duration_kt // params.step_kt)
    n = len(state.pos)
    if n_steps <= 0:
        return np.zeros((0, n), dtype=np.int8)
    code, circ, verts = arena_codes(arena)
    angles = rng.uniform(0.0, 2 * np.pi, (n_steps, n))
    normals = rng.standard_normal((n_steps, n))
    order = np.argsort(rng.random((n_steps, n)), axis=1).astype(np.int64)
    log = np.zeros((n_steps, n), dtype=np.int8)
    _advance(state.pos, state.heading, state.phase, state.left_kt, n_steps, params.speed_mm_per_kt,
             float(params.step_kt), float(params.run_kt), params.tumble_mean_kt, params.tumble_std_kt,
             params.tumble_max_kt, params.radius, code, circ, verts, angles, normals, order, log)
    return log


def run_and_tumble_step(state: MotionState, arena: Arena, params: MotionParams, rng: np.random.Generator):
    """One motion step of ``params.step_kt`` kiloticks."""
    return advance(state, arena, params, params.step_kt, rng)


def valid_configuration(pos, arena: Arena, radius: float, tol: float = 1e-6) -> bool:
    """No agent body outside the arena and no pairwise overlap."""
    from scipy.spatial.distance import pdist

    inside = arena.contains(pos, margin=max(radius - tol, 0.0))
    if len(pos) > 1 and pdist(pos).min() < 2 * radius - tol:
        return False
    return bool(np.all(inside))
