"""Signal-source localization from arrival-time differences at three sensors,
with guaranteed and estimated precision regions derived from the coherence
measures of the acquiring tuple.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class NoSolutionError(Exception):
    """Newton iteration failed to converge; carries the final residuals."""

    def __init__(self, residuals):
        super().__init__(f"no solution, residuals {residuals}")
        self.residuals = residuals


@dataclass(frozen=True)
class Scene:
    """Three known sensor positions (meters) and the signal speed (m/s).

    The third sensor is the range reference: localization solves for its
    unknown distance ``a`` to the source, with ``d1``/``d2`` the extra path
    lengths to the first and second sensor.
    """

    sensors: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]
    signal_speed: float = 343.0

    def __post_init__(self) -> None:
        if self.signal_speed <= 0:
            raise ValueError("signal speed must be positive")
        (x1, y1), (x2, y2), (x3, y3) = self.sensors
        cross = (x2 - x1) * (y3 - y1) - (y2 - y1) * (x3 - x1)
        if abs(cross) < 1e-9:
            raise ValueError("sensors must not be collinear")


def _system(scene: Scene, d1: float, d2: float, v: np.ndarray) -> np.ndarray:
    (x1, y1), (x2, y2), (x3, y3) = scene.sensors
    x, y, a = v
    return np.array([
        a**2 - (x3 - x) ** 2 - (y3 - y) ** 2,
        (a + d1) ** 2 - (x1 - x) ** 2 - (y1 - y) ** 2,
        (a + d2) ** 2 - (x2 - x) ** 2 - (y2 - y) ** 2,
    ])


def _jacobian(scene: Scene, d1: float, d2: float, v: np.ndarray) -> np.ndarray:
    (x1, y1), (x2, y2), (x3, y3) = scene.sensors
    x, y, a = v
    return np.array([
        [2 * (x3 - x), 2 * (y3 - y), 2 * a],
        [2 * (x1 - x), 2 * (y1 - y), 2 * (a + d1)],
        [2 * (x2 - x), 2 * (y2 - y), 2 * (a + d2)],
    ])


def locate(
    scene: Scene,
    d1: float,
    d2: float,
    max_iter: int = 200,
    rel_tol: float = 1e-6,
) -> tuple[float, float, float]:
    """Solve the three-circle system for the source position and the reference
    range via damped Newton iteration.

    ``d1``/``d2`` are path-length differences relative to the reference sensor
    (arrival-time difference times signal speed).  The result satisfies all
    three equations to ``rel_tol`` relative residual.
    """
    pts = np.asarray(scene.sensors, dtype=float)
    spacing = np.mean(
        [np.linalg.norm(pts[i] - pts[j]) for i in range(3) for j in range(i + 1, 3)]
    )
    v = np.array([pts[:, 0].mean(), pts[:, 1].mean(), spacing])
    scale = max(1.0, spacing**2)

    f = _system(scene, d1, d2, v)
    for _ in range(max_iter):
        if np.max(np.abs(f)) / scale < rel_tol * 1e-3:
            break
        jac = _jacobian(scene, d1, d2, v)
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            raise NoSolutionError(list(f / scale))
        damping = 1.0
        norm0 = np.linalg.norm(f)
        while damping > 1e-8:
            trial = v + damping * step
            f_trial = _system(scene, d1, d2, trial)
            if np.linalg.norm(f_trial) < norm0:
                v, f = trial, f_trial
                break
            damping /= 2.0
        else:
            break
    residuals = np.abs(_system(scene, d1, d2, v)) / scale
    if np.max(residuals) >= rel_tol:
        raise NoSolutionError(list(residuals))
    return float(v[0]), float(v[1]), float(v[2])


def locate_from_arrivals(
    scene: Scene, arrivals: Sequence[float]
) -> tuple[float, float, float]:
    """Localization from absolute arrival times (seconds)."""
    t1, t2, t3 = arrivals
    d1 = (t1 - t3) * scene.signal_speed
    d2 = (t2 - t3) * scene.signal_speed
    return locate(scene, d1, d2)


@dataclass(frozen=True)
class Region:
    """Convex polygon of candidate source positions; ``unbounded`` flags a
    region where some corner localization failed to converge."""

    vertices: tuple[tuple[float, float], ...]
    unbounded: bool = False

    def contains(self, x: float, y: float, tol: float = 1e-6) -> bool:
        if self.unbounded:
            return True
        pts = self.vertices
        if len(pts) == 1:
            return math.hypot(pts[0][0] - x, pts[0][1] - y) <= tol
        if len(pts) == 2:
            (ax, ay), (bx, by) = pts
            cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax)
            seg = math.hypot(bx - ax, by - ay)
            if seg == 0:
                return math.hypot(ax - x, ay - y) <= tol
            t = ((x - ax) * (bx - ax) + (y - ay) * (by - ay)) / seg**2
            return abs(cross) / seg <= tol and -tol <= t <= 1 + tol
        for i in range(len(pts)):
            ax, ay = pts[i]
            bx, by = pts[(i + 1) % len(pts)]
            if (bx - ax) * (y - ay) - (by - ay) * (x - ax) < -tol * max(
                1.0, math.hypot(bx - ax, by - ay)
            ):
                return False
        return True


def _convex_order(points: list[tuple[float, float]]) -> tuple[tuple[float, float], ...]:
    """Counter-clockwise convex hull (monotone chain); collinear points drop."""
    pts = sorted(set(points))
    if len(pts) <= 2:
        return tuple(pts)

    def half(seq):
        out: list[tuple[float, float]] = []
        for p in seq:
            while len(out) >= 2 and (
                (out[-1][0] - out[-2][0]) * (p[1] - out[-2][1])
                - (out[-1][1] - out[-2][1]) * (p[0] - out[-2][0])
            ) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    return tuple(lower[:-1] + upper[:-1])


def _corner_region(scene: Scene, bounds: Sequence[tuple[float, float]]) -> Region:
    """Localizations for the earliest/latest arrival combinations, excluding
    all-earliest and all-latest (shifting every arrival equally leaves the
    time differences, and so the localization, unchanged); the remaining six
    are the region's corners."""
    corners: list[tuple[float, float]] = []
    unbounded = False
    for mask in range(8):
        picks = [(mask >> i) & 1 for i in range(3)]
        if all(p == 0 for p in picks) or all(p == 1 for p in picks):
            continue
        arrivals = [bounds[i][picks[i]] for i in range(3)]
        try:
            x, y, _ = locate_from_arrivals(scene, arrivals)
            corners.append((x, y))
        except NoSolutionError:
            unbounded = True
    return Region(vertices=_convex_order(corners), unbounded=unbounded)


def guarantee_region(
    scene: Scene,
    l_s: float,
    l_e: float,
    ages: Sequence[float],
) -> Region:
    """Guaranteed source region from a tuple's loop observations.

    Per sensor the signal arrived somewhere in ``[l_s - age, l_e - age]``
    (seconds), independent of sensor clock synchronization; the corners of the
    region are the localizations of the earliest/latest combinations.
    """
    if l_e < l_s:
        raise ValueError("loop end before start")
    bounds = [(l_s - age, l_e - age) for age in ages]
    return _corner_region(scene, bounds)


def estimate_region(
    scene: Scene,
    t_lo: Sequence[float],
    t_hi: Sequence[float],
) -> Region:
    """Estimated source region from reported per-sensor read-time bounds."""
    bounds = []
    for lo, hi in zip(t_lo, t_hi):
        if hi < lo:
            raise ValueError("t_max below t_min")
        bounds.append((lo, hi))
    return _corner_region(scene, bounds)
