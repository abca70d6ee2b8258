"""Continuous multi-room maze with a unicycle robot and a planar laser scanner.

Rooms are axis-aligned rectangles laid out left to right. Every shared wall
has two door gaps; one of them opens into an enclosed dead-end pocket that
belongs to the next room. Walls are zero-thickness segments and the robot is
a point, so "free space" is simply the union of the room rectangles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

CLEARANCE = 1e-3
_PARALLEL_EPS = 1e-12


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def scaled(self, k: float) -> "Rect":
        return Rect(self.x0 * k, self.y0 * k, self.x1 * k, self.y1 * k)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class Door:
    """A gap in the wall between room ``transition`` and room ``transition + 1``."""

    transition: int
    segment: tuple[float, float, float, float]
    dead_end: bool

    @property
    def midpoint(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.segment
        return 0.5 * (x0 + x1), 0.5 * (y0 + y1)


@dataclass(frozen=True)
class Pocket:
    """Enclosed region behind the dead-end door of ``transition``."""

    transition: int
    polygon: tuple[tuple[float, float], ...]

    def contains(self, x: float, y: float) -> bool:
        return point_in_polygon(x, y, self.polygon)


@dataclass
class MazeSpec:
    rooms: list[Rect]
    walls: np.ndarray  # (S, 4) rows of x0, y0, x1, y1
    doors: list[Door]
    pockets: list[Pocket]
    start_area: Rect
    goal_area: Rect
    name: str = "custom"

    def __post_init__(self):
        self.walls = np.asarray(self.walls, dtype=np.float64).reshape(-1, 4)
        if not self.rooms:
            raise ValueError("a maze needs at least one room")

    @property
    def room_count(self) -> int:
        return len(self.rooms)

    @property
    def bounds(self) -> Rect:
        return Rect(min(r.x0 for r in self.rooms), min(r.y0 for r in self.rooms),
                    max(r.x1 for r in self.rooms), max(r.y1 for r in self.rooms))

    def doors_for(self, transition: int) -> list[Door]:
        return [d for d in self.doors if d.transition == transition]

    def room_of(self, x: float, y: float) -> int:
        """1-based index of the room containing (x, y); 0 if outside every room.

        Points on a shared boundary belong to the lower-indexed room.
        """
        for i, room in enumerate(self.rooms, start=1):
            if room.contains(x, y):
                return i
        return 0

    def in_free_space(self, x: float, y: float) -> bool:
        if self.room_of(x, y) == 0:
            return False
        return wall_distance(self.walls, x, y) > 0.0

    def in_goal(self, x: float, y: float) -> bool:
        return self.goal_area.contains(x, y)

    def scaled(self, k: float) -> "MazeSpec":
        """Uniformly scale the whole layout about the origin."""
        return MazeSpec(
            rooms=[r.scaled(k) for r in self.rooms],
            walls=self.walls * k,
            doors=[Door(d.transition, tuple(v * k for v in d.segment), d.dead_end)
                   for d in self.doors],
            pockets=[Pocket(p.transition, tuple((x * k, y * k) for x, y in p.polygon))
                     for p in self.pockets],
            start_area=self.start_area.scaled(k),
            goal_area=self.goal_area.scaled(k),
            name=self.name if k == 1 else f"{self.name}@{k:g}",
        )

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rooms": [r.as_list() for r in self.rooms],
            "walls": self.walls.tolist(),
            "doors": [{"transition": d.transition, "segment": list(d.segment),
                       "dead_end": d.dead_end} for d in self.doors],
            "pockets": [{"transition": p.transition, "polygon": [list(v) for v in p.polygon]}
                        for p in self.pockets],
            "start_area": self.start_area.as_list(),
            "goal_area": self.goal_area.as_list(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MazeSpec":
        try:
            return cls(
                rooms=[Rect(*map(float, r)) for r in data["rooms"]],
                walls=np.array(data["walls"], dtype=np.float64),
                doors=[Door(int(d["transition"]), tuple(map(float, d["segment"])),
                            bool(d["dead_end"])) for d in data.get("doors", [])],
                pockets=[Pocket(int(p["transition"]),
                                tuple(tuple(map(float, v)) for v in p["polygon"]))
                         for p in data.get("pockets", [])],
                start_area=Rect(*map(float, data["start_area"])),
                goal_area=Rect(*map(float, data["goal_area"])),
                name=str(data.get("name", "custom")),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed maze layout: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MazeSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- geometry ------------------------------------------------------------

def point_in_polygon(x: float, y: float, polygon: Sequence[tuple[float, float]]) -> bool:
    inside = False
    n = len(polygon)
    for i in range(n):
        xa, ya = polygon[i]
        xb, yb = polygon[(i + 1) % n]
        if (ya > y) != (yb > y):
            x_cross = xa + (y - ya) * (xb - xa) / (yb - ya)
            if x < x_cross:
                inside = not inside
    return inside


def wall_distance(walls: np.ndarray, x: float, y: float) -> float:
    """Euclidean distance from (x, y) to the nearest wall segment."""
    if len(walls) == 0:
        return math.inf
    p = walls[:, :2]
    e = walls[:, 2:] - p
    rel = np.array([x, y]) - p
    length2 = np.einsum("ij,ij->i", e, e)
    t = np.clip(np.einsum("ij,ij->i", rel, e) / np.where(length2 > 0, length2, 1.0), 0.0, 1.0)
    closest = p + e * t[:, None]
    return float(np.min(np.hypot(closest[:, 0] - x, closest[:, 1] - y)))


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def segment_hits(walls: np.ndarray, ox: float, oy: float, dx: float, dy: float) -> np.ndarray:
    """Parameters t >= 0 where o + t*d meets each wall (inf where it does not)."""
    px, py = walls[:, 0], walls[:, 1]
    ex, ey = walls[:, 2] - px, walls[:, 3] - py
    denom = _cross(dx, dy, ex, ey)
    qx, qy = px - ox, py - oy
    safe = np.where(np.abs(denom) < _PARALLEL_EPS, 1.0, denom)
    t = _cross(qx, qy, ex, ey) / safe
    u = _cross(qx, qy, dx, dy) / safe
    valid = (np.abs(denom) >= _PARALLEL_EPS) & (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
    return np.where(valid, t, np.inf)


def raycast(spec: MazeSpec, origin: tuple[float, float], angle: float,
            max_range: float = 10.0) -> float:
    """Distance from ``origin`` to the first wall along ``angle``, capped at ``max_range``."""
    x, y = float(origin[0]), float(origin[1])
    if not spec.in_free_space(x, y):
        raise ValueError(f"ray origin ({x:.4g}, {y:.4g}) is not in free space")
    hits = segment_hits(spec.walls, x, y, math.cos(angle), math.sin(angle))
    return float(min(np.min(hits, initial=np.inf), max_range))


def raycast_fan(walls: np.ndarray, x: float, y: float, angles: np.ndarray,
                max_range: float) -> np.ndarray:
    """Vectorized ``raycast`` for many angles from one origin (no origin check)."""
    dx, dy = np.cos(angles)[:, None], np.sin(angles)[:, None]
    px, py = walls[None, :, 0], walls[None, :, 1]
    ex, ey = walls[None, :, 2] - px, walls[None, :, 3] - py
    denom = dx * ey - dy * ex
    qx, qy = px - x, py - y
    ok = np.abs(denom) >= _PARALLEL_EPS
    safe = np.where(ok, denom, 1.0)
    t = (qx * ey - qy * ex) / safe
    u = (qx * dy - qy * dx) / safe
    t = np.where(ok & (t >= 0.0) & (u >= 0.0) & (u <= 1.0), t, np.inf)
    return np.minimum(t.min(axis=1), max_range)


def sweep_collision(walls: np.ndarray, x: float, y: float, nx: float, ny: float,
                    clearance: float = CLEARANCE) -> tuple[float, float, bool]:
    """Resolve motion (x, y) -> (nx, ny) against walls: stop ``clearance`` short of contact."""
    mx, my = nx - x, ny - y
    length = math.hypot(mx, my)
    if length == 0.0:
        return x, y, False
    t_hit = float(np.min(segment_hits(walls, x, y, mx, my), initial=np.inf))
    if t_hit > 1.0:
        return nx, ny, False
    t = max(0.0, t_hit - clearance / length)
    return x + mx * t, y + my * t, True


# -- built-in layouts ----------------------------------------------------

BASE_ROOM_WIDTH = 6.0
BASE_ROOM_HEIGHT = 8.0
_DOOR_HALF = 0.6
_POCKET_DEPTH = 2.0
_POCKET_HALF = 1.4
_GOAL_DEPTH = 1.5


def author_layout(room_count: int, width: float = BASE_ROOM_WIDTH,
                  height: float = BASE_ROOM_HEIGHT) -> MazeSpec:
    """Programmatic source of the shipped layout files.

    Door placement alternates per transition so that the dead-end door is
    always the one nearer to where the agent arrives in (and to the centre
    of) the current room.
    """
    if room_count < 1:
        raise ValueError("room_count must be positive")
    w, h = width, height
    total = room_count * w
    walls: list[list[float]] = [[0, 0, total, 0], [0, h, total, h], [0, 0, 0, h],
                                [total, 0, total, h]]
    doors: list[Door] = []
    pockets: list[Pocket] = []
    for j in range(1, room_count):
        xw = j * w
        if j % 2 == 1:
            dead_c, safe_c = h / 2 - 1.0, h - 1.0
        else:
            dead_c, safe_c = h / 2 + 1.0, 1.0
        gaps = sorted([(dead_c - _DOOR_HALF, dead_c + _DOOR_HALF),
                       (safe_c - _DOOR_HALF, safe_c + _DOOR_HALF)])
        y = 0.0
        for lo, hi in gaps:
            walls.append([xw, y, xw, lo])
            y = hi
        walls.append([xw, y, xw, h])
        doors.append(Door(j, (xw, dead_c - _DOOR_HALF, xw, dead_c + _DOOR_HALF), True))
        doors.append(Door(j, (xw, safe_c - _DOOR_HALF, xw, safe_c + _DOOR_HALF), False))
        lo, hi, xr = dead_c - _POCKET_HALF, dead_c + _POCKET_HALF, xw + _POCKET_DEPTH
        walls += [[xw, lo, xr, lo], [xr, lo, xr, hi], [xw, hi, xr, hi]]
        pockets.append(Pocket(j, ((xw, lo), (xr, lo), (xr, hi), (xw, hi))))
    # the goal is a full-height band along the far wall of the last room
    goal = Rect(total - _GOAL_DEPTH, 0.0, total, h)
    start = Rect(0.5, 1.5, 2.5, 4.5) if room_count > 1 else Rect(0.5, 0.5 * h - 1.5, 2.5,
                                                                  0.5 * h + 1.5)
    return MazeSpec([Rect((i - 1) * w, 0.0, i * w, h) for i in range(1, room_count + 1)],
                    np.array(walls, dtype=np.float64), doors, pockets, start, goal,
                    name=f"rooms{room_count}")


def builtin_maze(room_count: int) -> MazeSpec:
    """Load one of the shipped 2-, 3- or 4-room layouts (base scale)."""
    if room_count not in (2, 3, 4):
        raise ValueError(f"no built-in maze with {room_count} rooms (choose 2, 3 or 4)")
    text = resources.files("csac").joinpath(f"layouts/rooms{room_count}.json").read_text()
    return MazeSpec.from_dict(json.loads(text))


# -- validation ----------------------------------------------------------

@dataclass
class MazeReport:
    room_count: int
    transitions: int
    dead_end_pockets: int
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems


def _reachable(spec: MazeSpec, seed: tuple[float, float], extra_walls: np.ndarray | None = None,
               resolution: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Flood fill over a grid of free-space points; returns (points, reachable mask)."""
    walls = spec.walls if extra_walls is None else np.vstack([spec.walls, extra_walls])
    b = spec.bounds
    res = resolution or min(min(r.x1 - r.x0, r.y1 - r.y0) for r in spec.rooms) / 40.0
    xs = np.arange(b.x0 + res / 2, b.x1, res)
    ys = np.arange(b.y0 + res / 2, b.y1, res)
    nx, ny = len(xs), len(ys)
    free = np.zeros((nx, ny), dtype=bool)
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            free[i, j] = spec.room_of(x, y) > 0

    def blocked(x0, y0, x1, y1):
        return bool(np.any(segment_hits(walls, x0, y0, x1 - x0, y1 - y0) <= 1.0))

    si = int(np.clip(round((seed[0] - xs[0]) / res), 0, nx - 1))
    sj = int(np.clip(round((seed[1] - ys[0]) / res), 0, ny - 1))
    seen = np.zeros_like(free)
    if not free[si, sj] or blocked(seed[0], seed[1], xs[si], ys[sj]):
        return np.stack(np.meshgrid(xs, ys, indexing="ij"), -1), seen
    seen[si, sj] = True
    frontier = [(si, sj)]
    while frontier:
        i, j = frontier.pop()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, c = i + di, j + dj
            if 0 <= a < nx and 0 <= c < ny and free[a, c] and not seen[a, c]:
                if not blocked(xs[i], ys[j], xs[a], ys[c]):
                    seen[a, c] = True
                    frontier.append((a, c))
    return np.stack(np.meshgrid(xs, ys, indexing="ij"), -1), seen


def validate_maze(spec: MazeSpec) -> MazeReport:
    """Check the structural invariants of a layout; problems are listed, not raised."""
    n = spec.room_count
    problems: list[str] = []
    for i, (a, b) in enumerate(zip(spec.rooms[:-1], spec.rooms[1:]), start=1):
        if not a.x1 <= b.x0 + 1e-9:
            problems.append(f"rooms {i} and {i + 1} overlap or are out of order")
    for j in range(1, n):
        doors = spec.doors_for(j)
        if len(doors) != 2:
            problems.append(f"transition {j} has {len(doors)} doors (need 2)")
            continue
        dead = [d for d in doors if d.dead_end]
        if len(dead) != 1:
            problems.append(f"transition {j} has {len(dead)} dead-end doors (need 1)")
            continue
        safe = next(d for d in doors if not d.dead_end)
        cx, cy = spec.rooms[j - 1].center
        if math.dist((cx, cy), dead.pop().midpoint) >= math.dist((cx, cy), safe.midpoint):
            problems.append(f"transition {j}: dead-end door is not the nearer exit")
        pockets = [p for p in spec.pockets if p.transition == j]
        if len(pockets) != 1:
            problems.append(f"transition {j} has {len(pockets)} dead-end pockets (need 1)")
            continue
        problems += _check_pocket(spec, j, pockets[0])
    if len(spec.pockets) != max(n - 1, 0):
        problems.append(f"{len(spec.pockets)} pockets for {n - 1} transitions")
    if spec.room_of(*spec.start_area.center) != 1:
        problems.append("start area is not in room 1")
    if spec.room_of(*spec.goal_area.center) != n:
        problems.append("goal area is not in the final room")
    points, seen = _reachable(spec, spec.start_area.center)
    in_goal = np.array([[spec.in_goal(*p) for p in row] for row in points])
    if not np.any(seen & in_goal):
        problems.append("goal area is not reachable from the start area")
    return MazeReport(n, max(n - 1, 0), len(spec.pockets), problems)


def _check_pocket(spec: MazeSpec, j: int, pocket: Pocket) -> list[str]:
    out = []
    poly = np.array(pocket.polygon)
    centre = tuple(poly.mean(axis=0))
    if spec.room_of(*centre) != j + 1:
        out.append(f"pocket of transition {j} is not inside room {j + 1}")
    dead = next(d for d in spec.doors_for(j) if d.dead_end)
    points, seen = _reachable(spec, centre, extra_walls=np.array([dead.segment]))
    escaped = [p for p in points[seen] if not pocket.contains(*p)]
    if escaped:
        out.append(f"pocket of transition {j} leaks into the rest of room {j + 1}")
    points, seen = _reachable(spec, centre)
    if not np.any([spec.room_of(*p) == j for p in points[seen]]):
        out.append(f"pocket of transition {j} is not reachable through its door")
    return out
