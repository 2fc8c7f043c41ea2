"""Planar robot arenas: a holonomic disc robot among wall segments.

The robot has five rangefinders and four 90-degree pie-slice sensors that
detect the food item. Three reward functions are provided: locomotion
(forward x velocity), deceptive maze (telescoping progress towards the food)
and stepping stones (ordered waypoint crossing).

Everything that runs per step is vectorised over a batch of robots so whole
populations can be simulated at once; the scalar helpers are thin wrappers.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

DT = 0.05
V_MAX = 2.0
RADIUS = 0.15
RANGE = 5.0
BEARINGS_DEG = (-90.0, -45.0, 0.0, 45.0, 90.0)
EPISODE_STEPS = 1000
CROSSING_DISTANCE = 0.1
FOOD_REWARD = 1000.0
MIN_STONE_SPACING = 0.3

LOCOMOTION, DECEPTIVE, STONES = "locomotion", "deceptive", "stones"
SECTORS = ("E", "N", "W", "S")


class ArenaParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class ArenaValidationError(ValueError):
    def __init__(self, rule: str, msg: str):
        super().__init__(f"{rule}: {msg}")
        self.rule = rule


@dataclass
class Arena:
    bounds: tuple[float, float, float, float]
    start: tuple[float, float, float]
    food: tuple[float, float]
    walls: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    stones: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    solved: float | None = None
    name: str = ""

    def __post_init__(self):
        self.walls = np.asarray(self.walls, dtype=np.float64).reshape(-1, 4)
        self.stones = np.asarray(self.stones, dtype=np.float64).reshape(-1, 2)
        self.bounds = tuple(float(v) for v in self.bounds)
        self.start = tuple(float(v) for v in self.start)
        self.food = tuple(float(v) for v in self.food)

    def __eq__(self, other):
        if not isinstance(other, Arena):
            return NotImplemented
        return (self.bounds == other.bounds and self.start == other.start and self.food == other.food
                and np.array_equal(self.walls, other.walls) and np.array_equal(self.stones, other.stones)
                and self.solved == other.solved and self.name == other.name)

    @property
    def extent(self) -> np.ndarray:
        x0, y0, x1, y1 = self.bounds
        return np.array([x1 - x0, y1 - y0])

    def normalize(self, points) -> np.ndarray:
        """Map positions into [0, 1]^2 by the bounding box, clamping outliers."""
        x0, y0, _, _ = self.bounds
        p = (np.asarray(points, dtype=np.float64) - np.array([x0, y0])) / self.extent
        return np.clip(p, 0.0, 1.0)

    def waypoints(self) -> np.ndarray:
        """Stones in route order followed by the food."""
        return np.vstack([self.stones, np.array(self.food)[None, :]])

    def leg_lengths(self) -> np.ndarray:
        pts = np.vstack([np.array(self.start[:2])[None, :], self.waypoints()])
        return np.linalg.norm(np.diff(pts, axis=0), axis=1)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

_ARITY = {"bounds": 4, "start": 3, "food": 2, "wall": 4, "stone": 2, "solved": 1}


def parse_arena(text: str, validate: bool = True) -> Arena:
    fields: dict[str, list] = {"wall": [], "stone": []}
    name = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        if key == "name":
            name = " ".join(rest)
            continue
        if key not in _ARITY:
            raise ArenaParseError(lineno, f"unknown keyword {key!r}")
        if len(rest) != _ARITY[key]:
            raise ArenaParseError(lineno, f"{key} takes {_ARITY[key]} numbers, got {len(rest)}")
        try:
            vals = [float(v) for v in rest]
        except ValueError:
            raise ArenaParseError(lineno, f"non-numeric value in {line!r}") from None
        if not all(math.isfinite(v) for v in vals):
            raise ArenaParseError(lineno, "values must be finite")
        if key in ("wall", "stone"):
            fields[key].append(vals)
        elif key in fields:
            raise ArenaParseError(lineno, f"duplicate {key}")
        else:
            fields[key] = vals
    for key in ("bounds", "start", "food"):
        if key not in fields:
            raise ArenaParseError(0, f"missing {key}")
    arena = Arena(
        bounds=tuple(fields["bounds"]),
        start=tuple(fields["start"]),
        food=tuple(fields["food"]),
        walls=np.array(fields["wall"]).reshape(-1, 4),
        stones=np.array(fields["stone"]).reshape(-1, 2),
        solved=fields["solved"][0] if "solved" in fields else None,
        name=name,
    )
    if validate:
        validate_arena(arena)
    return arena


load_arena = parse_arena


def serialize_arena(arena: Arena) -> str:
    def fmt(vals):
        return " ".join(repr(float(v)) for v in vals)

    lines = []
    if arena.name:
        lines.append(f"name {arena.name}")
    lines.append(f"bounds {fmt(arena.bounds)}")
    lines.append(f"start {fmt(arena.start)}")
    lines.append(f"food {fmt(arena.food)}")
    if arena.solved is not None:
        lines.append(f"solved {fmt([arena.solved])}")
    lines += [f"wall {fmt(w)}" for w in arena.walls]
    lines += [f"stone {fmt(s)}" for s in arena.stones]
    return "\n".join(lines) + "\n"


def validate_arena(arena: Arena, radius: float = RADIUS) -> None:
    x0, y0, x1, y1 = arena.bounds
    if not (x1 > x0 and y1 > y0):
        raise ArenaValidationError("bounds", "upper corner must exceed lower corner")
    named = [("start", np.array(arena.start[:2])), ("food", np.array(arena.food))]
    named += [(f"stone {k + 1}", s) for k, s in enumerate(arena.stones)]
    for label, p in named:
        if not (x0 < p[0] < x1 and y0 < p[1] < y1):
            raise ArenaValidationError("inside-bounds", f"{label} at {tuple(p)} lies outside the bounds")
        if len(arena.walls):
            d = point_segment_distance(p[None, :], arena.walls).min()
            if d < radius:
                raise ArenaValidationError("wall-clearance", f"{label} is {d:.3f} from a wall (< {radius})")
    if len(arena.stones):
        pts = arena.waypoints()
        diff = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        iu = np.triu_indices(len(pts), 1)
        if len(iu[0]) and diff[iu].min() < MIN_STONE_SPACING:
            raise ArenaValidationError("stone-spacing", f"stones closer than {MIN_STONE_SPACING}")


def shipped_arena(name: str) -> Arena:
    text = resources.files("neurotransfer").joinpath("arenas").joinpath(f"{name}.txt").read_text()
    return parse_arena(text)


def shipped_arena_path(name: str) -> str:
    return str(resources.files("neurotransfer").joinpath("arenas").joinpath(f"{name}.txt"))


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def point_segment_distance(points, walls) -> np.ndarray:
    """(B, W) distances from each point to each wall segment."""
    p = np.asarray(points, dtype=np.float64)[:, None, :]
    a = walls[None, :, :2]
    e = walls[None, :, 2:] - walls[None, :, :2]
    ee = np.sum(e * e, axis=-1)
    u = np.where(ee > 0, np.sum((p - a) * e, axis=-1) / np.where(ee > 0, ee, 1.0), 0.0)
    u = np.clip(u, 0.0, 1.0)
    closest = a + u[..., None] * e
    return np.linalg.norm(p - closest, axis=-1)


def ray_distances(origins, directions, walls, max_range: float = RANGE) -> np.ndarray:
    """(B, M) distance from each origin along each unit direction to the nearest wall."""
    o = np.asarray(origins, dtype=np.float64)[:, None, None, :]
    d = np.asarray(directions, dtype=np.float64)
    d = d[None, :, None, :] if d.ndim == 2 else d[:, :, None, :]
    if len(walls) == 0:
        return np.full((o.shape[0], d.shape[1]), float(max_range))
    a = walls[None, None, :, :2]
    e = walls[None, None, :, 2:] - walls[None, None, :, :2]
    den = _cross(d, e)
    ok = np.abs(den) > 1e-12
    safe = np.where(ok, den, 1.0)
    ao = a - o
    t = _cross(ao, e) / safe
    u = _cross(ao, d) / safe
    hit = ok & (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
    t = np.where(hit, t, np.inf)
    return np.minimum(t.min(axis=-1), max_range)


def ray_distance(origin, direction, walls, max_range: float = RANGE) -> float:
    walls = np.asarray(walls, dtype=np.float64).reshape(-1, 4)
    return float(ray_distances(np.asarray(origin)[None, :], np.asarray(direction)[None, :], walls, max_range)[0, 0])


def sector_of(bearing: np.ndarray) -> np.ndarray:
    """Sector index 0..3 (E, N, W, S) of a relative bearing in radians.

    Sector k spans [k*90 - 45, k*90 + 45) degrees, so a bearing exactly on a
    boundary falls in the counter-clockwise neighbour.
    """
    quarter = np.floor((np.asarray(bearing) + math.pi / 4) / (math.pi / 2))
    return (quarter.astype(np.int64)) % 4


def pie_slices(positions, headings, target) -> np.ndarray:
    """(B, 4) binary readings; occlusion by walls is ignored."""
    pos = np.asarray(positions, dtype=np.float64)
    delta = np.asarray(target, dtype=np.float64) - pos
    bearing = np.arctan2(delta[:, 1], delta[:, 0]) - np.asarray(headings, dtype=np.float64)
    out = np.zeros((len(pos), 4))
    out[np.arange(len(pos)), sector_of(bearing)] = 1.0
    return out


def pie_slice(position, heading: float, target, sector: int) -> int:
    return int(pie_slices(np.asarray(position)[None, :], np.array([heading]), target)[0, sector])


def _sweep(p: np.ndarray, d: np.ndarray, walls: np.ndarray, r: float) -> np.ndarray:
    """Largest fraction t in [0, 1] of displacement d before a disc of radius r touches a wall."""
    B = len(p)
    if len(walls) == 0:
        return np.ones(B)
    P = p[:, None, :]
    D = d[:, None, :]
    A = walls[None, :, :2]
    E = walls[None, :, 2:] - walls[None, :, :2]
    t_best = np.ones((B, len(walls)))
    aa = np.sum(D * D, axis=-1)
    moving = aa > 0
    # end caps
    for end in (A, A + E):
        f = P - end
        b = 2.0 * np.sum(f * D, axis=-1)
        c = np.sum(f * f, axis=-1) - r * r
        disc = b * b - 4.0 * aa * c
        approach = moving & (b < 0.0)
        root = (-b - np.sqrt(np.maximum(disc, 0.0))) / np.where(moving, 2.0 * aa, 1.0)
        root = np.where(c <= 0.0, 0.0, root)
        valid = approach & (disc >= 0.0) & (root <= 1.0)
        t_best = np.where(valid, np.minimum(t_best, np.maximum(root, 0.0)), t_best)
    # segment faces
    L = np.linalg.norm(E, axis=-1)
    has_len = L > 0
    U = E / np.where(has_len, L, 1.0)[..., None]
    N = np.stack([-U[..., 1], U[..., 0]], axis=-1)
    s0 = np.sum((P - A) * N, axis=-1)
    sd = np.sum(D * N, axis=-1)
    side = np.where(s0 >= 0.0, 1.0, -1.0)
    toward = side * sd < 0.0
    gap = side * s0 - r  # distance from the face offset by r
    t_face = np.where(toward, np.maximum(gap, 0.0) / np.where(toward, -side * sd, 1.0), np.inf)
    contact = P + np.where(toward, t_face, 0.0)[..., None] * D
    u = np.sum((contact - A) * U, axis=-1)
    valid = has_len & toward & (t_face <= 1.0) & (u >= 0.0) & (u <= L)
    t_best = np.where(valid, np.minimum(t_best, t_face), t_best)
    return t_best.min(axis=1)


def move_robots(positions, actions, walls, dt: float = DT, v_max: float = V_MAX, radius: float = RADIUS) -> np.ndarray:
    """Apply one holonomic step to a batch of robots.

    ``actions`` are (B, 4) actuator commands ordered (E, N, W, S). Each axis
    moves separately and stops at first contact, so motion along a wall is
    still possible when the other axis is blocked.
    """
    pos = np.array(positions, dtype=np.float64)
    a = np.clip(np.asarray(actions, dtype=np.float64), -1.0, 1.0)
    lim = dt * v_max
    step = np.stack([a[:, 0] - a[:, 2], a[:, 1] - a[:, 3]], axis=1) * lim
    step = np.clip(step, -lim, lim)
    for axis in (0, 1):
        d = np.zeros_like(step)
        d[:, axis] = step[:, axis]
        t = _sweep(pos, d, walls, radius)
        pos = pos + t[:, None] * d
    return pos


@dataclass
class RobotState:
    position: np.ndarray
    heading: float = 0.0
    radius: float = RADIUS


def step_robot(state: RobotState, actions: Sequence[float], arena: Arena, dt: float = DT, v_max: float = V_MAX) -> RobotState:
    act = np.asarray(actions, dtype=np.float64)
    if act.shape != (4,):
        raise ValueError(f"expected 4 actuator values, got shape {act.shape}")
    pos = move_robots(np.asarray(state.position)[None, :], act[None, :], arena.walls, dt, v_max, state.radius)[0]
    return RobotState(pos, 0.0, state.radius)


# ---------------------------------------------------------------------------
# rewards
# ---------------------------------------------------------------------------


def reward_locomotion(prev_pos, new_pos, dt: float = DT):
    return (np.asarray(new_pos)[..., 0] - np.asarray(prev_pos)[..., 0]) / dt


def reward_deceptive(prev_pos, new_pos, food, d0: float):
    food = np.asarray(food, dtype=np.float64)
    before = np.linalg.norm(np.asarray(prev_pos) - food, axis=-1)
    after = np.linalg.norm(np.asarray(new_pos) - food, axis=-1)
    return (before - after) / d0


@dataclass
class StoneProgress:
    crossed: int = 0
    food_reached: bool = False

    @property
    def active(self) -> int:
        return self.crossed


def stones_reward_batch(positions, crossed, food_reached, waypoints, legs, food):
    """Vectorised stepping-stone reward.

    ``waypoints`` are the stones followed by the food; reaching the food
    after every stone counts as the final crossing. The food bonus is paid
    once, on first contact, whatever the stone progress.
    Returns (reward, crossed', food_reached').
    """
    pos = np.asarray(positions, dtype=np.float64)
    crossed = np.array(crossed, dtype=np.int64)
    n_wp = len(waypoints)
    remaining = crossed < n_wp
    idx = np.minimum(crossed, n_wp - 1)
    dist = np.linalg.norm(pos - waypoints[idx], axis=1)
    crossed = crossed + (remaining & (dist < CROSSING_DISTANCE))
    remaining = crossed < n_wp
    idx = np.minimum(crossed, n_wp - 1)
    dist = np.linalg.norm(pos - waypoints[idx], axis=1)
    progress = np.where(remaining, np.clip(1.0 - dist / legs[idx], 0.0, 1.0), 1.0)
    at_food = np.linalg.norm(pos - np.asarray(food), axis=1) < CROSSING_DISTANCE
    bonus = at_food & ~np.asarray(food_reached, dtype=bool)
    reward = crossed + progress + FOOD_REWARD * bonus
    return reward, crossed, np.asarray(food_reached, dtype=bool) | at_food


def reward_stones(position, progress: StoneProgress, arena: Arena) -> tuple[float, StoneProgress]:
    r, c, f = stones_reward_batch(np.asarray(position)[None, :], [progress.crossed], [progress.food_reached],
                                  arena.waypoints(), arena.leg_lengths(), arena.food)
    return float(r[0]), StoneProgress(int(c[0]), bool(f[0]))


# ---------------------------------------------------------------------------
# batched environment
# ---------------------------------------------------------------------------


class ArenaEnv:
    """A batch of independent robots in one arena.

    Observation: 5 normalised rangefinder readings, 4 pie-slice food
    sensors, and the bounds-normalised position; goal-conditioned variants
    append the normalised coordinates of the active stepping stone.
    """

    def __init__(self, arena: Arena, task: str, n_envs: int = 1, goal_conditioned: bool = False,
                 episode_steps: int = EPISODE_STEPS):
        if task not in (LOCOMOTION, DECEPTIVE, STONES):
            raise ValueError(f"unknown arena task {task!r}")
        if task == STONES and len(arena.stones) == 0:
            raise ValueError("stepping-stones task needs an arena with stones")
        if goal_conditioned and task != STONES:
            raise ValueError("goal conditioning needs stepping stones to define goals")
        self.arena = arena
        self.task = task
        self.n_envs = n_envs
        self.goal_conditioned = goal_conditioned
        self.episode_steps = episode_steps
        rad = np.deg2rad(BEARINGS_DEG)
        self.directions = np.stack([np.cos(rad), np.sin(rad)], axis=1)
        self.food = np.array(arena.food)
        self.start = np.array(arena.start[:2])
        self.d0 = float(np.linalg.norm(self.start - self.food))
        self.waypoints = arena.waypoints()
        self.legs = arena.leg_lengths()
        self.reset()

    @property
    def obs_dim(self) -> int:
        return 11 + (2 if self.goal_conditioned else 0)

    def reset(self) -> np.ndarray:
        self.pos = np.tile(self.start, (self.n_envs, 1))
        self.t = np.zeros(self.n_envs, dtype=np.int64)
        self.crossed = np.zeros(self.n_envs, dtype=np.int64)
        self.food_reached = np.zeros(self.n_envs, dtype=bool)
        self.done = np.zeros(self.n_envs, dtype=bool)
        return self.observe()

    def reset_where(self, mask) -> np.ndarray:
        mask = np.asarray(mask, dtype=bool)
        self.pos[mask] = self.start
        self.t[mask] = 0
        self.crossed[mask] = 0
        self.food_reached[mask] = False
        self.done[mask] = False
        return self.observe()

    def goal(self) -> np.ndarray:
        idx = np.minimum(self.crossed, len(self.waypoints) - 1)
        return self.arena.normalize(self.waypoints[idx])

    def observe(self) -> np.ndarray:
        ranges = ray_distances(self.pos, self.directions, self.arena.walls) / RANGE
        pies = pie_slices(self.pos, np.zeros(self.n_envs), self.food)
        x0, y0, _, _ = self.arena.bounds
        where = (self.pos - np.array([x0, y0])) / self.arena.extent
        parts = [ranges, pies, where]
        if self.goal_conditioned:
            parts.append(self.goal())
        return np.concatenate(parts, axis=1)

    def step(self, actions) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Advance every robot; finished robots stay frozen with zero reward."""
        actions = np.asarray(actions, dtype=np.float64).reshape(self.n_envs, 4)
        live = ~self.done
        prev = self.pos.copy()
        moved = move_robots(self.pos, actions, self.arena.walls)
        self.pos = np.where(live[:, None], moved, self.pos)
        if self.task == LOCOMOTION:
            reward = reward_locomotion(prev, self.pos)
            finished = np.zeros(self.n_envs, dtype=bool)
        elif self.task == DECEPTIVE:
            reward = reward_deceptive(prev, self.pos, self.food, self.d0)
            finished = np.linalg.norm(self.pos - self.food, axis=1) < CROSSING_DISTANCE
        else:
            reward, crossed, food = stones_reward_batch(self.pos, self.crossed, self.food_reached,
                                                        self.waypoints, self.legs, self.food)
            self.crossed = np.where(live, crossed, self.crossed)
            self.food_reached = np.where(live, food, self.food_reached)
            finished = np.zeros(self.n_envs, dtype=bool)
        reward = np.where(live, reward, 0.0)
        self.t = self.t + live
        self.done = self.done | (live & (finished | (self.t >= self.episode_steps)))
        return self.observe(), reward, self.done.copy()


def rollout(env: ArenaEnv, act_fn, record: bool = False):
    """Run every robot in ``env`` to the end of its episode.

    ``act_fn(obs) -> (B, 4)`` actions. Returns (returns, final positions,
    trajectory or None) where the trajectory is a list of per-step
    (positions, rewards, crossed) tuples.
    """
    obs = env.reset()
    total = np.zeros(env.n_envs)
    traj = [] if record else None
    while not env.done.all():
        obs, r, _ = env.step(act_fn(obs))
        total += r
        if record:
            traj.append((env.pos.copy(), r.copy(), env.crossed.copy()))
    return total, env.pos.copy(), traj


def trajectory_csv(traj, env_index: int = 0) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "x", "y", "reward", "crossed"])
    for t, (pos, r, crossed) in enumerate(traj, start=1):
        w.writerow([t, repr(float(pos[env_index, 0])), repr(float(pos[env_index, 1])),
                    repr(float(r[env_index])), int(crossed[env_index])])
    return buf.getvalue()


class WaypointPolicy:
    """Scripted controller that drives a robot through a list of points in turn."""

    def __init__(self, points, tolerance: float = 0.02, dt: float = DT, v_max: float = V_MAX):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        self.tolerance = tolerance
        self.lim = dt * v_max
        self.index = 0

    def __call__(self, position) -> np.ndarray:
        position = np.asarray(position, dtype=np.float64)
        while self.index < len(self.points) - 1 and np.linalg.norm(self.points[self.index] - position) < self.tolerance:
            self.index += 1
        u = np.clip((self.points[self.index] - position) / self.lim, -1.0, 1.0)
        return np.array([max(u[0], 0.0), max(u[1], 0.0), max(-u[0], 0.0), max(-u[1], 0.0)])
