"""Gridworld task family with a scripted shortest-path expert.

Each task is a 9x9 (by default) grid whose obstacle generator and goal
distribution depend on ``task_id``. A :class:`DomainParam` fixes one concrete
layout plus per-station noise (``slip_prob``, ``obs_noise_std``); actors own
exactly one domain each.

Coordinates are ``(x, y)`` with ``y`` growing downward, so ``Down`` adds one
to ``y``.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

UP, DOWN, LEFT, RIGHT, STAY = range(5)
NUM_ACTIONS = 5
ACTION_NAMES = ("Up", "Down", "Left", "Right", "Stay")
MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))

DEFAULT_NUM_TASKS = 3
DEFAULT_SIZE = 9
DEFAULT_HORIZON = 80
DEFAULT_MIN_START_DISTANCE = 6

# (x, y) offsets of the 3x3 occupancy patch, row-major
_PATCH = tuple((dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1))


class Status(enum.IntEnum):
    RUNNING = 0
    SUCCESS = 1
    FAILURE = 2
    TIMEOUT = 3


class DomainError(ValueError):
    pass


def feature_dim(num_tasks: int = DEFAULT_NUM_TASKS) -> int:
    return 13 + num_tasks


@dataclass(frozen=True)
class DomainParam:
    task_id: int
    grid_width: int
    grid_height: int
    goal_cell: tuple[int, int]
    obstacle_seed: int
    slip_prob: float = 0.0
    obs_noise_std: float = 0.0
    num_tasks: int = DEFAULT_NUM_TASKS
    layout: str | None = None  # explicit "#"/"." rows; overrides the generator
    obstacles: np.ndarray = field(init=False, repr=False, compare=False)
    distances: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.task_id < self.num_tasks:
            raise DomainError(f"task_id {self.task_id} outside [0, {self.num_tasks})")
        if not 0.0 <= self.slip_prob <= 0.2:
            raise DomainError(f"slip_prob {self.slip_prob} outside [0, 0.2]")
        if self.obs_noise_std < 0:
            raise DomainError("obs_noise_std must be nonnegative")
        if self.layout is not None:
            grid = parse_layout(self.layout)
            if grid.shape != (self.grid_height, self.grid_width):
                raise DomainError(f"layout is {grid.shape[1]}x{grid.shape[0]}, "
                                  f"expected {self.grid_width}x{self.grid_height}")
        else:
            grid = _generate_obstacles(self.task_id, self.obstacle_seed,
                                       self.grid_width, self.grid_height)
        gx, gy = self.goal_cell
        if not (0 <= gx < self.grid_width and 0 <= gy < self.grid_height) or grid[gy, gx]:
            raise DomainError(f"goal {self.goal_cell} is off-grid or blocked")
        grid.setflags(write=False)
        dist = bfs_distances(grid, self.goal_cell)
        if not np.all((dist >= 0) | grid):
            raise DomainError("some free cell cannot reach the goal")
        dist.setflags(write=False)
        object.__setattr__(self, "obstacles", grid)
        object.__setattr__(self, "distances", dist)

    def __eq__(self, other):
        if not isinstance(other, DomainParam):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def _key(self):
        return (self.task_id, self.grid_width, self.grid_height, self.goal_cell,
                self.obstacle_seed, self.slip_prob, self.obs_noise_std, self.num_tasks,
                self.layout)

    @property
    def feature_dim(self) -> int:
        return feature_dim(self.num_tasks)

    def is_free(self, cell) -> bool:
        x, y = cell
        return 0 <= x < self.grid_width and 0 <= y < self.grid_height and not self.obstacles[y, x]

    def free_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(~self.obstacles)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    def distance(self, cell) -> int:
        x, y = cell
        return int(self.distances[y, x])


def parse_layout(text: str) -> np.ndarray:
    """Inverse of :func:`render` for the obstacle map (``#`` blocked, anything else free)."""
    rows = [r for r in text.strip("\n").splitlines()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise DomainError("layout rows must be nonempty and of equal length")
    return np.array([[c == "#" for c in r] for r in rows], dtype=bool)


def bfs_distances(obstacles: np.ndarray, goal) -> np.ndarray:
    """Shortest-path step counts to ``goal``; unreachable cells get -1."""
    h, w = obstacles.shape
    dist = np.full((h, w), -1, dtype=np.int64)
    gx, gy = goal
    dist[gy, gx] = 0
    queue = deque([(gx, gy)])
    while queue:
        x, y = queue.popleft()
        for dx, dy in MOVES[:4]:
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and not obstacles[ny, nx] and dist[ny, nx] < 0:
                dist[ny, nx] = dist[y, x] + 1
                queue.append((nx, ny))
    return dist


def _cap(grid, x0, y0, inner_w, depth):
    """Concave block open on the side facing away from the (top-row) goals."""
    h, w = grid.shape
    x1 = x0 + inner_w + 1
    if x1 >= w or y0 + depth >= h:
        return
    grid[y0, x0:x1 + 1] = True
    grid[y0:y0 + depth + 1, x0] = True
    grid[y0:y0 + depth + 1, x1] = True


def _generate_obstacles(task_id: int, obstacle_seed: int, w: int, h: int) -> np.ndarray:
    rng = np.random.default_rng([task_id, obstacle_seed & 0xFFFFFFFFFFFFFFFF])
    grid = np.zeros((h, w), dtype=bool)
    # task kind sets the cap shape: (inner width, depth)
    inner, depth = ((1, 1), (2, 1), (3, 2))[task_id % 3]
    _cap(grid, int(rng.integers(0, w - inner - 1)), int(rng.integers(2, h - 3)), inner, depth)
    grid.flat[rng.choice(w * h, size=2, replace=False)] = True
    return grid


def _goal_region(task_id: int, w: int, h: int) -> list[tuple[int, int]]:
    third = max(1, w // 3)
    lo = (task_id % 3) * third
    hi = w if task_id % 3 == 2 else lo + third
    return [(x, y) for x in range(lo, hi) for y in range(0, 2)]


def sample_domain(task_id: int, seed: int, *, num_tasks: int = DEFAULT_NUM_TASKS,
                  width: int = DEFAULT_SIZE, height: int = DEFAULT_SIZE,
                  slip_range=(0.0, 0.1), noise_range=(0.0, 0.03),
                  max_attempts: int = 1000) -> DomainParam:
    """Deterministically draw one connected domain for ``(task_id, seed)``.

    Layouts are rejected and resampled until every free cell reaches the goal.
    """
    if not 0 <= task_id < num_tasks:
        raise DomainError(f"task_id {task_id} outside [0, {num_tasks})")
    rng = np.random.default_rng([task_id, seed & 0xFFFFFFFFFFFFFFFF, 0x5EED])
    slip = float(rng.uniform(*slip_range)) if slip_range[1] > slip_range[0] else float(slip_range[0])
    noise = float(rng.uniform(*noise_range)) if noise_range[1] > noise_range[0] else float(noise_range[0])
    region = _goal_region(task_id, width, height)
    for _ in range(max_attempts):
        obstacle_seed = int(rng.integers(0, 2**63))
        grid = _generate_obstacles(task_id, obstacle_seed, width, height)
        candidates = [c for c in region if not grid[c[1], c[0]]]
        if not candidates:
            continue
        goal = candidates[int(rng.integers(len(candidates)))]
        dist = bfs_distances(grid, goal)
        if np.all((dist >= 0) | grid):
            return DomainParam(task_id, width, height, goal, obstacle_seed,
                               slip, noise, num_tasks)
    raise DomainError(f"no connected layout for task {task_id} after {max_attempts} attempts")


@dataclass(frozen=True)
class EnvState:
    agent_cell: tuple[int, int]
    goal_cell: tuple[int, int]
    step_count: int = 0
    horizon: int = DEFAULT_HORIZON


@dataclass(frozen=True)
class StepResult:
    state: EnvState
    next_observation: np.ndarray
    reward: float
    status: Status


def reset(domain: DomainParam, rng: np.random.Generator, horizon: int = DEFAULT_HORIZON,
          min_distance: int = DEFAULT_MIN_START_DISTANCE) -> EnvState:
    """Start from a uniformly drawn free cell at least ``min_distance`` from the goal."""
    cells = [c for c in domain.free_cells() if domain.distance(c) >= max(1, min_distance)]
    if not cells:
        cells = [c for c in domain.free_cells() if c != domain.goal_cell]
    start = cells[int(rng.integers(len(cells)))]
    return EnvState(start, domain.goal_cell, 0, horizon)


def observe(state: EnvState, domain: DomainParam, rng: np.random.Generator | None = None) -> np.ndarray:
    """Feature vector: agent pos, goal pos, 3x3 occupancy, task one-hot."""
    w, h = domain.grid_width, domain.grid_height
    ax, ay = state.agent_cell
    gx, gy = state.goal_cell
    pos = np.array([ax / (w - 1), ay / (h - 1), gx / (w - 1), gy / (h - 1)])
    if rng is not None and domain.obs_noise_std > 0:
        pos = pos + rng.normal(0.0, domain.obs_noise_std, size=4)
    occ = [0.0 if domain.is_free((ax + dx, ay + dy)) else 1.0 for dx, dy in _PATCH]
    onehot = np.zeros(domain.num_tasks)
    onehot[domain.task_id] = 1.0
    return np.concatenate([pos, occ, onehot])


def step(state: EnvState, action: int, domain: DomainParam, rng: np.random.Generator) -> StepResult:
    if state.step_count >= state.horizon:
        raise ValueError("episode already hit its horizon")
    executed = int(action)
    if domain.slip_prob > 0 and rng.random() < domain.slip_prob:
        executed = int(rng.integers(4))
    dx, dy = MOVES[executed]
    x, y = state.agent_cell
    nxt = (x + dx, y + dy)
    if not domain.is_free(nxt):
        nxt = (x, y)
    new_state = EnvState(nxt, state.goal_cell, state.step_count + 1, state.horizon)
    if nxt == state.goal_cell:
        status, reward = Status.SUCCESS, 1.0
    elif new_state.step_count >= state.horizon:
        status, reward = Status.TIMEOUT, 0.0
    else:
        status, reward = Status.RUNNING, 0.0
    return StepResult(new_state, observe(new_state, domain, rng), reward, status)


def expert_action(state: EnvState, domain: DomainParam) -> int:
    """First move of a BFS shortest path, ties broken Up < Down < Left < Right."""
    d = domain.distance(state.agent_cell)
    if d == 0:
        return STAY
    x, y = state.agent_cell
    for a in (UP, DOWN, LEFT, RIGHT):
        dx, dy = MOVES[a]
        nxt = (x + dx, y + dy)
        if domain.is_free(nxt) and domain.distance(nxt) == d - 1:
            return a
    raise DomainError(f"cell {state.agent_cell} has no path to the goal")


def intervention_gate(recent_distances, k: int) -> bool:
    """True when the distance to goal made no net progress over the last ``k`` readings."""
    if k < 2:
        raise ValueError("gate window k must be >= 2")
    if len(recent_distances) < k:
        return False
    window = list(recent_distances)[-k:]
    return window[-1] >= window[0]


class InterventionGate:
    """Stateful gate with release hysteresis.

    Engages when :func:`intervention_gate` fires; the expert then keeps control
    until the distance is two below the best distance seen in the triggering
    window (or the goal is reached).
    """

    def __init__(self, k: int = 3, release_margin: int = 2):
        if k < 2:
            raise ValueError("gate window k must be >= 2")
        self.k = k
        self.release_margin = release_margin
        self.history: deque[int] = deque(maxlen=k)
        self.engaged = False
        self._release_at = 0

    def update(self, distance: int) -> bool:
        """Feed the current distance; returns whether the expert acts next."""
        if self.engaged:
            if distance <= self._release_at:
                self.engaged = False
                self.history.clear()
                self.history.append(distance)
            return self.engaged
        self.history.append(distance)
        if intervention_gate(self.history, self.k):
            self.engaged = True
            self._release_at = max(0, min(self.history) - self.release_margin)
        return self.engaged


def render(domain: DomainParam, agent=None) -> str:
    rows = []
    for y in range(domain.grid_height):
        row = []
        for x in range(domain.grid_width):
            if agent is not None and (x, y) == tuple(agent):
                row.append("A")
            elif (x, y) == domain.goal_cell:
                row.append("G")
            elif domain.obstacles[y, x]:
                row.append("#")
            else:
                row.append(".")
        rows.append("".join(row))
    return "\n".join(rows) + "\n"
