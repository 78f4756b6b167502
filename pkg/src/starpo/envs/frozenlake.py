"""Frozen Lake: slippery gridworld with a value-iteration oracle.

Each intended move is executed as-is with probability 1/3 and as one of
the two perpendicular moves with probability 1/3 each. Moving off the grid
leaves the player in place. Reaching the goal pays +1; everything else pays 0.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from ..errors import GenerationError
from ..vocab import Vocabulary
from .base import EnvSpec, Environment

Pos = tuple[int, int]

DIRECTIONS: dict[str, Pos] = {"Left": (0, -1), "Down": (1, 0), "Right": (0, 1), "Up": (-1, 0)}
ACTIONS = tuple(DIRECTIONS)
PERPENDICULAR = {"Up": ("Left", "Right"), "Down": ("Right", "Left"),
                 "Left": ("Down", "Up"), "Right": ("Up", "Down")}

PLAYER, EMPTY, HOLE, GOAL, PLAYER_IN_HOLE, PLAYER_ON_GOAL = "P", "_", "O", "G", "X", "√"
SYMBOLS = (PLAYER, EMPTY, HOLE, GOAL, PLAYER_IN_HOLE, PLAYER_ON_GOAL)


def slip_outcomes(direction: str) -> tuple[str, str, str]:
    """The three equally likely executed directions for an intended one."""
    return (direction, *PERPENDICULAR[direction])


@dataclass(frozen=True)
class LakeGrid:
    height: int
    width: int
    holes: frozenset[Pos]
    goal: Pos
    player: Pos

    def __post_init__(self):
        if self.goal in self.holes:
            raise ValueError("goal cannot be a hole")

    def inside(self, pos: Pos) -> bool:
        return 0 <= pos[0] < self.height and 0 <= pos[1] < self.width

    def shift(self, pos: Pos, direction: str) -> Pos:
        dr, dc = DIRECTIONS[direction]
        nxt = (pos[0] + dr, pos[1] + dc)
        return nxt if self.inside(nxt) else pos

    def cell(self, pos: Pos) -> str:
        if pos == self.player:
            if pos in self.holes:
                return PLAYER_IN_HOLE
            return PLAYER_ON_GOAL if pos == self.goal else PLAYER
        if pos in self.holes:
            return HOLE
        return GOAL if pos == self.goal else EMPTY


def render(grid: LakeGrid) -> str:
    return "\n".join("".join(grid.cell((r, c)) for c in range(grid.width)) for r in range(grid.height))


def parse(text: str) -> LakeGrid:
    rows = text.split("\n")
    holes, goal, player = set(), None, None
    for r, row in enumerate(rows):
        for c, ch in enumerate(row):
            if ch in (HOLE, PLAYER_IN_HOLE):
                holes.add((r, c))
            if ch in (GOAL, PLAYER_ON_GOAL):
                if goal is not None:
                    raise ValueError("more than one goal")
                goal = (r, c)
            if ch in (PLAYER, PLAYER_IN_HOLE, PLAYER_ON_GOAL):
                if player is not None:
                    raise ValueError("more than one player")
                player = (r, c)
            if ch not in SYMBOLS:
                raise ValueError(f"unknown symbol {ch!r} at row {r}, col {c}")
    if goal is None or player is None:
        raise ValueError("grid needs exactly one goal and one player")
    return LakeGrid(len(rows), len(rows[0]), frozenset(holes), goal, player)


def safe_path_exists(grid: LakeGrid) -> bool:
    seen = {grid.player}
    queue = deque([grid.player])
    while queue:
        pos = queue.popleft()
        if pos == grid.goal:
            return True
        for d in ACTIONS:
            nxt = grid.shift(pos, d)
            if nxt not in seen and nxt not in grid.holes:
                seen.add(nxt)
                queue.append(nxt)
    return False


def generate(seed: int, size: tuple[int, int] = (4, 4), hole_prob: float = 0.2,
             max_attempts: int = 200) -> LakeGrid:
    height, width = size
    cells = [(r, c) for r in range(height) for c in range(width)]
    for attempt in range(max_attempts):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), attempt]))
        start, goal = (cells[i] for i in rng.choice(len(cells), size=2, replace=False))
        holes = frozenset(p for p in cells if p not in (start, goal) and rng.random() < hole_prob)
        grid = LakeGrid(height, width, holes, goal, start)
        if safe_path_exists(grid):
            return grid
    raise GenerationError(f"no FrozenLake grid with a safe path for seed {seed}")


def value_iteration(grid: LakeGrid, horizon: int, *, all_horizons: bool = False) -> np.ndarray:
    """Optimal probability of reaching the goal within ``horizon`` actions.

    Returns an (height, width) array, or (horizon + 1, height, width) with
    ``all_horizons`` where index k holds the k-action-to-go values.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    values = np.zeros((horizon + 1, grid.height, grid.width))
    values[0][grid.goal] = 1.0
    for k in range(1, horizon + 1):
        prev = values[k - 1]
        for r in range(grid.height):
            for c in range(grid.width):
                pos = (r, c)
                if pos == grid.goal:
                    values[k][pos] = 1.0
                elif pos not in grid.holes:
                    values[k][pos] = max(
                        sum(prev[grid.shift(pos, d)] for d in slip_outcomes(a)) / 3.0 for a in ACTIONS)
    return values if all_horizons else values[horizon]


def greedy_action(grid: LakeGrid, values: np.ndarray, pos: Pos, remaining: int) -> str:
    """Best intended direction with ``remaining`` actions left, given ``all_horizons`` values."""
    prev = values[remaining - 1]
    scores = [sum(prev[grid.shift(pos, d)] for d in slip_outcomes(a)) for a in ACTIONS]
    return ACTIONS[int(np.argmax(scores))]


def lake_vocab(think_size: int = 4) -> Vocabulary:
    return Vocabulary.build(ACTIONS, list(SYMBOLS) + ["\n"], think_size)


class FrozenLakeEnv(Environment):
    name = "frozenlake"

    def __init__(self, spec: EnvSpec | None = None, vocab: Vocabulary | None = None, *,
                 size: tuple[int, int] = (4, 4), hole_prob: float = 0.2, **kwargs):
        super().__init__(spec or EnvSpec(ACTIONS), vocab or lake_vocab(), **kwargs)
        self.size = tuple(size)
        self.hole_prob = hole_prob
        self.grid: LakeGrid | None = None

    def _load(self, instance_id: int):
        return generate(self._seed_hint(instance_id), self.size, self.hole_prob)

    def _start(self, state) -> None:
        self.grid = state if isinstance(state, LakeGrid) else parse("\n".join(state))

    def _render(self) -> str:
        return render(self.grid)

    def _layout(self, state):
        return render(state).split("\n")

    def step_direction(self, direction: str):
        return self.step([direction])

    def slip(self, direction: str) -> str:
        """Draw the executed direction from the episode stream."""
        return slip_outcomes(direction)[int(self.rng.integers(3))]

    def _apply(self, action: str) -> tuple[float, bool, bool]:
        if action not in DIRECTIONS:
            return 0.0, False, False
        actual = self.slip(action)
        self.grid = replace(self.grid, player=self.grid.shift(self.grid.player, actual))
        if self.grid.player in self.grid.holes:
            return 0.0, True, False
        if self.grid.player == self.grid.goal:
            return 1.0, True, True
        return 0.0, False, False
