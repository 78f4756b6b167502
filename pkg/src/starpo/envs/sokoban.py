"""Sokoban: push-only box puzzle with reverse-play generation and a BFS oracle.

Rewards per primitive action: -0.1 for the action itself, +1 for each box
that lands on a target, -1 for each box pushed off a target, and +10 once
every box rests on a target (which ends the episode with success).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import GenerationError
from ..vocab import Vocabulary
from .base import EnvSpec, Environment

Pos = tuple[int, int]

DIRECTIONS: dict[str, Pos] = {"Up": (-1, 0), "Down": (1, 0), "Left": (0, -1), "Right": (0, 1)}
ACTIONS = tuple(DIRECTIONS)

# canonical symbols: wall, empty, target, box on target, box, player, player on target
WALL, EMPTY, TARGET, BOX_ON_TARGET, BOX, PLAYER, PLAYER_ON_TARGET = "#", "_", "O", "√", "X", "P", "S"
SYMBOLS = (WALL, EMPTY, TARGET, BOX_ON_TARGET, BOX, PLAYER, PLAYER_ON_TARGET)
NEW_VOCAB = {"#": "W", "_": "G", "O": "C", "√": "K", "X": "B", "P": "A", "S": "E"}

ACTION_COST = -0.1
BOX_ON_REWARD = 1.0
BOX_OFF_REWARD = -1.0
SOLVED_REWARD = 10.0


@dataclass(frozen=True)
class SokobanVariant:
    dims: tuple[int, int] = (6, 6)
    num_boxes: int = 1
    vocab_map: dict[str, str] | None = None
    reverse_steps: int = 40

    def __post_init__(self):
        if self.vocab_map is not None:
            if set(self.vocab_map) != set(SYMBOLS) or len(set(self.vocab_map.values())) != len(SYMBOLS):
                raise ValueError("vocab_map must be a bijection over the 7 grid symbols")
        if self.dims[0] < 5 or self.dims[1] < 5:
            raise ValueError("grid must be at least 5x5")
        if self.num_boxes < 1:
            raise ValueError("need at least one box")


DEFAULT = SokobanVariant()
LARGE = SokobanVariant(dims=(8, 8), num_boxes=2, reverse_steps=80)
NEWVOCAB = SokobanVariant(vocab_map=NEW_VOCAB)
VARIANTS = {"default": DEFAULT, "large": LARGE, "newvocab": NEWVOCAB}


@dataclass(frozen=True)
class SokobanGrid:
    height: int
    width: int
    walls: frozenset[Pos]
    targets: frozenset[Pos]
    boxes: frozenset[Pos]
    player: Pos
    steps_taken: int = field(default=0, compare=False)

    def __post_init__(self):
        if len(self.boxes) != len(self.targets) or not self.targets:
            raise ValueError("box count must equal target count and be >= 1")
        for r in range(self.height):
            for c in range(self.width):
                if (r in (0, self.height - 1) or c in (0, self.width - 1)) and (r, c) not in self.walls:
                    raise ValueError("outer boundary must be wall")
        if self.player in self.walls or self.player in self.boxes:
            raise ValueError("player must stand on a free cell")
        if self.boxes & self.walls or self.targets & self.walls:
            raise ValueError("boxes and targets cannot sit on walls")

    @property
    def solved(self) -> bool:
        return self.boxes == self.targets

    @property
    def on_target(self) -> int:
        return len(self.boxes & self.targets)

    def cell(self, pos: Pos) -> str:
        if pos in self.walls:
            return WALL
        t = pos in self.targets
        if pos == self.player:
            return PLAYER_ON_TARGET if t else PLAYER
        if pos in self.boxes:
            return BOX_ON_TARGET if t else BOX
        return TARGET if t else EMPTY

    def move(self, direction: str) -> tuple["SokobanGrid", int]:
        """Apply one move; returns the new grid and the change in boxes on targets.

        Blocked moves leave the layout alone but still count as a step.
        """
        dr, dc = DIRECTIONS[direction]
        pr, pc = self.player
        nxt = (pr + dr, pc + dc)
        blocked = replace(self, steps_taken=self.steps_taken + 1)
        if nxt in self.walls:
            return blocked, 0
        boxes = self.boxes
        if nxt in boxes:
            beyond = (nxt[0] + dr, nxt[1] + dc)
            if beyond in self.walls or beyond in boxes:
                return blocked, 0
            boxes = (boxes - {nxt}) | {beyond}
        delta = len(boxes & self.targets) - self.on_target
        return replace(self, boxes=boxes, player=nxt, steps_taken=self.steps_taken + 1), delta


def render(grid: SokobanGrid, vocab_map: dict[str, str] | None = None) -> str:
    rows = []
    for r in range(grid.height):
        row = [grid.cell((r, c)) for c in range(grid.width)]
        if vocab_map:
            row = [vocab_map[s] for s in row]
        rows.append("".join(row))
    return "\n".join(rows)


def parse(text: str, vocab_map: dict[str, str] | None = None) -> SokobanGrid:
    """Inverse of :func:`render`."""
    inverse = {v: k for k, v in vocab_map.items()} if vocab_map else None
    rows = text.split("\n")
    walls, targets, boxes = set(), set(), set()
    player = None
    for r, row in enumerate(rows):
        for c, ch in enumerate(row):
            s = inverse[ch] if inverse else ch
            pos = (r, c)
            if s == WALL:
                walls.add(pos)
            elif s in (TARGET, BOX_ON_TARGET, PLAYER_ON_TARGET):
                targets.add(pos)
            elif s not in (EMPTY, BOX, PLAYER):
                raise ValueError(f"unknown symbol {ch!r} at row {r}, col {c}")
            if s in (BOX, BOX_ON_TARGET):
                boxes.add(pos)
            if s in (PLAYER, PLAYER_ON_TARGET):
                if player is not None:
                    raise ValueError("more than one player")
                player = pos
    if player is None:
        raise ValueError("no player")
    widths = {len(row) for row in rows}
    if len(widths) != 1:
        raise ValueError("ragged grid")
    return SokobanGrid(len(rows), widths.pop(), frozenset(walls), frozenset(targets), frozenset(boxes), player)


def bfs_solve(grid: SokobanGrid, max_depth: int = 100) -> list[str] | None:
    """Shortest action plan that puts every box on a target, or None.

    Blocked moves are never part of a shortest plan, so they are pruned.
    """
    if grid.solved:
        return []
    start = (grid.player, grid.boxes)
    parents: dict = {start: None}
    frontier = deque([(start, 0)])
    while frontier:
        state, depth = frontier.popleft()
        if depth >= max_depth:
            continue
        player, boxes = state
        for name, (dr, dc) in DIRECTIONS.items():
            nxt = (player[0] + dr, player[1] + dc)
            if nxt in grid.walls:
                continue
            nboxes = boxes
            if nxt in boxes:
                beyond = (nxt[0] + dr, nxt[1] + dc)
                if beyond in grid.walls or beyond in boxes:
                    continue
                nboxes = (boxes - {nxt}) | {beyond}
            child = (nxt, nboxes)
            if child in parents:
                continue
            parents[child] = (state, name)
            if nboxes == grid.targets:
                plan = []
                node = child
                while parents[node] is not None:
                    node, move = parents[node]
                    plan.append(move)
                return plan[::-1]
            frontier.append((child, depth + 1))
    return None


def _carve_room(rng: np.random.Generator, height: int, width: int, min_floor: int) -> set[Pos]:
    interior = [(r, c) for r in range(1, height - 1) for c in range(1, width - 1)]
    target_size = max(min_floor, int(0.7 * len(interior)))
    pos = interior[rng.integers(len(interior))]
    floor = {pos}
    moves = list(DIRECTIONS.values())
    d = moves[rng.integers(4)]
    for _ in range(20 * len(interior)):
        if len(floor) >= target_size:
            break
        if rng.random() < 0.35:
            d = moves[rng.integers(4)]
        r, c = pos[0] + d[0], pos[1] + d[1]
        if 1 <= r < height - 1 and 1 <= c < width - 1:
            pos = (r, c)
            floor.add(pos)
    return floor


def _reverse_play(rng, floor: set[Pos], boxes: set[Pos], player: Pos, steps: int) -> tuple[frozenset, Pos]:
    """Walk the player randomly, pulling any box it backs away from."""
    moves = list(DIRECTIONS.values())
    for _ in range(steps):
        dr, dc = moves[rng.integers(4)]
        nxt = (player[0] + dr, player[1] + dc)
        if nxt not in floor or nxt in boxes:
            continue
        behind = (player[0] - dr, player[1] - dc)
        if behind in boxes and rng.random() < 0.8:
            boxes = (boxes - {behind}) | {player}
        player = nxt
    return frozenset(boxes), player


def generate(seed: int, variant: SokobanVariant = DEFAULT, max_attempts: int = 200) -> SokobanGrid:
    """Solvable, unsolved grid; retries with derived seeds until BFS succeeds."""
    height, width = variant.dims
    for attempt in range(max_attempts):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), attempt]))
        floor = _carve_room(rng, height, width, 2 * variant.num_boxes + 3)
        cells = sorted(floor)
        if len(cells) < variant.num_boxes + 2:
            continue
        picks = rng.choice(len(cells), size=variant.num_boxes + 1, replace=False)
        targets = frozenset(cells[i] for i in picks[:-1])
        player = cells[picks[-1]]
        boxes, player = _reverse_play(rng, floor, set(targets), player, variant.reverse_steps)
        if boxes == targets:
            continue
        walls = frozenset((r, c) for r in range(height) for c in range(width) if (r, c) not in floor)
        grid = SokobanGrid(height, width, walls, targets, boxes, player)
        if bfs_solve(grid, 100) is not None:
            return grid
    raise GenerationError(f"no solvable Sokoban grid for seed {seed} after {max_attempts} attempts")


def sokoban_vocab(think_size: int = 4) -> Vocabulary:
    # remapped symbols are always present so that checkpoints transfer across variants
    return Vocabulary.build(ACTIONS, list(SYMBOLS) + list(NEW_VOCAB.values()) + ["\n"], think_size)


class SokobanEnv(Environment):
    name = "sokoban"

    def __init__(self, variant: SokobanVariant = DEFAULT, spec: EnvSpec | None = None,
                 vocab: Vocabulary | None = None, *, state_reward: bool = False, **kwargs):
        super().__init__(spec or EnvSpec(ACTIONS), vocab or sokoban_vocab(), **kwargs)
        self.variant = variant
        self.state_reward = state_reward
        self.grid: SokobanGrid | None = None
        if variant.vocab_map:
            self.name = "sokoban-newvocab"
        elif variant.dims != DEFAULT.dims or variant.num_boxes != DEFAULT.num_boxes:
            self.name = "sokoban-large"

    def _load(self, instance_id: int):
        return generate(self._seed_hint(instance_id), self.variant)

    def _start(self, state) -> None:
        self.grid = state if isinstance(state, SokobanGrid) else parse("\n".join(state))

    def _render(self) -> str:
        return render(self.grid, self.variant.vocab_map)

    def _layout(self, state):
        return render(state).split("\n")

    def step_direction(self, direction: str):
        return self.step([direction])

    def _apply(self, action: str) -> tuple[float, bool, bool]:
        if action not in DIRECTIONS:
            return 0.0, False, False
        self.grid, delta = self.grid.move(action)
        reward = ACTION_COST
        if self.state_reward:
            on = self.grid.on_target
            reward += BOX_ON_REWARD * on + BOX_OFF_REWARD * (len(self.grid.boxes) - on)
        else:
            reward += BOX_ON_REWARD * max(delta, 0) + BOX_OFF_REWARD * max(-delta, 0)
        if self.grid.solved:
            return reward + SOLVED_REWARD, True, True
        return reward, False, False
