"""Exact benchmark MDP builders: gridworlds and the simplified playroom.

All builders construct transition tensors analytically; no simulation is
involved. Gridworld maps can also be given as text: `#` wall, `.` free,
`G` goal, one row per line.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from msmdp.errors import InvalidInputError
from msmdp.mdp import Mdp, make_mdp

GRID_ACTIONS = ((0, -1), (0, 1), (-1, 0), (1, 0))  # up, down, left, right
GRID_ACTION_NAMES = ("up", "down", "left", "right")


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    walls: frozenset
    goal: tuple
    slip: float = 0.9
    step_reward: float = -1.0
    goal_reward: float = 10.0
    gamma: float = 0.95

    def __post_init__(self):
        if self.goal in self.walls:
            raise InvalidInputError("goal cell cannot be a wall")
        if not 0.0 < self.slip <= 1.0:
            raise InvalidInputError("slip (success probability) must lie in (0, 1]")
        gx, gy = self.goal
        if not (0 <= gx < self.width and 0 <= gy < self.height):
            raise InvalidInputError("goal lies outside the grid")


def parse_grid_map(text: str, **kwargs) -> GridSpec:
    """Parse a character map into a GridSpec; `#` wall, `.` free, `G` goal."""
    rows = [line for line in text.splitlines() if line.strip()]
    if not rows:
        raise InvalidInputError("empty grid map")
    width = len(rows[0])
    if any(len(row) != width for row in rows):
        raise InvalidInputError("grid map rows have unequal lengths")
    walls, goal = set(), None
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch == "#":
                walls.add((x, y))
            elif ch == "G":
                if goal is not None:
                    raise InvalidInputError("grid map has more than one goal")
                goal = (x, y)
            elif ch != ".":
                raise InvalidInputError(f"unknown map character {ch!r} at {(x, y)}")
    if goal is None:
        raise InvalidInputError("grid map has no goal cell")
    return GridSpec(width, len(rows), frozenset(walls), goal, **kwargs)


def render_grid_map(spec: GridSpec) -> str:
    rows = []
    for y in range(spec.height):
        rows.append(
            "".join(
                "#" if (x, y) in spec.walls else ("G" if (x, y) == spec.goal else ".")
                for x in range(spec.width)
            )
        )
    return "\n".join(rows)


def grid_state_ids(spec: GridSpec):
    """Mapping from free cells to contiguous state ids, in row-major order."""
    cells = [
        (x, y)
        for y in range(spec.height)
        for x in range(spec.width)
        if (x, y) not in spec.walls
    ]
    return cells, {c: i for i, c in enumerate(cells)}


def build_gridworld(spec: GridSpec) -> Mdp:
    """Four-action gridworld: moves succeed w.p. `slip`, else the agent stays.

    Moves into walls or off the grid fail with probability 1. Every transition
    pays `step_reward` except entry into the goal, which pays `goal_reward`;
    the goal is terminal.
    """
    cells, ids = grid_state_ids(spec)
    goal_id = ids[spec.goal]
    entries = []
    for (x, y), sid in ids.items():
        if sid == goal_id:
            for a in range(4):
                entries.append((sid, a, sid, 1.0, 0.0, spec.gamma))
            continue
        for a, (dx, dy) in enumerate(GRID_ACTIONS):
            nx, ny = x + dx, y + dy
            blocked = not (0 <= nx < spec.width and 0 <= ny < spec.height) or (nx, ny) in spec.walls
            if blocked:
                entries.append((sid, a, sid, 1.0, spec.step_reward, spec.gamma))
                continue
            tid = ids[(nx, ny)]
            rew = spec.goal_reward if tid == goal_id else spec.step_reward
            entries.append((sid, a, tid, spec.slip, rew, spec.gamma))
            if spec.slip < 1.0:
                entries.append((sid, a, sid, 1.0 - spec.slip, spec.step_reward, spec.gamma))
    return make_mdp(len(cells), 4, entries, terminal=[goal_id])


def goal_reachable(spec: GridSpec) -> bool:
    """BFS check that every free cell can reach the goal."""
    cells, ids = grid_state_ids(spec)
    adj = {c: [] for c in cells}
    for (x, y) in cells:
        for dx, dy in GRID_ACTIONS:
            n = (x + dx, y + dy)
            if n in ids:
                adj[(x, y)].append(n)
    seen = {spec.goal}
    frontier = [spec.goal]
    while frontier:
        nxt = []
        for c in frontier:
            for n in adj[c]:
                if n not in seen:
                    seen.add(n)
                    nxt.append(n)
        frontier = nxt
    return len(seen) == len(cells)


def random_gridworld(side: int, wall_fraction: float, seed: int, **kwargs) -> GridSpec:
    """Seeded random world with `wall_fraction` of cells walled.

    Layouts that disconnect the world from its goal are rejected and redrawn
    deterministically from the same seed sequence.
    """
    root = np.random.SeedSequence([seed, side])
    for attempt, child in enumerate(root.spawn(256)):
        rng = np.random.default_rng(child)
        cells = [(x, y) for y in range(side) for x in range(side)]
        n_walls = int(wall_fraction * len(cells))
        idx = rng.choice(len(cells), size=n_walls, replace=False)
        walls = frozenset(cells[i] for i in idx)
        free = [c for c in cells if c not in walls]
        goal = free[int(rng.integers(len(free)))]
        spec = GridSpec(side, side, walls, goal, **kwargs)
        if goal_reachable(spec):
            return spec
    raise InvalidInputError("could not draw a connected random gridworld")


def four_room_spec(side: int, goal: tuple, doors=None, centered: bool = False, **kwargs) -> GridSpec:
    """Four rooms separated by a cross of walls with four doorway gaps.

    By default the cross is off-center, so the four rooms have pairwise
    distinct shapes and their statespace graphs can be told apart by
    diffusion geometry (reflections of a square room are isospectral).
    """
    col = side // 2 if centered else max(2, int(0.4 * side))
    row = side // 2 if centered else min(side - 3, int(0.6 * side))
    if doors is None:
        q = max(1, side // 6)
        doors = {(col, q), (col, side - 1 - q), (q + 1, row), (side - 2 - q, row)}
    walls = set()
    for k in range(side):
        walls.add((col, k))
        walls.add((k, row))
    walls -= set(doors)
    return GridSpec(side, side, frozenset(walls), goal, **kwargs)


def mirrored_gridworld_pair(spec: GridSpec, variant: str = "mirrored"):
    """A transfer pair: the same wall layout with the goal relocated.

    variant 'identity' returns two equal worlds; 'mirrored' places the
    destination goal at the left-right mirrored cell (the horizontally
    opposite room for a four-room layout). Cluster geometry matches across
    the pair and rooms away from both goals keep useful policies, while the
    optimal policy differs over a large fraction of the statespace and the
    two goal rooms are flipped relative to their goals.
    """
    src = build_gridworld(spec)
    if variant == "identity":
        return src, build_gridworld(spec)
    if variant != "mirrored":
        raise InvalidInputError(f"unknown pair variant {variant!r}")
    gx, gy = spec.goal
    cand = (spec.width - 1 - gx, gy)
    if cand in spec.walls or cand == spec.goal:
        raise InvalidInputError("mirrored goal cell is blocked; choose another goal")
    dest_spec = replace(spec, goal=cand)
    return src, build_gridworld(dest_spec)


# ---------------------------------------------------------------------------
# Playroom

PLAYROOM_OBJECTS = ("ball", "bell", "music", "light")
LOOK, MARK, PRESS, KICK, FLIP = range(5)
PLAYROOM_ACTION_NAMES = ("look", "mark", "press", "kick", "flip")
PLAYROOM_VARIANTS = ("default", "transfer", "partial-default", "partial-transfer")


@dataclass(frozen=True)
class PlayroomSpec:
    variant: str = "default"
    success: float = 0.75
    gamma: float = 0.96
    step_reward: float = -1.0
    goal_reward: float = 10.0

    def __post_init__(self):
        if self.variant not in PLAYROOM_VARIANTS:
            raise InvalidInputError(f"unknown playroom variant {self.variant!r}")
        if not 0.0 < self.success <= 1.0:
            raise InvalidInputError("success probability must lie in (0, 1]")


def playroom_goal_test(variant: str):
    """Goal predicate on (look, marker, music, bell, light) tuples."""
    if variant in ("default", "partial-default"):
        return lambda st: st[3] == 1 and st[2] == 1  # bell ringing, music on
    return lambda st: st[4] == 1 and st[2] == 1  # light on, music on


def _playroom_effects(state, action, variant):
    """Intended next state if the action succeeds, after one-period decay.

    Returns None when the action's preconditions fail (the attempt changes
    nothing beyond the decay of the bell and light).
    """
    look, marker, music, bell, light = state
    base = (look, marker, music, 0, 0)  # bell and light persist one period only
    if action == MARK:
        return (look, look, music, 0, 0)
    if action == PRESS:
        return (look, marker, 1, 0, 0) if look == 2 else None
    if action == KICK:
        if look != 0:
            return None
        return (look, marker, music, 1, 0) if marker == 1 else base
    if action == FLIP:
        if variant in ("default", "transfer"):
            ok = look == 0 and marker == 1  # role swapped with kicking
        else:
            ok = look == 3 and marker == 1
        return (look, marker, music, 0, 1) if ok else None
    return None


def _playroom_successors(spec: PlayroomSpec, state, action):
    """Next-state distribution as a list of (state, probability) pairs."""
    look, marker, music, bell, light = state
    base = (look, marker, music, 0, 0)
    if action == LOOK:
        return [((obj, marker, music, 0, 0), 0.25) for obj in range(4)]
    intended = _playroom_effects(state, action, spec.variant)
    if intended is None:
        return [(base, 1.0)]
    out = [(intended, spec.success)]
    if spec.success < 1.0:
        out.append((base, 1.0 - spec.success))
    return out


def playroom_states(spec: PlayroomSpec):
    """State tuples reachable from the all-off starts, in state-id order."""
    goal = playroom_goal_test(spec.variant)
    starts = [(l, m, 0, 0, 0) for l in range(4) for m in range(4)]
    seen = set(starts)
    stack = list(starts)
    while stack:
        st = stack.pop()
        if goal(st):
            continue
        for action in range(5):
            for nxt, prob in _playroom_successors(spec, st, action):
                if prob > 0 and nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
    return sorted(seen)


def build_playroom(spec: PlayroomSpec) -> Mdp:
    """Exact model of the simplified playroom task.

    State is (look target, marker target, music, bell, light); the statespace
    is the set of states reachable from the all-off initial configurations,
    with ids assigned in sorted tuple order. The look action succeeds surely
    and retargets uniformly over the four objects; the other four actions
    succeed with probability `success` and otherwise leave everything except
    the one-period bell/light decay unchanged.
    """
    goal = playroom_goal_test(spec.variant)
    order = playroom_states(spec)
    ids = {st: i for i, st in enumerate(order)}
    entries = []
    terminal = []
    for st, sid in ids.items():
        if goal(st):
            terminal.append(sid)
            for action in range(5):
                entries.append((sid, action, sid, 1.0, 0.0, spec.gamma))
            continue
        for action in range(5):
            agg = {}
            for nxt, prob in _playroom_successors(spec, st, action):
                agg[nxt] = agg.get(nxt, 0.0) + prob
            for nxt, prob in agg.items():
                rew = spec.goal_reward if goal(nxt) else spec.step_reward
                entries.append((sid, action, ids[nxt], prob, rew, spec.gamma))
    return make_mdp(len(order), 5, entries, terminal=terminal)
