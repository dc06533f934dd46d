"""Shared hand-built fixtures with independently derivable quantities."""

from __future__ import annotations

import numpy as np

from msmdp.mdp import Mdp, make_mdp


def chain3(gamma: float = 0.9, step_reward: float = 1.0) -> Mdp:
    """Three-state chain: 0 -> 1 surely; 1 -> {0, 2} each 0.5; 2 absorbing.

    Single action, per-step reward `step_reward`, uniform discount. Used as a
    compression fixture with boundary {0, 2} and interior {1}.
    """
    e = [
        (0, 0, 1, 1.0, step_reward, gamma),
        (1, 0, 0, 0.5, step_reward, gamma),
        (1, 0, 2, 0.5, step_reward, gamma),
        (2, 0, 2, 1.0, 0.0, gamma),
    ]
    return make_mdp(3, 1, e, terminal=[2])


def chain4(gamma: float = 0.9) -> Mdp:
    """Four-state chain: 0 -> 1; 1 self-loops 0.5 / exits 0.5 to 2; 2 -> 3.

    State 3 is absorbing. Reward 1 on every non-terminal step. The cluster
    {0, 1, 2} with boundary {0, 2} has closed-form compressed quantities:
    P~(0,2) = 1, L(0,2) = 3, Gamma~(0,2) = gamma * (gamma/2) / (1 - gamma/2),
    R~(0,2) = (1 - Gamma~) / (1 - gamma).
    """
    e = [
        (0, 0, 1, 1.0, 1.0, gamma),
        (1, 0, 1, 0.5, 1.0, gamma),
        (1, 0, 2, 0.5, 1.0, gamma),
        (2, 0, 3, 1.0, 1.0, gamma),
        (3, 0, 3, 1.0, 0.0, gamma),
    ]
    return make_mdp(4, 1, e, terminal=[3])


def truncated_value_sum(mdp: Mdp, pi: np.ndarray, horizon: int) -> np.ndarray:
    """Oracle: evaluate the discounted-reward series directly for `horizon` steps.

    Accumulates E[prod Gamma * R] term by term via the policy-averaged one-step
    operators, independently of the linear-system path.
    """
    from msmdp.mdp import discounted_kernel, expected_reward_matrix

    gp = discounted_kernel(mdp, pi)
    rew = expected_reward_matrix(mdp, pi).sum(axis=1)
    v = np.zeros(mdp.n_states)
    weight = np.eye(mdp.n_states)
    for _ in range(horizon):
        v = v + weight @ rew
        weight = weight @ gp
    return v


def random_mdp(n_states: int, n_actions: int, rng, branching: int = 3, gamma=None) -> Mdp:
    """Random dense-ish MDP with Dirichlet rows; always at least one terminal."""
    entries = []
    term = n_states - 1
    for s in range(n_states - 1):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=min(branching, n_states), replace=False)
            probs = rng.dirichlet(np.ones(succ.size))
            for t, p in zip(succ, probs):
                if p == 0.0:
                    continue
                g = gamma if gamma is not None else rng.uniform(0.5, 0.99)
                entries.append((s, a, int(t), float(p), float(rng.normal()), g))
    for a in range(n_actions):
        entries.append((term, a, term, 1.0, 0.0, gamma if gamma is not None else 0.9))
    return make_mdp(n_states, n_actions, entries, terminal=[term])


def bridge_graph_mdp(k: int = 3, gamma: float = 0.95) -> Mdp:
    """Two k-cliques joined by a single bridge edge; uniform random walk.

    States 0..k-1 form clique A, k..2k-1 clique B; the bridge joins k-1 and k.
    One action (the walk itself).
    """
    n = 2 * k
    adj = np.zeros((n, n))
    for i in range(k):
        for j in range(k):
            if i != j:
                adj[i, j] = 1
                adj[k + i, k + j] = 1
    adj[k - 1, k] = adj[k, k - 1] = 1
    entries = []
    for i in range(n):
        nbrs = np.flatnonzero(adj[i])
        for j in nbrs:
            entries.append((i, 0, int(j), 1.0 / nbrs.size, -1.0, gamma))
    return make_mdp(n, 1, entries)


def four_room_12x12():
    """12x12 gridworld with four rooms; doorway cells known by construction."""
    from msmdp.domains import GridSpec, build_gridworld, parse_grid_map

    rows = []
    wall_col, wall_row = 5, 5
    doors = {(5, 2), (5, 8), (2, 5), (9, 5)}  # (x, y) doorway cells
    for y in range(12):
        row = ""
        for x in range(12):
            if (x, y) in doors:
                row += "."
            elif x == wall_col or y == wall_row:
                row += "#"
            else:
                row += "."
        rows.append(row)
    # goal in the bottom-right room
    rows[10] = rows[10][:10] + "G" + rows[10][11:]
    spec = parse_grid_map("\n".join(rows), slip=0.9, step_reward=-1.0, goal_reward=10.0, gamma=0.95)
    return build_gridworld(spec), spec, doors
