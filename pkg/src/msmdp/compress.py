"""Homogenize a fine MDP into a coarse MDP on its bottleneck set.

Coarse actions execute a designated cluster policy until the first positive-
time boundary hit. Coarse transition probabilities are boundary hitting
probabilities of the restricted chain; coarse rewards, discounts, and path
lengths are conditional expectations computed from per-target linear systems
driven by harmonic-function-reweighted kernels. A Monte-Carlo estimator of
the same quantities serves as a cross-check oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import nnls

from msmdp.errors import InvalidInputError, NumericalError
from msmdp.mdp import (
    Mdp,
    check_policy,
    deterministic_policy,
    discounted_kernel,
    expected_reward_matrix,
    make_mdp,
    policy_average,
    policy_iteration,
    regularize_policy,
    restrict,
    uniform_policy,
)
from msmdp.partition import Partition, reachability_check

NEG_TOL = 1e-10
SUPPORT_TOL = 1e-14


@dataclass(frozen=True)
class CoarseAction:
    cluster_id: int
    policy_id: int


@dataclass
class PolicyPool:
    """Per-cluster candidate policies, tagged with (bottleneck, reward) provenance."""

    policies: list  # arrays over the cluster's local states
    tags: list  # (boundary local index or None, r or None)


@dataclass
class CoarseMdp:
    """An Mdp on the bottleneck set plus expected path lengths per action."""

    mdp: Mdp
    actions: list  # CoarseAction per coarse action id
    bottlenecks: np.ndarray  # fine state id of each coarse state
    path_lengths: np.ndarray  # (n_B, n_actions, n_B); 0 off supp(P~)


@dataclass
class CoarseMrp:
    """Single-policy compression of the global chain observed on B.

    p, r, g, length are (n_B, n_B) arrays of first-passage probabilities and
    conditional expectations for the unrestricted chain P^pi; the off-support
    convention is r = 0, g = 1, length = 0.
    """

    bottlenecks: np.ndarray
    p: np.ndarray
    r: np.ndarray
    g: np.ndarray
    length: np.ndarray

    def value_determination(self) -> np.ndarray:
        A = np.eye(self.p.shape[0]) - self.p * self.g
        b = (self.p * self.r).sum(axis=1)
        return np.linalg.solve(A, b)


# ---------------------------------------------------------------------------
# Hitting probabilities and harmonic functions


def _solve_columns(A, B, what: str, nonneg: bool):
    """Solve A X = B column by column; optionally enforce X >= 0 by NNLS."""
    try:
        lu = lu_factor(A)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"{what}: singular system ({exc})") from exc
    X = lu_solve(lu, B)
    if not np.all(np.isfinite(X)):
        raise NumericalError(f"{what}: non-finite solution")
    if nonneg and X.size and X.min() < -NEG_TOL:
        X = np.column_stack(
            [nnls(A, np.ascontiguousarray(B[:, j]))[0] for j in range(B.shape[1])]
        )
        if X.min() < -NEG_TOL:
            raise NumericalError(f"{what}: negative entries persist after NNLS")
    if nonneg:
        X = np.maximum(X, 0.0)
    return X


def _split_counts(cluster_mdp: Mdp, boundary) -> tuple:
    boundary = np.asarray(list(boundary), dtype=int)
    if boundary.size and (boundary.min() < 0 or boundary.max() >= cluster_mdp.n_states):
        raise InvalidInputError("boundary references states outside the cluster")
    if not np.array_equal(boundary, np.arange(boundary.size)):
        raise InvalidInputError("cluster states must be ordered boundary-first")
    return boundary.size, cluster_mdp.n_states - boundary.size


def hitting_probabilities(cluster_mdp: Mdp, pi: np.ndarray, boundary) -> np.ndarray:
    """First-hit probabilities H of each boundary state, for all cluster states.

    Cluster states are ordered boundary-first. Interior rows give the
    probability that the chain P_c^pi first touches the boundary at each
    target; boundary rows give the first positive-time hit kernel, which is
    the coarse transition matrix for this cluster policy.
    """
    nb, ni = _split_counts(cluster_mdp, boundary)
    pp, _ = policy_average(cluster_mdp, pi)
    Q = pp[nb:, nb:]
    B = pp[nb:, :nb]
    h_q = _solve_columns(np.eye(ni) - Q, B, "hitting probabilities", nonneg=True)
    h_b = pp[:nb, :nb] + pp[:nb, nb:] @ h_q
    H = np.vstack([h_b, h_q]) if ni else h_b
    rowsum = H.sum(axis=1)
    if np.any(np.abs(rowsum - 1.0) > 1e-6):
        worst = np.abs(rowsum - 1.0).max()
        raise NumericalError(
            f"hitting probabilities: boundary not reached almost surely (defect {worst:.3e})"
        )
    return H / rowsum[:, None]


def harmonic_h(cluster_mdp: Mdp, pi: np.ndarray, boundary, target: int) -> np.ndarray:
    """Minimal non-negative harmonic function h_{s'} for one boundary target.

    Equals the Kronecker delta on the boundary; inside, the probability that
    the chain first touches the boundary at `target`, i.e. the corresponding
    column of the interior hitting probabilities.
    """
    nb, _ = _split_counts(cluster_mdp, boundary)
    if not 0 <= target < nb:
        raise InvalidInputError("target must be a boundary state")
    H = hitting_probabilities(cluster_mdp, pi, boundary)
    h = np.zeros(cluster_mdp.n_states)
    h[target] = 1.0
    h[nb:] = H[nb:, target]
    return h


# ---------------------------------------------------------------------------
# Per-cluster compression systems


@dataclass
class ClusterSystem:
    """Policy-averaged matrices and hitting data for one (cluster, policy)."""

    nb: int
    ni: int
    pp: np.ndarray  # P_c^pi
    pg: np.ndarray  # (Gamma_c o P_c)^pi
    pr: np.ndarray  # (P_c o R_c)^pi
    H: np.ndarray  # hitting probabilities, (nb+ni) x nb
    p_tilde: np.ndarray  # boundary rows of H

    @classmethod
    def build(cls, cluster_mdp: Mdp, pi: np.ndarray, nb: int) -> "ClusterSystem":
        pi = check_policy(cluster_mdp, pi)
        pp, _ = policy_average(cluster_mdp, pi)
        pg = discounted_kernel(cluster_mdp, pi)
        pr = expected_reward_matrix(cluster_mdp, pi)
        H = hitting_probabilities(cluster_mdp, pi, np.arange(nb))
        return cls(nb, cluster_mdp.n_states - nb, pp, pg, pr, H, H[:nb])

    def h_vector(self, j: int) -> np.ndarray:
        h = np.zeros(self.nb + self.ni)
        h[j] = 1.0
        h[self.nb :] = self.H[self.nb :, j]
        return h

    def interior_system(self, j: int, kernel: np.ndarray):
        """Supported interior indices and the h-transformed kernel for target j."""
        h = self.h_vector(j)
        idx = self.nb + np.flatnonzero(h[self.nb :] > SUPPORT_TOL)
        M = kernel[np.ix_(idx, idx)] * h[idx][None, :] / h[idx][:, None]
        return h, idx, M

    def conditional_expectations(self, j: int, kernel: np.ndarray, source_fn, nonneg: bool):
        """Solve the target-j interior system and assemble boundary sums.

        `kernel` weights the recursion (the discounted kernel for rewards and
        discounts, the plain kernel for path lengths); `source_fn(rows)`
        evaluates the one-step source term for the given row indices against
        the harmonic vector. Returns (interior solution over idx, boundary
        column over supp rows, idx).
        """
        h, idx, M = self.interior_system(j, kernel)
        if idx.size:
            src = source_fn(idx, h) / h[idx]
            sol = _solve_columns(
                np.eye(idx.size) - M, src[:, None], "conditional expectation", nonneg
            )[:, 0]
        else:
            sol = np.zeros(0)
        rows = np.flatnonzero(self.p_tilde[:, j] > SUPPORT_TOL)
        out = np.zeros(self.nb)
        if rows.size:
            excursion = (kernel[np.ix_(rows, idx)] * h[idx][None, :]) @ sol if idx.size else 0.0
            out[rows] = (excursion + source_fn(rows, h)) / self.p_tilde[rows, j]
        return sol, out, idx


def _reward_source(sys: ClusterSystem):
    return lambda rows, h: sys.pr[rows] @ h


def _discount_source(sys: ClusterSystem, j: int):
    return lambda rows, h: sys.pg[rows, j]  # h(target) = 1


def _length_source(sys: ClusterSystem):
    return lambda rows, h: sys.pp[rows] @ h


def conditioned_kernels(cluster_mdp: Mdp, pi: np.ndarray, h: np.ndarray, p_tilde_to_target):
    """Doob-style conditioned kernels (P_h, P_h~) as dense (s, a, s'') tensors.

    P_h lives on interior source states with h > 0; P_h~ on boundary source
    states with positive coarse probability of the target. States where the
    denominator vanishes are excluded (zero rows), not errors.
    """
    pi = check_policy(cluster_mdp, pi)
    h = np.asarray(h, dtype=float)
    p_tt = np.asarray(p_tilde_to_target, dtype=float)
    n, m = cluster_mdp.n_states, cluster_mdp.n_actions
    nb = p_tt.size
    w = pi[cluster_mdp.s, cluster_mdp.a] * cluster_mdp.p * h[cluster_mdp.t]
    p_h = np.zeros((n, m, n))
    p_ht = np.zeros((n, m, n))
    src = cluster_mdp.s
    interior_ok = (src >= nb) & (h[src] > SUPPORT_TOL)
    np.add.at(
        p_h,
        (src[interior_ok], cluster_mdp.a[interior_ok], cluster_mdp.t[interior_ok]),
        w[interior_ok] / h[src[interior_ok]],
    )
    denom = np.zeros(n)
    denom[:nb] = p_tt
    bd_ok = (src < nb) & (denom[src] > SUPPORT_TOL)
    np.add.at(
        p_ht,
        (src[bd_ok], cluster_mdp.a[bd_ok], cluster_mdp.t[bd_ok]),
        w[bd_ok] / denom[src[bd_ok]],
    )
    return p_h, p_ht


def compress_rewards(cluster_mdp: Mdp, pi: np.ndarray, boundary) -> np.ndarray:
    """Expected discounted reward between boundary hits, per (start, target)."""
    nb, _ = _split_counts(cluster_mdp, boundary)
    sys = ClusterSystem.build(cluster_mdp, pi, nb)
    out = np.zeros((nb, nb))
    for j in range(nb):
        _, col, _ = sys.conditional_expectations(j, sys.pg, _reward_source(sys), nonneg=False)
        out[:, j] = col
    return out


def compress_discounts(cluster_mdp: Mdp, pi: np.ndarray, boundary) -> np.ndarray:
    """Expected cumulative discount between boundary hits; minimal non-negative."""
    nb, _ = _split_counts(cluster_mdp, boundary)
    sys = ClusterSystem.build(cluster_mdp, pi, nb)
    out = np.zeros((nb, nb))
    for j in range(nb):
        _, col, _ = sys.conditional_expectations(j, sys.pg, _discount_source(sys, j), nonneg=True)
        out[:, j] = col
    return out


def expected_path_lengths(cluster_mdp: Mdp, pi: np.ndarray, boundary) -> np.ndarray:
    """Mean hitting times between boundary pairs: the reward machinery at R=1, Gamma=1."""
    nb, _ = _split_counts(cluster_mdp, boundary)
    sys = ClusterSystem.build(cluster_mdp, pi, nb)
    out = np.zeros((nb, nb))
    for j in range(nb):
        _, col, _ = sys.conditional_expectations(j, sys.pp, _length_source(sys), nonneg=True)
        out[:, j] = col
    return out


def compress_cluster(cluster_mdp: Mdp, pi: np.ndarray, nb: int):
    """All compressed quantities for one (cluster, policy): (P~, R~, G~, L)."""
    sys = ClusterSystem.build(cluster_mdp, pi, nb)
    p_t = sys.p_tilde
    r_t = np.zeros((nb, nb))
    g_t = np.zeros((nb, nb))
    l_t = np.zeros((nb, nb))
    for j in range(nb):
        _, r_col, _ = sys.conditional_expectations(j, sys.pg, _reward_source(sys), nonneg=False)
        _, g_col, _ = sys.conditional_expectations(j, sys.pg, _discount_source(sys, j), nonneg=True)
        _, l_col, _ = sys.conditional_expectations(j, sys.pp, _length_source(sys), nonneg=True)
        r_t[:, j], g_t[:, j], l_t[:, j] = r_col, g_col, l_col
    return p_t, r_t, g_t, l_t


# ---------------------------------------------------------------------------
# Whole-problem compression


def _cluster_ordering(partition: Partition):
    """(states, nb) per cluster: global state ids ordered boundary-first."""
    out = []
    for c in partition.clusters:
        out.append((np.concatenate([c.boundary, c.interior]).astype(np.int64), c.boundary.size))
    return out


def diffusion_pools(mdp: Mdp, partition: Partition, lam: float = 0.01) -> list:
    """One uniform policy per cluster."""
    pools = []
    for c in partition.clusters:
        states = np.concatenate([c.boundary, c.interior]).astype(np.int64)
        sub = restrict(mdp, states)
        pools.append(PolicyPool(policies=[uniform_policy(sub)], tags=[(None, None)]))
    return pools


def compress_mdp(mdp: Mdp, partition: Partition, pools: list) -> CoarseMdp:
    """Assemble the coarse MDP on the bottleneck set.

    One coarse action per (cluster, pool policy), feasible exactly at the
    cluster's boundary states. Bottlenecks attached to no cluster receive a
    fallback self-action so the coarse MDP is well-formed.
    """
    bns = np.sort(np.asarray(partition.bottlenecks, dtype=np.int64))
    coarse_id = {int(s): i for i, s in enumerate(bns)}
    n_b = bns.size
    if n_b == 0:
        raise InvalidInputError("partition has no bottlenecks; nothing to compress")
    entries = []
    actions = []
    lengths = []
    covered = np.zeros(n_b, dtype=bool)
    for cid, (c, pool) in enumerate(zip(partition.clusters, pools)):
        states = np.concatenate([c.boundary, c.interior]).astype(np.int64)
        nb = c.boundary.size
        if nb == 0:
            continue
        sub = restrict(mdp, states)
        b_ids = np.array([coarse_id[int(s)] for s in c.boundary])
        covered[b_ids] = True
        for pid, pi_c in enumerate(pool.policies):
            ok, unreachable = reachability_check(sub, pi_c, np.arange(nb))
            if not ok:
                raise NumericalError(
                    f"cluster {cid}: boundary unreachable from local states {unreachable.tolist()}"
                )
            aid = len(actions)
            actions.append(CoarseAction(cid, pid))
            p_t, r_t, g_t, l_t = compress_cluster(sub, pi_c, nb)
            Lmat = np.zeros((n_b, n_b))
            for i in range(nb):
                row = p_t[i]
                row = np.where(row < 0, 0.0, row)
                total = row.sum()
                if abs(total - 1.0) > 1e-9:
                    raise NumericalError(
                        f"cluster {cid} action {aid}: coarse row sums to {total:.12f}"
                    )
                row = row / total
                for j in np.flatnonzero(row > 0):
                    entries.append(
                        (
                            int(b_ids[i]),
                            aid,
                            int(b_ids[j]),
                            float(row[j]),
                            float(r_t[i, j]),
                            float(np.clip(g_t[i, j], 1e-12, 1.0 - 1e-12)),
                        )
                    )
                    Lmat[b_ids[i], b_ids[j]] = l_t[i, j]
            lengths.append(Lmat)
    # Fallback self-actions for orphan bottlenecks (no attached cluster).
    for i in np.flatnonzero(~covered):
        aid = len(actions)
        actions.append(CoarseAction(-1, -1))
        gbar = mdp.gamma_bar()
        entries.append((int(i), aid, int(i), 1.0, 0.0, gbar))
        Lmat = np.zeros((n_b, n_b))
        Lmat[i, i] = 1.0
        lengths.append(Lmat)
    # Terminal coarse rewards must be exactly zero for the Mdp invariants.
    term = set(int(coarse_id[int(s)]) for s in bns if mdp.terminal[s])
    entries = [
        (s, a, t, p, 0.0 if s in term else r, g) for (s, a, t, p, r, g) in entries
    ]
    coarse = make_mdp(n_b, len(actions), entries, terminal=sorted(term))
    path_lengths = np.stack(lengths, axis=1) if lengths else np.zeros((n_b, 0, n_b))
    return CoarseMdp(coarse, actions, bns, path_lengths)


def compress_mrp(mdp: Mdp, partition: Partition, pi: np.ndarray) -> CoarseMrp:
    """Compression of the unrestricted chain P^pi observed at bottleneck hits.

    Treats the whole statespace as one cluster with boundary B, so boundary
    rows keep their direct bottleneck-to-bottleneck transitions and nothing is
    folded away. Value determination of the result reproduces the fine V^pi
    on the bottleneck set exactly (consistency in the mean) for any partition
    whose bottlenecks are reachable, whether or not the declared cluster
    interiors are genuinely decoupled.
    """
    pi = check_policy(mdp, pi)
    bns = np.sort(np.asarray(partition.bottlenecks, dtype=np.int64))
    rest = np.setdiff1d(np.arange(mdp.n_states), bns)
    order = np.concatenate([bns, rest])
    sub = restrict(mdp, order)  # full set: a pure reordering
    p_t, r_t, g_t, l_t = compress_cluster(sub, pi[order], bns.size)
    off = p_t <= SUPPORT_TOL
    g_t = np.where(off, 1.0, g_t)
    r_t = np.where(off, 0.0, r_t)
    l_t = np.where(off, 0.0, l_t)
    return CoarseMrp(bns, p_t, r_t, g_t, l_t)


# ---------------------------------------------------------------------------
# Policy pools (locally optimal policies toward each bottleneck)


def _cluster_diameter(cluster_mdp: Mdp) -> int:
    """Longest graph geodesic on the unweighted, undirected support graph."""
    n = cluster_mdp.n_states
    adj = np.zeros((n, n), dtype=bool)
    adj[cluster_mdp.s, cluster_mdp.t] = True
    adj |= adj.T
    np.fill_diagonal(adj, False)
    diam = 1
    for start in range(n):
        dist = -np.ones(n, dtype=int)
        dist[start] = 0
        frontier = [start]
        while frontier:
            nxt = []
            for i in frontier:
                for j in np.flatnonzero(adj[i]):
                    if dist[j] < 0:
                        dist[j] = dist[i] + 1
                        nxt.append(int(j))
            frontier = nxt
        diam = max(diam, int(dist.max()))
    return diam


def _absorbing_at(cluster_mdp: Mdp, b: int) -> Mdp:
    """Copy of the cluster MDP with state b absorbing under every action."""
    keep = cluster_mdp.s != b
    s = np.concatenate([cluster_mdp.s[keep], np.full(cluster_mdp.n_actions, b)])
    a = np.concatenate([cluster_mdp.a[keep], np.arange(cluster_mdp.n_actions)])
    t = np.concatenate([cluster_mdp.t[keep], np.full(cluster_mdp.n_actions, b)])
    p = np.concatenate([cluster_mdp.p[keep], np.ones(cluster_mdp.n_actions)])
    r = np.concatenate([cluster_mdp.r[keep], np.zeros(cluster_mdp.n_actions)])
    g = np.concatenate([cluster_mdp.g[keep], np.full(cluster_mdp.n_actions, cluster_mdp.g.mean())])
    feas = cluster_mdp.feasible.copy()
    feas[b, :] = True
    term = cluster_mdp.terminal.copy()
    term[b] = True
    return Mdp(
        cluster_mdp.n_states, cluster_mdp.n_actions, s, a, t, p, r, g, feas, term, validate=False
    )


def _bonus_rewards(base: Mdp, b: int, r_bonus: float) -> Mdp:
    into_b = (base.t == b) & (base.s != b)
    r = base.r.copy()
    r[into_b] = r[into_b] + base.g[into_b] * r_bonus
    return base.with_entries(r=r, validate=False)


def _solve_local(mdp_local: Mdp) -> np.ndarray:
    res = policy_iteration(mdp_local, max_iters=200)
    return np.argmax(res.pi, axis=1)


def policy_pool_for_cluster(
    cluster_mdp: Mdp, boundary, config: dict | None = None, lam: float = 0.01
) -> PolicyPool:
    """Locally optimal policies toward each bottleneck, over a reward sweep.

    For every boundary state b, b is made absorbing and a bonus reward r is
    added to transitions entering it, with r scanned over the scaled interval
    and refined by bisection wherever adjacent samples disagree on the optimal
    policy. Distinct policies (compared on interior states) are pooled and
    regularized.
    """
    cfg = {"n_r_samples": 9, "bisection_tol": 1e-3}
    if config:
        cfg.update(config)
    nb, ni = _split_counts(cluster_mdp, boundary)
    rbar = float(cluster_mdp.r.max()) if cluster_mdp.n_entries else 0.0
    rlow = float(cluster_mdp.r.min()) if cluster_mdp.n_entries else 0.0
    gbar = cluster_mdp.gamma_bar()
    diam = _cluster_diameter(cluster_mdp)
    scale = (1.0 - gbar**diam) / (1.0 - gbar)
    lo, hi = scale * min(0.0, rlow), scale * max(0.0, rbar)
    width = hi - lo
    tol = max(cfg["bisection_tol"] * max(width, 1.0), 1e-12)

    interior = np.arange(nb, cluster_mdp.n_states)
    pool_actions = {}

    def record(b, r, acts):
        key = tuple(acts[interior].tolist())
        if key not in pool_actions:
            pool_actions[key] = (b, r, acts)

    for b in range(nb):
        base = _absorbing_at(cluster_mdp, b)
        samples = np.linspace(lo, hi, cfg["n_r_samples"]) if width > 0 else np.array([0.0])
        acts = [_solve_local(_bonus_rewards(base, b, r)) for r in samples]
        for r, act in zip(samples, acts):
            record(b, float(r), act)
        # Bisect between neighbours that found different interior policies.
        stack = [
            (samples[i], samples[i + 1], acts[i], acts[i + 1])
            for i in range(len(samples) - 1)
            if not np.array_equal(acts[i][interior], acts[i + 1][interior])
        ]
        while stack:
            r0, r1, a0, a1 = stack.pop()
            if r1 - r0 <= tol:
                continue
            rm = 0.5 * (r0 + r1)
            am = _solve_local(_bonus_rewards(base, b, rm))
            record(b, float(rm), am)
            if not np.array_equal(am[interior], a0[interior]):
                stack.append((r0, rm, a0, am))
            if not np.array_equal(am[interior], a1[interior]):
                stack.append((rm, r1, am, a1))

    policies, tags = [], []
    first_feasible = np.argmax(cluster_mdp.feasible, axis=1)
    for b, r, acts in pool_actions.values():
        acts = acts.copy()
        bad = ~cluster_mdp.feasible[np.arange(cluster_mdp.n_states), acts]
        acts[bad] = first_feasible[bad]
        pi = regularize_policy(cluster_mdp, deterministic_policy(cluster_mdp, acts), lam)
        policies.append(pi)
        tags.append((b, r))
    return PolicyPool(policies=policies, tags=tags)


def alg3_pools(mdp: Mdp, partition: Partition, config=None, lam: float = 0.01) -> list:
    pools = []
    for c in partition.clusters:
        states = np.concatenate([c.boundary, c.interior]).astype(np.int64)
        sub = restrict(mdp, states)
        if c.boundary.size == 0:
            pools.append(PolicyPool(policies=[uniform_policy(sub)], tags=[(None, None)]))
            continue
        pools.append(policy_pool_for_cluster(sub, np.arange(c.boundary.size), config, lam))
    return pools


# ---------------------------------------------------------------------------
# Monte-Carlo cross-check


@dataclass
class McCompress:
    """Monte-Carlo estimates of one cluster policy's compressed quantities.

    Arrays are (n_starts, nb): probability, reward, discount, and length
    estimates with standard errors, plus per-(start, target) hit counts.
    """

    p: np.ndarray
    p_se: np.ndarray
    r: np.ndarray
    r_se: np.ndarray
    g: np.ndarray
    g_se: np.ndarray
    length: np.ndarray
    length_se: np.ndarray
    counts: np.ndarray
    censored: int


def _simulate_cluster(cluster_mdp: Mdp, pi: np.ndarray, nb: int, start: int, n_traj, rng, cap):
    """Run n_traj restricted-chain trajectories from `start` to the boundary."""
    n = cluster_mdp.n_states
    by_state = []
    for s in range(n):
        mask = cluster_mdp.s == s
        w = cluster_mdp.p[mask] * pi[s, cluster_mdp.a[mask]]
        total = w.sum()
        cum = np.cumsum(w / total)
        by_state.append(
            (cum, cluster_mdp.t[mask], cluster_mdp.r[mask], cluster_mdp.g[mask])
        )
    state = np.full(n_traj, start, dtype=np.int64)
    disc = np.ones(n_traj)
    rew = np.zeros(n_traj)
    steps = np.zeros(n_traj, dtype=np.int64)
    active = np.ones(n_traj, dtype=bool)
    end_state = np.full(n_traj, -1, dtype=np.int64)
    t = 0
    censored = 0
    while active.any():
        t += 1
        if t > cap:
            censored = int(active.sum())
            break
        act_idx = np.flatnonzero(active)
        cur = state[act_idx]
        u = rng.random(act_idx.size)
        for s in np.unique(cur):
            sel = act_idx[cur == s]
            cum, succ, r_arr, g_arr = by_state[s]
            k = np.searchsorted(cum, u[cur == s], side="right")
            k = np.minimum(k, succ.size - 1)
            rew[sel] += disc[sel] * r_arr[k]
            disc[sel] *= g_arr[k]
            state[sel] = succ[k]
            steps[sel] += 1
        done = active & (state < nb)
        end_state[done] = state[done]
        active &= ~done
    return end_state, rew, disc, steps, censored


def monte_carlo_compress(
    mdp: Mdp,
    partition: Partition,
    pi: np.ndarray,
    n_traj: int,
    rng_seed: int,
    step_cap: int = 10**6,
) -> dict:
    """Estimate each cluster's compressed quantities by simulation.

    Returns {cluster_id: {start local index: McCompress}}. Seeds derive from
    (rng_seed, cluster_id, start) so results are reproducible and independent
    of evaluation order.
    """
    if n_traj < 1:
        raise InvalidInputError("n_traj must be at least 1")
    pi = check_policy(mdp, pi)
    out = {}
    for cid, c in enumerate(partition.clusters):
        if c.boundary.size == 0:
            continue
        states = np.concatenate([c.boundary, c.interior]).astype(np.int64)
        nb = c.boundary.size
        sub = restrict(mdp, states)
        pi_c = pi[states]
        per_start = {}
        for i in range(nb):
            rng = np.random.default_rng(np.random.SeedSequence([rng_seed, cid, i]))
            end, rew, disc, steps, censored = _simulate_cluster(
                sub, pi_c, nb, i, n_traj, rng, step_cap
            )
            counts = np.bincount(end[end >= 0], minlength=nb).astype(float)
            p_hat = counts / n_traj
            p_se = np.sqrt(p_hat * (1 - p_hat) / n_traj)
            stats = {}
            for name, vals in (("r", rew), ("g", disc), ("length", steps.astype(float))):
                mean = np.zeros(nb)
                se = np.zeros(nb)
                for j in range(nb):
                    sel = end == j
                    nj = int(sel.sum())
                    if nj:
                        mean[j] = vals[sel].mean()
                        se[j] = vals[sel].std(ddof=1) / np.sqrt(nj) if nj > 1 else 0.0
                stats[name] = (mean, se)
            per_start[i] = McCompress(
                p_hat,
                p_se,
                stats["r"][0],
                stats["r"][1],
                stats["g"][0],
                stats["g"][1],
                stats["length"][0],
                stats["length"][1],
                counts,
                censored,
            )
        out[cid] = per_start
    return out
