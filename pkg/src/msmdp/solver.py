"""Top-down solution of a multiscale MDP hierarchy.

Each level fixes its bottleneck values from the coarser solution, solves
local boundary-value problems inside clusters, and refreshes the bottlenecks
by local averaging, exact value determination, or recompression. The six
variants pair one-pass or to-convergence interior sweeps ('o'/'c') with the
three boundary rules ('o' averaging, 'c' determination, 'r' recompress).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from msmdp.errors import InvalidInputError, NumericalError
from msmdp.compress import (
    CoarseMdp,
    PolicyPool,
    alg3_pools,
    compress_mdp,
    diffusion_pools,
)
from msmdp.mdp import (
    Mdp,
    blend_policy,
    check_policy,
    discounted_kernel,
    expected_reward_matrix,
    greedy_policy,
    policy_iteration,
    regularize_policy,
    restrict,
    uniform_policy,
)
from msmdp.partition import Partition, spectral_partition

VARIANTS = ("oo", "oc", "or", "co", "cc", "cr")
INTERIOR_PASS_CAP = 500


@dataclass
class HierarchyLevel:
    mdp: Mdp
    partition: Partition | None = None
    pools: list | None = None
    coarse: CoarseMdp | None = None


@dataclass
class Hierarchy:
    """Stack of (mdp, partition, pools, coarse) levels, finest first.

    Level j+1's MDP is level j's coarse MDP; the index map from coarse state
    i to fine state is level j's `coarse.bottlenecks[i]`.
    """

    levels: list
    pool_mode: str = "diffusion"
    truncated: bool = False

    @property
    def depth(self) -> int:
        return len(self.levels) - 1


@dataclass
class SolveConfig:
    variant: str = "cc"
    lam: float = 1.0
    tol_interior: float = 0.01
    tol_global: float = 1e-9
    max_outer_iters: int = 500
    n_boundary_updates: int | None = None  # None = auto from the theorem bound
    recompress_lam: float = 0.01

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 < self.lam <= 1.0:
            raise InvalidInputError("blend weight must lie in (0, 1]")


@dataclass
class SolveTrace:
    iterations: list = field(default_factory=list)
    l2_error: list = field(default_factory=list)
    linf_error: list = field(default_factory=list)
    policy_changes: list = field(default_factory=list)
    elapsed_ms: list = field(default_factory=list)
    converged: bool = False

    def record(self, it, v, reference, changes, t0):
        self.iterations.append(it)
        if reference is not None:
            self.l2_error.append(float(np.linalg.norm(v - reference)))
            self.linf_error.append(float(np.abs(v - reference).max()))
        else:
            self.l2_error.append(None)
            self.linf_error.append(None)
        self.policy_changes.append(int(changes))
        self.elapsed_ms.append(1000.0 * (time.perf_counter() - t0))

    def rows(self):
        for i in range(len(self.iterations)):
            yield (
                self.iterations[i],
                self.l2_error[i],
                self.linf_error[i],
                self.policy_changes[i],
                self.elapsed_ms[i],
            )


# ---------------------------------------------------------------------------
# Hierarchy construction


def build_hierarchy(
    mdp: Mdp,
    partition_config: dict | None = None,
    pool_mode: str = "diffusion",
    depth: int = 1,
    max_top_states: int = 10,
    pool_config: dict | None = None,
) -> Hierarchy:
    """Iterate partition + compression until `depth` levels or a small top.

    pool_mode 'diffusion' compresses each cluster with the uniform policy;
    'pool' generates the locally optimal policy pools. A level whose partition
    yields no bottlenecks truncates the hierarchy there.
    """
    if pool_mode not in ("diffusion", "pool"):
        raise InvalidInputError("pool_mode must be 'diffusion' or 'pool'")
    levels = []
    current = mdp
    truncated = False
    for _ in range(depth):
        parts = spectral_partition(current, uniform_policy(current), partition_config)
        part = parts[0]
        n_b = part.bottlenecks.size
        if n_b == 0 or n_b >= current.n_states:
            truncated = True
            break
        if pool_mode == "pool":
            pools = alg3_pools(current, part, pool_config)
        else:
            pools = diffusion_pools(current, part)
        coarse = compress_mdp(current, part, pools)
        levels.append(HierarchyLevel(current, part, pools, coarse))
        current = coarse.mdp
        if current.n_states <= max_top_states:
            break
    levels.append(HierarchyLevel(current))
    return Hierarchy(levels, pool_mode=pool_mode, truncated=truncated)


# ---------------------------------------------------------------------------
# Local solves


def auto_boundary_updates(gamma_bar: float) -> int:
    """Smallest N with gamma_bar**N < 1/2."""
    if not 0.0 < gamma_bar < 1.0:
        raise InvalidInputError("gamma_bar must lie in (0, 1)")
    n = max(1, int(np.floor(np.log(0.5) / np.log(gamma_bar))) + 1)
    while gamma_bar**n >= 0.5:
        n += 1
    while n > 1 and gamma_bar ** (n - 1) < 0.5:
        n -= 1
    return n


def interior_solve(
    cluster_mdp: Mdp, pi_interior: np.ndarray, v_boundary: np.ndarray, residual_tol: float = 1e-10
) -> np.ndarray:
    """Interior values of one cluster given fixed boundary values.

    Cluster states are ordered boundary-first; solves
    (I - Q) V_q = [D_r Q_r] 1 + D V_b with blocks from the discounted kernel
    and expected-reward matrix of the restricted cluster.
    """
    nb = np.asarray(v_boundary, dtype=float).size
    ni = cluster_mdp.n_states - nb
    if ni == 0:
        return np.zeros(0)
    if not np.all(np.isfinite(v_boundary)):
        raise InvalidInputError("boundary values must be finite")
    pg = discounted_kernel(cluster_mdp, pi_interior)
    pr = expected_reward_matrix(cluster_mdp, pi_interior)
    Q = pg[nb:, nb:]
    D = pg[nb:, :nb]
    rhs = pr[nb:, :].sum(axis=1) + D @ np.asarray(v_boundary, dtype=float)
    A = np.eye(ni) - Q
    try:
        v_q = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"interior solve: singular system ({exc})") from exc
    resid = np.abs(A @ v_q - rhs).max()
    if resid > residual_tol:
        v_q = v_q + np.linalg.solve(A, rhs - A @ v_q)
        resid = np.abs(A @ v_q - rhs).max()
        if resid > residual_tol:
            raise NumericalError(f"interior solve: residual {resid:.3e}")
    return v_q


def boundary_update_averaging(
    mdp: Mdp, pi: np.ndarray, v: np.ndarray, bottlenecks, n_updates: int | None = None
) -> np.ndarray:
    """Apply T_pi restricted to the bottlenecks n_updates times.

    With n_updates None, uses the smallest N with gamma_bar**N < 1/2, the
    count required for convergence of the alternating scheme.
    """
    bottlenecks = np.asarray(bottlenecks, dtype=int)
    if n_updates is None:
        n_updates = auto_boundary_updates(mdp.gamma_bar())
    gp = discounted_kernel(mdp, pi)
    rew = expected_reward_matrix(mdp, pi).sum(axis=1)
    out = np.asarray(v, dtype=float).copy()
    for _ in range(n_updates):
        out[bottlenecks] = rew[bottlenecks] + gp[bottlenecks] @ out
    return out


def boundary_update_determination(mdp: Mdp, pi: np.ndarray, v: np.ndarray, bottlenecks) -> np.ndarray:
    """Exact bottleneck values given fixed interior values.

    Solves (I - B) V_b = [B_r C_r] 1 + C V_q with the global block partition
    ordered [bottlenecks; interiors].
    """
    bottlenecks = np.asarray(bottlenecks, dtype=int)
    rest = np.setdiff1d(np.arange(mdp.n_states), bottlenecks)
    pg = discounted_kernel(mdp, pi)
    pr = expected_reward_matrix(mdp, pi)
    B = pg[np.ix_(bottlenecks, bottlenecks)]
    C = pg[np.ix_(bottlenecks, rest)]
    rhs = pr[bottlenecks, :].sum(axis=1) + C @ np.asarray(v, dtype=float)[rest]
    A = np.eye(bottlenecks.size) - B
    try:
        return np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"boundary determination: singular system ({exc})") from exc


def _policy_pools_from(mdp: Mdp, partition: Partition, pi: np.ndarray, lam: float) -> list:
    pools = []
    for c in partition.clusters:
        states = np.concatenate([c.boundary, c.interior]).astype(np.int64)
        sub = restrict(mdp, states)
        pools.append(
            PolicyPool(policies=[regularize_policy(sub, pi[states], lam)], tags=[(None, None)])
        )
    return pools


def merge_coarse(a: CoarseMdp, b: CoarseMdp) -> CoarseMdp:
    """Concatenate the action sets of two compressions of the same partition."""
    if not np.array_equal(a.bottlenecks, b.bottlenecks):
        raise InvalidInputError("cannot merge coarse MDPs over different bottleneck sets")
    m = a.mdp
    n = b.mdp
    offset = m.n_actions
    s = np.concatenate([m.s, n.s])
    aa = np.concatenate([m.a, n.a + offset])
    t = np.concatenate([m.t, n.t])
    p = np.concatenate([m.p, n.p])
    r = np.concatenate([m.r, n.r])
    g = np.concatenate([m.g, n.g])
    feas = np.concatenate([m.feasible, n.feasible], axis=1)
    merged = Mdp(m.n_states, offset + n.n_actions, s, aa, t, p, r, g, feas, m.terminal)
    lengths = np.concatenate([a.path_lengths, b.path_lengths], axis=1)
    return CoarseMdp(merged, list(a.actions) + list(b.actions), a.bottlenecks, lengths)


def boundary_update_recompress(
    hierarchy: Hierarchy,
    level: int,
    current_pi: np.ndarray,
    augment: bool,
    base_coarse: CoarseMdp | None = None,
    regularize_lam: float = 0.01,
):
    """Recompress the level against the current policy and resolve the coarse MDP.

    With `augment`, the new actions are concatenated to `base_coarse` (the
    initial compression by default), so the coarse optimum cannot decrease;
    otherwise the recompression replaces the previous coarse actions. Returns
    (values on the bottleneck set, the coarse MDP that produced them).
    """
    if level + 1 >= len(hierarchy.levels):
        raise InvalidInputError("recompression requires a coarser level")
    lv = hierarchy.levels[level]
    pools = _policy_pools_from(lv.mdp, lv.partition, current_pi, regularize_lam)
    fresh = compress_mdp(lv.mdp, lv.partition, pools)
    if augment:
        base = base_coarse if base_coarse is not None else lv.coarse
        coarse = merge_coarse(base, fresh)
    else:
        coarse = fresh
    res = policy_iteration(coarse.mdp)
    if not res.converged:
        raise NumericalError("coarse solve after recompression did not converge")
    return res.v, coarse


# ---------------------------------------------------------------------------
# Level solver (Table-1 variants)


@dataclass
class _LevelWorkspace:
    clusters: list  # (states, nb, sub_mdp) per cluster
    interiors: np.ndarray
    bottlenecks: np.ndarray


def _workspace(mdp: Mdp, partition: Partition) -> _LevelWorkspace:
    clusters = []
    for c in partition.clusters:
        states = np.concatenate([c.boundary, c.interior]).astype(np.int64)
        clusters.append((states, c.boundary.size, restrict(mdp, states)))
    interiors = (
        np.concatenate([c.interior for c in partition.clusters])
        if partition.clusters
        else np.zeros(0, dtype=np.int64)
    )
    return _LevelWorkspace(clusters, np.sort(interiors), np.asarray(partition.bottlenecks))


def _interior_pass(mdp, ws, pi, v):
    """One sweep of per-cluster boundary-value solves; returns sup change."""
    delta = 0.0
    for states, nb, sub in ws.clusters:
        if states.size == nb:
            continue
        v_q = interior_solve(sub, pi[states], v[states[:nb]])
        delta = max(delta, float(np.abs(v[states[nb:]] - v_q).max()))
        v[states[nb:]] = v_q
    return delta


def _update_rows(pi, pi_greedy, rows, lam):
    if rows.size == 0:
        return pi, 0
    before = np.argmax(pi[rows], axis=1)
    new_rows = lam * pi_greedy[rows] + (1.0 - lam) * pi[rows]
    changed = int(np.sum(np.argmax(new_rows, axis=1) != before))
    pi = pi.copy()
    pi[rows] = new_rows
    return pi, changed


def solve_level(
    hierarchy: Hierarchy,
    level: int,
    v_coarse: np.ndarray,
    pi0: np.ndarray | None,
    config: SolveConfig,
    reference: np.ndarray | None = None,
):
    """Alternating interior-boundary solution of one hierarchy level.

    Bottleneck values start at `v_coarse`. Each outer iteration runs the
    variant's interior passes (boundary-value solve, greedy improvement,
    blend), updates the bottleneck policy, then refreshes bottleneck values
    by the variant's boundary rule. Stops when the sup-norm change of the
    value function falls below tol_global.
    """
    lv = hierarchy.levels[level]
    if lv.partition is None:
        raise InvalidInputError("cannot run solve_level on the coarsest level")
    mdp = lv.mdp
    ws = _workspace(mdp, lv.partition)
    bns = ws.bottlenecks
    v_coarse = np.asarray(v_coarse, dtype=float)
    if v_coarse.shape != (bns.size,):
        raise InvalidInputError("v_coarse must be indexed by the level's bottlenecks")
    pi = uniform_policy(mdp) if pi0 is None else check_policy(mdp, pi0)
    v = np.zeros(mdp.n_states)
    v[bns] = v_coarse
    trace = SolveTrace()
    augment = hierarchy.pool_mode == "pool"
    coarse_acc = lv.coarse
    seen_recompress = set()
    t0 = time.perf_counter()

    # Each interior pass counts as one outer iteration; the boundary update
    # that follows the last pass of a cycle belongs to that pass's iteration.
    it_count = 0
    while it_count < config.max_outer_iters and not trace.converged:
        v_cycle_start = v.copy()
        passes = 0
        while True:
            passes += 1
            it_count += 1
            delta_in = _interior_pass(mdp, ws, pi, v)
            pi_greedy = greedy_policy(mdp, v, states=ws.interiors, base=pi)
            pi, ch = _update_rows(pi, pi_greedy, ws.interiors, config.lam)
            done = (
                config.variant[0] == "o"
                or ch == 0
                or passes >= INTERIOR_PASS_CAP
                or it_count >= config.max_outer_iters
            )
            if not done and passes > 1:
                scale = max(
                    float(np.abs(v[ws.interiors]).max()) if ws.interiors.size else 0.0,
                    1e-12,
                )
                done = delta_in / scale < config.tol_interior
            if done:
                break
            trace.record(it_count, v, reference, ch, t0)
        # Bottleneck updates read interior values consistent with the blended
        # policy, so refresh the boundary-value solves once more.
        _interior_pass(mdp, ws, pi, v)
        # Bottleneck policy update, then the variant's value rule.
        pi_greedy_b = greedy_policy(mdp, v, states=bns, base=pi)
        pi, ch_b = _update_rows(pi, pi_greedy_b, bns, config.lam)
        rule = config.variant[1]
        if rule == "o":
            v = boundary_update_averaging(mdp, pi, v, bns, config.n_boundary_updates)
        elif rule == "c":
            v[bns] = boundary_update_determination(mdp, pi, v, bns)
        else:
            key = tuple(np.argmax(pi, axis=1).tolist())
            if key not in seen_recompress:
                seen_recompress.add(key)
                v_b, coarse_acc = boundary_update_recompress(
                    hierarchy,
                    level,
                    pi,
                    augment,
                    base_coarse=coarse_acc,
                    regularize_lam=config.recompress_lam,
                )
                v[bns] = v_b
        trace.record(it_count, v, reference, ch + ch_b, t0)
        if np.abs(v - v_cycle_start).max() < config.tol_global:
            trace.converged = True
    return pi, v, trace


def solve_hierarchy(
    hierarchy: Hierarchy,
    config: SolveConfig,
    reference: np.ndarray | None = None,
    initial_policies: dict | None = None,
    coarse_value_overrides: dict | None = None,
):
    """Solve coarsest-to-finest, pushing each solution down one level.

    `initial_policies` maps level index to a starting policy (e.g. from
    transfer); `coarse_value_overrides` maps level index to replacement
    bottleneck values (e.g. from potential-operator transfer). Returns
    (policy, values, {level: trace}) for the finest level.
    """
    initial_policies = initial_policies or {}
    coarse_value_overrides = coarse_value_overrides or {}
    top = hierarchy.levels[-1].mdp
    res = policy_iteration(top, initial_policies.get(len(hierarchy.levels) - 1))
    traces = {len(hierarchy.levels) - 1: res.trace}
    v_next = res.v
    pi_out, v_out = res.pi, res.v
    for level in range(len(hierarchy.levels) - 2, -1, -1):
        # Level `level`'s bottleneck i is state i of level+1's MDP, so the
        # full solved vector above is exactly this level's boundary data.
        v_coarse = coarse_value_overrides.get(level, v_next)
        pi_out, v_out, trace = solve_level(
            hierarchy,
            level,
            v_coarse,
            initial_policies.get(level),
            config,
            reference if level == 0 else None,
        )
        traces[level] = trace
        v_next = v_out
    return pi_out, v_out, traces
