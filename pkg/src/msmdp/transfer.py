"""Transfer of policies and potential operators between MDP hierarchies.

Clusters of the two problems are paired by diffusion-map graph distance,
states within paired clusters by maximum-affinity assignment (or an identity
label map), actions by the most-likely-successor rule. Tentative transfers
are kept only when a signed log-relative value comparison against the
destination's current policy says they help.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from msmdp.errors import InvalidInputError, NumericalError
from msmdp.compress import SUPPORT_TOL
from msmdp.mdp import (
    Mdp,
    check_policy,
    discounted_kernel,
    expected_reward_matrix,
    policy_average,
    policy_iteration,
    potential_operator,
    restrict,
    uniform_policy,
)
from msmdp.partition import (
    DiffusionEmbedding,
    cross_distance,
    diffusion_map,
    directed_laplacian,
    moment_align,
    stationary_distribution,
    teleport,
)
from msmdp.solver import Hierarchy, SolveConfig, interior_solve, solve_level

DEFAULT_P_DIMS = 10
ACCEPT_TOL = 1e-9  # treat detection scores below this as "no improvement"


@dataclass
class SolvedHierarchy:
    """A hierarchy together with per-level solved policies and values."""

    hierarchy: Hierarchy
    policies: dict  # level -> policy array
    values: dict  # level -> value array


@dataclass
class PairDecision:
    scale: int
    source_cluster: int
    dest_cluster: int
    distance: float
    mode: str  # 'policy' | 'potential' | 'none'
    score: float
    eta: dict = field(default_factory=dict)  # dest fine/coarse state -> source state
    policy_rows: dict = field(default_factory=dict)  # dest state -> action id
    boundary_values: dict = field(default_factory=dict)  # dest state -> value


@dataclass
class TransferPlan:
    pairs: list
    initial_policy: np.ndarray | None = None  # finest destination level
    coarse_value_overrides: dict = field(default_factory=dict)  # level -> values

    def accepted(self):
        return [p for p in self.pairs if p.mode != "none"]


# ---------------------------------------------------------------------------
# Cluster correspondence


def cluster_embedding(mdp: Mdp, states, pi=None, p_dims=None, eta_tel=0.01) -> DiffusionEmbedding:
    """Diffusion-map embedding of one cluster's statespace subgraph."""
    states = np.asarray(states, dtype=int)
    if states.size < 2:
        raise InvalidInputError("cluster embeddings need at least 2 states")
    sub = restrict(mdp, states)
    pi_c = uniform_policy(sub) if pi is None else pi
    p_pi, _ = policy_average(sub, pi_c)
    tel = teleport(p_pi, eta_tel)
    mu = stationary_distribution(tel)
    L = directed_laplacian(tel, mu)
    p = min(DEFAULT_P_DIMS if p_dims is None else p_dims, states.size - 1)
    return diffusion_map(L, p)


def cluster_distance(e1: DiffusionEmbedding, e2: DiffusionEmbedding, p_dims=None) -> float:
    """Mean pairwise distance between sign-aligned cluster embeddings."""
    p = min(e1.p_dims, e2.p_dims, p_dims or DEFAULT_P_DIMS)
    tau = moment_align(e1.eigenvectors[:, 1 : p + 1], e2.eigenvectors[:, 1 : p + 1])
    x1 = e1.coords[:, :p] * tau[None, :]
    x2 = e2.coords[:, :p]
    diff = x1[:, None, :] - x2[None, :, :]
    return float(np.sqrt((diff**2).sum(axis=2)).mean())


def match_clusters(h1: Hierarchy, h2: Hierarchy, scale: int, p_dims=None) -> list:
    """Pair every destination cluster with its nearest source cluster.

    Matching scores are energy distances, 2 d(G, G') - d(G, G) - d(G', G'):
    the raw mean cross-distance is minimized by whichever cluster has the
    tightest embedding cloud rather than the best-matching shape, while the
    self-distance correction vanishes exactly when the clouds coincide.
    Returns (source_cluster_id, dest_cluster_id, score) triples, one per
    destination cluster at the given scale.
    """
    lv1 = h1.levels[scale]
    lv2 = h2.levels[scale]
    if lv1.partition is None or lv2.partition is None:
        raise InvalidInputError(f"both hierarchies need a partition at scale {scale}")

    def embed(lv, c):
        states = c.states()
        return cluster_embedding(lv.mdp, states, p_dims=p_dims) if states.size >= 2 else None

    emb1 = [embed(lv1, c) for c in lv1.partition.clusters]
    self1 = [None if e is None else cluster_distance(e, e, p_dims) for e in emb1]
    pairs = []
    for j, c2 in enumerate(lv2.partition.clusters):
        e2 = embed(lv2, c2)
        if e2 is None:
            pairs.append((0, j, np.inf))
            continue
        self2 = cluster_distance(e2, e2, p_dims)
        best, best_d = 0, np.inf
        for i, e1 in enumerate(emb1):
            if e1 is None:
                continue
            d = 2.0 * cluster_distance(e1, e2, p_dims) - self1[i] - self2
            if d < best_d:
                best, best_d = i, d
        pairs.append((best, j, float(best_d)))
    return pairs


def match_states(
    mdp1: Mdp,
    states1,
    mdp2: Mdp,
    states2,
    sigma_mode: str = "matched",
    labels1=None,
    labels2=None,
    p_dims=None,
) -> dict:
    """Injective map eta from destination states to source states.

    'matched' builds affinities exp(-d^2 / sigma^2) from cross diffusion
    distances (sigma = the median pairwise distance) and solves a
    maximum-weight assignment; 'identity' maps by shared labels (state ids by
    default) and ignores the geometry.
    """
    states1 = np.asarray(states1, dtype=int)
    states2 = np.asarray(states2, dtype=int)
    if states1.size == 0 or states2.size == 0:
        raise InvalidInputError("cannot match empty clusters")
    if sigma_mode == "identity":
        l1 = states1 if labels1 is None else np.asarray(labels1)
        l2 = states2 if labels2 is None else np.asarray(labels2)
        lookup = {}
        for s, lab in zip(states1, l1):
            lookup.setdefault(_key(lab), int(s))
        return {int(w): lookup[_key(lab)] for w, lab in zip(states2, l2) if _key(lab) in lookup}
    e1 = cluster_embedding(mdp1, states1, p_dims=p_dims)
    e2 = cluster_embedding(mdp2, states2, p_dims=p_dims)
    d2 = cross_distance(e1, e2)
    sigma = float(np.sqrt(np.median(d2[d2 > 0]))) if np.any(d2 > 0) else 1.0
    W = np.exp(-d2 / max(sigma**2, 1e-300))
    if not np.all(np.isfinite(W)) or W.size == 0:
        raise NumericalError("no usable affinities for state matching")
    rows, cols = linear_sum_assignment(-W)
    return {int(states2[c]): int(states1[r]) for r, c in zip(rows, cols)}


def _key(label):
    return tuple(label) if isinstance(label, (list, tuple, np.ndarray)) else label


# ---------------------------------------------------------------------------
# Action mapping and policy transfer


def _transition_row(mdp: Mdp, s: int, a: int) -> np.ndarray:
    row = np.zeros(mdp.n_states)
    mask = (mdp.s == s) & (mdp.a == a)
    np.add.at(row, mdp.t[mask], mdp.p[mask])
    return row


def map_action(
    w: int,
    pi_star_actions: np.ndarray,
    mdp1: Mdp,
    mdp2: Mdp,
    eta: dict,
    v_source: np.ndarray | None = None,
):
    """Destination action most likely to mimic the source policy's move.

    Follows pi* one step from eta(w) to its most likely successor; if that
    successor is matched back into the destination, returns the destination
    action with the largest probability of the corresponding move, else None.
    Probability ties among successors are broken by the source value function
    when available (the state the policy is actually steering toward), then
    by lowest state id; destination-action ties break to the lowest id.
    """
    if w not in eta:
        raise InvalidInputError(f"state {w} has no correspondence")
    s = eta[w]
    a_src = int(pi_star_actions[s])
    row = _transition_row(mdp1, s, a_src)
    top = np.flatnonzero(row >= row.max() - 1e-12)
    if v_source is not None and top.size > 1:
        s_next = int(top[np.argmax(v_source[top])])
    else:
        s_next = int(top[0])
    inverse = {v: k for k, v in eta.items()}
    if s_next not in inverse:
        return None
    w_next = inverse[s_next]
    mass = np.zeros(mdp2.n_actions)
    mask = (mdp2.s == w) & (mdp2.t == w_next)
    np.add.at(mass, mdp2.a[mask], mdp2.p[mask])
    mass[~mdp2.feasible[w]] = -np.inf
    return int(np.argmax(mass))


def overlap_region(interior2, eta: dict, cluster1_states) -> np.ndarray:
    """W_eta: destination interior states whose images land in the source cluster."""
    c1 = set(int(s) for s in cluster1_states)
    return np.array(
        sorted(int(w) for w in interior2 if w in eta and eta[w] in c1), dtype=np.int64
    )


def transfer_policy(
    pi_star_actions: np.ndarray,
    eta: dict,
    mdp1: Mdp,
    mdp2: Mdp,
    interior2,
    cluster1_states,
    default: np.ndarray | None = None,
    v_source: np.ndarray | None = None,
) -> tuple:
    """Point-mass transferred policy on W_eta, default rows elsewhere.

    Returns (policy over all mdp2 states, W_eta, transferred row map). Rows
    outside the cluster interior keep the default policy (uniform unless a
    previous policy is supplied); unmappable states fall back to the default.
    """
    base = uniform_policy(mdp2) if default is None else np.asarray(default, dtype=float).copy()
    w_eta = overlap_region(interior2, eta, cluster1_states)
    rows = {}
    pi = base.copy()
    for w in w_eta:
        a = map_action(int(w), pi_star_actions, mdp1, mdp2, eta, v_source)
        if a is None:
            continue
        pi[w] = 0.0
        pi[w, a] = 1.0
        rows[int(w)] = int(a)
    return pi, w_eta, rows


# ---------------------------------------------------------------------------
# Potential-operator transfer


def _reward_tensor_lookup(mdp: Mdp):
    table = {}
    for s, a, t, r in zip(mdp.s, mdp.a, mdp.t, mdp.r):
        table[(int(s), int(a), int(t))] = float(r)
    return table


def coarse_action_map(h1: Hierarchy, h2: Hierarchy, scale: int, p_dims=None) -> dict:
    """Source-to-destination action correspondence for a coarse level.

    A coarse action means "execute policy k in cluster c" of the level below,
    so actions map along the cluster correspondence at scale - 1, keeping the
    pool index. Actions whose cluster has no match (or whose pool index does
    not exist on the other side) are left out.
    """
    if scale < 1:
        raise InvalidInputError("coarse action maps exist for scales >= 1")
    lv1 = h1.levels[scale - 1]
    lv2 = h2.levels[scale - 1]
    pairs = match_clusters(h1, h2, scale - 1, p_dims)
    src_to_dst_cluster = {}
    for c1, c2, d in sorted(pairs, key=lambda t: t[2]):
        src_to_dst_cluster.setdefault(c1, c2)
    out = {}
    for a1, act in enumerate(lv1.coarse.actions):
        c2 = src_to_dst_cluster.get(act.cluster_id)
        if c2 is None:
            continue
        for a2, act2 in enumerate(lv2.coarse.actions):
            if act2.cluster_id == c2 and act2.policy_id == act.policy_id:
                out[a1] = a2
                break
    return out


def transfer_potential(
    g_source: np.ndarray,
    pi_star_actions: np.ndarray,
    eta: dict,
    mdp1: Mdp,
    mdp2: Mdp,
    v_source: np.ndarray | None = None,
    action_map: dict | None = None,
) -> dict:
    """Apply the source potential operator to destination rewards.

    Builds the one-step destination rewards aggregated along the transferred
    policy, maps them to the source statespace through eta, applies the
    source potential operator, and maps the values back. Returns
    {destination state: value} over the states eta covers. At coarse scales
    `action_map` carries the cluster-correspondence action mapping; states it
    does not cover fall back to the most-likely-successor rule.
    """
    if not eta:
        raise InvalidInputError("potential transfer needs a nonempty correspondence")
    inverse = {v: k for k, v in eta.items()}
    r2 = _reward_tensor_lookup(mdp2)
    # Transferred destination policy at matched states.
    dest_action = {}
    for w in eta:
        a = None
        if action_map is not None:
            a = action_map.get(int(pi_star_actions[eta[w]]))
        if a is None:
            a = map_action(int(w), pi_star_actions, mdp1, mdp2, eta, v_source)
        dest_action[int(w)] = a
    r21 = np.zeros(mdp1.n_states)
    covered = np.zeros(mdp1.n_states, dtype=bool)
    for s in sorted(inverse):
        w = inverse[s]
        a_src = int(pi_star_actions[s])
        row = _transition_row(mdp1, s, a_src)
        total = 0.0
        for s_next in np.flatnonzero(row > 0):
            if int(s_next) not in inverse:
                continue
            w_next = inverse[int(s_next)]
            a_dest = dest_action.get(w)
            if a_dest is None:
                continue
            total += row[s_next] * r2.get((w, a_dest, w_next), 0.0)
        r21[s] = total
        covered[s] = True
    values = g_source @ r21
    return {int(w): float(values[s]) for s, w in inverse.items() if covered[s]}


# ---------------------------------------------------------------------------
# Transferability detection


def _local_values(mdp: Mdp, cluster_states, nb: int, pi: np.ndarray, v_boundary) -> np.ndarray:
    """Interior values of a cluster under `pi` with fixed boundary values."""
    sub = restrict(mdp, cluster_states)
    v_q = interior_solve(sub, pi[cluster_states], np.asarray(v_boundary, dtype=float))
    return v_q


def detection_score(v_transfer: np.ndarray, v_current: np.ndarray) -> float:
    """Signed log-relative improvement statistic over a cluster interior."""
    diff = np.asarray(v_transfer, dtype=float) - np.asarray(v_current, dtype=float)
    base = np.abs(np.asarray(v_current, dtype=float))
    base = base + (base == 0.0)
    return float(np.sum(np.sign(diff) * np.log(np.abs(diff) / base + 1.0)))


def detect_policy_transfer(
    mdp2: Mdp,
    cluster2,
    pi_transferred: np.ndarray,
    pi_current: np.ndarray,
    v_coarse: dict,
    conservative: bool = False,
) -> tuple:
    """Accept a tentative policy transfer iff it improves the interior values.

    v_coarse maps the cluster's boundary states to their current coarse
    values. Returns (accept, T).
    """
    states = np.concatenate([cluster2.boundary, cluster2.interior]).astype(np.int64)
    nb = cluster2.boundary.size
    v_b = np.array([v_coarse[int(s)] for s in cluster2.boundary], dtype=float)
    v_j = _local_values(mdp2, states, nb, pi_transferred, v_b)
    v_u = _local_values(mdp2, states, nb, pi_current, v_b)
    if conservative:
        return bool(np.all(v_j >= v_u - 1e-12)), detection_score(v_j, v_u)
    t = detection_score(v_j, v_u)
    return t > ACCEPT_TOL, t


def detect_potential_transfer(
    mdp2: Mdp,
    cluster2,
    payload: dict,
    pi_current: np.ndarray,
    v_coarse: dict,
    conservative: bool = False,
) -> tuple:
    """Detection for potential-operator payloads.

    The payload's states join the cluster boundary with their transferred
    values; remaining interior states are completed by the boundary-value
    problem under the current policy, and the result is compared to the
    no-transfer values by the same statistic.
    """
    interior = [int(s) for s in cluster2.interior]
    w_eta = np.array(sorted(s for s in interior if s in payload), dtype=np.int64)
    free = np.array(sorted(set(interior) - set(w_eta.tolist())), dtype=np.int64)
    bound = np.concatenate([cluster2.boundary, w_eta]).astype(np.int64)
    v_bound = np.array(
        [v_coarse[int(s)] for s in cluster2.boundary] + [payload[int(s)] for s in w_eta]
    )
    v_j = np.zeros(len(interior))
    pos = {int(s): i for i, s in enumerate(sorted(interior))}
    for s, val in zip(w_eta, v_bound[cluster2.boundary.size :]):
        v_j[pos[int(s)]] = val
    if free.size:
        states = np.concatenate([bound, free])
        v_free = _local_values(mdp2, states, bound.size, pi_current, v_bound)
        for s, val in zip(free, v_free):
            v_j[pos[int(s)]] = val
    states_all = np.concatenate([cluster2.boundary, np.array(sorted(interior), dtype=np.int64)])
    v_u = _local_values(
        mdp2,
        states_all,
        cluster2.boundary.size,
        pi_current,
        [v_coarse[int(s)] for s in cluster2.boundary],
    )
    if conservative:
        return bool(np.all(v_j >= v_u - 1e-12)), detection_score(v_j, v_u)
    t = detection_score(v_j, v_u)
    return t > ACCEPT_TOL, t


# ---------------------------------------------------------------------------
# End-to-end transfer


def destination_coarse_values(h2: Hierarchy, down_to: int = 0) -> dict:
    """Solve the destination hierarchy's coarse levels top-down.

    Returns {level: values over that level's MDP states} for levels above
    `down_to`, without touching the level `down_to` itself.
    """
    out = {}
    top = len(h2.levels) - 1
    res = policy_iteration(h2.levels[top].mdp)
    out[top] = res.v
    cfg = SolveConfig(variant="cc")
    for level in range(top - 1, down_to, -1):
        _, v, _ = solve_level(h2, level, out[level + 1], None, cfg)
        out[level] = v
    return out


def _fine_footprint(h: Hierarchy, level: int, states) -> set:
    states = [int(s) for s in states]
    while level > 0:
        below = h.levels[level - 1]
        states = [int(below.coarse.bottlenecks[s]) for s in states]
        level -= 1
    return set(states)


def _scale_clusters(level) -> list:
    """Clusters at a level; the coarsest level is one all-interior cluster."""
    if level.partition is not None:
        return list(level.partition.clusters)
    from msmdp.partition import Cluster

    n = level.mdp.n_states
    return [Cluster(interior=np.arange(n, dtype=np.int64), boundary=np.zeros(0, dtype=np.int64))]


def _boundary_value_map(h2: Hierarchy, scale: int, cluster, coarse_values: dict) -> dict:
    """Fine-id -> current coarse value for a cluster's boundary states."""
    if cluster.boundary.size == 0:
        return {}
    v_above = coarse_values[scale + 1]
    bn_index = {int(b): i for i, b in enumerate(h2.levels[scale].coarse.bottlenecks)}
    return {int(s): float(v_above[bn_index[int(s)]]) for s in cluster.boundary}


def execute_transfer(h1: SolvedHierarchy, h2: Hierarchy, config: dict | None = None) -> TransferPlan:
    """Match, tentatively transfer, detect, and assemble solver inputs.

    Scales are processed bottom-up; a coarse pair whose fine-scale footprint
    was already covered by an accepted finer transfer is skipped. Policy
    payloads (finest scale) land in the plan's initial fine policy; potential
    payloads become coarse-value overrides for the level below their scale.
    """
    cfg = {
        "mode": "policy",
        "scales": None,
        "eta_mode": "matched",
        "p_dims": None,
        "conservative": False,
        "labels1": None,
        "labels2": None,
    }
    if config:
        cfg.update(config)
    hier1 = h1.hierarchy
    mode = cfg["mode"]
    top = len(h2.levels) - 1
    scales = cfg["scales"]
    if scales is None:
        scales = {"policy": [0], "potential": [top], "auto": sorted({0, top})}[mode]
    coarse_values = destination_coarse_values(h2, down_to=0)
    plan = TransferPlan(pairs=[])
    covered_fine: set = set()
    init_policy = uniform_policy(h2.levels[0].mdp)
    any_policy_rows = False

    for scale in sorted(scales):
        if scale >= len(hier1.levels) or scale > top:
            continue
        lv1, lv2 = hier1.levels[scale], h2.levels[scale]
        clusters1 = _scale_clusters(lv1)
        clusters2 = _scale_clusters(lv2)
        pi_star = np.argmax(h1.policies[scale], axis=1)
        v_star = h1.values.get(scale)
        if lv1.partition is not None and lv2.partition is not None:
            pairs = match_clusters(hier1, h2, scale, cfg["p_dims"])
        else:
            pairs = [(0, 0, 0.0)]
        do_policy = mode in ("policy", "auto") and scale == 0
        for c1_id, c2_id, dist in pairs:
            c1, c2 = clusters1[c1_id], clusters2[c2_id]
            footprint = _fine_footprint(h2, scale, c2.states())
            if scale > 0 and covered_fine and footprint <= covered_fine:
                continue
            states1, states2 = c1.states(), c2.states()
            eta = match_states(
                lv1.mdp,
                states1,
                lv2.mdp,
                states2,
                sigma_mode=cfg["eta_mode"],
                labels1=None if cfg["labels1"] is None else [cfg["labels1"][s] for s in states1],
                labels2=None if cfg["labels2"] is None else [cfg["labels2"][s] for s in states2],
                p_dims=cfg["p_dims"],
            )
            decision = PairDecision(scale, c1_id, c2_id, dist, "none", 0.0, eta=dict(eta))
            plan.pairs.append(decision)
            if not eta:
                continue
            v_coarse_map = _boundary_value_map(h2, scale, c2, coarse_values)
            if do_policy:
                pi_t, w_eta, rows = transfer_policy(
                    pi_star,
                    eta,
                    lv1.mdp,
                    lv2.mdp,
                    c2.interior,
                    states1,
                    default=init_policy,
                    v_source=v_star,
                )
                if w_eta.size == 0 or not rows:
                    continue
                accept, t = detect_policy_transfer(
                    lv2.mdp,
                    c2,
                    pi_t,
                    uniform_policy(lv2.mdp),
                    v_coarse_map,
                    cfg["conservative"],
                )
                decision.score = t
                if accept:
                    decision.mode = "policy"
                    decision.policy_rows = rows
                    for w, a in rows.items():
                        init_policy[w] = 0.0
                        init_policy[w, a] = 1.0
                    any_policy_rows = True
                    covered_fine |= footprint
            elif mode in ("potential", "auto") and scale > 0:
                g_src = potential_operator(lv1.mdp, h1.policies[scale])
                try:
                    amap = coarse_action_map(hier1, h2, scale, cfg["p_dims"])
                except InvalidInputError:
                    amap = None
                payload = transfer_potential(
                    g_src, pi_star, eta, lv1.mdp, lv2.mdp, v_star, action_map=amap
                )
                interior_set = set(int(x) for x in c2.interior)
                local = {s: payload[s] for s in payload if s in interior_set}
                if not local:
                    continue
                accept, t = detect_potential_transfer(
                    lv2.mdp, c2, local, uniform_policy(lv2.mdp), v_coarse_map, cfg["conservative"]
                )
                decision.score = t
                if accept:
                    decision.mode = "potential"
                    decision.boundary_values = local
                    covered_fine |= footprint
    if any_policy_rows:
        plan.initial_policy = init_policy
    # Potential payloads become boundary data for the level below their scale.
    for p in plan.pairs:
        if p.mode == "potential" and p.scale > 0:
            level = p.scale - 1
            base = coarse_values.get(p.scale)
            if base is None:
                continue
            override = plan.coarse_value_overrides.setdefault(level, base.copy())
            for s, val in p.boundary_values.items():
                override[s] = val
    return plan
