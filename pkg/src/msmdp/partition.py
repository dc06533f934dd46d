"""Bottleneck detection and recursive spectral partitioning.

The statespace graph is the policy-averaged chain P^pi. Cuts come from
sweeping thresholds over eigenvectors of the directed graph Laplacian
symmetrized by the teleported chain's invariant distribution; bottlenecks are
severed-edge endpoints. Recursion depth induces the scales of a hierarchy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from msmdp.errors import InvalidInputError, NoCutError, NumericalError
from msmdp.mdp import Mdp, policy_average, restrict

DEFAULT_ETA = 0.01
DEFAULT_K = 3
DEFAULT_MAX_DEPTH = 3
DEFAULT_MIN_CLUSTER_SIZE = 8
DEFAULT_MAX_CONDUCTANCE = 0.5


@dataclass
class Cluster:
    """An interior equivalence class plus its attached bottlenecks."""

    interior: np.ndarray
    boundary: np.ndarray

    def states(self) -> np.ndarray:
        return np.concatenate([self.boundary, self.interior]).astype(np.int64)


@dataclass
class Partition:
    """Bottleneck set and clusters for one scale."""

    bottlenecks: np.ndarray
    clusters: list

    def __post_init__(self):
        self.bottlenecks = np.asarray(self.bottlenecks, dtype=np.int64)

    def n_states(self) -> int:
        return int(self.bottlenecks.size + sum(c.interior.size for c in self.clusters))

    def cluster_of(self, state: int):
        for i, c in enumerate(self.clusters):
            if state in c.interior:
                return i
        return None


@dataclass
class DiffusionEmbedding:
    """Laplacian eigenpairs and the (1 - lambda)-scaled coordinates."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # orthonormal columns, ascending eigenvalues
    coords: np.ndarray  # shape (n, p): Psi^(k)_i (1 - lambda_k), k = 1..p

    @property
    def p_dims(self) -> int:
        return self.coords.shape[1]


# ---------------------------------------------------------------------------
# Spectral machinery


def teleport(p_pi: np.ndarray, eta: float) -> np.ndarray:
    """(1 - eta) P + eta/n: strictly positive, row-stochastic."""
    p_pi = np.asarray(p_pi, dtype=float)
    if not 0.0 < eta < 1.0:
        raise InvalidInputError("teleport weight must lie in (0, 1)")
    n = p_pi.shape[0]
    return (1.0 - eta) * p_pi + eta / n


def stationary_distribution(p: np.ndarray) -> np.ndarray:
    """Invariant distribution mu of an irreducible chain: mu^T P = mu^T."""
    p = np.asarray(p, dtype=float)
    n = p.shape[0]
    if n == 1:
        return np.ones(1)
    A = p.T - np.eye(n)
    A[-1, :] = 1.0  # replace one redundant equation with the normalization
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        mu = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"stationary distribution: singular system ({exc})") from exc
    resid = np.abs(mu @ p - mu).max()
    if resid > 1e-10 or mu.min() <= 0:
        raise NumericalError(f"stationary distribution residual {resid:.3e} or nonpositive mass")
    return mu / mu.sum()


def directed_laplacian(p: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Symmetrized normalized Laplacian of a directed chain.

    L = I - (Phi^1/2 P Phi^-1/2 + Phi^-1/2 P^T Phi^1/2) / 2 with Phi = diag(mu).
    """
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0):
        raise InvalidInputError("invariant distribution must be strictly positive; teleport first")
    root = np.sqrt(mu)
    M = (root[:, None] * p / root[None, :] + (p.T * root[None, :]) / root[:, None]) / 2.0
    L = np.eye(p.shape[0]) - M
    return (L + L.T) / 2.0


def _canonical_sign(vec: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    nz = np.flatnonzero(np.abs(vec) > tol)
    if nz.size and vec[nz[0]] < 0:
        return -vec
    return vec


def diffusion_map(L: np.ndarray, p_dims: int) -> DiffusionEmbedding:
    """Embedding s_i -> (Psi^(k)_i (1 - lambda_k))_{k=1..p_dims}."""
    n = L.shape[0]
    if p_dims >= n:
        raise InvalidInputError("p_dims must be smaller than the number of states")
    try:
        lam, psi = scipy.linalg.eigh(L)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"Laplacian eigensolve failed: {exc}") from exc
    psi = np.column_stack([_canonical_sign(psi[:, k]) for k in range(n)])
    coords = psi[:, 1 : p_dims + 1] * (1.0 - lam[1 : p_dims + 1])[None, :]
    return DiffusionEmbedding(lam, psi, coords)


def diffusion_distance(e: DiffusionEmbedding, i: int, j: int) -> float:
    """Euclidean distance between the scaled embeddings of two states."""
    return float(np.linalg.norm(e.coords[i] - e.coords[j]))


def sign_align(psi: np.ndarray, psi_tilde: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Per-column sign agreement between two eigenvector sets.

    tau_k = +1 iff the two k-th columns agree in sign at the first index where
    both exceed `tol` in magnitude; falls back to +1 when no such index exists.
    """
    psi = np.atleast_2d(np.asarray(psi, dtype=float))
    psi_tilde = np.atleast_2d(np.asarray(psi_tilde, dtype=float))
    if psi.shape[1] != psi_tilde.shape[1]:
        raise InvalidInputError("eigenvector sets must have equal column counts")
    tau = np.ones(psi.shape[1])
    for k in range(psi.shape[1]):
        both = np.flatnonzero(
            (np.abs(psi[: min(len(psi), len(psi_tilde)), k]) > tol)
            & (np.abs(psi_tilde[: min(len(psi), len(psi_tilde)), k]) > tol)
        )
        if both.size:
            i = both[0]
            tau[k] = 1.0 if np.sign(psi[i, k]) == np.sign(psi_tilde[i, k]) else -1.0
        else:
            nz1 = np.flatnonzero(np.abs(psi[:, k]) > tol)
            nz2 = np.flatnonzero(np.abs(psi_tilde[:, k]) > tol)
            if nz1.size and nz2.size:
                tau[k] = (
                    1.0
                    if np.sign(psi[nz1[0], k]) == np.sign(psi_tilde[nz2[0], k])
                    else -1.0
                )
    return tau


def _orientation(vec: np.ndarray, tol: float = 1e-9) -> float:
    """Permutation-invariant sign of an eigenvector via its odd moment."""
    m = float(np.sum(vec**3))
    scale = float(np.sum(np.abs(vec) ** 3))
    if scale > 0 and abs(m) > 1e-6 * scale:
        return 1.0 if m > 0 else -1.0
    nz = np.flatnonzero(np.abs(vec) > tol)
    return 1.0 if nz.size == 0 or vec[nz[0]] > 0 else -1.0


def moment_align(psi: np.ndarray, psi_tilde: np.ndarray) -> np.ndarray:
    """Sign alignment keyed on each column's odd-moment orientation.

    Unlike the first-entry rule, this is invariant to how the two graphs'
    states happen to be enumerated, so it survives permuted inputs; columns
    too symmetric to orient fall back to the first-entry comparison.
    """
    psi = np.atleast_2d(np.asarray(psi, dtype=float))
    psi_tilde = np.atleast_2d(np.asarray(psi_tilde, dtype=float))
    tau = np.ones(min(psi.shape[1], psi_tilde.shape[1]))
    for k in range(tau.size):
        tau[k] = _orientation(psi[:, k]) * _orientation(psi_tilde[:, k])
    return tau


def _common_dims(e1: DiffusionEmbedding, e2: DiffusionEmbedding, p=None) -> int:
    p_max = min(e1.p_dims, e2.p_dims)
    return p_max if p is None else min(p, p_max)


def cross_distance(e1: DiffusionEmbedding, e2: DiffusionEmbedding, tau=None, p=None) -> np.ndarray:
    """Squared diffusion distances across two embedded statespaces.

    Returns the matrix rho(u, v) = sum_k (1-lam_k)(1-lam~_k)
    |tau_k Psi^(k)_u - Psi~^(k)_v|^2 with u indexing e1's states and v e2's.
    The symmetric extension to (S1 u S2)^2 uses this matrix for (S1, S2)
    pairs and its transpose for (S2, S1) pairs.
    """
    p = _common_dims(e1, e2, p)
    w1 = 1.0 - e1.eigenvalues[1 : p + 1]
    w2 = 1.0 - e2.eigenvalues[1 : p + 1]
    psi1 = e1.eigenvectors[:, 1 : p + 1]
    psi2 = e2.eigenvectors[:, 1 : p + 1]
    if tau is None:
        tau = moment_align(psi1, psi2)
    else:
        tau = np.asarray(tau, dtype=float)[:p]
    out = np.zeros((psi1.shape[0], psi2.shape[0]))
    for k in range(p):
        diff = tau[k] * psi1[:, k][:, None] - psi2[:, k][None, :]
        out += w1[k] * w2[k] * diff**2
    return out


# ---------------------------------------------------------------------------
# Sweep cuts


def _conductance(p_pi: np.ndarray, mask: np.ndarray) -> float:
    vol_z = p_pi[mask].sum()
    vol_zc = p_pi[~mask].sum()
    cross = p_pi[np.ix_(mask, ~mask)].sum()
    return float(cross / min(vol_z, vol_zc))


def sweep_cut(eigenvectors: np.ndarray, p_pi: np.ndarray):
    """Minimum-conductance threshold cut over the given eigenvectors.

    Sweeps every distinct entry value of each eigenvector; returns the boolean
    membership mask of the best cut and its conductance.
    """
    eigenvectors = np.atleast_2d(np.asarray(eigenvectors, dtype=float))
    if eigenvectors.ndim != 2 or eigenvectors.shape[0] != p_pi.shape[0]:
        eigenvectors = eigenvectors.T
    best_phi, best_mask = np.inf, None
    for k in range(eigenvectors.shape[1]):
        vec = eigenvectors[:, k]
        for theta in np.unique(vec)[:-1]:  # topmost threshold is degenerate
            mask = vec <= theta
            phi = _conductance(p_pi, mask)
            if phi < best_phi - 1e-15:
                best_phi, best_mask = phi, mask
    if best_mask is None:
        raise NoCutError("all sweep cuts are degenerate")
    return best_mask, best_phi


def bottlenecks_from_cut(p_pi: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Severed-edge endpoints on the side yielding the smaller bottleneck set.

    Ties break toward side Z (the mask's True side).
    """
    z = np.asarray(z, dtype=bool)
    crossing = (p_pi > 0) & (z[:, None] ^ z[None, :])
    touched = crossing.any(axis=1) | crossing.any(axis=0)
    side_z = np.flatnonzero(touched & z)
    side_zc = np.flatnonzero(touched & ~z)
    return side_z if side_z.size <= side_zc.size else side_zc


def reachability_check(mdp_cluster: Mdp, pi: np.ndarray, boundary) -> tuple:
    """Interior states from which the boundary is unreachable under P_c^pi.

    Returns (ok, unreachable). Walks the support graph backward from the
    boundary; callers promote the flagged states to bottlenecks.
    """
    boundary = np.asarray(list(boundary), dtype=int)
    p_pi, _ = policy_average(mdp_cluster, pi)
    support = p_pi > 0
    can_reach = np.zeros(mdp_cluster.n_states, dtype=bool)
    can_reach[boundary] = True
    frontier = list(boundary)
    preds = [np.flatnonzero(support[:, j]) for j in range(mdp_cluster.n_states)]
    while frontier:
        j = frontier.pop()
        for i in preds[j]:
            if not can_reach[i]:
                can_reach[i] = True
                frontier.append(i)
    unreachable = np.flatnonzero(~can_reach)
    return unreachable.size == 0, unreachable


# ---------------------------------------------------------------------------
# Recursive partitioning


def _weak_components(support: np.ndarray, nodes: np.ndarray):
    sym = support | support.T
    comps, seen = [], set()
    node_set = set(nodes.tolist())
    for start in nodes:
        if start in seen:
            continue
        comp, stack = [], [start]
        seen.add(start)
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in np.flatnonzero(sym[i]):
                if j in node_set and j not in seen:
                    seen.add(j)
                    stack.append(int(j))
        comps.append(np.array(sorted(comp), dtype=np.int64))
    return comps


def _fold_submatrix(p: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Restriction of a stochastic matrix to `states` per the folding rule."""
    sub = p[np.ix_(states, states)].copy()
    leak = 1.0 - sub.sum(axis=1)
    sub[np.diag_indices(states.size)] += np.maximum(leak, 0.0)
    return sub


@dataclass
class _Cut:
    depth: int
    bottlenecks: np.ndarray


def _recursive_cuts(p_pi, states, depth, cfg, cuts):
    if states.size < cfg["min_cluster_size"] or depth >= cfg["max_depth"]:
        return
    sub = _fold_submatrix(p_pi, states)
    tel = teleport(sub, cfg["eta"])
    mu = stationary_distribution(tel)
    L = directed_laplacian(tel, mu)
    k = min(cfg["K"], states.size - 1)
    emb = diffusion_map(L, k)
    try:
        mask, phi = sweep_cut(emb.eigenvectors[:, 1 : k + 1], sub)
    except NoCutError:
        return
    if phi > cfg["max_conductance"]:
        return
    local_bns = bottlenecks_from_cut(sub, mask)
    cuts.append(_Cut(depth, states[local_bns]))
    _recursive_cuts(p_pi, states[mask], depth + 1, cfg, cuts)
    _recursive_cuts(p_pi, states[~mask], depth + 1, cfg, cuts)


def _partition_from_bottlenecks(mdp: Mdp, p_pi: np.ndarray, bottlenecks: np.ndarray) -> Partition:
    """Clusters = weak components of S \\ B, each with its attached bottlenecks."""
    support = p_pi > 0
    is_b = np.isin(np.arange(mdp.n_states), bottlenecks)
    rest = np.flatnonzero(~is_b).astype(np.int64)
    interiors = _weak_components(support & ~is_b[None, :] & ~is_b[:, None], rest)
    clusters = []
    for interior in interiors:
        attached = np.flatnonzero(
            support[np.ix_(interior, bottlenecks)].any(axis=0)
            | support[np.ix_(bottlenecks, interior)].any(axis=1)
        )
        boundary = bottlenecks[attached]
        clusters.append(Cluster(interior=interior, boundary=np.sort(boundary)))
    if bottlenecks.size == 0:
        # Degenerate case (no cut, no terminals): a single open cluster.
        clusters.sort(key=lambda c: int(c.interior.min()))
        return Partition(bottlenecks=bottlenecks, clusters=clusters)
    # Promote interior states that cannot reach their cluster boundary.
    final_bottlenecks = set(bottlenecks.tolist())
    changed = False
    for c in clusters:
        if c.boundary.size == 0:
            # A component isolated from every bottleneck: promote it entirely.
            final_bottlenecks.update(c.interior.tolist())
            changed = True
            continue
        sub_states = c.states()
        sub_p = _fold_submatrix(p_pi, sub_states)
        reach = np.zeros(sub_states.size, dtype=bool)
        reach[: c.boundary.size] = True
        supp = sub_p > 0
        frontier = list(range(c.boundary.size))
        while frontier:
            j = frontier.pop()
            for i in np.flatnonzero(supp[:, j]):
                if not reach[i]:
                    reach[i] = True
                    frontier.append(int(i))
        dead = sub_states[~reach]
        if dead.size:
            final_bottlenecks.update(dead.tolist())
            changed = True
    if changed:
        return _partition_from_bottlenecks(
            mdp, p_pi, np.array(sorted(final_bottlenecks), dtype=np.int64)
        )
    clusters.sort(key=lambda c: int(c.interior.min()) if c.interior.size else mdp.n_states)
    return Partition(bottlenecks=np.sort(bottlenecks), clusters=clusters)


def spectral_partition(mdp: Mdp, pi: np.ndarray, config: dict | None = None) -> list:
    """Recursive spectral cut partitioning; one Partition per scale.

    Scale 0 (finest) uses all cuts; scale j drops the j deepest recursion
    levels. Terminal states are appended to every scale's bottleneck set. If
    no admissible cut exists at the root, a single-cluster partition whose
    bottlenecks are exactly the terminal states is returned.
    """
    cfg = {
        "eta": DEFAULT_ETA,
        "K": DEFAULT_K,
        "max_depth": DEFAULT_MAX_DEPTH,
        "min_cluster_size": DEFAULT_MIN_CLUSTER_SIZE,
        "max_conductance": DEFAULT_MAX_CONDUCTANCE,
    }
    if config:
        cfg.update(config)
    p_pi, _ = policy_average(mdp, pi)
    live = np.flatnonzero(~mdp.terminal)
    terminals = np.flatnonzero(mdp.terminal)
    cuts: list = []
    if live.size >= 2:
        _recursive_cuts(p_pi, live, 0, cfg, cuts)
    if not cuts:
        return [_partition_from_bottlenecks(mdp, p_pi, terminals)]
    dmax = max(c.depth for c in cuts)
    partitions = []
    for j in range(dmax + 1):
        keep = [c for c in cuts if c.depth <= dmax - j]
        bns = set(terminals.tolist())
        for c in keep:
            bns.update(c.bottlenecks.tolist())
        partitions.append(
            _partition_from_bottlenecks(mdp, p_pi, np.array(sorted(bns), dtype=np.int64))
        )
    return partitions
