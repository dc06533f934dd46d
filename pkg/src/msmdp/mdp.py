"""Finite MDPs with state/action-dependent rewards and discounts.

Transition data is stored in coordinate form: parallel arrays of
(source, action, successor, probability, reward, discount) entries. Policies
are dense row-stochastic arrays of shape (n_states, n_actions); value
functions are plain float vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from msmdp.errors import InvalidInputError, NumericalError

PROB_TOL = 1e-12
RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class Mdp:
    """A finite MDP (S, A, P, R, Gamma) in sparse coordinate form.

    Attributes
    ----------
    n_states, n_actions : int
    s, a, t : int arrays
        Source state, action, and successor state of each transition entry.
    p, r, g : float arrays
        Probability, reward, and discount of each entry. For every feasible
        (s, a), probabilities over successors sum to 1; discounts lie in
        (0, 1); infeasible pairs carry no entries.
    feasible : bool array, shape (n_states, n_actions)
    terminal : bool array, shape (n_states,)
        Terminal states are absorbing under every feasible action and carry
        zero self-reward.
    """

    n_states: int
    n_actions: int
    s: np.ndarray
    a: np.ndarray
    t: np.ndarray
    p: np.ndarray
    r: np.ndarray
    g: np.ndarray
    feasible: np.ndarray
    terminal: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        for name in ("s", "a", "t"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        for name in ("p", "r", "g"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, "feasible", np.asarray(self.feasible, dtype=bool))
        object.__setattr__(self, "terminal", np.asarray(self.terminal, dtype=bool))
        for name in ("s", "a", "t", "p", "r", "g", "feasible", "terminal"):
            getattr(self, name).setflags(write=False)
        if self.validate:
            self._check()

    def _check(self):
        n, m = self.n_states, self.n_actions
        if self.feasible.shape != (n, m):
            raise InvalidInputError(f"feasible has shape {self.feasible.shape}, expected {(n, m)}")
        if self.terminal.shape != (n,):
            raise InvalidInputError("terminal flag array has wrong length")
        if len({arr.shape for arr in (self.s, self.a, self.t, self.p, self.r, self.g)}) != 1:
            raise InvalidInputError("transition entry arrays have mismatched lengths")
        if self.s.size:
            if self.s.min() < 0 or self.s.max() >= n or self.t.min() < 0 or self.t.max() >= n:
                raise InvalidInputError("transition entry references an unknown state")
            if self.a.min() < 0 or self.a.max() >= m:
                raise InvalidInputError("transition entry references an unknown action")
        if np.any(self.p < -PROB_TOL) or np.any(self.p > 1 + PROB_TOL):
            raise InvalidInputError("probabilities must lie in [0, 1]")
        if not np.all(np.isfinite(self.r)):
            raise InvalidInputError("rewards must be finite")
        if np.any(self.g <= 0.0) or np.any(self.g >= 1.0):
            raise InvalidInputError("discounts must lie in the open interval (0, 1)")
        if not self.feasible.any(axis=1).all():
            bad = int(np.flatnonzero(~self.feasible.any(axis=1))[0])
            raise InvalidInputError(f"state {bad} has no feasible action")
        # Row sums over successors equal 1 for feasible pairs, and infeasible
        # pairs carry no entries.
        mass = np.zeros((n, m))
        np.add.at(mass, (self.s, self.a), self.p)
        if np.any(np.abs(mass[self.feasible] - 1.0) > 1e-9):
            worst = np.abs(mass[self.feasible] - 1.0).max()
            raise InvalidInputError(f"probability row sums deviate from 1 by {worst:.3e}")
        if np.any(mass[~self.feasible] != 0.0):
            raise InvalidInputError("infeasible (s, a) pairs must carry no transition entries")
        # Terminal states are absorbing with zero self-reward.
        if self.terminal.any():
            on_term = self.terminal[self.s]
            if np.any(self.t[on_term] != self.s[on_term]):
                raise InvalidInputError("terminal states must only self-transition")
            if np.any(np.abs(self.p[on_term] - 1.0) > PROB_TOL):
                raise InvalidInputError("terminal self-loops must have probability 1")
            if np.any(self.r[on_term] != 0.0):
                raise InvalidInputError("terminal self-loops must carry zero reward")

    @property
    def n_entries(self) -> int:
        return self.s.size

    def feasible_actions(self, state: int) -> np.ndarray:
        return np.flatnonzero(self.feasible[state])

    def with_entries(self, p=None, r=None, g=None, validate=True) -> "Mdp":
        """Copy of this MDP with some per-entry arrays replaced."""
        return replace(
            self,
            p=self.p if p is None else p,
            r=self.r if r is None else r,
            g=self.g if g is None else g,
            validate=validate,
        )

    def gamma_bar(self) -> float:
        """Largest discount attached to a positive-probability transition."""
        live = self.p > 0
        if not live.any():
            raise InvalidInputError("MDP has no positive-probability transitions")
        return float(self.g[live].max())


def make_mdp(n_states, n_actions, entries, terminal=(), validate=True) -> Mdp:
    """Build an Mdp from an iterable of (s, a, s', p, r, g) tuples.

    Entries with p == 0 are dropped. Feasibility is inferred from the entries.
    """
    rows = [e for e in entries if e[3] != 0.0]
    if rows:
        s, a, t, p, r, g = (np.asarray(col) for col in zip(*rows))
    else:
        s = a = t = np.zeros(0, dtype=np.int64)
        p = r = g = np.zeros(0)
    feasible = np.zeros((n_states, n_actions), dtype=bool)
    feasible[s.astype(np.int64), a.astype(np.int64)] = True
    term = np.zeros(n_states, dtype=bool)
    term[list(terminal)] = True
    return Mdp(n_states, n_actions, s, a, t, p, r, g, feasible, term, validate=validate)


# ---------------------------------------------------------------------------
# Policies


def uniform_policy(mdp: Mdp) -> np.ndarray:
    """Diffusion policy: uniform over the feasible actions of each state."""
    pi = mdp.feasible.astype(float)
    return pi / pi.sum(axis=1, keepdims=True)


def check_policy(mdp: Mdp, pi: np.ndarray):
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise InvalidInputError(
            f"policy has shape {pi.shape}, expected {(mdp.n_states, mdp.n_actions)}"
        )
    if np.any(pi < -PROB_TOL):
        raise InvalidInputError("policy entries must be non-negative")
    if np.any(np.abs(pi.sum(axis=1) - 1.0) > 1e-9):
        raise InvalidInputError("policy rows must sum to 1")
    if np.any(pi[~mdp.feasible] > PROB_TOL):
        raise InvalidInputError("policy places mass on infeasible actions")
    return pi


def deterministic_policy(mdp: Mdp, actions: np.ndarray) -> np.ndarray:
    """Point-mass policy from an action index per state."""
    pi = np.zeros((mdp.n_states, mdp.n_actions))
    pi[np.arange(mdp.n_states), np.asarray(actions, dtype=int)] = 1.0
    return pi


def blend_policy(pi_new: np.ndarray, pi_old: np.ndarray, lam: float) -> np.ndarray:
    """Convex blend lam * pi_new + (1 - lam) * pi_old, lam in (0, 1]."""
    pi_new = np.asarray(pi_new, dtype=float)
    pi_old = np.asarray(pi_old, dtype=float)
    if pi_new.shape != pi_old.shape:
        raise InvalidInputError("policies to blend must have the same shape")
    if not 0.0 < lam <= 1.0:
        raise InvalidInputError(f"blend weight must lie in (0, 1], got {lam}")
    return lam * pi_new + (1.0 - lam) * pi_old


def regularize_policy(mdp: Mdp, pi: np.ndarray, lam: float) -> np.ndarray:
    """Blend a small amount of the diffusion policy into pi.

    Guarantees every feasible action has probability at least
    lam / |A(s)|, keeping cluster boundaries reachable under the result.
    """
    if not 0.0 <= lam < 1.0:
        raise InvalidInputError(f"regularization weight must lie in [0, 1), got {lam}")
    if lam == 0.0:
        return np.asarray(pi, dtype=float)
    return lam * uniform_policy(mdp) + (1.0 - lam) * np.asarray(pi, dtype=float)


# ---------------------------------------------------------------------------
# Policy-averaged matrices


def policy_average(mdp: Mdp, pi: np.ndarray):
    """Average out the actions: P^pi(s,s') = sum_a P(s,a,s') pi(s,a).

    Returns the pair (p_pi, r_pi); r_pi is the analogous average of R.
    """
    pi = check_policy(mdp, pi)
    w = pi[mdp.s, mdp.a]
    p_pi = np.zeros((mdp.n_states, mdp.n_states))
    r_pi = np.zeros((mdp.n_states, mdp.n_states))
    np.add.at(p_pi, (mdp.s, mdp.t), w * mdp.p)
    np.add.at(r_pi, (mdp.s, mdp.t), w * mdp.r)
    return p_pi, r_pi


def hadamard_average(mdp: Mdp, x: np.ndarray, y: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """(X o Y)^pi for tensors given by per-entry values on mdp's coordinates.

    x and y are vectors aligned with the MDP's transition entries; the result
    is the matrix with entries sum_a x(s,a,s') y(s,a,s') pi(s,a).
    """
    pi = check_policy(mdp, pi)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (mdp.n_entries,) or y.shape != (mdp.n_entries,):
        raise InvalidInputError("x and y must be aligned with the MDP's transition entries")
    out = np.zeros((mdp.n_states, mdp.n_states))
    np.add.at(out, (mdp.s, mdp.t), x * y * pi[mdp.s, mdp.a])
    return out


def discounted_kernel(mdp: Mdp, pi: np.ndarray) -> np.ndarray:
    """(Gamma o P)^pi, the discounted one-step kernel."""
    return hadamard_average(mdp, mdp.g, mdp.p, pi)


def expected_reward_matrix(mdp: Mdp, pi: np.ndarray) -> np.ndarray:
    """(P o R)^pi; its row sums are the one-step expected rewards."""
    return hadamard_average(mdp, mdp.p, mdp.r, pi)


# ---------------------------------------------------------------------------
# Dynamic-programming primitives


def _solve_with_refinement(A, b, what: str):
    try:
        x = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what}: singular system ({exc})") from exc
    resid = np.abs(A @ x - b).max()
    if resid > RESIDUAL_TOL:
        x = x + np.linalg.solve(A, b - A @ x)
        resid = np.abs(A @ x - b).max()
    if resid > RESIDUAL_TOL:
        cond = np.linalg.cond(A)
        raise NumericalError(
            f"{what}: residual {resid:.3e} exceeds {RESIDUAL_TOL:.1e} (cond={cond:.3e})"
        )
    return x


def value_determination(mdp: Mdp, pi: np.ndarray) -> np.ndarray:
    """Solve V = (I - (Gamma o P)^pi)^(-1) (P o R)^pi 1 exactly."""
    gp = discounted_kernel(mdp, pi)
    rew = expected_reward_matrix(mdp, pi).sum(axis=1)
    A = np.eye(mdp.n_states) - gp
    return _solve_with_refinement(A, rew, "value determination")


def potential_operator(mdp: Mdp, pi: np.ndarray) -> np.ndarray:
    """(I - (Gamma o P)^pi)^(-1): maps one-step expected rewards to values."""
    A = np.eye(mdp.n_states) - discounted_kernel(mdp, pi)
    try:
        return np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"potential operator: singular system ({exc})") from exc


def bellman_backup(mdp: Mdp, pi: np.ndarray, v: np.ndarray, states=None) -> np.ndarray:
    """One application of T_pi restricted to `states`; other entries untouched."""
    v = np.asarray(v, dtype=float)
    if v.shape != (mdp.n_states,):
        raise InvalidInputError("value function has wrong length")
    gp = discounted_kernel(mdp, pi)
    rew = expected_reward_matrix(mdp, pi).sum(axis=1)
    out = v.copy()
    if states is None:
        out[:] = rew + gp @ v
        return out
    states = np.asarray(states, dtype=int)
    if states.size == 0:
        return out
    out[states] = rew[states] + gp[states] @ v
    return out


def q_values(mdp: Mdp, v: np.ndarray) -> np.ndarray:
    """Q(s,a) = sum_s' P(s,a,s') (R(s,a,s') + Gamma(s,a,s') V(s'))."""
    v = np.asarray(v, dtype=float)
    w = mdp.p * (mdp.r + mdp.g * v[mdp.t])
    q = np.zeros((mdp.n_states, mdp.n_actions))
    np.add.at(q, (mdp.s, mdp.a), w)
    return q


def greedy_policy(mdp: Mdp, v: np.ndarray, states=None, base: np.ndarray | None = None):
    """Point-mass greedy policy on `states`; ties go to the lowest action id.

    Rows outside `states` are taken from `base` when given, otherwise from the
    diffusion policy.
    """
    q = q_values(mdp, v)
    q[~mdp.feasible] = -np.inf
    pi = uniform_policy(mdp) if base is None else np.asarray(base, dtype=float).copy()
    if states is None:
        states = np.arange(mdp.n_states)
    else:
        states = np.asarray(states, dtype=int)
    if states.size == 0:
        return pi
    if not mdp.feasible[states].any(axis=1).all():
        raise InvalidInputError("greedy update over a state with no feasible action")
    best = np.argmax(q[states], axis=1)
    pi[states] = 0.0
    pi[states, best] = 1.0
    return pi


@dataclass
class PIResult:
    pi: np.ndarray
    v: np.ndarray
    iterations: int
    converged: bool
    trace: list


def policy_iteration(mdp: Mdp, pi0=None, max_iters: int = 500, tol: float = 1e-12) -> PIResult:
    """Canonical policy iteration; the flat oracle for the multiscale solver.

    Alternates exact value determination with a global greedy improvement
    until the policy is fixed or the value change falls below tol. The trace
    records the sup-norm value change per iteration.
    """
    pi = uniform_policy(mdp) if pi0 is None else check_policy(mdp, pi0)
    v = value_determination(mdp, pi)
    trace = []
    for k in range(max_iters):
        pi_next = greedy_policy(mdp, v, base=pi)
        v_next = value_determination(mdp, pi_next)
        delta = float(np.abs(v_next - v).max())
        trace.append(delta)
        same = np.array_equal(np.argmax(pi_next, axis=1), np.argmax(pi, axis=1)) and np.allclose(
            pi_next, pi
        )
        pi, v = pi_next, v_next
        if same or delta <= tol:
            return PIResult(pi, v, k + 1, True, trace)
    return PIResult(pi, v, max_iters, False, trace)


def value_iteration(mdp: Mdp, max_iters: int = 100000, tol: float = 1e-10) -> np.ndarray:
    """Greedy value iteration to a fixed residual; oracle use only."""
    v = np.zeros(mdp.n_states)
    for _ in range(max_iters):
        q = q_values(mdp, v)
        q[~mdp.feasible] = -np.inf
        v_next = q.max(axis=1)
        if np.abs(v_next - v).max() <= tol:
            return v_next
        v = v_next
    raise NumericalError("value iteration did not reach the requested residual")


# ---------------------------------------------------------------------------
# Restriction to a cluster


def restrict(mdp: Mdp, cluster) -> Mdp:
    """Restriction of the MDP to a state subset, in the subset's local indices.

    Off-diagonal in-cluster entries are copied; each diagonal entry absorbs
    the probability mass of severed out-of-cluster transitions. Rewards and
    discounts are truncated to in-cluster triples, so a diagonal entry created
    purely by folding carries zero reward and the row's largest discount.
    """
    cluster = np.asarray(list(cluster), dtype=int)
    if cluster.size == 0:
        raise InvalidInputError("cluster must be nonempty")
    if cluster.min() < 0 or cluster.max() >= mdp.n_states or len(set(cluster.tolist())) != cluster.size:
        raise InvalidInputError("cluster references unknown or duplicate states")
    local = -np.ones(mdp.n_states, dtype=np.int64)
    local[cluster] = np.arange(cluster.size)
    inside_s = local[mdp.s] >= 0
    inside_t = local[mdp.t] >= 0

    keep = inside_s & inside_t
    s2, a2, t2 = local[mdp.s[keep]], mdp.a[keep], local[mdp.t[keep]]
    p2, r2, g2 = mdp.p[keep].copy(), mdp.r[keep], mdp.g[keep]

    # Fold mass leaving the cluster onto the diagonal.
    out = inside_s & ~inside_t
    fold = np.zeros((cluster.size, mdp.n_actions))
    np.add.at(fold, (local[mdp.s[out]], mdp.a[out]), mdp.p[out])

    has_diag = np.zeros((cluster.size, mdp.n_actions), dtype=bool)
    diag = s2 == t2
    has_diag[s2[diag], a2[diag]] = True
    add = p2.copy()
    add[diag] += fold[s2[diag], a2[diag]]
    p2 = add

    # Rows that fold mass but had no original self-loop need a fresh diagonal
    # entry; give it zero reward and the row's largest discount.
    gmax = np.zeros((cluster.size, mdp.n_actions))
    np.maximum.at(gmax, (s2, a2), g2)
    gmax[gmax == 0.0] = 0.5
    need = (fold > 0) & ~has_diag
    if need.any():
        ns, na = np.nonzero(need)
        s2 = np.concatenate([s2, ns])
        a2 = np.concatenate([a2, na])
        t2 = np.concatenate([t2, ns])
        p2 = np.concatenate([p2, fold[ns, na]])
        r2 = np.concatenate([r2, np.zeros(ns.size)])
        g2 = np.concatenate([g2, gmax[ns, na]])

    return Mdp(
        cluster.size,
        mdp.n_actions,
        s2,
        a2,
        t2,
        p2,
        r2,
        g2,
        mdp.feasible[cluster],
        mdp.terminal[cluster],
        validate=mdp.validate,
    )
