"""Serialization of MDPs, partitions, hierarchies, policies, plans, traces.

Structured artifacts are JSON documents with a `kind` and `schema_version`;
solver traces are CSV. Loading re-validates the artifact's invariants and
raises ParseError with the offending field named.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
from pathlib import Path

import numpy as np

from msmdp.errors import ParseError
from msmdp.compress import CoarseMdp
from msmdp.mdp import Mdp
from msmdp.partition import Cluster, Partition
from msmdp.solver import SolveTrace

SCHEMA_VERSION = 1
TRACE_COLUMNS = ("iter", "l2_error", "linf_error", "policy_changes", "elapsed_ms")


def _require(doc: dict, key: str, kind: str):
    if key not in doc:
        raise ParseError(f"{kind}: missing field {key!r}")
    return doc[key]


def _check_kind(doc: dict, kind: str):
    got = _require(doc, "kind", kind)
    if got != kind:
        raise ParseError(f"expected kind {kind!r}, found {got!r}")
    version = _require(doc, "schema_version", kind)
    if version != SCHEMA_VERSION:
        raise ParseError(f"{kind}: unsupported schema_version {version!r}")


def mdp_to_doc(mdp: Mdp) -> dict:
    return {
        "kind": "mdp",
        "schema_version": SCHEMA_VERSION,
        "n_states": int(mdp.n_states),
        "n_actions": int(mdp.n_actions),
        "terminal": [int(s) for s in np.flatnonzero(mdp.terminal)],
        "feasible": [[int(a) for a in np.flatnonzero(row)] for row in mdp.feasible],
        "transitions": [
            [int(s), int(a), int(t), float(p), float(r), float(g)]
            for s, a, t, p, r, g in zip(mdp.s, mdp.a, mdp.t, mdp.p, mdp.r, mdp.g)
        ],
    }


def mdp_from_doc(doc: dict) -> Mdp:
    _check_kind(doc, "mdp")
    n = _require(doc, "n_states", "mdp")
    m = _require(doc, "n_actions", "mdp")
    rows = _require(doc, "transitions", "mdp")
    feas_doc = _require(doc, "feasible", "mdp")
    if len(feas_doc) != n:
        raise ParseError("mdp: feasible list length differs from n_states")
    cols = list(zip(*rows)) if rows else [[]] * 6
    if rows and len(rows[0]) != 6:
        raise ParseError("mdp: transitions rows must be [s, a, s', p, r, g]")
    feasible = np.zeros((n, m), dtype=bool)
    for s, acts in enumerate(feas_doc):
        for a in acts:
            if not 0 <= a < m:
                raise ParseError(f"mdp: feasible action {a} out of range at state {s}")
            feasible[s, a] = True
    terminal = np.zeros(n, dtype=bool)
    for s in _require(doc, "terminal", "mdp"):
        if not 0 <= s < n:
            raise ParseError(f"mdp: terminal state {s} out of range")
        terminal[s] = True
    try:
        return Mdp(
            n,
            m,
            np.asarray(cols[0], dtype=np.int64),
            np.asarray(cols[1], dtype=np.int64),
            np.asarray(cols[2], dtype=np.int64),
            np.asarray(cols[3], dtype=float),
            np.asarray(cols[4], dtype=float),
            np.asarray(cols[5], dtype=float),
            feasible,
            terminal,
        )
    except Exception as exc:  # invariant violations surface as parse errors
        raise ParseError(f"mdp: {exc}") from exc


def partition_to_doc(partitions) -> dict:
    if isinstance(partitions, Partition):
        partitions = [partitions]
    return {
        "kind": "partition",
        "schema_version": SCHEMA_VERSION,
        "scales": [
            {
                "bottlenecks": [int(b) for b in p.bottlenecks],
                "clusters": [
                    {
                        "interior": [int(s) for s in c.interior],
                        "boundary": [int(s) for s in c.boundary],
                    }
                    for c in p.clusters
                ],
            }
            for p in partitions
        ],
    }


def partition_from_doc(doc: dict) -> list:
    _check_kind(doc, "partition")
    out = []
    for scale in _require(doc, "scales", "partition"):
        clusters = [
            Cluster(
                interior=np.asarray(_require(c, "interior", "partition"), dtype=np.int64),
                boundary=np.asarray(_require(c, "boundary", "partition"), dtype=np.int64),
            )
            for c in _require(scale, "clusters", "partition")
        ]
        out.append(
            Partition(
                bottlenecks=np.asarray(_require(scale, "bottlenecks", "partition"), dtype=np.int64),
                clusters=clusters,
            )
        )
    return out


def policy_to_doc(pi: np.ndarray) -> dict:
    return {
        "kind": "policy",
        "schema_version": SCHEMA_VERSION,
        "pi": [[float(x) for x in row] for row in np.asarray(pi, dtype=float)],
    }


def policy_from_doc(doc: dict) -> np.ndarray:
    _check_kind(doc, "policy")
    return np.asarray(_require(doc, "pi", "policy"), dtype=float)


def values_to_doc(v: np.ndarray) -> dict:
    return {
        "kind": "values",
        "schema_version": SCHEMA_VERSION,
        "v": [float(x) for x in np.asarray(v, dtype=float)],
    }


def values_from_doc(doc: dict) -> np.ndarray:
    _check_kind(doc, "values")
    return np.asarray(_require(doc, "v", "values"), dtype=float)


def coarse_to_doc(coarse: CoarseMdp) -> dict:
    """Coarse MDP as an ordinary MDP plus action bindings and path lengths."""
    sup = coarse.path_lengths != 0.0
    return {
        "kind": "coarse_mdp",
        "schema_version": SCHEMA_VERSION,
        "mdp": mdp_to_doc(coarse.mdp),
        "bottlenecks": [int(b) for b in coarse.bottlenecks],
        "actions": [
            {"cluster": int(a.cluster_id), "policy": int(a.policy_id)} for a in coarse.actions
        ],
        "path_lengths": [
            [int(s), int(a), int(t), float(coarse.path_lengths[s, a, t])]
            for s, a, t in zip(*np.nonzero(sup))
        ],
    }


def coarse_from_doc(doc: dict) -> CoarseMdp:
    _check_kind(doc, "coarse_mdp")
    from msmdp.compress import CoarseAction

    mdp = mdp_from_doc(_require(doc, "mdp", "coarse_mdp"))
    bns = np.asarray(_require(doc, "bottlenecks", "coarse_mdp"), dtype=np.int64)
    actions = [
        CoarseAction(int(a["cluster"]), int(a["policy"]))
        for a in _require(doc, "actions", "coarse_mdp")
    ]
    lengths = np.zeros((mdp.n_states, mdp.n_actions, mdp.n_states))
    for s, a, t, val in _require(doc, "path_lengths", "coarse_mdp"):
        lengths[int(s), int(a), int(t)] = float(val)
    return CoarseMdp(mdp, actions, bns, lengths)


def plan_to_doc(plan) -> dict:
    return {
        "kind": "transfer_plan",
        "schema_version": SCHEMA_VERSION,
        "pairs": [
            {
                "scale": int(p.scale),
                "source_cluster": int(p.source_cluster),
                "dest_cluster": int(p.dest_cluster),
                "distance": float(p.distance),
                "mode": p.mode,
                "score": float(p.score),
                "eta": {str(k): int(v) for k, v in p.eta.items()},
                "policy_rows": {str(k): int(v) for k, v in p.policy_rows.items()},
                "boundary_values": {str(k): float(v) for k, v in p.boundary_values.items()},
            }
            for p in plan.pairs
        ],
        "initial_policy": None
        if plan.initial_policy is None
        else [[float(x) for x in row] for row in plan.initial_policy],
        "coarse_value_overrides": {
            str(k): [float(x) for x in v] for k, v in plan.coarse_value_overrides.items()
        },
    }


def plan_from_doc(doc: dict):
    _check_kind(doc, "transfer_plan")
    from msmdp.transfer import PairDecision, TransferPlan

    pairs = [
        PairDecision(
            scale=int(p["scale"]),
            source_cluster=int(p["source_cluster"]),
            dest_cluster=int(p["dest_cluster"]),
            distance=float(p["distance"]),
            mode=p["mode"],
            score=float(p["score"]),
            eta={int(k): int(v) for k, v in p.get("eta", {}).items()},
            policy_rows={int(k): int(v) for k, v in p.get("policy_rows", {}).items()},
            boundary_values={int(k): float(v) for k, v in p.get("boundary_values", {}).items()},
        )
        for p in _require(doc, "pairs", "transfer_plan")
    ]
    init = doc.get("initial_policy")
    return TransferPlan(
        pairs=pairs,
        initial_policy=None if init is None else np.asarray(init, dtype=float),
        coarse_value_overrides={
            int(k): np.asarray(v, dtype=float)
            for k, v in doc.get("coarse_value_overrides", {}).items()
        },
    )


# ---------------------------------------------------------------------------
# Files


def save_json(doc: dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc


def trace_to_csv(trace: SolveTrace) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for it, l2, linf, changes, ms in trace.rows():
        writer.writerow(
            [
                it,
                "" if l2 is None else f"{l2:.12g}",
                "" if linf is None else f"{linf:.12g}",
                changes,
                f"{ms:.3f}",
            ]
        )
    return buf.getvalue()


def save_trace(trace: SolveTrace, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(trace_to_csv(trace))


def load_trace(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != TRACE_COLUMNS:
            raise ParseError(f"{path}: trace header must be {','.join(TRACE_COLUMNS)}")
        for row in reader:
            rows.append(
                {
                    "iter": int(row["iter"]),
                    "l2_error": float(row["l2_error"]) if row["l2_error"] else None,
                    "linf_error": float(row["linf_error"]) if row["linf_error"] else None,
                    "policy_changes": int(row["policy_changes"]),
                    "elapsed_ms": float(row["elapsed_ms"]),
                }
            )
    return rows


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def manifest(kind: str, seed, config: dict, files: list) -> dict:
    return {
        "kind": "manifest",
        "schema_version": SCHEMA_VERSION,
        "artifact": kind,
        "seed": seed,
        "config_hash": config_hash(config),
        "files": sorted(files),
    }
