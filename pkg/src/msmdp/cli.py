"""Command-line front end: generate, partition, compress, solve, transfer.

Every stage reads and writes explicit files; no environment variables are
consulted. Failures exit nonzero with a `[stage:<name>]` tag on stderr and
leave any partial outputs in place.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from pathlib import Path

import numpy as np

from msmdp import io as mio
from msmdp import report
from msmdp.compress import alg3_pools, compress_mdp, diffusion_pools, monte_carlo_compress
from msmdp.domains import (
    GridSpec,
    PlayroomSpec,
    build_gridworld,
    build_playroom,
    mirrored_gridworld_pair,
    parse_grid_map,
    random_gridworld,
)
from msmdp.errors import MsmdpError
from msmdp.mdp import policy_iteration, uniform_policy, value_iteration
from msmdp.partition import spectral_partition
from msmdp.solver import SolveConfig, build_hierarchy, solve_hierarchy
from msmdp.transfer import SolvedHierarchy, execute_transfer


class StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"[stage:{stage}] {cause}")
        self.stage = stage


@contextlib.contextmanager
def _stage(name):
    try:
        yield
    except (MsmdpError, OSError, ValueError, KeyError) as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------------------
# Domain construction from CLI/config descriptions


def _grid_spec_from(desc: dict) -> GridSpec:
    if "map" in desc and desc["map"]:
        text = Path(desc["map"]).read_text() if Path(str(desc["map"])).exists() else desc["map"]
        kwargs = {
            k: desc[k] for k in ("slip", "step_reward", "goal_reward", "gamma") if k in desc
        }
        return parse_grid_map(text, **kwargs)
    if desc.get("random_walls") is not None:
        return random_gridworld(
            int(desc["width"]),
            float(desc["random_walls"]),
            int(desc.get("seed", 0)),
            slip=float(desc.get("slip", 0.9)),
            step_reward=float(desc.get("step_reward", -1.0)),
            goal_reward=float(desc.get("goal_reward", 10.0)),
            gamma=float(desc.get("gamma", 0.95)),
        )
    walls = frozenset(tuple(w) for w in desc.get("walls", []))
    return GridSpec(
        int(desc["width"]),
        int(desc["height"]),
        walls,
        tuple(desc["goal"]),
        slip=float(desc.get("slip", 0.9)),
        step_reward=float(desc.get("step_reward", -1.0)),
        goal_reward=float(desc.get("goal_reward", 10.0)),
        gamma=float(desc.get("gamma", 0.95)),
    )


def _domain_from(desc: dict):
    kind = desc.get("kind", "grid")
    if kind == "grid":
        spec = _grid_spec_from(desc)
        return build_gridworld(spec), spec
    if kind == "playroom":
        spec = PlayroomSpec(
            variant=desc.get("variant", "default"),
            success=float(desc.get("success", 0.75)),
            gamma=float(desc.get("gamma", 0.96)),
        )
        return build_playroom(spec), spec
    if kind == "mdp":
        return mio.mdp_from_doc(mio.load_json(desc["path"])), None
    raise MsmdpError(f"unknown domain kind {kind!r}")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args):
    with _stage("gen"):
        if args.domain == "grid":
            desc = {
                "kind": "grid",
                "width": args.width,
                "height": args.height or args.width,
                "goal": [int(x) for x in args.goal.split(",")] if args.goal else None,
                "slip": args.slip,
                "step_reward": args.step_reward,
                "goal_reward": args.goal_reward,
                "gamma": args.gamma,
            }
            if args.map:
                desc["map"] = args.map
                desc.pop("goal")
            elif args.random_walls is not None:
                desc["random_walls"] = args.random_walls
                desc["seed"] = args.seed
            mdp, _ = _domain_from(desc)
        else:
            mdp, _ = _domain_from({"kind": "playroom", "variant": args.variant, "gamma": args.gamma})
        mio.save_json(mio.mdp_to_doc(mdp), args.out)
        print(f"wrote {args.out} ({mdp.n_states} states, {mdp.n_actions} actions)")
    return 0


def cmd_partition(args):
    with _stage("partition"):
        mdp = mio.mdp_from_doc(mio.load_json(args.mdp))
        config = {
            "eta": args.eta,
            "K": args.k,
            "max_depth": args.max_depth,
            "min_cluster_size": args.min_cluster_size,
            "max_conductance": args.max_conductance,
        }
        parts = spectral_partition(mdp, uniform_policy(mdp), config)
        mio.save_json(mio.partition_to_doc(parts), args.out)
        sizes = [len(p.clusters) for p in parts]
        print(f"wrote {args.out} ({len(parts)} scales, clusters per scale {sizes})")
    return 0


def cmd_compress(args):
    with _stage("compress"):
        mdp = mio.mdp_from_doc(mio.load_json(args.mdp))
        parts = mio.partition_from_doc(mio.load_json(args.partition))
        part = parts[min(args.scale, len(parts) - 1)]
        pools = alg3_pools(mdp, part) if args.pool == "alg3" else diffusion_pools(mdp, part)
        coarse = compress_mdp(mdp, part, pools)
        mio.save_json(mio.coarse_to_doc(coarse), args.out)
        print(
            f"wrote {args.out} ({coarse.mdp.n_states} coarse states, "
            f"{coarse.mdp.n_actions} actions)"
        )
    return 0


def _solve_once(mdp, args, variant, plan=None, reference=None):
    hierarchy = build_hierarchy(
        mdp,
        partition_config=None,
        pool_mode=args.pool if args.pool != "alg3" else "pool",
        depth=args.depth,
    )
    config = SolveConfig(
        variant=variant,
        lam=args.lam,
        tol_global=args.tol,
        max_outer_iters=args.max_iters,
    )
    init = {}
    overrides = {}
    if plan is not None:
        if plan.initial_policy is not None:
            init[0] = plan.initial_policy
        overrides = plan.coarse_value_overrides
    pi, v, traces = solve_hierarchy(
        hierarchy,
        config,
        reference=reference,
        initial_policies=init,
        coarse_value_overrides=overrides,
    )
    return hierarchy, pi, v, traces


def cmd_solve(args):
    with _stage("solve"):
        mdp = mio.mdp_from_doc(mio.load_json(args.mdp))
        reference = None
        if args.reference:
            reference = mio.values_from_doc(mio.load_json(args.reference))
        plan = None
        if args.transfer_plan:
            plan = mio.plan_from_doc(mio.load_json(args.transfer_plan))
        out = Path(args.out)
        _, pi, v, traces = _solve_once(mdp, args, args.variant, plan, reference)
        mio.save_json(mio.policy_to_doc(pi), out / f"policy_{args.variant}.json")
        mio.save_json(mio.values_to_doc(v), out / f"values_{args.variant}.json")
        mio.save_trace(traces[0], out / "traces" / f"{args.variant}.csv")
        trace = traces[0]
        msg = "converged" if trace.converged else "not converged"
        print(f"{args.variant}: {msg} in {len(trace.iterations)} outer iterations -> {out}")
    return 0 if traces[0].converged else 3


def cmd_transfer(args):
    with _stage("transfer"):
        src = mio.mdp_from_doc(mio.load_json(args.source))
        dst = mio.mdp_from_doc(mio.load_json(args.dest))
        pool_mode = "pool" if args.pool == "alg3" else args.pool
        h1 = build_hierarchy(src, pool_mode=pool_mode, depth=args.depth)
        h2 = build_hierarchy(dst, pool_mode=pool_mode, depth=args.depth)
        cfg = SolveConfig(variant="cc")
        pi1, v1, _ = solve_hierarchy(h1, cfg)
        policies = {0: pi1}
        values = {0: v1}
        for level in range(1, len(h1.levels)):
            res = policy_iteration(h1.levels[level].mdp)
            policies[level] = res.pi
            values[level] = res.v
        plan = execute_transfer(
            SolvedHierarchy(h1, policies, values),
            h2,
            {"mode": args.mode, "eta_mode": args.eta_mode},
        )
        mio.save_json(mio.plan_to_doc(plan), args.out)
        accepted = [(p.scale, p.source_cluster, p.dest_cluster, p.mode) for p in plan.accepted()]
        print(f"wrote {args.out}; accepted {len(accepted)} of {len(plan.pairs)} pairs: {accepted}")
    return 0


def cmd_oracle(args):
    with _stage("oracle"):
        mdp = mio.mdp_from_doc(mio.load_json(args.mdp))
        if args.method == "pi":
            res = policy_iteration(mdp, max_iters=args.max_iters)
            mio.save_json(mio.values_to_doc(res.v), args.out)
            print(f"policy iteration: {res.iterations} iterations, converged={res.converged}")
            return 0 if res.converged else 3
        if args.method == "vi":
            v = value_iteration(mdp, tol=args.tol)
            mio.save_json(mio.values_to_doc(v), args.out)
            print("value iteration: done")
            return 0
        parts = mio.partition_from_doc(mio.load_json(args.partition))
        part = parts[0]
        est = monte_carlo_compress(mdp, part, uniform_policy(mdp), args.n_traj, args.seed)
        doc = {
            "kind": "mc_compress",
            "schema_version": mio.SCHEMA_VERSION,
            "n_traj": args.n_traj,
            "seed": args.seed,
            "clusters": {
                str(cid): {
                    str(start): {
                        "p": est[cid][start].p.tolist(),
                        "p_se": est[cid][start].p_se.tolist(),
                        "r": est[cid][start].r.tolist(),
                        "r_se": est[cid][start].r_se.tolist(),
                        "g": est[cid][start].g.tolist(),
                        "g_se": est[cid][start].g_se.tolist(),
                        "length": est[cid][start].length.tolist(),
                        "length_se": est[cid][start].length_se.tolist(),
                        "censored": est[cid][start].censored,
                    }
                    for start in est[cid]
                }
                for cid in est
            },
        }
        mio.save_json(doc, args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_trace(args):
    with _stage("trace"):
        rows = mio.load_trace(args.trace)
        out = Path(args.out) if args.out else None
        if out is None:
            for row in rows:
                print(row)
        else:
            import csv as _csv

            out.parent.mkdir(parents=True, exist_ok=True)
            with open(out, "w", newline="") as fh:
                writer = _csv.writer(fh, lineterminator="\n")
                writer.writerow(mio.TRACE_COLUMNS)
                for r in rows:
                    writer.writerow(
                        [
                            r["iter"],
                            "" if r["l2_error"] is None else f"{r['l2_error']:.12g}",
                            "" if r["linf_error"] is None else f"{r['linf_error']:.12g}",
                            r["policy_changes"],
                            f"{r['elapsed_ms']:.3f}",
                        ]
                    )
            print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# Experiment runner


def run_experiment(config: dict, outdir) -> dict:
    """Generate -> partition -> compress -> solve (-> transfer) -> report."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(config.get("seed", 0))
    files = []

    with _stage("generate"):
        mdp, spec = _domain_from(config["domain"])
        mio.save_json(mio.mdp_to_doc(mdp), out / "mdp.json")
        files.append("mdp.json")

    with _stage("partition"):
        parts = spectral_partition(mdp, uniform_policy(mdp), config.get("partition"))
        mio.save_json(mio.partition_to_doc(parts), out / "partition.json")
        files.append("partition.json")

    hier_cfg = config.get("hierarchy", {})
    pool_mode = "pool" if hier_cfg.get("pool", "diffusion") == "alg3" else hier_cfg.get(
        "pool", "diffusion"
    )
    depth = int(hier_cfg.get("depth", 1))
    with _stage("compress"):
        hierarchy = build_hierarchy(
            mdp,
            partition_config=config.get("partition"),
            pool_mode=pool_mode,
            depth=depth,
            max_top_states=int(hier_cfg.get("max_top_states", 10)),
        )
        if hierarchy.levels[0].coarse is not None:
            mio.save_json(mio.coarse_to_doc(hierarchy.levels[0].coarse), out / "coarse.json")
            files.append("coarse.json")

    solve_cfg = config.get("solve", {})
    variants = solve_cfg.get("variants", ["cc"])
    reference = None
    with _stage("reference"):
        if solve_cfg.get("reference", "flat") == "flat":
            reference = policy_iteration(mdp).v
            mio.save_json(mio.values_to_doc(reference), out / "reference.json")
            files.append("reference.json")

    summary = []
    traces_by_variant = {}
    with _stage("solve"):
        for variant in variants:
            cfg = SolveConfig(
                variant=variant,
                lam=float(solve_cfg.get("lambda", 1.0)),
                tol_global=float(solve_cfg.get("tol_global", 1e-9)),
                max_outer_iters=int(solve_cfg.get("max_outer_iters", 500)),
            )
            pi, v, traces = solve_hierarchy(hierarchy, cfg, reference=reference)
            trace = traces[0]
            traces_by_variant[variant] = trace
            mio.save_trace(trace, out / "traces" / f"{variant}.csv")
            mio.save_json(mio.policy_to_doc(pi), out / f"policy_{variant}.json")
            mio.save_json(mio.values_to_doc(v), out / f"values_{variant}.json")
            files += [f"traces/{variant}.csv", f"policy_{variant}.json", f"values_{variant}.json"]
            summary.append(
                {
                    "variant": variant,
                    "converged": trace.converged,
                    "outer_iters": len(trace.iterations),
                    "final_l2": trace.l2_error[-1] if trace.l2_error else None,
                    "final_linf": trace.linf_error[-1] if trace.linf_error else None,
                    "elapsed_ms": trace.elapsed_ms[-1] if trace.elapsed_ms else None,
                }
            )

    plan = None
    if config.get("transfer"):
        with _stage("transfer"):
            tcfg = config["transfer"]
            dest_mdp, _ = _domain_from(tcfg["dest"])
            h2 = build_hierarchy(
                dest_mdp, partition_config=config.get("partition"), pool_mode=pool_mode, depth=depth
            )
            cfg = SolveConfig(variant=variants[0])
            pi1, v1, _ = solve_hierarchy(hierarchy, cfg)
            policies, values = {0: pi1}, {0: v1}
            for level in range(1, len(hierarchy.levels)):
                res = policy_iteration(hierarchy.levels[level].mdp)
                policies[level], values[level] = res.pi, res.v
            plan = execute_transfer(
                SolvedHierarchy(hierarchy, policies, values),
                h2,
                {"mode": tcfg.get("mode", "policy"), "eta_mode": tcfg.get("eta_mode", "matched")},
            )
            mio.save_json(mio.plan_to_doc(plan), out / "plan.json")
            files.append("plan.json")
            dest_ref = policy_iteration(dest_mdp).v
            init = {0: plan.initial_policy} if plan.initial_policy is not None else {}
            for tag, policies_init in (("transfer", init), ("notransfer", {})):
                pi, v, traces = solve_hierarchy(
                    h2,
                    cfg,
                    reference=dest_ref,
                    initial_policies=policies_init,
                    coarse_value_overrides=plan.coarse_value_overrides if tag == "transfer" else {},
                )
                mio.save_trace(traces[0], out / "traces" / f"{tag}_{variants[0]}.csv")
                files.append(f"traces/{tag}_{variants[0]}.csv")

    with _stage("report"):
        import csv as _csv

        with open(out / "summary.csv", "w", newline="") as fh:
            writer = _csv.writer(fh, lineterminator="\n")
            writer.writerow(["variant", "converged", "outer_iters", "final_l2", "final_linf", "elapsed_ms"])
            for row in summary:
                writer.writerow(
                    [
                        row["variant"],
                        int(row["converged"]),
                        row["outer_iters"],
                        "" if row["final_l2"] is None else f"{row['final_l2']:.12g}",
                        "" if row["final_linf"] is None else f"{row['final_linf']:.12g}",
                        "" if row["elapsed_ms"] is None else f"{row['elapsed_ms']:.3f}",
                    ]
                )
        files.append("summary.csv")
        if traces_by_variant:
            report.convergence_figure(traces_by_variant, out / "figures" / "convergence.png")
            report.iteration_time_figure(traces_by_variant, out / "figures" / "wall_time.png")
            files += ["figures/convergence.png", "figures/wall_time.png"]
        if isinstance(spec, GridSpec):
            report.grid_partition_figure(spec, parts[0], out / "figures" / "partition.png")
            files.append("figures/partition.png")
            if variants:
                v0 = mio.values_from_doc(mio.load_json(out / f"values_{variants[0]}.json"))
                report.grid_values_figure(
                    spec, v0, out / "figures" / f"values_{variants[0]}.png"
                )
                files.append(f"figures/values_{variants[0]}.png")
        mio.save_json(mio.manifest("experiment", seed, config, files), out / "manifest.json")
    return {"summary": summary, "files": files, "plan": plan}


def cmd_run(args):
    config = mio.load_json(args.config)
    result = run_experiment(config, args.out)
    for row in result["summary"]:
        print(
            f"{row['variant']}: converged={row['converged']} iters={row['outer_iters']}"
            f" final_l2={row['final_l2']}"
        )
    print(f"report in {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msmdp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a benchmark MDP")
    gsub = g.add_subparsers(dest="domain", required=True)
    gg = gsub.add_parser("grid")
    gg.add_argument("--width", type=int, default=10)
    gg.add_argument("--height", type=int, default=None)
    gg.add_argument("--goal", type=str, default=None, help="x,y")
    gg.add_argument("--map", type=str, default=None, help="path to a #./G character map")
    gg.add_argument("--random-walls", type=float, default=None, dest="random_walls")
    gg.add_argument("--seed", type=int, default=0)
    gg.add_argument("--slip", type=float, default=0.9)
    gg.add_argument("--step-reward", type=float, default=-1.0)
    gg.add_argument("--goal-reward", type=float, default=10.0)
    gg.add_argument("--gamma", type=float, default=0.95)
    gg.add_argument("-o", "--out", required=True)
    gg.set_defaults(func=cmd_gen)
    gp = gsub.add_parser("playroom")
    gp.add_argument("--variant", default="default")
    gp.add_argument("--gamma", type=float, default=0.96)
    gp.add_argument("-o", "--out", required=True)
    gp.set_defaults(func=cmd_gen)

    pa = sub.add_parser("partition", help="recursive spectral partitioning")
    pa.add_argument("mdp")
    pa.add_argument("--eta", type=float, default=0.01)
    pa.add_argument("--k", type=int, default=3)
    pa.add_argument("--max-depth", type=int, default=3)
    pa.add_argument("--min-cluster-size", type=int, default=8)
    pa.add_argument("--max-conductance", type=float, default=0.5)
    pa.add_argument("-o", "--out", required=True)
    pa.set_defaults(func=cmd_partition)

    co = sub.add_parser("compress", help="homogenize onto the bottleneck set")
    co.add_argument("mdp")
    co.add_argument("partition")
    co.add_argument("--pool", choices=["diffusion", "alg3"], default="diffusion")
    co.add_argument("--scale", type=int, default=0)
    co.add_argument("-o", "--out", required=True)
    co.set_defaults(func=cmd_compress)

    so = sub.add_parser("solve", help="multiscale solve of one MDP")
    so.add_argument("mdp")
    so.add_argument("--variant", choices=["oo", "oc", "or", "co", "cc", "cr"], default="cc")
    so.add_argument("--lambda", type=float, default=1.0, dest="lam")
    so.add_argument("--tol", type=float, default=1e-9)
    so.add_argument("--max-iters", type=int, default=500)
    so.add_argument("--depth", type=int, default=1)
    so.add_argument("--pool", choices=["diffusion", "alg3"], default="diffusion")
    so.add_argument("--reference", default=None, help="values JSON for error traces")
    so.add_argument("--transfer-plan", default=None)
    so.add_argument("-o", "--out", required=True)
    so.set_defaults(func=cmd_solve)

    tr = sub.add_parser("transfer", help="plan transfer between two problems")
    tr.add_argument("--source", required=True)
    tr.add_argument("--dest", required=True)
    tr.add_argument("--mode", choices=["policy", "potential", "auto"], default="policy")
    tr.add_argument("--eta-mode", choices=["matched", "identity"], default="matched")
    tr.add_argument("--depth", type=int, default=1)
    tr.add_argument("--pool", choices=["diffusion", "alg3"], default="diffusion")
    tr.add_argument("-o", "--out", required=True)
    tr.set_defaults(func=cmd_transfer)

    orc = sub.add_parser("oracle", help="flat or Monte-Carlo oracles")
    orc.add_argument("method", choices=["pi", "vi", "mc"])
    orc.add_argument("mdp")
    orc.add_argument("--partition", default=None)
    orc.add_argument("--n-traj", type=int, default=10000)
    orc.add_argument("--seed", type=int, default=0)
    orc.add_argument("--tol", type=float, default=1e-10)
    orc.add_argument("--max-iters", type=int, default=500)
    orc.add_argument("-o", "--out", required=True)
    orc.set_defaults(func=cmd_oracle)

    tra = sub.add_parser("trace", help="trace utilities")
    trsub = tra.add_subparsers(dest="trace_cmd", required=True)
    te = trsub.add_parser("export")
    te.add_argument("trace")
    te.add_argument("-o", "--out", default=None)
    te.set_defaults(func=cmd_trace)

    ru = sub.add_parser("run", help="run an experiment config end to end")
    ru.add_argument("config")
    ru.add_argument("-o", "--out", required=True)
    ru.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except MsmdpError as exc:
        print(f"[stage:{args.command}] {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
