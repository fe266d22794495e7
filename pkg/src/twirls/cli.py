"""Command-line entry point.

Verbs::

    train <config>
    sweep <config> --axis NAME[,NAME] --values v1,v2,...[;w1,w2,...]
    oversmooth <config> --max-steps N
    robust <config> --rates r1,r2,...
    gen chains|sbm [generator flags] --out DIR
    perturb <dir> --rate R --seed S --out DIR

Exit codes: 0 success, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _globals(suppress: bool) -> argparse.ArgumentParser:
    # Global flags are accepted before or after the verb. The copy attached to
    # subcommands suppresses defaults so it does not clobber earlier values.
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's seed list",
                        **(kw or {"default": None}))
    common.add_argument("--out", help="output directory (overrides the config)", **(kw or {"default": None}))
    common.add_argument("--threads", type=int, help="BLAS thread count", **(kw or {"default": None}))
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def _parser() -> argparse.ArgumentParser:
    common = _globals(suppress=True)
    p = argparse.ArgumentParser(prog="twirls", parents=[_globals(suppress=False)],
                                description="Unfolded graph propagation with IRLS attention.")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", parents=[common], help="train and evaluate over the config seeds")
    t.add_argument("config")

    s = sub.add_parser("sweep", parents=[common], help="sweep one axis, or a grid of axes")
    s.add_argument("config")
    s.add_argument("--axis", required=True, help="prop_steps, alpha, T or mlp_layers; comma-join for a grid")
    s.add_argument("--values", required=True, help="comma-separated values; ';' separates grid axes")

    o = sub.add_parser("oversmooth", parents=[common], help="unfolded vs SGC accuracy over step counts")
    o.add_argument("config")
    o.add_argument("--max-steps", type=int, required=True)

    r = sub.add_parser("robust", parents=[common], help="attention vs base under random edge flips")
    r.add_argument("config")
    r.add_argument("--rates", required=True)

    g = sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    g.add_argument("kind", choices=["chains", "sbm"])
    g.add_argument("--num-chains", type=int, default=20)
    g.add_argument("--length", type=int, default=10)
    g.add_argument("--feat-dim", type=int, default=None)
    g.add_argument("--n", type=int, default=400)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--homophily", type=float, default=0.8)
    g.add_argument("--avg-degree", type=float, default=8.0)
    g.add_argument("--feat-noise", type=float, default=1.0)

    q = sub.add_parser("perturb", parents=[common], help="randomly flip edges of a dataset")
    q.add_argument("dir")
    q.add_argument("--rate", type=float, required=True)
    q.add_argument("--mode", choices=["add", "remove", "mixed"], default="mixed")
    return p


def _set_threads(n: int | None) -> None:
    # Must run before numpy is first imported to take effect.
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _config(args):
    from .harness import load_config

    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.out is not None:
        changes["outputs"] = args.out
    return cfg.replace(**changes) if changes else cfg


def _run(args) -> int:
    from . import harness
    from .data import DatasetError, gen_chains, gen_sbm, load_dataset, perturb_edges, save_dataset

    if args.verb == "train":
        cfg = _config(args)
        report = harness.run_experiment(cfg)
        s = report["summary"]
        print(f"accuracy {100 * s['accuracy_mean']:.2f} +- {100 * s['accuracy_std']:.2f} "
              f"macro-F1 {100 * s['macro_f1_mean']:.2f} +- {100 * s['macro_f1_std']:.2f} "
              f"over {s['num_seeds']} seeds")
        if not cfg.outputs:
            sys.stdout.write(report["csv"])
    elif args.verb == "sweep":
        cfg = _config(args)
        axes = [a.strip() for a in args.axis.split(",")]
        groups = args.values.split(";")
        if len(axes) != len(groups):
            raise harness.ConfigError("give one ';'-separated value list per axis")
        values = [harness.parse_values(v) for v in groups]
        text = harness.sweep(cfg, axes[0] if len(axes) == 1 else axes,
                             values[0] if len(axes) == 1 else values)
        if not cfg.outputs:
            sys.stdout.write(text)
    elif args.verb == "oversmooth":
        cfg = _config(args)
        rows = harness.compare_oversmoothing(cfg, args.max_steps)
        for S, acc in harness.mean_by(rows, "steps", "unfolded_accuracy").items():
            sgc = harness.mean_by(rows, "steps", "sgc_accuracy")[S]
            print(f"S={S:<5d} unfolded {100 * acc:6.2f}  sgc {100 * sgc:6.2f}")
    elif args.verb == "robust":
        cfg = _config(args)
        rows = harness.robustness_study(cfg, harness.parse_values(args.rates))
        for (rate, model), acc in _group(rows).items():
            print(f"rate={rate:<5g} {model:<9s} {100 * acc:6.2f}")
    elif args.verb == "gen":
        if args.out is None:
            raise harness.ConfigError("gen needs --out")
        seed = 0 if args.seed is None else args.seed
        try:
            if args.kind == "chains":
                ds = gen_chains(args.num_chains, args.length, args.feat_dim or 100, seed)
            else:
                ds = gen_sbm(args.n, args.classes, args.homophily, args.avg_degree, args.feat_noise, seed,
                             feat_dim=args.feat_dim)
        except DatasetError as e:
            raise harness.ConfigError(str(e)) from None
        save_dataset(ds, args.out)
        print(f"wrote {ds.graph.num_nodes} nodes, {ds.graph.num_edges} edges to {args.out}")
    elif args.verb == "perturb":
        if args.out is None:
            raise harness.ConfigError("perturb needs --out")
        if not 0 <= args.rate <= 1:
            raise harness.ConfigError("--rate must lie in [0, 1]")
        ds = load_dataset(args.dir)
        g = perturb_edges(ds.graph, args.rate, args.mode, 0 if args.seed is None else args.seed)
        save_dataset(ds.with_graph(g), args.out)
        print(f"wrote {g.num_edges} edges (was {ds.graph.num_edges}) to {args.out}")
    return EXIT_OK


def _group(rows):
    out: dict = {}
    for r in rows:
        out.setdefault((r["rate"], r["model"]), []).append(r["test_accuracy"])
    return {k: sum(v) / len(v) for k, v in out.items()}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .harness import ConfigError

    try:
        return _run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
