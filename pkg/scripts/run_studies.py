"""Regenerate the study tables under an output directory.

    python3 scripts/run_studies.py --out results [--quick]

Writes one subdirectory per study: chains accuracy, the chains step-count
sweep, the alpha x steps grid, unfolded vs SGC accuracy over step counts,
robustness to random edge flips, and the heterophily comparison of the
attention model against its base. ``--quick`` trims seeds to two so the
whole run takes about a minute.
"""

import argparse
import logging
from pathlib import Path

from twirls.harness import (_prop_replace, compare_oversmoothing, load_config, mean_by, robustness_study,
                            run_experiment, sweep)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--quick", action="store_true", help="two seeds per study")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)

    def cfg(name, sub):
        c = load_config(CONFIGS / name).replace(outputs=str(out / sub))
        return c.replace(seeds=c.seeds[:2]) if args.quick else c

    chains = cfg("chains.json", "chains")
    s = run_experiment(chains)["summary"]
    print(f"chains: accuracy {s['accuracy_mean']:.4f}")
    sweep(chains.replace(outputs=str(out / "chains_steps")), "prop_steps", [2, 4, 8, 12, 16])
    print("chains step sweep written")

    sbm = cfg("sbm_oversmooth.json", "alpha_steps")
    sweep(sbm, ["prop_steps", "alpha"], [[8, 16, 32, 64], [0.1, 0.25, 0.5, 1.0]])
    print("alpha x steps grid written")

    rows = compare_oversmoothing(cfg("sbm_oversmooth.json", "oversmoothing"), max_steps=256)
    sgc = mean_by(rows, "steps", "sgc_accuracy")
    for S, acc in mean_by(rows, "steps", "unfolded_accuracy").items():
        print(f"oversmoothing S={S:<4d} unfolded {acc:.4f} sgc {sgc[S]:.4f}")

    rows = robustness_study(cfg("sbm_robust.json", "robustness"), [0.0, 0.1, 0.2, 0.3])
    for rate in (0.0, 0.1, 0.2, 0.3):
        sel = [r for r in rows if r["rate"] == rate]
        att = mean_by([r for r in sel if r["model"] == "attention"], "rate", "test_accuracy")[rate]
        base = mean_by([r for r in sel if r["model"] == "base"], "rate", "test_accuracy")[rate]
        print(f"robustness rate={rate:.1f} attention {att:.4f} base {base:.4f}")

    het = cfg("sbm_heterophily.json", "heterophily/attention")
    a = run_experiment(het)["summary"]["accuracy_mean"]
    base = het.replace(propagation=_prop_replace(het.propagation, attention=None),
                       outputs=str(out / "heterophily/base"))
    b = run_experiment(base)["summary"]["accuracy_mean"]
    mlp = het.replace(propagation=_prop_replace(het.propagation, steps=0, attention=None),
                      outputs=str(out / "heterophily/mlp"))
    m = run_experiment(mlp)["summary"]["accuracy_mean"]
    print(f"heterophily: attention {a:.4f} base {b:.4f} mlp-only {m:.4f}")


if __name__ == "__main__":
    main()
