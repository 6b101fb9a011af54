#!/usr/bin/env python3
"""Rare-template ablation study.

Removes training samples of templates that occur exactly once in training
and never in the test split, retrains both models, and compares validation
top-10 accuracy before and after. The association model relies on those
rare memories and should lose accuracy; the per-class baseline should not.

Usage: python3 scripts/rare_template_study.py [--epochs N] [--seed S]
"""

import argparse

from retrohop import data as dt
from retrohop import evaluation as ev
from zero_shot_study import build_dnn, build_mhn, fit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    records, templates = dt.synth_corpus(
        dt.SynthConfig(n_templates=200, n_reactions=700, max_decorations=6, seed=args.seed)
    )
    subsets = dt.split_subsets(records)
    train, valid = subsets["train"], subsets["valid"]

    kept = dt.drop_singleton_train_templates(records)
    kept_train = dt.split_subsets(kept)["train"]
    print(f"train records: {len(train)} -> {len(kept_train)} after singleton drop")

    results = {}
    for tag, trr in (("full", train), ("dropped", kept_train)):
        mhn = fit(build_mhn(templates, args.seed), trr, valid, args.epochs, args.seed)
        dnn = fit(build_dnn(templates, trr, args.seed), trr, valid, args.epochs, args.seed)
        results[tag] = (
            ev.template_topk(ev.model_rankings(mhn, valid), 10),
            ev.template_topk(ev.model_rankings(dnn, valid), 10),
        )

    (mf, df), (md_, dd) = results["full"], results["dropped"]
    print(f"MHN validation top-10: {mf:.3f} -> {md_:.3f} (delta {md_ - mf:+.3f})")
    print(f"DNN validation top-10: {df:.3f} -> {dd:.3f} (delta {dd - df:+.3f})")


if __name__ == "__main__":
    main()
