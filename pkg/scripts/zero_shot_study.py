#!/usr/bin/env python3
"""Zero-shot and frequency-bucketed template accuracy study.

Trains the Hopfield association model and the feed-forward baseline on a
long-tailed synthetic corpus, then reports top-10 template accuracy per
training-frequency bucket against popularity baselines.

Usage: python3 scripts/zero_shot_study.py [--epochs N] [--seed S]
"""

import argparse

import numpy as np

from retrohop import data as dt
from retrohop import evaluation as ev
from retrohop import model as md


def build_mhn(templates, seed):
    cfg = md.MhnConfig(
        molecule_fp=md.MoleculeFpConfig(kind="path", size=1024, counted=False),
        template_fps=(md.TemplateFpConfig(kind="path", size=1024, counted=False),),
        hopfield=md.HopfieldConfig(
            d=128, beta=0.2, normalize_state=True, normalize_memory=True
        ),
        seed=seed,
    )
    return md.MhnModel(cfg, templates)


def build_dnn(templates, train_records, seed):
    feat = md.MoleculeFeaturizer(
        md.MoleculeFpConfig(kind="path", size=1024, counted=False)
    )
    return md.DnnModel(
        feat,
        md.EncoderConfig(n_layers=1, layer_dim=64, activation="relu"),
        [t.id for t in templates],
        sorted({r.template_id for r in train_records}),
        seed=seed,
    )


def fit(m, train_records, valid_records, epochs, seed):
    fps = m.featurizer.matrix([r.product_mol() for r in train_records])
    vfps = m.featurizer.matrix([r.product_mol() for r in valid_records])
    md.train(
        m,
        fps,
        np.array([r.template_id for r in train_records]),
        vfps,
        np.array([r.template_id for r in valid_records]),
        md.TrainConfig(epochs=epochs, batch_size=32, lr=3e-3, weight_decay=1e-2, seed=seed),
    )
    return m


def report(name, predictions, buckets, order, k=10):
    rows = ev.bucketed_accuracy(predictions, buckets, order, k)
    overall = ev.template_topk(predictions, k)
    print(f"\n{name}: overall top-{k} = {overall:.3f}")
    for label in order:
        cell = rows[label]
        if cell is None:
            print(f"  count {label:>6}: (no samples)")
        else:
            lo, hi = cell["ci95"]
            print(
                f"  count {label:>6}: acc={cell['accuracy']:.3f} "
                f"ci95=[{lo:.3f},{hi:.3f}] n={cell['n']}"
            )


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    records, templates = dt.synth_corpus(
        dt.SynthConfig(n_templates=200, n_reactions=700, max_decorations=6, seed=args.seed)
    )
    subsets = dt.split_subsets(records)
    train, valid, test = subsets["train"], subsets["valid"], subsets["test"]
    rare = sum(1 for t in templates if t.train_count <= 1)
    print(
        f"corpus: {len(templates)} templates ({rare} with train count <= 1), "
        f"{len(train)}/{len(valid)}/{len(test)} train/valid/test records"
    )

    buckets = dt.frequency_buckets(templates)
    order = [dt.bucket_label(lo, hi) for lo, hi in dt.DEFAULT_BUCKETS]

    mhn = fit(build_mhn(templates, args.seed), train, valid, args.epochs, args.seed)
    dnn = fit(
        build_dnn(templates, train, args.seed), train, valid, args.epochs, args.seed
    )

    report("MHN", ev.model_rankings(mhn, test), buckets, order)
    report("DNN", ev.model_rankings(dnn, test), buckets, order)
    report("Pop", ev.baseline_rankings(templates, test, mode="pop"), buckets, order)
    report(
        "Pop+FPF",
        ev.baseline_rankings(templates, test, mode="pop-fpf", width=1024),
        buckets,
        order,
    )


if __name__ == "__main__":
    main()
