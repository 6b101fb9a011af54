#!/usr/bin/env python3
"""Inference speed/accuracy trade-off benchmark.

Measures the wall-clock cost of producing k reactant candidate sets per
product molecule at increasing budgets, with and without the bit-subset
substructure screen, plus the applicability-matrix build speedup.

Usage: python3 scripts/speed_benchmark.py [--seed S]
"""

import argparse
import time

from retrohop import data as dt
from retrohop import evaluation as ev
from retrohop import model as md
from retrohop.chemgraph import parse_smiles
from retrohop.screen import build_applicability_matrix


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=17)
    args = ap.parse_args()

    records, templates = dt.synth_corpus(
        dt.SynthConfig(n_templates=60, n_reactions=250, seed=args.seed)
    )
    recs = records[:80]
    cfg = md.MhnConfig(
        molecule_fp=md.MoleculeFpConfig(size=256, radius=1),
        template_fps=(md.TemplateFpConfig(size=256, radius=1),),
        hopfield=md.HopfieldConfig(d=32, beta=0.1),
        seed=0,
    )
    model = md.MhnModel(cfg, templates)

    for use_screen in (True, False):
        report = ev.bench_inference(
            model, recs, templates, budgets=(1, 3, 5, 10, 20, 50),
            repeats=3, use_screen=use_screen,
        )
        print(f"\n--- screen={use_screen} ---")
        print(report.summary(), end="")

    print("\n--- applicability matrix build ---")
    mols = [parse_smiles(r.product) for r in recs]
    t0 = time.perf_counter()
    build_applicability_matrix(templates, mols, exact=True, use_screen=True)
    t_fast = time.perf_counter() - t0
    t0 = time.perf_counter()
    build_applicability_matrix(templates, mols, exact=True, use_screen=False)
    t_slow = time.perf_counter() - t0
    print(
        f"screen+exact: {t_fast:.3f}s  exact-only: {t_slow:.3f}s  "
        f"speedup: {t_slow / t_fast:.1f}x"
    )


if __name__ == "__main__":
    main()
