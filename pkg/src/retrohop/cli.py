"""Command-line pipeline: ingest, split, applicability, train, evaluate,
rank, bench, synth, export-embeddings.

Configuration comes from a key-value file (``key = value`` per line)
overridden by ``--set key=value`` flags; every run embeds its config
snapshot in the artifacts it writes.  Exit codes: 0 success, 1 domain
error (bad data, missing files), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import data as dt
from . import evaluation as ev
from . import model as md
from .chemgraph import (
    MissingMapError,
    RewriteError,
    SmilesSyntaxError,
    UnsupportedFeatureError,
    parse_smiles,
)
from .fingerprints import EmptySelection, WidthMismatch, mxfp_build
from .screen import ApplicabilityMatrix, build_applicability_matrix

DOMAIN_ERRORS = (
    dt.FormatError,
    SmilesSyntaxError,
    UnsupportedFeatureError,
    MissingMapError,
    RewriteError,
    EmptySelection,
    WidthMismatch,
    md.ShapeMismatch,
    md.NoTrainingData,
    FileNotFoundError,
    IsADirectoryError,
    ValueError,
)


@dataclass
class RunConfig:
    """Every tunable of the pipeline, with its default."""

    # molecule fingerprint
    fingerprint_type: str = "morgan"  # morgan | path | mxfp
    fingerprint_size: int = 4096
    fingerprint_radius: int = 2
    fingerprint_counted: bool = True
    mxfp_circular: int = 512
    mxfp_path: int = 512
    mxfp_atompair: int = 256
    # template fingerprint
    template_fingerprint_type: str = "morgan"
    template_fingerprint_size: int = 4096
    template_pooling: str = "max"  # max | sum | mean | lgamma
    random_template_threshold: int = -1
    random_template_sigma: float = 0.1
    # encoders
    encoder_layers: int = 1
    encoder_dim: int = 1024
    encoder_activation: str = "selu"
    dropout: float = 0.2
    template_encoder_layers: int = 1
    template_encoder_dim: int = 1024
    template_encoder_activation: str = "selu"
    # hopfield association
    beta: float = 0.03
    association_dim: int = 1024
    heads: int = 1
    stacking: str = "single"  # single | stacked-2
    normalize_state: bool = True
    normalize_memory: bool = True
    association_activation: str = "none"
    hopfield_updates: int = 1
    # optimization
    lr: float = 5e-4
    batch_size: int = 1024
    epochs: int = 30
    weight_decay: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    select_by: str = "val_ce"
    pretrain_epochs: int = 0
    # run control
    seed: int = 0
    workers: int = 1


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(name: str, raw: str, target_type: type):
    if target_type is bool:
        if raw.lower() not in _BOOL:
            raise ValueError(f"config key {name!r}: {raw!r} is not a boolean")
        return _BOOL[raw.lower()]
    try:
        return target_type(raw)
    except ValueError:
        raise ValueError(f"config key {name!r}: {raw!r} is not a {target_type.__name__}") from None


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    """Key-value file plus ``key=value`` overrides; unknown keys rejected."""
    by_name = {f.name: f.type for f in fields(RunConfig)}
    types = {n: (bool if t == "bool" else int if t == "int" else float if t == "float" else str)
             for n, t in by_name.items()}
    values: dict = {}
    pairs: list[tuple[str, str]] = []
    if path:
        with open(path) as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"config line {line_no}: expected key = value")
                k, _, v = line.partition("=")
                pairs.append((k.strip(), v.strip()))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set needs key=value, got {item!r}")
        k, _, v = item.partition("=")
        pairs.append((k.strip(), v.strip()))
    for k, v in pairs:
        if k not in types:
            raise ValueError(f"unknown config key {k!r}")
        values[k] = _coerce(k, v, types[k])
    return RunConfig(**values)


def config_snapshot(cfg: RunConfig) -> str:
    return "".join(f"# {k} = {v}\n" for k, v in sorted(asdict(cfg).items()))


# ---------------------------------------------------------------------------
# model assembly


def _molecule_fp_config(cfg: RunConfig) -> md.MoleculeFpConfig:
    return md.MoleculeFpConfig(
        kind=cfg.fingerprint_type,
        size=cfg.fingerprint_size,
        radius=cfg.fingerprint_radius,
        counted=cfg.fingerprint_counted,
    )


def _build_selector(cfg: RunConfig, train_mols):
    if cfg.fingerprint_type != "mxfp" and cfg.template_fingerprint_type != "mxfp":
        return None
    lengths = {
        "circular": cfg.mxfp_circular,
        "path": cfg.mxfp_path,
        "atompair": cfg.mxfp_atompair,
    }
    return mxfp_build(train_mols, lengths)


def build_mhn(cfg: RunConfig, templates, selector=None) -> md.MhnModel:
    n_layers = 2 if cfg.stacking == "stacked-2" else 1
    tfp = md.TemplateFpConfig(
        kind=cfg.template_fingerprint_type,
        size=cfg.template_fingerprint_size,
        radius=cfg.fingerprint_radius,
        counted=cfg.fingerprint_counted,
        pooling=cfg.template_pooling,
        random_threshold=cfg.random_template_threshold,
        noise_sigma=cfg.random_template_sigma,
    )
    enc = md.EncoderConfig(
        n_layers=cfg.template_encoder_layers,
        layer_dim=cfg.template_encoder_dim,
        activation=cfg.template_encoder_activation,
        dropout=cfg.dropout,
    )
    model_cfg = md.MhnConfig(
        molecule_fp=_molecule_fp_config(cfg),
        molecule_encoder=md.EncoderConfig(
            n_layers=cfg.encoder_layers,
            layer_dim=cfg.encoder_dim,
            activation=cfg.encoder_activation,
            dropout=cfg.dropout,
        ),
        template_fps=(tfp,) * n_layers,
        template_encoders=(enc,) * n_layers,
        hopfield=md.HopfieldConfig(
            d=cfg.association_dim,
            beta=cfg.beta,
            heads=cfg.heads,
            normalize_state=cfg.normalize_state,
            normalize_memory=cfg.normalize_memory,
            association_activation=cfg.association_activation,
            n_updates=cfg.hopfield_updates,
        ),
        stacking=cfg.stacking,
        seed=cfg.seed,
    )
    return md.MhnModel(model_cfg, templates, selector)


def build_dnn(cfg: RunConfig, templates, train_template_ids, selector=None) -> md.DnnModel:
    return md.DnnModel(
        md.MoleculeFeaturizer(_molecule_fp_config(cfg), selector),
        md.EncoderConfig(
            n_layers=cfg.encoder_layers,
            layer_dim=cfg.encoder_dim,
            activation=cfg.encoder_activation,
            dropout=cfg.dropout,
        ),
        [t.id for t in templates],
        train_template_ids,
        seed=cfg.seed,
    )


def _train_config(cfg: RunConfig) -> md.TrainConfig:
    return md.TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
        select_by=cfg.select_by,
        pretrain_epochs=cfg.pretrain_epochs,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# subcommands


def _read(path: str) -> str:
    with open(path) as fh:
        return fh.read()


def _write(path: str, text: str):
    with open(path, "w") as fh:
        fh.write(text)


def cmd_ingest(args, cfg: RunConfig) -> int:
    records, rejects = dt.load_reactions(_read(args.reactions), strict=False)
    _write(args.out, dt.write_reactions(records))
    if args.rejects:
        _write(args.rejects, rejects.summary() + ("\n" if len(rejects) else ""))
    if args.templates:
        templates, remap, t_rejects = dt.load_templates(_read(args.templates), strict=False)
        _write(args.templates_out or args.templates + ".normalized", dt.write_templates(templates))
        merged = sum(1 for k, v in remap.items() if k != v)
        print(f"templates: {len(templates)} kept, {merged} duplicates merged, "
              f"{len(t_rejects)} rejected")
    print(f"reactions: {len(records)} kept, {len(rejects)} rejected")
    return 0


def cmd_split(args, cfg: RunConfig) -> int:
    records, _ = dt.load_reactions(_read(args.reactions))
    out = dt.stratified_split(records, seed=cfg.seed)
    _write(args.out, dt.write_reactions(out))
    counts = {s: sum(r.split == s for r in out) for s in dt.SPLITS}
    print(" ".join(f"{s}={n}" for s, n in counts.items()))
    return 0


def cmd_applicability(args, cfg: RunConfig) -> int:
    records, _ = dt.load_reactions(_read(args.reactions))
    templates, _, _ = dt.load_templates(_read(args.templates))
    mols = [r.product_mol() for r in records]
    matrix = build_applicability_matrix(
        templates,
        mols,
        exact=not args.screen_only,
        use_screen=not args.no_screen,
        workers=cfg.workers,
    )
    _write(args.out, matrix.export_text())
    print(matrix.stats_summary(), end="")
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    synth_cfg = dt.SynthConfig(
        n_templates=args.n_templates,
        n_reactions=args.n_reactions,
        zero_shot_fraction=args.zero_shot_fraction,
        seed=cfg.seed,
    )
    records, templates = dt.synth_corpus(synth_cfg)
    _write(args.reactions_out, dt.write_reactions(records))
    _write(args.templates_out, dt.write_templates(templates))
    print(f"wrote {len(records)} reactions, {len(templates)} templates")
    return 0


def _load_corpus(args, cfg: RunConfig):
    records, _ = dt.load_reactions(_read(args.reactions))
    templates, remap, _ = dt.load_templates(_read(args.templates))
    records = [
        replace(r, template_id=remap[r.template_id])
        if remap.get(r.template_id, r.template_id) != r.template_id
        else r
        for r in records
    ]
    if any(r.split is None for r in records):
        records = dt.stratified_split(records, seed=cfg.seed)
    templates = dt.with_train_counts(templates, records)
    return records, templates


def cmd_train(args, cfg: RunConfig) -> int:
    records, templates = _load_corpus(args, cfg)
    subsets = dt.split_subsets(records)
    train_recs, val_recs = subsets["train"], subsets["valid"]
    if not train_recs:
        raise md.NoTrainingData("no training records after split")
    if not val_recs:
        val_recs = train_recs
    train_mols = [r.product_mol() for r in train_recs]
    selector = _build_selector(cfg, train_mols)
    if args.arch == "mhn":
        model = build_mhn(cfg, templates, selector)
    else:
        seen = sorted({r.template_id for r in train_recs})
        model = build_dnn(cfg, templates, seen, selector)
    fps = model.featurizer.matrix(train_mols)
    val_fps = model.featurizer.matrix([r.product_mol() for r in val_recs])
    labels = np.array([r.template_id for r in train_recs])
    val_labels = np.array([r.template_id for r in val_recs])
    tc = _train_config(cfg)
    if tc.pretrain_epochs > 0:
        matrix = build_applicability_matrix(
            templates, train_mols, workers=cfg.workers
        )
        md.pretrain_applicability(model, fps, matrix.rows, tc)
    report = md.train(model, fps, labels, val_fps, val_labels, tc)
    md.save_checkpoint(model, args.model_out, extra_config=asdict(cfg))
    best = report.epochs[report.best_epoch]
    print(
        f"best_epoch={best.epoch} val_ce={best.val_ce:.4f} "
        f"val_top1={best.val_top1:.3f} val_top10={best.val_top10:.3f}"
    )
    return 0


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x != ""]
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from None


def evaluate_to_csv(model, records, templates, ks, cfg: RunConfig) -> str:
    """CSV of (method, k, accuracy, ci_low, ci_high, bucket)."""
    buckets = dt.frequency_buckets(templates)
    bucket_order = [dt.bucket_label(lo, hi) for lo, hi in dt.DEFAULT_BUCKETS]
    methods = {
        "model": ev.model_rankings(model, records),
        "pop": ev.baseline_rankings(templates, records, mode="pop"),
        "pop-fpf": ev.baseline_rankings(templates, records, mode="pop-fpf"),
    }
    buf = io.StringIO()
    buf.write(config_snapshot(cfg))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "k", "accuracy", "ci_low", "ci_high", "bucket"])
    for name, preds in methods.items():
        for k in ks:
            acc = ev.template_topk(preds, k)
            lo, hi = ev.wilson_interval(round(acc * len(preds)), len(preds))
            writer.writerow([name, k, f"{acc:.6f}", f"{lo:.6f}", f"{hi:.6f}", "all"])
            per_bucket = ev.bucketed_accuracy(preds, buckets, bucket_order, k)
            for b in bucket_order:
                cell = per_bucket[b]
                if cell is None:
                    writer.writerow([name, k, "null", "null", "null", b])
                else:
                    blo, bhi = cell["ci95"]
                    writer.writerow(
                        [name, k, f"{cell['accuracy']:.6f}", f"{blo:.6f}", f"{bhi:.6f}", b]
                    )
    return buf.getvalue()


def cmd_evaluate(args, cfg: RunConfig) -> int:
    model = md.load_checkpoint(args.model)
    records, templates = _load_corpus(args, cfg)
    subset = dt.split_subsets(records)[args.split]
    if not subset:
        raise ValueError(f"no records in split {args.split!r}")
    ks = _parse_int_list(args.k)
    text = evaluate_to_csv(model, subset, templates, ks, cfg)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_rank(args, cfg: RunConfig) -> int:
    model = md.load_checkpoint(args.model)
    mol = parse_smiles(args.product)
    p = model.forward(mol)
    ranked = model.rank_templates(p)
    if isinstance(model, md.MhnModel):
        score_of = {t.id: p[i] for i, t in enumerate(model.templates)}
    else:
        score_of = {tid: p[i] for i, tid in enumerate(model.train_template_ids)}
    for tid in ranked[: args.top]:
        print(f"{tid}\t{score_of.get(int(tid), 0.0):.6g}")
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    model = md.load_checkpoint(args.model)
    records, templates = _load_corpus(args, cfg)
    subset = dt.split_subsets(records)[args.split]
    budgets = _parse_int_list(args.budgets)
    report = ev.bench_inference(
        model, subset, templates,
        budgets=budgets, repeats=args.repeats, use_screen=not args.no_screen,
    )
    buf = io.StringIO()
    buf.write(config_snapshot(cfg))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["budget", "k", "accuracy", "mols_per_sec", "mean_executed"])
    for row in report.rows:
        writer.writerow(
            [row.budget, row.budget, f"{row.accuracy:.6f}",
             f"{row.mols_per_second:.3f}", f"{row.mean_executed:.3f}"]
        )
    if args.out:
        _write(args.out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_export_embeddings(args, cfg: RunConfig) -> int:
    model = md.load_checkpoint(args.model)
    if not isinstance(model, md.MhnModel):
        raise ValueError("embeddings are only defined for the association model")
    _write(args.out, ev.export_embeddings(model, position=args.position))
    return 0


# ---------------------------------------------------------------------------
# dispatch


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="retrohop", description=__doc__)
    p.add_argument("--config", help="key-value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--workers", type=int, help="worker-pool size")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="validate and normalize corpus files")
    s.add_argument("--reactions", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rejects")
    s.add_argument("--templates")
    s.add_argument("--templates-out")
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("split", help="assign stratified splits")
    s.add_argument("--reactions", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_split)

    s = sub.add_parser("applicability", help="build the applicability matrix")
    s.add_argument("--reactions", required=True)
    s.add_argument("--templates", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-screen", action="store_true")
    s.add_argument("--screen-only", action="store_true")
    s.set_defaults(fn=cmd_applicability)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--reactions-out", required=True)
    s.add_argument("--templates-out", required=True)
    s.add_argument("--n-templates", type=int, default=120)
    s.add_argument("--n-reactions", type=int, default=600)
    s.add_argument("--zero-shot-fraction", type=float, default=0.12)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a model and save a checkpoint")
    s.add_argument("--reactions", required=True)
    s.add_argument("--templates", required=True)
    s.add_argument("--model-out", required=True)
    s.add_argument("--arch", choices=["mhn", "dnn"], default="mhn")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("evaluate", help="emit an accuracy CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--reactions", required=True)
    s.add_argument("--templates", required=True)
    s.add_argument("--k", default="1,10,50")
    s.add_argument("--split", choices=list(dt.SPLITS), default="test")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("rank", help="rank templates for one product")
    s.add_argument("--model", required=True)
    s.add_argument("--product", required=True)
    s.add_argument("--top", type=int, default=10)
    s.set_defaults(fn=cmd_rank)

    s = sub.add_parser("bench", help="budget vs. throughput benchmark")
    s.add_argument("--model", required=True)
    s.add_argument("--reactions", required=True)
    s.add_argument("--templates", required=True)
    s.add_argument("--budgets", default="1,3,5,10,20,50")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--split", choices=list(dt.SPLITS), default="test")
    s.add_argument("--no-screen", action="store_true")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("export-embeddings", help="write stored template patterns")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--position", type=int, default=0)
    s.set_defaults(fn=cmd_export_embeddings)
    return p


def dispatch(argv: list[str]) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None:
            cfg.workers = args.workers
        return args.fn(args, cfg)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
