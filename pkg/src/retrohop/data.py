"""Corpus handling: file formats, splits, and synthetic corpus generation.

Reactions are stored one per line as

    id<TAB>reactants>reagents>product<TAB>template_id[<TAB>split]

and templates as

    id<TAB>product_pattern>>reactant_patterns<TAB>count

Loading validates every line and either raises ``FormatError`` with the
line number (strict mode) or collects a rejects report.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .chemgraph import (
    Molecule,
    ReactionTemplate,
    RewriteError,
    SmilesSyntaxError,
    UnsupportedFeatureError,
    apply_template,
    canonical_smiles,
    parse_smiles,
    parse_template,
)

SPLITS = ("train", "valid", "test")

# training-count bucket edges: 0, 1, 2, 3-10, 11-50, >50
DEFAULT_BUCKETS = ((0, 0), (1, 1), (2, 2), (3, 10), (11, 50), (51, None))


class FormatError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class ReactionRecord:
    id: str
    reactants: tuple[str, ...]
    reagents: tuple[str, ...]
    product: str
    template_id: int
    split: str | None = None

    def product_mol(self) -> Molecule:
        return parse_smiles(self.product)


@dataclass
class RejectReport:
    entries: list[tuple[int, str]] = field(default_factory=list)

    def add(self, line_no: int, reason: str):
        self.entries.append((line_no, reason))

    def __len__(self):
        return len(self.entries)

    def summary(self) -> str:
        return "\n".join(f"line {n}: {r}" for n, r in self.entries)


def _parse_reaction_line(line_no: int, line: str) -> ReactionRecord:
    fields = line.split("\t")
    if len(fields) not in (3, 4):
        raise FormatError(line_no, f"expected 3 or 4 tab-separated fields, got {len(fields)}")
    rid, rxn, tid = fields[0], fields[1], fields[2]
    split = fields[3] if len(fields) == 4 else None
    if split is not None and split not in SPLITS:
        raise FormatError(line_no, f"unknown split {split!r}")
    parts = rxn.split(">")
    if len(parts) != 3:
        raise FormatError(line_no, "reaction must have exactly two '>' separators")
    reactants_text, reagents_text, product_text = parts
    if not product_text:
        raise FormatError(line_no, "empty product")
    try:
        template_id = int(tid)
    except ValueError:
        raise FormatError(line_no, f"template id {tid!r} is not an integer") from None
    reactants = tuple(s for s in reactants_text.split(".") if s)
    reagents = tuple(s for s in reagents_text.split(".") if s)
    try:
        parse_smiles(product_text)
        for s in reactants + reagents:
            parse_smiles(s)
    except (SmilesSyntaxError, UnsupportedFeatureError) as exc:
        raise FormatError(line_no, str(exc)) from None
    return ReactionRecord(
        id=rid,
        reactants=reactants,
        reagents=reagents,
        product=product_text,
        template_id=template_id,
        split=split,
    )


def load_reactions(text: str, strict: bool = True) -> tuple[list[ReactionRecord], RejectReport]:
    records: list[ReactionRecord] = []
    rejects = RejectReport()
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(_parse_reaction_line(line_no, line))
        except FormatError as exc:
            if strict:
                raise
            rejects.add(line_no, str(exc))
    return records, rejects


def write_reactions(records: list[ReactionRecord]) -> str:
    lines = []
    for r in records:
        rxn = f"{'.'.join(r.reactants)}>{'.'.join(r.reagents)}>{r.product}"
        tail = f"\t{r.split}" if r.split is not None else ""
        lines.append(f"{r.id}\t{rxn}\t{r.template_id}{tail}")
    return "\n".join(lines) + "\n"


def load_templates(
    text: str, strict: bool = True
) -> tuple[list[ReactionTemplate], dict[int, int], RejectReport]:
    """Parse templates, collapsing duplicate pattern strings.

    Returns (templates, remap, rejects); ``remap`` sends every input id to
    the id that survived deduplication, with duplicate counts summed.
    """
    templates: list[ReactionTemplate] = []
    by_text: dict[str, int] = {}
    counts: dict[int, int] = {}
    remap: dict[int, int] = {}
    rejects = RejectReport()
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        try:
            if len(fields) != 3:
                raise FormatError(line_no, f"expected 3 fields, got {len(fields)}")
            try:
                tid, count = int(fields[0]), int(fields[2])
            except ValueError:
                raise FormatError(line_no, "id and count must be integers") from None
            if tid in remap:
                raise FormatError(line_no, f"duplicate template id {tid}")
            try:
                t = parse_template(fields[1], template_id=tid, train_count=count)
            except (SmilesSyntaxError, UnsupportedFeatureError, ValueError) as exc:
                raise FormatError(line_no, str(exc)) from None
        except FormatError as exc:
            if strict:
                raise
            rejects.add(line_no, str(exc))
            continue
        key = fields[1]
        if key in by_text:
            keep = by_text[key]
            remap[tid] = keep
            counts[keep] += count
        else:
            by_text[key] = tid
            remap[tid] = tid
            counts[tid] = count
            templates.append(t)
    templates = [replace(t, train_count=counts[t.id]) for t in templates]
    return templates, remap, rejects


def write_templates(templates: list[ReactionTemplate]) -> str:
    lines = []
    for t in templates:
        product = canonical_smiles(t.product_pattern)
        reactants = ".".join(canonical_smiles(rp) for rp in t.reactant_patterns)
        lines.append(f"{t.id}\t{product}>>{reactants}\t{t.train_count}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# splitting


def stratified_split(records: list[ReactionRecord], seed: int = 0) -> list[ReactionRecord]:
    """Per-template split assignment.

    Groups of >= 10 samples go 80/10/10; 3-9 samples give one test, one
    validation, the rest train; exactly two give one test, one train; a
    lone sample is assigned 80/10/10 at random.  Each template uses its
    own counter-based generator, so the outcome is independent of record
    order and of the other templates.
    """
    groups: dict[int, list[int]] = defaultdict(list)
    for i, r in enumerate(records):
        groups[r.template_id].append(i)
    assignment: dict[int, str] = {}
    for tid in sorted(groups):
        # sort by record id so the outcome ignores input order
        idx = sorted(groups[tid], key=lambda i: records[i].id)
        rng = np.random.Generator(
            np.random.Philox(key=np.array([seed, tid], dtype=np.uint64))
        )
        order = [idx[j] for j in rng.permutation(len(idx))]
        n = len(order)
        if n >= 10:
            n_test = max(1, round(0.1 * n))
            n_valid = max(1, round(0.1 * n))
            for k, i in enumerate(order):
                if k < n_test:
                    assignment[i] = "test"
                elif k < n_test + n_valid:
                    assignment[i] = "valid"
                else:
                    assignment[i] = "train"
        elif n >= 3:
            assignment[order[0]] = "test"
            assignment[order[1]] = "valid"
            for i in order[2:]:
                assignment[i] = "train"
        elif n == 2:
            assignment[order[0]] = "test"
            assignment[order[1]] = "train"
        else:
            u = rng.random()
            assignment[order[0]] = "train" if u < 0.8 else ("valid" if u < 0.9 else "test")
    return [replace(r, split=assignment[i]) for i, r in enumerate(records)]


def split_subsets(records: list[ReactionRecord]) -> dict[str, list[ReactionRecord]]:
    out: dict[str, list[ReactionRecord]] = {s: [] for s in SPLITS}
    for r in records:
        if r.split is None:
            raise ValueError(f"record {r.id} has no split")
        out[r.split].append(r)
    return out


def train_counts(records: list[ReactionRecord]) -> Counter:
    """Template id -> number of training samples."""
    return Counter(r.template_id for r in records if r.split == "train")


def with_train_counts(
    templates: list[ReactionTemplate], records: list[ReactionRecord]
) -> list[ReactionTemplate]:
    counts = train_counts(records)
    return [replace(t, train_count=counts.get(t.id, 0)) for t in templates]


def bucket_label(low: int, high: int | None) -> str:
    if high is None:
        return f">{low - 1}"
    if low == high:
        return str(low)
    return f"{low}-{high}"


def frequency_buckets(
    templates: list[ReactionTemplate], edges=DEFAULT_BUCKETS
) -> dict[int, str]:
    """Template id -> training-count bucket label."""
    out = {}
    for t in templates:
        for low, high in edges:
            if t.train_count >= low and (high is None or t.train_count <= high):
                out[t.id] = bucket_label(low, high)
                break
        else:
            raise ValueError(f"count {t.train_count} not covered by bucket edges")
    return out


def drop_singleton_train_templates(records: list[ReactionRecord]) -> list[ReactionRecord]:
    """Remove training samples of templates seen exactly once in training
    and never in the test split."""
    counts = train_counts(records)
    in_test = {r.template_id for r in records if r.split == "test"}
    return [
        r
        for r in records
        if not (
            r.split == "train"
            and counts[r.template_id] == 1
            and r.template_id not in in_test
        )
    ]


# ---------------------------------------------------------------------------
# synthetic corpus


# Generic templates share ubiquitous product motifs (every product gets a
# C-C bond by construction) but differ on the reactant side, so many of
# them survive any substructure screen; the rare-element cores below make
# the remaining templates selective.
_GENERIC_TEMPLATES = [
    "[C:1][C:2]>>[C:1].[C:2]",
    "[C:1][C:2]>>[C:1]O.[C:2]",
    "[C:1][C:2]>>[C:1]N.[C:2]",
    "[C:1][C:2]>>[C:1]Cl.[C:2]",
    "[C:1][C:2]>>[C:1]Br.[C:2]",
    "[C:1][C:2]>>[C:1]I.[C:2]",
    "[C:1][C:2]>>[C:1]S.[C:2]",
    "[C:1][C:2]>>[C:1]=O.[C:2]",
    "[C:1][C:2]>>[C:1].[C:2]O",
    "[C:1][C:2]>>[C:1].[C:2]N",
    "[C:1][C:2]>>[C:1].[C:2]Cl",
    "[C:1][C:2]>>[C:1].[C:2]Br",
    "[C:1][C:2]>>[C:1]=[C:2]",
    "[C:1][C:2]>>[C:1]O[C:2]",
    "[C:1][C:2]>>[C:1]N[C:2]",
]
# cores used for generic templates' product construction: a C-C pair
_GENERIC_CORE = ("C", 1, "C")

_RARE_ELEMENTS = ["S", "Cl", "Br", "F", "P", "I", "B"]
_COMMON_ELEMENTS = ["C", "N", "O"]
_BOND_CHAR = {1: "", 2: "=", 3: "#"}


@dataclass(frozen=True)
class SynthConfig:
    n_templates: int = 120
    n_reactions: int = 600
    zero_shot_fraction: float = 0.12
    zipf_a: float = 1.4
    max_decorations: int = 4
    seed: int = 0


def _core_pattern_text(core: tuple) -> str:
    """Mapped product pattern and a one-bond-cut reactant side."""
    atoms = core[0::2]
    orders = core[1::2]
    product = "".join(
        f"[{a}:{i + 1}]" + (_BOND_CHAR[orders[i]] if i < len(orders) else "")
        for i, a in enumerate(atoms)
    )
    # cut the first bond: order > 1 is reduced by one, a single bond splits
    first = orders[0]
    left = f"[{atoms[0]}:1]"
    rest = "".join(
        f"[{a}:{i + 2}]" + (_BOND_CHAR[orders[i + 1]] if i + 1 < len(orders) else "")
        for i, a in enumerate(atoms[1:])
    )
    if first == 1:
        reactants = f"{left}.{rest}"
    else:
        reactants = f"{left}{_BOND_CHAR[first - 1]}{rest}"
    return f"{product}>>{reactants}"


def _template_cores(n: int, rng) -> list[tuple]:
    n_generic = min(n, len(_GENERIC_TEMPLATES))
    cores = [_GENERIC_CORE] * n_generic
    seen = {_GENERIC_CORE}
    while len(cores) < n:
        length = int(rng.integers(2, 4))
        atoms = [str(rng.choice(_RARE_ELEMENTS if i == 0 else _RARE_ELEMENTS + _COMMON_ELEMENTS))
                 for i in range(length)]
        orders = [int(rng.integers(1, 4)) for _ in range(length - 1)]
        core = tuple(
            x for pair in zip(atoms, orders + [None]) for x in pair if x is not None
        )
        if core not in seen:
            seen.add(core)
            cores.append(core)
    return cores


def _decorated_product(core: tuple, rng, max_decorations: int) -> str:
    """SMILES of the core chain with random single-bond branches."""
    atoms = list(core[0::2])
    orders = list(core[1::2])
    n_dec = int(rng.integers(2, max_decorations + 1))
    branches: dict[int, list[str]] = defaultdict(list)
    # every product carries at least one C-C bond so the generic template
    # family stays applicable corpus-wide
    branches[int(rng.integers(0, len(atoms)))].append("CC")
    # varied decoration chains dominate the whole-molecule fingerprint, so
    # two products of the same template still look quite different
    pool = ["C", "CC", "CCC", "CCCC", "O", "N", "CO", "CCO", "CN", "CCN", "OC", "NC"]
    for _ in range(n_dec):
        site = int(rng.integers(0, len(atoms)))
        branches[site].append(str(rng.choice(pool)))
    out = []
    for i, a in enumerate(atoms):
        out.append(a if len(a) == 1 or a in ("Cl", "Br") else a)
        for b in branches.get(i, []):
            out.append(f"({b})")
        if i < len(orders):
            out.append(_BOND_CHAR[orders[i]])
    return "".join(out)


def synth_corpus(cfg: SynthConfig) -> tuple[list[ReactionRecord], list[ReactionTemplate]]:
    """Long-tailed synthetic corpus with construction-guaranteed labels.

    Products contain their template's product pattern by construction, so
    the label template is always applicable.  Template frequencies follow
    a Zipf profile; a configurable fraction of templates appears only in
    the test split (zero-shot).  Output is a pure function of the
    configuration.
    """
    rng = np.random.default_rng(cfg.seed)
    cores = _template_cores(cfg.n_templates, rng)
    templates = []
    for tid, core in enumerate(cores):
        if tid < min(cfg.n_templates, len(_GENERIC_TEMPLATES)):
            text = _GENERIC_TEMPLATES[tid]
        else:
            text = _core_pattern_text(core)
        templates.append(parse_template(text, template_id=tid))

    n_zero = max(1, int(round(cfg.zero_shot_fraction * cfg.n_templates)))
    zero_ids = set(range(cfg.n_templates - n_zero, cfg.n_templates))

    # Zipf counts over the non-zero-shot templates, scaled to the corpus size
    regular = [t for t in templates if t.id not in zero_ids]
    weights = np.array([1.0 / (rank + 1) ** cfg.zipf_a for rank in range(len(regular))])
    counts = np.maximum(1, np.round(weights / weights.sum() * (cfg.n_reactions - n_zero)))
    # promote alternate tail entries to three samples: after splitting
    # (one test, one valid, one train) these remain singleton-train
    # templates but are represented in validation and test
    ones = np.flatnonzero(counts == 1)
    counts[ones[::2]] = 3

    records: list[ReactionRecord] = []
    serial = 0
    for t, count in zip(regular, counts):
        for _ in range(int(count)):
            records.append(_make_record(t, cores[t.id], rng, cfg, serial))
            serial += 1
    for tid in sorted(zero_ids):
        records.append(
            replace(_make_record(templates[tid], cores[tid], rng, cfg, serial), split="test")
        )
        serial += 1

    with_split = stratified_split(records, seed=cfg.seed)
    # zero-shot assignments were fixed before splitting
    final = [
        replace(r, split="test") if r.template_id in zero_ids else r
        for r in with_split
    ]
    return final, with_train_counts(templates, final)


def _make_record(
    template: ReactionTemplate, core: tuple, rng, cfg: SynthConfig, serial: int
) -> ReactionRecord:
    for _ in range(20):
        smiles = _decorated_product(core, rng, cfg.max_decorations)
        try:
            mol = parse_smiles(smiles)
            outcomes = apply_template(template, mol)
        except (SmilesSyntaxError, RewriteError):
            continue
        if outcomes:
            product = canonical_smiles(mol)
            return ReactionRecord(
                id=f"S{serial:05d}",
                reactants=tuple(canonical_smiles(m) for m in outcomes[0]),
                reagents=(),
                product=product,
                template_id=template.id,
                split=None,
            )
    raise RuntimeError(f"could not generate a product for template {template.id}")
