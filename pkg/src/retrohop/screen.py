"""Fingerprint filter (FPF) and applicability-matrix construction.

The FPF is a bit-subset test: a template can only be applicable when
every bit of its product-side path fingerprint is also set in the
product fingerprint.  The matrix builder runs the screen first and only
verifies surviving pairs with the exact matcher, which prunes the vast
majority of the quadratic pair set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from multiprocessing import get_context

from .chemgraph import Molecule, ReactionTemplate, subgraph_match
from .fingerprints import BitFingerprint, WidthMismatch, path_fp


def fpf_check(template_bits: BitFingerprint, product_bits: BitFingerprint) -> bool:
    if template_bits.width != product_bits.width:
        raise WidthMismatch(
            f"widths differ: {template_bits.width} vs {product_bits.width}"
        )
    return template_bits.bits & ~product_bits.bits == 0


@dataclass
class ApplicabilityMatrix:
    """Sparse boolean molecules x templates matrix.

    Rows are sorted template-id lists; an entry is only present when the
    construction verified (or, with exact=False, screened) the pair.
    """

    rows: list[tuple[int, ...]]
    n_templates: int
    stats: dict = field(default_factory=dict)

    def is_applicable(self, mol_index: int, template_id: int) -> bool:
        return template_id in self.rows[mol_index]

    def export_text(self) -> str:
        lines = [
            f"{i}\t{','.join(str(t) for t in row)}"
            for i, row in enumerate(self.rows)
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, n_templates: int) -> "ApplicabilityMatrix":
        rows = []
        for line in text.splitlines():
            if not line.strip():
                continue
            _, _, ids = line.partition("\t")
            rows.append(tuple(int(t) for t in ids.split(",") if t != ""))
        return cls(rows=rows, n_templates=n_templates)

    def stats_summary(self) -> str:
        return "\n".join(f"{k}: {v}" for k, v in sorted(self.stats.items())) + "\n"


_WORKER_STATE: dict = {}


def _init_worker(templates, template_bits, exact, width):
    _WORKER_STATE["templates"] = templates
    _WORKER_STATE["bits"] = template_bits
    _WORKER_STATE["exact"] = exact
    _WORKER_STATE["width"] = width


def _row_for_mol(mol: Molecule) -> tuple[tuple[int, ...], int, int]:
    templates = _WORKER_STATE["templates"]
    tbits = _WORKER_STATE["bits"]
    exact = _WORKER_STATE["exact"]
    mol_bits = path_fp(mol, _WORKER_STATE["width"])
    row = []
    screened = checked = 0
    for t, bits in zip(templates, tbits):
        screened += 1
        if bits.bits & ~mol_bits.bits != 0:
            continue
        if exact:
            checked += 1
            if not subgraph_match(t.product_pattern, mol):
                continue
        row.append(t.id)
    return tuple(sorted(row)), screened, checked


def build_applicability_matrix(
    templates: list[ReactionTemplate],
    mols: list[Molecule],
    exact: bool = True,
    use_screen: bool = True,
    width: int = 4096,
    workers: int = 1,
) -> ApplicabilityMatrix:
    """Screen-then-verify applicability for every (molecule, template) pair.

    With ``use_screen=False`` every pair goes straight to the exact
    matcher (the slow reference path).  Work is distributed over
    molecule rows; results are merged in input order so the matrix is
    independent of the worker count.
    """
    t_screen_start = time.perf_counter()
    if use_screen:
        template_bits = [path_fp(t.product_pattern, width) for t in templates]
    else:
        template_bits = [BitFingerprint(bits=0, width=width) for _ in templates]
    t_screen_built = time.perf_counter()

    if workers <= 1:
        _init_worker(templates, template_bits, exact, width)
        results = [_row_for_mol(m) for m in mols]
    else:
        ctx = get_context("fork")
        with ctx.Pool(
            workers,
            initializer=_init_worker,
            initargs=(templates, template_bits, exact, width),
        ) as pool:
            results = pool.map(_row_for_mol, mols, chunksize=max(1, len(mols) // (4 * workers)))
    t_done = time.perf_counter()

    rows = [r for r, _, _ in results]
    stats = {
        "pairs_screened": sum(s for _, s, _ in results),
        "pairs_exact_checked": sum(c for _, _, c in results),
        "screen_build_seconds": t_screen_built - t_screen_start,
        "matrix_seconds": t_done - t_screen_built,
        "workers": workers,
        "exact": exact,
        "use_screen": use_screen,
    }
    return ApplicabilityMatrix(rows=rows, n_templates=len(templates), stats=stats)
