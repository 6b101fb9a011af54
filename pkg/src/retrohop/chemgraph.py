"""Molecular graphs: SMILES parsing, substructure matching, template rewrites.

The SMILES grammar covered here is the subset needed for desk-scale
corpora: organic-subset atoms, bracket atoms with charges and atom maps,
bond orders, branches, ring closures and aromatic lowercase atoms.
Stereo markers and isotopes are tolerated and dropped with a warning
flag.  Aromaticity is taken as written; there is no perception step and
no valence model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

# Bond order codes. Aromatic bonds get their own code so that order
# comparison in matching stays a plain equality test.
SINGLE, DOUBLE, TRIPLE, AROMATIC = 1, 2, 3, 4

_ORGANIC = {"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"}
_AROMATIC_ORGANIC = {"b", "c", "n", "o", "p", "s"}
_BOND_CHARS = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC}
_BOND_SYMBOL = {SINGLE: "-", DOUBLE: "=", TRIPLE: "#", AROMATIC: ":"}


class SmilesSyntaxError(ValueError):
    """Malformed SMILES/pattern input; carries the character offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class UnsupportedFeatureError(ValueError):
    """Input uses grammar outside the supported subset."""


class MissingMapError(ValueError):
    """Reactant-side atom map without a product-side counterpart."""


class RewriteError(ValueError):
    """A template rewrite could not place an introduced atom."""


@dataclass(frozen=True)
class Atom:
    symbol: str
    charge: int = 0
    aromatic: bool = False
    degree: int = 0
    # Pattern-only extras; plain molecules leave them at the defaults.
    map_num: int | None = None
    wildcard: bool = False


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    order: int

    def other(self, idx: int) -> int:
        return self.j if idx == self.i else self.i


@dataclass(frozen=True)
class Molecule:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    source_text: str = ""
    skipped_features: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.atoms)
        if n < 1:
            raise ValueError("molecule needs at least one atom")
        seen = set()
        for b in self.bonds:
            if not (0 <= b.i < n and 0 <= b.j < n) or b.i == b.j:
                raise ValueError(f"invalid bond endpoints ({b.i},{b.j})")
            key = (min(b.i, b.j), max(b.i, b.j))
            if key in seen:
                raise ValueError(f"duplicate bond {key}")
            seen.add(key)

    def neighbors(self, idx: int) -> list[tuple[int, int]]:
        """(neighbor index, bond order) pairs, ascending neighbor index."""
        out = [(b.other(idx), b.order) for b in self.bonds if idx in (b.i, b.j)]
        out.sort()
        return out


class PatternGraph(Molecule):
    """Molecule-shaped graph allowed to carry atom maps and wildcards."""

    def __post_init__(self):
        super().__post_init__()
        maps = [a.map_num for a in self.atoms if a.map_num is not None]
        if len(maps) != len(set(maps)):
            raise ValueError("duplicate atom-map numbers in pattern")

    @property
    def map_numbers(self) -> set[int]:
        return {a.map_num for a in self.atoms if a.map_num is not None}


@dataclass(frozen=True)
class ReactionTemplate:
    id: int
    product_pattern: PatternGraph
    reactant_patterns: tuple[PatternGraph, ...]
    train_count: int = 0

    def __post_init__(self):
        product_maps = self.product_pattern.map_numbers
        for rp in self.reactant_patterns:
            missing = rp.map_numbers - product_maps
            if missing:
                raise MissingMapError(
                    f"reactant maps {sorted(missing)} missing on product side"
                )


# ---------------------------------------------------------------------------
# parsing


class _Parser:
    def __init__(self, text: str, as_pattern: bool):
        self.text = text
        self.as_pattern = as_pattern
        self.pos = 0
        self.atoms: list[dict] = []
        self.bonds: list[Bond] = []
        self.skipped: list[str] = []
        self._bond_keys: set[tuple[int, int]] = set()

    def fail(self, msg: str, offset: int | None = None):
        raise SmilesSyntaxError(msg, self.pos if offset is None else offset)

    def _add_bond(self, i: int, j: int, order: int | None):
        if order is None:
            both_arom = self.atoms[i]["aromatic"] and self.atoms[j]["aromatic"]
            order = AROMATIC if both_arom else SINGLE
        key = (min(i, j), max(i, j))
        if i == j or key in self._bond_keys:
            self.fail(f"invalid or duplicate ring bond ({i},{j})")
        self._bond_keys.add(key)
        self.bonds.append(Bond(key[0], key[1], order))

    def _add_atom(self, prev: int | None, pending: int | None, **props) -> int:
        idx = len(self.atoms)
        self.atoms.append(props)
        if prev is not None:
            self._add_bond(prev, idx, pending)
        return idx

    def _bracket_atom(self, prev: int | None, pending: int | None) -> int:
        start = self.pos
        t = self.text
        self.pos += 1  # past '['
        # isotope digits: tolerated, dropped
        iso = ""
        while self.pos < len(t) and t[self.pos].isdigit():
            iso += t[self.pos]
            self.pos += 1
        if iso:
            self.skipped.append(f"isotope {iso} at {start}")
        if self.pos >= len(t):
            self.fail("unterminated bracket atom", start)
        symbol, aromatic, wildcard = None, False, False
        c = t[self.pos]
        if c == "*":
            if not self.as_pattern:
                raise UnsupportedFeatureError(
                    f"wildcard atom outside a pattern (offset {self.pos})"
                )
            wildcard, symbol = True, "*"
            self.pos += 1
        elif c.isupper():
            symbol = c
            self.pos += 1
            if self.pos < len(t) and t[self.pos].islower() and t[self.pos] != "h":
                two = symbol + t[self.pos]
                if two in _ORGANIC or two in {"Si", "Se", "Sn", "Mg", "Zn", "Li", "Na", "K", "Ca", "Fe", "Cu", "Al"}:
                    symbol = two
                    self.pos += 1
        elif c in _AROMATIC_ORGANIC:
            symbol, aromatic = c.upper(), True
            self.pos += 1
        else:
            self.fail(f"bad element symbol {c!r}")
        charge = 0
        map_num = None
        while self.pos < len(t) and t[self.pos] != "]":
            c = t[self.pos]
            if c == "@":
                while self.pos < len(t) and t[self.pos] == "@":
                    self.pos += 1
                self.skipped.append(f"chirality at {start}")
            elif c == "H":
                self.pos += 1
                while self.pos < len(t) and t[self.pos].isdigit():
                    self.pos += 1
                self.skipped.append(f"H-count at {start}")
            elif c in "+-":
                sign = 1 if c == "+" else -1
                self.pos += 1
                if self.pos < len(t) and t[self.pos].isdigit():
                    num = ""
                    while self.pos < len(t) and t[self.pos].isdigit():
                        num += t[self.pos]
                        self.pos += 1
                    charge = sign * int(num)
                else:
                    charge = sign
                    while self.pos < len(t) and t[self.pos] == c:
                        charge += sign
                        self.pos += 1
            elif c == ":":
                self.pos += 1
                num = ""
                while self.pos < len(t) and t[self.pos].isdigit():
                    num += t[self.pos]
                    self.pos += 1
                if not num:
                    self.fail("empty atom map")
                if self.as_pattern:
                    map_num = int(num)
                else:
                    self.skipped.append(f"atom map at {start}")
            else:
                self.fail(f"unexpected {c!r} in bracket atom")
        if self.pos >= len(t):
            self.fail("unterminated bracket atom", start)
        self.pos += 1  # past ']'
        return self._add_atom(
            prev,
            pending,
            symbol=symbol,
            charge=charge,
            aromatic=aromatic,
            map_num=map_num,
            wildcard=wildcard,
        )

    def parse(self):
        t = self.text
        prev: int | None = None
        pending: int | None = None
        stack: list[int | None] = []
        rings: dict[int, tuple[int, int | None]] = {}
        while self.pos < len(t):
            c = t[self.pos]
            if c in _BOND_CHARS:
                if pending is not None:
                    self.fail("two consecutive bond symbols")
                pending = _BOND_CHARS[c]
                self.pos += 1
            elif c in "/\\":
                self.skipped.append(f"stereo bond at {self.pos}")
                self.pos += 1
            elif c == "(":
                if prev is None:
                    self.fail("branch before any atom")
                stack.append(prev)
                self.pos += 1
            elif c == ")":
                if not stack:
                    self.fail("unmatched ')'")
                prev = stack.pop()
                self.pos += 1
            elif c.isdigit() or c == "%":
                if prev is None:
                    self.fail("ring closure before any atom")
                if c == "%":
                    if self.pos + 2 >= len(t) or not t[self.pos + 1 : self.pos + 3].isdigit():
                        self.fail("bad %nn ring closure")
                    num = int(t[self.pos + 1 : self.pos + 3])
                    self.pos += 3
                else:
                    num = int(c)
                    self.pos += 1
                if num in rings:
                    other, order0 = rings.pop(num)
                    order = pending if pending is not None else order0
                    self._add_bond(other, prev, order)
                else:
                    rings[num] = (prev, pending)
                pending = None
            elif c == "[":
                prev = self._bracket_atom(prev, pending)
                pending = None
            elif c == "*":
                if not self.as_pattern:
                    raise UnsupportedFeatureError(
                        f"wildcard atom outside a pattern (offset {self.pos})"
                    )
                prev = self._add_atom(
                    prev, pending, symbol="*", charge=0, aromatic=False,
                    map_num=None, wildcard=True,
                )
                pending = None
                self.pos += 1
            elif c.isupper():
                symbol = c
                if c + t[self.pos + 1 : self.pos + 2] in ("Cl", "Br"):
                    symbol = c + t[self.pos + 1]
                if symbol not in _ORGANIC:
                    self.fail(f"element {symbol!r} needs brackets")
                self.pos += len(symbol)
                prev = self._add_atom(
                    prev, pending, symbol=symbol, charge=0, aromatic=False,
                    map_num=None, wildcard=False,
                )
                pending = None
            elif c in _AROMATIC_ORGANIC:
                self.pos += 1
                prev = self._add_atom(
                    prev, pending, symbol=c.upper(), charge=0, aromatic=True,
                    map_num=None, wildcard=False,
                )
                pending = None
            elif c == ".":
                raise UnsupportedFeatureError(
                    f"disconnected components ('.') not supported here (offset {self.pos})"
                )
            else:
                self.fail(f"unexpected character {c!r}")
        if stack:
            self.fail("unmatched '('")
        if rings:
            self.fail(f"unclosed ring bond(s) {sorted(rings)}")
        if pending is not None:
            self.fail("dangling bond symbol")
        if not self.atoms:
            self.fail("no atoms", 0)
        degree = [0] * len(self.atoms)
        for b in self.bonds:
            degree[b.i] += 1
            degree[b.j] += 1
        atoms = tuple(
            Atom(degree=degree[i], **props) for i, props in enumerate(self.atoms)
        )
        cls = PatternGraph if self.as_pattern else Molecule
        return cls(
            atoms=atoms,
            bonds=tuple(self.bonds),
            source_text=self.text,
            skipped_features=tuple(self.skipped),
        )


def parse_smiles(text: str) -> Molecule:
    if not text:
        raise SmilesSyntaxError("empty input", 0)
    return _Parser(text, as_pattern=False).parse()


def parse_pattern(text: str) -> PatternGraph:
    if not text:
        raise SmilesSyntaxError("empty pattern", 0)
    return _Parser(text, as_pattern=True).parse()


def parse_template(text: str, template_id: int = 0, train_count: int = 0) -> ReactionTemplate:
    """Parse ``product>>reactant1.reactant2`` into a ReactionTemplate."""
    parts = text.split(">>")
    if len(parts) != 2:
        raise SmilesSyntaxError("expected exactly one '>>' separator", text.find(">>"))
    product = parse_pattern(parts[0])
    reactants = tuple(parse_pattern(r) for r in parts[1].split(".") if r != "")
    if not reactants:
        raise SmilesSyntaxError("empty reactant side", len(parts[0]) + 2)
    return ReactionTemplate(
        id=template_id,
        product_pattern=product,
        reactant_patterns=reactants,
        train_count=train_count,
    )


# ---------------------------------------------------------------------------
# subgraph matching (VF2-style backtracking)


def _atoms_compatible(pa: Atom, ma: Atom) -> bool:
    if pa.charge != ma.charge:
        return False
    if pa.wildcard:
        return True
    return pa.symbol == ma.symbol and pa.aromatic == ma.aromatic


def _pattern_order(pattern: PatternGraph) -> list[int]:
    """Visit order that keeps each new atom adjacent to the matched part
    whenever its component allows it."""
    n = len(pattern.atoms)
    adj = {i: [nb for nb, _ in pattern.neighbors(i)] for i in range(n)}
    order, seen = [], set()
    for start in range(n):
        if start in seen:
            continue
        queue = [start]
        seen.add(start)
        while queue:
            cur = queue.pop(0)
            order.append(cur)
            for nb in adj[cur]:
                if nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
    return order


def enumerate_embeddings(pattern: PatternGraph, mol: Molecule):
    """Yield injective pattern->molecule atom maps, deterministically.

    Candidate molecule atoms are tried in ascending index at every branch
    point, so the embedding order is reproducible.  Matching is
    non-induced: all pattern bonds must be present in the molecule with
    equal order, extra molecule bonds are allowed.
    """
    order = _pattern_order(pattern)
    p_bonds: dict[int, list[tuple[int, int]]] = {i: [] for i in range(len(pattern.atoms))}
    for b in pattern.bonds:
        p_bonds[b.i].append((b.j, b.order))
        p_bonds[b.j].append((b.i, b.order))
    mol_bond = {}
    for b in mol.bonds:
        mol_bond[(b.i, b.j)] = b.order
        mol_bond[(b.j, b.i)] = b.order
    mol_adj = {i: sorted(nb for nb, _ in mol.neighbors(i)) for i in range(len(mol.atoms))}
    n_mol = len(mol.atoms)
    mapping: dict[int, int] = {}
    used: set[int] = set()

    def candidates(pi: int) -> list[int]:
        anchored = [(pj, o) for pj, o in p_bonds[pi] if pj in mapping]
        if anchored:
            pj0, _ = anchored[0]
            pool = mol_adj[mapping[pj0]]
        else:
            pool = range(n_mol)
        pa = pattern.atoms[pi]
        out = []
        for mi in pool:
            if mi in used:
                continue
            ma = mol.atoms[mi]
            if not _atoms_compatible(pa, ma) or ma.degree < pa.degree:
                continue
            ok = True
            for pj, o in anchored:
                if mol_bond.get((mi, mapping[pj])) != o:
                    ok = False
                    break
            if ok:
                out.append(mi)
        return out

    def backtrack(k: int):
        if k == len(order):
            yield dict(mapping)
            return
        pi = order[k]
        for mi in candidates(pi):
            mapping[pi] = mi
            used.add(mi)
            yield from backtrack(k + 1)
            del mapping[pi]
            used.discard(mi)

    yield from backtrack(0)


def find_embedding(pattern: PatternGraph, mol: Molecule) -> dict[int, int] | None:
    for emb in enumerate_embeddings(pattern, mol):
        return emb
    return None


def subgraph_match(pattern: PatternGraph, mol: Molecule) -> bool:
    return find_embedding(pattern, mol) is not None


# ---------------------------------------------------------------------------
# canonical serialization


def _refine(mol: Molecule, ranks: list[int]) -> list[int]:
    n = len(ranks)
    adj = {i: [(b, nb) for nb, b in mol.neighbors(i)] for i in range(n)}
    while True:
        keys = [
            (ranks[i], tuple(sorted((o, ranks[nb]) for o, nb in adj[i])))
            for i in range(n)
        ]
        uniq = {k: r for r, k in enumerate(sorted(set(keys)))}
        new = [uniq[k] for k in keys]
        if new == ranks:
            return ranks
        ranks = new


def _initial_ranks(mol: Molecule) -> list[int]:
    keys = [
        (a.symbol, a.aromatic, a.charge, a.degree, a.wildcard, a.map_num or 0)
        for a in mol.atoms
    ]
    uniq = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [uniq[k] for k in keys]


def _atom_token(a: Atom) -> str:
    sym = a.symbol.lower() if a.aromatic else a.symbol
    needs_bracket = (
        a.charge != 0
        or a.map_num is not None
        or a.wildcard
        or a.symbol not in _ORGANIC
    )
    if a.wildcard:
        body = "*"
    else:
        body = sym
    if not needs_bracket:
        return body
    if a.charge > 0:
        body += "+" if a.charge == 1 else f"+{a.charge}"
    elif a.charge < 0:
        body += "-" if a.charge == -1 else f"-{-a.charge}"
    if a.map_num is not None:
        body += f":{a.map_num}"
    return f"[{body}]"


def _bond_token(order: int, a: Atom, b: Atom) -> str:
    if order == SINGLE:
        return "-" if (a.aromatic and b.aromatic) else ""
    if order == AROMATIC:
        return "" if (a.aromatic and b.aromatic) else ":"
    return _BOND_SYMBOL[order]


def _write_with_ranks(mol: Molecule, ranks: list[int]) -> str:
    n = len(mol.atoms)
    order_of = sorted(range(n), key=lambda i: ranks[i])
    bond_order = {}
    for b in mol.bonds:
        bond_order[(b.i, b.j)] = b.order
        bond_order[(b.j, b.i)] = b.order
    adj = {i: sorted((nb for nb, _ in mol.neighbors(i)), key=lambda x: ranks[x]) for i in range(n)}
    visited: set[int] = set()
    emitted: set[tuple[int, int]] = set()
    ring_num = [0]
    open_rings: dict[tuple[int, int], int] = {}
    ring_marks: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n)}

    # pre-pass: find ring-closure bonds via DFS tree
    def assign_rings(root: int):
        stack = [(root, -1)]
        seen = {root}
        tree: set[tuple[int, int]] = set()
        while stack:
            cur, parent = stack.pop()
            for nb in adj[cur]:
                if nb == parent:
                    continue
                if nb in seen:
                    key = (min(cur, nb), max(cur, nb))
                    if key not in tree and key not in open_rings:
                        ring_num[0] += 1
                        open_rings[key] = ring_num[0]
                else:
                    seen.add(nb)
                    tree.add((min(cur, nb), max(cur, nb)))
                    stack.append((nb, cur))
        return seen

    def write_atom(i: int, parent: int) -> str:
        visited.add(i)
        s = _atom_token(mol.atoms[i])
        for key, num in open_rings.items():
            if i in key:
                a, b = key
                other = b if i == a else a
                tok = _bond_token(bond_order[key[0], key[1]], mol.atoms[a], mol.atoms[b])
                # bond token goes on the first occurrence only
                first = (i, other) not in emitted and (other, i) not in emitted
                s += (tok if first else "") + (str(num) if num < 10 else f"%{num:02d}")
                emitted.add((i, other))
        children = [
            nb for nb in adj[i]
            if nb != parent
            and (min(i, nb), max(i, nb)) not in open_rings
            and nb not in visited
        ]
        parts = []
        for nb in children:
            tok = _bond_token(bond_order[(i, nb)], mol.atoms[i], mol.atoms[nb])
            parts.append(tok + write_atom(nb, i))
        if not parts:
            return s
        return s + "".join(f"({p})" for p in parts[:-1]) + parts[-1]

    fragments = []
    for root in order_of:
        if root in visited:
            continue
        assign_rings(root)
        fragments.append(write_atom(root, -1))
    return ".".join(fragments)


def canonical_smiles(mol: Molecule) -> str:
    """Deterministic canonical serialization.

    Iterative neighborhood refinement breaks most ties; remaining orbits
    are resolved by individualizing each candidate in the lowest tied
    class and taking the lexicographically smallest completion, so
    isomorphic graphs serialize identically.
    """
    ranks = _refine(mol, _initial_ranks(mol))

    def complete(rk: list[int]) -> str:
        counts: dict[int, list[int]] = {}
        for i, r in enumerate(rk):
            counts.setdefault(r, []).append(i)
        tied = sorted(r for r, idxs in counts.items() if len(idxs) > 1)
        if not tied:
            return _write_with_ranks(mol, rk)
        best = None
        for i in counts[tied[0]]:
            rk2 = [r if r < rk[i] else r + 1 for r in rk]
            rk2[i] = rk[i]
            s = complete(_refine(mol, rk2))
            if best is None or s < best:
                best = s
        return best

    return complete(ranks)


def isomorphic(a: Molecule, b: Molecule) -> bool:
    return canonical_smiles(a) == canonical_smiles(b)


# ---------------------------------------------------------------------------
# template application


def _rewrite_one(template: ReactionTemplate, mol: Molecule, emb: dict[int, int]) -> list[Molecule]:
    pp = template.product_pattern
    # product map number -> molecule atom index
    map_to_mol = {
        a.map_num: emb[i] for i, a in enumerate(pp.atoms) if a.map_num is not None
    }
    reactant_maps: set[int] = set()
    for rp in template.reactant_patterns:
        reactant_maps |= rp.map_numbers

    keep = [True] * len(mol.atoms)
    for i, a in enumerate(pp.atoms):
        # matched atoms that do not survive on the reactant side vanish
        if a.map_num is None or a.map_num not in reactant_maps:
            keep[emb[i]] = False

    removed_bonds = set()
    for b in pp.bonds:
        mi, mj = emb[b.i], emb[b.j]
        removed_bonds.add((min(mi, mj), max(mi, mj)))

    new_atoms: list[Atom] = []
    old_to_new: dict[int, int] = {}
    for i, a in enumerate(mol.atoms):
        if keep[i]:
            old_to_new[i] = len(new_atoms)
            new_atoms.append(a)
    new_bonds: list[tuple[int, int, int]] = []
    bond_keys: set[tuple[int, int]] = set()

    def add_bond(i: int, j: int, order: int):
        key = (min(i, j), max(i, j))
        if key in bond_keys:
            return
        bond_keys.add(key)
        new_bonds.append((key[0], key[1], order))

    for b in mol.bonds:
        key = (min(b.i, b.j), max(b.i, b.j))
        if key in removed_bonds:
            continue
        if keep[b.i] and keep[b.j]:
            add_bond(old_to_new[b.i], old_to_new[b.j], b.order)

    for rp in template.reactant_patterns:
        local: dict[int, int] = {}
        for i, a in enumerate(rp.atoms):
            if a.map_num is not None:
                mol_idx = map_to_mol[a.map_num]
                local[i] = old_to_new[mol_idx]
            else:
                if a.wildcard:
                    raise RewriteError(
                        "introduced wildcard atom cannot be materialized"
                    )
                local[i] = len(new_atoms)
                new_atoms.append(
                    Atom(symbol=a.symbol, charge=a.charge, aromatic=a.aromatic)
                )
        for b in rp.bonds:
            add_bond(local[b.i], local[b.j], b.order)

    if not new_atoms:
        raise RewriteError("rewrite removed every atom")

    degree = [0] * len(new_atoms)
    for i, j, _ in new_bonds:
        degree[i] += 1
        degree[j] += 1
    atoms = tuple(replace(a, degree=degree[i], map_num=None, wildcard=False)
                  for i, a in enumerate(new_atoms))

    # split into connected components, one molecule each
    adj: dict[int, list[int]] = {i: [] for i in range(len(atoms))}
    for i, j, _ in new_bonds:
        adj[i].append(j)
        adj[j].append(i)
    comp = [-1] * len(atoms)
    n_comp = 0
    for start in range(len(atoms)):
        if comp[start] != -1:
            continue
        stack = [start]
        comp[start] = n_comp
        while stack:
            cur = stack.pop()
            for nb in adj[cur]:
                if comp[nb] == -1:
                    comp[nb] = n_comp
                    stack.append(nb)
        n_comp += 1
    out = []
    for c in range(n_comp):
        idxs = [i for i in range(len(atoms)) if comp[i] == c]
        remap = {old: new for new, old in enumerate(idxs)}
        catoms = tuple(atoms[i] for i in idxs)
        cbonds = tuple(
            Bond(remap[i], remap[j], o)
            for i, j, o in new_bonds
            if comp[i] == c
        )
        out.append(Molecule(atoms=catoms, bonds=cbonds))
    return out


def apply_template(template: ReactionTemplate, mol: Molecule) -> list[list[Molecule]]:
    """All distinct reactant sets from applying the template to a molecule.

    One candidate set per embedding of the product pattern; sets whose
    canonical forms coincide are deduplicated.  Embeddings that cannot be
    rewritten (RewriteError) are skipped.
    """
    results: list[list[Molecule]] = []
    seen: set[tuple[str, ...]] = set()
    for emb in enumerate_embeddings(template.product_pattern, mol):
        try:
            reactants = _rewrite_one(template, mol, emb)
        except RewriteError:
            continue
        key = tuple(sorted(canonical_smiles(m) for m in reactants))
        if key in seen:
            continue
        seen.add(key)
        results.append(reactants)
    return results
