"""Molecule and pattern fingerprints.

Three families:

* circular (Morgan-style) fingerprints, counted or binary, folded or
  unfolded;
* path fingerprints hashed into a fixed-width bitset, used as the
  substructure screen;
* a mixed counted representation concatenating several unfolded
  families, variance-selected on a training set and log(1+x)-scaled.

All hashing uses a fixed 64-bit digest of a canonical feature string, so
fingerprints are stable across processes and platforms.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .chemgraph import Molecule

MXFP_FAMILIES = ("circular", "path", "atompair")


class EmptySelection(ValueError):
    """A fingerprint family contributed zero features during selection."""


class WidthMismatch(ValueError):
    """Bit fingerprints of different widths were combined."""


@dataclass(frozen=True)
class DenseFingerprint:
    values: np.ndarray
    kind: str
    length: int

    def __post_init__(self):
        assert len(self.values) == self.length


@dataclass(frozen=True)
class BitFingerprint:
    """Fixed-width bitset stored as a single arbitrary-precision integer."""

    bits: int
    width: int

    def __post_init__(self):
        if self.width & (self.width - 1) != 0 or self.width <= 0:
            raise ValueError("width must be a power of two")

    def bit_indices(self) -> list[int]:
        out, b, i = [], self.bits, 0
        while b:
            if b & 1:
                out.append(i)
            b >>= 1
            i += 1
        return out


def stable_hash(text: str) -> int:
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _atom_invariant(graph: Molecule, idx: int) -> str:
    a = graph.atoms[idx]
    if a.wildcard:
        return "*"
    return f"{a.symbol}|{a.charge}|{int(a.aromatic)}|{a.degree}"


def circular_identifiers(graph: Molecule, radius: int) -> Counter:
    """Counted atom-environment identifiers for radii 0..radius.

    Each environment is encoded canonically (sorted neighbor
    contributions), so the result is invariant to atom input order.
    Wildcard atoms contribute no environments.
    """
    n = len(graph.atoms)
    adj = {i: graph.neighbors(i) for i in range(n)}
    real = [not graph.atoms[i].wildcard for i in range(n)]
    ids = Counter()
    current = {}
    for i in range(n):
        if real[i]:
            current[i] = stable_hash("A:" + _atom_invariant(graph, i))
            ids[current[i]] += 1
    for _ in range(radius):
        nxt = {}
        for i, prev in current.items():
            parts = sorted(
                f"{order}:{current[nb]}"
                for nb, order in adj[i]
                if nb in current
            )
            nxt[i] = stable_hash(f"E:{prev}|" + ",".join(parts))
        for h in nxt.values():
            ids[h] += 1
        current = nxt
    return ids


def morgan_fp(graph: Molecule, radius: int, size: int, counted: bool = True) -> DenseFingerprint:
    if radius < 0 or size < 1:
        raise ValueError("radius >= 0 and size >= 1 required")
    values = np.zeros(size, dtype=np.float64)
    for ident, count in circular_identifiers(graph, radius).items():
        values[ident % size] += count
    if not counted:
        values = (values > 0).astype(np.float64)
    return DenseFingerprint(values=values, kind="morgan", length=size)


def path_labels(graph: Molecule, max_length: int = 7) -> set[str]:
    """Canonical labels of all simple paths of 0..max_length bonds.

    A label is the element/charge/order sequence along the path, taking
    the lexicographic minimum of the two directions.  Paths through
    wildcard atoms are not generated.
    """
    n = len(graph.atoms)
    adj = {i: graph.neighbors(i) for i in range(n)}
    real = [not graph.atoms[i].wildcard for i in range(n)]

    def atom_label(i: int) -> str:
        a = graph.atoms[i]
        return f"{a.symbol}{'+' if a.charge > 0 else '-' if a.charge < 0 else ''}{'a' if a.aromatic else ''}"

    labels: set[str] = set()
    for i in range(n):
        if real[i]:
            labels.add(atom_label(i))

    def extend(path: list[int], parts: list[str]):
        if len(path) - 1 >= max_length:
            return
        last = path[-1]
        for nb, order in adj[last]:
            if nb in path or not real[nb]:
                continue
            new_parts = parts + [str(order), atom_label(nb)]
            forward = "|".join(new_parts)
            backward = "|".join(reversed(new_parts))
            labels.add(min(forward, backward))
            extend(path + [nb], new_parts)

    for i in range(n):
        if real[i]:
            extend([i], [atom_label(i)])
    return labels


def path_fp(graph: Molecule, width: int = 4096, max_length: int = 7) -> BitFingerprint:
    bits = 0
    for label in path_labels(graph, max_length):
        bits |= 1 << (stable_hash("P:" + label) % width)
    return BitFingerprint(bits=bits, width=width)


def atom_pair_identifiers(graph: Molecule, max_distance: int = 10) -> Counter:
    """Counted (element pair, topological distance) features."""
    n = len(graph.atoms)
    adj = {i: [nb for nb, _ in graph.neighbors(i)] for i in range(n)}
    real = [not graph.atoms[i].wildcard for i in range(n)]
    ids = Counter()
    for src in range(n):
        if not real[src]:
            continue
        dist = {src: 0}
        queue = deque([src])
        while queue:
            cur = queue.popleft()
            if dist[cur] >= max_distance:
                continue
            for nb in adj[cur]:
                if nb not in dist and real[nb]:
                    dist[nb] = dist[cur] + 1
                    queue.append(nb)
        for dst, d in dist.items():
            if dst <= src:
                continue
            a, b = sorted([graph.atoms[src].symbol, graph.atoms[dst].symbol])
            ids[stable_hash(f"AP:{a}|{b}|{d}")] += 1
    return ids


def unfolded_family(graph: Molecule, family: str) -> Counter:
    if family == "circular":
        return circular_identifiers(graph, radius=2)
    if family == "path":
        return Counter(stable_hash("P:" + lab) for lab in path_labels(graph, 7))
    if family == "atompair":
        return atom_pair_identifiers(graph)
    raise ValueError(f"unknown fingerprint family {family!r}")


@dataclass(frozen=True)
class MxfpSelector:
    """Per-family ordered feature ids retained after variance ranking.

    ``lengths`` are the configured per-family target sizes; a family with
    fewer observed features than its target is zero-padded at apply time
    so the output length stays fixed.
    """

    features: dict[str, tuple[int, ...]]
    variances: dict[str, tuple[float, ...]]
    lengths: dict[str, int]
    total_length: int = field(init=False, default=0)

    def __post_init__(self):
        for fam, var in self.variances.items():
            assert all(var[i] >= var[i + 1] for i in range(len(var) - 1)), fam
            assert len(self.features[fam]) <= self.lengths[fam]
        object.__setattr__(
            self, "total_length", sum(self.lengths.values())
        )


def mxfp_build(
    train_mols: list[Molecule],
    lengths: dict[str, int] | None = None,
) -> MxfpSelector:
    """Rank unfolded features per family by train-set variance of their
    binarized indicators; keep the highest-variance slice per family."""
    if not train_mols:
        raise ValueError("train_mols must be non-empty")
    lengths = lengths or {"circular": 512, "path": 512, "atompair": 256}
    n = len(train_mols)
    features: dict[str, tuple[int, ...]] = {}
    variances: dict[str, tuple[float, ...]] = {}
    for fam, target in lengths.items():
        presence: Counter = Counter()
        for mol in train_mols:
            for ident in unfolded_family(mol, fam):
                presence[ident] += 1
        if not presence:
            raise EmptySelection(f"family {fam!r} produced no features")
        scored = []
        for ident, cnt in presence.items():
            p = cnt / n
            scored.append((p * (1.0 - p), ident))
        # descending variance, ties broken by feature id for determinism
        scored.sort(key=lambda t: (-t[0], t[1]))
        kept = scored[:target]
        features[fam] = tuple(ident for _, ident in kept)
        variances[fam] = tuple(v for v, _ in kept)
    return MxfpSelector(features=features, variances=variances, lengths=dict(lengths))


def mxfp_apply(selector: MxfpSelector, mol: Molecule) -> DenseFingerprint:
    chunks = []
    for fam in sorted(selector.features):
        counts = unfolded_family(mol, fam)
        vec = np.zeros(selector.lengths[fam], dtype=np.float64)
        for pos, ident in enumerate(selector.features[fam]):
            c = counts.get(ident, 0)
            if c:
                vec[pos] = math.log1p(c)
        chunks.append(vec)
    values = np.concatenate(chunks)
    return DenseFingerprint(values=values, kind="mxfp", length=selector.total_length)
