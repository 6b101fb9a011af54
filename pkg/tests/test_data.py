"""Corpus formats, stratified splitting, and synthetic generation."""

from collections import Counter

import numpy as np
import pytest

from retrohop import data as dt
from retrohop.chemgraph import parse_smiles, subgraph_match

GOOD_LINES = "\n".join(
    [
        "r1\tCCO>>CC=O\t0",
        "r2\tCC.O>>CCO\t1\ttrain",
        "r3\tCCN>CC>CC#N\t2\ttest",
    ]
)


class TestReactionIO:
    def test_load_basic(self):
        records, rejects = dt.load_reactions(GOOD_LINES)
        assert len(records) == 3 and len(rejects) == 0
        assert records[0].product == "CC=O"
        assert records[0].split is None
        assert records[1].reactants == ("CC", "O")
        assert records[1].split == "train"
        assert records[2].reagents == ("CC",)
        assert records[2].template_id == 2

    def test_roundtrip(self):
        records, _ = dt.load_reactions(GOOD_LINES)
        text = dt.write_reactions(records)
        again, _ = dt.load_reactions(text)
        assert again == records

    @pytest.mark.parametrize(
        "line,fragment",
        [
            ("r1\tCCO>>CC=O", "3 or 4"),
            ("r1\tCCO>CC=O\t0", "two '>'"),
            ("r1\tCCO>>CC=O\tx", "not an integer"),
            ("r1\tCCO>>CC=O\t0\tholdout", "unknown split"),
            ("r1\tC(C>>CC\t0", "r"),
            ("r1\tCCO>>\t0", "empty product"),
        ],
    )
    def test_strict_mode_raises_with_line_number(self, line, fragment):
        with pytest.raises(dt.FormatError) as exc:
            dt.load_reactions("r0\tCC>>CC\t0\n" + line)
        assert exc.value.line_no == 2

    def test_lenient_mode_collects_rejects(self):
        text = GOOD_LINES + "\nbad line without tabs\nr9\tCCO>>CC=O\t7"
        records, rejects = dt.load_reactions(text, strict=False)
        assert len(records) == 4
        assert len(rejects) == 1
        assert "line 4" in rejects.summary()


class TestTemplateIO:
    TEXT = "\n".join(
        [
            "0\t[C:1]=[O:2]>>[C:1][O:2]\t5",
            "1\t[C:1][N:2]>>[C:1].[N:2]\t2",
            "2\t[C:1]=[O:2]>>[C:1][O:2]\t3",
        ]
    )

    def test_duplicate_patterns_collapse(self):
        templates, remap, rejects = dt.load_templates(self.TEXT)
        assert len(templates) == 2 and len(rejects) == 0
        assert remap == {0: 0, 1: 1, 2: 0}
        assert templates[0].train_count == 8  # 5 + 3 merged

    def test_duplicate_id_rejected(self):
        with pytest.raises(dt.FormatError):
            dt.load_templates("0\t[C:1]=[O:2]>>[C:1][O:2]\t1\n0\t[C:1][N:2]>>[C:1].[N:2]\t1")

    def test_roundtrip(self):
        templates, _, _ = dt.load_templates(self.TEXT)
        text = dt.write_templates(templates)
        again, _, _ = dt.load_templates(text)
        assert [t.id for t in again] == [t.id for t in templates]
        assert [t.train_count for t in again] == [t.train_count for t in templates]


def _records_for(template_counts: dict[int, int]) -> list[dt.ReactionRecord]:
    records = []
    serial = 0
    for tid, n in template_counts.items():
        for _ in range(n):
            records.append(
                dt.ReactionRecord(
                    id=f"r{serial}", reactants=("CC",), reagents=(),
                    product="CCO", template_id=tid,
                )
            )
            serial += 1
    return records


class TestStratifiedSplit:
    def test_group_of_ten(self):
        out = dt.stratified_split(_records_for({0: 10}), seed=1)
        c = Counter(r.split for r in out)
        assert c == {"train": 8, "valid": 1, "test": 1}

    def test_group_of_twenty(self):
        out = dt.stratified_split(_records_for({0: 20}), seed=1)
        c = Counter(r.split for r in out)
        assert c == {"train": 16, "valid": 2, "test": 2}

    @pytest.mark.parametrize("n", [3, 5, 9])
    def test_small_groups_one_test_one_valid(self, n):
        out = dt.stratified_split(_records_for({0: n}), seed=2)
        c = Counter(r.split for r in out)
        assert c["test"] == 1 and c["valid"] == 1 and c["train"] == n - 2

    def test_pair_gives_one_test_one_train(self):
        out = dt.stratified_split(_records_for({0: 2}), seed=3)
        c = Counter(r.split for r in out)
        assert c == {"test": 1, "train": 1}

    def test_singleton_distribution(self):
        # lone samples land in train/valid/test at roughly 80/10/10
        c = Counter()
        for tid in range(600):
            out = dt.stratified_split(_records_for({tid: 1}), seed=0)
            c[out[0].split] += 1
        assert 0.7 < c["train"] / 600 < 0.9
        assert c["valid"] > 0 and c["test"] > 0

    def test_independent_of_record_order(self):
        records = _records_for({0: 7, 1: 12, 2: 2})
        a = dt.stratified_split(records, seed=5)
        b = dt.stratified_split(list(reversed(records)), seed=5)
        by_id_a = {r.id: r.split for r in a}
        by_id_b = {r.id: r.split for r in b}
        assert by_id_a == by_id_b

    def test_deterministic_under_seed(self):
        records = _records_for({0: 15, 1: 4})
        assert dt.stratified_split(records, 7) == dt.stratified_split(records, 7)


class TestBucketsAndDropping:
    def test_frequency_buckets(self):
        from retrohop.chemgraph import parse_template

        templates = [
            parse_template("[C:1]=[O:2]>>[C:1][O:2]", template_id=i, train_count=c)
            for i, c in enumerate([0, 1, 2, 3, 10, 11, 50, 51, 400])
        ]
        got = dt.frequency_buckets(templates)
        assert [got[i] for i in range(9)] == [
            "0", "1", "2", "3-10", "3-10", "11-50", "11-50", ">50", ">50",
        ]

    def test_drop_singletons(self):
        records = dt.stratified_split(_records_for({0: 12, 1: 3}), seed=0)
        # a true singleton: one train record, no test exposure
        records = records + [
            dt.ReactionRecord(
                id="z0", reactants=("C",), reagents=(), product="C",
                template_id=2, split="train",
            )
        ]
        counts = dt.train_counts(records)
        assert counts[1] == 1 and counts[2] == 1
        kept = dt.drop_singleton_train_templates(records)
        kept_counts = dt.train_counts(kept)
        assert kept_counts[0] == counts[0]
        # singleton present in test is retained; one absent from test is dropped
        assert kept_counts[1] == 1
        assert kept_counts[2] == 0

    def test_drop_singletons_noop_without_singletons(self):
        records = dt.stratified_split(_records_for({0: 12, 1: 20}), seed=0)
        assert dt.drop_singleton_train_templates(records) == records


class TestSynthCorpus:
    CFG = dt.SynthConfig(n_templates=40, n_reactions=150, seed=13)

    def test_labels_applicable_by_construction(self):
        records, templates = dt.synth_corpus(self.CFG)
        by_id = {t.id: t for t in templates}
        for r in records[:40]:
            mol = parse_smiles(r.product)
            assert subgraph_match(by_id[r.template_id].product_pattern, mol)

    def test_byte_identical_under_seed(self):
        a_r, a_t = dt.synth_corpus(self.CFG)
        b_r, b_t = dt.synth_corpus(self.CFG)
        assert dt.write_reactions(a_r) == dt.write_reactions(b_r)
        assert dt.write_templates(a_t) == dt.write_templates(b_t)
        c_r, _ = dt.synth_corpus(dt.SynthConfig(n_templates=40, n_reactions=150, seed=14))
        assert dt.write_reactions(a_r) != dt.write_reactions(c_r)

    def test_long_tail_shape(self):
        records, templates = dt.synth_corpus(
            dt.SynthConfig(n_templates=100, n_reactions=400, seed=3)
        )
        assert len(templates) == 100
        rare = sum(t.train_count <= 1 for t in templates)
        assert rare >= 0.3 * len(templates)

    def test_zero_shot_templates_only_in_test(self):
        records, templates = dt.synth_corpus(self.CFG)
        n_zero = round(self.CFG.zero_shot_fraction * self.CFG.n_templates)
        zero_ids = set(range(self.CFG.n_templates - n_zero, self.CFG.n_templates))
        for r in records:
            if r.template_id in zero_ids:
                assert r.split == "test"
        # and they are represented
        seen = {r.template_id for r in records if r.template_id in zero_ids}
        assert seen == zero_ids

    def test_reactions_roundtrip_through_loader(self):
        records, _ = dt.synth_corpus(self.CFG)
        text = dt.write_reactions(records)
        loaded, rejects = dt.load_reactions(text)
        assert len(rejects) == 0
        assert len(loaded) == len(records)

    def test_split_subsets_requires_assignment(self):
        with pytest.raises(ValueError):
            dt.split_subsets(_records_for({0: 1}))
