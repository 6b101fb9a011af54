"""End-to-end acceptance checks for the whole package.

Each test asserts one observable guarantee of the system: algebraic
special cases of the association model, energy descent, end-to-end
gradients, screen soundness and speed, zero-shot and rare-template
behavior on a long-tailed synthetic corpus, loss identities, the
speed/accuracy benchmark, and byte-level reproducibility of the
command-line pipeline.
"""

import math
import time

import numpy as np
import pytest

from retrohop import data as dt
from retrohop import evaluation as ev
from retrohop import model as md
from retrohop import numkernel as nk
from retrohop.chemgraph import parse_smiles, parse_template, subgraph_match
from retrohop.cli import dispatch
from retrohop.fingerprints import path_fp
from retrohop.screen import build_applicability_matrix, fpf_check

TEMPLATE_TEXTS = [
    "[C:1]=[O:2]>>[C:1][O:2]",
    "[C:1][O:2]>>[C:1].[O:2]",
    "[C:1][N:2]>>[C:1].[N:2]",
    "[C:1]#[N:2]>>[C:1][N:2]",
    "[C:1]=[C:2]>>[C:1][C:2]",
    "[C:1][Cl:2]>>[C:1].[Cl:2]",
    "[N:1]=[O:2]>>[N:1][O:2]",
]

MOLECULES = ["CC=O", "CCO", "CC#N", "CCN", "CCCl", "C=CC", "N=O", "CC(C)=O"]


def _templates(count=7):
    return [
        parse_template(t, template_id=i, train_count=i)
        for i, t in enumerate(TEMPLATE_TEXTS[:count])
    ]


# ---------------------------------------------------------------------------
# 1. special-case equivalence


def _identity_model(size, templates, seed):
    """One layer, one head, one update, no encoders, beta=1, identity
    association maps, no normalization: the model must reduce to a plain
    softmax over fingerprint dot products."""
    cfg = md.MhnConfig(
        molecule_fp=md.MoleculeFpConfig(kind="morgan", size=size, radius=1),
        template_fps=(md.TemplateFpConfig(kind="morgan", size=size, radius=1),),
        hopfield=md.HopfieldConfig(d=size, beta=1.0),
        seed=seed,
    )
    m = md.MhnModel(cfg, templates)
    m.params["hop0.Wm"].value.data[:] = np.eye(size, dtype=np.float32)
    m.params["hop0.Wt"].value.data[:] = np.eye(size, dtype=np.float32)
    return m


class TestSpecialCaseEquivalence:
    def test_identity_configuration_is_a_softmax_classifier(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(42)
        for draw in range(100):
            size = int(rng.choice([32, 64, 128]))
            k = int(rng.integers(3, 8))
            seed = int(rng.integers(0, 10_000))
            templates = _templates(k)
            chosen = rng.choice(len(MOLECULES), size=int(rng.integers(1, 5)), replace=False)
            mols = [parse_smiles(MOLECULES[i]) for i in chosen]
            m = _identity_model(size, templates, seed)
            fps = m.featurizer.matrix(mols)
            got = m.forward_batch(fps)
            want = nk.softmax(m.template_features[0].T @ fps)
            assert np.max(np.abs(got - want)) < 1e-6, f"draw {draw}"
        assert time.perf_counter() - t0 < 60.0

    def test_one_hot_templates_with_linear_encoder_is_affine_softmax(self):
        """With one-hot template features and a single linear (bias-affine)
        template encoder, the output is softmax((W + b 1^T)^T h)."""
        templates = _templates()
        k, size = len(templates), 64
        cfg = md.MhnConfig(
            molecule_fp=md.MoleculeFpConfig(kind="morgan", size=size, radius=1),
            template_fps=(md.TemplateFpConfig(kind="morgan", size=size, radius=1),),
            template_encoders=(
                md.EncoderConfig(n_layers=1, layer_dim=size, activation="none"),
            ),
            hopfield=md.HopfieldConfig(d=size, beta=1.0),
            seed=3,
        )
        m = md.MhnModel(cfg, templates, template_features=[np.eye(k)])
        m.params["hop0.Wm"].value.data[:] = np.eye(size, dtype=np.float32)
        m.params["hop0.Wt"].value.data[:] = np.eye(size, dtype=np.float32)
        fps = m.featurizer.matrix([parse_smiles(s) for s in MOLECULES[:4]])
        got = m.forward_batch(fps)
        W = np.asarray(m.params["tpl_enc0.w0"].value.data, dtype=np.float64)
        b = np.asarray(m.params["tpl_enc0.b0"].value.data, dtype=np.float64)
        want = nk.softmax((W + b).T @ fps)
        assert np.max(np.abs(got - want)) < 1e-6


# ---------------------------------------------------------------------------
# 2. energy descent


class TestEnergyDescent:
    def test_iterated_updates_never_increase_energy(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)
        for _ in range(1000):
            d = int(rng.integers(2, 33))
            k = int(rng.integers(1, 65))
            X = rng.normal(scale=float(rng.uniform(0.3, 2.0)), size=(d, k))
            state = rng.normal(scale=2.0, size=d)
            beta = float(rng.uniform(0.02, 5.0))
            e_prev = md.hopfield_energy(state, X, beta)
            for _ in range(5):
                state, _ = md.hopfield_update(state, X, beta)
                e = md.hopfield_energy(state, X, beta)
                assert e <= e_prev + 1e-9
                e_prev = e
        assert time.perf_counter() - t0 < 60.0


# ---------------------------------------------------------------------------
# 3. end-to-end gradients


class TestGradientCorrectness:
    def test_toy_stacked_model_grad_check(self):
        t0 = time.perf_counter()
        cfg = md.MhnConfig(
            molecule_fp=md.MoleculeFpConfig(kind="morgan", size=32, radius=1),
            molecule_encoder=md.EncoderConfig(
                n_layers=1, layer_dim=8, activation="selu", dropout=0.1
            ),
            template_fps=(
                md.TemplateFpConfig(
                    kind="morgan", size=32, radius=1, pooling="lgamma", random_threshold=2
                ),
                md.TemplateFpConfig(kind="path", size=32, counted=False, random_threshold=2),
            ),
            template_encoders=(
                md.EncoderConfig(n_layers=1, layer_dim=8, activation="tanh"),
                md.EncoderConfig(n_layers=1, layer_dim=8, activation="tanh"),
            ),
            hopfield=md.HopfieldConfig(
                d=8, beta=0.5, normalize_state=True, normalize_memory=True
            ),
            stacking="stacked-2",
            seed=11,
        )
        m = md.MhnModel(cfg, _templates())
        assert m.config.hopfield.d == 8 and m.K == 7
        mols = [parse_smiles(s) for s in ["CC=O", "CCO", "CC#N", "CCN"]]
        fps = m.featurizer.matrix(mols)
        labels = np.array([0, 1, 3, 2])

        def closure():
            return m.loss_and_grad(fps, labels, drop_key=(1, 0, 0))

        # h chosen where truncation (h^2) and 32-bit rounding balance
        err = nk.grad_check(closure, m.params, h=3e-4, max_coords_per_param=6)
        assert err < 1e-4
        assert time.perf_counter() - t0 < 60.0


# ---------------------------------------------------------------------------
# 4 + 5. substructure screen: soundness and speed


@pytest.fixture(scope="module")
def screen_corpus():
    records, templates = dt.synth_corpus(
        dt.SynthConfig(n_templates=500, n_reactions=600, seed=3)
    )
    mols, seen = [], set()
    for r in records:
        if r.product not in seen:
            seen.add(r.product)
            mols.append(parse_smiles(r.product))
        if len(mols) == 200:
            break
    assert len(mols) == 200 and len(templates) == 500
    return mols, templates


class TestScreenSoundness:
    def test_no_false_negatives_over_1e5_pairs(self, screen_corpus):
        t0 = time.perf_counter()
        mols, templates = screen_corpus
        assert len(mols) * len(templates) >= 100_000
        tbits = [(t, path_fp(t.product_pattern, 2048)) for t in templates]
        matches = 0
        for m in mols:
            mbits = path_fp(m, 2048)
            for t, bits in tbits:
                if subgraph_match(t.product_pattern, m):
                    matches += 1
                    assert fpf_check(bits, mbits), (
                        f"screen rejected a true match: template {t.id}"
                    )
        assert matches > 0  # the oracle actually exercised positive pairs
        assert time.perf_counter() - t0 < 300.0


class TestScreenSpeedup:
    def test_screen_at_least_5x_faster_with_identical_matrix(self, screen_corpus):
        mols, templates = screen_corpus
        t0 = time.perf_counter()
        fast = build_applicability_matrix(
            templates, mols, exact=True, use_screen=True, width=2048
        )
        t_fast = time.perf_counter() - t0
        t0 = time.perf_counter()
        slow = build_applicability_matrix(
            templates, mols, exact=True, use_screen=False, width=2048
        )
        t_slow = time.perf_counter() - t0
        assert fast.rows == slow.rows
        assert t_slow >= 5.0 * t_fast
        assert t_fast + t_slow < 600.0


# ---------------------------------------------------------------------------
# 6 + 7. long-tailed synthetic corpus: zero-shot and rare-template behavior


def _build_mhn(templates):
    cfg = md.MhnConfig(
        molecule_fp=md.MoleculeFpConfig(kind="path", size=1024, counted=False),
        template_fps=(md.TemplateFpConfig(kind="path", size=1024, counted=False),),
        hopfield=md.HopfieldConfig(
            d=128, beta=0.2, normalize_state=True, normalize_memory=True
        ),
        seed=0,
    )
    return md.MhnModel(cfg, templates)


def _build_dnn(templates, train_records):
    feat = md.MoleculeFeaturizer(md.MoleculeFpConfig(kind="path", size=1024, counted=False))
    return md.DnnModel(
        feat,
        md.EncoderConfig(n_layers=1, layer_dim=64, activation="relu"),
        [t.id for t in templates],
        sorted({r.template_id for r in train_records}),
        seed=0,
    )


def _fit(m, train_records, valid_records):
    fps = m.featurizer.matrix([r.product_mol() for r in train_records])
    vfps = m.featurizer.matrix([r.product_mol() for r in valid_records])
    md.train(
        m,
        fps,
        np.array([r.template_id for r in train_records]),
        vfps,
        np.array([r.template_id for r in valid_records]),
        md.TrainConfig(epochs=4, batch_size=32, lr=3e-3, weight_decay=1e-2, seed=0),
    )
    return m


@pytest.fixture(scope="module")
def longtail():
    records, templates = dt.synth_corpus(
        dt.SynthConfig(n_templates=200, n_reactions=700, max_decorations=6, seed=0)
    )
    subsets = dt.split_subsets(records)
    mhn = _fit(_build_mhn(templates), subsets["train"], subsets["valid"])
    dnn = _fit(_build_dnn(templates, subsets["train"]), subsets["train"], subsets["valid"])
    return records, templates, subsets, mhn, dnn


class TestZeroShotAdvantage:
    def test_corpus_is_long_tailed(self, longtail):
        _, templates, subsets, _, _ = longtail
        assert len(templates) >= 100
        rare = sum(1 for t in templates if t.train_count <= 1)
        assert rare / len(templates) >= 0.30
        zero = sum(1 for t in templates if t.train_count == 0)
        assert zero / len(templates) >= 0.10

    def test_mhn_beats_dnn_and_pop_fpf_on_zero_shot(self, longtail):
        t0 = time.perf_counter()
        _, templates, subsets, mhn, dnn = longtail
        test = subsets["test"]
        zero_ids = {t.id for t in templates if t.train_count == 0}
        zero_recs = [r for r in test if r.template_id in zero_ids]
        assert zero_recs

        mhn_zero = ev.template_topk(ev.model_rankings(mhn, zero_recs), 10)
        dnn_zero = ev.template_topk(ev.model_rankings(dnn, zero_recs), 10)
        popfpf_zero = ev.template_topk(
            ev.baseline_rankings(templates, zero_recs, mode="pop-fpf", width=1024), 10
        )
        mhn_all = ev.template_topk(ev.model_rankings(mhn, test), 10)
        dnn_all = ev.template_topk(ev.model_rankings(dnn, test), 10)

        assert dnn_zero == 0.0  # never-trained classes rank behind all trained ones
        assert mhn_zero > dnn_zero
        assert mhn_zero > popfpf_zero
        assert mhn_all >= dnn_all
        assert time.perf_counter() - t0 < 900.0


class TestRareTemplateAblation:
    def test_dropping_singletons_hurts_mhn_but_not_dnn(self, longtail):
        t0 = time.perf_counter()
        records, templates, subsets, mhn_full, dnn_full = longtail
        valid = subsets["valid"]
        kept = dt.drop_singleton_train_templates(records)
        assert len(kept) < len(records)
        kept_train = dt.split_subsets(kept)["train"]

        mhn_drop = _fit(_build_mhn(templates), kept_train, valid)
        dnn_drop = _fit(_build_dnn(templates, kept_train), kept_train, valid)

        mhn_before = ev.template_topk(ev.model_rankings(mhn_full, valid), 10)
        mhn_after = ev.template_topk(ev.model_rankings(mhn_drop, valid), 10)
        dnn_before = ev.template_topk(ev.model_rankings(dnn_full, valid), 10)
        dnn_after = ev.template_topk(ev.model_rankings(dnn_drop, valid), 10)

        assert mhn_after < mhn_before
        assert dnn_after >= dnn_before
        assert time.perf_counter() - t0 < 1800.0


# ---------------------------------------------------------------------------
# 8. loss identities


class TestLossIdentities:
    def test_one_hot_label_retrieval_equals_cross_entropy(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            n = int(rng.integers(2, 40))
            p = rng.dirichlet(np.ones(n))
            label = int(rng.integers(0, n))
            L = md.LabelMatrix.one_hot(label, n)
            assert abs(md.loss_label_retrieval(p, L) - md.loss_ce(p, label)) <= 1e-9

    def test_lgamma_pool_worked_examples(self):
        a = md.lgamma_pool([np.array([1.0]), np.array([1.0])])[0]
        b = md.lgamma_pool([np.array([2.0]), np.array([0.0])])[0]
        assert abs(a - math.log(6.0)) < 1e-6  # 1.791759...
        assert abs(b - math.log(3.0)) < 1e-6  # 1.098612...


# ---------------------------------------------------------------------------
# 9. speed/accuracy trade-off harness


class TestBenchTradeoff:
    def test_throughput_monotone_and_screen_cuts_executions(self):
        records, templates = dt.synth_corpus(
            dt.SynthConfig(n_templates=60, n_reactions=250, seed=17)
        )
        recs = records[:80]
        cfg = md.MhnConfig(
            molecule_fp=md.MoleculeFpConfig(size=256, radius=1),
            template_fps=(md.TemplateFpConfig(size=256, radius=1),),
            hopfield=md.HopfieldConfig(d=32, beta=0.1),
            seed=0,
        )
        m = md.MhnModel(cfg, templates)
        budgets = (1, 5, 20, 50)
        screened = ev.bench_inference(m, recs, templates, budgets=budgets, repeats=3)
        unscreened = ev.bench_inference(
            m, recs, templates, budgets=budgets, repeats=3, use_screen=False
        )
        # larger candidate budgets cannot get faster (5 % timing slack)
        thr = [row.mols_per_second for row in screened.rows]
        for a, b in zip(thr, thr[1:]):
            assert b <= a * 1.05
        ex = [row.mean_executed for row in screened.rows]
        assert ex == sorted(ex)
        # the screen reduces exact executions at every budget
        for s, n in zip(screened.rows, unscreened.rows):
            assert s.mean_executed < n.mean_executed


# ---------------------------------------------------------------------------
# 10. reproducibility of the seeded pipeline


class TestPipelineReproducibility:
    SMALL = [
        "--set", "fingerprint_size=256",
        "--set", "fingerprint_radius=1",
        "--set", "encoder_layers=0",
        "--set", "template_encoder_layers=0",
        "--set", "association_dim=32",
        "--set", "beta=0.2",
        "--set", "epochs=5",
        "--set", "batch_size=16",
        "--set", "dropout=0",
        "--set", "lr=0.003",
    ]

    def test_two_runs_emit_byte_identical_metrics(self, tmp_path):
        outputs = []
        for tag in ("one", "two"):
            base = tmp_path / tag
            base.mkdir()
            reactions = base / "reactions.tsv"
            templates = base / "templates.tsv"
            split = base / "split.tsv"
            model = base / "model.ckpt"
            metrics = base / "metrics.csv"
            assert dispatch(
                ["--seed", "11", "synth",
                 "--reactions-out", str(reactions), "--templates-out", str(templates),
                 "--n-templates", "40", "--n-reactions", "160"]
            ) == 0
            assert dispatch(
                ["--seed", "11", "split", "--reactions", str(reactions), "--out", str(split)]
            ) == 0
            assert dispatch(
                ["--seed", "11", "--workers", "1", *self.SMALL, "train",
                 "--reactions", str(split), "--templates", str(templates),
                 "--model-out", str(model)]
            ) == 0
            assert dispatch(
                ["--seed", "11", "--workers", "1", *self.SMALL, "evaluate",
                 "--model", str(model), "--reactions", str(split),
                 "--templates", str(templates), "--k", "1,10", "--out", str(metrics)]
            ) == 0
            outputs.append(metrics.read_bytes())
        assert outputs[0] == outputs[1]
