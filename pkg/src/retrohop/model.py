"""Hopfield association model for template relevance.

A molecule encoder produces the state pattern, template encoders produce
the stored-pattern memory, and one or more Hopfield layers associate the
two.  The association vector over templates is the relevance prediction.
Also houses the losses, the training/pretraining loops, the feed-forward
baseline, and the checkpoint container.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numkernel as nk
from .chemgraph import Molecule, ReactionTemplate
from .fingerprints import (
    DenseFingerprint,
    MxfpSelector,
    morgan_fp,
    mxfp_apply,
    path_fp,
)

_lgamma = np.vectorize(math.lgamma, otypes=[np.float64])

CHECKPOINT_MAGIC = b"MHNR1"


class MemoryNotBuilt(RuntimeError):
    pass


class NegativeCount(ValueError):
    pass


class AllZeroLabels(ValueError):
    pass


class NoTrainingData(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 0
    layer_dim: int = 1024
    activation: str = "none"
    dropout: float = 0.0


@dataclass(frozen=True)
class MoleculeFpConfig:
    kind: str = "morgan"  # morgan | path | mxfp
    size: int = 4096
    radius: int = 2
    counted: bool = True


@dataclass(frozen=True)
class TemplateFpConfig:
    kind: str = "morgan"  # morgan | path | mxfp
    size: int = 4096
    radius: int = 2
    counted: bool = True
    pooling: str = "max"  # max | sum | mean | lgamma (binary mode: disjunction)
    random_threshold: int = -1  # -1 disables the frozen noise
    noise_sigma: float = 0.1  # fraction of the mean base-fingerprint norm


@dataclass(frozen=True)
class HopfieldConfig:
    d: int = 1024
    beta: float = 0.03
    heads: int = 1
    normalize_state: bool = False
    normalize_memory: bool = False
    association_activation: str = "none"
    n_updates: int = 1

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.d % self.heads != 0:
            raise ValueError("head count must divide association dimension")


@dataclass(frozen=True)
class MhnConfig:
    molecule_fp: MoleculeFpConfig = MoleculeFpConfig()
    molecule_encoder: EncoderConfig = EncoderConfig()
    template_fps: tuple[TemplateFpConfig, ...] = (TemplateFpConfig(),)
    template_encoders: tuple[EncoderConfig, ...] = (EncoderConfig(),)
    hopfield: HopfieldConfig = HopfieldConfig()
    stacking: str = "single"  # single | stacked-2
    seed: int = 0

    def __post_init__(self):
        n = 2 if self.stacking == "stacked-2" else 1
        if len(self.template_fps) != n or len(self.template_encoders) != n:
            raise ValueError(f"{self.stacking} needs {n} template fp/encoder configs")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    dropout_seed_offset: int = 0
    select_by: str = "val_ce"  # val_ce | val_top1
    pretrain_epochs: int = 0
    seed: int = 0


# ---------------------------------------------------------------------------
# core numeric operations


def lgamma_pool(columns: list[np.ndarray]) -> np.ndarray:
    """Set-pooling of count vectors via the log-gamma function.

    Per feature j with values x = (x_1j..x_nj):
    lgp(x) = logGamma(sum_i x_i + 2) - sum_i logGamma(x_i + 1).
    Distinguishes some equal-sum multisets, e.g. [1,1] vs [2,0].
    """
    stacked = np.asarray(columns, dtype=np.float64)
    if np.any(stacked < 0):
        raise NegativeCount("lgamma pooling requires non-negative counts")
    return _lgamma(stacked.sum(axis=0) + 2.0) - _lgamma(stacked + 1.0).sum(axis=0)


def hopfield_update(
    xi: np.ndarray, X: np.ndarray, beta: float, n_updates: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Iterate xi_new = X softmax(beta X^T xi); returns final (xi_new, p)."""
    if xi.shape[0] != X.shape[0]:
        raise ShapeMismatch(f"dim(xi)={xi.shape[0]} != rows(X)={X.shape[0]}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    state = np.asarray(xi, dtype=np.float64)
    for _ in range(max(1, n_updates)):
        p = nk.softmax(X.T @ state, beta=beta)
        state = X @ p
    return state, p


def hopfield_energy(xi: np.ndarray, X: np.ndarray, beta: float) -> float:
    """E = -lse(beta, X^T xi) + 0.5 xi^T xi  (constant C = 0)."""
    z = beta * (X.T @ np.asarray(xi, dtype=np.float64))
    m = z.max()
    lse = (m + math.log(np.exp(z - m).sum())) / beta
    return float(-lse + 0.5 * float(xi @ xi))


@dataclass(frozen=True)
class LabelMatrix:
    """Diagonal non-negative label scores over the template set."""

    diagonal: np.ndarray

    def __post_init__(self):
        if np.any(self.diagonal < 0):
            raise ValueError("label scores must be non-negative")

    @classmethod
    def one_hot(cls, index: int, size: int) -> "LabelMatrix":
        d = np.zeros(size)
        d[index] = 1.0
        return cls(diagonal=d)


def loss_ce(p: np.ndarray, label_index: int) -> float:
    if not 0 <= label_index < len(p):
        raise IndexError(f"label {label_index} out of range for K={len(p)}")
    return float(-np.log(p[label_index]))


def loss_label_retrieval(p: np.ndarray, labels: LabelMatrix) -> float:
    if labels.diagonal.sum() == 0:
        raise AllZeroLabels("label matrix has zero trace")
    return float(-np.log(labels.diagonal @ p))


def loss_infonce(
    xi_new: np.ndarray,
    pos: np.ndarray,
    negs: np.ndarray,
    tau: float,
    include_pos_in_denominator: bool = True,
) -> float:
    """Contrastive loss on cosine similarity of the retrieved pattern.

    ``negs`` holds one negative per row.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")

    def cos(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise ValueError("zero-norm vector in InfoNCE")
        return float(a @ b) / (na * nb)

    sims = [cos(xi_new, row) for row in np.atleast_2d(negs)]
    pos_sim = cos(xi_new, pos)
    if include_pos_in_denominator:
        sims = sims + [pos_sim]
    denom = sum(math.exp(s / tau) for s in sims)
    return float(-math.log(math.exp(pos_sim / tau) / denom))


# ---------------------------------------------------------------------------
# featurization


@dataclass(frozen=True)
class MoleculeFeaturizer:
    cfg: MoleculeFpConfig
    selector: MxfpSelector | None = None

    @property
    def dim(self) -> int:
        if self.cfg.kind == "mxfp":
            return self.selector.total_length
        return self.cfg.size

    def __call__(self, mol: Molecule) -> np.ndarray:
        c = self.cfg
        if c.kind == "morgan":
            return morgan_fp(mol, c.radius, c.size, c.counted).values
        if c.kind == "path":
            fp = path_fp(mol, c.size)
            out = np.zeros(c.size)
            for i in fp.bit_indices():
                out[i] = 1.0
            return out
        if c.kind == "mxfp":
            if self.selector is None:
                raise ValueError("mxfp featurizer needs a selector")
            return mxfp_apply(self.selector, mol).values
        raise ValueError(f"unknown molecule fp kind {c.kind!r}")

    def matrix(self, mols: list[Molecule]) -> np.ndarray:
        """(dim, N) feature matrix, one molecule per column."""
        return np.stack([self(m) for m in mols], axis=1)


def _pattern_dense_fp(pattern, cfg: TemplateFpConfig, selector: MxfpSelector | None) -> np.ndarray:
    if cfg.kind == "morgan":
        return morgan_fp(pattern, cfg.radius, cfg.size, cfg.counted).values
    if cfg.kind == "path":
        fp = path_fp(pattern, cfg.size)
        out = np.zeros(cfg.size)
        for i in fp.bit_indices():
            out[i] = 1.0
        return out
    if cfg.kind == "mxfp":
        if selector is None:
            raise ValueError("mxfp template fingerprints need a selector")
        return mxfp_apply(selector, pattern).values
    raise ValueError(f"unknown template fp kind {cfg.kind!r}")


def _pool_reactants(columns: list[np.ndarray], cfg: TemplateFpConfig) -> np.ndarray:
    stacked = np.stack(columns, axis=0)
    if not cfg.counted or cfg.kind == "path":
        # binary mode: disjunction over the reactant patterns
        return (stacked > 0).max(axis=0).astype(np.float64)
    if cfg.pooling == "max":
        return stacked.max(axis=0)
    if cfg.pooling == "sum":
        return stacked.sum(axis=0)
    if cfg.pooling == "mean":
        return stacked.mean(axis=0)
    if cfg.pooling == "lgamma":
        return lgamma_pool(columns)
    raise ValueError(f"unknown pooling {cfg.pooling!r}")


def template_fingerprint(
    template: ReactionTemplate,
    cfg: TemplateFpConfig,
    selector: MxfpSelector | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Product-side fingerprint minus half the pooled reactant side.

    ``noise`` is the template's frozen random embedding; it is only added
    when the template's training count reaches the configured threshold.
    """
    product = _pattern_dense_fp(template.product_pattern, cfg, selector)
    reactants = [
        _pattern_dense_fp(rp, cfg, selector) for rp in template.reactant_patterns
    ]
    base = product - 0.5 * _pool_reactants(reactants, cfg)
    if (
        noise is not None
        and cfg.random_threshold >= 0
        and template.train_count >= cfg.random_threshold
    ):
        base = base + noise
    return base


def template_noise_table(
    templates: list[ReactionTemplate],
    cfg: TemplateFpConfig,
    base_matrix: np.ndarray,
    seed: int,
) -> np.ndarray:
    """Frozen per-template Gaussian noise, keyed by (seed, template id).

    The per-coordinate scale is chosen so the expected noise norm is
    ``noise_sigma`` times the mean base-fingerprint norm.
    """
    dim = base_matrix.shape[0]
    mean_norm = float(np.linalg.norm(base_matrix, axis=0).mean())
    per_coord = cfg.noise_sigma * (mean_norm if mean_norm > 0 else 1.0) / math.sqrt(dim)
    out = np.zeros((dim, len(templates)))
    for col, t in enumerate(templates):
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, t.id], dtype=np.uint64)))
        out[:, col] = rng.normal(0.0, per_coord, size=dim)
    return out


def build_template_features(
    templates: list[ReactionTemplate],
    cfg: TemplateFpConfig,
    seed: int,
    selector: MxfpSelector | None = None,
) -> np.ndarray:
    """(dim, K) template feature matrix with frozen noise applied."""
    base = np.stack(
        [template_fingerprint(t, cfg, selector) for t in templates], axis=1
    )
    if cfg.random_threshold >= 0:
        noise = template_noise_table(templates, cfg, base, seed)
        for col, t in enumerate(templates):
            if t.train_count >= cfg.random_threshold:
                base[:, col] += noise[:, col]
    return base


# ---------------------------------------------------------------------------
# encoder stack


def _init_weight(rng, rows, cols):
    return rng.normal(0.0, 1.0 / math.sqrt(cols), size=(rows, cols))


class _Encoder:
    """Stack of (affine, activation, dropout) layers applied column-wise."""

    def __init__(self, prefix: str, cfg: EncoderConfig, in_dim: int, params: dict, rng):
        self.prefix = prefix
        self.cfg = cfg
        self.in_dim = in_dim
        self.out_dim = cfg.layer_dim if cfg.n_layers > 0 else in_dim
        for i in range(cfg.n_layers):
            d_in = in_dim if i == 0 else cfg.layer_dim
            params[f"{prefix}.w{i}"] = nk.param(_init_weight(rng, cfg.layer_dim, d_in))
            params[f"{prefix}.b{i}"] = nk.param(np.zeros((cfg.layer_dim, 1)))

    def apply(self, x: nk.Var, vars_: dict, drop_key=None) -> nk.Var:
        h = x
        for i in range(self.cfg.n_layers):
            w = vars_[f"{self.prefix}.w{i}"]
            b = vars_[f"{self.prefix}.b{i}"]
            h = nk.add(nk.matmul(w, h), b)
            h = nk.activation(h, self.cfg.activation)
            if drop_key is not None and self.cfg.dropout > 0:
                h = nk.dropout(h, self.cfg.dropout, drop_key + (i,))
        return h


def _layernorm_cols(a: nk.Var, gain: nk.Var | None, bias: nk.Var | None, eps=1e-5) -> nk.Var:
    """Layer normalization of each column vector (axis 0)."""
    mu = a.data.mean(axis=0, keepdims=True)
    var = a.data.var(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    parents = [a]
    y = xhat
    if gain is not None:
        y = y * gain.data
        parents.append(gain)
    if bias is not None:
        y = y + bias.data
        parents.append(bias)
    out = nk.Var(y, parents=tuple(parents))

    def bw(g):
        gx = g * (gain.data if gain is not None else 1.0)
        dx = (
            gx
            - gx.mean(axis=0, keepdims=True)
            - xhat * (gx * xhat).mean(axis=0, keepdims=True)
        ) * inv
        a.grad += dx
        if gain is not None:
            gain.grad += (g * xhat).sum(axis=1, keepdims=True)
        if bias is not None:
            bias.grad += g.sum(axis=1, keepdims=True)

    out.backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# the MHN model


class MhnModel:
    """Hopfield association model over a fixed template memory."""

    def __init__(
        self,
        config: MhnConfig,
        templates: list[ReactionTemplate],
        selector: MxfpSelector | None = None,
        template_features: list[np.ndarray] | None = None,
    ):
        self.config = config
        self.templates = list(templates)
        self.K = len(templates)
        self.id_to_row = {t.id: i for i, t in enumerate(self.templates)}
        self.selector = selector
        self.featurizer = MoleculeFeaturizer(config.molecule_fp, selector)
        if template_features is None:
            template_features = [
                build_template_features(self.templates, fp_cfg, config.seed, selector)
                for fp_cfg in config.template_fps
            ]
        # features are rounded to the 32-bit storage grid up front so a
        # saved-and-reloaded model computes on the very same values
        self.template_features = [
            f.astype(np.float32).astype(np.float64) for f in template_features
        ]
        if any(f.shape[1] != self.K for f in self.template_features):
            raise ShapeMismatch("template feature column count != K")

        self.n_positions = len(self.template_features)
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, nk.ParamTensor] = {}
        self.mol_encoder = _Encoder(
            "mol_enc", config.molecule_encoder, self.featurizer.dim, self.params, rng
        )
        self.template_encoders = []
        hop = config.hopfield
        d = hop.d
        state_dim = self.mol_encoder.out_dim
        for pos in range(self.n_positions):
            enc = _Encoder(
                f"tpl_enc{pos}",
                config.template_encoders[pos],
                self.template_features[pos].shape[0],
                self.params,
                rng,
            )
            self.template_encoders.append(enc)
            in_dim = state_dim if pos == 0 else d
            self.params[f"hop{pos}.Wm"] = nk.param(_init_weight(rng, d, in_dim))
            self.params[f"hop{pos}.Wt"] = nk.param(_init_weight(rng, d, enc.out_dim))
            if hop.normalize_state:
                self.params[f"hop{pos}.state_gain"] = nk.param(np.ones((d, 1)))
                self.params[f"hop{pos}.state_bias"] = nk.param(np.zeros((d, 1)))
            if hop.normalize_memory:
                self.params[f"hop{pos}.mem_gain"] = nk.param(np.ones((d, 1)))
                self.params[f"hop{pos}.mem_bias"] = nk.param(np.zeros((d, 1)))
        if self.n_positions > 1:
            self.params["stack.pool_logits"] = nk.param(
                np.zeros((self.n_positions, 1))
            )
        self._memory_built = True

    # -- forward ------------------------------------------------------------

    def _vars(self) -> dict[str, nk.Var]:
        return {name: nk.Var(p.value.data) for name, p in self.params.items()}

    def _forward_graph(self, fp_batch: np.ndarray, drop_key=None):
        """Build the tape; returns (p Var, per-layer logits Vars, vars dict)."""
        if not getattr(self, "_memory_built", False):
            raise MemoryNotBuilt("template memory not built")
        hop = self.config.hopfield
        vars_ = self._vars()
        mkey = None if drop_key is None else drop_key + (0,)
        h_m = self.mol_encoder.apply(nk.Var(fp_batch), vars_, mkey)
        state = h_m
        p_layers, logit_layers = [], []
        for pos in range(self.n_positions):
            tkey = None if drop_key is None else drop_key + (10 + pos,)
            t_h = self.template_encoders[pos].apply(
                nk.Var(self.template_features[pos]), vars_, tkey
            )
            xi = nk.matmul(vars_[f"hop{pos}.Wm"], state)
            X = nk.matmul(vars_[f"hop{pos}.Wt"], t_h)
            xi = nk.activation(xi, hop.association_activation)
            X = nk.activation(X, hop.association_activation)
            if hop.normalize_state:
                xi = _layernorm_cols(
                    xi, vars_[f"hop{pos}.state_gain"], vars_[f"hop{pos}.state_bias"]
                )
            if hop.normalize_memory:
                X = _layernorm_cols(
                    X, vars_[f"hop{pos}.mem_gain"], vars_[f"hop{pos}.mem_bias"]
                )
            if drop_key is not None and self.config.molecule_encoder.dropout > 0:
                xi = nk.dropout(
                    xi, self.config.molecule_encoder.dropout, drop_key + (20 + pos,)
                )
            head_dim = hop.d // hop.heads
            head_ps, head_news, head_logits = [], [], []
            for h in range(hop.heads):
                xi_h = nk.slice_rows(xi, h * head_dim, (h + 1) * head_dim)
                X_h = nk.slice_rows(X, h * head_dim, (h + 1) * head_dim)
                for _ in range(max(1, hop.n_updates)):
                    scores = nk.matmul(_transpose(X_h), xi_h)
                    p_h = nk.softmax_cols(scores, beta=hop.beta)
                    xi_h = nk.matmul(X_h, p_h)
                head_ps.append(p_h)
                head_news.append(xi_h)
                head_logits.append(nk.scale(scores, hop.beta))
            if hop.heads == 1:
                p_pos, xi_new, logits = head_ps[0], head_news[0], head_logits[0]
            else:
                p_pos = _mean_vars(head_ps)
                logits = _mean_vars(head_logits)
                xi_new = nk.concat_rows(head_news)
            p_layers.append(p_pos)
            logit_layers.append(logits)
            # skip connection into the next stacked layer
            if pos + 1 < self.n_positions:
                state = nk.add(xi_new, xi) if xi.shape == xi_new.shape else xi_new
        if self.n_positions == 1:
            p = p_layers[0]
            logits = logit_layers[0]
        else:
            w = nk.softmax_cols(vars_["stack.pool_logits"])
            p = _weighted_sum(p_layers, w)
            logits = _weighted_sum(logit_layers, w)
        return p, logits, vars_

    def forward_batch(self, fp_batch: np.ndarray) -> np.ndarray:
        p, _, _ = self._forward_graph(np.asarray(fp_batch, dtype=np.float64))
        return p.data

    def forward(self, mol: Molecule) -> np.ndarray:
        fp = self.featurizer(mol).reshape(-1, 1)
        return self.forward_batch(fp)[:, 0]

    def rank_templates(self, p: np.ndarray) -> np.ndarray:
        """Template ids by descending score, ties by ascending id."""
        order = np.lexsort((np.arange(self.K), -p))
        return np.array([self.templates[i].id for i in order])

    def template_embeddings(self, position: int = 0) -> np.ndarray:
        """(K, d) stored patterns of one Hopfield layer, evaluation mode."""
        hop = self.config.hopfield
        vars_ = self._vars()
        t_h = self.template_encoders[position].apply(
            nk.Var(self.template_features[position]), vars_, None
        )
        X = nk.matmul(vars_[f"hop{position}.Wt"], t_h)
        X = nk.activation(X, hop.association_activation)
        if hop.normalize_memory:
            X = _layernorm_cols(
                X,
                vars_[f"hop{position}.mem_gain"],
                vars_[f"hop{position}.mem_bias"],
            )
        return X.data.T

    # -- training interfaces -----------------------------------------------

    def loss_and_grad(self, fp_batch: np.ndarray, labels: np.ndarray, drop_key=None) -> float:
        # labels are global template ids; map onto memory rows
        rows = np.array([self.id_to_row[t] for t in labels])
        for p in self.params.values():
            p.zero_grad()
        pv, _, vars_ = self._forward_graph(fp_batch, drop_key)
        loss = _nll_from_probs(pv, rows)
        loss.backward()
        self._accumulate(vars_)
        return float(loss.data)

    def pretrain_loss_and_grad(self, fp_batch: np.ndarray, targets: np.ndarray, drop_key=None) -> float:
        if targets.shape[0] != self.K:
            raise ShapeMismatch("applicability targets must have K rows")
        for p in self.params.values():
            p.zero_grad()
        _, logits, vars_ = self._forward_graph(fp_batch, drop_key)
        loss = nk.bce_with_logits(logits, targets)
        loss.backward()
        self._accumulate(vars_)
        return float(loss.data)

    def _accumulate(self, vars_: dict):
        for name, v in vars_.items():
            if v.grad is not None:
                self.params[name].grad += v.grad.astype(np.float32)


def _transpose(a: nk.Var) -> nk.Var:
    out = nk.Var(a.data.T, parents=(a,))

    def bw(g):
        a.grad += g.T

    out.backward_fn = bw
    return out


def _mean_vars(vs: list[nk.Var]) -> nk.Var:
    acc = vs[0]
    for v in vs[1:]:
        acc = nk.add(acc, v)
    return nk.scale(acc, 1.0 / len(vs))


def _weighted_sum(vs: list[nk.Var], weights: nk.Var) -> nk.Var:
    acc = None
    for i, v in enumerate(vs):
        term = nk.mul(v, nk.slice_rows(weights, i, i + 1))
        acc = term if acc is None else nk.add(acc, term)
    return acc


def _nll_from_probs(p: nk.Var, labels: np.ndarray) -> nk.Var:
    """-mean(log p[label_b, b]) as a tape node."""
    cols = np.arange(p.data.shape[1])
    picked = p.data[labels, cols]
    out = nk.Var(-np.log(picked).mean(), parents=(p,))

    def bw(g):
        gp = np.zeros_like(p.data)
        gp[labels, cols] = -g / (picked * len(cols))
        p.grad += gp

    out.backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# DNN baseline


def dnn_baseline_forward(W: np.ndarray, h_m: np.ndarray) -> np.ndarray:
    """softmax(W h) over the model's own output space."""
    return nk.softmax(W @ h_m)


class DnnModel:
    """Feed-forward baseline: each output unit is one training template.

    Templates outside the training output space receive no score and are
    ranked last (ascending id).
    """

    def __init__(
        self,
        featurizer: MoleculeFeaturizer,
        encoder_cfg: EncoderConfig,
        all_template_ids: list[int],
        train_template_ids: list[int],
        seed: int = 0,
    ):
        self.featurizer = featurizer
        self.encoder_cfg = encoder_cfg
        self.all_template_ids = list(all_template_ids)
        self.train_template_ids = sorted(set(train_template_ids))
        self.id_to_output = {t: i for i, t in enumerate(self.train_template_ids)}
        self.seed = seed
        self.K_out = len(self.train_template_ids)
        rng = np.random.default_rng(seed)
        self.params: dict[str, nk.ParamTensor] = {}
        self.encoder = _Encoder("mol_enc", encoder_cfg, featurizer.dim, self.params, rng)
        self.params["out.W"] = nk.param(
            _init_weight(rng, self.K_out, self.encoder.out_dim)
        )
        self.params["out.b"] = nk.param(np.zeros((self.K_out, 1)))

    def _graph(self, fp_batch: np.ndarray, drop_key=None):
        vars_ = {name: nk.Var(p.value.data) for name, p in self.params.items()}
        h = self.encoder.apply(nk.Var(fp_batch), vars_, drop_key)
        logits = nk.add(nk.matmul(vars_["out.W"], h), vars_["out.b"])
        return logits, vars_

    def forward_batch(self, fp_batch: np.ndarray) -> np.ndarray:
        logits, _ = self._graph(np.asarray(fp_batch, dtype=np.float64))
        return nk.softmax(logits.data)

    def forward(self, mol: Molecule) -> np.ndarray:
        return self.forward_batch(self.featurizer(mol).reshape(-1, 1))[:, 0]

    def rank_templates(self, p_out: np.ndarray) -> np.ndarray:
        order = np.lexsort((np.arange(self.K_out), -p_out))
        ranked = [self.train_template_ids[i] for i in order]
        unseen = sorted(set(self.all_template_ids) - set(self.train_template_ids))
        return np.array(ranked + unseen)

    def loss_and_grad(self, fp_batch: np.ndarray, labels: np.ndarray, drop_key=None) -> float:
        # labels here are global template ids; map into the output space
        out_labels = np.array([self.id_to_output[t] for t in labels])
        for p in self.params.values():
            p.zero_grad()
        logits, vars_ = self._graph(fp_batch, drop_key)
        p = nk.softmax_cols(logits)
        loss = _nll_from_probs(p, out_labels)
        loss.backward()
        for name, v in vars_.items():
            if v.grad is not None:
                self.params[name].grad += v.grad.astype(np.float32)
        return float(loss.data)

    def pretrain_loss_and_grad(self, fp_batch: np.ndarray, targets: np.ndarray, drop_key=None) -> float:
        if targets.shape[0] != self.K_out:
            raise ShapeMismatch("applicability targets must match the output space")
        for p in self.params.values():
            p.zero_grad()
        logits, vars_ = self._graph(fp_batch, drop_key)
        loss = nk.bce_with_logits(logits, targets)
        loss.backward()
        for name, v in vars_.items():
            if v.grad is not None:
                self.params[name].grad += v.grad.astype(np.float32)
        return float(loss.data)


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_ce: float
    val_top1: float
    val_top10: float


@dataclass
class TrainReport:
    epochs: list[EpochMetrics]
    best_epoch: int


def _topk_hits(p_batch: np.ndarray, model, labels: np.ndarray, k: int) -> float:
    hits = 0
    for b in range(p_batch.shape[1]):
        ranked = model.rank_templates(p_batch[:, b])
        hits += int(labels[b] in ranked[:k])
    return hits / p_batch.shape[1]


def train(
    model,
    train_fps: np.ndarray,
    train_labels: np.ndarray,
    val_fps: np.ndarray,
    val_labels: np.ndarray,
    cfg: TrainConfig,
) -> TrainReport:
    """Mini-batch AdamW training with best-epoch checkpointing.

    ``*_labels`` are global template ids.  Deterministic under a fixed
    seed: shuffling uses a counter-based generator and dropout masks are
    keyed by (seed, epoch, batch).
    """
    n = train_fps.shape[1]
    if n == 0:
        raise NoTrainingData("empty training set")
    params = list(model.params.values())
    epochs_out: list[EpochMetrics] = []
    best = None
    best_state = None
    for epoch in range(cfg.epochs):
        rng = np.random.Generator(
            np.random.Philox(key=np.array([cfg.seed, epoch], dtype=np.uint64))
        )
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            key = (cfg.seed + cfg.dropout_seed_offset, epoch, batches)
            loss = model.loss_and_grad(train_fps[:, idx], train_labels[idx], key)
            nk.adamw_step(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
            total += loss
            batches += 1
        p_val = model.forward_batch(val_fps)
        if isinstance(model, DnnModel):
            val_out_labels = np.array(
                [model.id_to_output.get(t, -1) for t in val_labels]
            )
            picked = np.where(
                val_out_labels >= 0,
                p_val[np.clip(val_out_labels, 0, None), np.arange(p_val.shape[1])],
                np.nan,
            )
            with np.errstate(divide="ignore"):
                ces = -np.log(picked)
            val_ce = float(np.nanmean(ces)) if np.any(val_out_labels >= 0) else math.inf
        else:
            cols = np.arange(p_val.shape[1])
            val_rows = np.array([model.id_to_row[t] for t in val_labels])
            val_ce = float(-np.log(p_val[val_rows, cols]).mean())
        metrics = EpochMetrics(
            epoch=epoch,
            train_loss=total / max(1, batches),
            val_ce=val_ce,
            val_top1=_topk_hits(p_val, model, val_labels, 1),
            val_top10=_topk_hits(p_val, model, val_labels, 10),
        )
        epochs_out.append(metrics)
        score = metrics.val_ce if cfg.select_by == "val_ce" else -metrics.val_top1
        if best is None or score < best:
            best = score
            best_state = {
                name: p.value.data.copy() for name, p in model.params.items()
            }
    if best_state is not None:
        for name, p in model.params.items():
            p.value.data[:] = best_state[name]
    best_epoch = min(
        range(len(epochs_out)),
        key=lambda i: (
            epochs_out[i].val_ce if cfg.select_by == "val_ce" else -epochs_out[i].val_top1
        ),
    )
    return TrainReport(epochs=epochs_out, best_epoch=best_epoch)


def pretrain_applicability(
    model,
    fps: np.ndarray,
    applicability_rows: list[tuple[int, ...]],
    cfg: TrainConfig,
):
    """Train the same architecture against applicability targets.

    Targets are per-template sigmoid scores; MHN uses the unnormalized
    association logits, the DNN its output logits.  With
    ``cfg.pretrain_epochs == 0`` the model is returned unchanged.
    """
    if cfg.pretrain_epochs <= 0:
        return model
    if isinstance(model, DnnModel):
        id_list = model.train_template_ids
    else:
        id_list = [t.id for t in model.templates]
    col_of = {t: i for i, t in enumerate(id_list)}
    targets = np.zeros((len(id_list), fps.shape[1]))
    for mol_idx, row in enumerate(applicability_rows):
        for tid in row:
            if tid in col_of:
                targets[col_of[tid], mol_idx] = 1.0
    params = list(model.params.values())
    n = fps.shape[1]
    for epoch in range(cfg.pretrain_epochs):
        rng = np.random.Generator(
            np.random.Philox(key=np.array([cfg.seed + 7919, epoch], dtype=np.uint64))
        )
        order = rng.permutation(n)
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            key = (cfg.seed + 7919, epoch, bi)
            model.pretrain_loss_and_grad(fps[:, idx], targets[:, idx], key)
            nk.adamw_step(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    return model


# ---------------------------------------------------------------------------
# checkpoint container


def _write_block(buf: io.BytesIO, data: bytes):
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def _read_block(buf: io.BytesIO) -> bytes:
    (n,) = struct.unpack("<I", buf.read(4))
    return buf.read(n)


def _selector_to_json(sel: MxfpSelector | None):
    if sel is None:
        return None
    return {
        "features": {k: list(v) for k, v in sel.features.items()},
        "variances": {k: list(v) for k, v in sel.variances.items()},
        "lengths": dict(sel.lengths),
    }


def _selector_from_json(obj) -> MxfpSelector | None:
    if obj is None:
        return None
    return MxfpSelector(
        features={k: tuple(v) for k, v in obj["features"].items()},
        variances={k: tuple(v) for k, v in obj["variances"].items()},
        lengths={k: int(v) for k, v in obj["lengths"].items()},
    )


def save_checkpoint(model, path: str, extra_config: dict | None = None):
    """Write magic, JSON configuration, then named float32 tensors."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    if isinstance(model, MhnModel):
        cfg = {
            "kind": "mhn",
            "config": asdict(model.config),
            "selector": _selector_to_json(model.selector),
            "templates": [
                {"id": t.id, "train_count": t.train_count, "text": _template_text(t)}
                for t in model.templates
            ],
        }
    else:
        cfg = {
            "kind": "dnn",
            "molecule_fp": asdict(model.featurizer.cfg),
            "encoder": asdict(model.encoder_cfg),
            "all_template_ids": model.all_template_ids,
            "train_template_ids": model.train_template_ids,
            "seed": model.seed,
            "selector": _selector_to_json(model.featurizer.selector),
        }
    if extra_config:
        cfg["extra"] = extra_config
    _write_block(buf, json.dumps(cfg, sort_keys=True).encode("utf-8"))
    tensors: list[tuple[str, np.ndarray]] = [
        (f"param:{name}", p.value.data) for name, p in sorted(model.params.items())
    ]
    if isinstance(model, MhnModel):
        tensors += [
            (f"template_features:{i}", f.astype(np.float32))
            for i, f in enumerate(model.template_features)
        ]
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_block(buf, name.encode("utf-8"))
        rows, cols = arr.shape
        buf.write(struct.pack("<II", rows, cols))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _template_text(t: ReactionTemplate) -> str:
    from .chemgraph import canonical_smiles

    product = canonical_smiles(t.product_pattern)
    reactants = ".".join(canonical_smiles(rp) for rp in t.reactant_patterns)
    return f"{product}>>{reactants}"


def load_checkpoint(path: str):
    """Rebuild a model whose forward outputs match the saved one exactly."""
    from .chemgraph import parse_template

    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    magic = buf.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    cfg = json.loads(_read_block(buf).decode("utf-8"))
    (n_tensors,) = struct.unpack("<I", buf.read(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name = _read_block(buf).decode("utf-8")
        rows, cols = struct.unpack("<II", buf.read(8))
        data = np.frombuffer(buf.read(rows * cols * 4), dtype="<f4").reshape(rows, cols)
        tensors[name] = data.copy()
    selector = _selector_from_json(cfg.get("selector"))
    if cfg["kind"] == "mhn":
        c = cfg["config"]
        model_cfg = MhnConfig(
            molecule_fp=MoleculeFpConfig(**c["molecule_fp"]),
            molecule_encoder=EncoderConfig(**c["molecule_encoder"]),
            template_fps=tuple(TemplateFpConfig(**t) for t in c["template_fps"]),
            template_encoders=tuple(EncoderConfig(**e) for e in c["template_encoders"]),
            hopfield=HopfieldConfig(**c["hopfield"]),
            stacking=c["stacking"],
            seed=c["seed"],
        )
        templates = [
            parse_template(t["text"], template_id=t["id"], train_count=t["train_count"])
            for t in cfg["templates"]
        ]
        feats = [
            tensors[f"template_features:{i}"].astype(np.float64)
            for i in range(len(model_cfg.template_fps))
        ]
        model = MhnModel(model_cfg, templates, selector, template_features=feats)
    else:
        featurizer_cfg = MoleculeFpConfig(**cfg["molecule_fp"])
        model = DnnModel(
            MoleculeFeaturizer(featurizer_cfg, selector),
            EncoderConfig(**cfg["encoder"]),
            cfg["all_template_ids"],
            cfg["train_template_ids"],
            seed=cfg["seed"],
        )
    for name, p in model.params.items():
        p.value.data[:] = tensors[f"param:{name}"]
    model.loaded_extra = cfg.get("extra")
    return model
