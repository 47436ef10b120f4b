"""Dual-aspect feature encoders with richness-guided attention.

Both graphs of a task are embedded by shared encoders over a union feature
space: timestamps and interval values are shared vocabularies, relations
keep one column block per side, and entity columns of training-seed pairs
are fused so that layer-0 embeddings anchor the two graphs to each other.
The virtual reference entity is one extra column per bipartite matrix and
one extra trainable row per feature matrix; it never joins the propagation
topology.

Attention weights and the fusion reference matrix are recomputed at every
epoch from the current parameters and treated as constants within the
epoch, so the hand-derived gradients below are exact for the cached
forward pass.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ContractViolationError, ShapeError, TrainingDivergedError
from .features import (
    BipartiteFeatureMatrix,
    RichnessProfile,
    build_bipartite,
    init_features,
)
from .numeric import (
    Array,
    MlpParams,
    RmspropState,
    SparseRowMatrix,
    dropout_mask,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    mlp_backward,
    mlp_forward,
    relu,
    rmsprop_step,
    rng_for,
    row_softmax,
    spmm,
    spmm_t,
)
from .tkg import ALL_TYPES, STRUCTURAL_TYPES, TEMPORAL_TYPES, AlignmentTask, FeatureType, SeedAlignment

STAGE_STRUCTURAL = "structural"
STAGE_TEMPORAL = "temporal"
STAGE_MIXED = "mixed"
STAGE_ORDER = (STAGE_STRUCTURAL, STAGE_TEMPORAL, STAGE_MIXED)

ATTENTION_MODES = ("richness", "gat", "relation")
WEIGHT_MODES = ("adaptive", "equal", "none")


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 50
    gnn_depth: int = 2
    attention_layers: int = 1
    batch_size: int = 512
    dropout: float = 0.3
    temperature: float = 0.05
    learning_rate: float = 0.005
    epochs_structural: int = 20
    epochs_temporal: int = 60
    epochs_mixed: int = 5
    mixed_finetune_scale: float = 0.1
    fusion_hidden: int = 4
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    freeze_reference: bool = False
    attention_mode: str = "richness"
    disabled_attention: tuple = ()   # feature type names, e.g. ("E",)
    dropped_types: tuple = ()        # feature type names excluded entirely
    weights_mode: str = "adaptive"

    def __post_init__(self):
        if self.gnn_depth < 1:
            raise ConfigError("gnn_depth must be >= 1")
        if self.attention_layers < 1:
            raise ConfigError("attention_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.temperature <= 0.0:
            raise ConfigError("temperature must be positive")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}")
        if self.weights_mode not in WEIGHT_MODES:
            raise ConfigError(f"unknown weights_mode {self.weights_mode!r}")
        for name in self.disabled_attention + self.dropped_types:
            if name not in FeatureType.__members__:
                raise ConfigError(f"unknown feature type {name!r}")

    @property
    def active_types(self) -> tuple:
        dropped = {FeatureType[n] for n in self.dropped_types}
        return tuple(t for t in ALL_TYPES if t not in dropped)

    def active_in(self, group) -> tuple:
        return tuple(t for t in group if t in self.active_types)

    def attention_disabled_for(self, ftype: FeatureType) -> bool:
        return ftype.value in self.disabled_attention

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        raw = json.loads(text)
        for key in ("disabled_attention", "dropped_types"):
            raw[key] = tuple(raw[key])
        return cls(**raw)


# ---------------------------------------------------------------------------
# union feature space over the two graphs


@dataclass(frozen=True)
class UnionSpace:
    n_cols: int
    left_map: Array
    right_map: Array


def build_union_spaces(task: AlignmentTask, seeds: SeedAlignment) -> dict:
    """Map per-graph feature indices into one shared column space per type."""
    left, right = task.left, task.right
    spaces = {}

    seed_of_right = {r: l for l, r in seeds.pairs}
    right_e = np.empty(right.entity_count, dtype=np.int64)
    fresh = left.entity_count
    for j in range(right.entity_count):
        if j in seed_of_right:
            right_e[j] = seed_of_right[j]
        else:
            right_e[j] = fresh
            fresh += 1
    spaces[FeatureType.E] = UnionSpace(
        n_cols=fresh,
        left_map=np.arange(left.entity_count, dtype=np.int64),
        right_map=right_e,
    )

    spaces[FeatureType.R] = UnionSpace(
        n_cols=left.relation_count + right.relation_count,
        left_map=np.arange(left.relation_count, dtype=np.int64),
        right_map=left.relation_count + np.arange(right.relation_count, dtype=np.int64),
    )

    n_ts = max(left.timestamp_count, right.timestamp_count)
    spaces[FeatureType.T] = UnionSpace(
        n_cols=n_ts,
        left_map=np.arange(left.timestamp_count, dtype=np.int64),
        right_map=np.arange(right.timestamp_count, dtype=np.int64),
    )

    vocab = {iv: i for i, iv in enumerate(left.interval_vocab)}
    right_i = np.empty(len(right.interval_vocab), dtype=np.int64)
    for j, iv in enumerate(right.interval_vocab):
        if iv not in vocab:
            vocab[iv] = len(vocab)
        right_i[j] = vocab[iv]
    spaces[FeatureType.I] = UnionSpace(
        n_cols=len(vocab),
        left_map=np.arange(len(left.interval_vocab), dtype=np.int64),
        right_map=right_i,
    )
    return spaces


def _remap_rows(bip: BipartiteFeatureMatrix, col_map: Array, union_cols: int):
    for i in range(bip.matrix.rows):
        idx, w = bip.matrix.row(i)
        yield [(union_cols if c == bip.reference_column else int(col_map[c]), float(v))
               for c, v in zip(idx, w)]


def union_bipartite(task: AlignmentTask, spaces: dict, ftype: FeatureType) -> SparseRowMatrix:
    """Stacked (left rows, then right rows) bipartite matrix in union columns."""
    space = spaces[ftype]
    left_bip = build_bipartite(task.left, ftype)
    right_bip = build_bipartite(task.right, ftype)
    rows = list(_remap_rows(left_bip, space.left_map, space.n_cols))
    rows += list(_remap_rows(right_bip, space.right_map, space.n_cols))
    return SparseRowMatrix.from_rows(
        task.left.entity_count + task.right.entity_count, space.n_cols + 1, rows)


# ---------------------------------------------------------------------------
# attention kernels


def richness_attention(layer_sims: Array, neighbors) -> SparseRowMatrix:
    """Softmax of negated reference similarities over each neighbor set.

    Entities with no neighbors get an empty row.
    """
    scores = -np.asarray(layer_sims, dtype=np.float64)
    rows = []
    for nbrs in neighbors:
        if len(nbrs) == 0:
            rows.append([])
            continue
        s = scores[list(nbrs)]
        e = np.exp(s - s.max())
        e /= e.sum()
        rows.append(list(zip(nbrs, e)))
    n = len(neighbors)
    return SparseRowMatrix.from_rows(n, n, rows)


def uniform_attention(neighbors) -> SparseRowMatrix:
    rows = []
    for nbrs in neighbors:
        w = 1.0 / len(nbrs) if nbrs else 0.0
        rows.append([(j, w) for j in nbrs])
    n = len(neighbors)
    return SparseRowMatrix.from_rows(n, n, rows)


def _score_attention(neighbors, scores_fn) -> SparseRowMatrix:
    rows = []
    for i, nbrs in enumerate(neighbors):
        if len(nbrs) == 0:
            rows.append([])
            continue
        s = scores_fn(i, np.asarray(nbrs))
        e = np.exp(s - s.max())
        e /= e.sum()
        rows.append(list(zip(nbrs, e)))
    n = len(neighbors)
    return SparseRowMatrix.from_rows(n, n, rows)


def _layer_reference_sims(h: Array, ref: Array) -> Array:
    ref_norm = np.linalg.norm(ref)
    if ref_norm < 1e-12:
        return np.zeros(h.shape[0])
    norms = np.linalg.norm(h, axis=1)
    sims = (h @ ref) / (np.maximum(norms, 1e-12) * ref_norm)
    sims[norms < 1e-12] = 0.0
    return sims


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class TypeForward:
    ftype: FeatureType
    h_layers: list
    ref_layers: list
    betas: list
    agg: list          # beta @ h per layer, reused by backward
    pre: list          # pre-activation messages
    masks: list        # dropout masks or None
    concat: Array
    ref_concat: Array
    layer_sims: Array  # (L+1, N) reference similarities per layer


def propagate(h: Array, beta: SparseRowMatrix, weight: Array, iso_mask: Array,
              return_parts: bool = False):
    """One attention-weighted propagation step with self-carry for
    empty-neighborhood entities."""
    agg = spmm(beta, h)
    pre = agg @ weight
    out = relu(pre)
    out[iso_mask] = h[iso_mask]
    if return_parts:
        return out, agg, pre
    return out


def concat_layers(h_layers) -> Array:
    """Layer concatenation, layer 0 first."""
    return np.concatenate(h_layers, axis=-1)


def layer0_embed(bip: SparseRowMatrix, feature_matrix: Array) -> Array:
    """Convex combination of feature rows per the bipartite weights."""
    return spmm(bip, feature_matrix)


def structural_embed(concat_by_type: dict, actives=STRUCTURAL_TYPES) -> Array:
    parts = [concat_by_type[t] for t in STRUCTURAL_TYPES if t in actives]
    if not parts:
        raise ConfigError("structural embedding needs at least one of E, R")
    return np.concatenate(parts, axis=1)


def temporal_embed(concat_by_type: dict, actives=TEMPORAL_TYPES) -> Array:
    parts = [concat_by_type[t] for t in TEMPORAL_TYPES if t in actives]
    if not parts:
        raise ConfigError("temporal embedding needs at least one of T, I")
    return np.concatenate(parts, axis=1)


def fusion_weights(reference_matrix: Array, mlp: MlpParams):
    """Per-entity structural-vs-temporal weight in (0, 1)."""
    w, cache = mlp_forward(mlp, reference_matrix)
    return w, cache


def mixed_embed(h_stru: Array, h_temp: Array, w: Array) -> Array:
    """Weighted concatenation [w * structural || (1 - w) * temporal]."""
    if h_stru.shape[0] != h_temp.shape[0]:
        raise ShapeError("structural/temporal row counts differ")
    w = w.reshape(-1, 1)
    return np.concatenate([w * h_stru, (1.0 - w) * h_temp], axis=1)


class EncoderState:
    """Trainable parameters plus static graph structure for one task."""

    def __init__(self, task, config: EncoderConfig, rng_seed: int,
                 seeds: SeedAlignment | None = None):
        self.task = task
        self.config = config
        self.rng_seed = int(rng_seed)
        self.seeds = seeds if seeds is not None else task.train_seeds
        self.n_left = task.left.entity_count
        self.n_right = task.right.entity_count
        self.n_total = self.n_left + self.n_right

        self.spaces = build_union_spaces(task, self.seeds)
        self.bip = {t: union_bipartite(task, self.spaces, t)
                    for t in config.active_types}
        self.neighbors = tuple(
            list(task.left.neighbor_sets[i]) for i in range(self.n_left)
        ) + tuple(
            [self.n_left + j for j in task.right.neighbor_sets[i]]
            for i in range(self.n_right)
        )
        self.iso_mask = np.array([len(n) == 0 for n in self.neighbors])

        d = config.dim
        self.params: dict = {}
        for t in config.active_types:
            self.params[f"feat/{t.value}"] = init_features(
                t, self.spaces[t].n_cols, d, self.rng_seed)
            w_rng = rng_for(self.rng_seed, "init_w", t.value)
            for l in range(config.gnn_depth):
                self.params[f"W/{t.value}/{l}"] = w_rng.normal(
                    0.0, 1.0 / np.sqrt(d), size=(d, d))
        if config.weights_mode == "adaptive":
            mlp = MlpParams.create(4, config.fusion_hidden, 1,
                                   rng_for(self.rng_seed, "fusion"),
                                   output_activation="sigmoid", zero_output=True)
            for k, v in mlp.flat().items():
                self.params[f"fusion/{k}"] = v

        self._static_scores: dict = {}
        self.attn_cache: dict = {}
        self.profile: RichnessProfile | None = None
        self.stage_done: list = []
        self.loss_history: dict = {}

    # -- parameter views ----------------------------------------------------

    def fusion_mlp(self) -> MlpParams:
        return MlpParams(W1=self.params["fusion/W1"], b1=self.params["fusion/b1"],
                         W2=self.params["fusion/W2"], b2=self.params["fusion/b2"],
                         output_activation="sigmoid")

    def stage_param_keys(self, stage: str) -> list:
        if stage == STAGE_STRUCTURAL:
            types = self.config.active_in(STRUCTURAL_TYPES)
        elif stage == STAGE_TEMPORAL:
            types = self.config.active_in(TEMPORAL_TYPES)
        else:
            types = self.config.active_types
        keys = []
        for t in types:
            keys.append(f"feat/{t.value}")
            keys.extend(f"W/{t.value}/{l}" for l in range(self.config.gnn_depth))
        return keys

    # -- attention ----------------------------------------------------------

    def _gat_vectors(self, ftype: FeatureType):
        key = ("gat", ftype)
        if key not in self._static_scores:
            rng = rng_for(self.rng_seed, "gat_score", ftype.value)
            d = self.config.dim
            self._static_scores[key] = (rng.normal(0, 1 / np.sqrt(d), d),
                                        rng.normal(0, 1 / np.sqrt(d), d))
        return self._static_scores[key]

    def _relation_edge_scores(self):
        """Static per-edge scores from a random per-relation-column scalar."""
        if "relation" not in self._static_scores:
            rng = rng_for(self.rng_seed, "relation_score")
            rel_scale = rng.normal(
                0.0, 1.0, size=self.spaces[FeatureType.R].n_cols)
            edge_scores = [dict() for _ in range(self.n_total)]
            sides = ((self.task.left, 0, self.spaces[FeatureType.R].left_map),
                     (self.task.right, self.n_left, self.spaces[FeatureType.R].right_map))
            for graph, offset, rel_map in sides:
                for f in graph.facts:
                    score = rel_scale[rel_map[f.relation]]
                    for a, b in ((f.head, f.tail), (f.tail, f.head)):
                        acc = edge_scores[offset + a].setdefault(offset + b, [0.0, 0])
                        acc[0] += score
                        acc[1] += 1
            self._static_scores["relation"] = [
                {j: s / c for j, (s, c) in per.items()} for per in edge_scores]
        return self._static_scores["relation"]

    def compute_beta(self, ftype: FeatureType, h: Array, ref: Array) -> SparseRowMatrix:
        cfg = self.config
        if cfg.attention_disabled_for(ftype):
            return uniform_attention(self.neighbors)
        if cfg.attention_mode == "richness":
            sims = _layer_reference_sims(h, ref)
            return richness_attention(sims, self.neighbors)
        if cfg.attention_mode == "gat":
            a_src, a_dst = self._gat_vectors(ftype)
            src = h @ a_src
            dst = h @ a_dst

            def scores(i, nbrs):
                raw = src[i] + dst[nbrs]
                return np.where(raw > 0, raw, 0.2 * raw)

            return _score_attention(self.neighbors, scores)
        edge = self._relation_edge_scores()

        def scores(i, nbrs):
            return np.array([edge[i].get(int(j), 0.0) for j in nbrs])

        return _score_attention(self.neighbors, scores)

    # -- forward / backward -------------------------------------------------

    def forward_type(self, ftype: FeatureType, training: bool = False,
                     betas=None, mask_site=None) -> TypeForward:
        cfg = self.config
        feats = self.params[f"feat/{ftype.value}"]
        h0 = layer0_embed(self.bip[ftype], feats)
        ref = feats[-1]
        h_layers, ref_layers = [h0], [ref]
        pre_list, agg_list, mask_list, beta_list = [], [], [], []
        sims = [_layer_reference_sims(h0, ref)]
        for l in range(cfg.gnn_depth):
            if betas is not None:
                beta = betas[l]
            elif l < cfg.attention_layers:
                beta = self.compute_beta(ftype, h_layers[l], ref_layers[l])
            else:
                beta = beta_list[-1]
            beta_list.append(beta)
            weight = self.params[f"W/{ftype.value}/{l}"]
            out, agg, pre = propagate(h_layers[l], beta, weight, self.iso_mask,
                                      return_parts=True)
            if training and cfg.dropout > 0.0:
                mask = dropout_mask(out.shape, cfg.dropout,
                                    rng_for(self.rng_seed, "dropout", ftype.value,
                                            l, *(mask_site or ())))
                out = out * mask
            else:
                mask = None
            mask_list.append(mask)
            agg_list.append(agg)
            pre_list.append(pre)
            h_layers.append(out)
            ref_layers.append(ref_layers[l])
            sims.append(_layer_reference_sims(out, ref_layers[l + 1]))
        return TypeForward(
            ftype=ftype, h_layers=h_layers, ref_layers=ref_layers,
            betas=beta_list, agg=agg_list, pre=pre_list, masks=mask_list,
            concat=concat_layers(h_layers),
            ref_concat=np.concatenate(ref_layers),
            layer_sims=np.stack(sims),
        )

    def backward_type(self, fwd: TypeForward, upstream_concat: Array) -> dict:
        """Gradients of a scalar loss w.r.t. this type's parameters given
        the gradient w.r.t. the concatenated layer embeddings."""
        cfg = self.config
        d = cfg.dim
        if upstream_concat.shape != fwd.concat.shape:
            raise ShapeError("upstream gradient does not match concat shape")
        per_layer = [upstream_concat[:, l * d:(l + 1) * d]
                     for l in range(cfg.gnn_depth + 1)]
        grads = {}
        g_h = per_layer[cfg.gnn_depth].copy()
        for l in reversed(range(cfg.gnn_depth)):
            if fwd.masks[l] is not None:
                g_h = g_h * fwd.masks[l]
            g_pre = g_h * (fwd.pre[l] > 0)
            g_pre[self.iso_mask] = 0.0
            weight = self.params[f"W/{fwd.ftype.value}/{l}"]
            grads[f"W/{fwd.ftype.value}/{l}"] = fwd.agg[l].T @ g_pre
            d_agg = g_pre @ weight.T
            g_prev = spmm_t(fwd.betas[l], d_agg)
            g_prev[self.iso_mask] += g_h[self.iso_mask]
            g_h = per_layer[l] + g_prev
        g_feat = spmm_t(self.bip[fwd.ftype], g_h)
        if cfg.freeze_reference:
            g_feat[-1] = 0.0
        grads[f"feat/{fwd.ftype.value}"] = g_feat
        return grads

    def refresh_caches(self) -> dict:
        """Recompute attention (and reference-profile) caches from the
        current parameters; returns the clean forward passes."""
        fwds = {t: self.forward_type(t, training=False)
                for t in self.config.active_types}
        self.attn_cache = {t: fwds[t].betas for t in fwds}
        self.profile = build_profile(self, fwds)
        return fwds

    def embeddings(self, refresh: bool = True) -> dict:
        """Inference-time embeddings for all entities of both graphs."""
        if refresh or not self.attn_cache:
            fwds = self.refresh_caches()
        else:
            fwds = {t: self.forward_type(t, training=False, betas=self.attn_cache[t])
                    for t in self.config.active_types}
        concats = {t: fwds[t].concat for t in fwds}
        h_stru = structural_embed(concats, self.config.active_types)
        h_temp = temporal_embed(concats, self.config.active_types)
        if self.config.weights_mode == "none":
            w = np.full((self.n_total, 1), 1.0)
            mixed = np.concatenate([h_stru, h_temp], axis=1)
        else:
            w = self.mix_weights()
            mixed = mixed_embed(h_stru, h_temp, w)
        return {
            "per_type": concats,
            "structural": h_stru,
            "temporal": h_temp,
            "mixed": mixed,
            "weights": w,
            "forwards": fwds,
        }

    def mix_weights(self) -> Array:
        mode = self.config.weights_mode
        if mode == "equal":
            return np.full((self.n_total, 1), 0.5)
        if mode == "none":
            return np.full((self.n_total, 1), 1.0)
        if self.profile is None:
            raise ContractViolationError("reference profile not built yet")
        w, _ = fusion_weights(self.profile.reference_matrix, self.fusion_mlp())
        return w

    def split_sides(self, matrix: Array):
        return matrix[:self.n_left], matrix[self.n_left:]


def build_profile(state: EncoderState, fwds: dict) -> RichnessProfile:
    """Reference similarities per layer and per type, plus the 4-column
    reference matrix (inactive types contribute zeros)."""
    layer_sims, final_sims = {}, {}
    for t in ALL_TYPES:
        if t in fwds:
            fwd = fwds[t]
            layer_sims[t] = fwd.layer_sims
            ref = fwd.ref_concat
            final_sims[t] = _layer_reference_sims(fwd.concat, ref)
        else:
            layer_sims[t] = np.zeros((state.config.gnn_depth + 1, state.n_total))
            final_sims[t] = np.zeros(state.n_total)
    return RichnessProfile.from_sims(layer_sims, final_sims)


# ---------------------------------------------------------------------------
# contrastive loss


def contrastive_loss(batch_pairs, left_emb: Array, right_emb: Array, tau: float):
    """Bi-directional in-batch contrastive loss with exact gradients.

    Embeddings are L2-normalized internally before the scaled dot product.
    Returns (loss, grad wrt left_emb, grad wrt right_emb) with gradients in
    the full embedding shapes (zero outside batch rows).
    """
    pairs = np.asarray(batch_pairs, dtype=np.int64).reshape(-1, 2)
    b = pairs.shape[0]
    if b == 0:
        return 0.0, np.zeros_like(left_emb), np.zeros_like(right_emb)
    rows_l, rows_r = pairs[:, 0], pairs[:, 1]
    z_raw = left_emb[rows_l]
    zp_raw = right_emb[rows_r]
    z, z_norms = l2_normalize_rows(z_raw)
    zp, zp_norms = l2_normalize_rows(zp_raw)
    scores = z @ zp.T / tau
    row_p = row_softmax(scores)
    col_p = row_softmax(scores.T).T
    p_fwd = np.diag(row_p).copy()
    p_rev = np.diag(col_p).copy()
    loss = float(np.mean(-np.log((p_fwd + p_rev) / 2.0)))

    kappa = (1.0 / b) / (p_fwd + p_rev)
    s1 = kappa * p_fwd
    s2 = kappa * p_rev
    g_scores = s1[:, None] * row_p - np.diag(s1)
    g_scores += col_p * s2[None, :] - np.diag(s2)
    g_z = g_scores @ zp / tau
    g_zp = g_scores.T @ z / tau
    g_z_raw = l2_normalize_rows_backward(z, z_norms, g_z)
    g_zp_raw = l2_normalize_rows_backward(zp, zp_norms, g_zp)

    grad_left = np.zeros_like(left_emb)
    grad_right = np.zeros_like(right_emb)
    np.add.at(grad_left, rows_l, g_z_raw)
    np.add.at(grad_right, rows_r, g_zp_raw)
    return loss, grad_left, grad_right


# ---------------------------------------------------------------------------
# stage training


def _stage_types(state: EncoderState, stage: str) -> tuple:
    if stage == STAGE_STRUCTURAL:
        return state.config.active_in(STRUCTURAL_TYPES)
    if stage == STAGE_TEMPORAL:
        return state.config.active_in(TEMPORAL_TYPES)
    return state.config.active_types


def _stage_embedding(state: EncoderState, stage: str, fwds: dict):
    """Stage embedding plus a closure computing parameter gradients from
    the embedding gradient."""
    concats = {t: fwds[t].concat for t in fwds}
    actives = state.config.active_types

    if stage == STAGE_STRUCTURAL:
        emb = structural_embed(concats, actives)

        def backward(d_emb):
            return _split_type_grads(state, fwds, state.config.active_in(STRUCTURAL_TYPES), d_emb), {}

        return emb, backward

    if stage == STAGE_TEMPORAL:
        emb = temporal_embed(concats, actives)

        def backward(d_emb):
            return _split_type_grads(state, fwds, state.config.active_in(TEMPORAL_TYPES), d_emb), {}

        return emb, backward

    h_stru = structural_embed(concats, actives)
    h_temp = temporal_embed(concats, actives)
    mlp, mlp_cache = None, None
    if state.config.weights_mode == "adaptive":
        if state.profile is None:
            raise ContractViolationError("mixed stage requires a reference profile")
        mlp = state.fusion_mlp()
        w, mlp_cache = fusion_weights(state.profile.reference_matrix, mlp)
        w_stru, w_temp = w, 1.0 - w
        emb = mixed_embed(h_stru, h_temp, w)
    elif state.config.weights_mode == "equal":
        w_stru = w_temp = np.full((state.n_total, 1), 0.5)
        emb = mixed_embed(h_stru, h_temp, w_stru)
    else:
        w_stru = w_temp = np.full((state.n_total, 1), 1.0)
        emb = np.concatenate([h_stru, h_temp], axis=1)
    ds = h_stru.shape[1]

    def backward(d_emb):
        d1 = d_emb[:, :ds]
        d2 = d_emb[:, ds:]
        d_stru = w_stru * d1
        d_temp = w_temp * d2
        grads = _split_type_grads(state, fwds, state.config.active_in(STRUCTURAL_TYPES), d_stru)
        grads.update(_split_type_grads(state, fwds, state.config.active_in(TEMPORAL_TYPES), d_temp))
        fusion_grads = {}
        if mlp is not None:
            d_w = (d1 * h_stru).sum(axis=1, keepdims=True)
            d_w -= (d2 * h_temp).sum(axis=1, keepdims=True)
            mlp_grads, _ = mlp_backward(mlp, mlp_cache, d_w)
            fusion_grads = {f"fusion/{k}": v for k, v in mlp_grads.items()}
        return grads, fusion_grads

    return emb, backward


def _split_type_grads(state: EncoderState, fwds: dict, types: tuple, d_emb: Array) -> dict:
    grads = {}
    offset = 0
    for t in types:
        width = fwds[t].concat.shape[1]
        grads.update(state.backward_type(fwds[t], d_emb[:, offset:offset + width]))
        offset += width
    if offset != d_emb.shape[1]:
        raise ShapeError("embedding gradient width mismatch")
    return grads


def stage_loss(state: EncoderState, stage: str, pairs=None) -> float:
    """Clean-pass loss of a stage over the given (default: all) seeds."""
    fwds = state.refresh_caches()
    emb, _ = _stage_embedding(state, stage, fwds)
    pairs = pairs if pairs is not None else state.seeds.pairs
    batch = [(l, r) for l, r in pairs]
    left, right = state.split_sides(emb)
    loss, _, _ = contrastive_loss(batch, left, right, state.config.temperature)
    return loss


def train_stage(task, stage: str, config: EncoderConfig,
                state: EncoderState | None = None, rng_seed: int = 0,
                seeds: SeedAlignment | None = None) -> EncoderState:
    """Train one encoder stage; stages must run in order
    structural -> temporal -> mixed."""
    if stage not in STAGE_ORDER:
        raise ConfigError(f"unknown stage {stage!r}")
    position = STAGE_ORDER.index(stage)
    if state is None:
        if position != 0:
            raise ContractViolationError(
                f"stage {stage!r} requires a state trained through {STAGE_ORDER[position - 1]!r}")
        state = EncoderState(task, config, rng_seed, seeds=seeds)
    expected = list(STAGE_ORDER[:position])
    if state.stage_done != expected:
        raise ContractViolationError(
            f"stage {stage!r} expects completed stages {expected}, have {state.stage_done}")

    epochs = {STAGE_STRUCTURAL: config.epochs_structural,
              STAGE_TEMPORAL: config.epochs_temporal,
              STAGE_MIXED: config.epochs_mixed}[stage]
    encoder_keys = state.stage_param_keys(stage)
    fusion_keys = [k for k in state.params if k.startswith("fusion/")] \
        if (stage == STAGE_MIXED and config.weights_mode == "adaptive") else []
    opt = RmspropState(learning_rate=config.learning_rate,
                       decay=config.rmsprop_decay, epsilon=config.rmsprop_epsilon)
    encoder_scale = config.mixed_finetune_scale if stage == STAGE_MIXED else 1.0

    history = state.loss_history.setdefault(stage, [])
    all_pairs = np.asarray(state.seeds.pairs, dtype=np.int64).reshape(-1, 2)
    for epoch in range(epochs):
        state.refresh_caches()
        order = rng_for(state.rng_seed, "shuffle", stage, epoch).permutation(len(all_pairs))
        epoch_losses = []
        for b_i, start in enumerate(range(0, len(order), config.batch_size)):
            batch = all_pairs[order[start:start + config.batch_size]]
            fwds = {t: state.forward_type(t, training=True,
                                          betas=state.attn_cache[t],
                                          mask_site=(stage, epoch, b_i))
                    for t in state.config.active_types}
            emb, backward = _stage_embedding(state, stage, fwds)
            left, right = state.split_sides(emb)
            loss, g_left, g_right = contrastive_loss(
                batch, left, right, config.temperature)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"{stage} loss became non-finite", epoch=epoch)
            epoch_losses.append(loss)
            d_emb = np.vstack([g_left, g_right])
            grads, fusion_grads = backward(d_emb)
            updated = rmsprop_step(opt, {k: state.params[k] for k in encoder_keys},
                                   {k: grads[k] for k in encoder_keys if k in grads},
                                   lr_scale=encoder_scale)
            state.params.update(updated)
            if fusion_keys:
                updated = rmsprop_step(opt, {k: state.params[k] for k in fusion_keys},
                                       fusion_grads)
                state.params.update(updated)
        history.append(float(np.mean(epoch_losses)) if epoch_losses else 0.0)
    state.stage_done.append(stage)
    return state


# ---------------------------------------------------------------------------
# checkpointing


CHECKPOINT_VERSION = 1


def save_checkpoint(state: EncoderState, path) -> None:
    """Versioned dump of all parameter matrices; round-trips bit-exactly."""
    arrays = {f"param:{k}": v for k, v in state.params.items()}
    arrays["meta:version"] = np.array([CHECKPOINT_VERSION], dtype=np.int64)
    arrays["meta:rng_seed"] = np.array([state.rng_seed], dtype=np.int64)
    arrays["meta:seeds"] = np.asarray(state.seeds.pairs, dtype=np.int64).reshape(-1, 2)
    arrays["meta:stage_done"] = np.array(state.stage_done, dtype=np.str_)
    arrays["meta:config"] = np.array([state.config.to_json()], dtype=np.str_)
    for stage, losses in state.loss_history.items():
        arrays[f"loss:{stage}"] = np.asarray(losses, dtype=np.float64)
    np.savez(path, **arrays)


def load_checkpoint(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["meta:version"][0])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        out = {
            "rng_seed": int(data["meta:rng_seed"][0]),
            "seeds": SeedAlignment(tuple(map(tuple, data["meta:seeds"].tolist()))),
            "stage_done": [str(s) for s in data["meta:stage_done"].tolist()],
            "config": EncoderConfig.from_json(str(data["meta:config"][0])),
            "params": {k[len("param:"):]: data[k] for k in data.files
                       if k.startswith("param:")},
            "loss_history": {k[len("loss:"):]: data[k].tolist() for k in data.files
                             if k.startswith("loss:")},
        }
    return out


def restore_state(task, checkpoint: dict) -> EncoderState:
    state = EncoderState(task, checkpoint["config"], checkpoint["rng_seed"],
                         seeds=checkpoint["seeds"])
    for key, value in checkpoint["params"].items():
        if key in state.params and state.params[key].shape != value.shape:
            raise ConfigError(f"checkpoint parameter {key!r} has shape "
                              f"{value.shape}, expected {state.params[key].shape}")
        if key not in state.params and not key.startswith("nc/"):
            raise ConfigError(f"checkpoint parameter {key!r} does not fit the task")
        state.params[key] = value.astype(np.float64)
    state.stage_done = list(checkpoint["stage_done"])
    state.loss_history = {k: list(v) for k, v in checkpoint["loss_history"].items()}
    if state.stage_done:
        state.refresh_caches()
    return state
