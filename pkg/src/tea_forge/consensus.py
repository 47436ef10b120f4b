"""Dual-view neighborhood consensus de-noising.

Structural and temporal embeddings are concatenated, top-k candidates are
retrieved per left entity by exact blocked dot products, and the retained
scores are iteratively refined by a small MLP over randomized-feature
propagation distances. Training maximizes the refined log-probability of
the seed alignments while fine-tuning both encoders through the
concatenated embeddings.

Retrieval patterns and the randomized inputs are redrawn once per epoch
and held fixed within it, so the hand-derived gradients are exact for each
cached forward pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    ShapeError,
    TrainingDivergedError,
    UnusableRetrievalError,
)
from .features import entity_adjacency
from .numeric import (
    Array,
    MlpParams,
    RmspropState,
    SparseRowMatrix,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    mlp_backward,
    mlp_forward,
    rmsprop_step,
    rng_for,
    row_softmax,
    spmm,
    spmm_t,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConsensusParams:
    random_dim: int = 32
    propagation_steps: int = 5
    refine_hidden: int = 32
    k: int = 15
    epochs: int = 90
    finetune_scale: float = 0.1
    dual_view: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("top-k must be >= 1")
        if self.propagation_steps < 1:
            raise ConfigError("propagation_steps must be >= 1")


@dataclass
class TopKSimilarity:
    """Per-left-entity retained right candidates with softmax probabilities.

    indices and probs have shape (left entity count, k); each row's
    probabilities sum to 1 and its indices are distinct.
    """

    indices: Array
    probs: Array

    @property
    def rows(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def to_dense(self, n_right: int, fill: float = 0.0) -> Array:
        dense = np.full((self.rows, n_right), fill)
        np.put_along_axis(dense, self.indices, self.probs, axis=1)
        return dense


def dual_view_concat(h_stru: Array, h_temp: Array) -> Array:
    """Concatenate the two views and L2-normalize each row."""
    if h_stru.shape[0] != h_temp.shape[0]:
        raise ShapeError("view row counts differ")
    out, _ = l2_normalize_rows(np.concatenate([h_stru, h_temp], axis=1))
    return out


def topk_scores(h: Array, h_prime: Array, k: int, block: int = 256):
    """Exact top-k inner products per left row, ties broken by smaller
    right index. Returns (indices, raw scores) of shape (n_left, k)."""
    if h.shape[1] != h_prime.shape[1]:
        raise ShapeError("embedding dims differ")
    n_right = h_prime.shape[0]
    if k > n_right:
        log.warning("top-k %d clamped to right entity count %d", k, n_right)
        k = n_right
    idx_out = np.empty((h.shape[0], k), dtype=np.int64)
    score_out = np.empty((h.shape[0], k))
    for start in range(0, h.shape[0], block):
        scores = h[start:start + block] @ h_prime.T
        for r in range(scores.shape[0]):
            order = np.lexsort((np.arange(n_right), -scores[r]))[:k]
            idx_out[start + r] = order
            score_out[start + r] = scores[r, order]
    return idx_out, score_out


def topk_retrieve(h: Array, h_prime: Array, k: int) -> TopKSimilarity:
    """Retrieve top-k candidates and softmax over the retained scores."""
    indices, scores = topk_scores(h, h_prime, k)
    return TopKSimilarity(indices=indices, probs=row_softmax(scores))


def randomized_propagation(adjacency: SparseRowMatrix, steps: int, random_dim: int,
                           rng_seed=None, inputs: Array | None = None) -> Array:
    """Degree-normalized sum aggregation of randomized node features.

    Starts from N(0, 1) features drawn from rng_seed unless explicit inputs
    are given (the seeded right-graph variant passes S^T I here). steps=0
    returns the inputs unchanged.
    """
    if inputs is None:
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) \
            else np.random.default_rng(rng_seed)
        inputs = rng.standard_normal((adjacency.rows, random_dim))
    out = inputs
    for _ in range(steps):
        out = spmm(adjacency, out)
    return out


def randomized_propagation_t(adjacency: SparseRowMatrix, steps: int,
                             upstream: Array) -> Array:
    """Transpose of the propagation operator, used by backprop."""
    out = upstream
    for _ in range(steps):
        out = spmm_t(adjacency, out)
    return out


# ---------------------------------------------------------------------------
# refinement recursion


@dataclass
class RefineCache:
    pattern: Array        # (n_left, k) retained right indices
    raw: Array            # initial retained scores
    s0: Array             # softmax of raw
    s_steps: list         # score matrices S^0 .. S^steps (n_left, k)
    o_left: Array
    inputs: Array         # randomized left inputs I
    o_rights: list        # O' per step
    mlp_caches: list
    mlp: MlpParams
    final: Array          # softmax of S^steps


def _transport_inputs(scores: Array, pattern: Array, inputs: Array,
                      n_right: int) -> Array:
    """S^T I restricted to the retained pattern."""
    out = np.zeros((n_right, inputs.shape[1]))
    flat_rows = np.repeat(np.arange(pattern.shape[0]), pattern.shape[1])
    np.add.at(out, pattern.ravel(), scores.ravel()[:, None] * inputs[flat_rows])
    return out


def refine(scores: Array, pattern: Array, o_left: Array, inputs: Array,
           adjacency_right: SparseRowMatrix, mlp: MlpParams, steps: int,
           prop_steps: int) -> RefineCache:
    """Iteratively add MLP(d_ij) to the retained scores, recomputing the
    right-graph propagation from the current scores at every step, then
    apply a final per-row softmax. The sparsity pattern never changes."""
    n_left, k = pattern.shape
    n_right = adjacency_right.rows
    flat_rows = np.repeat(np.arange(n_left), k)
    s0 = row_softmax(scores)
    s_steps = [s0]
    o_rights, mlp_caches = [], []
    current = s0
    for _ in range(steps):
        transported = _transport_inputs(current, pattern, inputs, n_right)
        o_right = randomized_propagation(adjacency_right, prop_steps,
                                         inputs.shape[1], inputs=transported)
        o_rights.append(o_right)
        dists = o_left[flat_rows] - o_right[pattern.ravel()]
        update, cache = mlp_forward(mlp, dists)
        mlp_caches.append(cache)
        current = current + update.reshape(n_left, k)
        s_steps.append(current)
    return RefineCache(pattern=pattern, raw=scores, s0=s0, s_steps=s_steps,
                       o_left=o_left, inputs=inputs, o_rights=o_rights,
                       mlp_caches=mlp_caches, mlp=mlp, final=row_softmax(current))


def refine_backward(cache: RefineCache, adjacency_right: SparseRowMatrix,
                    prop_steps: int, d_final_scores: Array):
    """Backprop through the refinement recursion.

    d_final_scores is the gradient w.r.t. S^steps (after the loss's own
    softmax handling). Returns (mlp grads, gradient w.r.t. the raw retained
    scores)."""
    n_left, k = cache.pattern.shape
    flat_rows = np.repeat(np.arange(n_left), k)
    flat_cols = cache.pattern.ravel()
    mlp_grads = None
    g = d_final_scores
    for t in reversed(range(len(cache.mlp_caches))):
        step_grads, d_dists = mlp_backward(cache.mlp, cache.mlp_caches[t],
                                           g.reshape(-1, 1))
        if mlp_grads is None:
            mlp_grads = step_grads
        else:
            for key in mlp_grads:
                mlp_grads[key] += step_grads[key]
        d_o_right = np.zeros_like(cache.o_rights[t])
        np.add.at(d_o_right, flat_cols, -d_dists)
        d_transported = randomized_propagation_t(adjacency_right, prop_steps,
                                                 d_o_right)
        d_scores_extra = np.einsum(
            "pd,pd->p", cache.inputs[flat_rows], d_transported[flat_cols])
        g = g + d_scores_extra.reshape(n_left, k)
    if mlp_grads is None:
        mlp_grads = {key: np.zeros_like(val)
                     for key, val in cache.mlp.flat().items()}
    # through the initial softmax of the raw scores
    inner = np.sum(g * cache.s0, axis=1, keepdims=True)
    d_raw = cache.s0 * (g - inner)
    return mlp_grads, d_raw


def seed_loss(cache: RefineCache, seed_rows: Array, seed_positions: Array):
    """Negative log refined probability of the seed pairs, with the exact
    gradient w.r.t. S^steps."""
    final = cache.final
    picked = final[seed_rows, seed_positions]
    loss = float(-np.sum(np.log(np.maximum(picked, 1e-300))))
    d_scores = np.zeros_like(final)
    for r, p in zip(seed_rows, seed_positions):
        d_scores[r] += final[r]
        d_scores[r, p] -= 1.0
    return loss, d_scores


def train_consensus(task, state, params: ConsensusParams) -> dict:
    """Train the refinement MLP and fine-tune both encoders with the seed
    consensus loss. Returns a summary dict with per-epoch losses and the
    count of seeds excluded by retrieval."""
    from .encoders import STAGE_ORDER, _split_type_grads
    from .errors import ContractViolationError
    from .tkg import STRUCTURAL_TYPES, TEMPORAL_TYPES

    if list(STAGE_ORDER) != state.stage_done:
        raise ContractViolationError(
            "consensus requires structural, temporal and mixed stages first")

    if "nc/W1" not in state.params:
        mlp0 = MlpParams.create(params.random_dim, params.refine_hidden, 1,
                                rng_for(state.rng_seed, "nc_init"),
                                output_activation="identity", zero_output=True)
        for key, val in mlp0.flat().items():
            state.params[f"nc/{key}"] = val

    adj_left = entity_adjacency(task.left)
    adj_right = entity_adjacency(task.right)
    seed_pairs = np.asarray(state.seeds.pairs, dtype=np.int64).reshape(-1, 2)
    encoder_keys = [k for k in state.params
                    if k.startswith("feat/") or k.startswith("W/")]
    nc_keys = ["nc/W1", "nc/b1", "nc/W2", "nc/b2"]
    opt = RmspropState(learning_rate=state.config.learning_rate,
                       decay=state.config.rmsprop_decay,
                       epsilon=state.config.rmsprop_epsilon)

    history = state.loss_history.setdefault("consensus", [])
    excluded_last = 0
    for epoch in range(params.epochs):
        fwds = state.refresh_caches()
        view = _consensus_view(state, fwds, params.dual_view)
        h, h_prime = state.split_sides(view["emb"])
        pattern, raw = topk_scores(h, h_prime, params.k)
        inputs = rng_for(state.rng_seed, "nc_rand", epoch).standard_normal(
            (task.left.entity_count, params.random_dim))
        o_left = randomized_propagation(adj_left, params.propagation_steps,
                                        params.random_dim, inputs=inputs)
        mlp = MlpParams(W1=state.params["nc/W1"], b1=state.params["nc/b1"],
                        W2=state.params["nc/W2"], b2=state.params["nc/b2"],
                        output_activation="identity")
        cache = refine(raw, pattern, o_left, inputs, adj_right, mlp,
                       steps=params.propagation_steps,
                       prop_steps=params.propagation_steps)

        seed_rows, seed_positions, excluded = _locate_seeds(pattern, seed_pairs)
        excluded_last = excluded
        if len(seed_rows) == 0:
            raise UnusableRetrievalError(
                "every training seed is missing from its top-k candidates")
        if excluded:
            log.debug("consensus epoch %d: %d seeds outside top-%d",
                      epoch, excluded, params.k)

        loss, d_scores = seed_loss(cache, seed_rows, seed_positions)
        if not np.isfinite(loss):
            raise TrainingDivergedError("consensus loss became non-finite",
                                        epoch=epoch)
        history.append(loss)

        mlp_grads, d_raw = refine_backward(cache, adj_right,
                                           params.propagation_steps, d_scores)
        # raw score gradient -> both embedding sides
        d_h = np.zeros_like(h)
        d_hp = np.zeros_like(h_prime)
        flat_rows = np.repeat(np.arange(pattern.shape[0]), pattern.shape[1])
        flat_cols = pattern.ravel()
        flat_g = d_raw.ravel()
        d_h += _scatter_rows(flat_rows, flat_g[:, None] * h_prime[flat_cols], h.shape)
        np.add.at(d_hp, flat_cols, flat_g[:, None] * h[flat_rows])
        d_view = np.vstack([d_h, d_hp])
        d_concat = l2_normalize_rows_backward(view["emb"], view["norms"], d_view)

        ds = view["stru_width"]
        grads = _split_type_grads(state, fwds,
                                  state.config.active_in(STRUCTURAL_TYPES),
                                  view["w_stru"] * d_concat[:, :ds])
        grads.update(_split_type_grads(state, fwds,
                                       state.config.active_in(TEMPORAL_TYPES),
                                       view["w_temp"] * d_concat[:, ds:]))

        updated = rmsprop_step(opt, {k: state.params[k] for k in nc_keys},
                               {f"nc/{k}": v for k, v in mlp_grads.items()})
        state.params.update(updated)
        updated = rmsprop_step(opt, {k: state.params[k] for k in encoder_keys},
                               {k: grads[k] for k in encoder_keys if k in grads},
                               lr_scale=params.finetune_scale)
        state.params.update(updated)

    if "consensus" not in state.stage_done:
        state.stage_done.append("consensus")
    return {"losses": list(history), "excluded_seeds": excluded_last}


def _consensus_view(state, fwds, dual_view: bool) -> dict:
    from .encoders import mixed_embed, structural_embed, temporal_embed

    concats = {t: fwds[t].concat for t in fwds}
    h_stru = structural_embed(concats, state.config.active_types)
    h_temp = temporal_embed(concats, state.config.active_types)
    ones = np.ones((state.n_total, 1))
    if dual_view or state.config.weights_mode == "none":
        raw = np.concatenate([h_stru, h_temp], axis=1)
        w_stru, w_temp = ones, ones
    else:
        # single-view variant: retrieval over the mixed encoder output
        w = state.mix_weights()
        raw = mixed_embed(h_stru, h_temp, w)
        w_stru, w_temp = w, 1.0 - w
    emb, norms = l2_normalize_rows(raw)
    return {"emb": emb, "norms": norms, "stru_width": h_stru.shape[1],
            "w_stru": w_stru, "w_temp": w_temp}


def _scatter_rows(rows: Array, values: Array, shape) -> Array:
    out = np.zeros(shape)
    np.add.at(out, rows, values)
    return out


def _locate_seeds(pattern: Array, seed_pairs: Array):
    rows, positions = [], []
    excluded = 0
    for left, right in seed_pairs:
        hit = np.nonzero(pattern[left] == right)[0]
        if hit.size:
            rows.append(left)
            positions.append(int(hit[0]))
        else:
            excluded += 1
    return np.asarray(rows, dtype=np.int64), np.asarray(positions, dtype=np.int64), excluded


# ---------------------------------------------------------------------------
# Sinkhorn operator


def sinkhorn(scores: Array, iterations: int = 100, tol: float = 1e-9) -> Array:
    """Alternating row/column normalization of exp(scores) into a doubly
    stochastic matrix, with early exit once both deviations drop below tol.

    Rows are max-shifted before exponentiation; the shift cancels exactly
    in the first row normalization.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"sinkhorn needs a square matrix, got {scores.shape}")
    if not np.isfinite(scores).all():
        raise ShapeError("sinkhorn input must be finite")
    out = np.exp(scores - scores.max(axis=1, keepdims=True))
    for _ in range(iterations):
        out = out / out.sum(axis=1, keepdims=True)
        out = out / out.sum(axis=0, keepdims=True)
        row_dev = np.abs(out.sum(axis=1) - 1.0).max()
        col_dev = np.abs(out.sum(axis=0) - 1.0).max()
        if max(row_dev, col_dev) < tol:
            break
    return out
