"""Inference, metrics, bi-directional seed expansion, run orchestration,
ablation sweeps, and run configuration.

A full run trains structural -> temporal -> mixed -> consensus, evaluates
on the held-out pairs, and (for iterations > 1) expands the training seeds
with pairs on which the structural and temporal views agree in a mutual
argmax sense, then retrains from fresh parameters on the grown seed set.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .consensus import ConsensusParams, TopKSimilarity, sinkhorn, train_consensus
from .encoders import (
    STAGE_ORDER,
    EncoderConfig,
    EncoderState,
    save_checkpoint,
    train_stage,
)
from .errors import ConfigError, ContractViolationError, ValidationError
from .features import RICHNESS_BIN_EDGES, richness_bins
from .numeric import Array, l2_normalize_rows, rng_for
from .tkg import ALL_TYPES, AlignmentTask, FeatureType, SeedAlignment

log = logging.getLogger(__name__)

SIMILARITY_SOURCES = ("structural", "temporal", "mixed")


@dataclass(frozen=True)
class SimilarityView:
    """A similarity matrix tagged with the encoder it came from."""

    source: str
    matrix: object  # dense ndarray or TopKSimilarity

    def __post_init__(self):
        if self.source not in SIMILARITY_SOURCES:
            raise ContractViolationError(f"unknown similarity source {self.source!r}")

    def dense(self, n_right: int | None = None) -> Array:
        if isinstance(self.matrix, TopKSimilarity):
            if n_right is None:
                raise ValidationError("top-k view needs the right entity count")
            return self.matrix.to_dense(n_right, fill=-np.inf)
        return np.asarray(self.matrix, dtype=np.float64)


@dataclass
class MetricReport:
    mrr: float
    hits: dict
    count: int
    slices: dict = field(default_factory=dict)

    def rows(self):
        """Flat (metric, slice, value) triples in a deterministic order."""
        out = [("mrr", "all", self.mrr), ("n", "all", float(self.count))]
        for n in sorted(self.hits):
            out.append((f"hit@{n}", "all", self.hits[n]))
        for name in sorted(self.slices):
            sub = self.slices[name]
            out.append(("mrr", name, sub.mrr))
            out.append(("n", name, float(sub.count)))
            for n in sorted(sub.hits):
                out.append((f"hit@{n}", name, sub.hits[n]))
        return out


ABLATION_FLAGS = (
    "drop_e", "drop_r", "drop_t", "drop_i",
    "drop_attention_e", "drop_attention_r", "drop_attention_t", "drop_attention_i",
    "gat_attention", "relation_attention",
    "equal_weights", "no_dynamic_weighting",
    "no_consensus", "no_dual_view",
)


@dataclass(frozen=True)
class RunConfig:
    # encoder settings
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
    freeze_reference: bool = False
    # consensus settings
    random_dim: int = 32
    propagation_steps: int = 5
    refine_hidden: int = 32
    top_k: int = 15
    epochs_consensus: int = 90
    consensus_finetune_scale: float = 0.1
    # run settings
    iterations: int = 2
    rng_seed: int = 0
    sinkhorn_enabled: bool = False
    hit_levels: tuple = (1, 5, 10)
    dense_threshold: int = 5
    # ablation flags
    drop_e: bool = False
    drop_r: bool = False
    drop_t: bool = False
    drop_i: bool = False
    drop_attention_e: bool = False
    drop_attention_r: bool = False
    drop_attention_t: bool = False
    drop_attention_i: bool = False
    gat_attention: bool = False
    relation_attention: bool = False
    equal_weights: bool = False
    no_dynamic_weighting: bool = False
    no_consensus: bool = False
    no_dual_view: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if sum((self.gat_attention, self.relation_attention)) > 1:
            raise ConfigError("at most one attention-mechanism flag may be active")
        if self.equal_weights and self.no_dynamic_weighting:
            raise ConfigError("equal_weights conflicts with no_dynamic_weighting")

    def encoder_config(self) -> EncoderConfig:
        dropped = tuple(t.value for t in ALL_TYPES
                        if getattr(self, f"drop_{t.value.lower()}"))
        disabled = tuple(t.value for t in ALL_TYPES
                         if getattr(self, f"drop_attention_{t.value.lower()}"))
        mode = "gat" if self.gat_attention else \
            "relation" if self.relation_attention else "richness"
        weights = "equal" if self.equal_weights else \
            "none" if self.no_dynamic_weighting else "adaptive"
        return EncoderConfig(
            dim=self.dim, gnn_depth=self.gnn_depth,
            attention_layers=self.attention_layers, batch_size=self.batch_size,
            dropout=self.dropout, temperature=self.temperature,
            learning_rate=self.learning_rate,
            epochs_structural=self.epochs_structural,
            epochs_temporal=self.epochs_temporal, epochs_mixed=self.epochs_mixed,
            mixed_finetune_scale=self.mixed_finetune_scale,
            fusion_hidden=self.fusion_hidden, freeze_reference=self.freeze_reference,
            attention_mode=mode, disabled_attention=disabled,
            dropped_types=dropped, weights_mode=weights,
        )

    def consensus_params(self) -> ConsensusParams:
        return ConsensusParams(
            random_dim=self.random_dim, propagation_steps=self.propagation_steps,
            refine_hidden=self.refine_hidden, k=self.top_k,
            epochs=self.epochs_consensus,
            finetune_scale=self.consensus_finetune_scale,
            dual_view=not self.no_dual_view,
        )

    def with_flags(self, **flags) -> "RunConfig":
        unknown = set(flags) - set(ABLATION_FLAGS)
        if unknown:
            raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
        return dataclasses.replace(self, **flags)

    def resolved_lines(self):
        """key = value lines covering every field, sorted by key."""
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return lines


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse the key = value run configuration format."""
    values = {}
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected key = value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in fields:
            raise ConfigError(f"line {line_no}: unknown configuration key {key!r}")
        values[key] = _parse_value(fields[key], raw, line_no)
    merged = dataclasses.asdict(base) if base is not None else {}
    merged.update(values)
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _parse_value(field_def, raw: str, line_no: int):
    kind = field_def.type
    try:
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(
            f"line {line_no}: cannot parse {raw!r} as {kind}") from None
    return raw


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base=base)


# ---------------------------------------------------------------------------
# ranking and metrics


def rank_and_predict(view: SimilarityView, n_right: int | None = None) -> dict:
    """Ranked right candidates per left entity, plus argmax predictions.

    Descending score, ties broken by smaller right index. Rows with no
    finite score are reported as unrankable (None prediction). For top-k
    views only retained candidates are ranked.
    """
    dense = view.dense(n_right)
    n = dense.shape[1]
    ranking = np.empty(dense.shape, dtype=np.int64)
    predictions = []
    for i in range(dense.shape[0]):
        order = np.lexsort((np.arange(n), -dense[i]))
        ranking[i] = order
        best = order[0]
        predictions.append(int(best) if np.isfinite(dense[i, best]) else None)
    return {"ranking": ranking, "predictions": predictions, "scores": dense}


def rank_of_true(scores: Array, truth: int):
    """1-based rank of the true counterpart under the tie rule; None when
    the truth has no finite score (e.g. outside the retrieved top-k)."""
    s = scores[truth]
    if not np.isfinite(s):
        return None
    better = np.count_nonzero(scores > s)
    equal_before = np.count_nonzero(scores[:truth] == s)
    return 1 + better + int(equal_before)


def _slice_assignments(task: AlignmentTask, dense_threshold: int) -> dict:
    """Slice labels per left entity: richness bins per type and the
    temporal-density group."""
    labels = {}
    for t in ALL_TYPES:
        bins = richness_bins(task.left, t)
        labels[t] = bins
    groups = []
    for e in range(task.left.entity_count):
        n_temporal = task.left.temporal_value_count(e)
        if n_temporal == 0:
            groups.append("Non-tem")
        elif n_temporal >= dense_threshold:
            groups.append("Dense-tem")
        else:
            groups.append("Sparse-tem")
    labels["temporal"] = groups
    return labels


def evaluate(predictions: dict, test_pairs: SeedAlignment, task: AlignmentTask,
             hit_levels=(1, 5, 10), dense_threshold: int = 5) -> MetricReport:
    """MRR and Hits@N over the test pairs, overall and per slice."""
    scores = predictions["scores"]
    missing = [l for l, _ in test_pairs.pairs if l >= scores.shape[0]]
    if missing:
        raise ValidationError(f"test entities were never ranked: {missing}")
    ranks = {}
    for left, right in test_pairs.pairs:
        ranks[left] = rank_of_true(scores[left], right)

    slice_labels = _slice_assignments(task, dense_threshold)
    buckets = {}
    for left, _ in test_pairs.pairs:
        keys = ["all"]
        for t in ALL_TYPES:
            keys.append(f"{t.value}:{slice_labels[t][left]}")
        keys.append(f"temporal:{slice_labels['temporal'][left]}")
        for key in keys:
            buckets.setdefault(key, []).append(ranks[left])

    def summarize(rank_list):
        rr = [0.0 if r is None else 1.0 / r for r in rank_list]
        hits = {n: float(np.mean([r is not None and r <= n for r in rank_list]))
                for n in hit_levels}
        return float(np.mean(rr)), hits, len(rank_list)

    mrr, hits, count = summarize(buckets.pop("all"))
    slices = {}
    for key in sorted(buckets):
        s_mrr, s_hits, s_count = summarize(buckets[key])
        slices[key] = MetricReport(mrr=s_mrr, hits=s_hits, count=s_count)
    return MetricReport(mrr=mrr, hits=hits, count=count, slices=slices)


# ---------------------------------------------------------------------------
# Algorithm: bi-directional dual-aspect seed selection


def select_seeds(view_stru: SimilarityView, view_temp: SimilarityView,
                 seeds: SeedAlignment, n_right: int | None = None) -> SeedAlignment:
    """Expand the seed set with pairs passing the four-argmax agreement.

    A pair (e, e*) is added iff e* is e's argmax under both views, e is
    e*'s argmax in the reverse direction under both views, and the two
    forward argmaxes coincide. Already-seeded entities are skipped; if two
    new pairs claim the same right entity, the higher-scoring one wins.
    """
    if view_stru.source != "structural" or view_temp.source != "temporal":
        raise ContractViolationError(
            "select_seeds needs the structural view first and the temporal second")
    s_r = view_stru.dense(n_right)
    s_t = view_temp.dense(n_right)
    if s_r.shape != s_t.shape:
        raise ContractViolationError("view shapes differ")

    fwd_r = _argmax_rows(s_r)
    fwd_t = _argmax_rows(s_t)
    rev_r = _argmax_rows(s_r.T)
    rev_t = _argmax_rows(s_t.T)

    taken_left = set(seeds.left_set)
    taken_right = set(seeds.right_set)
    candidates = []
    for e in range(s_r.shape[0]):
        if e in taken_left:
            continue
        best_r, best_t = fwd_r[e], fwd_t[e]
        if best_r is None or best_t is None or best_r != best_t:
            continue
        if rev_r[best_r] != e or rev_t[best_t] != e:
            continue
        score = float(s_r[e, best_r] + s_t[e, best_t])
        candidates.append((e, best_r, score))

    chosen = {}
    for e, target, score in candidates:
        if target in taken_right:
            continue
        held = chosen.get(target)
        if held is None or score > held[1]:
            chosen[target] = (e, score)
    new_pairs = sorted((e, target) for target, (e, _) in chosen.items())
    return SeedAlignment(tuple(seeds.pairs) + tuple(new_pairs))


def _argmax_rows(matrix: Array):
    out = []
    for row in matrix:
        if not np.isfinite(row).any():
            out.append(None)
        else:
            peak = np.nanmax(row)
            out.append(int(np.nonzero(row == peak)[0][0]))
    return out


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class IterationResult:
    seeds: SeedAlignment
    report: MetricReport
    views: dict
    state: EncoderState
    consensus_summary: dict | None


@dataclass
class PipelineResult:
    report: MetricReport
    iterations: list
    config: RunConfig

    @property
    def final_state(self) -> EncoderState:
        return self.iterations[-1].state


def similarity_views(state: EncoderState) -> dict:
    """Dense cosine similarity matrices per encoder source."""
    emb = state.embeddings()
    views = {}
    for source in SIMILARITY_SOURCES:
        matrix = emb[source]
        left, right = state.split_sides(matrix)
        left, _ = l2_normalize_rows(left)
        right, _ = l2_normalize_rows(right)
        views[source] = SimilarityView(source=source, matrix=left @ right.T)
    return views


def _train_iteration(task: AlignmentTask, config: RunConfig,
                     seeds: SeedAlignment, iter_seed: int) -> IterationResult:
    enc_config = config.encoder_config()
    state = train_stage(task, "structural", enc_config, rng_seed=iter_seed,
                        seeds=seeds)
    state = train_stage(task, "temporal", enc_config, state=state)
    state = train_stage(task, "mixed", enc_config, state=state)
    summary = None
    if not config.no_consensus:
        summary = train_consensus(task, state, config.consensus_params())
    views = similarity_views(state)
    inference = views["mixed"].dense()
    if config.sinkhorn_enabled:
        if inference.shape[0] == inference.shape[1]:
            inference = sinkhorn(inference)
        else:
            log.warning("sinkhorn skipped: similarity matrix is not square")
    predictions = rank_and_predict(SimilarityView("mixed", inference))
    report = evaluate(predictions, task.test_pairs, task,
                      hit_levels=tuple(config.hit_levels),
                      dense_threshold=config.dense_threshold)
    return IterationResult(seeds=seeds, report=report, views=views,
                           state=state, consensus_summary=summary)


def run_pipeline(task: AlignmentTask, config: RunConfig,
                 out_dir=None) -> PipelineResult:
    """Full training/evaluation run, deterministic for a fixed rng_seed.

    With iterations > 1, each subsequent round expands the training seeds
    via bi-directional dual-aspect selection and retrains from fresh
    parameters on the grown seed set.
    """
    from .report import write_run_artifacts

    seeds = task.train_seeds
    results = []
    for it in range(config.iterations):
        iter_seed = int(rng_for(config.rng_seed, "iteration", it).integers(2**63))
        result = _train_iteration(task, config, seeds, iter_seed)
        results.append(result)
        if it + 1 < config.iterations:
            seeds = select_seeds(result.views["structural"],
                                 result.views["temporal"], seeds)
            log.info("iteration %d: seed set grew to %d pairs", it + 1, len(seeds))
    outcome = PipelineResult(report=results[-1].report, iterations=results,
                             config=config)
    if out_dir is not None:
        write_run_artifacts(outcome, task, Path(out_dir))
    return outcome


def ablate(task: AlignmentTask, base_config: RunConfig, flag_sets,
           out_dir=None) -> dict:
    """Run the pipeline once per flag configuration with a shared seed and
    collect a side-by-side comparison."""
    from .report import write_ablation_artifacts

    table = {}
    for name, flags in flag_sets.items():
        config = base_config.with_flags(**flags)
        result = run_pipeline(task, config)
        table[name] = {"h@1": result.report.hits.get(1, 0.0),
                       "mrr": result.report.mrr}
        log.info("ablation %s: H@1 %.4f MRR %.4f", name,
                 table[name]["h@1"], table[name]["mrr"])
    if out_dir is not None:
        write_ablation_artifacts(table, Path(out_dir))
    return table


def seed_precision(added_pairs, truth_pairs) -> float:
    """Fraction of newly added pairs present in the ground truth; 1.0 when
    nothing was added."""
    added = list(added_pairs)
    if not added:
        return 1.0
    truth = set(truth_pairs)
    return sum(1 for p in added if tuple(p) in truth) / len(added)
