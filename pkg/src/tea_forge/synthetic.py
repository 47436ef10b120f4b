"""Synthetic twin-graph task generator for desk-scale experiments.

The right graph is the left graph under a random entity permutation with a
configurable fraction of facts dropped, rewired, or timestamp-jittered.
The ground-truth links are exactly the permutation, so alignment quality
can be measured against a known answer without external datasets.
"""

from __future__ import annotations

from .errors import ValidationError
from .numeric import rng_for
from .tkg import AlignmentTask, Fact, SeedAlignment, TemporalKnowledgeGraph, split_links


def _draw_interval(rng, n_timestamps: int, temporal_fraction: float):
    if rng.random() >= temporal_fraction:
        return None, None
    kind = rng.random()
    a = int(rng.integers(n_timestamps))
    if kind < 0.2:
        return a, None
    if kind < 0.4:
        return None, a
    b = int(rng.integers(a, n_timestamps))
    return a, b


def _jitter(t, rng, n_timestamps: int):
    if t is None:
        return None
    return int(min(max(t + rng.choice((-1, 1)), 0), n_timestamps - 1))


def generate_synthetic_task(n_entities: int, n_relations: int = 10,
                            n_timestamps: int = 40, density: float = 4.0,
                            temporal_fraction: float = 0.5, noise: float = 0.0,
                            rng_seed: int = 0,
                            seed_fraction: float = 0.3) -> AlignmentTask:
    """Generate a pair of alignable graphs plus a split ground truth.

    density is the mean out-degree of the left graph; noise is the fraction
    of right-side facts subjected to a perturbation (drop / rewire /
    timestamp jitter). Deterministic for a fixed rng_seed.
    """
    if n_entities < 1 or n_relations < 1 or n_timestamps < 1:
        raise ValidationError("entity, relation and timestamp counts must be >= 1")
    if density < 1:
        raise ValidationError("density must be >= 1")
    if not 0.0 <= noise < 1.0:
        raise ValidationError("noise must be in [0, 1)")
    if not 0.0 <= temporal_fraction <= 1.0:
        raise ValidationError("temporal_fraction must be in [0, 1]")

    rng = rng_for(rng_seed, "synth", "left")
    n_facts = int(round(n_entities * density))
    seen = {}
    for _ in range(n_facts):
        head = int(rng.integers(n_entities))
        tail = int(rng.integers(n_entities))
        if n_entities > 1:
            while tail == head:
                tail = int(rng.integers(n_entities))
        rel = int(rng.integers(n_relations))
        start, end = _draw_interval(rng, n_timestamps, temporal_fraction)
        seen.setdefault(Fact(head, rel, tail, start, end), None)
    left_facts = tuple(seen)
    if not left_facts:
        raise ValidationError("parameters produced an empty fact set")

    perm_rng = rng_for(rng_seed, "synth", "perm")
    perm = perm_rng.permutation(n_entities)

    noise_rng = rng_for(rng_seed, "synth", "noise")
    right_seen = {}
    for f in left_facts:
        head, rel, tail = int(perm[f.head]), f.relation, int(perm[f.tail])
        start, end = f.start, f.end
        if noise > 0.0 and noise_rng.random() < noise:
            action = noise_rng.random()
            if action < 0.4:
                continue
            if action < 0.7 or f.is_fully_placeholder:
                tail = int(noise_rng.integers(n_entities))
                if n_entities > 1:
                    while tail == head:
                        tail = int(noise_rng.integers(n_entities))
            else:
                start = _jitter(start, noise_rng, n_timestamps)
                end = _jitter(end, noise_rng, n_timestamps)
        right_seen.setdefault(Fact(head, rel, tail, start, end), None)
    right_facts = tuple(right_seen)
    if not right_facts:
        raise ValidationError("noise removed every right-side fact")

    left = TemporalKnowledgeGraph.from_facts(left_facts, entity_count=n_entities)
    right = TemporalKnowledgeGraph.from_facts(right_facts, entity_count=n_entities)

    links = [(i, int(perm[i])) for i in range(n_entities)]
    train, test = split_links(links, seed_fraction)
    return AlignmentTask(left=left, right=right,
                         train_seeds=SeedAlignment(tuple(train)),
                         test_pairs=SeedAlignment(tuple(test)))
