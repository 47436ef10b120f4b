"""Temporal knowledge graph data model and dataset directory I/O.

A graph is a set of quintuple facts (head, relation, tail, start, end)
over integer id vocabularies. Missing start/end timestamps are encoded as
None in memory and as a literal ``~`` on disk. All model types are frozen
and safe to share across workers.

Dataset directory layout (tab-separated, UTF-8):
    triples_1, triples_2   head  relation  tail  start  end
    ent_links              left_entity  right_entity
    ent_ids_1, ent_ids_2   id  name      (optional display labels)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Optional

from .errors import ParseError, ValidationError

PLACEHOLDER = "~"


class FeatureType(Enum):
    """The four feature aspects of an entity: neighbor entities, relations,
    temporal points, and temporal intervals."""

    E = "E"
    R = "R"
    T = "T"
    I = "I"


STRUCTURAL_TYPES = (FeatureType.E, FeatureType.R)
TEMPORAL_TYPES = (FeatureType.T, FeatureType.I)
ALL_TYPES = STRUCTURAL_TYPES + TEMPORAL_TYPES


@dataclass(frozen=True)
class Fact:
    """One quintuple; start/end are timestamp indices or None."""

    head: int
    relation: int
    tail: int
    start: Optional[int] = None
    end: Optional[int] = None

    @property
    def interval(self):
        return (self.start, self.end)

    @property
    def is_fully_placeholder(self) -> bool:
        return self.start is None and self.end is None


@dataclass(frozen=True)
class TemporalKnowledgeGraph:
    entity_count: int
    relation_count: int
    timestamp_count: int
    facts: tuple
    interval_vocab: tuple
    labels: Optional[tuple] = None

    def __post_init__(self):
        for f in self.facts:
            if not (0 <= f.head < self.entity_count and 0 <= f.tail < self.entity_count):
                raise ValidationError(f"entity index out of range in fact {f}")
            if not 0 <= f.relation < self.relation_count:
                raise ValidationError(f"relation index out of range in fact {f}")
            for t in (f.start, f.end):
                if t is not None and not 0 <= t < self.timestamp_count:
                    raise ValidationError(f"timestamp index out of range in fact {f}")
        seen = dict.fromkeys(f.interval for f in self.facts)
        if tuple(seen) != self.interval_vocab:
            raise ValidationError("interval_vocab does not match facts")
        if self.labels is not None and len(self.labels) != self.entity_count:
            raise ValidationError("labels length must equal entity_count")

    @classmethod
    def from_facts(cls, facts, entity_count=None, relation_count=None,
                   timestamp_count=None, labels=None) -> "TemporalKnowledgeGraph":
        """Build a graph, deriving vocabulary sizes from the facts unless
        given explicitly."""
        facts = tuple(facts)
        if entity_count is None:
            entity_count = 1 + max((max(f.head, f.tail) for f in facts), default=-1)
        if relation_count is None:
            relation_count = 1 + max((f.relation for f in facts), default=-1)
        if timestamp_count is None:
            stamps = [t for f in facts for t in (f.start, f.end) if t is not None]
            timestamp_count = 1 + max(stamps, default=-1)
        vocab = tuple(dict.fromkeys(f.interval for f in facts))
        return cls(entity_count=entity_count, relation_count=relation_count,
                   timestamp_count=timestamp_count, facts=facts,
                   interval_vocab=vocab, labels=labels)

    @cached_property
    def interval_index(self) -> dict:
        return {iv: i for i, iv in enumerate(self.interval_vocab)}

    @cached_property
    def incident(self) -> tuple:
        """Per-entity tuple of incident fact indices (head or tail role)."""
        lists = [[] for _ in range(self.entity_count)]
        for k, f in enumerate(self.facts):
            lists[f.head].append(k)
            if f.tail != f.head:
                lists[f.tail].append(k)
        return tuple(tuple(l) for l in lists)

    @cached_property
    def neighbor_sets(self) -> tuple:
        """Per-entity sorted tuple of distinct neighbor entities."""
        out = []
        for e in range(self.entity_count):
            nbrs = set()
            for k in self.incident[e]:
                f = self.facts[k]
                nbrs.add(f.tail if f.head == e else f.head)
            out.append(tuple(sorted(nbrs)))
        return tuple(out)

    def temporal_value_count(self, entity: int) -> int:
        """Number of distinct temporal points attached to an entity."""
        return len(feature_counts(self, entity, FeatureType.T))


@dataclass(frozen=True)
class SeedAlignment:
    """One-to-one set of (left, right) entity pairs."""

    pairs: tuple

    def __post_init__(self):
        lefts = [l for l, _ in self.pairs]
        rights = [r for _, r in self.pairs]
        if len(set(lefts)) != len(lefts):
            raise ValidationError("duplicate left entity in alignment")
        if len(set(rights)) != len(rights):
            raise ValidationError("duplicate right entity in alignment")

    def __len__(self):
        return len(self.pairs)

    @cached_property
    def left_set(self) -> frozenset:
        return frozenset(l for l, _ in self.pairs)

    @cached_property
    def right_set(self) -> frozenset:
        return frozenset(r for _, r in self.pairs)

    @cached_property
    def as_dict(self) -> dict:
        return dict(self.pairs)


@dataclass(frozen=True)
class AlignmentTask:
    left: TemporalKnowledgeGraph
    right: TemporalKnowledgeGraph
    train_seeds: SeedAlignment
    test_pairs: SeedAlignment

    def __post_init__(self):
        if self.train_seeds.left_set & self.test_pairs.left_set:
            raise ValidationError("train and test pairs overlap on the left side")
        if self.train_seeds.right_set & self.test_pairs.right_set:
            raise ValidationError("train and test pairs overlap on the right side")
        for l, r in self.train_seeds.pairs + self.test_pairs.pairs:
            if not 0 <= l < self.left.entity_count:
                raise ValidationError(f"link left entity {l} out of range")
            if not 0 <= r < self.right.entity_count:
                raise ValidationError(f"link right entity {r} out of range")

    @property
    def all_links(self) -> tuple:
        return self.train_seeds.pairs + self.test_pairs.pairs


def feature_counts(graph: TemporalKnowledgeGraph, entity: int,
                   ftype: FeatureType) -> dict:
    """Fact count per feature of the given type incident to an entity.

    E counts facts per distinct neighbor (head and tail roles merged),
    R per relation, T per timestamp appearing as a start or end, and
    I per interval-vocab entry; fully-placeholder facts contribute to no
    temporal feature.
    """
    if not 0 <= entity < graph.entity_count:
        raise ValidationError(f"entity {entity} out of range")
    counts: dict = {}
    for k in graph.incident[entity]:
        f = graph.facts[k]
        if ftype is FeatureType.E:
            other = f.tail if f.head == entity else f.head
            counts[other] = counts.get(other, 0) + 1
        elif ftype is FeatureType.R:
            counts[f.relation] = counts.get(f.relation, 0) + 1
        elif ftype is FeatureType.T:
            for t in {f.start, f.end} - {None}:
                counts[t] = counts.get(t, 0) + 1
        else:
            if not f.is_fully_placeholder:
                idx = graph.interval_index[f.interval]
                counts[idx] = counts.get(idx, 0) + 1
    return counts


def temporal_reference_count(graph: TemporalKnowledgeGraph, entity: int) -> int:
    """Incident facts whose temporal slots are all placeholders."""
    return sum(1 for k in graph.incident[entity]
               if graph.facts[k].is_fully_placeholder)


def split_links(links, seed_fraction: float):
    """Deterministic train/test split: first ceil(fraction * n) links after
    a stable sort become training seeds."""
    if not 0.0 < seed_fraction < 1.0:
        raise ValidationError(f"seed_fraction must be in (0, 1), got {seed_fraction}")
    ordered = sorted(links)
    n_train = math.ceil(seed_fraction * len(ordered) - 1e-9)
    return ordered[:n_train], ordered[n_train:]


# ---------------------------------------------------------------------------
# dataset directory I/O


def _parse_id(token: str, path, line_no) -> int:
    try:
        value = int(token)
    except ValueError:
        raise ParseError(path, line_no, f"non-integer id {token!r}") from None
    if value < 0:
        raise ParseError(path, line_no, f"negative id {value}")
    return value


def _parse_stamp(token: str, path, line_no):
    if token == PLACEHOLDER:
        return None
    return _parse_id(token, path, line_no)


def _read_triples(path: Path):
    facts = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise ParseError(path, line_no, f"expected 5 columns, got {len(cols)}")
            facts.append(Fact(
                head=_parse_id(cols[0], path, line_no),
                relation=_parse_id(cols[1], path, line_no),
                tail=_parse_id(cols[2], path, line_no),
                start=_parse_stamp(cols[3], path, line_no),
                end=_parse_stamp(cols[4], path, line_no),
            ))
    return facts


def _read_links(path: Path):
    links = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ParseError(path, line_no, f"expected 2 columns, got {len(cols)}")
            links.append((_parse_id(cols[0], path, line_no),
                          _parse_id(cols[1], path, line_no)))
    return links


def _read_labels(path: Path):
    mapping = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ParseError(path, line_no, f"expected 2 columns, got {len(cols)}")
            mapping[_parse_id(cols[0], path, line_no)] = cols[1]
    return mapping


def _build_side(facts, labels_map, side_links, name):
    max_id = max((max(f.head, f.tail) for f in facts), default=-1)
    max_id = max(max_id, max(side_links, default=-1))
    declared = None
    labels = None
    if labels_map is not None:
        declared = 1 + max(labels_map, default=-1)
        if max_id >= declared:
            raise ValidationError(
                f"{name}: entity id {max_id} out of range for {declared} declared ids")
        labels = tuple(labels_map.get(i, "") for i in range(declared))
    return TemporalKnowledgeGraph.from_facts(
        facts, entity_count=declared if declared is not None else max_id + 1,
        labels=labels)


def load_task(dataset_dir, seed_fraction: float) -> AlignmentTask:
    """Load and validate a dataset directory; the ground-truth link file is
    split deterministically by seed_fraction."""
    root = Path(dataset_dir)
    facts_1 = _read_triples(root / "triples_1")
    facts_2 = _read_triples(root / "triples_2")
    links = _read_links(root / "ent_links")
    labels_1 = _read_labels(root / "ent_ids_1") if (root / "ent_ids_1").exists() else None
    labels_2 = _read_labels(root / "ent_ids_2") if (root / "ent_ids_2").exists() else None

    left = _build_side(facts_1, labels_1, [l for l, _ in links], "triples_1")
    right = _build_side(facts_2, labels_2, [r for _, r in links], "triples_2")

    train, test = split_links(links, seed_fraction)
    return AlignmentTask(left=left, right=right,
                         train_seeds=SeedAlignment(tuple(train)),
                         test_pairs=SeedAlignment(tuple(test)))


def _stamp_str(t) -> str:
    return PLACEHOLDER if t is None else str(t)


def save_task(task: AlignmentTask, out_dir) -> None:
    """Write a task back to the dataset directory format.

    Links are written in sorted order, so a directory produced here reloads
    to an equal task under seed_fraction = len(train) / len(links).
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for name, graph in (("triples_1", task.left), ("triples_2", task.right)):
        with open(root / name, "w", encoding="utf-8") as fh:
            for f in graph.facts:
                fh.write(f"{f.head}\t{f.relation}\t{f.tail}\t"
                         f"{_stamp_str(f.start)}\t{_stamp_str(f.end)}\n")
    with open(root / "ent_links", "w", encoding="utf-8") as fh:
        for l, r in sorted(task.all_links):
            fh.write(f"{l}\t{r}\n")
    for name, graph in (("ent_ids_1", task.left), ("ent_ids_2", task.right)):
        if graph.labels is not None:
            with open(root / name, "w", encoding="utf-8") as fh:
                for i, label in enumerate(graph.labels):
                    fh.write(f"{i}\t{label}\n")
