"""Triple files, integer dictionaries, directed queries, and filtered-answer indexing."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class TripleParseError(ValueError):
    """Raised for malformed or empty triple files."""


class Direction(Enum):
    """Which slot of a triple a query asks for."""

    TAIL = "tail"  # <anchor, relation, ?>
    HEAD = "head"  # <?, relation, anchor>


@dataclass(frozen=True)
class Triple:
    """One (head, relation, tail) fact with dense integer ids."""

    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class Query:
    """A directed link-prediction question: <anchor, relation, ?> or <?, relation, anchor>."""

    direction: Direction
    anchor: int
    relation: int


@dataclass(frozen=True)
class QueryExample:
    """A query paired with its known true answer entity."""

    query: Query
    answer: int

    def to_triple(self) -> Triple:
        return materialize(self.query, self.answer)


def materialize(query: Query, entity: int) -> Triple:
    """Plug a candidate entity into the open slot of a query."""
    if query.direction is Direction.TAIL:
        return Triple(query.anchor, query.relation, entity)
    return Triple(entity, query.relation, query.anchor)


class Vocab:
    """Append-only name <-> dense-id mapping, ids in first-seen order."""

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = list(names)
        self._ids: dict[str, int] = {name: i for i, name in enumerate(self._names)}
        if len(self._ids) != len(self._names):
            raise ValueError("duplicate names in vocabulary")

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def add(self, name: str) -> int:
        """Return the id of `name`, appending it if unseen."""
        idx = self._ids.get(name)
        if idx is None:
            idx = len(self._names)
            self._ids[name] = idx
            self._names.append(name)
        return idx

    def id(self, name: str) -> int:
        return self._ids[name]

    def name(self, idx: int) -> str:
        return self._names[idx]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._names)


@dataclass
class Dictionaries:
    """Entity and relation vocabularies built while parsing triple files."""

    entities: Vocab
    relations: Vocab

    @classmethod
    def empty(cls) -> "Dictionaries":
        return cls(Vocab(), Vocab())


def parse_triples(
    path: str | Path, dictionaries: Dictionaries | None = None
) -> tuple[list[Triple], Dictionaries]:
    """Parse a TSV triple file (`head<TAB>relation<TAB>tail` per line).

    Ids are assigned in first-seen order (head before tail within a line).
    When existing `dictionaries` are passed, unseen names are appended after
    the ids already assigned.

    Raises
    ------
    TripleParseError
        On a line without exactly three tab-separated fields (reported with
        its line number) or when the file contains no triples.
    """
    dicts = Dictionaries.empty() if dictionaries is None else dictionaries
    triples: list[Triple] = []
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.endswith("\n"):
                line = line[:-1]
            if line.endswith("\r"):
                line = line[:-1]
            fields = line.split("\t")
            if len(fields) != 3:
                raise TripleParseError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
                )
            head, relation, tail = fields
            h = dicts.entities.add(head)
            r = dicts.relations.add(relation)
            t = dicts.entities.add(tail)
            triples.append(Triple(h, r, t))
    if not triples:
        raise TripleParseError(f"{path}: file contains no triples")
    return triples, dicts


@dataclass(frozen=True)
class KnowledgeGraph:
    """Entity/relation names plus train/valid/test triple splits.

    Immutable after construction; splits are validated to be pairwise
    disjoint and to reference only ids covered by the name lists.
    """

    entity_names: tuple[str, ...]
    relation_names: tuple[str, ...]
    train: tuple[Triple, ...]
    valid: tuple[Triple, ...]
    test: tuple[Triple, ...]

    def __post_init__(self):
        if len(set(self.entity_names)) != len(self.entity_names):
            raise ValueError("duplicate entity names")
        if len(set(self.relation_names)) != len(self.relation_names):
            raise ValueError("duplicate relation names")
        n_e, n_r = len(self.entity_names), len(self.relation_names)
        for split_name in ("train", "valid", "test"):
            for tr in getattr(self, split_name):
                if not (0 <= tr.head < n_e and 0 <= tr.tail < n_e and 0 <= tr.relation < n_r):
                    raise ValueError(f"{split_name} triple {tr} references an unknown id")
        sets = {name: set(getattr(self, name)) for name in ("train", "valid", "test")}
        for a, b in (("train", "valid"), ("train", "test"), ("valid", "test")):
            overlap = sets[a] & sets[b]
            if overlap:
                raise ValueError(
                    f"splits {a} and {b} share {len(overlap)} triple(s), e.g. {next(iter(overlap))}"
                )

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def split(self, name: str) -> tuple[Triple, ...]:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def training_entities(self) -> np.ndarray:
        """Sorted ids of entities occurring in at least one training triple."""
        ids = {tr.head for tr in self.train} | {tr.tail for tr in self.train}
        return np.array(sorted(ids), dtype=np.int64)

    def training_relations(self) -> np.ndarray:
        return np.array(sorted({tr.relation for tr in self.train}), dtype=np.int64)


def load_kg(train_path: str | Path, valid_path: str | Path, test_path: str | Path) -> KnowledgeGraph:
    """Load a knowledge graph from three TSV files, sharing one dictionary.

    Training names get the lowest ids; names first seen in valid/test are
    appended after them.
    """
    train, dicts = parse_triples(train_path)
    valid, dicts = parse_triples(valid_path, dicts)
    test, dicts = parse_triples(test_path, dicts)
    return KnowledgeGraph(
        entity_names=dicts.entities.names,
        relation_names=dicts.relations.names,
        train=tuple(train),
        valid=tuple(valid),
        test=tuple(test),
    )


def make_query_examples(triples: Sequence[Triple]) -> list[QueryExample]:
    """Expand triples into directed examples: per triple first the tail query, then the head query."""
    if not triples:
        raise ValueError("cannot derive query examples from an empty triple sequence")
    examples: list[QueryExample] = []
    for tr in triples:
        examples.append(QueryExample(Query(Direction.TAIL, tr.head, tr.relation), tr.tail))
        examples.append(QueryExample(Query(Direction.HEAD, tr.tail, tr.relation), tr.head))
    return examples


def filter_by_direction(
    examples: Sequence[QueryExample], direction: Direction | str
) -> list[QueryExample]:
    """Restrict an example stream to one query direction (optional stratification)."""
    direction = Direction(direction) if isinstance(direction, str) else direction
    return [ex for ex in examples if ex.query.direction is direction]


class FilterIndex:
    """All known-true answers per query, aggregated over chosen splits.

    Used to drop known-true competitors from the candidate set during
    filtered evaluation; the evaluated example's own answer is exempted at
    prediction time, never here.
    """

    def __init__(self, mapping: dict[Query, frozenset[int]]):
        self._mapping = dict(mapping)

    def answers(self, query: Query) -> frozenset[int]:
        return self._mapping.get(query, frozenset())

    def __len__(self) -> int:
        return len(self._mapping)

    def candidate_mask(
        self, query: Query, n_entities: int, keep: int | None = None
    ) -> np.ndarray:
        """Boolean mask over entity ids: True where the entity may compete.

        `keep` (the example's own answer) stays a candidate even when it is
        a known-true answer of the query.
        """
        mask = np.ones(n_entities, dtype=bool)
        known = self._mapping.get(query)
        if known:
            mask[list(known)] = False
        if keep is not None:
            mask[keep] = True
        return mask


def build_filter_index(kg: KnowledgeGraph, splits: Sequence[str] = ("train", "valid")) -> FilterIndex:
    """Index every (query -> true answers) pair occurring in the given splits."""
    if not splits:
        raise ValueError("splits must be nonempty")
    mapping: dict[Query, set[int]] = {}
    for split_name in splits:
        for tr in kg.split(split_name):
            tail_q = Query(Direction.TAIL, tr.head, tr.relation)
            head_q = Query(Direction.HEAD, tr.tail, tr.relation)
            mapping.setdefault(tail_q, set()).add(tr.tail)
            mapping.setdefault(head_q, set()).add(tr.head)
    return FilterIndex({q: frozenset(s) for q, s in mapping.items()})


def dictionary_json(kg: KnowledgeGraph) -> str:
    """Dictionary dump: JSON object with `entities` and `relations` arrays in id order."""
    payload = {"entities": list(kg.entity_names), "relations": list(kg.relation_names)}
    return json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True)


def dump_dictionaries(kg: KnowledgeGraph, path: str | Path) -> None:
    Path(path).write_text(dictionary_json(kg) + "\n", encoding="utf-8")
