"""Rule-based scene graphs from captions, and per-image label extraction.

A caption is reduced to the pieces the detector can supervise on: which
vocabulary classes are mentioned, which attribute values modify them, and
(inert, for bookkeeping only) prepositional relations between mentions.
The rules are a deliberate approximation: lowercase tokens, a small
suffix-stripping lemmatizer, bigram-then-unigram matching against the
class vocabulary, and two adjective attachment patterns (prenominal
sequences and "X is/are ADJ" copulas). Words outside the attribute
registry never produce labels.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

_WORD_RE = re.compile(r"[a-z]+")

_DETERMINERS = frozenset(
    "a an the this that these those its his her their our some any no one two three "
    "four five six seven eight nine ten several many few each every all both another".split()
)
_COPULAS = frozenset("is are was were".split())
_PREPOSITIONS = frozenset(
    "on in under over above below near behind beside by against at with inside "
    "outside around along across beneath underneath atop upon to of".split()
)
# Multi-word predicates are matched before single tokens, longest first.
_MULTIWORD_PREPOSITIONS = (
    ("in", "front", "of"),
    ("on", "top", "of"),
    ("next", "to"),
    ("close", "to"),
)
# Tokens that neither stop nor contribute to an adjective scan.
_CONNECTORS = frozenset("and very quite really".split())

_LEMMA_EXCEPTIONS = {
    "men": "man",
    "women": "woman",
    "children": "child",
    "people": "person",
    "mice": "mouse",
    "geese": "goose",
    "feet": "foot",
    "teeth": "tooth",
    "sheep": "sheep",
    "buses": "bus",
    "knives": "knife",
    "leaves": "leaf",
    "shelves": "shelf",
    "wolves": "wolf",
    "scarves": "scarf",
}
# Singulars that happen to end in s and must never be stripped.
_NO_STRIP = frozenset(
    "bus gas glass grass dress class is was this its his hers ours theirs "
    "plus tennis lens series species news".split()
)


def lemmatize(token: str) -> str:
    """Map a lowercase token to a crude singular form.

    Suffix rules only: "ies" -> "y", strip "es" after sibilants, strip a
    final "s" otherwise, with a small exception table for irregulars.
    """
    if token in _LEMMA_EXCEPTIONS:
        return _LEMMA_EXCEPTIONS[token]
    if token in _NO_STRIP:
        return token
    if token.endswith("ies") and len(token) > 4:
        return token[:-3] + "y"
    if token.endswith("es") and len(token) > 3 and token[:-2].endswith(("s", "x", "z", "ch", "sh")):
        return token[:-2]
    if token.endswith("s") and len(token) > 3 and not token.endswith(("ss", "us", "is")):
        return token[:-1]
    return token


def tokenize(caption: str) -> list[str]:
    """Lowercase alphabetic tokens; punctuation and digits are separators."""
    return _WORD_RE.findall(caption.lower())


class Vocabulary:
    """Detector classes plus surface synonyms. Background is the implicit last index."""

    def __init__(self, class_names: Sequence[str], synonyms: Mapping[str, str] | None = None):
        names = [str(n).strip().lower() for n in class_names]
        if not names:
            raise ValueError("vocabulary needs at least one class")
        if len(set(names)) != len(names):
            raise ValueError("duplicate class names")
        if any(not n or not all(_WORD_RE.fullmatch(w) for w in n.split()) for n in names):
            raise ValueError("class names must be lowercase words, optionally space separated")
        self.class_names: tuple[str, ...] = tuple(names)
        self._index = {n: i for i, n in enumerate(names)}
        self.synonyms: dict[str, int] = {}
        for surface, target in (synonyms or {}).items():
            surface = str(surface).strip().lower()
            target = str(target).strip().lower()
            if target not in self._index:
                raise ValueError(f"synonym {surface!r} maps to unknown class {target!r}")
            if surface in self._index:
                raise ValueError(f"synonym {surface!r} collides with a class name")
            self.synonyms[surface] = self._index[target]
        # token-tuple lookup used by the parser; bigrams are matched first
        self._phrase_index: dict[tuple[str, ...], int] = {}
        for name, idx in self._index.items():
            self._phrase_index[tuple(name.split())] = idx
        for surface, idx in self.synonyms.items():
            self._phrase_index[tuple(surface.split())] = idx

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def background_index(self) -> int:
        return len(self.class_names)

    def class_index(self, name: str) -> int:
        return self._index[name]

    def match_phrase(self, lemmas: tuple[str, ...]) -> int | None:
        return self._phrase_index.get(lemmas)

    @staticmethod
    def from_dict(data: Mapping) -> "Vocabulary":
        try:
            classes = data["classes"]
        except (KeyError, TypeError):
            raise ValueError("vocabulary file needs a 'classes' list") from None
        return Vocabulary(classes, data.get("synonyms") or {})

    @staticmethod
    def from_file(path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return Vocabulary.from_dict(json.load(f))

    def to_dict(self) -> dict:
        inv = {
            surface: self.class_names[idx] for surface, idx in sorted(self.synonyms.items())
        }
        return {"classes": list(self.class_names), "synonyms": inv}


class AttributeRegistry:
    """Attribute categories, their value sets, and the word -> (category, value) map.

    Values within one category are mutually exclusive per object. Every
    value word maps to itself; aliases may add extra surface forms, but
    no word may map to two targets.
    """

    def __init__(
        self,
        categories: Sequence[tuple[str, Sequence[str]]],
        aliases: Mapping[str, tuple[str, str]] | None = None,
    ):
        self.categories: tuple[str, ...] = tuple(name for name, _ in categories)
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("duplicate category names")
        if not self.categories:
            raise ValueError("registry needs at least one category")
        self.values: dict[str, tuple[str, ...]] = {}
        self.word_map: dict[str, tuple[str, str]] = {}
        for name, vals in categories:
            vals = tuple(str(v).strip().lower() for v in vals)
            if not vals or len(set(vals)) != len(vals):
                raise ValueError(f"category {name!r} needs a non-empty list of distinct values")
            self.values[name] = vals
            for v in vals:
                if v in self.word_map:
                    raise ValueError(f"attribute word {v!r} appears in two categories")
                self.word_map[v] = (name, v)
        for word, (cat, val) in (aliases or {}).items():
            word = str(word).strip().lower()
            if cat not in self.values or val not in self.values[cat]:
                raise ValueError(f"alias {word!r} targets unknown value ({cat!r}, {val!r})")
            if word in self.word_map:
                raise ValueError(f"alias {word!r} collides with an existing attribute word")
            self.word_map[word] = (cat, val)

    def value_index(self, category: str, value: str) -> int:
        return self.values[category].index(value)

    def lookup(self, word: str) -> tuple[str, str] | None:
        return self.word_map.get(word)

    @staticmethod
    def from_dict(data: Mapping) -> "AttributeRegistry":
        try:
            cats = [(c["name"], c["values"]) for c in data["categories"]]
        except (KeyError, TypeError):
            raise ValueError("registry file needs a 'categories' list of {name, values}") from None
        aliases = {w: (t[0], t[1]) for w, t in (data.get("aliases") or {}).items()}
        return AttributeRegistry(cats, aliases)

    @staticmethod
    def from_file(path: str | Path) -> "AttributeRegistry":
        with open(path, encoding="utf-8") as f:
            return AttributeRegistry.from_dict(json.load(f))

    def to_dict(self) -> dict:
        cats = [{"name": n, "values": list(self.values[n])} for n in self.categories]
        aliases = {
            w: list(t) for w, t in sorted(self.word_map.items()) if t[1] != w
        }
        return {"categories": cats, "aliases": aliases}


def default_vocabulary() -> Vocabulary:
    with resources.files("capdet.data").joinpath("vocab.json").open(encoding="utf-8") as f:
        return Vocabulary.from_dict(json.load(f))


def default_registry() -> AttributeRegistry:
    with resources.files("capdet.data").joinpath("registry.json").open(encoding="utf-8") as f:
        return AttributeRegistry.from_dict(json.load(f))


@dataclass
class TextualSceneGraph:
    """Parsed view of one caption.

    objects holds (surface form, class index or None) per mention, in
    caption order. attributes and relations refer to objects by position.
    Relations are inert metadata; nothing downstream trains on them.
    """

    objects: list[tuple[str, int | None]] = field(default_factory=list)
    attributes: list[tuple[int, str, str]] = field(default_factory=list)
    relations: list[tuple[int, str, int]] = field(default_factory=list)


@dataclass
class LabelSet:
    """Image-level supervision: mentioned classes and their attribute pairs."""

    objects: set[int] = field(default_factory=set)
    attribute_pairs: dict[int, set[tuple[str, str]]] = field(default_factory=dict)

    def pairs_for(self, class_index: int) -> list[tuple[str, str]]:
        return sorted(self.attribute_pairs.get(class_index, ()))

    def to_record(self, image_id: str) -> dict:
        return {
            "image_id": image_id,
            "objects": sorted(self.objects),
            "attributes": [
                [c, cat, val]
                for c in sorted(self.attribute_pairs)
                for cat, val in sorted(self.attribute_pairs[c])
            ],
        }

    @staticmethod
    def from_record(record: Mapping) -> "LabelSet":
        labels = LabelSet(objects=set(int(c) for c in record["objects"]))
        for c, cat, val in record.get("attributes", ()):
            labels.attribute_pairs.setdefault(int(c), set()).add((str(cat), str(val)))
        return labels


@dataclass
class ParseStats:
    unknown_modifiers: int = 0


def _find_objects(lemmas: list[str], tokens: list[str], vocab: Vocabulary):
    """Greedy left-to-right matching; two-token names take priority over one-token."""
    matches: list[tuple[int, int, str, int]] = []  # (start, length, surface, class index)
    occupied = [False] * len(lemmas)
    i = 0
    while i < len(lemmas):
        idx = None
        length = 0
        if i + 1 < len(lemmas):
            idx = vocab.match_phrase((lemmas[i], lemmas[i + 1]))
            length = 2
        if idx is None:
            idx = vocab.match_phrase((lemmas[i],))
            length = 1
        if idx is None:
            i += 1
            continue
        matches.append((i, length, " ".join(tokens[i : i + length]), idx))
        for k in range(i, i + length):
            occupied[k] = True
        i += length
    return matches, occupied


def _scan_modifiers(
    lemmas: list[str],
    tokens: list[str],
    occupied: list[bool],
    start: int,
    step: int,
    registry: AttributeRegistry,
    stats: ParseStats,
    max_span: int = 4,
) -> list[tuple[str, str]]:
    """Collect registry words walking from `start` in direction `step`.

    Determiners, prepositions, copulas and other object mentions end the
    scan; connectors pass through; anything else is treated as a modifier
    we do not know and is dropped (counted for reporting).
    """
    found: list[tuple[str, str]] = []
    k = start
    span = 0
    while 0 <= k < len(lemmas) and span < max_span:
        if occupied[k]:
            break
        raw, lemma = tokens[k], lemmas[k]
        hit = registry.lookup(raw) or registry.lookup(lemma)
        if hit is not None:
            found.append(hit)
        elif raw in _CONNECTORS:
            pass
        elif raw in _DETERMINERS or raw in _PREPOSITIONS or raw in _COPULAS:
            break
        else:
            stats.unknown_modifiers += 1
        k += step
        span += 1
    if step < 0:
        found.reverse()  # report prenominal modifiers in caption order
    return found


def _find_prepositions(tokens: list[str]) -> list[tuple[int, int, str]]:
    spans: list[tuple[int, int, str]] = []
    i = 0
    while i < len(tokens):
        matched = False
        for phrase in _MULTIWORD_PREPOSITIONS:
            n = len(phrase)
            if tuple(tokens[i : i + n]) == phrase:
                spans.append((i, i + n, " ".join(phrase)))
                i += n
                matched = True
                break
        if matched:
            continue
        if tokens[i] in _PREPOSITIONS and tokens[i] not in ("to", "of"):
            spans.append((i, i + 1, tokens[i]))
        i += 1
    return spans


def _parse_caption(
    caption: str, vocab: Vocabulary, registry: AttributeRegistry, stats: ParseStats
) -> TextualSceneGraph:
    if not caption or not caption.strip():
        raise ValueError("caption must be non-empty")
    tokens = tokenize(caption)
    lemmas = [lemmatize(t) for t in tokens]
    matches, occupied = _find_objects(lemmas, tokens, vocab)

    graph = TextualSceneGraph()
    graph.objects = [(surface, idx) for _, _, surface, idx in matches]

    taken: list[set[str]] = [set() for _ in matches]
    for obj_pos, (start, length, _, _) in enumerate(matches):
        mods = _scan_modifiers(lemmas, tokens, occupied, start - 1, -1, registry, stats)
        end = start + length
        if end < len(tokens) and tokens[end] in _COPULAS:
            mods += _scan_modifiers(lemmas, tokens, occupied, end + 1, +1, registry, stats)
        for cat, val in mods:
            if cat not in taken[obj_pos]:
                taken[obj_pos].add(cat)
                graph.attributes.append((obj_pos, cat, val))

    for p_start, p_end, predicate in _find_prepositions(tokens):
        subject = None
        obj = None
        for pos, (start, length, _, _) in enumerate(matches):
            if start + length <= p_start:
                subject = pos
            if obj is None and start >= p_end:
                obj = pos
        if subject is not None and obj is not None and subject != obj:
            graph.relations.append((subject, predicate, obj))
    return graph


def parse_scene_graph(caption: str, vocab: Vocabulary, registry: AttributeRegistry) -> TextualSceneGraph:
    """Parse one caption. Unparseable text yields an empty graph, never an error."""
    return _parse_caption(caption, vocab, registry, ParseStats())


def extract_labels(
    captions: Iterable[str],
    vocab: Vocabulary,
    registry: AttributeRegistry,
    stats: ParseStats | None = None,
) -> LabelSet:
    """Union of per-caption graphs, reduced to class-level supervision.

    Unmatched mentions are discarded. Within each (class, category) the
    first value seen wins, scanning captions in order; later conflicting
    mentions are dropped.
    """
    captions = list(captions)
    if not captions:
        raise ValueError("need at least one caption")
    stats = stats if stats is not None else ParseStats()
    labels = LabelSet()
    claimed: set[tuple[int, str]] = set()
    for caption in captions:
        graph = _parse_caption(caption, vocab, registry, stats)
        class_of: dict[int, int] = {}
        for pos, (_, idx) in enumerate(graph.objects):
            if idx is None:
                continue
            class_of[pos] = idx
            labels.objects.add(idx)
        for pos, cat, val in graph.attributes:
            if pos not in class_of:
                continue
            c = class_of[pos]
            if (c, cat) in claimed:
                continue
            claimed.add((c, cat))
            labels.attribute_pairs.setdefault(c, set()).add((cat, val))
    return labels


def save_labels(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def load_labels(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: line {lineno}: bad label record: {e}") from None
    return records
