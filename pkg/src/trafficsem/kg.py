"""Mission-specific knowledge graphs.

A graph has one sensor node (level 0), ``N`` layers of single-word concept
nodes and one embedding node. Edges run sensor -> layer 1, layer h ->
layer h+1 (complete bipartite unless explicit pairs are given) and deepest
layer -> embedding.
"""

from __future__ import annotations

import json
import logging
import re
import unicodedata
import warnings
from collections import Counter, deque
from dataclasses import dataclass, field

from .errors import ProviderError

log = logging.getLogger(__name__)

DEFAULT_V = 10
DEFAULT_N = 2
MAX_RETRIES = 3


class ExpansionStopped(UserWarning):
    pass


def normalize_concept(word: str) -> str:
    """Lower-case and ASCII-fold; collapse internal whitespace to single spaces."""
    folded = unicodedata.normalize("NFKD", word).encode("ascii", "ignore").decode()
    return re.sub(r"\s+", " ", folded.strip().lower())


def mission_slug(mission: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", normalize_concept(mission)).strip("-")


@dataclass(frozen=True)
class ConceptLayer:
    index: int
    concepts: tuple

    def __post_init__(self):
        object.__setattr__(self, "concepts", tuple(self.concepts))


@dataclass(frozen=True)
class KnowledgeGraph:
    mission: str
    layers: tuple
    edges: tuple
    sensor: str = ""
    embedding: str = ""

    def __post_init__(self):
        slug = mission_slug(self.mission)
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        if not self.sensor:
            object.__setattr__(self, "sensor", f"{slug}/sensor")
        if not self.embedding:
            object.__setattr__(self, "embedding", f"{slug}/embedding")

    def concept_id(self, layer: int, index: int) -> str:
        return f"{mission_slug(self.mission)}/L{layer}/{index}"

    @property
    def nodes(self) -> list:
        """``(id, text, level)`` in hierarchy order; embedding level is N+1."""
        out = [(self.sensor, "sensor", 0)]
        for layer in self.layers:
            out += [(self.concept_id(layer.index, i), c, layer.index) for i, c in enumerate(layer.concepts)]
        out.append((self.embedding, self.mission, len(self.layers) + 1))
        return out

    @property
    def node_ids(self) -> list:
        return [n[0] for n in self.nodes]

    @property
    def concepts(self) -> list:
        return [c for layer in self.layers for c in layer.concepts]


@dataclass
class Violation:
    kind: str
    detail: str
    ids: tuple = ()


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set:
        return {v.kind for v in self.violations}


# --------------------------------------------------------------------------
# generation

def _accept(raw, attempt, retries):
    """Split provider output into accepted single words and a multi-word flag."""
    words, multi = [], False
    for w in raw:
        w = normalize_concept(w)
        if not w:
            continue
        if " " in w:
            if attempt < retries:
                multi = True
                continue
            w = w.replace(" ", "-")
        words.append(w)
    return words, multi


def generate_key_concepts(mission: str, v: int, provider, retries: int = MAX_RETRIES) -> ConceptLayer:
    """Exactly ``v`` distinct single-word key concepts for a mission."""
    if v < 1:
        raise ValueError("V must be >= 1")
    found: list = []
    attempt = 0
    while True:
        raw = provider.key_concepts(mission, v, attempt)
        words, multi = _accept(raw, attempt, retries)
        for w in words:
            if w not in found and len(found) < v:
                found.append(w)
        if len(found) == v:
            return ConceptLayer(1, found)
        attempt += 1
        if attempt > retries:
            raise ProviderError(f"only {len(found)} of {v} concepts for {mission!r} after {retries} retries")
        log.debug("key concepts for %r: %d/%d, multi-word=%s; re-querying", mission, len(found), v, multi)


def expand_concepts(layers, provider, n: int, retries: int = MAX_RETRIES, width: int | None = None) -> list:
    """Grow the layer list to ``n`` layers; each new layer holds the associated
    words of the previous layer minus every word already present.

    Stops early (with an :class:`ExpansionStopped` warning) when a layer
    comes out empty.
    """
    if n < 1:
        raise ValueError("N must be >= 1")
    layers = list(layers)
    if not layers or layers[0].index != 1:
        raise ValueError("layer 1 must be present")
    seen = {c for layer in layers for c in layer.concepts}
    while len(layers) < n:
        prev = layers[-1]
        new = []
        for attempt in range(retries + 1):
            words, multi = _accept(provider.associated(list(prev.concepts), attempt), attempt, retries)
            new = []
            for w in words:
                if w not in seen and w not in new:
                    new.append(w)
            if not multi:
                break
        if width is not None:
            new = new[:width]
        if not new:
            warnings.warn(f"expansion stopped at layer {prev.index + 1}: no new concepts", ExpansionStopped)
            break
        layers.append(ConceptLayer(prev.index + 1, new))
        seen.update(new)
    return layers


def assemble_graph(mission: str, layers, pairs=None) -> KnowledgeGraph:
    """Build the DAG. ``pairs`` optionally maps layer index h to explicit
    ``(i, j)`` concept-index pairs between layers h and h+1."""
    layers = list(layers)
    if not layers:
        raise ValueError("at least one concept layer is required")
    kg = KnowledgeGraph(mission, layers, ())
    edges = [(kg.sensor, kg.concept_id(1, i)) for i in range(len(layers[0].concepts))]
    for a, b in zip(layers, layers[1:]):
        links = (pairs or {}).get(a.index)
        if links is None:
            links = [(i, j) for i in range(len(a.concepts)) for j in range(len(b.concepts))]
        edges += [(kg.concept_id(a.index, i), kg.concept_id(b.index, j)) for i, j in links]
    last = layers[-1]
    edges += [(kg.concept_id(last.index, i), kg.embedding) for i in range(len(last.concepts))]
    return KnowledgeGraph(mission, layers, edges)


def build_graph(mission: str, provider, v: int = DEFAULT_V, n: int = DEFAULT_N) -> KnowledgeGraph:
    layers = expand_concepts([generate_key_concepts(mission, v, provider)], provider, n)
    return assemble_graph(mission, layers)


def expected_edge_count(sizes) -> int:
    return sizes[0] + sum(a * b for a, b in zip(sizes, sizes[1:])) + sizes[-1]


# --------------------------------------------------------------------------
# validation

def _kahn(node_ids, edges) -> list:
    indeg = {n: 0 for n in node_ids}
    succ = {n: [] for n in node_ids}
    for u, v in edges:
        succ[u].append(v)
        indeg[v] += 1
    queue = deque(n for n in node_ids if indeg[n] == 0)
    order = []
    while queue:
        u = queue.popleft()
        order.append(u)
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                queue.append(v)
    return order


def topological_order(node_ids, edges):
    """Kahn's algorithm; returns None when the graph has a cycle."""
    order = _kahn(node_ids, edges)
    return order if len(order) == len(node_ids) else None


def validate_graph(kg: KnowledgeGraph) -> ValidationReport:
    report = ValidationReport()
    add = report.violations.append
    nodes = kg.nodes
    ids = [n[0] for n in nodes]
    level = {n[0]: n[2] for n in nodes}
    if len(set(ids)) != len(ids):
        dup = [i for i, c in Counter(ids).items() if c > 1]
        add(Violation("duplicate-node", "node ids repeat", tuple(dup)))

    for layer in kg.layers:
        dup = [c for c, k in Counter(layer.concepts).items() if k > 1]
        if dup:
            add(Violation("layer-duplicate", f"layer {layer.index} repeats concepts", tuple(dup)))
        for i, c in enumerate(layer.concepts):
            if not c or re.search(r"\s", c):
                add(Violation("multi-word", f"concept {c!r} is not a single word", (kg.concept_id(layer.index, i),)))
    seen: dict = {}
    for layer in kg.layers:
        for i, c in enumerate(layer.concepts):
            if c in seen and seen[c] != layer.index:
                add(Violation("disjointness", f"concept {c!r} in layers {seen[c]} and {layer.index}",
                              (kg.concept_id(layer.index, i),)))
            seen.setdefault(c, layer.index)

    known = set(ids)
    good_edges = []
    for u, v in kg.edges:
        if u not in known or v not in known:
            add(Violation("unknown-node", "edge references a missing node", (u, v)))
            continue
        good_edges.append((u, v))
        lu, lv = level[u], level[v]
        if lv != lu + 1:
            add(Violation("edge-family", f"edge from level {lu} to level {lv}", (u, v)))
    if any(v == kg.sensor for _, v in good_edges):
        add(Violation("sensor-indegree", "sensor has incoming edges", (kg.sensor,)))
    if any(u == kg.embedding for u, _ in good_edges):
        add(Violation("embedding-outdegree", "embedding node has outgoing edges", (kg.embedding,)))
    if topological_order(list(dict.fromkeys(ids)), good_edges) is None:
        add(Violation("cycle", "graph contains a directed cycle", _cycle_nodes(ids, good_edges)))
    return report


def _cycle_nodes(ids, edges):
    # nodes Kahn never releases lie on or downstream of a cycle
    ids = list(dict.fromkeys(ids))
    done = set(_kahn(ids, edges))
    return tuple(n for n in ids if n not in done)


# --------------------------------------------------------------------------
# serialization

def to_json(kg: KnowledgeGraph) -> dict:
    nodes = []
    for nid, text, lvl in kg.nodes:
        layer = "embedding" if nid == kg.embedding else lvl
        nodes.append({"id": nid, "text": text, "layer": layer})
    return {"mission": kg.mission, "nodes": nodes, "edges": [list(e) for e in kg.edges]}


def from_json(d: dict) -> KnowledgeGraph:
    by_layer: dict = {}
    sensor = embedding = ""
    for node in d["nodes"]:
        if node["layer"] == 0:
            sensor = node["id"]
        elif node["layer"] == "embedding":
            embedding = node["id"]
        else:
            by_layer.setdefault(int(node["layer"]), []).append(node["text"])
    layers = [ConceptLayer(h, by_layer[h]) for h in sorted(by_layer)]
    return KnowledgeGraph(d["mission"], layers, [tuple(e) for e in d["edges"]], sensor, embedding)


def save(kg: KnowledgeGraph, path):
    with open(path, "w") as fh:
        json.dump(to_json(kg), fh, indent=1)


def load(path) -> KnowledgeGraph:
    with open(path) as fh:
        return from_json(json.load(fh))


# --------------------------------------------------------------------------
# vocabulary frequency

def _count(texts) -> Counter:
    from .embed import tokenize
    c = Counter()
    for t in texts:
        c.update(tokenize(t))
    return c


def vocab_report(source, top_k: int = 10, stopwords=()) -> dict:
    """Per-mission term frequencies, descending count then term.

    ``source`` may be a list of strings, a mapping mission -> list of
    strings, or a mapping mission -> KnowledgeGraph (concept words).
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if not isinstance(source, dict):
        source = {"all": source}
    table = {}
    stop = set(stopwords)
    for mission, item in source.items():
        texts = item.concepts if isinstance(item, KnowledgeGraph) else item
        counts = _count(texts)
        rows = sorted(((w, k) for w, k in counts.items() if w not in stop), key=lambda r: (-r[1], r[0]))
        table[mission] = rows[:top_k]
    return table
