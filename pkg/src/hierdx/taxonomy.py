"""Diagnosis taxonomy and differential-diagnosis graph.

The taxonomy is a forest of disease labels, each tagged with a malignancy
category. The DDx graph is an undirected adjacency over the same label space
(labels that do not resolve in the taxonomy are tolerated with a warning).

File formats (JSON, ``format_version`` 1)::

    {"format_version": 1,
     "nodes": [{"label": "melanoma", "parent": "melanocytic lesion",
                "malignancy": "malignant"}, ...]}

    {"format_version": 1,
     "edges": [["melanoma", "pigmented nevus"], ...]}
"""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

BENIGN = "benign"
MALIGNANT = "malignant"
PRECANCEROUS = "precancerous in situ"
MALIGNANCY_CATEGORIES: tuple[str, ...] = (BENIGN, MALIGNANT, PRECANCEROUS)

_WS = re.compile(r"\s+")


def canonical(label: str) -> str:
    """Lowercase, trim and collapse internal whitespace."""
    return _WS.sub(" ", label.strip().lower())


class TaxonomyError(ValueError):
    """Raised when a taxonomy or DDx document violates its invariants."""

    def __init__(self, message: str, *labels: str) -> None:
        super().__init__(message)
        self.labels = labels


class UnknownLabelError(KeyError):
    def __init__(self, label: str) -> None:
        super().__init__(label)
        self.label = label

    def __str__(self) -> str:
        return f"unknown label: {self.label!r}"


@dataclass(frozen=True)
class TaxonomyNode:
    label: str
    parent: str | None
    malignancy: str
    children: tuple[str, ...] = ()


@dataclass(frozen=True)
class TaxonomyAnnotation:
    """Root-to-label path plus the malignancy of the terminal label."""

    path: tuple[str, ...]
    malignancy: str

    def __post_init__(self) -> None:
        if not self.path:
            raise ValueError("taxonomy path must be non-empty")
        if self.malignancy not in MALIGNANCY_CATEGORIES:
            raise ValueError(f"invalid malignancy {self.malignancy!r}")

    @property
    def leaf(self) -> str:
        return self.path[-1]

    def depth_of(self, label: str) -> int | None:
        """1-based depth of ``label`` on this path, or None when off-path."""
        label = canonical(label)
        for i, node in enumerate(self.path, start=1):
            if node == label:
                return i
        return None

    def to_dict(self) -> dict[str, Any]:
        return {"path": list(self.path), "malignancy": self.malignancy}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TaxonomyAnnotation:
        return cls(tuple(canonical(p) for p in data["path"]), data["malignancy"])


class TaxonomyTree:
    """Validated, immutable label forest."""

    def __init__(self, nodes: Iterable[TaxonomyNode | Mapping[str, Any]]) -> None:
        raw: dict[str, tuple[str | None, str]] = {}
        for entry in nodes:
            if isinstance(entry, TaxonomyNode):
                label, parent, malig = entry.label, entry.parent, entry.malignancy
            else:
                if "label" not in entry:
                    raise TaxonomyError("node without a label")
                label, parent, malig = entry["label"], entry.get("parent"), entry.get("malignancy")
            label = canonical(label)
            if not label:
                raise TaxonomyError("empty label")
            parent = canonical(parent) if parent else None
            if label in raw:
                raise TaxonomyError(f"duplicate label {label!r}", label)
            if malig not in MALIGNANCY_CATEGORIES:
                raise TaxonomyError(f"invalid malignancy {malig!r} for {label!r}", label)
            raw[label] = (parent, malig)

        children: dict[str, list[str]] = {label: [] for label in raw}
        for label, (parent, _) in raw.items():
            if parent is None:
                continue
            if parent not in raw:
                raise TaxonomyError(f"node {label!r} names missing parent {parent!r}", label, parent)
            if parent == label:
                raise TaxonomyError(f"cycle detected at {label!r}", label)
            children[parent].append(label)

        # every node must reach a root
        state: dict[str, int] = {}
        for start in raw:
            trail = []
            node: str | None = start
            while node is not None and state.get(node) != 2:
                if state.get(node) == 1:
                    raise TaxonomyError(f"cycle detected at {node!r}", node)
                state[node] = 1
                trail.append(node)
                node = raw[node][0]
            for n in trail:
                state[n] = 2

        self.warnings: list[str] = []
        self._nodes: dict[str, TaxonomyNode] = {
            label: TaxonomyNode(label, parent, malig, tuple(sorted(children[label])))
            for label, (parent, malig) in raw.items()
        }
        self.nodes = MappingProxyType(self._nodes)
        self.roots: tuple[str, ...] = tuple(sorted(l for l, (p, _) in raw.items() if p is None))

        for label, node in self._nodes.items():
            if node.parent is not None:
                pm = self._nodes[node.parent].malignancy
                if pm != node.malignancy:
                    self._warn(
                        f"malignancy of {label!r} ({node.malignancy}) differs from parent "
                        f"{node.parent!r} ({pm})"
                    )

    def _warn(self, msg: str) -> None:
        self.warnings.append(msg)
        logger.warning(msg)

    def __contains__(self, label: object) -> bool:
        return isinstance(label, str) and canonical(label) in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def __iter__(self):
        return iter(self._nodes)

    @property
    def labels(self) -> list[str]:
        return sorted(self._nodes)

    def node(self, label: str) -> TaxonomyNode:
        try:
            return self._nodes[canonical(label)]
        except KeyError:
            raise UnknownLabelError(label) from None

    def parent(self, label: str) -> str | None:
        return self.node(label).parent

    def children(self, label: str) -> tuple[str, ...]:
        return self.node(label).children

    def malignancy(self, label: str) -> str:
        return self.node(label).malignancy

    def ancestors(self, label: str) -> list[str]:
        """Strict ancestors, nearest first."""
        out = []
        parent = self.node(label).parent
        while parent is not None:
            out.append(parent)
            parent = self._nodes[parent].parent
        return out

    def depth(self, label: str) -> int:
        return len(self.ancestors(label)) + 1

    def path_of(self, label: str) -> TaxonomyAnnotation:
        node = self.node(label)
        path = [node.label, *self.ancestors(node.label)]
        path.reverse()
        return TaxonomyAnnotation(tuple(path), node.malignancy)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "nodes": [
                {"label": n.label, "parent": n.parent, "malignancy": n.malignancy}
                for n in (self._nodes[l] for l in self.labels)
            ],
        }


def path_of(tree: TaxonomyTree, label: str) -> TaxonomyAnnotation:
    return tree.path_of(label)


def depth_weight(path_len: int, depth: int) -> float:
    """Normalized depth weight ``depth / path_len``."""
    if path_len < 1:
        raise ValueError(f"path length must be positive, got {path_len}")
    if not 1 <= depth <= path_len:
        raise ValueError(f"depth {depth} outside [1, {path_len}]")
    return depth / path_len


class DdxGraph:
    """Undirected differential-diagnosis graph without self-loops."""

    def __init__(self, edges: Iterable[tuple[str, str]] = ()) -> None:
        adj: dict[str, set[str]] = {}
        for a, b in edges:
            a, b = canonical(a), canonical(b)
            if a == b:
                logger.warning("dropping DDx self-loop on %r", a)
                continue
            adj.setdefault(a, set()).add(b)
            adj.setdefault(b, set()).add(a)
        self._adj = {k: frozenset(v) for k, v in adj.items()}
        self.warnings: list[str] = []

    def __contains__(self, label: object) -> bool:
        return isinstance(label, str) and canonical(label) in self._adj

    def __len__(self) -> int:
        return len(self._adj)

    @property
    def adjacency(self) -> Mapping[str, frozenset[str]]:
        return MappingProxyType(self._adj)

    def neighbors(self, label: str) -> frozenset[str]:
        return self._adj.get(canonical(label), frozenset())

    def edges(self) -> list[tuple[str, str]]:
        return sorted((a, b) for a, nbrs in self._adj.items() for b in nbrs if a < b)

    def check_against(self, tree: TaxonomyTree) -> list[str]:
        """Warn about DDx labels absent from the taxonomy."""
        missing = sorted(l for l in self._adj if l not in tree)
        for label in missing:
            msg = f"DDx label {label!r} does not resolve in the taxonomy"
            self.warnings.append(msg)
            logger.warning(msg)
        return missing

    def to_dict(self) -> dict[str, Any]:
        return {"format_version": FORMAT_VERSION, "edges": [list(e) for e in self.edges()]}


def _read_document(source: str | Path | Mapping[str, Any]) -> Mapping[str, Any]:
    if isinstance(source, Mapping):
        doc = source
    else:
        try:
            doc = json.loads(Path(source).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise TaxonomyError(f"{source}: not valid JSON ({exc})") from exc
    if not isinstance(doc, Mapping):
        raise TaxonomyError("document must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise TaxonomyError(f"unsupported format_version {version!r}")
    return doc


def load_taxonomy(source: str | Path | Mapping[str, Any]) -> TaxonomyTree:
    doc = _read_document(source)
    nodes = doc.get("nodes")
    if not isinstance(nodes, list):
        raise TaxonomyError("taxonomy document needs a 'nodes' list")
    return TaxonomyTree(nodes)


def load_ddx(source: str | Path | Mapping[str, Any], tree: TaxonomyTree | None = None) -> DdxGraph:
    doc = _read_document(source)
    edges = doc.get("edges")
    if not isinstance(edges, list):
        raise TaxonomyError("DDx document needs an 'edges' list")
    pairs = []
    for e in edges:
        if not (isinstance(e, (list, tuple)) and len(e) == 2):
            raise TaxonomyError(f"malformed DDx edge {e!r}")
        pairs.append((str(e[0]), str(e[1])))
    graph = DdxGraph(pairs)
    if tree is not None:
        graph.check_against(tree)
    return graph


def resolve_ddx_neighbor(
    d: str,
    ddx: DdxGraph,
    tree: TaxonomyTree,
    cases: Mapping[str, int],
) -> str | None:
    """Find a differential diagnosis for ``d`` that has at least one case.

    Candidates are the DDx neighbours of ``d``; if it has none, those of its
    taxonomy parent. Each candidate (in lexicographic order) is returned when
    it has cases, otherwise its first taxonomy child with cases is. ``d``
    itself is never returned.
    """
    d = canonical(d)

    def has_cases(label: str) -> bool:
        return label != d and cases.get(label, 0) >= 1

    candidates = ddx.neighbors(d)
    if not candidates:
        parent = tree.parent(d)
        candidates = ddx.neighbors(parent) if parent is not None else frozenset()
        if not candidates:
            return None

    for c in sorted(candidates):
        if has_cases(c):
            return c
        if c in tree:
            for child in tree.children(c):
                if has_cases(child):
                    return child
    return None
