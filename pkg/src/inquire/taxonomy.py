"""Dialogue-act hierarchy and appraisal vocabulary.

The built-in tree is the three-level justice act inventory (3 acts, 10
subtypes, 19 leaf intents). Ids are assigned in table order, breadth-first by
level, so argmax tie-breaking and serialization stay stable across runs.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

APPRAISAL_LABELS: tuple[str, ...] = (
    "Sense ambiguity",
    "Find deviates",
    "Find redundancy",
    "Spot weakness",
    "Identify flaws",
    "Identify chances",
    "Keep challenging",
    "Dive deeper",
    "Otherwise",
)
N_APPRAISALS = len(APPRAISAL_LABELS)

# (level-1 act, [(level-2 subtype, [level-3 intents])])
BUILTIN_HIERARCHY: tuple[tuple[str, tuple[tuple[str, tuple[str, ...]], ...]], ...] = (
    ("Question", (
        ("Clarification question", (
            "Clarify important aspect of the case",
            "Clarify legal arguments or issues",
            "Clarify definition of concept",
        )),
        ("Probing question", (
            "Probe the consistency between the attorney's arguments and "
            "established legal principles or precedents",
            "Probe the assumption underlying the attorney's arguments",
        )),
        ("Leading question", (
            "Ask for the attorney's position",
            "Lead the attorney toward a particular conclusion",
            "Lead the attorney to certain aspects",
        )),
    )),
    ("Make hypothesis", (
        ("Present hypothesis", (
            "Present hypothetical situations to test legal limits",
            "Present hypothetical situations to test legal issues in the case",
        )),
        ("Compare hypothesis", (
            "Compare to hypothetical situations to assess legal principles",
            "Highlight key differences from hypothetical situations",
        )),
        ("Conclude hypothesis", (
            "Explore different types of consequences",
        )),
    )),
    ("Declaration", (
        ("Confirmation", (
            "Acknowledge the attorney's arguments",
            "Prompt for information that would support the attorney's arguments",
        )),
        ("Rejection", (
            "Oppose the attorney's arguments",
            "Provide counterexample to challenge the attorney's arguments",
        )),
        ("Declaration (non-questions) for more details", (
            "Lead attorneys by examples (non-questions) for detailed explanation of a concept",
        )),
        ("Declaration with Time Pressure", (
            "Pressure a rash response from the attorney",
        )),
    )),
)


class TaxonomyError(ValueError):
    """Unknown node, malformed tree file, or an invalid parent/child request."""


@dataclass(frozen=True)
class ActionNode:
    id: int
    level: int
    label: str
    parent: int | None
    children: tuple[int, ...] = ()


@dataclass(frozen=True)
class Appraisal:
    index: int

    def __post_init__(self):
        if not 0 <= self.index < N_APPRAISALS:
            raise TaxonomyError(f"appraisal index {self.index} outside [0, {N_APPRAISALS - 1}]")

    @property
    def label(self) -> str:
        return APPRAISAL_LABELS[self.index]

    @classmethod
    def from_label(cls, label: str) -> "Appraisal":
        try:
            return cls(APPRAISAL_LABELS.index(label))
        except ValueError:
            raise TaxonomyError(f"unknown appraisal label {label!r}") from None


def appraisal_onehot(a: Appraisal | int) -> np.ndarray:
    index = a.index if isinstance(a, Appraisal) else int(a)
    Appraisal(index)
    vec = np.zeros(N_APPRAISALS)
    vec[index] = 1.0
    return vec


@dataclass(frozen=True)
class ActionTree:
    """Immutable act hierarchy. ``nodes[i].id == i`` always holds."""

    nodes: tuple[ActionNode, ...]
    _by_label: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        index: dict[tuple[int | None, str], int] = {}
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise TaxonomyError(f"node ids must be dense and ordered; got {node.id} at {i}")
            if node.level == 1:
                if node.parent is not None:
                    raise TaxonomyError(f"level-1 node {i} has a parent")
            else:
                if node.parent is None or not 0 <= node.parent < len(self.nodes):
                    raise TaxonomyError(f"node {i} has no valid parent")
                if self.nodes[node.parent].level != node.level - 1:
                    raise TaxonomyError(f"node {i} parent is not one level above")
                if i not in self.nodes[node.parent].children:
                    raise TaxonomyError(f"node {i} missing from its parent's children")
            key = (node.parent, node.label)
            if key in index:
                raise TaxonomyError(f"duplicate label {node.label!r} under the same parent")
            index[key] = i
        object.__setattr__(self, "_by_label", index)

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> ActionNode:
        if not isinstance(node_id, (int, np.integer)) or not 0 <= node_id < len(self.nodes):
            raise TaxonomyError(f"unknown node id {node_id!r}")
        return self.nodes[int(node_id)]

    def children(self, node_id: int) -> list[int]:
        return list(self.node(node_id).children)

    @property
    def roots(self) -> list[int]:
        return [n.id for n in self.nodes if n.level == 1]

    def candidates(self, prefix: Sequence[int]) -> list[int]:
        """Next-level choices after ``prefix`` (the level-1 acts if empty)."""
        return self.roots if len(prefix) == 0 else self.children(prefix[-1])

    def level_nodes(self, level: int) -> list[int]:
        return [n.id for n in self.nodes if n.level == level]

    @property
    def depth(self) -> int:
        return max(n.level for n in self.nodes)

    def find(self, label: str, parent: int | None = None) -> int:
        try:
            return self._by_label[(parent, label)]
        except KeyError:
            raise TaxonomyError(f"no node {label!r} under parent {parent}") from None

    def path_from_labels(self, labels: Sequence[str]) -> "ActionPath":
        parent = None
        ids = []
        for label in labels:
            parent = self.find(label, parent)
            ids.append(parent)
        return ActionPath(tuple(ids))

    def is_leaf(self, node_id: int) -> bool:
        return not self.node(node_id).children

    def full_paths(self) -> list["ActionPath"]:
        out: list[ActionPath] = []

        def walk(prefix: tuple[int, ...]):
            nxt = self.candidates(prefix)
            if prefix and not nxt:
                out.append(ActionPath(prefix))
                return
            for c in nxt:
                walk(prefix + (c,))

        walk(())
        return out

    def to_rows(self) -> list[tuple[int, int, str, int | None]]:
        return [(n.id, n.level, n.label, n.parent) for n in self.nodes]

    def dumps(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "level", "label", "parent_id"])
        for nid, level, label, parent in self.to_rows():
            writer.writerow([nid, level, label, "" if parent is None else parent])
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[int, int, str, int | None]]) -> "ActionTree":
        rows = sorted(rows, key=lambda r: r[0])
        kids: dict[int, list[int]] = {r[0]: [] for r in rows}
        for nid, _, _, parent in rows:
            if parent is not None:
                if parent not in kids:
                    raise TaxonomyError(f"node {nid} references unknown parent {parent}")
                kids[parent].append(nid)
        nodes = tuple(
            ActionNode(nid, int(level), label, parent, tuple(kids[nid]))
            for nid, level, label, parent in rows
        )
        return cls(nodes)


@dataclass(frozen=True)
class ActionPath:
    nodes: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def is_full(self, tree: ActionTree) -> bool:
        return len(self.nodes) > 0 and tree.is_leaf(self.nodes[-1])

    def labels(self, tree: ActionTree) -> list[str]:
        return [tree.node(n).label for n in self.nodes]


def builtin_tree() -> ActionTree:
    rows: list[tuple[int, int, str, int | None]] = []
    level1 = []
    for act, _ in BUILTIN_HIERARCHY:
        level1.append(len(rows))
        rows.append((len(rows), 1, act, None))
    level2 = []
    for parent, (_, subtypes) in zip(level1, BUILTIN_HIERARCHY):
        for sub, leaves in subtypes:
            level2.append((len(rows), leaves))
            rows.append((len(rows), 2, sub, parent))
    for parent, leaves in level2:
        for leaf in leaves:
            rows.append((len(rows), 3, leaf, parent))
    return ActionTree.from_rows(rows)


def children(tree: ActionTree, node: int) -> list[int]:
    return tree.children(node)


def validate_path(tree: ActionTree, path: ActionPath | Sequence[int]) -> bool:
    nodes = tuple(path.nodes if isinstance(path, ActionPath) else path)
    if not 1 <= len(nodes) <= tree.depth:
        return False
    try:
        if tree.node(nodes[0]).level != 1:
            return False
        for parent, child in zip(nodes, nodes[1:]):
            if child not in tree.node(parent).children:
                return False
    except TaxonomyError:
        return False
    return True


def load_tree(path: str | Path) -> ActionTree:
    """Read an ``id,level,label,parent_id`` CSV file."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for lineno, rec in enumerate(reader, start=2):
            try:
                parent = rec["parent_id"].strip()
                rows.append((int(rec["id"]), int(rec["level"]), rec["label"],
                             int(parent) if parent else None))
            except (KeyError, ValueError, AttributeError) as exc:
                raise TaxonomyError(f"{path}:{lineno}: bad taxonomy row ({exc})") from exc
    return ActionTree.from_rows(rows)


def save_tree(tree: ActionTree, path: str | Path) -> None:
    Path(path).write_text(tree.dumps(), encoding="utf-8")
