"""Multiple-choice item construction over the diagnosis taxonomy.

Standard items mix distractors sampled from a dataset-local label set and the
global taxonomy. Targeted variants replace distractors with ancestors
(hierarchical) or DDx neighbours (ddx) of the ground truth, padding any
shortfall with random off-path labels that are recorded on the item.
"""

from __future__ import annotations

import random
import string
from collections.abc import Collection, Iterable, Mapping
from dataclasses import dataclass, field, replace
from typing import Any

from hierdx.reward import GRAN_SCALE
from hierdx.taxonomy import (
    BENIGN,
    MALIGNANCY_CATEGORIES,
    MALIGNANT,
    PRECANCEROUS,
    DdxGraph,
    TaxonomyAnnotation,
    TaxonomyTree,
    canonical,
)

FORMAT_VERSION = 1
VARIANTS = ("standard", "lesion_condition", "hierarchical", "ddx")
LETTERS = string.ascii_uppercase

DISEASE_QUESTION = "What type of abnormality is present in this image?"
LESION_QUESTION = (
    "What type of lesion condition (benign, malignant or precancerous in situ) is present in this image?"
)
LESION_OPTIONS = (BENIGN, MALIGNANT, PRECANCEROUS)

_PREAMBLE = "You are a medical vision-language assistant specializing in dermatology. Given the dermatology image, answer: "
_THINK_SHORT = "<thinking>Describe the key clinical features and visual observations that support your diagnosis.</thinking>"
_CLOSING = "Ensure your response is medically accurate, concise, and strictly follows the specified format."

PROMPT_TEMPLATES: dict[str, str] = {
    "rl": (
        _PREAMBLE + "{question}\n"
        "Provide necessary reasoning and only answer the question in the following format:\n"
        + _THINK_SHORT + "\n"
        "<final diagnosis>Provide only the single most likely option without reasoning. "
        "If multiple options are plausible, always choose the most fine-grained (i.e., most specific "
        "or detailed) option available among them. Also provide the lesion condition (benign, malignant "
        "or precancerous in situ). </final diagnosis>\n" + _CLOSING
    ),
    "disease": (
        _PREAMBLE + "{question}\n"
        "Provide necessary reasoning and only answer the question in the following format:\n"
        + _THINK_SHORT + "\n"
        "<final diagnosis>Provide only the single most likely option ({letters}) without reasoning. "
        "If multiple options are plausible, always choose the most fine-grained (i.e., most specific "
        "or detailed) option available among them.  </final diagnosis>\n" + _CLOSING
    ),
    "ood": (
        _PREAMBLE + "{question}\n"
        "Provide necessary reasoning and only answer the question in the following format:\n"
        "<thinking>\n"
        "Begin by describing the characteristic clinical features and visual observations of the lesion. \n"
        "Based on these features, choose the most likely diagnosis from the options. \n"
        "Then, identify at least one plausible alternative diagnosis from other options and describe its "
        "defining features. \n"
        "Compare the observed lesion with these alternatives, and explain step by step why the final "
        "diagnosis is more consistent with the findings. \n"
        "Conclude the reasoning with the single condition that best matches the clinical presentation.\n"
        "</thinking>\n"
        "<final diagnosis>Provide only the single most likely option without reasoning.  </final diagnosis>\n"
        + _CLOSING
    ),
    "lesion": (
        _PREAMBLE + "{question}\n"
        "Provide necessary reasoning and only answer the question in the following format:\n"
        + _THINK_SHORT + "\n"
        "<final diagnosis>Only output one option: {letters_or}.</final diagnosis>\n" + _CLOSING
    ),
}


class McqError(ValueError):
    pass


class ItemSkipped(Exception):
    """A targeted variant cannot be built for this item."""

    def __init__(self, item_id: str, reason: str) -> None:
        super().__init__(f"{item_id}: {reason}")
        self.item_id = item_id
        self.reason = reason


@dataclass(frozen=True)
class McqOption:
    letter: str
    label: str
    gran_value: float

    def to_dict(self) -> dict[str, Any]:
        return {"letter": self.letter, "label": self.label, "gran_value": self.gran_value}


@dataclass(frozen=True)
class McqItem:
    id: str
    image_ref: str
    question: str
    options: tuple[McqOption, ...]
    correct_letter: str
    ground_truth: TaxonomyAnnotation
    variant: str = "standard"
    pad_labels: tuple[str, ...] = ()

    @property
    def option_map(self) -> dict[str, str]:
        return {o.letter: o.label for o in self.options}

    @property
    def correct_label(self) -> str:
        return self.option_map[self.correct_letter]

    def prompt(self, template: str | None = None) -> str:
        if template is None:
            template = "lesion" if self.variant == "lesion_condition" else "rl"
        letters = [o.letter for o in self.options]
        return PROMPT_TEMPLATES[template].format(
            question=self.question,
            letters="/".join(letters),
            letters_or=", ".join(letters[:-1]) + ", or " + letters[-1],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "id": self.id,
            "image_ref": self.image_ref,
            "variant": self.variant,
            "question": self.question,
            "options": [o.to_dict() for o in self.options],
            "correct_letter": self.correct_letter,
            "ground_truth": self.ground_truth.to_dict(),
            "pad_labels": list(self.pad_labels),
            "prompt": self.prompt(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> McqItem:
        return cls(
            id=str(data["id"]),
            image_ref=str(data.get("image_ref", "")),
            question=data["question"],
            options=tuple(McqOption(o["letter"], o["label"], float(o["gran_value"])) for o in data["options"]),
            correct_letter=data["correct_letter"],
            ground_truth=TaxonomyAnnotation.from_dict(data["ground_truth"]),
            variant=data.get("variant", "standard"),
            pad_labels=tuple(data.get("pad_labels", ())),
        )


def render_question(labels: Iterable[str], question: str = DISEASE_QUESTION) -> str:
    inline = " ".join(f"{LETTERS[i]}: {label}" for i, label in enumerate(labels))
    return f"{question} {inline}"


def option_gran_value(label: str, truth: TaxonomyAnnotation, scale: float = GRAN_SCALE) -> float:
    depth = truth.depth_of(label)
    return 0.0 if depth is None else scale * (depth / len(truth.path))


def _assemble(
    item_id: str,
    image_ref: str,
    labels: list[str],
    truth: TaxonomyAnnotation,
    rng: random.Random,
    variant: str,
    pads: Collection[str] = (),
    gran_scale: float = GRAN_SCALE,
) -> McqItem:
    if len(labels) > len(LETTERS):
        raise McqError(f"at most {len(LETTERS)} options supported")
    labels = list(labels)
    rng.shuffle(labels)
    options = tuple(
        McqOption(LETTERS[i], label, option_gran_value(label, truth, gran_scale))
        for i, label in enumerate(labels)
    )
    on_path = [(truth.depth_of(o.label), o.letter) for o in options if truth.depth_of(o.label) is not None]
    correct = max(on_path)[1]
    return McqItem(
        id=item_id,
        image_ref=image_ref,
        question=render_question(labels),
        options=options,
        correct_letter=correct,
        ground_truth=truth,
        variant=variant,
        pad_labels=tuple(sorted(pads)),
    )


def _labels_of(source: TaxonomyTree | Iterable[str] | None) -> set[str]:
    if source is None:
        return set()
    if isinstance(source, TaxonomyTree):
        return set(source.labels)
    return {canonical(l) for l in source}


def build_mcq(
    ground_truth: str,
    local_tree: TaxonomyTree | Iterable[str] | None,
    global_tree: TaxonomyTree,
    n_opts: int = 4,
    seed: int | str = 0,
    *,
    item_id: str | None = None,
    image_ref: str = "",
    p_local: float = 0.5,
    inject_ancestor: bool = False,
    gran_scale: float = GRAN_SCALE,
) -> McqItem:
    """Build a standard item whose distractors come from the local and global trees.

    Local labels that are absent from the global tree are ignored. With
    ``inject_ancestor`` one random strict ancestor of the ground truth is
    forced into the options; otherwise ancestors only appear if sampled.
    """
    if n_opts < 2:
        raise McqError("n_opts must be at least 2")
    if not 0.0 <= p_local <= 1.0:
        raise McqError("p_local must lie in [0, 1]")
    truth = global_tree.path_of(ground_truth)
    leaf = truth.leaf
    global_pool = set(global_tree.labels)
    local_pool = _labels_of(local_tree) & global_pool
    if len(global_pool) < n_opts:
        raise McqError(f"need {n_opts} distinct labels, taxonomy has {len(global_pool)}")

    rng = random.Random(f"mcq:{seed}:{item_id or leaf}")
    chosen = [leaf]
    if inject_ancestor and len(truth.path) > 1:
        chosen.append(rng.choice(truth.path[:-1]))
    local_pool -= set(chosen)
    global_pool -= set(chosen)
    while len(chosen) < n_opts:
        use_local = local_pool and (rng.random() < p_local or not global_pool)
        pool = local_pool if use_local else global_pool
        pick = rng.choice(sorted(pool))
        chosen.append(pick)
        local_pool.discard(pick)
        global_pool.discard(pick)
    return _assemble(item_id or leaf, image_ref, chosen, truth, rng, "standard", gran_scale=gran_scale)


def build_lesion_condition(item: McqItem) -> McqItem:
    """Same image, options replaced by the fixed benign/malignant/precancerous set."""
    options = tuple(McqOption(LETTERS[i], label, 0.0) for i, label in enumerate(LESION_OPTIONS))
    correct = LETTERS[LESION_OPTIONS.index(item.ground_truth.malignancy)]
    return replace(
        item,
        question=render_question(LESION_OPTIONS, LESION_QUESTION),
        options=options,
        correct_letter=correct,
        variant="lesion_condition",
        pad_labels=(),
    )


def _off_path_pool(tree: TaxonomyTree, truth: TaxonomyAnnotation, exclude: Collection[str]) -> list[str]:
    on_path = set(truth.path)
    return sorted(l for l in tree.labels if l not in on_path and l not in exclude)


def _fill(
    rng: random.Random,
    preferred: list[str],
    pad_pool: list[str],
    need: int,
    item_id: str,
) -> tuple[list[str], list[str]]:
    if len(preferred) >= need:
        return rng.sample(preferred, need), []
    short = need - len(preferred)
    if len(pad_pool) < short:
        raise ItemSkipped(item_id, f"only {len(pad_pool)} pad labels available, {short} needed")
    pads = rng.sample(pad_pool, short)
    return list(preferred), pads


def build_hierarchical_variant(
    item: McqItem,
    global_tree: TaxonomyTree,
    seed: int | str = 0,
    n_opts: int | None = None,
    *,
    gran_scale: float = GRAN_SCALE,
) -> McqItem:
    """Distractors are strict ancestors of the ground truth, padded with off-path labels."""
    n_opts = n_opts or len(item.options)
    truth = global_tree.path_of(item.ground_truth.leaf)
    ancestors = list(truth.path[:-1])
    if not ancestors:
        raise ItemSkipped(item.id, "ground truth is a root label; no ancestors to use as distractors")
    rng = random.Random(f"hier:{seed}:{item.id}")
    pad_pool = _off_path_pool(global_tree, truth, ())
    distractors, pads = _fill(rng, ancestors, pad_pool, n_opts - 1, item.id)
    return _assemble(
        item.id, item.image_ref, [truth.leaf, *distractors, *pads], truth, rng, "hierarchical", pads, gran_scale
    )


def ddx_candidates(label: str, ddx: DdxGraph, tree: TaxonomyTree) -> list[str]:
    """DDx neighbours of ``label`` (or of its parent when it has none), restricted to the taxonomy."""
    label = canonical(label)
    nbrs = ddx.neighbors(label)
    if not nbrs:
        parent = tree.parent(label)
        nbrs = ddx.neighbors(parent) if parent is not None else frozenset()
    return sorted(n for n in nbrs if n != label and n in tree)


def build_ddx_variant(
    item: McqItem,
    ddx: DdxGraph,
    seed: int | str = 0,
    n_opts: int | None = None,
    *,
    tree: TaxonomyTree,
    gran_scale: float = GRAN_SCALE,
) -> McqItem:
    """Distractors are confusable DDx neighbours of the ground truth, padded with off-path labels."""
    n_opts = n_opts or len(item.options)
    truth = tree.path_of(item.ground_truth.leaf)
    neighbors = [n for n in ddx_candidates(truth.leaf, ddx, tree) if n != truth.leaf]
    rng = random.Random(f"ddx:{seed}:{item.id}")
    pad_pool = _off_path_pool(tree, truth, neighbors)
    distractors, pads = _fill(rng, neighbors, pad_pool, n_opts - 1, item.id)
    return _assemble(
        item.id, item.image_ref, [truth.leaf, *distractors, *pads], truth, rng, "ddx", pads, gran_scale
    )


def check_item(item: McqItem) -> None:
    """Raise AssertionError if ``item`` violates an item invariant."""
    labels = [o.label for o in item.options]
    assert len(set(labels)) == len(labels), "duplicate option labels"
    if item.variant == "lesion_condition":
        assert labels == list(LESION_OPTIONS)
        assert item.correct_letter == LETTERS[LESION_OPTIONS.index(item.ground_truth.malignancy)]
        return
    depths = [(item.ground_truth.depth_of(o.label), o.letter) for o in item.options]
    on_path = [(d, l) for d, l in depths if d is not None]
    assert on_path, "no option on the ground-truth path"
    best = max(d for d, _ in on_path)
    deepest = [l for d, l in on_path if d == best]
    assert len(deepest) == 1, "deepest on-path option is not unique"
    assert item.correct_letter == deepest[0], "correct_letter does not index the deepest on-path option"


def malignancy_letter(category: str) -> str:
    if category not in MALIGNANCY_CATEGORIES:
        raise McqError(f"invalid malignancy {category!r}")
    return LETTERS[LESION_OPTIONS.index(category)]


def build_items(
    records: Iterable[Mapping[str, Any]],
    global_tree: TaxonomyTree,
    local_tree: TaxonomyTree | Iterable[str] | None = None,
    n_opts: int = 4,
    seed: int | str = 0,
    *,
    p_local: float = 0.5,
    inject_ancestor: bool = False,
    gran_scale: float = GRAN_SCALE,
) -> list[McqItem]:
    """Standard items for records carrying ``id``, ``diagnosis`` and optionally ``image_ref``."""
    local = list(_labels_of(local_tree)) if local_tree is not None else None
    return [
        build_mcq(
            r["diagnosis"],
            local,
            global_tree,
            n_opts,
            seed,
            item_id=str(r["id"]),
            image_ref=str(r.get("image_ref", "")),
            p_local=p_local,
            inject_ancestor=inject_ancestor,
            gran_scale=gran_scale,
        )
        for r in records
    ]


def synthetic_items(
    tree: TaxonomyTree,
    n: int,
    n_opts: int = 4,
    seed: int | str = 0,
    *,
    inject_ancestor: bool = True,
) -> list[McqItem]:
    """``n`` items over random non-root labels, each with an ancestor among its options."""
    rng = random.Random(f"items:{seed}")
    pool = [l for l in tree.labels if tree.parent(l) is not None] or tree.labels
    records = [{"id": f"item-{i:04d}", "diagnosis": rng.choice(pool)} for i in range(n)]
    return build_items(records, tree, None, n_opts, seed, inject_ancestor=inject_ancestor)
