"""Completion parsing and the verifiable reward R_total = format + gran + malignancy."""

from __future__ import annotations

import re
import string
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any, Literal

from hierdx.taxonomy import (
    MALIGNANCY_CATEGORIES,
    PRECANCEROUS,
    TaxonomyAnnotation,
    canonical,
    depth_weight,
)

if TYPE_CHECKING:
    from hierdx.mcq import McqItem

GRAN_SCALE = 0.75
MALIGNANCY_REWARD = 0.25

Mode = Literal["strict", "lenient"]


@dataclass(frozen=True)
class TagSet:
    open_think: str
    close_think: str
    open_answer: str
    close_answer: str

    def __post_init__(self) -> None:
        tags = self.as_tuple()
        if not all(tags):
            raise ValueError("tags must be non-empty")
        if len(set(tags)) != 4:
            raise ValueError("tags must be pairwise distinct")

    def as_tuple(self) -> tuple[str, str, str, str]:
        return (self.open_think, self.close_think, self.open_answer, self.close_answer)


SFT_TAGS = TagSet("<thinking>", "</thinking>", "<diagnosis>", "</diagnosis>")
RL_TAGS = TagSet("<thinking>", "</thinking>", "<final diagnosis>", "</final diagnosis>")
TAG_PRESETS: dict[str, TagSet] = {"sft": SFT_TAGS, "rl": RL_TAGS}


def resolve_tags(tags: str | TagSet | Mapping[str, str]) -> TagSet:
    if isinstance(tags, TagSet):
        return tags
    if isinstance(tags, str):
        try:
            return TAG_PRESETS[tags]
        except KeyError:
            raise ValueError(f"unknown tag preset {tags!r}; choose from {sorted(TAG_PRESETS)}") from None
    return TagSet(**tags)


@dataclass(frozen=True)
class ParsedCompletion:
    thinking: str | None = None
    answer_text: str | None = None
    option_letter: str | None = None
    predicted_label: str | None = None
    predicted_malignancy: str | None = None
    tags_present: dict[str, bool] = field(default_factory=dict)
    tag_positions: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class RewardBreakdown:
    format: int
    gran: float
    malignancy: float
    total: float
    parsed: ParsedCompletion

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": self.format,
            "gran": self.gran,
            "malignancy": self.malignancy,
            "total": self.total,
            "parsed": self.parsed.to_dict(),
        }


# -- extraction -------------------------------------------------------------

# A letter followed by a delimiter or end of text; "B, malignant", "C", "A: ..."
_LETTER = re.compile(r"\b([A-Z])(?=[:.,;)\s]|$)")
_MALIGNANCY_KEYWORDS: tuple[tuple[str, str], ...] = (
    ("precancerous in situ", PRECANCEROUS),
    ("pre-cancerous", PRECANCEROUS),
    ("precancerous", PRECANCEROUS),
    ("malignant", "malignant"),
    ("benign", "benign"),
)
# Longest alternative first, so overlapping matches prefer the longer keyword.
_MALIGNANCY = re.compile(
    r"(?<![\w-])(?<!non-)(?<!non )("
    + "|".join(re.escape(k) for k, _ in sorted(_MALIGNANCY_KEYWORDS, key=lambda kv: -len(kv[0])))
    + r")(?![\w-])",
    re.IGNORECASE,
)
_KEYWORD_TO_CATEGORY = {k: c for k, c in _MALIGNANCY_KEYWORDS}
_HEAD_CLAUSE = re.compile(r"[,.;\n]")


def _between(text: str, open_tag: str, close_tag: str, *, allow_unclosed: bool) -> str | None:
    start = text.find(open_tag)
    if start < 0:
        return None
    start += len(open_tag)
    end = text.find(close_tag, start)
    if end < 0:
        return text[start:] if allow_unclosed else None
    return text[start:end]


def _letters(text: str, allowed: str) -> list[str]:
    return [m.group(1) for m in _LETTER.finditer(text) if m.group(1) in allowed]


def _match_option_label(text: str, options: Mapping[str, str]) -> str | None:
    """Letter of the option whose label equals the head clause or the whole answer."""
    whole = canonical(text)
    head = canonical(_HEAD_CLAUSE.split(text.strip(), 1)[0])
    by_label = {canonical(label): letter for letter, label in options.items()}
    for candidate in (whole, head):
        if candidate in by_label:
            return by_label[candidate]
    return None


def extract_malignancy(text: str | None) -> str | None:
    """Last malignancy keyword mentioned in ``text`` ("non-malignant" is ignored)."""
    if not text:
        return None
    found = _MALIGNANCY.findall(text)
    if not found:
        return None
    return _KEYWORD_TO_CATEGORY[found[-1].lower()]


def parse_completion(
    text: str,
    tags: str | TagSet = RL_TAGS,
    mode: Mode = "strict",
    options: Mapping[str, str] | None = None,
) -> ParsedCompletion:
    """Extract reasoning, option letter, label and malignancy from a completion.

    In strict mode only the answer block is inspected (first matching letter,
    else an exact option-label match). Lenient mode falls back to the whole
    completion when the answer block yields nothing, taking the last letter
    mentioned.
    """
    if mode not in ("strict", "lenient"):
        raise ValueError(f"unknown mode {mode!r}")
    tags = resolve_tags(tags)
    text = text or ""
    lenient = mode == "lenient"
    allowed = "".join(sorted(options)) if options else string.ascii_uppercase

    positions = {t: text.find(t) for t in tags.as_tuple()}
    thinking = _between(text, tags.open_think, tags.close_think, allow_unclosed=lenient)
    answer = _between(text, tags.open_answer, tags.close_answer, allow_unclosed=lenient)

    letter = None
    if answer is not None:
        found = _letters(answer, allowed)
        if found:
            letter = found[0]
        elif options:
            letter = _match_option_label(answer, options)
    if letter is None and lenient:
        found = _letters(text, allowed)
        if found:
            letter = found[-1]
        elif options:
            letter = _match_option_label(text, options)

    label = None
    if letter is not None and options and letter in options:
        label = canonical(options[letter])
    elif answer is not None and not options:
        head = canonical(_HEAD_CLAUSE.split(answer.strip(), 1)[0])
        label = head or None

    malignancy = extract_malignancy(answer)
    if malignancy is None and lenient:
        malignancy = extract_malignancy(text)
    if malignancy is None and label in MALIGNANCY_CATEGORIES:
        malignancy = label

    return ParsedCompletion(
        thinking=thinking.strip() if thinking is not None else None,
        answer_text=answer.strip() if answer is not None else None,
        option_letter=letter,
        predicted_label=label,
        predicted_malignancy=malignancy,
        tags_present={t: p >= 0 for t, p in positions.items()},
        tag_positions=positions,
    )


# -- sub-rewards ------------------------------------------------------------

def format_reward(parsed: ParsedCompletion, tags: str | TagSet = RL_TAGS, *, ordered: bool = False) -> int:
    """1 iff every tag literal occurs; ``ordered`` also requires think block before answer block."""
    tags = resolve_tags(tags)
    pos = [parsed.tag_positions.get(t, -1) for t in tags.as_tuple()]
    if min(pos) < 0:
        return 0
    if ordered:
        ot, ct, oa, ca = pos
        if not (ot < ct <= oa < ca):
            return 0
    return 1


def gran_reward(
    prediction: str | None,
    ground_truth: TaxonomyAnnotation,
    *,
    options: Mapping[str, str] | None = None,
    scale: float = GRAN_SCALE,
) -> float:
    """``scale * depth / L`` when the prediction lies on the ground-truth path, else 0."""
    if not prediction:
        return 0.0
    label = prediction
    if options:
        letter = prediction.strip().upper()
        if letter in options:
            label = options[letter]
    depth = ground_truth.depth_of(label)
    if depth is None:
        return 0.0
    return scale * depth_weight(len(ground_truth.path), depth)


def malignancy_reward(predicted: str | None, truth: str) -> float:
    if predicted is None:
        return 0.0
    return MALIGNANCY_REWARD if canonical(predicted) == truth else 0.0


def score(
    completion: str,
    ground_truth: TaxonomyAnnotation,
    *,
    options: Mapping[str, str] | None = None,
    tags: str | TagSet = RL_TAGS,
    mode: Mode = "strict",
    gran_scale: float = GRAN_SCALE,
    ordered: bool = False,
) -> RewardBreakdown:
    parsed = parse_completion(completion, tags, mode, options)
    fmt = format_reward(parsed, tags, ordered=ordered)
    gran = gran_reward(parsed.predicted_label, ground_truth, scale=gran_scale)
    mal = malignancy_reward(parsed.predicted_malignancy, ground_truth.malignancy)
    return RewardBreakdown(format=fmt, gran=gran, malignancy=mal, total=fmt + gran + mal, parsed=parsed)


def total_reward(
    completion: str,
    item: McqItem,
    tags: str | TagSet = RL_TAGS,
    mode: Mode = "strict",
    *,
    gran_scale: float = GRAN_SCALE,
    ordered: bool = False,
) -> RewardBreakdown:
    """Score one completion against an MCQ item."""
    return score(
        completion,
        item.ground_truth,
        options=item.option_map,
        tags=tags,
        mode=mode,
        gran_scale=gran_scale,
        ordered=ordered,
    )
