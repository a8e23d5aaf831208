"""Diagnostic cases, reasoning-trajectory synthesis and SFT rendering."""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from hierdx.generation import TextGenerator
from hierdx.taxonomy import (
    DdxGraph,
    TaxonomyAnnotation,
    TaxonomyTree,
    canonical,
    resolve_ddx_neighbor,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
KINDS = ("type1", "type2", "type3")

SFT_PROMPT_TYPE1 = (
    "You are a medical vision-language assistant specializing in dermatology. \n"
    "Given the dermatology image, analyze the visual findings and provide a structured diagnosis "
    "following this format:\n"
    "\n"
    "<thinking>Describe the key clinical features, visual observations, and the diagnostic rationale "
    "that support the diagnosis.</thinking>\n"
    "<diagnosis>Provide the most likely and specific fine-grained diagnosis, and briefly classify the "
    "condition (benign or malignant) along with any relevant clinical taxonomy.</diagnosis>\n"
    "\n"
    "Ensure your response is medically accurate, concise, and strictly follows the specified format."
)

SFT_PROMPT_DIFFERENTIAL = (
    "You are a medical vision-language assistant specializing in dermatology. \n"
    "Given the dermatology image, analyze the visual findings and provide a structured diagnostic "
    "reasoning following this format:\n"
    "\n"
    "<thinking>\n"
    "Begin by describing the characteristic clinical features and visual observations of the lesion. \n"
    "Based on these features, propose the most likely diagnosis. \n"
    "Then identify at least one plausible alternative diagnosis and describe its defining features. \n"
    "Compare the observed lesion with these alternatives and explain step by step why the final "
    "diagnosis is more consistent with the findings. \n"
    "Conclude the reasoning with the single condition that best matches the clinical presentation.\n"
    "</thinking>\n"
    "\n"
    "<diagnosis>\n"
    "Provide only the single most likely and specific fine-grained diagnosis. \n"
    "Also briefly classify the condition (benign or malignant) and indicate any relevant clinical "
    "taxonomy (e.g., subtype or disease family). \n"
    "Do not include explanations, multiple options, or extra punctuation.\n"
    "</diagnosis>\n"
    "\n"
    "Ensure your response is medically accurate, concise, and strictly follows the specified format."
)

# Prompt sent to the comparator LLM. The anchor is the diagnosis the comparison must favour.
COMPARATOR_PROMPT = (
    "You are an expert dermatologist. Two diagnostic rules are given for the same lesion image.\n"
    "Primary diagnosis: {primary}\n"
    "Primary rule: {primary_rationale}\n"
    "Differential diagnosis: {differential}\n"
    "Differential rule: {differential_rationale}\n"
    "Anchor diagnosis: {anchor}\n"
    "Write a concise comparison of the lesion's features against both rules, explaining step by step "
    "why the findings are more consistent with the anchor diagnosis than with the alternative."
)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class DiagnosticCase:
    id: str
    image_ref: str
    rationale: str
    diagnosis: str

    def __post_init__(self) -> None:
        if not self.rationale.strip():
            raise CorpusError(f"case {self.id!r} has an empty rationale")
        object.__setattr__(self, "diagnosis", canonical(self.diagnosis))

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "image_ref": self.image_ref, "rationale": self.rationale, "diagnosis": self.diagnosis}


@dataclass(frozen=True)
class Trajectory:
    id: str
    kind: str
    image_ref: str
    primary_rationale: str
    primary_diagnosis: str
    final_diagnosis: str
    annotation: TaxonomyAnnotation
    differential_rationale: str | None = None
    differential_diagnosis: str | None = None
    comparison: str | None = None

    def validate(self) -> None:
        diff = (self.differential_rationale, self.differential_diagnosis, self.comparison)
        if self.kind == "type1":
            if any(f is not None for f in diff) or self.final_diagnosis != self.primary_diagnosis:
                raise CorpusError(f"{self.id}: malformed type1 trajectory")
        elif self.kind in ("type2", "type3"):
            if any(f is None for f in diff):
                raise CorpusError(f"{self.id}: {self.kind} trajectory lacks differential fields")
            target = self.primary_diagnosis if self.kind == "type2" else self.differential_diagnosis
            if self.final_diagnosis != target:
                raise CorpusError(f"{self.id}: {self.kind} final diagnosis mismatch")
        else:
            raise CorpusError(f"{self.id}: unknown kind {self.kind!r}")
        if self.annotation.leaf != self.final_diagnosis:
            raise CorpusError(f"{self.id}: annotation does not end at the final diagnosis")

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "id": self.id,
            "kind": self.kind,
            "image_ref": self.image_ref,
            "primary_rationale": self.primary_rationale,
            "primary_diagnosis": self.primary_diagnosis,
            "differential_rationale": self.differential_rationale,
            "differential_diagnosis": self.differential_diagnosis,
            "comparison": self.comparison,
            "final_diagnosis": self.final_diagnosis,
            "annotation": self.annotation.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Trajectory:
        return cls(
            id=data["id"],
            kind=data["kind"],
            image_ref=data["image_ref"],
            primary_rationale=data["primary_rationale"],
            primary_diagnosis=data["primary_diagnosis"],
            final_diagnosis=data["final_diagnosis"],
            annotation=TaxonomyAnnotation.from_dict(data["annotation"]),
            differential_rationale=data.get("differential_rationale"),
            differential_diagnosis=data.get("differential_diagnosis"),
            comparison=data.get("comparison"),
        )


@dataclass(frozen=True)
class SftRecord:
    image_ref: str
    prompt: str
    response: str

    def to_dict(self) -> dict[str, str]:
        return {"image_ref": self.image_ref, "prompt": self.prompt, "response": self.response}


@dataclass
class SynthesisResult:
    trajectories: list[Trajectory] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)

    @property
    def skip_count(self) -> int:
        return len(self.skipped)

    def extend(self, other: SynthesisResult) -> None:
        self.trajectories.extend(other.trajectories)
        self.skipped.extend(other.skipped)


# -- I/O --------------------------------------------------------------------

def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return rows


def write_jsonl(path: str | Path, rows: Iterable[Mapping[str, Any]]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
            n += 1
    return n


def load_cases(path: str | Path) -> list[DiagnosticCase]:
    cases = []
    seen: set[str] = set()
    for row in read_jsonl(path):
        try:
            case = DiagnosticCase(str(row["id"]), str(row.get("image_ref", "")), row["rationale"], row["diagnosis"])
        except KeyError as exc:
            raise CorpusError(f"case record missing field {exc.args[0]!r}: {row}") from None
        if case.id in seen:
            raise CorpusError(f"duplicate case id {case.id!r}")
        seen.add(case.id)
        cases.append(case)
    return cases


# -- synthesis --------------------------------------------------------------

def _resolvable(cases: Iterable[DiagnosticCase], tree: TaxonomyTree) -> tuple[list[DiagnosticCase], list[tuple[str, str]]]:
    ok, skipped = [], []
    for case in sorted(cases, key=lambda c: c.id):
        if case.diagnosis in tree:
            ok.append(case)
        else:
            logger.warning("skipping case %s: diagnosis %r not in taxonomy", case.id, case.diagnosis)
            skipped.append((case.id, f"unknown diagnosis {case.diagnosis!r}"))
    return ok, skipped


def synth_type1(cases: Iterable[DiagnosticCase], tree: TaxonomyTree) -> SynthesisResult:
    """One direct trajectory per case; cases with unknown diagnoses are skipped."""
    ok, skipped = _resolvable(cases, tree)
    out = [
        Trajectory(
            id=f"{c.id}:type1",
            kind="type1",
            image_ref=c.image_ref,
            primary_rationale=c.rationale,
            primary_diagnosis=c.diagnosis,
            final_diagnosis=c.diagnosis,
            annotation=tree.path_of(c.diagnosis),
        )
        for c in ok
    ]
    return SynthesisResult(out, skipped)


def comparator_prompt(primary: DiagnosticCase, differential: DiagnosticCase, anchor: str) -> str:
    return COMPARATOR_PROMPT.format(
        primary=primary.diagnosis,
        primary_rationale=primary.rationale,
        differential=differential.diagnosis,
        differential_rationale=differential.rationale,
        anchor=anchor,
    )


def pick_differential(
    case: DiagnosticCase,
    tree: TaxonomyTree,
    ddx: DdxGraph,
    by_diagnosis: Mapping[str, Sequence[DiagnosticCase]],
    seed: int,
) -> DiagnosticCase:
    """Differential partner for ``case``: DDx fallback search, else a seeded random other diagnosis.

    Among cases sharing the chosen diagnosis the lowest id wins.
    """
    counts = {d: len(cs) for d, cs in by_diagnosis.items()}
    d_d = resolve_ddx_neighbor(case.diagnosis, ddx, tree, counts)
    if d_d is None:
        others = sorted(d for d in by_diagnosis if d != case.diagnosis)
        if not others:
            raise CorpusError("fallback sampling needs at least two distinct diagnoses with cases")
        d_d = random.Random(f"{seed}:{case.id}").choice(others)
    return min(by_diagnosis[d_d], key=lambda c: c.id)


def _synth_differential(
    kind: str,
    cases: Iterable[DiagnosticCase],
    tree: TaxonomyTree,
    ddx: DdxGraph,
    generator: TextGenerator,
    seed: int,
    pool: Iterable[DiagnosticCase] | None,
    max_workers: int,
) -> SynthesisResult:
    ok, skipped = _resolvable(cases, tree)
    pool_ok = ok if pool is None else _resolvable(pool, tree)[0]
    by_diagnosis: dict[str, list[DiagnosticCase]] = {}
    for c in pool_ok:
        by_diagnosis.setdefault(c.diagnosis, []).append(c)

    pairs = []
    for case in ok:
        partner = pick_differential(case, tree, ddx, by_diagnosis, seed)
        anchor = case.diagnosis if kind == "type2" else partner.diagnosis
        pairs.append((case, partner, anchor))

    def run(pair):
        case, partner, anchor = pair
        try:
            return generator.generate_text(comparator_prompt(case, partner, anchor)), None
        except Exception as exc:  # any client failure skips the item
            return None, str(exc)

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool_exec:
        texts = list(pool_exec.map(run, pairs))

    result = SynthesisResult(skipped=skipped)
    for (case, partner, anchor), (rho, err) in zip(pairs, texts):
        if err is not None:
            logger.warning("skipping case %s: generator failed: %s", case.id, err)
            result.skipped.append((case.id, f"generator failure: {err}"))
            continue
        final = case.diagnosis if kind == "type2" else partner.diagnosis
        result.trajectories.append(
            Trajectory(
                id=f"{case.id}:{kind}",
                kind=kind,
                image_ref=case.image_ref,
                primary_rationale=case.rationale,
                primary_diagnosis=case.diagnosis,
                differential_rationale=partner.rationale,
                differential_diagnosis=partner.diagnosis,
                comparison=rho,
                final_diagnosis=final,
                annotation=tree.path_of(final),
            )
        )
    return result


def synth_type2(
    cases: Iterable[DiagnosticCase],
    tree: TaxonomyTree,
    ddx: DdxGraph,
    generator: TextGenerator,
    seed: int = 0,
    *,
    pool: Iterable[DiagnosticCase] | None = None,
    max_workers: int = 4,
) -> SynthesisResult:
    """Differential comparison that keeps the primary diagnosis.

    ``pool`` is the case set differentials are drawn from (defaults to ``cases``).
    """
    return _synth_differential("type2", cases, tree, ddx, generator, seed, pool, max_workers)


def synth_type3(
    cases: Iterable[DiagnosticCase],
    tree: TaxonomyTree,
    ddx: DdxGraph,
    generator: TextGenerator,
    seed: int = 0,
    *,
    pool: Iterable[DiagnosticCase] | None = None,
    max_workers: int = 4,
) -> SynthesisResult:
    """Reflective revision: the final diagnosis becomes the differential one."""
    return _synth_differential("type3", cases, tree, ddx, generator, seed, pool, max_workers)


def split_by_mix(cases: Sequence[DiagnosticCase], mix: Sequence[float], seed: int) -> list[list[DiagnosticCase]]:
    """Partition cases into three pools with sizes proportional to ``mix``."""
    if len(mix) != 3 or any(m < 0 for m in mix) or sum(mix) <= 0:
        raise CorpusError("mix must be three non-negative weights with a positive sum")
    ordered = sorted(cases, key=lambda c: c.id)
    random.Random(f"mix:{seed}").shuffle(ordered)
    total = sum(mix)
    bounds, acc = [], 0.0
    for m in mix:
        acc += m
        bounds.append(round(len(ordered) * acc / total))
    pools, start = [], 0
    for b in bounds:
        pools.append(sorted(ordered[start:b], key=lambda c: c.id))
        start = b
    return pools


def synthesize(
    cases: Sequence[DiagnosticCase],
    tree: TaxonomyTree,
    ddx: DdxGraph,
    generator: TextGenerator,
    seed: int = 0,
    mix: Sequence[float] = (1, 1, 1),
    max_workers: int = 4,
) -> SynthesisResult:
    """Assign each case to one trajectory kind by ``mix`` and synthesize all three sets.

    Differential partners are always drawn from the full corpus.
    """
    p1, p2, p3 = split_by_mix(cases, mix, seed)
    result = synth_type1(p1, tree)
    result.extend(synth_type2(p2, tree, ddx, generator, seed, pool=cases, max_workers=max_workers))
    result.extend(synth_type3(p3, tree, ddx, generator, seed, pool=cases, max_workers=max_workers))
    result.trajectories.sort(key=lambda t: t.id)
    return result


# -- rendering --------------------------------------------------------------

def hierarchy_sentence(label: str, annotation: TaxonomyAnnotation) -> str:
    """"X is a subtype of P, and G, and is generally classified as M." (ancestors nearest first)."""
    ancestors = list(reversed(annotation.path[:-1]))
    head = label[:1].upper() + label[1:]
    if ancestors:
        return f"{head} is a subtype of {', and '.join(ancestors)}, and is generally classified as {annotation.malignancy}."
    return f"{head} is generally classified as {annotation.malignancy}."


def render_sft(traj: Trajectory) -> SftRecord:
    traj.validate()
    sentence = hierarchy_sentence(traj.final_diagnosis, traj.annotation)
    if traj.kind == "type1":
        thinking = traj.primary_rationale.strip()
        diagnosis = f"{traj.final_diagnosis}, {sentence}"
        prompt = SFT_PROMPT_TYPE1
    else:
        thinking = (
            f"Based on the rule: {traj.primary_rationale.strip()} "
            f"We can give a primary diagnosis that {traj.primary_diagnosis}. "
            f"Considering the differential diagnosis for {traj.primary_diagnosis}, namely "
            f"{traj.differential_diagnosis}, we compare against the diagnostic rule for "
            f"{traj.differential_diagnosis}: {traj.differential_rationale.strip()}\n"
            f"{traj.comparison.strip()} "
            f'Therefore, the most likely condition corresponds to "{traj.final_diagnosis}".'
        )
        diagnosis = f"{traj.final_diagnosis}. {sentence}"
        prompt = SFT_PROMPT_DIFFERENTIAL
    response = f"<thinking>{thinking}</thinking>\n<diagnosis>{diagnosis}</diagnosis>"
    return SftRecord(traj.image_ref, prompt, response)


# -- fixtures ---------------------------------------------------------------

def synthetic_cases(tree: TaxonomyTree, n: int, seed: int = 0, labels: Sequence[str] | None = None) -> list[DiagnosticCase]:
    """Generate ``n`` placeholder cases with template rationales over taxonomy labels."""
    rng = random.Random(f"cases:{seed}")
    pool = sorted(labels) if labels is not None else tree.labels
    width = len(str(max(n - 1, 0)))
    out = []
    for i in range(n):
        label = rng.choice(pool)
        out.append(
            DiagnosticCase(
                id=f"case-{i:0{width}d}",
                image_ref=f"images/case-{i:0{width}d}.jpg",
                rationale=f"Presence of the morphological hallmarks described for {label} indicates {label}.",
                diagnosis=label,
            )
        )
    return out


def diagnosis_counts(cases: Iterable[DiagnosticCase]) -> Counter[str]:
    return Counter(c.diagnosis for c in cases)
