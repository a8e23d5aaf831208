"""Group-relative policy optimization over categorical policy heads.

The math here is independent of any model: advantages are normalized within a
group of scored candidates, and the clipped surrogate minus a KL penalty is
differentiated analytically with respect to per-head logits. ``simulate``
drives a desk-scale bandit policy (one option head and one malignancy head per
MCQ item) through the real completion parser and reward.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from hierdx.mcq import McqItem
from hierdx.reward import RL_TAGS, RewardBreakdown, total_reward
from hierdx.taxonomy import MALIGNANCY_CATEGORIES

SIGMA_EPS = 1e-12


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 4
    clip_eps: float = 0.2
    kl_coeff: float = 0.01
    temperature: float = 1.0
    learning_rate: float = 1.0
    steps: int = 5000
    batch_size: int = 8
    format_corruption: float = 0.05
    eval_every: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be > 0")
        if self.kl_coeff < 0:
            raise ValueError("kl_coeff must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps must be >= 0, batch_size and eval_every >= 1")
        if not 0.0 <= self.format_corruption <= 1.0:
            raise ValueError("format_corruption must lie in [0, 1]")


@dataclass(frozen=True)
class Candidate:
    reward: float
    logprob_new: float
    logprob_old: float
    logprob_ref: float
    action: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not math.isfinite(self.reward):
            raise ValueError("reward must be finite")
        if max(self.logprob_new, self.logprob_old, self.logprob_ref) > 1e-12:
            raise ValueError("log-probabilities must be <= 0")


@dataclass(frozen=True)
class GrpoGroup:
    candidates: tuple[Candidate, ...]
    advantages: tuple[float, ...] = ()

    @classmethod
    def from_candidates(cls, candidates: Sequence[Candidate]) -> GrpoGroup:
        adv = group_advantages([c.reward for c in candidates])
        return cls(tuple(candidates), tuple(float(a) for a in adv))


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Standardize rewards within a group (population std); all zeros when the spread vanishes."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need at least two rewards per group")
    sigma = r.std()
    if sigma < SIGMA_EPS:
        return np.zeros_like(r)
    return (r - r.mean()) / sigma


def clipped_term(logprob_new: float, logprob_old: float, advantage: float, eps: float) -> float:
    ratio = math.exp(logprob_new - logprob_old)
    clipped = min(max(ratio, 1.0 - eps), 1.0 + eps)
    return min(ratio * advantage, clipped * advantage)


def categorical_kl(p: Sequence[float], q: Sequence[float]) -> float:
    """KL(p || q) for probability vectors, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("p and q must be 1-d vectors of equal length")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("p and q must each sum to 1")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("probabilities must be non-negative")
    support = p > 0
    if np.any(q[support] <= 0):
        raise ValueError("q must be positive wherever p is")
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax(logits, temperature))


def grpo_objective(
    group: GrpoGroup,
    logits: Sequence[np.ndarray],
    ref_logits: Sequence[np.ndarray],
    config: GrpoConfig,
) -> tuple[float, list[np.ndarray], float]:
    """Clipped surrogate minus ``kl_coeff * KL(pi || pi_ref)`` and its gradient.

    The policy factorizes over independent categorical heads; a candidate's
    ``action`` holds one index per head. Returns ``(objective, grads, kl)``
    where ``grads[h]`` is d objective / d ``logits[h]``.
    """
    T = config.temperature
    K = len(group.candidates)
    if K == 0 or len(group.advantages) != K:
        raise ValueError("group needs candidates with computed advantages")
    if len(logits) != len(ref_logits):
        raise ValueError("logits and ref_logits must have the same number of heads")
    logp = [log_softmax(z, T) for z in logits]
    probs = [np.exp(lp) for lp in logp]
    grads = [np.zeros_like(p) for p in probs]

    surrogate = 0.0
    for cand, adv in zip(group.candidates, group.advantages):
        if len(cand.action) != len(logits):
            raise ValueError("candidate action must index every head")
        lp_new = sum(float(lp[a]) for lp, a in zip(logp, cand.action))
        ratio = math.exp(lp_new - cand.logprob_old)
        surrogate += clipped_term(lp_new, cand.logprob_old, adv, config.clip_eps)
        # min() picks the clipped branch (zero gradient) when the ratio leaves the trust region
        # in the direction the advantage favours
        active = (adv > 0 and ratio < 1 + config.clip_eps) or (adv < 0 and ratio > 1 - config.clip_eps)
        if active:
            coef = adv * ratio / (K * T)
            for g, p, a in zip(grads, probs, cand.action):
                g -= coef * p
                g[a] += coef
    surrogate /= K

    kl = 0.0
    beta = config.kl_coeff
    for g, p, lp, zr in zip(grads, probs, logp, ref_logits):
        lq = log_softmax(zr, T)
        kl_h = float(np.sum(p * (lp - lq)))
        kl += kl_h
        if beta:
            g -= beta * p * ((lp - lq) - kl_h) / T
    return surrogate - beta * kl, grads, kl


# -- simulator --------------------------------------------------------------

@dataclass
class SyntheticPolicy:
    """Per-item option and malignancy logits plus a frozen reference snapshot."""

    option_logits: dict[str, np.ndarray]
    malignancy_logits: dict[str, np.ndarray]
    ref_option_logits: dict[str, np.ndarray] = field(default_factory=dict)
    ref_malignancy_logits: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def uniform(cls, items: Sequence[McqItem]) -> SyntheticPolicy:
        opt = {it.id: np.zeros(len(it.options)) for it in items}
        mal = {it.id: np.zeros(len(MALIGNANCY_CATEGORIES)) for it in items}
        return cls(
            opt,
            mal,
            {k: v.copy() for k, v in opt.items()},
            {k: v.copy() for k, v in mal.items()},
        )

    def heads(self, item_id: str) -> list[np.ndarray]:
        return [self.option_logits[item_id], self.malignancy_logits[item_id]]

    def ref_heads(self, item_id: str) -> list[np.ndarray]:
        return [self.ref_option_logits[item_id], self.ref_malignancy_logits[item_id]]

    def kl_to_ref(self, item_id: str, temperature: float = 1.0) -> float:
        return sum(
            categorical_kl(softmax(z, temperature), softmax(zr, temperature))
            for z, zr in zip(self.heads(item_id), self.ref_heads(item_id))
        )


@dataclass
class StepRecord:
    step: int
    mean_reward: float
    format: float
    gran: float
    malignancy: float
    kl: float
    greedy_accuracy: float | None = None


@dataclass
class TrainingReport:
    config: dict[str, Any]
    n_items: int
    initial_greedy_accuracy: float
    final_greedy_accuracy: float
    final_mean_kl: float
    curve: list[StepRecord]

    @property
    def rewards(self) -> list[float]:
        return [s.mean_reward for s in self.curve]

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": 1,
            "config": self.config,
            "n_items": self.n_items,
            "initial_greedy_accuracy": self.initial_greedy_accuracy,
            "final_greedy_accuracy": self.final_greedy_accuracy,
            "final_mean_kl": self.final_mean_kl,
            "curve": [asdict(s) for s in self.curve],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = ["step", "mean_reward", "format", "gran", "malignancy", "kl", "greedy_accuracy"]
        writer.writerow(cols)
        for s in self.curve:
            row = asdict(s)
            writer.writerow(["" if row[c] is None else repr(row[c]) for c in cols])
        return buf.getvalue()


def synth_completion(letter: str, malignancy: str, corrupt: bool) -> str:
    text = (
        "<thinking>Assessing the visible morphology against each option.</thinking>"
        f"<final diagnosis>{letter}, {malignancy}</final diagnosis>"
    )
    if corrupt:
        text = text.replace("</thinking>", "")
    return text


def greedy_accuracy(policy: SyntheticPolicy, items: Sequence[McqItem]) -> float:
    hits = sum(
        it.options[int(np.argmax(policy.option_logits[it.id]))].letter == it.correct_letter for it in items
    )
    return hits / len(items)


Scorer = Callable[[str, McqItem], RewardBreakdown]


def _default_scorer(completion: str, item: McqItem) -> RewardBreakdown:
    return total_reward(completion, item, RL_TAGS, "strict")


def simulate(
    items: Sequence[McqItem],
    config: GrpoConfig,
    scorer: Scorer = _default_scorer,
    policy: SyntheticPolicy | None = None,
) -> tuple[TrainingReport, SyntheticPolicy]:
    """Run seeded GRPO on a categorical policy over MCQ items."""
    items = list(items)
    if not items:
        raise ValueError("simulate needs at least one item")
    if len({it.id for it in items}) != len(items):
        raise ValueError("item ids must be unique")
    policy = policy or SyntheticPolicy.uniform(items)
    rng = np.random.default_rng(config.seed)
    T, K = config.temperature, config.group_size
    batch = min(config.batch_size, len(items))
    initial = greedy_accuracy(policy, items)
    curve: list[StepRecord] = []

    for step in range(config.steps):
        chosen = np.sort(rng.choice(len(items), size=batch, replace=False))
        rewards: list[RewardBreakdown] = []
        kls: list[float] = []
        for idx in chosen:
            item = items[idx]
            heads = policy.heads(item.id)
            logp = [log_softmax(z, T) for z in heads]
            opt_idx = rng.choice(len(logp[0]), size=K, p=np.exp(logp[0]))
            mal_idx = rng.choice(len(logp[1]), size=K, p=np.exp(logp[1]))
            corrupt = rng.random(K) < config.format_corruption
            cands = []
            for o, m, c in zip(opt_idx, mal_idx, corrupt):
                text = synth_completion(item.options[o].letter, MALIGNANCY_CATEGORIES[m], bool(c))
                scored = scorer(text, item)
                rewards.append(scored)
                lp = float(logp[0][o] + logp[1][m])
                cands.append(Candidate(scored.total, lp, lp, lp, (int(o), int(m))))
            group = GrpoGroup.from_candidates(cands)
            _, grads, kl = grpo_objective(group, heads, policy.ref_heads(item.id), config)
            kls.append(kl)
            if config.learning_rate:
                for z, g in zip(heads, grads):
                    z += config.learning_rate * g
        n = len(rewards)
        record = StepRecord(
            step=step,
            mean_reward=sum(r.total for r in rewards) / n,
            format=sum(r.format for r in rewards) / n,
            gran=sum(r.gran for r in rewards) / n,
            malignancy=sum(r.malignancy for r in rewards) / n,
            kl=sum(kls) / len(kls),
        )
        if (step + 1) % config.eval_every == 0 or step == config.steps - 1:
            record.greedy_accuracy = greedy_accuracy(policy, items)
        curve.append(record)

    final_kl = sum(policy.kl_to_ref(it.id, T) for it in items) / len(items)
    report = TrainingReport(
        config=asdict(config),
        n_items=len(items),
        initial_greedy_accuracy=initial,
        final_greedy_accuracy=greedy_accuracy(policy, items),
        final_mean_kl=final_kl,
        curve=curve,
    )
    return report, policy
