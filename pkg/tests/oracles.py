"""Brute-force reference implementations, written independently of the library code paths."""

import random

CATEGORIES = ["benign", "malignant", "precancerous in situ"]


def random_forest(rng: random.Random, max_nodes: int = 50, max_depth: int = 6) -> dict[str, str | None]:
    """Random label -> parent map with bounded size and depth."""
    n = rng.randint(1, max_nodes)
    parents: dict[str, str | None] = {}
    depth: dict[str, int] = {}
    for i in range(n):
        label = f"n{i:02d}"
        eligible = [l for l in parents if depth[l] < max_depth]
        if not eligible or rng.random() < 0.15:
            parents[label], depth[label] = None, 1
        else:
            p = rng.choice(eligible)
            parents[label], depth[label] = p, depth[p] + 1
    return parents


def as_nodes(parents, rng):
    return [{"label": l, "parent": p, "malignancy": rng.choice(CATEGORIES)} for l, p in parents.items()]


def root_path(parents, label):
    chain = []
    node = label
    while node is not None:
        chain.insert(0, node)
        node = parents[node]
    return chain


def gran_oracle(parents, truth, prediction, scale=0.75):
    """scale * sum_i w_i * delta_i, enumerating every node of the taxonomy."""
    path = root_path(parents, truth)
    L = len(path)
    total = 0.0
    for node in sorted(parents):
        for i, ell in enumerate(path, start=1):
            if node == ell and ell == prediction:
                total += (i / L) * 1
    return scale * total


def resolve_oracle(d, edges, parents, counts):
    """Exhaustive reading of the DDx fallback search over all (candidate, child) pairs."""
    labels = sorted(set(parents) | {x for e in edges for x in e})

    def adj(x):
        return sorted({b for a, b in edges if a == x and b != x} | {a for a, b in edges if b == x and a != x})

    cand = adj(d)
    if not cand:
        p = parents.get(d)
        cand = adj(p) if p is not None else []
    if not cand:
        return None
    ordered = []
    for c in cand:
        ordered.append(c)
        ordered.extend(l for l in labels if parents.get(l) == c)
    hits = [x for x in ordered if x != d and counts.get(x, 0) > 0]
    return hits[0] if hits else None


def confusion_macro_f1(truth, pred, classes=("A", "B", "C")):
    """Macro-F1 from a full confusion matrix (rows truth, cols prediction incl. 'none')."""
    cols = list(classes) + [None]
    m = {(t, p): 0 for t in classes for p in cols}
    for t, p in zip(truth, pred):
        m[(t, p if p in classes else None)] += 1
    f1s = []
    for c in classes:
        tp = m[(c, c)]
        fp = sum(m[(t, c)] for t in classes if t != c)
        fn = sum(m[(c, p)] for p in cols if p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(f1s) / len(classes)


def objective_fixture(rng, *, n_heads=2, k=4, clip_eps=0.2, kl_coeff=0.05, temperature=1.0):
    """Random multi-head policy, reference and a K-candidate group.

    Old log-probs are jittered away from the current ones so ratios vary;
    ratios too close to a clip boundary are pushed off it so the objective is
    differentiable at the fixture.
    """
    import numpy as np

    from hierdx.grpo import Candidate, GrpoConfig, GrpoGroup, log_softmax

    sizes = [int(rng.integers(2, 6)) for _ in range(n_heads)]
    logits = [rng.normal(size=s) for s in sizes]
    ref = [rng.normal(size=s) for s in sizes]
    cfg = GrpoConfig(clip_eps=clip_eps, kl_coeff=kl_coeff, temperature=temperature)
    logp = [log_softmax(z, temperature) for z in logits]
    cands = []
    for _ in range(k):
        action = tuple(int(rng.integers(s)) for s in sizes)
        lp = float(sum(l[a] for l, a in zip(logp, action)))
        shift = float(rng.normal(scale=0.3))
        for edge in (np.log1p(clip_eps), np.log1p(-clip_eps)):
            if abs(shift - edge) < 1e-3:
                shift += 5e-3
        lp_old = min(lp - shift, 0.0)
        cands.append(Candidate(float(rng.normal()), lp, lp_old, lp, action))
    return GrpoGroup.from_candidates(cands), logits, ref, cfg


def finite_difference(group, logits, ref, cfg, h=1e-6):
    import numpy as np

    from hierdx.grpo import grpo_objective

    out = []
    for hi, z in enumerate(logits):
        g = np.zeros_like(z)
        for i in range(z.size):
            plus = [x.copy() for x in logits]
            minus = [x.copy() for x in logits]
            plus[hi][i] += h
            minus[hi][i] -= h
            g[i] = (grpo_objective(group, plus, ref, cfg)[0] - grpo_objective(group, minus, ref, cfg)[0]) / (2 * h)
        out.append(g)
    return out


def relative_error(a, b):
    import numpy as np

    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))
