"""Two-sample state-space DAG and minimal shared latent sets under masking.

A shared set ``C`` for a mask is computed two ways: a selection/pruning
algorithm, and a brute-force enumeration over latent subsets.  The semantics
are hierarchical.  Within a sample the shared latent of a masked/unmasked
neighbour pair is their lowest common state.  The system node is only needed
when no state-level connection between masked and unmasked data exists.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

THETA = "Theta"
SAMPLES = ("i", "j")


def x_node(n, t):
    return f"X[{n},{t}]"


def y_node(n, t):
    return f"Y[{n},{t}]"


@dataclass
class DAG:
    parents: dict  # node -> tuple of parents
    latent: set
    observed: set

    @property
    def nodes(self):
        return list(self.parents)

    def children(self, node):
        return [c for c, ps in self.parents.items() if node in ps]

    def ancestors(self, node):
        seen, stack = set(), list(self.parents[node])
        while stack:
            p = stack.pop()
            if p not in seen:
                seen.add(p)
                stack.extend(self.parents[p])
        return seen

    def descendants(self, node):
        seen, stack = set(), self.children(node)
        while stack:
            c = stack.pop()
            if c not in seen:
                seen.add(c)
                stack.extend(self.children(c))
        return seen


def build_two_sample_ssm(W):
    """Theta plus, per sample, a state chain X[n,1..W] with one measurement each."""
    if W < 1:
        raise ValueError(f"W must be >= 1, got {W}")
    parents = {THETA: ()}
    for n in SAMPLES:
        for t in range(1, W + 1):
            parents[x_node(n, t)] = () if t == 1 else (x_node(n, t - 1), THETA)
        for t in range(1, W + 1):
            parents[y_node(n, t)] = (x_node(n, t),)
    latent = {k for k in parents if not k.startswith("Y")}
    observed = set(parents) - latent
    return DAG(parents, latent, observed)


@dataclass(frozen=True)
class MaskScheme:
    """``keep[n][t-1]`` is True when Y[n,t] is visible."""

    keep: tuple

    def masked(self):
        return {y_node(n, t + 1) for n, row in zip(SAMPLES, self.keep) for t, k in enumerate(row) if not k}

    def unmasked(self):
        return {y_node(n, t + 1) for n, row in zip(SAMPLES, self.keep) for t, k in enumerate(row) if k}

    @property
    def W(self):
        return len(self.keep[0])

    def is_full_sample(self):
        return {tuple(r) for r in self.keep} == {(True,) * self.W, (False,) * self.W}

    @classmethod
    def subsequence(cls, W, t0, t1, sample="i"):
        """Sample ``sample`` masked on [t0, t1] (1-based, inclusive); the rest visible."""
        row = tuple(not (t0 <= t <= t1) for t in range(1, W + 1))
        full = (True,) * W
        return cls((row, full) if sample == "i" else (full, row))


def _latent_parent(dag, y):
    (p,) = dag.parents[y]
    return p


def minimal_shared_set(dag, mask):
    masked, unmasked = mask.masked(), mask.unmasked()
    if not masked or not unmasked:
        raise ValueError("mask must hide at least one and reveal at least one observable")

    # selection: latent ancestors of the masked data that also feed visible data
    anc_m = set().union(*(dag.ancestors(y) for y in masked)) & dag.latent
    anc_u = set().union(*(dag.ancestors(y) for y in unmasked)) & dag.latent
    selected = anc_m & anc_u

    status = {y: (y in masked) for y in masked | unmasked}
    state_level, system_level = set(), set()
    for a in selected:
        own = [c for c in dag.children(a) if c in dag.observed]
        if not own:
            system_level.add(a)
            continue
        # keep a state only when its successor's measurement is on the other side
        nxt = [
            c2
            for c in dag.children(a) if c in dag.latent
            for c2 in dag.children(c) if c2 in dag.observed
        ]
        if any(status[y] != status[y2] for y in own for y2 in nxt):
            state_level.add(a)

    # system nodes sit above every state path into the visible region
    if state_level:
        return frozenset(state_level)
    return frozenset(system_level)


def _connections(dag, mask):
    """Latent sets that a shared set must intersect, one per connection."""
    masked, unmasked = sorted(mask.masked()), sorted(mask.unmasked())
    chain, common = [], []
    for ym in masked:
        for yu in unmasked:
            pm, pu = _latent_parent(dag, ym), _latent_parent(dag, yu)
            if pm in dag.ancestors(pu):
                up, down = pm, pu
            elif pu in dag.ancestors(pm):
                up, down = pu, pm
            else:
                shared = dag.ancestors(pm) & dag.ancestors(pu) & dag.latent
                if shared:
                    common.append(frozenset(shared))
                continue
            # latents on directed state paths from the upstream parent, short of the downstream one
            seg = {up} | (dag.descendants(up) & dag.ancestors(down) & dag.latent)
            chain.append(frozenset(seg))
    return chain, common


def brute_force_shared_set(dag, mask):
    """Smallest latent subset meeting every connection; ties broken lexicographically."""
    chain, common = _connections(dag, mask)
    required = chain if chain else common
    latents = sorted(dag.latent)
    for size in range(len(latents) + 1):
        for subset in itertools.combinations(latents, size):
            s = set(subset)
            if all(s & conn for conn in required):
                return frozenset(subset)
    raise AssertionError("unreachable: the full latent set meets every connection")


def all_masks(W):
    n = 2 * W
    for bits in range(1, 2**n - 1):
        flat = tuple(bool(bits >> k & 1) for k in range(n))
        yield MaskScheme((flat[:W], flat[W:]))


def subsequence_expected(W, t0, t1, sample="i"):
    """Closed-form shared set for one masked subsequence of one sample."""
    if t0 == 1 and t1 < W:
        return frozenset({x_node(sample, t1)})
    if t0 > 1 and t1 == W:
        return frozenset({x_node(sample, t0 - 1)})
    return frozenset({x_node(sample, t0 - 1), x_node(sample, t1)})


@dataclass
class TheoremReport:
    w_range: tuple
    masks_checked: int = 0
    counterexamples: list = field(default_factory=list)
    case_counts: dict = field(default_factory=dict)
    elapsed: float = 0.0

    @property
    def ok(self):
        return not self.counterexamples

    def summary(self):
        lines = [
            f"W range: {self.w_range[0]}..{self.w_range[1]}",
            f"masks checked: {self.masks_checked}",
            f"counterexamples: {len(self.counterexamples)}",
        ]
        for case, n in sorted(self.case_counts.items()):
            lines.append(f"subsequence masks [{case}]: {n}")
        lines.append(f"elapsed: {self.elapsed:.2f}s")
        return "\n".join(lines)

    def to_dict(self):
        return {
            "w_range": list(self.w_range),
            "masks_checked": self.masks_checked,
            "counterexamples": self.counterexamples,
            "case_counts": self.case_counts,
            "ok": self.ok,
        }


def verify_theorem1(w_min=2, w_max=5):
    if w_min < 2:
        raise ValueError("the system node needs a Theta-driven state: W must be >= 2")
    report = TheoremReport((w_min, w_max))
    start = time.perf_counter()
    for W in range(w_min, w_max + 1):
        dag = build_two_sample_ssm(W)
        for mask in all_masks(W):
            report.masks_checked += 1
            got = minimal_shared_set(dag, mask)
            oracle = brute_force_shared_set(dag, mask)
            problems = []
            if got != oracle:
                problems.append("algorithm and brute force disagree")
            if mask.is_full_sample() != (got == frozenset({THETA})):
                problems.append("system node membership contradicts the full-sample rule")
            if not mask.is_full_sample() and THETA in got:
                problems.append("system node in a partial mask")
            if problems:
                report.counterexamples.append(
                    {"W": W, "keep": [list(r) for r in mask.keep], "algorithm": sorted(got),
                     "brute_force": sorted(oracle), "problems": problems}
                )
        for sample in SAMPLES:
            for t0 in range(1, W + 1):
                for t1 in range(t0, W + 1):
                    if t0 == 1 and t1 == W:
                        continue
                    case = "left" if t0 == 1 else "right" if t1 == W else "middle"
                    report.case_counts[case] = report.case_counts.get(case, 0) + 1
                    mask = MaskScheme.subsequence(W, t0, t1, sample)
                    got = minimal_shared_set(dag, mask)
                    want = subsequence_expected(W, t0, t1, sample)
                    if got != want:
                        report.counterexamples.append(
                            {"W": W, "sample": sample, "t0": t0, "t1": t1, "case": case,
                             "algorithm": sorted(got), "expected": sorted(want),
                             "problems": ["closed-form subsequence case mismatch"]}
                        )
    report.elapsed = time.perf_counter() - start
    return report
