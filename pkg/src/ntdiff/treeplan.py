"""
N-tree trajectory plans and their exact cost accounting.

A plan splits the reverse trajectory into ``L`` segments. Segment 0 runs once
for the root (horizon 0); at each later segment boundary every node branches
into ``branching[l]`` children. Children split their parent's block of
horizons into equal contiguous sub-blocks and take the smallest horizon of
their sub-block, so the leftmost child always continues the parent's horizon.

All call counts are exact integers; floats appear only in reduction ratios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

from .errors import ConfigError


def _integer_root(value: int, k: int) -> int | None:
    if value < 1 or k < 1:
        return None
    guess = round(value ** (1.0 / k))
    for cand in (guess - 1, guess, guess + 1):
        if cand >= 1 and cand**k == value:
            return cand
    return None


def _prime_factors(n: int) -> list[int]:
    out, p = [], 2
    while p * p <= n:
        while n % p == 0:
            out.append(p)
            n //= p
        p += 1
    if n > 1:
        out.append(n)
    return out


def solve_branching(horizons: int, L: int) -> tuple[int, ...]:
    """Per-level branching factors whose product is ``horizons``.

    Uses the uniform factor N = horizons ** (1 / (L - 1)) when it is an
    integer. Otherwise the prime factors are packed into L - 1 slots (largest
    prime first, each into the currently smallest slot), and the slots are
    sorted descending; unused slots stay 1.
    """
    if L < 2:
        raise ConfigError(
            f"tree depth L={L} has no branching level; use the fully shared sampler for a single trajectory")
    if horizons < 1:
        raise ConfigError(f"need at least one horizon, got {horizons}")
    n = _integer_root(horizons, L - 1)
    if n is not None:
        return (n,) * (L - 1)
    slots = [1] * (L - 1)
    for p in sorted(_prime_factors(horizons), reverse=True):
        i = min(range(len(slots)), key=lambda j: (slots[j], j))
        slots[i] *= p
    return tuple(sorted(slots, reverse=True))


def allocate_segments(D: int, L: int) -> tuple[int, ...]:
    """Split D steps into L segments; the remainder goes to the earliest segments."""
    if L < 1:
        raise ConfigError(f"L must be >= 1, got {L}")
    if D < L:
        raise ConfigError(f"cannot split {D} steps into {L} non-empty segments")
    base, rem = divmod(D, L)
    return tuple(base + (1 if i < rem else 0) for i in range(L))


@dataclass(frozen=True)
class TreeNode:
    level: int
    horizon: int
    parent_horizon: int
    block: tuple[int, int]  # inclusive [t_lo, t_hi]
    path: tuple[int, ...]  # child indices from the root; () for the root

    @property
    def shift(self) -> int:
        return self.horizon - self.parent_horizon


@dataclass(frozen=True)
class TreePlan:
    L: int
    branching: tuple[int, ...]
    horizons: int
    segment_steps: tuple[int, ...]
    levels: tuple[tuple[TreeNode, ...], ...]

    @property
    def D(self) -> int:
        return sum(self.segment_steps)

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return tuple(len(lv) for lv in self.levels)

    @property
    def leaves(self) -> tuple[TreeNode, ...]:
        return self.levels[-1]

    @property
    def uniform(self) -> bool:
        return len(set(self.branching)) == 1

    def children(self, node: TreeNode) -> list[TreeNode]:
        if node.level + 1 >= self.L:
            return []
        k = len(node.path)
        return [c for c in self.levels[node.level + 1] if c.path[:k] == node.path]

    def branch_transitions(self) -> list[tuple[int, int]]:
        """(parent horizon, child horizon) for every parent->child edge of the tree."""
        return [(n.parent_horizon, n.horizon) for lv in self.levels[1:] for n in lv]

    def to_dict(self) -> dict:
        return {
            "L": self.L,
            "branching": list(self.branching),
            "horizons": self.horizons,
            "segment_steps": list(self.segment_steps),
            "level_sizes": list(self.level_sizes),
            "levels": [
                [{"horizon": n.horizon, "parent_horizon": n.parent_horizon, "shift": n.shift,
                  "block": list(n.block)} for n in lv]
                for lv in self.levels
            ],
        }


def build_plan(horizons: int, L: int, D: int, branching: Iterable[int] | None = None) -> TreePlan:
    """Build the contiguous-block tree for ``horizons`` leaves, depth ``L``, ``D`` steps.

    ``branching`` overrides the solved factors; its product must equal
    ``horizons`` and its length must be ``L - 1``.
    """
    if branching is None:
        branching = solve_branching(horizons, L)
    else:
        branching = tuple(int(b) for b in branching)
        if len(branching) != L - 1 or any(b < 1 for b in branching) or math.prod(branching) != horizons:
            raise ConfigError(f"branching {branching} is not a valid depth-{L} factorization of {horizons}")
    steps = allocate_segments(D, L)

    root = TreeNode(level=0, horizon=0, parent_horizon=0, block=(0, horizons - 1), path=())
    levels = [(root,)]
    for lvl, n in enumerate(branching, start=1):
        nxt = []
        for parent in levels[-1]:
            lo, hi = parent.block
            size = (hi - lo + 1) // n
            for j in range(n):
                c_lo = lo + j * size
                nxt.append(TreeNode(level=lvl, horizon=c_lo, parent_horizon=parent.horizon,
                                    block=(c_lo, c_lo + size - 1), path=parent.path + (j,)))
        levels.append(tuple(nxt))
    return TreePlan(L=L, branching=tuple(branching), horizons=horizons,
                    segment_steps=steps, levels=tuple(levels))


def geometric_calls(N: int, L: int, D: int) -> int:
    """(N^L - 1)/(N - 1) * D/L in exact integers; requires L | D."""
    if D % L:
        raise ValueError(f"closed form needs L | D, got D={D}, L={L}")
    series = L if N == 1 else (N**L - 1) // (N - 1)
    return series * (D // L)


def reduction_eq6(N: int, L: int, horizons: int) -> float | None:
    """L (N - 1)(T + 1) / (N (T + 1) - 1)."""
    den = N * horizons - 1
    if den == 0:
        return None
    return float(Fraction(L * (N - 1) * horizons, den))


def reduction_explicit(L: int, horizons: int) -> float | None:
    """The same ratio with N eliminated: L (T+1)((T+1)^(1/(L-1)) - 1) / ((T+1)^(L/(L-1)) - 1)."""
    if L < 2 or horizons < 2:
        return None
    root = horizons ** (1.0 / (L - 1))
    return L * horizons * (root - 1.0) / (horizons ** (L / (L - 1)) - 1.0)


def reduction_approx(L: int, horizons: int) -> float:
    """Large-horizon approximation L (1 - 1/N) with N = (T+1)^(1/(L-1))."""
    return L * (1.0 - 1.0 / horizons ** (1.0 / (L - 1)))


@dataclass(frozen=True)
class CostReport:
    calls_nt: int
    calls_traditional: int
    calls_shared: int
    reduction_exact: float
    reduction_closed_form: float | None
    reduction_explicit: float | None
    reduction_approx: float
    geometric_check: bool | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def count_calls(plan: TreePlan) -> CostReport:
    calls_nt = sum(size * d for size, d in zip(plan.level_sizes, plan.segment_steps))
    D, T1 = plan.D, plan.horizons
    calls_trad = T1 * D
    geometric_ok = closed = None
    if plan.uniform and plan.L >= 2:
        N = plan.branching[0]
        closed = reduction_eq6(N, plan.L, T1)
        if D % plan.L == 0:
            geometric_ok = geometric_calls(N, plan.L, D) == calls_nt
            if not geometric_ok:
                raise AssertionError("level-sum count disagrees with the geometric closed form")
    return CostReport(
        calls_nt=calls_nt,
        calls_traditional=calls_trad,
        calls_shared=shared_calls(T1, D),
        reduction_exact=float(Fraction(calls_trad, calls_nt)),
        reduction_closed_form=closed,
        reduction_explicit=reduction_explicit(plan.L, T1),
        reduction_approx=reduction_approx(plan.L, T1),
        geometric_check=geometric_ok,
    )


def shared_calls(horizons: int, D: int) -> int:
    """Calls of the fully shared baseline: a (D - 1)-step trunk plus one final step per horizon."""
    return (D - 1) + horizons


def enumerate_calls(plan: TreePlan) -> int:
    """Walk every node and every step of the plan; independent of level sizes."""
    total = 0
    stack = [plan.levels[0][0]]
    while stack:
        node = stack.pop()
        for _ in range(plan.segment_steps[node.level]):
            total += 1
        stack.extend(plan.children(node))
    return total


@dataclass(frozen=True)
class CurveRow:
    L: int
    constructible: bool
    branching: tuple[int, ...] = ()
    uniform: bool = False
    calls_nt: int | None = None
    R_exact: float | None = None
    R_closed: float | None = None
    R_explicit: float | None = None
    R_approx: float | None = None
    note: str = ""


def reduction_curve(horizons: int, D: int, L_range: Iterable[int]) -> list[CurveRow]:
    rows = []
    for L in L_range:
        try:
            plan = build_plan(horizons, L, D)
        except ConfigError as exc:
            rows.append(CurveRow(L=L, constructible=False, note=str(exc)))
            continue
        rep = count_calls(plan)
        rows.append(CurveRow(
            L=L, constructible=True, branching=plan.branching, uniform=plan.uniform,
            calls_nt=rep.calls_nt, R_exact=rep.reduction_exact, R_closed=rep.reduction_closed_form,
            R_explicit=rep.reduction_explicit, R_approx=rep.reduction_approx,
            note="" if D % L == 0 else "D not divisible by L; segments uneven",
        ))
    return rows


def format_plan(plan: TreePlan, report: CostReport) -> str:
    lines = [
        f"horizons={plan.horizons}  L={plan.L}  D={plan.D}",
        f"branching={plan.branching}  segment_steps={plan.segment_steps}",
        f"{'level':>5} {'nodes':>6} {'steps':>6} {'calls':>7}  horizons",
    ]
    for lvl, (nodes, d) in enumerate(zip(plan.levels, plan.segment_steps)):
        hs = ",".join(str(n.horizon) for n in nodes)
        if len(hs) > 60:
            hs = hs[:57] + "..."
        lines.append(f"{lvl:>5} {len(nodes):>6} {d:>6} {len(nodes) * d:>7}  {hs}")
    lines += [
        f"calls_nt={report.calls_nt}  calls_traditional={report.calls_traditional}  "
        f"calls_shared={report.calls_shared}",
        f"R={report.reduction_exact:.6g}  R_closed={_fmt(report.reduction_closed_form)}  "
        f"R_explicit={_fmt(report.reduction_explicit)}  R_approx={report.reduction_approx:.6g}",
    ]
    return "\n".join(lines)


def _fmt(x: float | None) -> str:
    return "n/a" if x is None else f"{x:.6g}"
