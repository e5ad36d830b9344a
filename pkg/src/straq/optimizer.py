"""Workload-driven selection of the column sets to stratify on.

Given query templates with weights, per-candidate skew (tail length), distinct
counts, and storage costs, picks the 0/1 assignment z maximizing

    G = sum_i w_i * y_i * tail_i

subject to the storage budget sum(store_j * z_j) <= budget and the replanning
drift constraint sum((exists_j XOR z_j) * store_j) <= r * sum(exists_j *
store_j).  For a fixed z the optimal coverage y_i has the closed form
min(1, max over chosen subsets of the distinct-count ratio), which reduces the
mixed program to a pure 0/1 search: small instances are enumerated exactly,
large ones fall back to greedy marginal gain plus 1-swap local search.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .catalog import Catalog, ColumnStats, TableHandle
from .errors import PlanInfeasibleError, StraqError
from .sampling import ColumnSet, family_store_cost

EXACT_CANDIDATE_LIMIT = 20
DEFAULT_MAX_COLS = 3


@dataclass(frozen=True)
class QueryTemplate:
    """Columns a query shape filters or groups on, with its workload weight."""

    phi: ColumnSet
    weight: float


@dataclass(frozen=True)
class WorkloadProfile:
    templates: tuple[QueryTemplate, ...]

    def __post_init__(self):
        total = sum(t.weight for t in self.templates)
        if self.templates and abs(total - 1.0) > 1e-9:
            raise StraqError(f"template weights sum to {total}, expected 1")


@dataclass(frozen=True)
class Candidate:
    """A column set that could get a sample family, with its planning inputs."""

    phi: ColumnSet
    tail: int      # distinct values rarer than the base cap
    distinct: int
    store: int     # rows needed to materialize the family
    exists: bool   # already materialized in the catalog


@dataclass(frozen=True)
class SamplePlan:
    table: str
    base_cap: int
    candidates: tuple[Candidate, ...]
    chosen: tuple[bool, ...]
    templates: tuple[QueryTemplate, ...]
    coverages: tuple[float, ...]
    objective: float
    budget_rows: int
    budget_used: int
    drift: float
    solver_kind: str

    def chosen_sets(self) -> tuple[ColumnSet, ...]:
        return tuple(c.phi for c, z in zip(self.candidates, self.chosen) if z)


def template_columns(query) -> tuple[str, ...]:
    """The template column set of a parsed query: WHERE plus GROUP BY columns."""
    cols = set(query.group_by)
    for conj in query.predicate:
        for atom in conj:
            cols.add(atom.column)
    return tuple(sorted(cols))


def extract_templates(query_log: Iterable, weights: Sequence[float] | None = None
                      ) -> WorkloadProfile:
    """One template per distinct column set; weight is its relative frequency.

    Each log entry is either a parsed query or a bare iterable of column
    names; constants never matter.  An optional parallel ``weights`` sequence
    overrides frequency with importance.
    """
    counter: Counter[tuple[str, ...]] = Counter()
    entries = list(query_log)
    if not entries:
        raise StraqError("empty query log")
    for i, q in enumerate(entries):
        if hasattr(q, "predicate"):
            cols = template_columns(q)
        else:
            cols = tuple(sorted(set(q)))
        counter[cols] += weights[i] if weights is not None else 1.0
    total = sum(counter.values())
    templates = tuple(
        QueryTemplate(ColumnSet(cols), weight / total)
        for cols, weight in sorted(counter.items())
    )
    return WorkloadProfile(templates)


def tail_length(stats: ColumnStats, phi: ColumnSet, cap: int) -> int:
    """Distinct values of ``phi`` with frequency below the cap (the skew metric)."""
    return int((stats.freq(tuple(phi)).counts < cap).sum())


def generate_candidates(profile: WorkloadProfile, cat: Catalog,
                        table: TableHandle | str, base_cap: int,
                        max_cols: int = DEFAULT_MAX_COLS) -> list[Candidate]:
    """Candidate column sets: non-empty subsets of some template, at most
    ``max_cols`` wide.  Columns that never co-occur in a template are never
    combined, which keeps the search space small without losing optima."""
    if max_cols < 1:
        raise StraqError(f"max_cols {max_cols} must be >= 1")
    handle = cat.tables[table] if isinstance(table, str) else table
    subsets: set[tuple[str, ...]] = set()
    for t in profile.templates:
        cols = sorted(t.phi)
        n = len(cols)
        for mask in range(1, 1 << n):
            if mask.bit_count() > max_cols:
                continue
            subsets.add(tuple(c for i, c in enumerate(cols) if mask & (1 << i)))
    ordered = sorted(subsets)
    stats = cat.compute_stats(handle, ordered)
    out = []
    for cols in ordered:
        phi = ColumnSet(cols)
        out.append(Candidate(
            phi=phi,
            tail=tail_length(stats, phi, base_cap),
            distinct=stats.distinct(cols),
            store=family_store_cost(phi, base_cap, stats),
            exists=f"{handle.name}/{phi}" in cat.families,
        ))
    return out


def coverage_of(template: QueryTemplate, chosen: Sequence[Candidate],
                template_distinct: int) -> float:
    """min(1, best distinct-count ratio over chosen subsets of the template);
    0 when no chosen candidate is a subset."""
    best = 0.0
    for cand in chosen:
        if cand.phi.issubset(template.phi):
            best = max(best, min(1.0, cand.distinct / template_distinct))
    return best


def solve_plan(candidates: Sequence[Candidate], profile: WorkloadProfile,
               budget_rows: int, drift: float, *,
               template_tails: Sequence[int], template_distincts: Sequence[int],
               mode: str = "auto", table: str = "", base_cap: int = 0,
               ) -> SamplePlan:
    """Pick the candidate families to build.

    ``template_tails`` and ``template_distincts`` are the skew metric and
    distinct count of each template's own column set.  ``drift`` in [0, 1]
    limits how much existing sample storage replanning may create or discard;
    1 disables the constraint (and is forced on a first-ever run, when
    nothing exists yet).  ``mode`` is exact, heuristic, or auto.
    """
    if budget_rows < 0:
        raise StraqError("storage budget must be >= 0")
    if not (0.0 <= drift <= 1.0):
        raise StraqError(f"drift fraction {drift} outside [0, 1]")
    candidates = tuple(candidates)
    templates = profile.templates
    stores = np.asarray([c.store for c in candidates], dtype=np.int64)
    exists = np.asarray([c.exists for c in candidates], dtype=bool)
    if not exists.any():
        drift = 1.0  # first run: the drift constraint has nothing to preserve
    existing_store = int(stores[exists].sum())
    drift_budget = None if drift == 1.0 else int(np.floor(drift * existing_store))

    if mode == "auto":
        mode = "exact" if len(candidates) <= EXACT_CANDIDATE_LIMIT else "heuristic"
    if mode == "exact":
        mask = _solve_exact(candidates, templates, stores, exists, budget_rows,
                            drift_budget, template_tails, template_distincts)
    elif mode == "heuristic":
        mask = _solve_heuristic(candidates, templates, stores, exists, budget_rows,
                                drift_budget, template_tails, template_distincts)
    else:
        raise StraqError(f"unknown solver mode {mode!r}")

    chosen = tuple(bool(mask >> j & 1) for j in range(len(candidates)))
    picked = [c for c, z in zip(candidates, chosen) if z]
    coverages = tuple(
        coverage_of(t, picked, d) for t, d in zip(templates, template_distincts)
    )
    objective = _objective(coverages, templates, template_tails)
    return SamplePlan(
        table=table, base_cap=base_cap, candidates=candidates, chosen=chosen,
        templates=templates, coverages=coverages, objective=objective,
        budget_rows=budget_rows, budget_used=int(stores[list(chosen)].sum()),
        drift=drift, solver_kind=mode,
    )


def _objective(coverages, templates, tails) -> float:
    return float(sum(
        t.weight * y * tail for t, y, tail in zip(templates, coverages, tails)
    ))


def _feasible_masks(n_cand, stores, exists, budget_rows, drift_budget):
    masks = np.arange(1 << n_cand, dtype=np.int64)
    used = np.zeros(len(masks), dtype=np.int64)
    changed = np.zeros(len(masks), dtype=np.int64)
    for j in range(n_cand):
        bit = (masks >> j) & 1
        used += bit * stores[j]
        flipped = bit != int(exists[j])
        changed += flipped * stores[j]
    ok = used <= budget_rows
    if drift_budget is not None:
        ok &= changed <= drift_budget
    return masks, ok


def _solve_exact(candidates, templates, stores, exists, budget_rows,
                 drift_budget, template_tails, template_distincts) -> int:
    n = len(candidates)
    if n > 24:
        raise StraqError(f"exact enumeration over {n} candidates is too large")
    masks, ok = _feasible_masks(n, stores, exists, budget_rows, drift_budget)
    if not ok.any():
        raise PlanInfeasibleError(
            "no assignment satisfies the storage and drift constraints "
            f"(budget={budget_rows} rows, drift allows "
            f"{'any' if drift_budget is None else drift_budget} changed rows)"
        )
    goal = np.zeros(len(masks), dtype=np.float64)
    for t, tail, dist in zip(templates, template_tails, template_distincts):
        if t.weight * tail == 0:
            continue
        covering = sorted(
            ((min(1.0, c.distinct / dist), j) for j, c in enumerate(candidates)
             if c.phi.issubset(t.phi)),
            key=lambda rj: (-rj[0], rj[1]),
        )
        y = np.zeros(len(masks), dtype=np.float64)
        unset = np.ones(len(masks), dtype=bool)
        for ratio, j in covering:
            hit = unset & (((masks >> j) & 1) == 1)
            y[hit] = ratio
            unset &= ~hit
        goal += (t.weight * tail) * y
    goal[~ok] = -np.inf
    best = goal.max()
    tied = np.flatnonzero(goal == best)
    # lexicographically smallest chosen index tuple wins ties
    best_mask = min(
        (tuple(j for j in range(n) if int(m) >> j & 1) for m in tied),
    )
    return sum(1 << j for j in best_mask)


def _solve_heuristic(candidates, templates, stores, exists, budget_rows,
                     drift_budget, template_tails, template_distincts) -> int:
    n = len(candidates)

    def feasible(mask: int) -> bool:
        used = changed = 0
        for j in range(n):
            bit = mask >> j & 1
            used += bit * int(stores[j])
            if bit != int(exists[j]):
                changed += int(stores[j])
        if used > budget_rows:
            return False
        return drift_budget is None or changed <= drift_budget

    def objective(mask: int) -> float:
        picked = [c for j, c in enumerate(candidates) if mask >> j & 1]
        cov = [coverage_of(t, picked, d)
               for t, d in zip(templates, template_distincts)]
        return _objective(cov, templates, template_tails)

    # start from the existing configuration, shedding families if it no
    # longer fits the budget (cheapest objective loss per freed row first)
    mask = sum(1 << j for j in range(n) if exists[j])
    if not feasible(mask):
        while True:
            used = sum(int(stores[j]) for j in range(n) if mask >> j & 1)
            if used <= budget_rows:
                break
            current = objective(mask)
            best_drop, best_key = None, None
            for j in range(n):
                if not (mask >> j & 1):
                    continue
                candidate_mask = mask & ~(1 << j)
                if drift_budget is not None:
                    changed = sum(
                        int(stores[k]) for k in range(n)
                        if (candidate_mask >> k & 1) != int(exists[k])
                    )
                    if changed > drift_budget:
                        continue
                loss = current - objective(candidate_mask)
                key = (loss / int(stores[j]) if stores[j] else 0.0, j)
                if best_key is None or key < best_key:
                    best_key, best_drop = key, j
            if best_drop is None:
                raise PlanInfeasibleError(
                    "existing samples exceed the budget and the drift "
                    "fraction forbids discarding enough of them"
                )
            mask &= ~(1 << best_drop)

    # greedy additions by marginal gain per stored row
    improved = True
    while improved:
        improved = False
        current = objective(mask)
        best_gain, best_j = 0.0, None
        for j in range(n):
            if mask >> j & 1:
                continue
            cand_mask = mask | 1 << j
            if not feasible(cand_mask):
                continue
            gain = (objective(cand_mask) - current) / max(int(stores[j]), 1)
            if gain > best_gain:
                best_gain, best_j = gain, j
        if best_j is not None:
            mask |= 1 << best_j
            improved = True

    # 1-swap local search
    improved = True
    while improved:
        improved = False
        current = objective(mask)
        for j in range(n):
            if not (mask >> j & 1):
                continue
            for k in range(n):
                if mask >> k & 1:
                    continue
                cand_mask = (mask & ~(1 << j)) | 1 << k
                if feasible(cand_mask) and objective(cand_mask) > current:
                    mask = cand_mask
                    improved = True
                    break
            if improved:
                break
    if not feasible(mask):
        raise PlanInfeasibleError("no feasible heuristic plan found")
    return mask


# -- workload and plan files ---------------------------------------------------


def save_workload(profile: WorkloadProfile, path) -> None:
    """One line per template: comma-separated columns, whitespace, weight."""
    with open(path, "w", encoding="utf-8") as f:
        for t in profile.templates:
            f.write(f"{','.join(t.phi)} {t.weight!r}\n")


def load_workload(path) -> WorkloadProfile:
    templates = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cols_part, _, weight_part = line.partition(" ")
            templates.append(QueryTemplate(
                ColumnSet(tuple(cols_part.split(","))), float(weight_part)
            ))
    return WorkloadProfile(tuple(templates))


def save_plan(plan: SamplePlan, path) -> None:
    """Deterministic plan file: chosen sets with their costs, per-template
    coverage, the objective, and budget accounting."""
    lines = [f"straq-plan 1 table={plan.table} base_cap={plan.base_cap}"]
    lines.append(f"solver {plan.solver_kind} drift {plan.drift!r}")
    lines.append(f"budget_rows {plan.budget_rows} budget_used {plan.budget_used}")
    lines.append(f"objective {plan.objective!r}")
    for cand, z in zip(plan.candidates, plan.chosen):
        lines.append(
            f"candidate {cand.phi} chosen={int(z)} store={cand.store} "
            f"tail={cand.tail} distinct={cand.distinct} exists={int(cand.exists)}"
        )
    for t, y in zip(plan.templates, plan.coverages):
        lines.append(f"template {t.phi} weight={t.weight!r} coverage={y!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_plan(path) -> SamplePlan:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    head = lines[0].split()
    if head[:2] != ["straq-plan", "1"]:
        raise StraqError(f"not a straq plan file: {lines[0]!r}")
    table = head[2].split("=", 1)[1]
    base_cap = int(head[3].split("=", 1)[1])
    solver = lines[1].split()
    budget = lines[2].split()
    objective = float(lines[3].split()[1])
    candidates, chosen, templates, coverages = [], [], [], []
    for line in lines[4:]:
        parts = line.split()
        fields = dict(p.split("=", 1) for p in parts[2:])
        if parts[0] == "candidate":
            candidates.append(Candidate(
                phi=ColumnSet(tuple(parts[1].split("+"))),
                tail=int(fields["tail"]), distinct=int(fields["distinct"]),
                store=int(fields["store"]), exists=bool(int(fields["exists"])),
            ))
            chosen.append(bool(int(fields["chosen"])))
        elif parts[0] == "template":
            templates.append(QueryTemplate(
                ColumnSet(tuple(parts[1].split("+"))), float(fields["weight"])
            ))
            coverages.append(float(fields["coverage"]))
    return SamplePlan(
        table=table, base_cap=base_cap, candidates=tuple(candidates),
        chosen=tuple(chosen), templates=tuple(templates),
        coverages=tuple(coverages), objective=objective,
        budget_rows=int(budget[1]), budget_used=int(budget[3]),
        drift=float(solver[3]), solver_kind=solver[1],
    )


def plan_to_json(plan: SamplePlan) -> dict:
    return {
        "table": plan.table,
        "base_cap": plan.base_cap,
        "candidates": [
            {"phi": list(c.phi), "tail": c.tail, "distinct": c.distinct,
             "store": c.store, "exists": c.exists}
            for c in plan.candidates
        ],
        "chosen": list(plan.chosen),
        "templates": [
            {"phi": list(t.phi), "weight": t.weight} for t in plan.templates
        ],
        "coverages": list(plan.coverages),
        "objective": plan.objective,
        "budget_rows": plan.budget_rows,
        "budget_used": plan.budget_used,
        "drift": plan.drift,
        "solver_kind": plan.solver_kind,
    }


def plan_from_json(obj: dict) -> SamplePlan:
    return SamplePlan(
        table=obj["table"], base_cap=obj["base_cap"],
        candidates=tuple(
            Candidate(ColumnSet(tuple(c["phi"])), c["tail"], c["distinct"],
                      c["store"], c["exists"])
            for c in obj["candidates"]
        ),
        chosen=tuple(obj["chosen"]),
        templates=tuple(
            QueryTemplate(ColumnSet(tuple(t["phi"])), t["weight"])
            for t in obj["templates"]
        ),
        coverages=tuple(obj["coverages"]),
        objective=obj["objective"],
        budget_rows=obj["budget_rows"], budget_used=obj["budget_used"],
        drift=obj["drift"], solver_kind=obj["solver_kind"],
    )
