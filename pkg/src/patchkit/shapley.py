"""Attribution engines: exact Shapley values, the recursive-partition estimator,
cohort averaging, and patch selection.

All engines use the same perturbation semantics: a coalition is the set of
regions left intact, and every region outside the coalition is zero-filled
before the predictor is queried. The designated scalar readout is the
predicted probability of class 1.

Coalition evaluations may run on a thread pool, but the reduction into the
attribution values always walks coalitions in ascending bitmask order, so
results are bit-stable regardless of worker count.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import (
    BudgetExceededError,
    ContractViolationError,
    EmptyCohortError,
    InvalidArgumentError,
)
from .phantom import DatasetManifest
from .volume import PatchGrid, Region, Volume, make_grid, octree_children, patch_means, perturb_zero

logger = logging.getLogger(__name__)

EXACT_SHAPLEY_MAX_REGIONS = 20
DEFAULT_CALL_BUDGET = 100_000

# Stand-in for an infinite t statistic when a patch has zero pooled variance
# but a nonzero mean difference.
T_STAT_SENTINEL = 1e30


@runtime_checkable
class Predictor(Protocol):
    """Black-box classifier over volumes: predict() returns a 2-class probability vector."""

    def predict(self, v: Volume) -> np.ndarray: ...


def _checked_readout(predictor: Predictor, v: Volume) -> float:
    """Query the predictor and return P(class 1), validating the vector shape.

    Finiteness and sum-to-one are enforced; the [0, 1] range is not, because
    the additive probes used as analytic oracles legitimately produce readouts
    outside it.
    """
    p = np.asarray(predictor.predict(v), dtype=np.float64).reshape(-1)
    if p.size != 2:
        raise ContractViolationError(f"predictor returned {p.size} entries, expected 2")
    if not np.all(np.isfinite(p)):
        raise ContractViolationError("predictor returned non-finite probabilities")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ContractViolationError(f"probabilities sum to {p.sum()}, expected 1 within 1e-6")
    return float(p[1])


@dataclass
class AttributionMap:
    """Per-leaf Shapley estimates over a patch grid, with recursion bookkeeping.

    ``refined_mask[i]`` is True when leaf i's value came from a computation at
    leaf size, False when it was inherited from a coarser node.
    """

    grid: PatchGrid
    values: np.ndarray
    evaluations: int
    refined_mask: np.ndarray
    tau: float
    rule: str
    levels: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        self.refined_mask = np.asarray(self.refined_mask, dtype=bool).reshape(-1)
        if self.values.size != len(self.grid) or self.refined_mask.size != len(self.grid):
            raise InvalidArgumentError("values/refined_mask length must equal grid leaf count")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("attribution values must be finite")

    def to_json(self) -> dict:
        return {
            "grid": self.grid.to_json(),
            "values": self.values.tolist(),
            "evaluations": self.evaluations,
            "refined_mask": [bool(b) for b in self.refined_mask],
            "tau": self.tau,
            "rule": self.rule,
            "levels": self.levels,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AttributionMap":
        return cls(
            grid=PatchGrid.from_json(obj["grid"]),
            values=np.array(obj["values"], dtype=np.float64),
            evaluations=int(obj["evaluations"]),
            refined_mask=np.array(obj["refined_mask"], dtype=bool),
            tau=float(obj["tau"]),
            rule=obj["rule"],
            levels=int(obj.get("levels", 0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "AttributionMap":
        return cls.from_json(json.loads(Path(path).read_text()))


def is_perfect_square(m: int) -> bool:
    return m >= 1 and math.isqrt(m) ** 2 == m


@dataclass
class SelectionResult:
    """Ordered patch choice: ``chosen`` holds leaf indices, best first."""

    chosen: list[int]
    method: str
    scores: np.ndarray

    def __post_init__(self):
        self.chosen = [int(i) for i in self.chosen]
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(set(self.chosen)) != len(self.chosen):
            raise InvalidArgumentError("selected indices must be unique")
        if not is_perfect_square(len(self.chosen)):
            raise InvalidArgumentError(
                f"selection size must be a perfect square, got {len(self.chosen)}"
            )
        if self.scores.size != len(self.chosen):
            raise InvalidArgumentError("scores length must match chosen length")

    @property
    def side(self) -> int:
        return math.isqrt(len(self.chosen))

    def to_json(self) -> dict:
        return {"chosen": self.chosen, "method": self.method, "scores": self.scores.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "SelectionResult":
        return cls(obj["chosen"], obj["method"], np.array(obj["scores"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "SelectionResult":
        return cls.from_json(json.loads(Path(path).read_text()))


def _coalition_readouts(
    predictor: Predictor,
    volume: Volume,
    members: list[Region],
    context: list[Region],
    threads: int,
) -> np.ndarray:
    """Readout for every coalition bitmask over ``members`` (2^n entries).

    Bit i set means member i stays intact; everything else in ``members`` plus
    the whole ``context`` is zero-filled.
    """
    n = len(members)
    serialize = not getattr(predictor, "supports_concurrency", True)

    def evaluate(mask: int) -> float:
        absent = [members[i] for i in range(n) if not (mask >> i) & 1]
        return _checked_readout(predictor, perturb_zero(volume, absent + context))

    masks = range(1 << n)
    if threads > 1 and not serialize:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(evaluate, masks, chunksize=max(1, (1 << n) // (4 * threads))))
    else:
        values = [evaluate(m) for m in masks]
    return np.array(values, dtype=np.float64)


def _shapley_from_readouts(readouts: np.ndarray, n: int) -> np.ndarray:
    """Exact Shapley values from a full coalition-readout table.

    Weights |C|!(n-|C|-1)!/n! are applied in ascending-bitmask order so the
    floating-point sum is reproducible.
    """
    weights = [
        math.factorial(c) * math.factorial(n - c - 1) / math.factorial(n)
        for c in range(n)
    ]
    values = np.zeros(n, dtype=np.float64)
    for mask in range(1 << n):
        size = mask.bit_count()
        for i in range(n):
            if not (mask >> i) & 1:
                values[i] += weights[size] * (readouts[mask | (1 << i)] - readouts[mask])
    return values


def exact_shapley(
    predictor: Predictor,
    volume: Volume,
    regions: list[Region],
    *,
    threads: int = 1,
    max_regions: int = EXACT_SHAPLEY_MAX_REGIONS,
) -> np.ndarray:
    """Brute-force Shapley values over ``regions`` with a zero-fill baseline.

    Costs exactly 2^n predictor calls; refused above ``max_regions``.
    """
    n = len(regions)
    if n == 0:
        raise InvalidArgumentError("at least one region is required")
    if n > max_regions:
        raise BudgetExceededError(
            f"exact Shapley over {n} regions needs 2^{n} predictor calls (cap {max_regions})"
        )
    for r in regions:
        if not volume.contains(r):
            raise InvalidArgumentError(f"region {r} outside volume dims {volume.dims}")
    readouts = _coalition_readouts(predictor, volume, list(regions), [], threads)
    return _shapley_from_readouts(readouts, n)


def sibling_shapley(
    predictor: Predictor,
    volume: Volume,
    siblings: list[Region],
    context=(),
    *,
    threads: int = 1,
) -> np.ndarray:
    """Exact Shapley among <= 8 sibling regions, with ``context`` always zero-filled."""
    n = len(siblings)
    if not 1 <= n <= 8:
        raise InvalidArgumentError(f"sibling games support 1..8 regions, got {n}")
    context = list(context)
    for r in list(siblings) + context:
        if not volume.contains(r):
            raise InvalidArgumentError(f"region {r} outside volume dims {volume.dims}")
    readouts = _coalition_readouts(predictor, volume, list(siblings), context, threads)
    return _shapley_from_readouts(readouts, n)


@dataclass
class _Node:
    region: Region
    level: int
    value: float
    children: list[int] | None = None


def _rule_fires(rule: str, value: float, tau: float) -> bool:
    if rule == "refine_below":
        return value < tau
    if rule == "refine_at_or_above":
        return value >= tau
    raise InvalidArgumentError(f"unknown refinement rule {rule!r}")


def recursive_attribution(
    predictor: Predictor,
    volume: Volume,
    leaf_edge: int,
    tau: float,
    rule: str = "refine_below",
    *,
    max_depth: int = 3,
    budget: int = DEFAULT_CALL_BUDGET,
    threads: int = 1,
) -> AttributionMap:
    """Hierarchical perturbation attribution down to a uniform leaf grid.

    The volume is split into octree halves (level 1) and a sibling Shapley game
    is played among them. A node is split further when the refinement rule
    fires on its value, it is coarser than ``leaf_edge``, and its level is
    below ``max_depth``; its children then play their own sibling game. Each
    final leaf inherits the value of the deepest computed node containing it.

    ``tau`` may be +/-inf (forcing one rule to always or never fire); NaN is
    rejected. Exceeding ``budget`` predictor calls aborts the whole map.
    """
    if math.isnan(tau):
        raise InvalidArgumentError("tau must not be NaN")
    if max_depth < 1:
        raise InvalidArgumentError("max_depth must be >= 1")
    _rule_fires(rule, 0.0, 0.0)  # validate rule name early
    grid = make_grid(volume.dims, leaf_edge)

    evaluations = 0
    nodes: list[_Node] = []

    def play_game(siblings: list[Region], level: int) -> list[int]:
        nonlocal evaluations
        cost = 1 << len(siblings)
        if evaluations + cost > budget:
            raise BudgetExceededError(
                f"attribution would need more than {budget} predictor calls"
            )
        values = sibling_shapley(predictor, volume, siblings, threads=threads)
        evaluations += cost
        ids = []
        for region, value in zip(siblings, values):
            nodes.append(_Node(region=region, level=level, value=float(value)))
            ids.append(len(nodes) - 1)
        return ids

    level1 = play_game(octree_children(volume.bounding_region()), level=1)
    queue = list(level1)
    while queue:
        idx = queue.pop(0)
        node = nodes[idx]
        refinable = (
            node.level < max_depth
            and max(node.region.size) > leaf_edge
            and any(s >= 2 for s in node.region.size)
        )
        if refinable and _rule_fires(rule, node.value, tau):
            child_ids = play_game(octree_children(node.region), level=node.level + 1)
            node.children = child_ids
            queue.extend(child_ids)

    values = np.empty(len(grid), dtype=np.float64)
    refined = np.zeros(len(grid), dtype=bool)
    for i, leaf in enumerate(grid.regions):
        holder = next((nodes[j] for j in level1 if nodes[j].region.contains(leaf)), None)
        if holder is None:
            # Leaf straddles a top-level split boundary (non-dyadic dims);
            # fall back to the best-overlapping top node.
            holder = max((nodes[j] for j in level1), key=lambda n: n.region.overlap_voxels(leaf))
        while holder.children:
            nxt = next(
                (nodes[c] for c in holder.children if nodes[c].region.contains(leaf)), None
            )
            if nxt is None:
                break
            holder = nxt
        values[i] = holder.value
        refined[i] = holder.region == leaf
    return AttributionMap(
        grid=grid,
        values=values,
        evaluations=evaluations,
        refined_mask=refined,
        tau=tau,
        rule=rule,
        levels=max(n.level for n in nodes),
    )


def cohort_average(maps: list[AttributionMap], include=None) -> AttributionMap:
    """Element-wise mean of the included maps; evaluation counts are summed.

    A leaf stays flagged as leaf-level refined only if every included map
    refined it.
    """
    if include is None:
        include = [True] * len(maps)
    picked = [m for m, keep in zip(maps, include) if keep]
    if not picked:
        raise EmptyCohortError("no attribution maps pass the cohort mask")
    first = picked[0]
    for m in picked[1:]:
        if m.grid.to_json() != first.grid.to_json():
            raise InvalidArgumentError("cohort maps must share one grid")
    values = np.mean([m.values for m in picked], axis=0)
    refined = np.logical_and.reduce([m.refined_mask for m in picked])
    return AttributionMap(
        grid=first.grid,
        values=values,
        evaluations=sum(m.evaluations for m in picked),
        refined_mask=refined,
        tau=first.tau,
        rule=first.rule,
        levels=max(m.levels for m in picked),
    )


def select_top(attribution: AttributionMap, m_patches: int, *, key: str = "magnitude") -> SelectionResult:
    """Pick the ``m_patches`` highest-ranked leaves, ties broken by ascending index.

    ``key="magnitude"`` ranks by |value| (the default: with a zero-fill
    baseline the most discriminative patches can carry strongly negative
    attributions, and magnitude mirrors the |t| ranking of the t-test
    selector). ``key="value"`` ranks by the raw signed value.
    """
    if not is_perfect_square(m_patches):
        raise InvalidArgumentError(f"M must be a perfect square, got {m_patches}")
    if m_patches > len(attribution.grid):
        raise InvalidArgumentError(
            f"M={m_patches} exceeds leaf count {len(attribution.grid)}"
        )
    if key == "magnitude":
        scores = np.abs(attribution.values)
    elif key == "value":
        scores = attribution.values
    else:
        raise InvalidArgumentError(f"unknown ranking key {key!r}")
    order = sorted(range(scores.size), key=lambda i: (-scores[i], i))
    chosen = order[:m_patches]
    return SelectionResult(chosen=chosen, method="shap", scores=scores[chosen])


def ttest_select(manifest: DatasetManifest, grid: PatchGrid, m_patches: int) -> SelectionResult:
    """Two-sample pooled-variance t-test selection on per-patch mean intensities.

    Patches are ranked by |t| descending (monotone with ascending p at fixed
    df). Zero pooled variance with a zero mean difference yields t = 0; with a
    nonzero difference the statistic saturates at a large finite sentinel.
    """
    if not is_perfect_square(m_patches):
        raise InvalidArgumentError(f"M must be a perfect square, got {m_patches}")
    if m_patches > len(grid):
        raise InvalidArgumentError(f"M={m_patches} exceeds patch count {len(grid)}")
    labels = manifest.labels()
    features = np.stack(
        [patch_means(manifest.load_volume(i), grid) for i in range(len(manifest.entries))]
    )
    x1 = features[labels == 1]
    x0 = features[labels == 0]
    if len(x1) < 2 or len(x0) < 2:
        raise InvalidArgumentError("need >= 2 samples per class for the t-test")
    n1, n0 = len(x1), len(x0)
    diff = x1.mean(axis=0) - x0.mean(axis=0)
    pooled = ((n1 - 1) * x1.var(axis=0, ddof=1) + (n0 - 1) * x0.var(axis=0, ddof=1)) / (
        n1 + n0 - 2
    )
    denom = np.sqrt(pooled * (1.0 / n1 + 1.0 / n0))
    t = np.zeros(len(grid), dtype=np.float64)
    ok = denom > 0
    t[ok] = diff[ok] / denom[ok]
    degenerate = ~ok & (diff != 0)
    if np.any(~ok):
        logger.warning(
            "%d patches with zero pooled variance (%d clamped to sentinel)",
            int((~ok).sum()),
            int(degenerate.sum()),
        )
    t[degenerate] = np.sign(diff[degenerate]) * T_STAT_SENTINEL
    mag = np.abs(t)
    order = sorted(range(mag.size), key=lambda i: (-mag[i], i))
    chosen = order[:m_patches]
    return SelectionResult(chosen=chosen, method="ttest", scores=mag[chosen])
