"""Greedy layer-wise bit-width allocation.

Every entry (a weight or activation tensor) starts at 8 bits. Each step picks
the entry with the largest selection score

    alpha = SQNR_{b-1}(X) * log10(numel(X))

i.e. the entry that loses the least SQNR and saves the most storage by
dropping one more bit, decrements it, and rescores it. Weights are reduced
until their mean bit-width reaches the weight target, then activations.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import AllocationError

START_BITS = 8
FLOOR_BITS = 2
METRIC_MODES = ("sqnr-times-lognumel", "sqnr-only")

SqnrFn = Callable[["LayerEntry", int], float]


@dataclass
class LayerEntry:
    layer_id: str
    kind: str  # "weight" or "activation"
    numel: int
    bits: int = START_BITS
    floor: int = FLOOR_BITS

    def __post_init__(self):
        if self.numel < 1:
            raise ValueError(f"{self.layer_id}: numel must be positive")
        if self.kind not in ("weight", "activation"):
            raise ValueError(f"{self.layer_id}: unknown kind {self.kind!r}")

    @property
    def at_floor(self) -> bool:
        return self.bits <= self.floor


@dataclass
class TraceStep:
    step: int
    layer_id: str
    new_bits: int
    score: float


@dataclass
class AllocationState:
    entries: list[LayerEntry]
    target_w: float
    target_a: float
    metric_mode: str = "sqnr-times-lognumel"
    scores: dict[str, float] = field(default_factory=dict)
    trace: list[TraceStep] = field(default_factory=list)

    def __post_init__(self):
        if self.metric_mode not in METRIC_MODES:
            raise ValueError(f"unknown metric mode {self.metric_mode!r}")

    def of_kind(self, kind: str) -> list[LayerEntry]:
        return [e for e in self.entries if e.kind == kind]

    def mean_bits(self, kind: str, weighted: bool = False) -> float:
        pool = self.of_kind(kind)
        if not pool:
            return 0.0
        if weighted:
            return sum(e.bits * e.numel for e in pool) / sum(e.numel for e in pool)
        return sum(e.bits for e in pool) / len(pool)

    def bits(self) -> dict[str, int]:
        return {e.layer_id: e.bits for e in self.entries}


def selection_score(sqnr_lower: float, numel: int, mode: str = "sqnr-times-lognumel") -> float:
    """Priority of dropping one bit, given the SQNR (dB) at the lower bit-width."""
    if mode == "sqnr-only":
        return sqnr_lower
    if mode != "sqnr-times-lognumel":
        raise ValueError(f"unknown metric mode {mode!r}")
    weight = math.log10(numel)
    if weight == 0.0:
        return 0.0
    return sqnr_lower * weight


def score_entry(entry: LayerEntry, sqnr_fn: SqnrFn, mode: str) -> float:
    if entry.at_floor:
        return -math.inf
    return selection_score(sqnr_fn(entry, entry.bits - 1), entry.numel, mode)


def _argmax(entries: Sequence[LayerEntry], scores: dict[str, float], order: dict[str, int]) -> LayerEntry:
    # highest score first, then the earlier layer
    return max(entries, key=lambda e: (scores[e.layer_id], -order[e.layer_id]))


def greedy_allocate(
    state: AllocationState,
    sqnr_fn: SqnrFn,
    kinds: Sequence[str] = ("weight", "activation"),
    weighted_mean: bool = False,
    refresh: Callable[[AllocationState], bool] | None = None,
) -> AllocationState:
    """Run the greedy reduction and return a new state with bits, scores and trace.

    ``sqnr_fn(entry, bits)`` gives the SQNR of the entry's tensor quantized to
    ``bits``. ``refresh`` (optional) is called after every decrement; if it
    returns True, every remaining score is recomputed instead of only the
    decremented entry's.
    """
    for e in state.entries:
        if not e.floor <= e.bits <= START_BITS:
            raise AllocationError(f"{e.layer_id}: bits {e.bits} outside [{e.floor}, {START_BITS}]")
    state = copy.deepcopy(state)
    order = {e.layer_id: i for i, e in enumerate(state.entries)}
    state.scores = {e.layer_id: score_entry(e, sqnr_fn, state.metric_mode) for e in state.entries}
    targets = {"weight": state.target_w, "activation": state.target_a}
    for kind in kinds:
        pool = state.of_kind(kind)
        if not pool:
            continue
        while state.mean_bits(kind, weighted_mean) > targets[kind]:
            eligible = [e for e in pool if not e.at_floor]
            if not eligible:
                raise AllocationError(
                    f"{kind} target {targets[kind]} unreachable: every entry is at the {pool[0].floor}-bit floor"
                )
            chosen = _argmax(eligible, state.scores, order)
            chosen.bits -= 1
            state.trace.append(TraceStep(len(state.trace), chosen.layer_id, chosen.bits, state.scores[chosen.layer_id]))
            if refresh is not None and refresh(state):
                state.scores = {e.layer_id: score_entry(e, sqnr_fn, state.metric_mode) for e in state.entries}
            else:
                state.scores[chosen.layer_id] = score_entry(chosen, sqnr_fn, state.metric_mode)
    return state


def single_precision(state: AllocationState, bits_w: int, bits_a: int) -> AllocationState:
    state = copy.deepcopy(state)
    for e in state.entries:
        e.bits = bits_w if e.kind == "weight" else bits_a
    return state


# --------------------------------------------------------------------------
# Plan (de)serialization
# --------------------------------------------------------------------------


def _num(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def plan_to_dict(state: AllocationState, extra: dict | None = None) -> dict:
    plan = {
        "format_version": 1,
        "metric_mode": state.metric_mode,
        "targets": {"weights": state.target_w, "activations": state.target_a},
        "layers": [{"layer_id": e.layer_id, "kind": e.kind, "bits": e.bits} for e in state.entries],
        "trace": [
            {"step": t.step, "layer_id": t.layer_id, "new_bits": t.new_bits, "score": _num(t.score)}
            for t in state.trace
        ],
    }
    if extra:
        plan.update(extra)
    return plan


def plan_bits(plan: dict) -> dict[str, int]:
    return {layer["layer_id"]: int(layer["bits"]) for layer in plan["layers"]}


def trace_from_plan(plan: dict) -> list[TraceStep]:
    return [TraceStep(t["step"], t["layer_id"], t["new_bits"], float(t["score"])) for t in plan["trace"]]
