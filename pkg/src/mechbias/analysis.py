"""Group-conditioned activations, outcome tables, label parsing and intervention sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attribution import NeuronGroup
from .corpus import DISPLAY_NAMES, PromptTemplate, render_prompt
from .engine import (
    LAST_INPUT_TOKEN,
    MEAN_ALL_POSITIONS,
    CapturePlan,
    InterventionPolicy,
    NeuronRef,
    forward,
    greedy_generate,
    pool,
)
from .errors import EmptyGroup, InvalidSpec, NoBaselineErrors
from .model_core.bundle import ModelBundle
from .model_core.tokenizer import tokenize

UNKNOWN = "Unknown"
EMPTY_CELL = "---"
KINDS = ("direct", "indirect")
DEFAULT_FACTORS = (5.0, 10.0, 20.0)

# Extra spellings accepted for a label besides its id and display name.
ALIASES = {
    "BlackAA": ("Black/AA", "Black/African American", "African American", "Black"),
    "MiddleEastern": ("Middle East",),
    "NativeAmerican": ("Native Am.",),
}


def label_aliases(label: str) -> tuple[str, ...]:
    names = [label, DISPLAY_NAMES.get(label, label), *ALIASES.get(label, ())]
    return tuple(dict.fromkeys(names))


def _starts_with_word(text: str, prefix: str) -> bool:
    if not text.casefold().startswith(prefix.casefold()):
        return False
    rest = text[len(prefix):]
    return not rest or not (rest[0].isalnum() or rest[0] == "_")


def parse_label(generated: str, options: Sequence[str]) -> str:
    """Map a generation to one of ``options`` or ``"Unknown"``.

    A leading ``[...]`` segment must equal (case-insensitively) a spelling of
    exactly one option. Without brackets the text must begin with such a
    spelling followed by a word boundary.
    """
    text = generated.strip()
    if text.startswith("["):
        close = text.find("]")
        if close < 0:
            return UNKNOWN
        inner = text[1:close].strip().casefold()
        hits = {opt for opt in options if any(inner == a.casefold() for a in label_aliases(opt))}
    else:
        hits = {opt for opt in options if any(_starts_with_word(text, a) for a in label_aliases(opt))}
    return hits.pop() if len(hits) == 1 else UNKNOWN


def group_label(group: NeuronGroup) -> str:
    return group.group if group.mention == "n/a" else f"{group.group}/{group.mention}"


def encode_text(model: ModelBundle, text: str) -> list[int]:
    """Token ids for an input: BOS followed by the tokenised text."""
    ids = list(tokenize(text, model.vocab).ids)
    bos = model.vocab.bos_id
    return ([bos] if bos is not None else []) + ids


def encode_prompt(model: ModelBundle, template: PromptTemplate, text: str) -> list[int]:
    return encode_text(model, render_prompt(template, text))


def pooled_residuals(model: ModelBundle, inputs: Iterable[Sequence[int]], layer: int, pooling: str) -> np.ndarray:
    plan = CapturePlan(residual_layers={layer}, pooling=pooling)
    rows = []
    for ids in inputs:
        trace = forward(model, ids, plan)
        rows.append(pool(trace.residual[layer], trace.valid, pooling))
    return np.array(rows)


def group_activations(model: ModelBundle, ids: Sequence[int], groups: Sequence[NeuronGroup], pooling: str,
                      policy: InterventionPolicy | None = None) -> dict[str, float | None]:
    """Mean pooled activation over each group's members (None for an empty group)."""
    refs = {r for g in groups for r in g.refs}
    trace = forward(model, ids, CapturePlan(neurons=refs, pooling=pooling), policy)
    out: dict[str, float | None] = {}
    for g in groups:
        vals = [float(pool(trace.activation[r], trace.valid, pooling)) for r in g.refs]
        out[group_label(g)] = math.fsum(vals) / len(vals) if vals else None
    return out


@dataclass(frozen=True)
class ActivationMatrix:
    rows: tuple[str, ...]  # neuron group labels
    cols: tuple[str, ...]  # input groups
    values: np.ndarray  # NaN where the neuron group has no members
    counts: tuple[int, ...]  # records per column
    members: tuple[int, ...]  # neurons per row

    def cell(self, row: str, col: str) -> float:
        return float(self.values[self.rows.index(row), self.cols.index(col)])

    def to_csv(self) -> str:
        lines = ["neuron_group," + ",".join(self.cols)]
        for i, row in enumerate(self.rows):
            cells = [EMPTY_CELL if np.isnan(v) else repr(float(v)) for v in self.values[i]]
            lines.append(row + "," + ",".join(cells))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "rows": list(self.rows),
            "cols": list(self.cols),
            "values": [[None if np.isnan(v) else float(v) for v in row] for row in self.values],
            "records_per_col": list(self.counts),
            "neurons_per_row": list(self.members),
        }


def activation_matrix(
    model: ModelBundle,
    inputs_by_group: Mapping[str, Sequence[Sequence[int]]],
    groups: Sequence[NeuronGroup],
    plan: CapturePlan,
) -> ActivationMatrix:
    """Cell (g, h): mean over group-h inputs of the mean activation of g's members.

    Sums use ``math.fsum`` so the result does not depend on record order.
    """
    cols = tuple(inputs_by_group)
    for col in cols:
        if not inputs_by_group[col]:
            raise EmptyGroup(f"input group {col} has no records", subject=col)
    rows = tuple(group_label(g) for g in groups)
    values = np.full((len(rows), len(cols)), np.nan)
    for j, col in enumerate(cols):
        per_record = [group_activations(model, ids, groups, plan.pooling) for ids in inputs_by_group[col]]
        for i, row in enumerate(rows):
            if groups[i].members:
                values[i, j] = math.fsum(r[row] for r in per_record) / len(per_record)
    return ActivationMatrix(
        rows=rows,
        cols=cols,
        values=values,
        counts=tuple(len(inputs_by_group[c]) for c in cols),
        members=tuple(len(g.members) for g in groups),
    )


@dataclass(frozen=True)
class OutcomeRecord:
    record_id: int
    text: str
    actual: str
    predicted: str
    activations: dict[str, float | None]
    generation: str
    policy: dict | None = None

    def to_dict(self) -> dict:
        return {
            "record": self.record_id,
            "actual": self.actual,
            "predicted": self.predicted,
            "generation": self.generation,
            "activations": self.activations,
            "policy": self.policy,
        }


def classify(
    model: ModelBundle,
    text: str,
    template: PromptTemplate,
    options: Sequence[str],
    *,
    max_new: int = 4,
    policy: InterventionPolicy | None = None,
) -> tuple[str, str]:
    """Greedy-generate an answer to the rendered prompt; return ``(label, raw text)``."""
    gen = greedy_generate(model, encode_prompt(model, template, text), max_new, policy)
    return parse_label(gen.source_text, options), gen.source_text


def classify_records(
    model: ModelBundle,
    records: Sequence,
    template: PromptTemplate,
    options: Sequence[str],
    groups: Sequence[NeuronGroup] = (),
    *,
    max_new: int = 4,
    policy: InterventionPolicy | None = None,
) -> list[OutcomeRecord]:
    """Baseline (or policy-applied) predictions plus last-input-token group activations."""
    out = []
    for rec in records:
        label, raw = classify(model, rec.text, template, options, max_new=max_new, policy=policy)
        acts = group_activations(model, encode_prompt(model, template, rec.text), groups, LAST_INPUT_TOKEN, policy)
        out.append(
            OutcomeRecord(
                record_id=rec.row,
                text=rec.text,
                actual=rec.group,
                predicted=label,
                activations=acts,
                generation=raw,
                policy=_policy_dict(policy),
            )
        )
    return out


def _policy_dict(policy: InterventionPolicy | None) -> dict | None:
    if policy is None:
        return None
    return {"factor": policy.factor, "targets": [r.label for r in sorted(policy.targets)], "enabled": policy.enabled}


@dataclass(frozen=True)
class ErrorPattern:
    class_order: tuple[str, ...]
    counts: dict[tuple[str, str], int]  # (actual, predicted), actual != predicted, predicted != Unknown
    total_errors: int
    dominant: tuple[str, str] | None
    dominant_pct: float | None
    unknown: int = 0
    correct: int = 0

    def to_dict(self) -> dict:
        return {
            "class_order": list(self.class_order),
            "counts": {f"{a}->{p}": n for (a, p), n in self.counts.items()},
            "total_errors": self.total_errors,
            "dominant": f"{self.dominant[0]}->{self.dominant[1]}" if self.dominant else None,
            "dominant_pct": self.dominant_pct,
            "unknown": self.unknown,
            "correct": self.correct,
        }


def error_pattern_from_counts(
    counts: Mapping[tuple[str, str], int], class_order: Sequence[str], *, unknown: int = 0, correct: int = 0
) -> ErrorPattern:
    """Dominant-error arithmetic; ties between pairs go to the earlier (actual, predicted) in class order."""
    order = {c: i for i, c in enumerate(class_order)}
    pairs = {}
    for (a, p), n in counts.items():
        if a == p or p == UNKNOWN:
            raise InvalidSpec(f"{a}->{p} is not a label-to-label error", subject=f"{a}->{p}")
        if n < 0:
            raise InvalidSpec("counts must be non-negative", subject=f"{a}->{p}")
        pairs[(a, p)] = int(n)
    ordered = dict(sorted(pairs.items(), key=lambda kv: (order.get(kv[0][0], len(order)), order.get(kv[0][1], len(order)))))
    total = sum(ordered.values())
    if total == 0:
        return ErrorPattern(tuple(class_order), ordered, 0, None, None, unknown, correct)
    best = max(ordered.values())
    dominant = next(pair for pair, n in ordered.items() if n == best)
    return ErrorPattern(tuple(class_order), ordered, total, dominant, 100.0 * best / total, unknown, correct)


def error_pattern(outcomes: Iterable[OutcomeRecord], class_order: Sequence[str]) -> ErrorPattern:
    counts: dict[tuple[str, str], int] = {}
    unknown = correct = 0
    for o in outcomes:
        if o.predicted == UNKNOWN:
            unknown += 1
        elif o.predicted == o.actual:
            correct += 1
        else:
            counts[(o.actual, o.predicted)] = counts.get((o.actual, o.predicted), 0) + 1
    return error_pattern_from_counts(counts, class_order, unknown=unknown, correct=correct)


def format_activation(value: float | None) -> str:
    return EMPTY_CELL if value is None else f"{value:+.2f}"


@dataclass(frozen=True)
class OutcomeTable:
    groups: tuple[str, ...]
    cells: tuple[tuple[str, str], ...]  # (actual, predicted)
    n: tuple[int, ...]
    means: tuple[tuple[float | None, ...], ...]  # [cell][group]

    def formatted(self) -> list[dict]:
        rows = []
        for (a, p), n, means in zip(self.cells, self.n, self.means):
            row = {"actual": a, "predicted": p, "n": n}
            row.update({g: format_activation(m) for g, m in zip(self.groups, means)})
            rows.append(row)
        return rows

    def to_dict(self) -> dict:
        return {"groups": list(self.groups), "rows": self.formatted()}


def outcome_buckets(
    outcomes: Sequence[OutcomeRecord], class_order: Sequence[str], groups: Sequence[str] | None = None
) -> OutcomeTable:
    """Mean activation per neuron group for every (actual, predicted) cell, Unknown included."""
    if groups is None:
        groups = tuple(dict.fromkeys(g for o in outcomes for g in o.activations))
    cells = [(a, p) for a in class_order for p in (*class_order, UNKNOWN)]
    n, means = [], []
    for a, p in cells:
        bucket = [o for o in outcomes if o.actual == a and o.predicted == p]
        n.append(len(bucket))
        row = []
        for g in groups:
            vals = [o.activations.get(g) for o in bucket]
            vals = [v for v in vals if v is not None]
            row.append(math.fsum(vals) / len(vals) if vals else None)
        means.append(tuple(row))
    return OutcomeTable(tuple(groups), tuple(cells), tuple(n), tuple(means))


@dataclass(frozen=True)
class SweepCell:
    kind: str
    factor: float
    n: int
    correct: int
    original_bias: int
    other: int
    unknown: int

    def rate(self, name: str) -> float:
        return getattr(self, name) / self.n

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "factor": self.factor, "n": self.n}
        for name in ("correct", "original_bias", "other", "unknown"):
            out[name] = getattr(self, name)
            out[f"{name}_rate"] = self.rate(name)
        return out


@dataclass(frozen=True)
class SweepResult:
    cells: tuple[SweepCell, ...]
    outcomes: tuple[OutcomeRecord, ...] = field(default=(), compare=False)

    def cell(self, kind: str, factor: float) -> SweepCell:
        for c in self.cells:
            if c.kind == kind and c.factor == factor:
                return c
        raise KeyError((kind, factor))

    def to_dict(self) -> dict:
        return {"cells": [c.to_dict() for c in self.cells]}


def outcome_category(actual: str, baseline: str, predicted: str) -> str:
    if predicted == UNKNOWN:
        return "unknown"
    if predicted == actual:
        return "correct"
    if predicted == baseline:
        return "original_bias"
    return "other"


def targeting_policy(groups: Sequence[NeuronGroup], label: str, factor: float) -> InterventionPolicy:
    """Suppress the neurons of every group whose label is ``label``."""
    refs: set[NeuronRef] = {r for g in groups if g.group == label for r in g.refs}
    return InterventionPolicy(frozenset(refs), factor)


def intervention_sweep(
    model: ModelBundle,
    baseline: Sequence[OutcomeRecord],
    groups_by_kind: Mapping[str, Sequence[NeuronGroup]],
    factors: Sequence[float] = DEFAULT_FACTORS,
    *,
    template: PromptTemplate,
    options: Sequence[str],
    max_new: int = 4,
) -> SweepResult:
    """Re-generate each baseline error with the biased label's neurons suppressed.

    ``baseline`` may hold every baseline outcome; only label-to-label errors
    (prediction wrong and not Unknown) are swept. For a record predicted as
    ``p`` at baseline, the policy targets the members of the ``kind`` neuron
    groups labelled ``p``.
    """
    errors = [o for o in baseline if o.predicted not in (UNKNOWN, o.actual)]
    if not errors:
        raise NoBaselineErrors("no misclassified records at baseline", subject="baseline")
    cells, outcomes = [], []
    for kind, groups in groups_by_kind.items():
        for k in factors:
            tally = {"correct": 0, "original_bias": 0, "other": 0, "unknown": 0}
            for o in errors:
                policy = targeting_policy(groups, o.predicted, k)
                label, raw = classify(model, o.text, template, options, max_new=max_new, policy=policy)
                tally[outcome_category(o.actual, o.predicted, label)] += 1
                outcomes.append(
                    OutcomeRecord(o.record_id, o.text, o.actual, label, {}, raw, {"kind": kind, **_policy_dict(policy)})
                )
            cells.append(SweepCell(kind, float(k), len(errors), **tally))
    return SweepResult(tuple(cells), tuple(outcomes))


__all__ = [
    "LAST_INPUT_TOKEN",
    "MEAN_ALL_POSITIONS",
    "UNKNOWN",
    "ActivationMatrix",
    "ErrorPattern",
    "OutcomeRecord",
    "OutcomeTable",
    "SweepCell",
    "SweepResult",
    "activation_matrix",
    "classify",
    "classify_records",
    "error_pattern",
    "error_pattern_from_counts",
    "intervention_sweep",
    "outcome_buckets",
    "parse_label",
]
