"""Run configuration and the end-to-end stages behind the CLI.

A run config is a JSON object::

    {
      "mode": "creact",                  # toxigen | creact | creact-direct | creact-indirect
      "model": "creact_model.json",      # paths are relative to the config file
      "dataset": "creact.jsonl",
      "output_dir": "out/creact",
      "keywords": null, "group_map": null,   # null = packaged defaults
      "probe_inputs": "raw",             # raw text or the clinical-note prompt
      "pooling": null,                   # activation pooling; null = per-mode default
      "probe": {"lr": 0.1, "epochs": 500, "l2_lambda": 0.001, "seed": 0},
      "split": {"test_fraction": 0.2, "seed": 42},
      "attribution": {"layer_window": 4, "top_n": 20, "k": 20, "min_matches": 2},
      "intervention": {"factors": [5, 10, 20], "max_new": 4}
    }

``creact`` runs both the direct and the indirect probe; the two single-kind
modes run one of them.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .analysis import (
    ActivationMatrix,
    OutcomeRecord,
    activation_matrix,
    classify_records,
    encode_prompt,
    encode_text,
    error_pattern,
    intervention_sweep,
    outcome_buckets,
    pooled_residuals,
)
from .attribution import (
    NeuronCandidate,
    NeuronGroup,
    TokenProjection,
    filter_by_alignment,
    load_keywords,
    logit_lens,
    score_neurons,
    select_candidates,
)
from .corpus import CREACT, CREACT_TEMPLATE, TOXIGEN, Record, load_creact, load_group_map, load_toxigen, select, split
from .engine import LAST_INPUT_TOKEN, MEAN_ALL_POSITIONS, POOLINGS, CapturePlan, NeuronRef
from .errors import ConfigError, MechBiasError, SchemaError
from .model_core.bundle import ModelBundle, load_model
from .model_core.container import canonical_json
from .probe import ProbeHyper, ProbeMetrics, ProbeModel, evaluate_probe, load_probe, probe_direction, save_probe, train_probe

log = logging.getLogger(__name__)

MODES = ("toxigen", "creact", "creact-direct", "creact-indirect")
PROBE_LAYER = -1  # final layer


@dataclass(frozen=True)
class SplitSettings:
    test_fraction: float = 0.2
    seed: int = 42


@dataclass(frozen=True)
class AttributionSettings:
    layer_window: int = 4
    top_n: int = 20
    k: int = 20
    min_matches: int = 2


@dataclass(frozen=True)
class InterventionSettings:
    factors: tuple[float, ...] = (5.0, 10.0, 20.0)
    max_new: int = 4


@dataclass(frozen=True)
class RunConfig:
    mode: str
    model: str
    dataset: str
    output_dir: str = "out"
    keywords: str | None = None
    group_map: str | None = None
    probe_inputs: str = "raw"
    pooling: str | None = None
    probe: ProbeHyper = field(default_factory=ProbeHyper)
    split: SplitSettings = field(default_factory=SplitSettings)
    attribution: AttributionSettings = field(default_factory=AttributionSettings)
    intervention: InterventionSettings = field(default_factory=InterventionSettings)
    base_dir: Path = field(default=Path("."), compare=False)

    # ---- derived
    @property
    def dataset_kind(self) -> str:
        return TOXIGEN if self.mode == "toxigen" else CREACT

    @property
    def kinds(self) -> tuple[str, ...]:
        """Probe kinds run by this config (``n/a`` for ToxiGen)."""
        return {"toxigen": ("n/a",), "creact": ("direct", "indirect")}.get(self.mode, (self.mode.split("-")[-1],))

    @property
    def activation_pooling(self) -> str:
        if self.pooling:
            return self.pooling
        return MEAN_ALL_POSITIONS if self.mode == "toxigen" else LAST_INPUT_TOKEN

    def path(self, name: str) -> Path:
        value = getattr(self, name)
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out(self) -> Path:
        return self.path("output_dir")

    # ---- (de)serialisation
    def to_dict(self, *, include_output: bool = True) -> dict:
        """Plain-JSON form; ``include_output=False`` drops where results are written."""
        out = {}
        for f in fields(self):
            if f.name == "base_dir" or (f.name == "output_dir" and not include_output):
                continue
            value = getattr(self, f.name)
            if hasattr(value, "__dataclass_fields__"):
                value = asdict(value)
                value = {k: list(v) if isinstance(v, tuple) else v for k, v in value.items()}
            out[f.name] = value
        return out

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict(include_output=False)).encode("utf-8")).hexdigest()


_SECTIONS = {"probe": ProbeHyper, "split": SplitSettings, "attribution": AttributionSettings,
             "intervention": InterventionSettings}


def _coerce(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object", subject=where)
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown field(s) in {where}: {sorted(unknown)}", subject=where)
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        default = getattr(defaults, name)
        try:
            if isinstance(default, tuple):
                kwargs[name] = tuple(float(v) for v in value)
            elif isinstance(default, bool):
                kwargs[name] = bool(value)
            elif isinstance(default, int):
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError(value)
                kwargs[name] = int(value)
            elif isinstance(default, float):
                kwargs[name] = float(value)
            else:
                kwargs[name] = value
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.{name}: bad value {value!r}", subject=f"{where}.{name}") from exc
    try:
        return cls(**kwargs)
    except MechBiasError as exc:
        raise ConfigError(f"{where}: {exc}", subject=where) from exc


def config_from_dict(data: dict, base_dir: str | Path = ".") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object", subject="config")
    known = {f.name for f in fields(RunConfig)} - {"base_dir"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config field(s): {sorted(unknown)}", subject="config")
    for required in ("mode", "model", "dataset"):
        if not data.get(required):
            raise ConfigError(f"config needs {required!r}", subject=required)
    kwargs = {k: v for k, v in data.items() if k not in _SECTIONS}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _coerce(cls, data.get(name) or {}, name)
    cfg = RunConfig(**kwargs, base_dir=Path(base_dir))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig, *, check_paths: bool = True) -> None:
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {cfg.mode!r}", subject="mode")
    if cfg.probe_inputs not in ("raw", "prompt"):
        raise ConfigError("probe_inputs must be 'raw' or 'prompt'", subject="probe_inputs")
    if cfg.pooling is not None and cfg.pooling not in POOLINGS:
        raise ConfigError(f"pooling must be one of {POOLINGS} or null", subject="pooling")
    if not 0 < cfg.split.test_fraction < 1:
        raise ConfigError("split.test_fraction must be in (0, 1)", subject="split.test_fraction")
    a = cfg.attribution
    if a.layer_window < 1 or a.top_n < 1 or a.k < 1 or a.min_matches < 0:
        raise ConfigError("attribution settings must be positive (min_matches >= 0)", subject="attribution")
    iv = cfg.intervention
    if not iv.factors or any(not (np.isfinite(k) and k > 0) for k in iv.factors):
        raise ConfigError("intervention.factors must be non-empty and positive", subject="intervention.factors")
    if iv.max_new < 1:
        raise ConfigError("intervention.max_new must be >= 1", subject="intervention.max_new")
    if check_paths:
        for name in ("model", "dataset", "keywords", "group_map"):
            if getattr(cfg, name) is not None and not cfg.path(name).exists():
                raise ConfigError(f"{name} path {cfg.path(name)} does not exist", subject=name)


def set_override(data: dict, assignment: str) -> None:
    """Apply ``key=value`` (dotted keys reach into sections; values parse as JSON when possible)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value", subject=assignment)
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    target = data
    parts = key.strip().split(".")
    for part in parts[:-1]:
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ConfigError(f"cannot set {key}: {part} is not a section", subject=key)
    target[parts[-1]] = value


def load_config(path: str | Path, overrides: list[str] = (), extra: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", subject=str(path)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}", subject=str(path)) from exc
    for key, value in (extra or {}).items():
        if value is not None:
            data[key] = value
    for assignment in overrides:
        set_override(data, assignment)
    return config_from_dict(data, path.parent)


# ------------------------------------------------------------------ stages


@dataclass
class RunContext:
    cfg: RunConfig
    model: ModelBundle
    records: list[Record]  # kept records, split assigned
    keywords: dict

    def kind_records(self, kind: str) -> list[Record]:
        if kind == "n/a":
            return select(self.records, "toxigen")
        return select(self.records, f"creact-{kind}")

    def encode(self, text: str, prompt: bool) -> list[int]:
        return encode_prompt(self.model, CREACT_TEMPLATE, text) if prompt else encode_text(self.model, text)


def open_run(cfg: RunConfig) -> RunContext:
    model = load_model(cfg.path("model"))
    group_map = load_group_map(cfg.path("group_map")) if cfg.group_map else None
    loader = load_toxigen if cfg.dataset_kind == TOXIGEN else load_creact
    records = [r for r in loader(cfg.path("dataset"), group_map) if not r.excluded]
    # direct and indirect notes feed separate probes, so each is stratified on its own
    strata = ("toxigen",) if cfg.dataset_kind == TOXIGEN else ("creact-direct", "creact-indirect")
    records = [r for mode in strata for r in split(select(records, mode), cfg.split.test_fraction, cfg.split.seed)]
    keywords = load_keywords(cfg.path("keywords") if cfg.keywords else None)
    if cfg.dataset_kind not in keywords:
        raise SchemaError(f"keywords file has no {cfg.dataset_kind!r} section", subject="keywords")
    return RunContext(cfg, model, records, keywords[cfg.dataset_kind])


def kind_tag(kind: str) -> str:
    return "toxigen" if kind == "n/a" else kind


def probe_features(ctx: RunContext, records: list[Record]) -> np.ndarray:
    prompt = ctx.cfg.probe_inputs == "prompt"
    layer = ctx.model.config.n_layers - 1
    return pooled_residuals(ctx.model, [ctx.encode(r.text, prompt) for r in records], layer, MEAN_ALL_POSITIONS)


def stage_probe(ctx: RunContext, kind: str) -> tuple[ProbeModel, ProbeMetrics]:
    records = ctx.kind_records(kind)
    X = probe_features(ctx, records)
    train = [(x, r.group) for x, r in zip(X, records) if r.split == "train"]
    test = [(x, r.group) for x, r in zip(X, records) if r.split == "test"]
    labels = tuple(sorted({r.group for r in records}))
    trained_on = {"pooling": MEAN_ALL_POSITIONS, "layer": ctx.model.config.n_layers - 1, "kind": kind,
                  "inputs": ctx.cfg.probe_inputs}
    probe = train_probe(train, ctx.cfg.probe, class_order=labels, trained_on=trained_on)
    return probe, evaluate_probe(probe, test)


def stage_lens(ctx: RunContext, probe: ProbeModel) -> dict[str, TokenProjection]:
    return {c: logit_lens(ctx.model, probe_direction(probe, c), ctx.cfg.attribution.k) for c in probe.class_order}


def stage_attribute(ctx: RunContext, probe: ProbeModel, kind: str) -> list[NeuronGroup]:
    a = ctx.cfg.attribution
    groups = []
    for c in probe.class_order:
        if c not in ctx.keywords:
            raise SchemaError(f"no keywords for group {c!r}", subject="keywords")
        ranked = score_neurons(ctx.model, probe_direction(probe, c), a.layer_window)
        cands = select_candidates(ranked, a.top_n)
        groups.append(filter_by_alignment(cands, ctx.keywords[c], ctx.model, a.k, a.min_matches, group=c, mention=kind))
    return groups


def stage_activations(ctx: RunContext, groups: list[NeuronGroup], kind: str) -> ActivationMatrix:
    records = ctx.kind_records(kind)
    prompt = ctx.cfg.mode != "toxigen"
    by_group: dict[str, list[list[int]]] = {}
    for r in sorted(records, key=lambda r: r.group):
        by_group.setdefault(r.group, []).append(ctx.encode(r.text, prompt))
    return activation_matrix(ctx.model, by_group, groups, CapturePlan(pooling=ctx.cfg.activation_pooling))


def intervention_records(ctx: RunContext) -> list[Record]:
    if ctx.cfg.mode == "toxigen":
        raise ConfigError("intervention needs a C-REACT mode (a prompt to answer)", subject="mode")
    kind = "indirect" if ctx.cfg.mode == "creact" else ctx.cfg.kinds[0]
    return ctx.kind_records(kind)


def stage_baseline(ctx: RunContext, groups: list[NeuronGroup]) -> list[OutcomeRecord]:
    labels = tuple(sorted({r.group for r in ctx.records}))
    return classify_records(ctx.model, intervention_records(ctx), CREACT_TEMPLATE, labels, groups,
                            max_new=ctx.cfg.intervention.max_new)


def stage_sweep(ctx: RunContext, baseline: list[OutcomeRecord], groups_by_kind: dict[str, list[NeuronGroup]]):
    labels = tuple(sorted({r.group for r in ctx.records}))
    return intervention_sweep(ctx.model, baseline, groups_by_kind, ctx.cfg.intervention.factors,
                              template=CREACT_TEMPLATE, options=labels, max_new=ctx.cfg.intervention.max_new)


# ------------------------------------------------------------------ bundle files


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def write_json(path: Path, obj: Any) -> Path:
    return write_text(path, canonical_json(obj))


def write_jsonl(path: Path, rows: list[dict]) -> Path:
    return write_text(path, "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in rows))


def groups_to_json(groups: list[NeuronGroup]) -> dict:
    return {"groups": [g.to_dict() for g in groups]}


def groups_from_json(data: dict) -> list[NeuronGroup]:
    groups = []
    for g in data["groups"]:
        evaluated = []
        for c in g["candidates"]:
            proj = TokenProjection(tuple((t["id"], t["token"], t["logit"]) for t in c["top_tokens"]))
            evaluated.append(NeuronCandidate(NeuronRef(c["layer"], c["index"]), c["score"], proj, c["retained"],
                                             tuple(c["matched_keywords"])))
        members = tuple(c for c in evaluated if c.retained)
        groups.append(NeuronGroup(g["group"], g["mention"], members, tuple(evaluated)))
    return groups


def read_json(path: Path, stage: str) -> Any:
    if not path.exists():
        raise SchemaError(f"{path.name} not found in {path.parent}; run `mechbias {stage}` first", subject=str(path))
    return json.loads(path.read_text(encoding="utf-8"))


def load_groups(cfg: RunConfig, kind: str) -> list[NeuronGroup]:
    return groups_from_json(read_json(cfg.out / f"candidates_{kind_tag(kind)}.json", "attribute"))


def load_kind_probe(cfg: RunConfig, kind: str) -> ProbeModel:
    path = cfg.out / f"probe_{kind_tag(kind)}.json"
    if not path.exists():
        raise SchemaError(f"{path.name} not found in {cfg.out}; run `mechbias probe` first", subject=str(path))
    return load_probe(path)


def sweep_csv(sweep) -> str:
    buf = io.StringIO()
    cols = ["kind", "factor", "n", "correct_rate", "original_bias_rate", "other_rate", "unknown_rate"]
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for c in sweep.cells:
        writer.writerow(c.to_dict())
    return buf.getvalue()


def write_manifest(cfg: RunConfig, stages: list[str]) -> Path:
    files = {}
    for p in sorted(cfg.out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(cfg.out).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {
        "config": cfg.to_dict(include_output=False),
        "config_hash": cfg.config_hash(),
        "stages": stages,
        "versions": {"mechbias": __version__, "numpy": np.__version__},
        "files": files,
    }
    return write_json(cfg.out / "manifest.json", manifest)


def run_probe(ctx: RunContext) -> dict[str, ProbeModel]:
    probes = {}
    for kind in ctx.cfg.kinds:
        probe, metrics = stage_probe(ctx, kind)
        tag = kind_tag(kind)
        save_probe(probe, ctx.cfg.out / f"probe_{tag}.json")
        write_json(ctx.cfg.out / f"metrics_{tag}.json", metrics.to_dict())
        log.info("probe %s: accuracy %.4f, macro-F1 %.4f", tag, metrics.accuracy, metrics.macro_f1)
        # downstream stages use the saved (float32) probe so split runs and `report` agree
        probes[kind] = load_probe(ctx.cfg.out / f"probe_{tag}.json")
    return probes


def run_lens(ctx: RunContext, probes: dict[str, ProbeModel]) -> None:
    for kind, probe in probes.items():
        lens = stage_lens(ctx, probe)
        write_json(ctx.cfg.out / f"fingerprints_{kind_tag(kind)}.json", {c: p.to_dict() for c, p in lens.items()})


def run_attribute(ctx: RunContext, probes: dict[str, ProbeModel]) -> dict[str, list[NeuronGroup]]:
    out = {}
    for kind, probe in probes.items():
        groups = stage_attribute(ctx, probe, kind)
        write_json(ctx.cfg.out / f"candidates_{kind_tag(kind)}.json", groups_to_json(groups))
        out[kind] = groups
    return out


def run_activations(ctx: RunContext, groups_by_kind: dict[str, list[NeuronGroup]]) -> None:
    for kind, groups in groups_by_kind.items():
        matrix = stage_activations(ctx, groups, kind)
        tag = kind_tag(kind)
        write_text(ctx.cfg.out / f"activations_{tag}.csv", matrix.to_csv())
        write_json(ctx.cfg.out / f"activations_{tag}.json", matrix.to_dict())


def run_intervene(ctx: RunContext, groups_by_kind: dict[str, list[NeuronGroup]]) -> None:
    all_groups = [g for groups in groups_by_kind.values() for g in groups]
    baseline = stage_baseline(ctx, all_groups)
    labels = tuple(sorted({r.group for r in ctx.records}))
    out = ctx.cfg.out
    write_jsonl(out / "baseline_generations.jsonl", [o.to_dict() for o in baseline])
    write_json(out / "error_pattern.json", error_pattern(baseline, labels).to_dict())
    write_json(out / "outcome_buckets.json", outcome_buckets(baseline, labels).to_dict())
    sweep = stage_sweep(ctx, baseline, groups_by_kind)
    write_json(out / "sweep.json", sweep.to_dict())
    write_text(out / "sweep.csv", sweep_csv(sweep))
    write_jsonl(out / "sweep_generations.jsonl", [o.to_dict() for o in sweep.outcomes])
