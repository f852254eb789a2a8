"""Planted synthetic models and schema-compatible corpora shipped as test fixtures.

Two fixtures are built, both fully determined by their seeds:

``creact``
    Three classes (Asian, BlackAA, White), direct and indirect mentions,
    answered through the clinical-note prompt. Direct words carry a *concept*
    feature per group; indirect cues (languages, cities) carry an *indirect*
    feature plus a weak copy of the concept. A wired attention head copies
    these features to later positions, including the prompt's final token.

    Layer 1 holds one honest neuron per group (reads the concept, writes the
    group's answer token) and one bias neuron that reads the White indirect
    feature but writes the Asian answer token with a larger gain, so White
    indirect notes are answered "[Asian]" at baseline. Suppressing the Asian
    neuron group (honest + bias) flips those answers back to White. Layer 0
    holds one neuron per group that reads the indirect feature and writes a
    country token.

``toxigen``
    Five classes, raw statements. One concept feature per group, read by a
    layer-0 and a layer-1 neuron that write tokens of the group's cluster.

Ground truth (which neuron plays which role) is written to ``planted.json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import CREACT_TEMPLATE, render_prompt
from .model_core.bundle import save_model
from .model_core.container import canonical_json
from .model_core.synthetic import (
    CueAttention,
    Feature,
    PlantedNeuron,
    SyntheticSpec,
    UnembedCluster,
    generate_synthetic_model,
)
from .model_core.tokenizer import Vocab
from .rng import SplitMix64, derive_seed

FILLER = (
    " ", ".", ",", "-", "Pt", "Patient", "patient", "is", "a", "an", "the", "yo", "male", "female", "identifies",
    "as", "presenting", "presents", "with", "chest", "pain", "cough", "fever", "required", "interpreter",
    "speaks", "only", "arrived", "from", "born", "in", "recently", "family", "history", "of", "diabetes",
    "people", "are", "all", "so", "very", "loud", "lazy", "rude", "smart", "quiet", "and", "they", "my",
    "neighbors", "friends", "I", "think", "Native", "American", "women", "gay", "Spanish",
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
)


@dataclass(frozen=True)
class GroupLexicon:
    label: str
    direct: tuple[str, ...]  # words naming the group
    indirect: tuple[str, ...] = ()  # proxy cues: languages and places
    concept_cluster: tuple[str, ...] = ()  # unembedding tokens sharing the concept feature
    place_cluster: tuple[str, ...] = ()  # unembedding tokens written by indirect neurons
    answer: str | None = None  # generated answer token


CREACT_GROUPS = (
    GroupLexicon(
        "Asian",
        direct=("Asian",),
        indirect=("Mandarin", "Cantonese", "Vietnamese", "Shanghai", "Hanoi", "Seoul"),
        concept_cluster=("[Asian]", "Asians", "Chinese", "Asia"),
        place_cluster=("China", "Vietnam", "Korea", "Taiwan"),
        answer="[Asian]",
    ),
    GroupLexicon(
        "BlackAA",
        direct=("Black", "AA"),
        indirect=("Haitian", "Somali", "Amharic", "Kingston", "Lagos", "Nairobi"),
        concept_cluster=("[Black or African American]", "African", "Afro", "blacks"),
        place_cluster=("Haiti", "Nigeria", "Caribbean", "Jamaica"),
        answer="[Black or African American]",
    ),
    GroupLexicon(
        "White",
        direct=("White", "Caucasian"),
        indirect=("Russian", "Polish", "Ukrainian", "Moscow", "Warsaw", "Kyiv"),
        concept_cluster=("[White]", "whites", "European", "Europe"),
        place_cluster=("Russia", "Ukraine", "Poland", "Kremlin"),
        answer="[White]",
    ),
)
# Answers that appear in published failure examples; present so parsing can be exercised.
DISTRACTOR_ANSWERS = ("[Russian]", "[Yellow]")

TOXIGEN_GROUPS = (
    GroupLexicon("Asian", direct=("Asian", "Chinese"), concept_cluster=("Asians", "China", "Beijing", "Tokyo")),
    GroupLexicon("Black", direct=("Black", "African"), concept_cluster=("Blacks", "Africa", "Afro", "Harlem")),
    GroupLexicon("Latino", direct=("Latino", "Mexican"), concept_cluster=("Hispanic", "Mexico", "Chile", "Colombia")),
    GroupLexicon(
        "MiddleEastern", direct=("Muslim", "Arab", "Jewish"), concept_cluster=("Islam", "Arabia", "Israel", "Saudi")
    ),
    GroupLexicon(
        "NativeAmerican", direct=("Indigenous", "Cherokee"), concept_cluster=("tribes", "reservation", "natives", "colonial")
    ),
)


@dataclass(frozen=True)
class PlantParams:
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_mlp: int = 64
    weight_scale: float = 0.05
    embed_scale: float = 0.05
    concept_scale: float = 3.0
    indirect_scale: float = 3.0
    weak_concept: float = 0.7  # concept share carried by indirect cues, relative to concept_scale
    cluster_weight: float = 3.0
    honest_strength: float = 1.0
    bias_strength: float = 1.0
    indirect_strength: float = 0.05
    answer_weight: float = 1.0
    read_gain: float = 1.0
    cue_score: float = 12.0
    seed: int = 0


CREACT_PARAMS = PlantParams(seed=20240601, bias_strength=0.6)
TOXIGEN_PARAMS = PlantParams(seed=20240602, indirect_strength=0.5)


def _words(groups: tuple[GroupLexicon, ...], extra: tuple[str, ...]) -> list[str]:
    words: list[str] = list(FILLER)
    for g in groups:
        words += [*g.direct, *g.indirect, *g.concept_cluster, *g.place_cluster]
        if g.answer:
            words.append(g.answer)
    return list(dict.fromkeys(words + list(extra)))


@dataclass
class PlantedLayout:
    """Which neuron plays which role; serialised to ``planted.json``."""

    honest: dict[str, list[int]] = field(default_factory=dict)  # label -> [layer, index]
    indirect: dict[str, list[int]] = field(default_factory=dict)
    bias: dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"honest": self.honest, "indirect": self.indirect, "bias": self.bias}


def creact_spec(params: PlantParams = CREACT_PARAMS) -> tuple[SyntheticSpec, PlantedLayout]:
    head, _, tail = render_prompt(CREACT_TEMPLATE, "\x00").partition("\x00")
    vocab = Vocab.build(_words(CREACT_GROUPS, (head, tail, *DISTRACTOR_ANSWERS)))
    tid = vocab.id_of
    features, clusters, planted = [], [], []
    layout = PlantedLayout()
    gamma = params.weak_concept
    for g in CREACT_GROUPS:
        carriers = [tid(w) for w in g.direct] + [tid(w) for w in g.indirect]
        scales = [params.concept_scale] * len(g.direct) + [gamma * params.concept_scale] * len(g.indirect)
        features.append(Feature(f"concept:{g.label}", tuple(carriers), params.concept_scale, tuple(scales)))
        features.append(Feature(f"indirect:{g.label}", tuple(tid(w) for w in g.indirect), params.indirect_scale))
        features.append(Feature(f"place:{g.label}"))
        features.append(Feature(f"answer:{g.label}"))
        clusters.append(UnembedCluster(f"concept:{g.label}", tuple(tid(w) for w in g.concept_cluster), params.cluster_weight))
        clusters.append(UnembedCluster(f"place:{g.label}", tuple(tid(w) for w in g.place_cluster), params.cluster_weight))
    for g in CREACT_GROUPS:
        # applied after the concept clusters: the answer column keeps its concept share
        # but also gets a direction of its own
        clusters.append(UnembedCluster(f"answer:{g.label}", (tid(g.answer),), params.answer_weight))

    rng = SplitMix64(derive_seed(params.seed, "slots"))
    last, first = params.n_layers - 1, 0
    slots_last = [int(i) for i in rng.permutation(params.d_mlp)[:4]]
    slots_first = [int(i) for i in rng.permutation(params.d_mlp)[:3]]
    for g, idx in zip(CREACT_GROUPS, slots_last):
        planted.append(
            PlantedNeuron(last, idx, g.label, tid(g.answer), params.honest_strength, f"concept:{g.label}", params.read_gain)
        )
        layout.honest[g.label] = [last, idx]
    planted.append(
        PlantedNeuron(last, slots_last[3], "Asian", tid("[Asian]"), params.bias_strength, "indirect:White", params.read_gain)
    )
    layout.bias = {"neuron": [last, slots_last[3]], "reads": "White", "writes": "Asian"}
    for g, idx in zip(CREACT_GROUPS, slots_first):
        planted.append(
            PlantedNeuron(
                first, idx, g.label, tid(g.place_cluster[0]), params.indirect_strength, f"indirect:{g.label}", params.read_gain
            )
        )
        layout.indirect[g.label] = [first, idx]
    cue_features = tuple(f.name for f in features if f.name.split(":")[0] in ("concept", "indirect"))
    spec = SyntheticSpec(
        d_model=params.d_model,
        n_layers=params.n_layers,
        n_heads=params.n_heads,
        d_mlp=params.d_mlp,
        vocab_tokens=vocab.tokens,
        planted_neurons=tuple(planted),
        seed=params.seed,
        features=tuple(features),
        unembed_clusters=tuple(clusters),
        cue_attention=(CueAttention(0, 0, cue_features, score=params.cue_score),),
        weight_scale=params.weight_scale,
        embed_scale=params.embed_scale,
    )
    return spec, layout


def toxigen_spec(params: PlantParams = TOXIGEN_PARAMS) -> tuple[SyntheticSpec, PlantedLayout]:
    vocab = Vocab.build(_words(TOXIGEN_GROUPS, ()))
    tid = vocab.id_of
    features, clusters, planted = [], [], []
    layout = PlantedLayout()
    rng = SplitMix64(derive_seed(params.seed, "slots"))
    slots_last = [int(i) for i in rng.permutation(params.d_mlp)[: len(TOXIGEN_GROUPS)]]
    slots_first = [int(i) for i in rng.permutation(params.d_mlp)[: len(TOXIGEN_GROUPS)]]
    last = params.n_layers - 1
    for g, hi, lo in zip(TOXIGEN_GROUPS, slots_last, slots_first):
        name = f"concept:{g.label}"
        features.append(Feature(name, tuple(tid(w) for w in g.direct), params.concept_scale))
        clusters.append(UnembedCluster(name, tuple(tid(w) for w in g.concept_cluster), params.cluster_weight))
        planted.append(PlantedNeuron(last, hi, g.label, tid(g.concept_cluster[0]), params.honest_strength, name))
        planted.append(PlantedNeuron(0, lo, g.label, tid(g.concept_cluster[1]), params.indirect_strength, name))
        layout.honest[g.label] = [last, hi]
        layout.indirect[g.label] = [0, lo]
    spec = SyntheticSpec(
        d_model=params.d_model,
        n_layers=params.n_layers,
        n_heads=params.n_heads,
        d_mlp=params.d_mlp,
        vocab_tokens=vocab.tokens,
        planted_neurons=tuple(planted),
        seed=params.seed,
        features=tuple(features),
        unembed_clusters=tuple(clusters),
        cue_attention=(CueAttention(0, 0, tuple(f.name for f in features), score=params.cue_score),),
        weight_scale=params.weight_scale,
        embed_scale=params.embed_scale,
    )
    return spec, layout


# ---------------------------------------------------------------- corpora

_DIRECT_FORMS = (
    "Pt is a {age} yo {w} {sex}.",
    "Patient identifies as {w}.",
    "{w} {sex} presenting with {sym}.",
    "{age} yo {w} {sex} with history of diabetes.",
)
_LANGUAGE_FORMS = (
    "Pt required a {w} interpreter.",
    "Patient speaks only {w}.",
    "{age} yo {sex}, {w} speaking, presents with {sym}.",
)
_PLACE_FORMS = (
    "Pt recently arrived from {w}.",
    "Patient was born in {w}, presents with {sym}.",
    "{age} yo {sex} from {w} with {sym}.",
)
_TOXIGEN_FORMS = (
    "{w} people are so {adj}.",
    "all {w} people are {adj}.",
    "my {w} neighbors are very {adj}.",
    "I think {w} people are {adj} and {adj2}.",
)
_SYMPTOMS = ("chest pain", "cough", "fever")
_ADJ = ("loud", "lazy", "rude", "smart", "quiet")


class _Picker:
    def __init__(self, seed: int, *labels: str):
        self._rng = SplitMix64(derive_seed(seed, *labels))

    def index(self, n: int) -> int:
        return int(self._rng.uniform(1)[0] * n)

    def choice(self, items):
        return items[self.index(len(items))]


def _fill(form: str, pick: _Picker, w: str) -> str:
    adj = pick.choice(_ADJ)
    return form.format(
        w=w,
        age=20 + pick.index(70),
        sex=pick.choice(("male", "female")),
        sym=pick.choice(_SYMPTOMS),
        adj=adj,
        adj2=pick.choice([a for a in _ADJ if a != adj]),
    )


CREACT_RACE_NAMES = {"Asian": "Asian", "BlackAA": "Black/African American", "White": "White"}


def creact_rows(per_group: int = 40, seed: int = 7) -> list[dict]:
    """Direct and indirect notes per group, plus a few rows from excluded categories."""
    rows = []
    for g in CREACT_GROUPS:
        pick = _Picker(seed, "creact", g.label)
        languages, places = g.indirect[:3], g.indirect[3:]
        for i in range(per_group):
            rows.append({"text": _fill(_DIRECT_FORMS[i % 4], pick, pick.choice(g.direct)),
                         "race": CREACT_RACE_NAMES[g.label], "mention_type": "direct"})
        for i in range(per_group):
            if i % 2 == 0:
                text = _fill(_LANGUAGE_FORMS[(i // 2) % 3], pick, pick.choice(languages))
            else:
                text = _fill(_PLACE_FORMS[(i // 2) % 3], pick, pick.choice(places))
            rows.append({"text": text, "race": CREACT_RACE_NAMES[g.label], "mention_type": "indirect"})
    rows.append({"text": "Pt is a 61 yo Native American male.", "race": "Native American or Alaska Native",
                 "mention_type": "direct"})
    rows.append({"text": "Pt required a Spanish interpreter.", "race": "Native American or Alaska Native",
                 "mention_type": "indirect"})
    order = SplitMix64(derive_seed(seed, "creact-order")).permutation(len(rows))
    return [rows[int(i)] for i in order]


TOXIGEN_RAW = {
    "Asian": ("asian", "chinese"),
    "Black": ("black",),
    "Latino": ("latino", "mexican"),
    "MiddleEastern": ("middle_east", "jewish", "muslim"),
    "NativeAmerican": ("native_american",),
}


def toxigen_rows(per_group: int = 40, seed: int = 11) -> list[dict]:
    rows = []
    for g in TOXIGEN_GROUPS:
        pick = _Picker(seed, "toxigen", g.label)
        raws = TOXIGEN_RAW[g.label]
        for i in range(per_group):
            rows.append({"text": _fill(_TOXIGEN_FORMS[i % 4], pick, pick.choice(g.direct)), "target_group": raws[i % len(raws)]})
    pick = _Picker(seed, "toxigen", "excluded")
    for raw, w in (("women", "women"), ("lgbtq", "gay")):
        for i in range(3):
            rows.append({"text": _fill("{w} are so {adj}.", pick, w), "target_group": raw})
    order = SplitMix64(derive_seed(seed, "toxigen-order")).permutation(len(rows))
    return [rows[int(i)] for i in order]


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    path.write_text("".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows), encoding="utf-8")


def _write_csv(path: Path, rows: list[dict], columns: tuple[str, ...]) -> None:
    import csv
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def run_config(mode: str, model: str, dataset: str) -> dict:
    return {
        "mode": mode,
        "model": model,
        "dataset": dataset,
        "keywords": None,
        "group_map": None,
        "output_dir": f"out/{mode}",
    }


def write_fixtures(outdir: str | Path) -> list[Path]:
    """(Re)generate every shipped fixture file under ``outdir``; returns the paths written."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    planted = {}
    for name, (spec, layout) in (("creact", creact_spec()), ("toxigen", toxigen_spec())):
        spec.save(outdir / f"{name}_spec.json")
        model_path = save_model(generate_synthetic_model(spec), outdir / f"{name}_model.json")
        written += [outdir / f"{name}_spec.json", model_path, model_path.with_suffix(".bin"),
                    model_path.with_suffix(".vocab.tsv")]
        planted[name] = layout.to_dict()
    _write_jsonl(outdir / "creact.jsonl", creact_rows())
    _write_csv(outdir / "toxigen.csv", toxigen_rows(), ("text", "target_group"))
    (outdir / "planted.json").write_text(canonical_json(planted), encoding="utf-8")
    configs = {
        "creact_config.json": run_config("creact", "creact_model.json", "creact.jsonl"),
        "toxigen_config.json": run_config("toxigen", "toxigen_model.json", "toxigen.csv"),
    }
    for fname, cfg in configs.items():
        (outdir / fname).write_text(canonical_json(cfg), encoding="utf-8")
    written += [outdir / p for p in ("creact.jsonl", "toxigen.csv", "planted.json", *configs)]
    return written
