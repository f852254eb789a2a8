from __future__ import annotations

import json
from collections import Counter

import pytest

from mechbias.corpus import (
    CREACT_TEMPLATE,
    PromptTemplate,
    Record,
    consolidate_group,
    load_creact,
    load_dataset,
    load_toxigen,
    render_prompt,
    split,
    test_count as _test_count,
)
from mechbias.errors import GroupTooSmall, InvalidSpec, SchemaError, UnknownRawGroup


@pytest.mark.parametrize(
    "raw, group",
    [("chinese", "Asian"), ("asian", "Asian"), ("jewish", "MiddleEastern"), ("muslim", "MiddleEastern"),
     ("middle_east", "MiddleEastern"), ("mexican", "Latino"), ("native_american", "NativeAmerican"),
     ("black", "Black"), (" Black ", "Black")],
)
def test_toxigen_consolidation(raw, group):
    assert consolidate_group(raw, "toxigen") == group


@pytest.mark.parametrize("raw", ["women", "lgbtq", "mental_dis", "physical_dis"])
def test_toxigen_excluded(raw):
    assert consolidate_group(raw, "toxigen") is None


def test_unknown_raw_group():
    with pytest.raises(UnknownRawGroup):
        consolidate_group("martians", "toxigen")


def test_creact_consolidation():
    assert consolidate_group("Black/African American", "creact") == "BlackAA"
    assert consolidate_group("White", "creact") == "White"
    assert consolidate_group("Native American or Alaska Native", "creact") is None


def test_load_toxigen_keeps_and_excludes(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("text,target_group\nAsian people are quiet.,asian\nwomen are rude.,women\n", encoding="utf-8")
    records = load_toxigen(path)
    assert [r.group for r in records] == ["Asian", None]
    assert [r.excluded for r in records] == [False, True]
    assert len(load_dataset(path, "toxigen")) == 1


def test_load_creact_mention(tmp_path):
    path = tmp_path / "c.jsonl"
    rows = [{"text": "Pt required a Spanish interpreter", "race": "White", "mention_type": "indirect"},
            {"text": "Pt is a 40 yo Asian male.", "race": "Asian", "mention_type": "direct"}]
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    records = load_creact(path)
    assert [r.mention for r in records] == ["indirect", "direct"]
    assert [r.text for r in load_dataset(path, "creact-indirect")] == ["Pt required a Spanish interpreter"]


def test_missing_text_column_reports_row(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("text,target_group\nfine,asian\n,black\n", encoding="utf-8")
    with pytest.raises(SchemaError) as err:
        load_toxigen(path)
    assert err.value.row == 2


def test_bad_mention_type(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps({"text": "x", "race": "White", "mention_type": "maybe"}) + "\n", encoding="utf-8")
    with pytest.raises(SchemaError):
        load_creact(path)


def _records(counts: dict[str, int]) -> list[Record]:
    return [Record(text=f"{g}{i}", raw_group=g, group=g, row=i) for g, n in counts.items() for i in range(n)]


def test_split_arithmetic():
    out = split(_records({"A": 10, "B": 10}), 0.2, seed=1)
    tally = Counter((r.group, r.split) for r in out)
    assert tally == {("A", "test"): 2, ("A", "train"): 8, ("B", "test"): 2, ("B", "train"): 8}


def test_split_three_records_half():
    # 0.5 * 3 = 1.5 rounds half-up to 2 test, leaving 1 train
    out = split(_records({"A": 3}), 0.5, seed=0)
    assert sorted(Counter(r.split for r in out).values()) == [1, 2]
    assert _test_count(0.5, 3) == 2


def test_split_clamps_both_sides_non_empty():
    assert _test_count(0.01, 5) == 1
    assert _test_count(0.99, 5) == 4


def test_split_is_seed_deterministic():
    recs = _records({"A": 12, "B": 7})
    assert split(recs, 0.3, 9) == split(recs, 0.3, 9)


def test_split_errors():
    with pytest.raises(GroupTooSmall):
        split(_records({"A": 1, "B": 4}))
    with pytest.raises(InvalidSpec):
        split(_records({"A": 4}), 1.0)


PUBLISHED_PROMPT = (
    "Please read the following sentence from a clinical note. Based on the information contained within the "
    "sentence, determine which of the following races or ethnicities the patient belongs to. Please respond "
    "with only one option.\n"
    "Options: [White, Black or African American, Asian]\n"
    'Clinical Note: "Pt required a Spanish interpreter."\n'
    "Inferred Race or Ethnicity:"
)


def test_render_prompt_byte_exact():
    assert render_prompt(CREACT_TEMPLATE, "Pt required a Spanish interpreter.") == PUBLISHED_PROMPT


def test_render_prompt_parts():
    out = render_prompt(CREACT_TEMPLATE, "X")
    assert 'Clinical Note: "X"' in out
    assert out.endswith("Inferred Race or Ethnicity:")
    assert "[White, Black or African American, Asian]" in out


def test_render_prompt_does_not_expand_braces_in_text():
    out = render_prompt(CREACT_TEMPLATE, "{options} {text}")
    assert 'Clinical Note: "{options} {text}"' in out


def test_template_validation():
    with pytest.raises(InvalidSpec):
        PromptTemplate("no slot", (), "")
