from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_spec
from specforge.spec_model import (
    AgentSlot,
    EngineSlot,
    SpecSyntaxError,
    SpecValidationError,
    default_spec,
    diff_specs,
    hash_spec,
    load_spec,
    parse_spec,
    parse_spec_json,
    serialize_spec,
    spec_to_json,
)


def test_default_spec_round_trips():
    s = default_spec()
    assert parse_spec(serialize_spec(s)) == s
    assert parse_spec(serialize_spec(s)).content_hash == s.content_hash


def test_hash_ignores_id_and_version():
    s = default_spec()
    renamed = parse_spec(serialize_spec(s).replace('spec_id = "default"', 'spec_id = "other"'))
    assert renamed.spec_id == "other"
    assert renamed.content_hash == s.content_hash
    assert s.with_version(9).content_hash == s.content_hash
    assert hash_spec(s) == s.content_hash


def test_hash_changes_with_slot_content():
    s = default_spec()
    other = parse_spec(serialize_spec(s).replace("temperature = 0.7", "temperature = 0.8"))
    assert other.content_hash != s.content_hash


def test_serialization_is_key_order_independent():
    text = serialize_spec(default_spec())
    lines = text.splitlines()
    start = lines.index("[intelligence]") + 1
    end = lines.index("", start)
    shuffled = lines[:start] + list(reversed(lines[start:end])) + lines[end:]
    assert serialize_spec(parse_spec("\n".join(shuffled))) == text


@pytest.mark.parametrize(
    "mutation, field",
    [
        (("loop_type = \"simple\"", "loop_type = \"bogus\""), "agent.loop_type"),
        (("temperature = 0.7", "temperature = 3.5"), "intelligence.temperature"),
        (("temperature = 0.7", "temperature = \"hot\""), "intelligence.temperature"),
        (("max_turns = 10", "max_turns = 0"), "agent.max_turns"),
        (("batch_size = 1", "batch_size = 1\nturbo = true"), "engine.turbo"),
        (("epsilon = 0.01", "epsilon = 2.0"), "learning.gate.epsilon"),
    ],
)
def test_validation_errors_name_the_field(mutation, field):
    text = serialize_spec(default_spec()).replace(*mutation)
    with pytest.raises(SpecValidationError) as info:
        parse_spec(text)
    assert info.value.field == field
    assert str(info.value).startswith(field)


def test_syntax_error_reports_position():
    with pytest.raises(SpecSyntaxError) as info:
        parse_spec("[intelligence]\nmodel_id = \n")
    assert info.value.line == 2


def test_required_fields():
    with pytest.raises(SpecValidationError) as info:
        parse_spec("[engine]\nbackend = \"ollama\"\n")
    assert info.value.field == "intelligence.model_id"


def test_duplicate_tools_rejected():
    text = serialize_spec(default_spec()).replace('enabled_tools = ["think"]', 'enabled_tools = ["think", "think"]')
    with pytest.raises(SpecValidationError, match="duplicate"):
        parse_spec(text)


def test_orphan_description_rejected():
    text = serialize_spec(default_spec()).replace("tool_descriptions = {}", 'tool_descriptions = { calc = "x" }')
    with pytest.raises(SpecValidationError) as info:
        parse_spec(text)
    assert info.value.field == "tools.tool_descriptions"


def test_exemplar_cap():
    with pytest.raises(SpecValidationError):
        AgentSlot(exemplars=tuple(("q", "a") for _ in range(17)))


def test_json_round_trip():
    s = default_spec()
    assert parse_spec_json(spec_to_json(s)) == s
    assert load_spec(spec_to_json(s), "json").content_hash == s.content_hash
    assert json.loads(spec_to_json(s))["agent"]["loop_type"] == "simple"


def test_negative_zero_hashes_like_zero():
    text = serialize_spec(default_spec())
    a = parse_spec(text.replace("temperature = 0.7", "temperature = 0.0"))
    b = parse_spec(text.replace("temperature = 0.7", "temperature = -0.0"))
    assert a.content_hash == b.content_hash


def test_diff_lists_changed_fields():
    a = default_spec()
    b = parse_spec(serialize_spec(a).replace("max_turns = 10", "max_turns = 20").replace("stagnation_k = 5", "stagnation_k = 7"))
    assert diff_specs(a, a) == []
    assert diff_specs(a, b) == [("agent.max_turns", 10, 20), ("learning.gate.stagnation_k", 5, 7)]


def test_deployment_file_aliases(fixtures_dir):
    consumer = parse_spec((fixtures_dir / "consumer.toml").read_text())
    assert consumer.intelligence.model_id == "gemma4:4b-it"
    assert consumer.engine.backend == "ollama"
    assert consumer.tools.memory_backend == "sqlite_fts"
    assert not consumer.learning.enabled


def test_alias_conflict_rejected():
    with pytest.raises(SpecValidationError):
        parse_spec('[intelligence]\ndefault_model = "a"\nmodel_id = "b"\n[engine]\nbackend = "x"\n')


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2**32))
def test_random_specs_round_trip(seed):
    s = random_spec(random.Random(seed))
    text = serialize_spec(s)
    back = parse_spec(text)
    assert back == s
    assert back.content_hash == s.content_hash
    assert serialize_spec(back) == text


def test_duplicate_map_keys_rejected():
    with pytest.raises(SpecValidationError) as err:
        EngineSlot(backend="ollama", extra=(("k", "a"), ("k", "b")))
    assert err.value.field == "engine.extra"
