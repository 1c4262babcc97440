import pytest

from acrfence import paths
from acrfence.errors import ConfigError, PolicyMissing
from acrfence.policy import FieldTreatment, PolicySet, ToolPolicy, digest, extract_credentials, load_policies, redact


def test_leaves_and_paths():
    doc = {"a": {"b": 1, "c": [2, {"d": 3}]}, "e": {}, "f": []}
    assert dict(paths.iter_leaves(doc)) == {"a.b": 1, "a.c.0": 2, "a.c.1.d": 3, "e": {}, "f": []}
    assert paths.get(doc, "a.c.1.d") == 3
    assert paths.set_path({"x": {"y": 1}}, "x.y", 2) == {"x": {"y": 2}}


@pytest.mark.parametrize(
    "pattern, path, hit",
    [
        ("amount", "amount", True),
        ("meta", "meta.trace.id", True),
        ("meta.*.id", "meta.trace.id", True),
        ("meta.*.id", "meta.trace.name", False),
        ("amount", "amount_cents", False),
        ("a.b", "a", False),
    ],
)
def test_pattern_matching(pattern, path, hit):
    assert paths.matches(pattern, path) is hit


def test_overlap_is_a_config_error():
    with pytest.raises(ConfigError):
        ToolPolicy("t", True, ("amount",), ("amount",))


def test_volatile_beats_intent_for_nested_paths():
    p = ToolPolicy("t", True, ("meta",), ("meta.trace",))
    assert p.treats_as_intent("meta.owner")
    assert not p.treats_as_intent("meta.trace.id")


def test_unknown_field_treatment():
    assert ToolPolicy("t").treats_as_intent("surprise")
    assert not ToolPolicy("t", unknown_field_treatment=FieldTreatment.AS_VOLATILE).treats_as_intent("surprise")


def test_policy_set_round_trip_and_missing(tmp_path):
    ps = PolicySet.from_dict(
        {"tools": {"transfer": {"intent_fields": ["amount"], "volatile_fields": ["ref"]}}, "default": {"irreversible": False}}
    )
    assert ps.get("transfer").intent_fields == ("amount",)
    assert ps.get("other").irreversible is False
    assert PolicySet.from_dict(ps.to_dict()).to_dict() == ps.to_dict()
    with pytest.raises(PolicyMissing):
        PolicySet().get("anything")
    (tmp_path / "p.json").write_text("{oops")
    with pytest.raises(ConfigError):
        load_policies(tmp_path / "p.json")
    with pytest.raises(ConfigError):
        PolicySet.from_dict({"tools": [{"tool_name": "x", "bogus": 1}]})


def test_credentials_are_digested_never_stored_raw():
    p = ToolPolicy("delete_data", True, ("target",), (), ("token", "auth.*"))
    args = {"target": "Alice", "token": "secret-1", "auth": {"bearer": "secret-2", "empty": ""}}
    assert sorted(extract_credentials(args, p)) == [("auth.bearer", "secret-2"), ("token", "secret-1")]
    red = redact(args, p)
    assert red["token"] == digest("secret-1") and red["auth"]["bearer"] == digest("secret-2")
    assert "secret" not in repr(red)
    assert args["token"] == "secret-1"
    assert digest("x").startswith("sha256:") and len(digest("x")) == 7 + 64
