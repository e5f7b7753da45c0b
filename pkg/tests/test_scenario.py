import math
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sopsense.scenario import (
    EVENT_PARAMS,
    PRESETS,
    ChannelEvent,
    EventScript,
    ScenarioError,
    builtin_preset,
    load_scenario,
    parse_scenario,
    serialize_scenario,
    validate,
)

MINIMAL = """\
seed: 4
total_duration_s: 30
events:
  - kind: drift
    start_s: 0
    duration_s: .inf
"""

TWO_BREAKS = """\
total_duration_s: 100
events:
  - {kind: break, start_s: 10, duration_s: 5}
  - {kind: break, start_s: 20, duration_s: 5}
"""


def test_minimal_document():
    s = parse_scenario(MINIMAL)
    assert s.seed == 4 and len(s.events) == 1
    assert s.events[0].kind == "drift" and math.isinf(s.events[0].duration_s)
    assert s.break_event() is None
    assert s.events[0].params == EVENT_PARAMS["drift"]


def test_two_breaks_rejected():
    with pytest.raises(ScenarioError, match="multiple break events"):
        parse_scenario(TWO_BREAKS)


@pytest.mark.parametrize(
    "text, pattern",
    [
        ("total_duration_s: 10\nevents:\n  - {kind: burst, start_s: 1, duration_s: -2}\n", "line 3.*negative"),
        ("total_duration_s: 10\nevents:\n  - {kind: wobble, start_s: 1, duration_s: 2}\n", "line 3.*unknown kind"),
        ("total_duration_s: 10\nevents:\n  - {kind: drift, start_s: 0, duration_s: 1, params: {speed: 3}}\n",
         "line 3.*speed"),
        ("total_duration_s: 10\nbogus: 1\nevents: []\n", "line 2.*bogus"),
        ("events: []\n", "total_duration_s"),
        ("total_duration_s: [1\n", "malformed"),
        ("", "empty"),
        ("total_duration_s: 10\nevents:\n  - {kind: drift, start_s: 5, duration_s: 1}\n"
         "  - {kind: drift, start_s: 1, duration_s: 1}\n", "not sorted"),
    ],
)
def test_parse_errors_carry_context(text, pattern):
    with pytest.raises(ScenarioError, match=pattern):
        parse_scenario(text)


def test_break_demo_timeline():
    s = builtin_preset("break-demo")
    t_break = s.break_event().start_s
    bursts = [ev for ev in s.events if ev.kind == "burst"]
    flutters = [ev for ev in s.events if ev.kind == "flutter"]
    assert bursts and all(t_break - 420 <= ev.start_s and ev.end_s <= t_break - 300 for ev in bursts)
    assert len(flutters) == 1 and flutters[0].duration_s == 15
    assert abs(flutters[0].start_s + 7.5 - (t_break - 360)) <= 5
    # bursts repeat every 10 s
    assert all(ev["period_s"] == 10 for ev in bursts)
    assert s.total_duration_s == 1200


def test_mains_only_preset():
    s = builtin_preset("mains-only")
    assert [ev.kind for ev in s.events] == ["mains_tone"]
    ev = s.events[0]
    assert ev["fundamental_hz"] == 50 and len(ev["harmonic_peaks_rad"]) == 3


def test_baseline_preset_is_quiet():
    kinds = {ev.kind for ev in builtin_preset("baseline").events}
    assert kinds == {"drift", "mains_tone"}


def test_unknown_preset():
    with pytest.raises(ScenarioError):
        builtin_preset("nosuch")


@pytest.mark.parametrize("name", PRESETS)
def test_presets_validate_and_round_trip(name):
    s = builtin_preset(name)
    assert validate(s) == []
    assert parse_scenario(serialize_scenario(s)) == s
    assert load_scenario(name) == s


def test_validate_reports_event_index():
    s = builtin_preset("break-demo")
    bad = replace(s, events=(replace(s.events[0], start_s=-1.0),) + s.events[1:])
    problems = validate(bad)
    assert len(problems) == 1 and problems[0].startswith("events[0]")


def test_validate_unsorted():
    s = builtin_preset("break-demo")
    bad = replace(s, events=tuple(reversed(s.events)))
    assert "events not sorted" in validate(bad)


def test_event_after_break_rejected():
    s = EventScript(
        0,
        100.0,
        (
            ChannelEvent("break", 10.0, 5.0, dict(EVENT_PARAMS["break"])),
            ChannelEvent("burst", 50.0, 50.0, dict(EVENT_PARAMS["burst"])),
        ),
    )
    assert any("after the break" in p for p in validate(s))


def test_load_from_file(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text(MINIMAL)
    assert load_scenario(str(path)) == parse_scenario(MINIMAL)


def test_digest_tracks_content():
    a = builtin_preset("break-demo")
    assert a.digest() == builtin_preset("break-demo").digest()
    assert a.digest() != a.with_duration(1100.0).digest()


event_st = st.builds(
    lambda kind, start, dur, scale: ChannelEvent(
        kind,
        start,
        dur,
        {
            k: ([v * scale for v in val] if isinstance(val, list) else (val if k in ("count", "period_s") else val * scale))
            for k, val in EVENT_PARAMS[kind].items()
        },
    ),
    st.sampled_from(["drift", "mains_tone", "burst", "flutter"]),
    st.floats(0, 100, allow_nan=False),
    st.floats(50, 100, allow_nan=False),
    st.floats(0.1, 10, allow_nan=False),
)


@settings(max_examples=60)
@given(st.integers(0, 2**31), st.lists(event_st, max_size=5))
def test_parse_serialize_round_trip(seed, events):
    events = sorted(events, key=lambda e: e.start_s)
    s = EventScript(seed, 250.0, tuple(events))
    assert validate(s) == []
    text = serialize_scenario(s)
    once = parse_scenario(text)
    assert once == s
    assert serialize_scenario(once) == text
