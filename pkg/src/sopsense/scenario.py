"""
Scenario scripts: scripted channel dynamics for the polarization channel.

A scenario is a small YAML document::

    seed: 2
    total_duration_s: 1200.0
    events:
      - kind: drift
        start_s: 0.0
        duration_s: .inf
        params: {bandwidth_hz: 1.0, rate_rad_s: 0.02}
      - kind: break
        start_s: 1190.0
        duration_s: 10.0
        params: {ramp_s: 1.0, post_power_db: -40.0}

Time origin is the scenario start.  Field names carry their unit as a
suffix (``_s``, ``_hz``, ``_rad``, ``_rad_s``, ``_db``).  Missing event
parameters take the defaults in :data:`EVENT_PARAMS`.

Event kinds
-----------
drift
    Slow random SOP walk. ``bandwidth_hz`` is the corner frequency of the
    first-order low-pass processes driving the three angular-velocity
    components, ``rate_rad_s`` the RMS magnitude of the angular velocity.
mains_tone
    Faraday rotation about the circular (S3) axis by
    ``sum_h peak[h] * sin(2 pi (h+1) fundamental_hz t)``.
burst
    ``count`` Gaussian angular-velocity pulses (peak ``peak_rate_rad_s``,
    standard deviation ``width_s``) about one random axis, centered at
    ``start_s + (i + 0.5) * period_s``.
flutter
    Band-limited random angular velocity (RMS ``rate_rad_s``, corner
    ``bandwidth_hz``) about one random axis, with raised-cosine edges.
break
    Angular-velocity chirp sweeping 20 -> 200 Hz for ``ramp_s`` seconds
    (peak about ``peak_rate_rad_s``), then the transmission collapses to
    ``post_power_db`` within ``collapse_s`` and the signal is lost.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Any

import yaml

KINDS = ("drift", "mains_tone", "burst", "flutter", "break")

# Default parameter values; an event may only carry these keys.
EVENT_PARAMS: dict[str, dict[str, Any]] = {
    "drift": {"bandwidth_hz": 1.0, "rate_rad_s": 0.02},
    "mains_tone": {
        "fundamental_hz": 50.0,
        "harmonic_peaks_rad": [0.05, 0.05 / 3, 0.05 / 5],
    },
    "burst": {"peak_rate_rad_s": 30.0, "width_s": 0.005, "period_s": 10.0, "count": 5},
    "flutter": {"rate_rad_s": 3.0, "bandwidth_hz": 10.0},
    "break": {
        "ramp_s": 1.0,
        "post_power_db": -40.0,
        "peak_rate_rad_s": 60.0,
        "collapse_s": 0.002,
    },
}

_TOP_KEYS = ("seed", "total_duration_s", "events")
_EVENT_KEYS = ("kind", "start_s", "duration_s", "params")


class ScenarioError(ValueError):
    """A scenario document that cannot be turned into a valid script."""


@dataclass(frozen=True)
class ChannelEvent:
    kind: str
    start_s: float
    duration_s: float
    params: dict = field(default_factory=dict)

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s

    def __getitem__(self, name: str):
        return self.params[name]


@dataclass(frozen=True)
class EventScript:
    seed: int
    total_duration_s: float
    events: tuple[ChannelEvent, ...] = ()

    def break_event(self) -> ChannelEvent | None:
        for ev in self.events:
            if ev.kind == "break":
                return ev
        return None

    def break_completion_s(self) -> float:
        """Instant the break ramp ends and the signal is lost (inf if none)."""
        ev = self.break_event()
        return math.inf if ev is None else ev.start_s + float(ev["ramp_s"])

    def digest(self) -> str:
        """SHA-256 of the canonical text; stable identity for caching and manifests."""
        return hashlib.sha256(serialize_scenario(self).encode()).hexdigest()

    def with_duration(self, total_duration_s: float) -> "EventScript":
        return replace(self, total_duration_s=float(total_duration_s))


# ----------------------------------------------------------------------------
# parsing
# ----------------------------------------------------------------------------


def _line(node) -> int:
    return node.start_mark.line + 1


def _mapping(node, where: str) -> dict:
    if not isinstance(node, yaml.MappingNode):
        raise ScenarioError(f"line {_line(node)}: {where}: expected a mapping")
    out = {}
    for key_node, value_node in node.value:
        key = key_node.value
        if key in out:
            raise ScenarioError(f"line {_line(key_node)}: {where}: duplicate key '{key}'")
        out[key] = (key_node, value_node)
    return out


def _construct(loader: yaml.SafeLoader, node):
    return loader.construct_object(node, deep=True)


def _number(loader, node, where: str, integer: bool = False):
    value = _construct(loader, node)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"line {_line(node)}: {where}: expected a number, got {value!r}")
    if integer:
        if isinstance(value, float) and not value.is_integer():
            raise ScenarioError(f"line {_line(node)}: {where}: expected an integer")
        return int(value)
    return float(value)


def parse_scenario(text: str) -> EventScript:
    """Parse and validate a scenario document.

    Raises
    ------
    ScenarioError
        On YAML syntax errors, schema violations and invariant violations,
        with the offending line and field in the message.
    """
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"malformed scenario document: {exc}") from None
    if root is None:
        raise ScenarioError("empty scenario document")
    loader = yaml.SafeLoader("")
    top = _mapping(root, "document")
    for key, (key_node, _) in top.items():
        if key not in _TOP_KEYS:
            raise ScenarioError(f"line {_line(key_node)}: unknown top-level field '{key}'")
    for key in ("total_duration_s", "events"):
        if key not in top:
            raise ScenarioError(f"missing top-level field '{key}'")

    seed = 0
    if "seed" in top:
        seed = _number(loader, top["seed"][1], "seed", integer=True)
        if seed < 0:
            raise ScenarioError(f"line {_line(top['seed'][1])}: seed: must be non-negative")
    total = _number(loader, top["total_duration_s"][1], "total_duration_s")

    events_node = top["events"][1]
    if not isinstance(events_node, yaml.SequenceNode):
        raise ScenarioError(f"line {_line(events_node)}: events: expected a list")

    events = []
    lines = []
    n_breaks = 0
    for i, ev_node in enumerate(events_node.value):
        where = f"events[{i}]"
        ev = _mapping(ev_node, where)
        for key, (key_node, _) in ev.items():
            if key not in _EVENT_KEYS:
                raise ScenarioError(f"line {_line(key_node)}: {where}: unknown field '{key}'")
        for key in ("kind", "start_s", "duration_s"):
            if key not in ev:
                raise ScenarioError(f"line {_line(ev_node)}: {where}: missing field '{key}'")
        kind = _construct(loader, ev["kind"][1])
        if kind not in KINDS:
            raise ScenarioError(
                f"line {_line(ev['kind'][1])}: {where}.kind: unknown kind {kind!r}"
            )
        if kind == "break":
            n_breaks += 1
            if n_breaks > 1:
                raise ScenarioError(f"line {_line(ev_node)}: {where}: multiple break events")
        start = _number(loader, ev["start_s"][1], f"{where}.start_s")
        duration = _number(loader, ev["duration_s"][1], f"{where}.duration_s")
        if duration <= 0:
            raise ScenarioError(
                f"line {_line(ev['duration_s'][1])}: {where}.duration_s: negative or zero duration"
            )

        params = {k: (list(v) if isinstance(v, list) else v) for k, v in EVENT_PARAMS[kind].items()}
        if "params" in ev:
            pnode = ev["params"][1]
            if isinstance(pnode, yaml.ScalarNode) and _construct(loader, pnode) is None:
                pmap = {}
            else:
                pmap = _mapping(pnode, f"{where}.params")
            for name, (key_node, value_node) in pmap.items():
                pwhere = f"{where}.params.{name}"
                if name not in EVENT_PARAMS[kind]:
                    raise ScenarioError(
                        f"line {_line(key_node)}: {pwhere}: unknown parameter for {kind}"
                    )
                if isinstance(EVENT_PARAMS[kind][name], list):
                    if not isinstance(value_node, yaml.SequenceNode):
                        raise ScenarioError(f"line {_line(value_node)}: {pwhere}: expected a list")
                    params[name] = [_number(loader, n, pwhere) for n in value_node.value]
                else:
                    params[name] = _number(
                        loader, value_node, pwhere, integer=isinstance(EVENT_PARAMS[kind][name], int)
                    )
        events.append(ChannelEvent(kind, start, duration, params))
        lines.append(_line(ev_node))

    script = EventScript(seed, total, tuple(events))
    problems = validate(script)
    if problems:
        msg = problems[0]
        for i, line in enumerate(lines):
            if msg.startswith(f"events[{i}]"):
                msg = f"line {line}: {msg}"
                break
        raise ScenarioError(msg)
    return script


# ----------------------------------------------------------------------------
# validation
# ----------------------------------------------------------------------------


def _finite_nonneg(value) -> bool:
    return isinstance(value, (int, float)) and math.isfinite(value) and value >= 0


def validate(script: EventScript) -> list[str]:
    """Invariant violations of ``script``; an empty list means valid."""
    problems = []
    total = script.total_duration_s
    if not (math.isfinite(total) and total > 0):
        problems.append("total_duration_s must be finite and positive")
    if not (isinstance(script.seed, int) and script.seed >= 0):
        problems.append("seed must be a non-negative integer")

    starts = [ev.start_s for ev in script.events]
    breaks = [i for i, ev in enumerate(script.events) if ev.kind == "break"]

    for i, ev in enumerate(script.events):
        where = f"events[{i}]"
        if ev.kind not in KINDS:
            problems.append(f"{where}: unknown kind {ev.kind!r}")
            continue
        if not (math.isfinite(ev.start_s) and ev.start_s >= 0):
            problems.append(f"{where}: start_s must be finite and >= 0")
        if math.isinf(ev.duration_s):
            if ev.kind not in ("drift", "mains_tone") or ev.duration_s < 0:
                problems.append(f"{where}: only drift and mains_tone may last forever")
        elif not ev.duration_s > 0:
            problems.append(f"{where}: duration_s must be > 0")
        elif math.isfinite(total) and ev.end_s > total + 1e-9:
            problems.append(f"{where}: ends after total_duration_s")
        unknown = set(ev.params) - set(EVENT_PARAMS[ev.kind])
        if unknown:
            problems.append(f"{where}: unknown parameters {sorted(unknown)}")
        for name, value in ev.params.items():
            if name == "post_power_db":
                if not (isinstance(value, (int, float)) and math.isfinite(value) and value <= 0):
                    problems.append(f"{where}.params.{name}: must be finite and <= 0")
            elif isinstance(value, (list, tuple)):
                if not value or not all(_finite_nonneg(v) for v in value):
                    problems.append(f"{where}.params.{name}: entries must be finite and >= 0")
            elif not _finite_nonneg(value):
                problems.append(f"{where}.params.{name}: must be finite and >= 0")
        missing = set(EVENT_PARAMS[ev.kind]) - set(ev.params)
        if missing:
            problems.append(f"{where}: missing parameters {sorted(missing)}")
            continue
        positive = {
            "drift": ("bandwidth_hz",),
            "mains_tone": ("fundamental_hz",),
            "burst": ("width_s", "period_s", "count"),
            "flutter": ("bandwidth_hz",),
            "break": ("ramp_s", "collapse_s"),
        }[ev.kind]
        for name in positive:
            value = ev.params[name]
            if _finite_nonneg(value) and not value > 0:
                problems.append(f"{where}.params.{name}: must be > 0")
        if ev.kind == "burst":
            if isinstance(ev["count"], float) and not ev["count"].is_integer():
                problems.append(f"{where}.params.count: must be an integer")
            if _finite_nonneg(ev["period_s"]) and _finite_nonneg(ev["count"]):
                if ev.duration_s + 1e-9 < ev["count"] * ev["period_s"]:
                    problems.append(f"{where}: duration_s shorter than count * period_s")
        if ev.kind == "break" and _finite_nonneg(ev["ramp_s"]):
            if ev["ramp_s"] > ev.duration_s:
                problems.append(f"{where}: ramp_s longer than duration_s")

    if len(breaks) > 1:
        problems.append("multiple break events")
    if any(b < a for a, b in zip(starts, starts[1:])):
        problems.append("events not sorted")
    if len(breaks) == 1:
        completion = script.break_completion_s()
        for i, ev in enumerate(script.events):
            if ev.start_s > completion:
                problems.append(f"events[{i}]: starts after the break completes")
    return problems


# ----------------------------------------------------------------------------
# serialization and presets
# ----------------------------------------------------------------------------


def scenario_to_dict(script: EventScript) -> dict:
    return {
        "seed": int(script.seed),
        "total_duration_s": float(script.total_duration_s),
        "events": [
            {
                "kind": ev.kind,
                "start_s": float(ev.start_s),
                "duration_s": float(ev.duration_s),
                "params": {
                    name: ([float(v) for v in ev.params[name]] if isinstance(ev.params[name], (list, tuple))
                           else (int(ev.params[name]) if name == "count" else float(ev.params[name])))
                    for name in EVENT_PARAMS[ev.kind]
                    if name in ev.params
                },
            }
            for ev in script.events
        ],
    }


def serialize_scenario(script: EventScript) -> str:
    """Canonical YAML text; ``parse_scenario`` inverts it exactly."""
    return yaml.safe_dump(scenario_to_dict(script), sort_keys=False, default_flow_style=None)


def _event(kind: str, start_s: float, duration_s: float, **params) -> ChannelEvent:
    merged = {k: (list(v) if isinstance(v, list) else v) for k, v in EVENT_PARAMS[kind].items()}
    merged.update(params)
    return ChannelEvent(kind, float(start_s), float(duration_s), merged)


MAINS_PEAK_RAD = 0.05
BREAK_AT_S = 1190.0


def builtin_preset(name: str) -> EventScript:
    """Shipped scenarios.

    ``mains-only``
        60 s of the 50 Hz Faraday tone with harmonics at 100 and 150 Hz.
    ``baseline``
        2 h of environmental drift plus the mains tone family.
    ``break-demo``
        The last 20 minutes before a cable break: impulsive bursts about
        7 minutes out, a 15 s flutter about 6 minutes out, a second burst
        train, then the break at t = 1190 s and loss of signal.
    """
    mains = dict(fundamental_hz=50.0, harmonic_peaks_rad=[MAINS_PEAK_RAD, MAINS_PEAK_RAD / 3, MAINS_PEAK_RAD / 5])
    if name == "mains-only":
        return EventScript(0, 60.0, (_event("mains_tone", 0.0, math.inf, **mains),))
    if name == "baseline":
        return EventScript(
            1,
            7200.0,
            (
                _event("drift", 0.0, math.inf, bandwidth_hz=1.0, rate_rad_s=0.02),
                _event("mains_tone", 0.0, math.inf, **mains),
            ),
        )
    if name == "break-demo":
        t_break = BREAK_AT_S
        return EventScript(
            2,
            1200.0,
            (
                _event("drift", 0.0, math.inf, bandwidth_hz=1.0, rate_rad_s=0.02),
                _event("mains_tone", 0.0, math.inf, **mains),
                _event("burst", t_break - 420.0, 50.0, peak_rate_rad_s=30.0, width_s=0.005, period_s=10.0, count=5),
                _event("flutter", t_break - 367.5, 15.0, rate_rad_s=3.0, bandwidth_hz=10.0),
                _event("burst", t_break - 330.0, 30.0, peak_rate_rad_s=15.0, width_s=0.01, period_s=10.0, count=3),
                _event("break", t_break, 1200.0 - t_break, ramp_s=1.0, post_power_db=-40.0,
                       peak_rate_rad_s=60.0, collapse_s=0.002),
            ),
        )
    raise ScenarioError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


PRESETS = ("baseline", "break-demo", "mains-only")


def load_scenario(ref: str) -> EventScript:
    """A preset name or a path to a scenario file."""
    if ref in PRESETS:
        return builtin_preset(ref)
    with open(ref, encoding="utf-8") as fh:
        return parse_scenario(fh.read())
