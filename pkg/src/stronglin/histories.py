"""Histories of shared-memory executions and the operations on them.

A history is a flat sequence of invocation/response steps across all
processes and objects.  Steps carry a ``level`` tag: ``"interpreted"``
steps are the outer boundaries of implemented-object method calls,
``"base"`` steps belong to base objects (atomic registers, counters,
coins and so on).  Interpretation erases the base steps that fall inside
a method call of the same process, which turns a low-level history into
the history of the same program run against atomic objects.

Everything in this module is a pure function over immutable values.
The interchange format is JSON Lines: a header line with the object
registry followed by one step per line, with a canonical field order so
that serialize -> parse -> serialize is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Iterable, Mapping

INV = "inv"
RSP = "rsp"
BASE = "base"
INTERPRETED = "interpreted"

#: Reserved sentinel for "empty" responses (for example a dequeue finding
#: nothing).  It lives outside the integer payload domain on purpose.
BOTTOM = "⊥"

FLIP = "flip"


class HistoryError(Exception):
    """Base class for errors raised by history operations."""


class MalformedHistoryError(HistoryError):
    """The step sequence violates per-process well-formedness."""


class NotSequentialError(HistoryError):
    """A sequential history was required but an overlap was found."""


class UnknownIdError(HistoryError):
    """A process or object id is not part of the history."""


@dataclass(frozen=True, slots=True)
class Step:
    """One invocation or response.

    ``payload`` is the argument tuple for invocations and the return
    value for responses.  Payloads are integers, tuples of payloads,
    ``BOTTOM`` or ``None``.
    """

    kind: str
    process: int
    obj: int
    op: str
    payload: Any
    level: str

    def is_inv(self) -> bool:
        return self.kind == INV

    def is_rsp(self) -> bool:
        return self.kind == RSP


@dataclass(frozen=True, slots=True)
class ObjectInfo:
    """Registry entry: what kind of object an id denotes."""

    type_name: str
    level: str
    params: tuple[tuple[str, Any], ...] = ()
    impl: str | None = None


@dataclass(frozen=True, slots=True)
class OperationInstance:
    """A paired invocation/response (response absent while pending)."""

    inv_index: int
    rsp_index: int | None
    process: int
    obj: int
    op: str
    args: tuple
    ret: Any

    @property
    def complete(self) -> bool:
        return self.rsp_index is not None


@dataclass(frozen=True)
class History:
    """An ordered step sequence plus the process/object registries.

    The index of a step is its position; projections re-base indices.
    """

    steps: tuple[Step, ...] = ()
    processes: tuple[int, ...] = ()
    objects: Mapping[int, ObjectInfo] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.steps)

    def with_steps(self, steps: Iterable[Step]) -> "History":
        return History(tuple(steps), self.processes, self.objects)

    def prefix(self, n: int) -> "History":
        return self.with_steps(self.steps[:n])

    def is_prefix_of(self, other: "History") -> bool:
        return self.steps == other.steps[: len(self.steps)]

    def operations(self, level: str | None = None) -> tuple[OperationInstance, ...]:
        """Pair invocations with responses, per process and per level.

        A process has at most one open operation per level (an open
        method call may contain one open base operation).  Raises
        MalformedHistoryError when pairing is impossible.
        """
        open_ops: dict[tuple[int, str], tuple[int, Step]] = {}
        done: list[OperationInstance] = []
        for i, s in enumerate(self.steps):
            key = (s.process, s.level)
            if s.is_inv():
                if key in open_ops:
                    raise MalformedHistoryError(
                        f"process {s.process} invokes at step {i} with an open "
                        f"{s.level} operation"
                    )
                open_ops[key] = (i, s)
            else:
                if key not in open_ops:
                    raise MalformedHistoryError(
                        f"response at step {i} has no open invocation"
                    )
                j, inv_step = open_ops.pop(key)
                if inv_step.obj != s.obj or inv_step.op != s.op:
                    raise MalformedHistoryError(
                        f"response at step {i} does not match invocation at {j}"
                    )
                done.append(
                    OperationInstance(
                        j, i, s.process, s.obj, s.op, inv_step.payload, s.payload
                    )
                )
        for (p, _lvl), (j, inv_step) in open_ops.items():
            done.append(
                OperationInstance(
                    j, None, p, inv_step.obj, inv_step.op, inv_step.payload, None
                )
            )
        if level is not None:
            done = [o for o in done if self.steps[o.inv_index].level == level]
        return tuple(sorted(done, key=lambda o: o.inv_index))

    def is_sequential(self) -> bool:
        """True when every operation is atomic in this history."""
        for op in self.operations():
            if op.rsp_index is None:
                if op.inv_index != len(self.steps) - 1:
                    return False
            elif op.rsp_index != op.inv_index + 1:
                return False
        return True


def check_well_formed(h: History) -> None:
    """Raise MalformedHistoryError unless h is per-process well-formed."""
    h.operations()
    seen_pending: set[tuple[int, str]] = set()
    for op in h.operations():
        key = (op.process, h.steps[op.inv_index].level)
        if not op.complete:
            if key in seen_pending:
                raise MalformedHistoryError(
                    f"process {op.process} has two pending operations"
                )
            seen_pending.add(key)


# ---------------------------------------------------------------------------
# Projections and interpretation
# ---------------------------------------------------------------------------


def project_process(h: History, p: int) -> History:
    """The subsequence of steps executed by process p, indices re-based."""
    if p not in h.processes:
        raise UnknownIdError(f"unknown process id {p}")
    return h.with_steps(s for s in h.steps if s.process == p)


def project_object(h: History, o: int) -> History:
    """The subsequence of steps on object o."""
    if o not in h.objects:
        raise UnknownIdError(f"unknown object id {o}")
    return h.with_steps(s for s in h.steps if s.obj == o)


def project_method_intervals(h: History, o: int) -> History:
    """All steps any process executes inside a method call on object o.

    Includes the boundary invocation/response on o itself; a pending
    method call contributes its steps without the final response.
    """
    info = h.objects.get(o)
    if info is None:
        raise UnknownIdError(f"unknown object id {o}")
    if info.level != INTERPRETED:
        raise HistoryError(f"object {o} is a base object")
    inside: set[int] = set()
    kept: list[Step] = []
    for s in h.steps:
        if s.obj == o and s.level == INTERPRETED:
            if s.is_inv():
                inside.add(s.process)
                kept.append(s)
            else:
                kept.append(s)
                inside.discard(s.process)
        elif s.process in inside:
            kept.append(s)
    return h.with_steps(kept)


def interpret(h: History) -> History:
    """Erase base steps inside implemented method calls (the Gamma map).

    Method boundary steps and top-level atomic steps (including coin
    flips) survive.  Idempotent.
    """
    depth: dict[int, int] = {}
    kept: list[Step] = []
    for s in h.steps:
        if s.level == INTERPRETED:
            kept.append(s)
            if s.is_inv():
                depth[s.process] = depth.get(s.process, 0) + 1
            else:
                depth[s.process] = depth.get(s.process, 0) - 1
        else:
            if depth.get(s.process, 0) == 0:
                kept.append(s)
    return h.with_steps(kept)


def prefix_to_flip(h: History, k: int) -> History:
    """The prefix ending with the k-th flip invocation (whole h if fewer)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    seen = 0
    for i, s in enumerate(h.steps):
        if s.op == FLIP and s.is_inv():
            seen += 1
            if seen == k:
                return h.prefix(i + 1)
    return h


def happens_before(h: History, a: OperationInstance, b: OperationInstance) -> bool:
    """True iff a is complete and a's response precedes b's invocation."""
    for op in (a, b):
        if op.inv_index >= len(h.steps):
            raise HistoryError("operation does not belong to this history")
        s = h.steps[op.inv_index]
        if s.process != op.process or s.obj != op.obj or s.op != op.op:
            raise HistoryError("operation does not belong to this history")
    if h.steps[a.inv_index].level != h.steps[b.inv_index].level:
        raise HistoryError("operations are on different levels")
    return a.rsp_index is not None and a.rsp_index < b.inv_index


# ---------------------------------------------------------------------------
# Sequential specifications and validity
# ---------------------------------------------------------------------------

#: transition(state, op_name, args, process) -> (new_state, response).
#: The process id is part of the invocation (snapshot components and
#: LL/SC link flags depend on it).  A response of ANY_RESPONSE means
#: every recorded value is acceptable (coins).
ANY_RESPONSE = object()


@dataclass(frozen=True)
class SeqSpec:
    """Deterministic sequential type specification."""

    type_name: str
    initial_state: Any
    transition: Callable[[Any, str, tuple, int], tuple[Any, Any]]


def validate_sequential(h: History, specs: Mapping[int, SeqSpec]) -> bool:
    """Replay a sequential history against per-object specifications.

    Returns True iff every recorded response is reproduced.  Raises
    NotSequentialError for non-sequential input (distinct from False).
    """
    if not h.is_sequential():
        raise NotSequentialError("history contains a non-atomic operation")
    states: dict[int, Any] = {}
    for op in h.operations():
        if op.obj not in specs:
            raise UnknownIdError(f"no specification for object {op.obj}")
        spec = specs[op.obj]
        state = states.get(op.obj, spec.initial_state)
        state, expected = spec.transition(state, op.op, op.args, op.process)
        states[op.obj] = state
        if op.complete and expected is not ANY_RESPONSE and expected != op.ret:
            return False
    return True


# ---------------------------------------------------------------------------
# Timed executions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimedExecution:
    """A history with non-decreasing timestamps attached to its steps."""

    pairs: tuple[tuple[Step, Fraction], ...]
    processes: tuple[int, ...] = ()
    objects: Mapping[int, ObjectInfo] = field(default_factory=dict)

    def history(self) -> History:
        return History(tuple(s for s, _t in self.pairs), self.processes, self.objects)

    def times(self) -> tuple[Fraction, ...]:
        return tuple(t for _s, t in self.pairs)


def timed_from_history(h: History) -> TimedExecution:
    """Attach time i to the i-th step."""
    return TimedExecution(
        tuple((s, Fraction(i)) for i, s in enumerate(h.steps)),
        h.processes,
        h.objects,
    )


# ---------------------------------------------------------------------------
# JSON Lines interchange
# ---------------------------------------------------------------------------


def _encode_payload(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_encode_payload(x) for x in v]
    return v


def _decode_payload(v: Any) -> Any:
    if isinstance(v, list):
        return tuple(_decode_payload(x) for x in v)
    return v


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True)


def to_jsonl(h: History) -> str:
    """Serialize with canonical field order (byte-exact round trips)."""
    header = {
        "objects": {
            str(oid): {
                "type": info.type_name,
                "level": info.level,
                "params": {k: _encode_payload(v) for k, v in info.params},
                "impl": info.impl,
            }
            for oid, info in sorted(h.objects.items())
        },
        "processes": list(h.processes),
    }
    lines = [_dumps(header)]
    for i, s in enumerate(h.steps):
        lines.append(
            _dumps(
                {
                    "index": i,
                    "kind": s.kind,
                    "process": s.process,
                    "object": s.obj,
                    "op": s.op,
                    "payload": _encode_payload(s.payload),
                    "level": s.level,
                }
            )
        )
    return "\n".join(lines) + "\n"


def from_jsonl(text: str) -> History:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise HistoryError("empty input")
    header = json.loads(lines[0])
    objects = {
        int(oid): ObjectInfo(
            entry["type"],
            entry["level"],
            tuple((k, _decode_payload(v)) for k, v in entry["params"].items()),
            entry["impl"],
        )
        for oid, entry in header["objects"].items()
    }
    steps = []
    for i, ln in enumerate(lines[1:]):
        rec = json.loads(ln)
        if rec["index"] != i:
            raise HistoryError(f"non-consecutive step index at line {i + 2}")
        steps.append(
            Step(
                rec["kind"],
                rec["process"],
                rec["object"],
                rec["op"],
                _decode_payload(rec["payload"]),
                rec["level"],
            )
        )
    return History(tuple(steps), tuple(header["processes"]), objects)
