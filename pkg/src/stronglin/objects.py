"""Sequential type specifications and implemented-object programs.

Two layers live here.  The spec factories (``register_spec`` and
friends) give deterministic sequential specifications used both for
atomic base objects and for validity checking.  The ``ImplProgram``
constructors package the classic constructions as step machines:
each method body is a generator that yields one base-object invocation
per step, receives the response, and returns the method's result.

Method bodies may allocate fresh base objects mid-run through the
allocator handle (the compare-and-swap construction allocates a block
per successful install); everything else is laid out during setup.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import isqrt
from typing import Any, Callable

from .histories import ANY_RESPONSE, BOTTOM, SeqSpec

# ---------------------------------------------------------------------------
# Sequential specifications
# ---------------------------------------------------------------------------


def register_spec(initial: Any = 0, domain_bound: int | None = None) -> SeqSpec:
    """Read/write register.  With ``domain_bound`` set, writes outside
    {0..domain_bound} are rejected (the multivalued SRSW type)."""

    def transition(state, op, args, process):
        if op == "write":
            (v,) = args
            if domain_bound is not None and not (0 <= v <= domain_bound):
                raise ValueError(f"write value {v} outside 0..{domain_bound}")
            return v, None
        if op == "read":
            return state, state
        raise ValueError(f"register does not support {op!r}")

    name = "register" if domain_bound is None else f"register<{domain_bound}>"
    return SeqSpec(name, initial, transition)


def snapshot_spec(n: int, initial: int = 0) -> SeqSpec:
    """n-component snapshot; update writes the caller's own component."""

    def transition(state, op, args, process):
        if op == "update":
            (v,) = args
            if not 0 <= process < n:
                raise ValueError(f"process {process} has no snapshot component")
            s = list(state)
            s[process] = v
            return tuple(s), None
        if op == "scan":
            return state, state
        raise ValueError(f"snapshot does not support {op!r}")

    return SeqSpec("snapshot", (initial,) * n, transition)


def queue_spec() -> SeqSpec:
    """FIFO queue; dequeue on empty returns the reserved empty marker."""

    def transition(state, op, args, process):
        if op == "enqueue":
            (v,) = args
            return state + (v,), None
        if op == "dequeue":
            if not state:
                return state, BOTTOM
            return state[1:], state[0]
        raise ValueError(f"queue does not support {op!r}")

    return SeqSpec("queue", (), transition)


def counter_spec(initial: int = 0) -> SeqSpec:
    """Strong counter: fetch&inc / fetch&dec, both returning the prior
    value."""

    def transition(state, op, args, process):
        if op == "fetch_inc":
            return state + 1, state
        if op == "fetch_dec":
            return state - 1, state
        if op == "read":
            return state, state
        raise ValueError(f"counter does not support {op!r}")

    return SeqSpec("strong-counter", initial, transition)


def cas_spec(initial: Any = 0) -> SeqSpec:
    """Compare-and-swap object returning the prior value."""

    def transition(state, op, args, process):
        if op == "cas":
            x, y = args
            if state == x:
                return y, x
            return state, state
        if op == "read":
            return state, state
        raise ValueError(f"cas object does not support {op!r}")

    return SeqSpec("cas", initial, transition)


def llsc_spec(initial: Any = 0) -> SeqSpec:
    """Register with LL/SC.  State is (value, linked process ids).

    SC by p succeeds iff p holds a link and no successful write or SC
    intervened since (both clear every link).  SC returns 1 or 0.
    """

    def transition(state, op, args, process):
        value, links = state
        if op == "ll":
            return (value, links | {process}), value
        if op == "sc":
            (v,) = args
            if process in links:
                return (v, frozenset()), 1
            return state, 0
        if op == "write":
            (v,) = args
            return (v, frozenset()), None
        if op == "read":
            return state, value
        raise ValueError(f"ll/sc register does not support {op!r}")

    return SeqSpec("llsc-register", (initial, frozenset()), transition)


def rmw_cell_spec(initial: Any = 0) -> SeqSpec:
    """Read-modify-write cell: read, write, fetch&set, fetch&inc."""

    def transition(state, op, args, process):
        if op == "read":
            return state, state
        if op == "write":
            (v,) = args
            return v, None
        if op == "fetch_set":
            (v,) = args
            return v, state
        if op == "fetch_inc":
            return state + 1, state
        raise ValueError(f"rmw cell does not support {op!r}")

    return SeqSpec("rmw-cell", initial, transition)


def test_and_set_spec() -> SeqSpec:
    """One-shot test&set bit returning the prior value (0 means won)."""

    def transition(state, op, args, process):
        if op == "test_set":
            return 1, state
        if op == "read":
            return state, state
        raise ValueError(f"test&set does not support {op!r}")

    return SeqSpec("test-and-set", 0, transition)


def coin_spec() -> SeqSpec:
    """Per-process coin; any recorded outcome validates."""

    def transition(state, op, args, process):
        if op == "flip":
            return state, ANY_RESPONSE
        raise ValueError(f"coin does not support {op!r}")

    return SeqSpec("coin", None, transition)


# ---------------------------------------------------------------------------
# Implemented objects
# ---------------------------------------------------------------------------

#: alloc(spec, type_name, params) -> base object id, provided by the engine.
Allocator = Callable[[SeqSpec, str, tuple], int]


@dataclass(frozen=True)
class ImplProgram:
    """An implemented object: a target type plus deterministic method
    bodies over its own base objects.

    ``setup(alloc)`` lays out the base objects and returns the mutable
    instance state (one engine run owns it).  ``body(state, alloc, p,
    op, args)`` returns a generator yielding ("invoke", oid, op, args)
    actions; its return value is the method response.
    """

    type_name: str
    impl_name: str
    target_spec: SeqSpec
    setup: Callable[[Allocator], Any]
    body: Callable[[Any, Allocator, int, str, tuple], Any]


def _read(oid):
    return ("invoke", oid, "read", ())


def _write(oid, v):
    return ("invoke", oid, "write", (v,))


def vidyasankar_register(domain_bound: int, initial: int) -> ImplProgram:
    """Multivalued SRSW register from atomic bits.

    Write sets the target bit then zeroes everything below it; read
    scans upward to the first set bit, then downward, returning the
    lowest set bit it saw on the way back.
    """
    if not 0 <= initial <= domain_bound:
        raise ValueError(f"initial {initial} outside 0..{domain_bound}")

    def setup(alloc):
        bits = tuple(
            alloc(
                register_spec(1 if i == initial else 0, domain_bound=1),
                "bit-register",
                (("index", i),),
            )
            for i in range(domain_bound + 1)
        )
        return {"bits": bits}

    def body(state, alloc, p, op, args):
        bits = state["bits"]
        if op == "write":
            (v,) = args
            if not 0 <= v <= domain_bound:
                raise ValueError(f"write value {v} outside 0..{domain_bound}")
            yield _write(bits[v], 1)
            for j in range(v - 1, -1, -1):
                yield _write(bits[j], 0)
            return None
        if op == "read":
            i = 0
            while True:
                b = yield _read(bits[i])
                if b == 1:
                    break
                i += 1
            val = i
            for j in range(i - 1, -1, -1):
                b = yield _read(bits[j])
                if b == 1:
                    val = j
            return val
        raise ValueError(f"register does not support {op!r}")

    return ImplProgram(
        "register",
        "vidyasankar-register",
        register_spec(initial, domain_bound=domain_bound),
        setup,
        body,
    )


def aadgms_snapshot(n: int) -> ImplProgram:
    """Single-writer snapshot with double collects and borrowed views.

    Each component register holds (value, sequence number, embedded
    view).  A scan repeats collects until two successive ones agree, or
    until some writer's sequence number is seen to change twice, in
    which case the scan borrows that writer's embedded view from the
    latest collect (lowest component index on ties).  An update runs an
    inner scan and then publishes (value, next seq, that view) in one
    write.
    """
    if n < 1:
        raise ValueError("need at least one component")

    def setup(alloc):
        cells = tuple(
            alloc(
                register_spec((0, 0, (0,) * n)),
                "snapshot-cell",
                (("component", i),),
            )
            for i in range(n)
        )
        return {"cells": cells, "seq": {}}

    def scan_views(cells):
        prev = None
        changes = [0] * n
        while True:
            cur = []
            for j in range(n):
                cur.append((yield _read(cells[j])))
            if prev is not None:
                if cur == prev:
                    return tuple(entry[0] for entry in cur)
                for j in range(n):
                    if cur[j][1] != prev[j][1]:
                        changes[j] += 1
                for j in range(n):
                    if changes[j] >= 2:
                        return tuple(cur[j][2])
            prev = cur

    def body(state, alloc, p, op, args):
        cells = state["cells"]
        if op == "scan":
            view = yield from scan_views(cells)
            return view
        if op == "update":
            (v,) = args
            if not 0 <= p < n:
                raise ValueError(f"process {p} has no snapshot component")
            view = yield from scan_views(cells)
            seq = state["seq"].get(p, 0) + 1
            state["seq"][p] = seq
            yield _write(cells[p], (v, seq, view))
            return None
        raise ValueError(f"snapshot does not support {op!r}")

    return ImplProgram("snapshot", "aadgms-snapshot", snapshot_spec(n), setup, body)


def vitanyi_awerbuch_mrsw(
    readers: int = 2,
    initial: int = 0,
    writer: int = 0,
    reader_ids: tuple[int, int] = (1, 2),
) -> ImplProgram:
    """Two-reader MRSW register from six SRSW registers.

    The writer bumps a local sequence number and publishes (value, seq)
    to one register per reader.  A reader collects the writer's cell
    and both reader-to-reader cells, adopts the pair with the highest
    sequence number (source order writer, reader 1, reader 2 breaks
    ties), republishes it to both reader-to-reader cells for its index,
    and returns the value.
    """
    if readers != 2:
        raise ValueError("this construction is specialized to two readers")

    def setup(alloc):
        def reg(tag):
            return alloc(register_spec((initial, 0)), "srsw-register", (("link", tag),))

        wr = (reg("w-r1"), reg("w-r2"))
        rr = (
            (reg("r1-r1"), reg("r1-r2")),
            (reg("r2-r1"), reg("r2-r2")),
        )
        return {"wr": wr, "rr": rr, "wseq": 0}

    def body(state, alloc, p, op, args):
        if op == "write":
            (v,) = args
            state["wseq"] += 1
            pair = (v, state["wseq"])
            yield _write(state["wr"][0], pair)
            yield _write(state["wr"][1], pair)
            return None
        if op == "read":
            i = reader_ids.index(p)
            sources = (state["wr"][i], state["rr"][0][i], state["rr"][1][i])
            seen = []
            for oid in sources:
                seen.append((yield _read(oid)))
            best = seen[0]
            for entry in seen[1:]:
                if entry[1] > best[1]:
                    best = entry
            yield _write(state["rr"][i][0], best)
            yield _write(state["rr"][i][1], best)
            return best[0]
        raise ValueError(f"register does not support {op!r}")

    return ImplProgram(
        "mrsw-register",
        "vitanyi-awerbuch-mrsw",
        register_spec(initial),
        setup,
        body,
    )


def herlihy_wing_queue(capacity: int = 16) -> ImplProgram:
    """The classic array queue: enqueue reserves a slot with fetch&inc
    and writes it; dequeue sweeps the array with fetch&set, swapping in
    the empty marker, and retries forever while everything reads empty.
    """

    def setup(alloc):
        tail = alloc(rmw_cell_spec(0), "tail-counter")
        items = tuple(
            alloc(rmw_cell_spec(BOTTOM), "item-cell", (("index", i),))
            for i in range(capacity)
        )
        return {"tail": tail, "items": items}

    def body(state, alloc, p, op, args):
        tail, items = state["tail"], state["items"]
        if op == "enqueue":
            (v,) = args
            pos = yield ("invoke", tail, "fetch_inc", ())
            if pos >= capacity:
                raise ValueError(f"queue capacity {capacity} exceeded")
            yield _write(items[pos], v)
            return None
        if op == "dequeue":
            while True:
                limit = yield _read(tail)
                for i in range(min(limit, capacity)):
                    v = yield ("invoke", items[i], "fetch_set", (BOTTOM,))
                    if v != BOTTOM:
                        return v
        raise ValueError(f"queue does not support {op!r}")

    return ImplProgram("queue", "hw-queue", queue_spec(), setup, body)


def _llsc_loop(oid, delta):
    while True:
        v = yield ("invoke", oid, "ll", ())
        ok = yield ("invoke", oid, "sc", (v + delta,))
        if ok:
            return v


def llsc_strong_counter() -> ImplProgram:
    """Lock-free strong counter over one LL/SC register.  The first
    shared access of every operation is the LL."""

    def setup(alloc):
        return {"reg": alloc(llsc_spec(0), "llsc-register")}

    def body(state, alloc, p, op, args):
        if op == "fetch_inc":
            return (yield from _llsc_loop(state["reg"], 1))
        if op == "fetch_dec":
            return (yield from _llsc_loop(state["reg"], -1))
        raise ValueError(f"counter does not support {op!r}")

    return ImplProgram("strong-counter", "llsc-counter", counter_spec(0), setup, body)


def writefirst_strong_counter(n: int) -> ImplProgram:
    """Strong counter whose first shared access is a write: announce
    into a small shared pool (collisions intended), then install via
    the same LL/SC loop."""
    if n < 1:
        raise ValueError("need at least one process")
    pool_size = max(1, isqrt(n))

    def setup(alloc):
        pool = tuple(
            alloc(register_spec(0), "announce-cell", (("index", i),))
            for i in range(pool_size)
        )
        return {"reg": alloc(llsc_spec(0), "llsc-register"), "pool": pool}

    def body(state, alloc, p, op, args):
        if op in ("fetch_inc", "fetch_dec"):
            yield _write(state["pool"][p % pool_size], p)
            delta = 1 if op == "fetch_inc" else -1
            return (yield from _llsc_loop(state["reg"], delta))
        raise ValueError(f"counter does not support {op!r}")

    return ImplProgram(
        "strong-counter", "writefirst-counter", counter_spec(0), setup, body
    )


def cas_from_registers(initial: Any = 0) -> ImplProgram:
    """Compare-and-swap from reads, writes and per-block test&set.

    State lives in blocks, each a (value register, election bit, signal
    register) triple; a pointer register names the current block.  A
    CAS that sees the expected value races for the block's election
    bit.  The winner allocates a fresh block, publishes the new value,
    swings the pointer, then signals the losers, which spin on the
    signal register and return the signalled value.
    """

    def setup(alloc):
        def new_block(k):
            return (
                alloc(register_spec(initial if k == 0 else 0), "block-value", (("block", k),)),
                alloc(test_and_set_spec(), "block-election", (("block", k),)),
                alloc(register_spec(BOTTOM), "block-signal", (("block", k),)),
            )

        blocks = {0: new_block(0)}
        cur = alloc(register_spec(0), "current-block")
        return {"cur": cur, "blocks": blocks, "next": 1, "new_block": new_block}

    def body(state, alloc, p, op, args):
        if op == "read":
            b = yield _read(state["cur"])
            v = yield _read(state["blocks"][b][0])
            return v
        if op == "cas":
            x, y = args
            b = yield _read(state["cur"])
            val_reg, election, signal = state["blocks"][b]
            v = yield _read(val_reg)
            if v != x:
                return v
            lost = yield ("invoke", election, "test_set", ())
            if not lost:
                nb = state["next"]
                state["next"] += 1
                state["blocks"][nb] = state["new_block"](nb)
                yield _write(state["blocks"][nb][0], y)
                yield _write(state["cur"], nb)
                yield _write(signal, y)
                return x
            while True:
                s = yield _read(signal)
                if s != BOTTOM:
                    return s
        raise ValueError(f"cas object does not support {op!r}")

    return ImplProgram("cas", "cas-from-registers", cas_spec(initial), setup, body)


def mutex_wrapped(spec: SeqSpec) -> ImplProgram:
    """Any sequential type behind a test-and-set style LL/SC lock.

    The single write to the state register is the linearization point;
    it is statically the same line for every operation.
    """

    def setup(alloc):
        return {
            "lock": alloc(llsc_spec(0), "lock"),
            "cell": alloc(register_spec(spec.initial_state), "state-cell"),
        }

    def body(state, alloc, p, op, args):
        while True:
            held = yield ("invoke", state["lock"], "ll", ())
            if held:
                continue
            ok = yield ("invoke", state["lock"], "sc", (1,))
            if ok:
                break
        s = yield _read(state["cell"])
        s2, resp = spec.transition(s, op, args, p)
        yield _write(state["cell"], s2)
        yield _write(state["lock"], 0)
        return resp

    return ImplProgram(
        spec.type_name, f"mutex-wrapped-{spec.type_name}", spec, setup, body
    )


#: String-addressable catalog for CLI and config selection.
CATALOG: dict[str, Callable[..., ImplProgram]] = {
    "vidyasankar-register": vidyasankar_register,
    "aadgms-snapshot": aadgms_snapshot,
    "vitanyi-awerbuch-mrsw": vitanyi_awerbuch_mrsw,
    "hw-queue": herlihy_wing_queue,
    "llsc-counter": llsc_strong_counter,
    "writefirst-counter": writefirst_strong_counter,
    "cas-from-registers": cas_from_registers,
    "mutex-wrapped-counter": lambda: mutex_wrapped(counter_spec(0)),
}
