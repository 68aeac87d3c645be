"""Named experiments over the adversary-gap examples.

Each worked example races one randomized program against two routes to
the same object: an atomic oracle and a linearizable implementation of
it.  The adversary class that schedules the run decides whether the two
routes are distinguishable, and every claim here is settled either by
exact enumeration over coin vectors or by exhaustive game search at the
example's tiny size.  The load-balance experiment covers the sampled
regime, and the checker suite replays the strong-linearizability
fixtures.  Results are collected into a Report whose expected column is
sourced from the EXPECTED table, so a regression surfaces as a verdict
flip rather than a silently recomputed constant.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction
from math import isqrt
from typing import Any, Callable, Mapping, Sequence

from .checkers import (
    HistoryTree,
    check_strong_lin,
    default_specs,
    normalize_witness,
    witness_violations,
)
from .engine import (
    AdversaryPolicy,
    AlgorithmSpec,
    Binding,
    EngineError,
    RunRecord,
    VectorCoins,
    enumerate_expectation,
    run,
    scripted_policy,
)
from .histories import BASE, INV, RSP, History, ObjectInfo, Step, interpret
from .loadbalance import (
    adversary_ap,
    estimate_phi,
    k_max_for,
    loadbalance_algorithm,
    scripted_weak_families,
)
from .objects import (
    BOTTOM,
    aadgms_snapshot,
    herlihy_wing_queue,
    queue_spec,
    register_spec,
    snapshot_spec,
    vidyasankar_register,
    vitanyi_awerbuch_mrsw,
)
from .search import exists_adversary, optimal_expectation


class ExperimentError(Exception):
    """A named experiment was misconfigured."""


# ---------------------------------------------------------------------------
# Branching schedules
# ---------------------------------------------------------------------------


def branching_script(
    common: Sequence[int],
    branches: Mapping[Any, Sequence[int]],
    name: str = "branching",
) -> AdversaryPolicy:
    """Weak adversary that plays ``common``, then one tail per flip outcome.

    The tail is selected by the first coin response visible in the run,
    so the schedule may react to a flip it has already granted.  Grants
    past the end of the chosen tail halt the run.
    """
    head = tuple(common)
    tails = {outcome: tuple(g) for outcome, g in branches.items()}

    def make_decide() -> Callable[[Any], int | None]:
        pos = 0

        def decide(view: Any) -> int | None:
            nonlocal pos
            i, pos = pos, pos + 1
            if i < len(head):
                return head[i]
            outcome = _first_flip(view)
            if outcome is None:
                raise EngineError("branch point reached before any flip resolved")
            tail = tails[outcome]
            j = i - len(head)
            return tail[j] if j < len(tail) else None

        return decide

    return AdversaryPolicy("weak", make_decide=make_decide, name=name)


def _first_flip(view: Any) -> Any | None:
    for s in view.steps:
        if s.is_rsp() and view.objects[s.obj].type_name == "coin":
            return s.payload
    return None


def drain_policy(order: Sequence[int], name: str = "drain") -> AdversaryPolicy:
    """Strong adversary that runs each process to completion, in order."""
    fixed = tuple(order)

    def make_decide() -> Callable[[Any], int | None]:
        def decide(view: Any) -> int | None:
            for p in fixed:
                if not view.finished(p):
                    return p
            return None

        return decide

    return AdversaryPolicy("strong", make_decide=make_decide, name=name)


def alternating_policy(procs: Sequence[int], name: str = "alternate") -> AdversaryPolicy:
    """Strong adversary cycling over the given processes, skipping the done."""
    ring = tuple(procs)

    def make_decide() -> Callable[[Any], int | None]:
        at = 0

        def decide(view: Any) -> int | None:
            nonlocal at
            for _ in range(len(ring)):
                p = ring[at % len(ring)]
                at += 1
                if not view.finished(p):
                    return p
            return None

        return decide

    return AdversaryPolicy("strong", make_decide=make_decide, name=name)


# ---------------------------------------------------------------------------
# Worked examples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Example:
    """One adversary-gap fixture: a program, two object routes, a schedule.

    ``goal`` says which direction the atomic-side game search optimizes
    ("min" for the register/snapshot races, "max" for the queue goals).
    """

    name: str
    omega: tuple[int, ...]
    atomic: AlgorithmSpec
    implemented: AlgorithmSpec
    schedule: AdversaryPolicy
    payoff: Callable[[RunRecord], Fraction]
    goal: str


def implemented_value(ex: Example, budget: int = 10_000) -> Fraction:
    """Exact expectation of the example's payoff under its pinned schedule."""
    return enumerate_expectation(
        ex.implemented, ex.schedule, ex.omega, 1, ex.payoff, budget
    )


def atomic_value(ex: Example, klass: str = "strong") -> Fraction:
    """Game value of the atomic variant against the given adversary class."""
    return optimal_expectation(
        ex.atomic, ex.omega, ex.payoff, klass=klass, maximize=(ex.goal == "max")
    )


def _snapshot_payoff(rec: RunRecord) -> Fraction:
    return Fraction(sum(rec.returns[0]))


def snapshot_example() -> Example:
    """Scanner races two updaters; the second update's sign is a coin.

    p scans; q updates 6, flips, then updates 8c; r updates 2 then 0.
    The double-collect implementation lets a weak adversary park r's
    second low-level write and feed p either a borrowed embedded view
    (sum 2) or a direct collect of -8 and 2 (sum -6).
    """

    def make_program(pid: int) -> Any:
        def scanner() -> Any:
            view = yield ("invoke", "S", "scan", ())
            return view

        def flipper() -> Any:
            yield ("invoke", "S", "update", (6,))
            c = yield ("flip",)
            yield ("invoke", "S", "update", (8 * c,))
            return c

        def steady() -> Any:
            yield ("invoke", "S", "update", (2,))
            yield ("invoke", "S", "update", (0,))
            return None

        return (scanner, flipper, steady)[pid]()

    omega = (-1, 1)
    schedule = branching_script(
        common=[0] * 3 + [2] * 7 + [2] * 6 + [1] * 7 + [1] * 1 + [1] * 7 + [0] * 3,
        branches={1: [2] * 1 + [0] * 3, -1: [0] * 3 + [2] * 1},
        name="steal-embedded-view",
    )
    return Example(
        name="snapshot",
        omega=omega,
        atomic=AlgorithmSpec(
            (0, 1, 2), (Binding("S", spec=snapshot_spec(3)),), make_program, omega
        ),
        implemented=AlgorithmSpec(
            (0, 1, 2), (Binding("S", impl=aadgms_snapshot(3)),), make_program, omega
        ),
        schedule=schedule,
        payoff=_snapshot_payoff,
        goal="min",
    )


def _reader_payoff(rec: RunRecord) -> Fraction:
    return Fraction(rec.returns[1])


def srsw_register_example() -> Example:
    """Reader vs. writer on a four-valued register initialized to 1.

    The writer writes 2 and then a coin value from {0, 2}.  Against the
    bit-array implementation, a fixed oblivious schedule catches the
    reader's downward re-check between the two writes, so the read
    averages 1/2 even though every atomic schedule yields at least 1.
    """

    def make_program(pid: int) -> Any:
        def writer() -> Any:
            yield ("invoke", "R", "write", (2,))
            c = yield ("flip",)
            yield ("invoke", "R", "write", (c,))
            return c

        def reader() -> Any:
            got = yield ("invoke", "R", "read", ())
            return got

        return writer() if pid == 0 else reader()

    omega = (0, 2)
    return Example(
        name="srsw-register",
        omega=omega,
        atomic=AlgorithmSpec(
            (0, 1),
            (Binding("R", spec=register_spec(1, domain_bound=3)),),
            make_program,
            omega,
        ),
        implemented=AlgorithmSpec(
            (0, 1),
            (Binding("R", impl=vidyasankar_register(3, 1)),),
            make_program,
            omega,
        ),
        schedule=AdversaryPolicy(
            "oblivious", schedule=(1, 1) + (0,) * 7 + (1,), name="up-down-race"
        ),
        payoff=_reader_payoff,
        goal="min",
    )


def mrsw_register_example() -> Example:
    """Two readers watch a writer whose second write is a coin in {-1, 1}.

    The relay construction forwards values between readers through
    per-pair registers.  A weak adversary lets r1 sample the writer's
    cell before either write, then decides, after seeing the coin,
    whether r2 runs first and relays -1 into r1's remaining reads.
    """

    def make_program(pid: int) -> Any:
        def writer() -> Any:
            yield ("invoke", "R", "write", (1,))
            c = yield ("flip",)
            yield ("invoke", "R", "write", (c,))
            return c

        def reader() -> Any:
            got = yield ("invoke", "R", "read", ())
            return got

        return writer() if pid == 0 else reader()

    omega = (-1, 1)
    schedule = branching_script(
        common=[1] * 1 + [0] * 2 + [0] * 1 + [0] * 2,
        branches={1: [1] * 4 + [2] * 5, -1: [2] * 5 + [1] * 4},
        name="relay-steal",
    )
    return Example(
        name="mrsw-register",
        omega=omega,
        atomic=AlgorithmSpec(
            (0, 1, 2), (Binding("R", spec=register_spec(0)),), make_program, omega
        ),
        implemented=AlgorithmSpec(
            (0, 1, 2),
            (Binding("R", impl=vitanyi_awerbuch_mrsw()),),
            make_program,
            omega,
        ),
        schedule=schedule,
        payoff=_reader_payoff,
        goal="min",
    )


def _queue_goals(rec: RunRecord) -> tuple[bool, bool, bool]:
    c, d1, d2, d3 = rec.returns[2]
    deqs = (d1, d2, d3)
    emptied = BOTTOM not in deqs
    ordered = 1 in deqs and 2 in deqs and deqs.index(1) < deqs.index(2)
    return emptied, ordered, d1 == c


def _queue_payoff(rec: RunRecord) -> Fraction:
    emptied, ordered, matched = _queue_goals(rec)
    return Fraction(int(emptied and ordered and matched))


def _queue_payoff_unordered(rec: RunRecord) -> Fraction:
    emptied, _ordered, matched = _queue_goals(rec)
    return Fraction(int(emptied and matched))


def hw_queue_example() -> Example:
    """Three enqueuers, then one flips a coin and drains the queue.

    Success means the three dequeues empty the queue, the dequeue
    returning 1 precedes the one returning 2, and the first dequeue
    equals the flip.  Holding back q0's array write until after the
    flip lets a weak adversary steer the first dequeue to 0 or 1 at
    will, which no strong adversary can do against the atomic queue:
    there the front is fixed before the flip.
    """

    def make_program(pid: int) -> Any:
        def enqueuer() -> Any:
            yield ("invoke", "Q", "enqueue", (pid,))
            return None

        def racer() -> Any:
            yield ("invoke", "Q", "enqueue", (2,))
            c = yield ("flip",)
            d1 = yield ("invoke", "Q", "dequeue", ())
            d2 = yield ("invoke", "Q", "dequeue", ())
            d3 = yield ("invoke", "Q", "dequeue", ())
            return (c, d1, d2, d3)

        return racer() if pid == 2 else enqueuer()

    omega = (0, 1)
    schedule = branching_script(
        common=[0] * 1 + [1] * 2 + [2] * 2 + [2] * 1,
        branches={
            0: [0] * 1 + [2] * 2 + [2] * 3 + [2] * 4,
            1: [2] * 3 + [0] * 1 + [2] * 2 + [2] * 4,
        },
        name="held-write",
    )
    return Example(
        name="hw-queue",
        omega=omega,
        atomic=AlgorithmSpec(
            (0, 1, 2), (Binding("Q", spec=queue_spec()),), make_program, omega
        ),
        implemented=AlgorithmSpec(
            (0, 1, 2),
            (Binding("Q", impl=herlihy_wing_queue()),),
            make_program,
            omega,
        ),
        schedule=schedule,
        payoff=_queue_payoff,
        goal="max",
    )


def queue_adversary_experiment() -> dict[str, Fraction]:
    """Exact success probabilities for the queue race, all three claims.

    The unordered variant drops the 1-before-2 goal; it does not help
    the atomic adversary, because the racer's own enqueue still pins
    the queue front before the flip.
    """
    ex = hw_queue_example()
    return {
        "implemented-weak": implemented_value(ex),
        "atomic-strong-max": atomic_value(ex, klass="strong"),
        "atomic-strong-max-unordered": optimal_expectation(
            ex.atomic, ex.omega, _queue_payoff_unordered, klass="strong", maximize=True
        ),
    }


EXAMPLES: dict[str, Callable[[], Example]] = {
    "snapshot": snapshot_example,
    "srsw-register": srsw_register_example,
    "mrsw-register": mrsw_register_example,
    "hw-queue": hw_queue_example,
}


# ---------------------------------------------------------------------------
# Checker-suite fixtures
# ---------------------------------------------------------------------------


def _inv(p: int, obj: int, op: str, args: tuple = ()) -> Step:
    return Step(INV, p, obj, op, args, BASE)


def _rsp(p: int, obj: int, op: str, ret: Any = None) -> Step:
    return Step(RSP, p, obj, op, ret, BASE)


def mutex_counter_tree() -> HistoryTree:
    """Tree of real runs: two clients share a lock-based counter.

    Client 0 increments, flips, and increments again; client 1
    increments once.  An alternating strong schedule keeps the
    interpreted operations overlapping, so the checker has to commit
    genuinely pending increments.
    """

    def make_program(pid: int) -> Any:
        def flipper() -> Any:
            yield ("invoke", "C", "fetch_inc", ())
            yield ("flip",)
            yield ("invoke", "C", "fetch_inc", ())
            return None

        def bumper() -> Any:
            yield ("invoke", "C", "fetch_inc", ())
            return None

        return flipper() if pid == 0 else bumper()

    from .objects import CATALOG

    alg = AlgorithmSpec(
        (0, 1),
        (Binding("C", impl=CATALOG["mutex-wrapped-counter"]()),),
        make_program,
        (0, 1),
    )
    runs = {}
    for c in (0, 1):
        rec = run(alg, alternating_policy((0, 1)), VectorCoins((c,)))
        runs[(c,)] = interpret(rec.history)
    return HistoryTree.from_runs(runs, omega=(0, 1))


def hw_atomic_dequeue_tree() -> HistoryTree:
    """Queue tree with overlapping enqueues and branch-dependent dequeues.

    Both enqueues complete while concurrent, then a flip decides whether
    the drain starts with 1 or with 2.  Every leaf linearizes, but any
    shared-prefix image commits one enqueue order and dies on the other
    branch.
    """
    objs = {
        0: ObjectInfo("queue", BASE, (("key", "Q"),)),
        1: ObjectInfo("coin", BASE, (("process", 0),)),
    }
    common = (
        _inv(1, 0, "enqueue", (1,)),
        _inv(2, 0, "enqueue", (2,)),
        _rsp(1, 0, "enqueue"),
        _rsp(2, 0, "enqueue"),
        _inv(0, 1, "flip"),
    )
    h0 = common + (
        _rsp(0, 1, "flip", 0),
        _inv(0, 0, "dequeue"),
        _rsp(0, 0, "dequeue", 1),
    )
    h1 = common + (
        _rsp(0, 1, "flip", 1),
        _inv(0, 0, "dequeue"),
        _rsp(0, 0, "dequeue", 2),
        _inv(0, 0, "dequeue"),
        _rsp(0, 0, "dequeue", 1),
    )
    runs = {
        (0,): History(h0, (0, 1, 2), objs),
        (1,): History(h1, (0, 1, 2), objs),
    }
    return HistoryTree.from_runs(runs, omega=(0, 1))


def counter_race_tree() -> HistoryTree:
    """Three racing increments; the flip decides which slow one wins."""
    objs = {
        0: ObjectInfo("strong-counter", BASE, (("key", "X"),)),
        1: ObjectInfo("coin", BASE, (("process", 2),)),
    }
    common = (
        _inv(0, 0, "fetch_inc"),
        _inv(1, 0, "fetch_inc"),
        _inv(2, 0, "fetch_inc"),
        _rsp(2, 0, "fetch_inc", 0),
        _inv(2, 1, "flip"),
    )
    h0 = common + (
        _rsp(2, 1, "flip", 0),
        _rsp(0, 0, "fetch_inc", 1),
        _rsp(1, 0, "fetch_inc", 2),
    )
    h1 = common + (
        _rsp(2, 1, "flip", 1),
        _rsp(1, 0, "fetch_inc", 1),
        _rsp(0, 0, "fetch_inc", 2),
    )
    runs = {
        (0,): History(h0, (0, 1, 2), objs),
        (1,): History(h1, (0, 1, 2), objs),
    }
    return HistoryTree.from_runs(runs, omega=(0, 1))


# Completion-order signatures (process, op, ret) for the counter race.
# The early-flip images are the normalized ones; the late-flip images
# place the coin after both slow increments, which forces the branches
# to disagree before any flip resolves.
RACE_LATE_FLIP = {
    0: (
        (2, "fetch_inc", 0),
        (0, "fetch_inc", 1),
        (1, "fetch_inc", 2),
        (2, "flip", 0),
    ),
    1: (
        (2, "fetch_inc", 0),
        (1, "fetch_inc", 1),
        (0, "fetch_inc", 2),
        (2, "flip", 1),
    ),
}
RACE_EARLY_FLIP = {
    0: (
        (2, "fetch_inc", 0),
        (2, "flip", 0),
        (0, "fetch_inc", 1),
        (1, "fetch_inc", 2),
    ),
    1: (
        (2, "fetch_inc", 0),
        (2, "flip", 1),
        (1, "fetch_inc", 1),
        (0, "fetch_inc", 2),
    ),
}


def race_program() -> AlgorithmSpec:
    """Atomic counterpart of the counter race, for schedulability search."""

    def make_program(pid: int) -> Any:
        def racer() -> Any:
            yield ("invoke", "X", "fetch_inc", ())
            yield ("flip",)
            return None

        def one() -> Any:
            yield ("invoke", "X", "fetch_inc", ())
            return None

        return racer() if pid == 2 else one()

    from .objects import counter_spec

    return AlgorithmSpec(
        (0, 1, 2), (Binding("X", spec=counter_spec(0)),), make_program, (0, 1)
    )


def completion_signature(h: History) -> tuple[tuple[int, str, Any], ...]:
    """(process, op, ret) triples in response order, coins included."""
    return tuple(
        (s.process, s.op, s.payload) for s in h.steps if s.is_rsp()
    )


def coschedulable(targets: Mapping[int, tuple]) -> bool:
    """Can one strong adversary realize every target image on its branch?"""
    alg = race_program()

    def leaf_ok(rec: RunRecord, coins: tuple) -> bool:
        if set(rec.returns) != set(alg.processes):
            return False
        return completion_signature(interpret(rec.history)) == targets[coins[0]]

    found = exists_adversary(alg, (0, 1), leaf_ok, klass="strong", grant_cap=8)
    return found is not None


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


CSV_COLUMNS = (
    "experiment",
    "variant",
    "metric",
    "value",
    "ci95",
    "expected",
    "citation",
    "verdict",
)


@dataclass(frozen=True)
class Row:
    experiment: str
    variant: str
    metric: str
    value: str
    ci95: str
    expected: str
    citation: str
    verdict: str


@dataclass(frozen=True)
class Report:
    experiment: str
    config: tuple[tuple[str, Any], ...]
    rows: tuple[Row, ...]

    @property
    def ok(self) -> bool:
        return all(r.verdict == "ok" for r in self.rows)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([getattr(r, c) for c in CSV_COLUMNS])
        return out.getvalue()

    def to_json(self) -> str:
        doc = {
            "experiment": self.experiment,
            "config": dict(self.config),
            "rows": [
                {c: getattr(r, c) for c in CSV_COLUMNS} for r in self.rows
            ],
            "ok": self.ok,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# Expected values for every exact claim, keyed (experiment, variant,
# metric).  The citation says why the number is what it is; the runners
# never recompute an expected value inline.
EXPECTED: dict[tuple[str, str, str], tuple[str, str]] = {
    ("snapshot", "atomic-strong", "min-expected-scan-sum"): (
        "-1",
        "after the flip a strong scheduler reads 6 or -8 at will: (6-8)/2",
    ),
    ("snapshot", "atomic-weak", "min-expected-scan-sum"): (
        "0",
        "the flip grant carries q's next update with it, so the scan "
        "lands on 8c or on a coin-independent prefix; both average 0",
    ),
    ("snapshot", "implemented-weak", "expected-scan-sum"): (
        "-2",
        "double-collect scan borrows r's embedded view on one branch "
        "and directly collects -8 and 2 on the other: (2-6)/2",
    ),
    ("srsw-register", "atomic-strong", "min-expected-read"): (
        "1",
        "the read commits before, between, or after whole writes; the "
        "initial 1 and the coin average 1 are the cheapest options",
    ),
    ("srsw-register", "implemented-oblivious", "expected-read"): (
        "1/2",
        "a fixed schedule catches the downward re-check between the two "
        "writes: the read returns 0 or 1 with equal probability",
    ),
    ("mrsw-register", "atomic-strong", "min-expected-read"): (
        "0",
        "pinning r1's read before the first write returns the initial 0 "
        "on every branch; any later slot averages at least 0",
    ),
    ("mrsw-register", "implemented-weak", "expected-read"): (
        "-1/2",
        "r1 samples the writer's cell early; r2 relays -1 into r1's "
        "remaining reads on one branch only: (0-1)/2",
    ),
    ("hw-queue", "implemented-weak", "success-probability"): (
        "1",
        "holding q0's array write back lets the first dequeue return "
        "whichever of 0 and 1 matches the flip",
    ),
    ("hw-queue", "atomic-strong", "max-success-probability"): (
        "1/2",
        "the queue front is fixed before the flip, so the first dequeue "
        "matches the coin half the time at best",
    ),
    ("hw-queue", "atomic-strong", "max-success-probability-unordered"): (
        "1/2",
        "dropping the 1-before-2 goal does not unpin the front: the "
        "racer's own enqueue precedes its flip",
    ),
    ("strong-lin-suite", "mutex-counter", "witness"): (
        "witness",
        "lock-based operations take effect at the acquire, which is "
        "forward-stable under extension",
    ),
    ("strong-lin-suite", "hw-atomic-dequeues", "witness"): (
        "none",
        "overlapping enqueues force a dequeue order to commit before "
        "the flip, and each branch demands the opposite order",
    ),
    ("strong-lin-suite", "counter-race", "normalized-images"): (
        "match",
        "pulling each flip to its earliest order-respecting slot yields "
        "the early-flip images on both branches",
    ),
    ("strong-lin-suite", "counter-race", "schedulability-split"): (
        "split",
        "one strong adversary replays both early-flip images but no "
        "strong adversary replays the late-flip pair",
    ),
}


def _exact_row(experiment: str, variant: str, metric: str, value: Fraction) -> Row:
    expected, citation = EXPECTED[(experiment, variant, metric)]
    got = str(Fraction(value))
    verdict = "ok" if got == expected else "fail"
    return Row(experiment, variant, metric, got, "", expected, citation, verdict)


def _flag_row(experiment: str, variant: str, metric: str, value: str) -> Row:
    expected, citation = EXPECTED[(experiment, variant, metric)]
    verdict = "ok" if value == expected else "fail"
    return Row(experiment, variant, metric, value, "", expected, citation, verdict)


# ---------------------------------------------------------------------------
# Named experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    n: int = 16
    delta: float = 0.5
    trials: int = 200
    seed: int = 0
    budget: int = 10_000
    threads: int = 1

    def echo(self) -> tuple[tuple[str, Any], ...]:
        return (
            ("name", self.name),
            ("n", self.n),
            ("delta", self.delta),
            ("trials", self.trials),
            ("seed", self.seed),
            ("budget", self.budget),
            ("threads", self.threads),
        )


def _example_report(cfg: ExperimentConfig) -> Report:
    ex = EXAMPLES[cfg.name]()
    rows: list[Row] = []
    if cfg.name == "snapshot":
        rows.append(
            _exact_row("snapshot", "atomic-strong", "min-expected-scan-sum",
                       atomic_value(ex, klass="strong"))
        )
        rows.append(
            _exact_row("snapshot", "atomic-weak", "min-expected-scan-sum",
                       atomic_value(ex, klass="weak"))
        )
        rows.append(
            _exact_row("snapshot", "implemented-weak", "expected-scan-sum",
                       implemented_value(ex, cfg.budget))
        )
    elif cfg.name == "srsw-register":
        rows.append(
            _exact_row("srsw-register", "atomic-strong", "min-expected-read",
                       atomic_value(ex, klass="strong"))
        )
        rows.append(
            _exact_row("srsw-register", "implemented-oblivious", "expected-read",
                       implemented_value(ex, cfg.budget))
        )
    elif cfg.name == "mrsw-register":
        rows.append(
            _exact_row("mrsw-register", "atomic-strong", "min-expected-read",
                       atomic_value(ex, klass="strong"))
        )
        rows.append(
            _exact_row("mrsw-register", "implemented-weak", "expected-read",
                       implemented_value(ex, cfg.budget))
        )
    else:
        probs = queue_adversary_experiment()
        rows.append(
            _exact_row("hw-queue", "implemented-weak", "success-probability",
                       probs["implemented-weak"])
        )
        rows.append(
            _exact_row("hw-queue", "atomic-strong", "max-success-probability",
                       probs["atomic-strong-max"])
        )
        rows.append(
            _exact_row("hw-queue", "atomic-strong",
                       "max-success-probability-unordered",
                       probs["atomic-strong-max-unordered"])
        )
    return Report(cfg.name, cfg.echo(), tuple(rows))


def _phi_row(
    variant: str,
    est: Any,
    bound: Fraction,
    side: str,
    citation: str,
) -> Row:
    value = f"{est.mean:.6f}"
    ci = f"{est.ci95:.6f}"
    if est.flags:
        verdict = "inconclusive"
    elif side == "below":
        verdict = "ok" if est.mean <= float(bound) + 3 * est.ci95 else "fail"
    else:
        verdict = "ok" if est.mean - est.ci95 > float(bound) else "fail"
    return Row(
        "loadbalance", variant, "phi-estimate", value, ci, str(bound),
        citation, verdict,
    )


def _loadbalance_report(cfg: ExperimentConfig) -> Report:
    n = cfg.n
    if isqrt(n) ** 2 != n:
        raise ExperimentError(f"loadbalance needs a square process count, got {n}")
    k_max = k_max_for(n, cfg.delta)
    bound = Fraction(k_max - 1, isqrt(n))
    below = (
        "with atomic counters no weak adversary pushes the mean return "
        "past (k_max-1)/sqrt(n)"
    )
    above = (
        "against these strongly linearizable counters the two-phase "
        "adversary drives the target's return past the atomic bound"
    )
    rows: list[Row] = []
    atomic = loadbalance_algorithm(n, "atomic")
    families: dict[str, Callable[[int], AdversaryPolicy]] = {
        "two-phase": lambda p: adversary_ap(p, n)
    }
    families.update(scripted_weak_families(n, k_max))
    for fam_name in sorted(families):
        est = estimate_phi(
            atomic, families[fam_name], k_max, cfg.trials, cfg.seed, cfg.budget
        )
        rows.append(_phi_row(f"atomic-{fam_name}", est, bound, "below", below))
    for kind in ("llsc", "writefirst"):
        alg = loadbalance_algorithm(n, kind)
        est = estimate_phi(
            alg, lambda p: adversary_ap(p, n), k_max, cfg.trials, cfg.seed, cfg.budget
        )
        rows.append(_phi_row(f"{kind}-two-phase", est, bound, "above", above))
    return Report("loadbalance", cfg.echo(), tuple(rows))


def _suite_report(cfg: ExperimentConfig) -> Report:
    rows: list[Row] = []

    mutex = mutex_counter_tree()
    specs = default_specs(mutex.objects, mutex.processes)
    witness = check_strong_lin(mutex, specs)
    if witness is not None and witness_violations(mutex, witness, specs):
        witness = None
    rows.append(
        _flag_row("strong-lin-suite", "mutex-counter", "witness",
                  "none" if witness is None else "witness")
    )

    hw = hw_atomic_dequeue_tree()
    hw_witness = check_strong_lin(hw, default_specs(hw.objects, hw.processes))
    rows.append(
        _flag_row("strong-lin-suite", "hw-atomic-dequeues", "witness",
                  "none" if hw_witness is None else "witness")
    )

    race = counter_race_tree()
    race_specs = default_specs(race.objects, race.processes)
    race_witness = check_strong_lin(race, race_specs)
    normalized_match = "mismatch"
    if race_witness is not None:
        norm = normalize_witness(race, race_witness, race_specs)
        images = {}
        for leaf in race.leaves():
            sig = completion_signature(
                History(
                    tuple(_image_steps(norm[leaf])),
                    race.processes,
                    race.objects,
                )
            )
            flips = [r for p, o, r in sig if o == "flip"]
            images[flips[0]] = sig
        if images == dict(RACE_EARLY_FLIP):
            normalized_match = "match"
    rows.append(
        _flag_row("strong-lin-suite", "counter-race", "normalized-images",
                  normalized_match)
    )

    split = (
        not coschedulable(RACE_LATE_FLIP) and coschedulable(RACE_EARLY_FLIP)
    )
    rows.append(
        _flag_row("strong-lin-suite", "counter-race", "schedulability-split",
                  "split" if split else "no-split")
    )
    return Report("strong-lin-suite", cfg.echo(), tuple(rows))


def _image_steps(image: tuple) -> list[Step]:
    steps: list[Step] = []
    for e in image:
        steps.append(Step(INV, e.process, e.obj, e.op, e.args, BASE))
        steps.append(Step(RSP, e.process, e.obj, e.op, e.ret, BASE))
    return steps


EXPERIMENT_NAMES = (
    "snapshot",
    "srsw-register",
    "mrsw-register",
    "hw-queue",
    "loadbalance",
    "strong-lin-suite",
)


def run_named_experiment(cfg: ExperimentConfig) -> Report:
    """Execute one named experiment and attach verdicts to every row."""
    if cfg.name in EXAMPLES:
        return _example_report(cfg)
    if cfg.name == "loadbalance":
        return _loadbalance_report(cfg)
    if cfg.name == "strong-lin-suite":
        return _suite_report(cfg)
    raise ExperimentError(
        f"unknown experiment {cfg.name!r}; names: {', '.join(EXPERIMENT_NAMES)}"
    )
