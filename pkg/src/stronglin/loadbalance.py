"""Load balancing over randomly chosen counters, and the schedules that skew it.

Each of n processes picks one of sqrt(n) shared strong counters uniformly at
random, increments it, reads the prior value, and decrements again.  With
atomic counters no weak adversary can push the expected increment result of
any process above (k_max - 1) / sqrt(n) once runs whose point contention
exceeds k_max are discarded.  With counters implemented from registers and
LL/SC, the hand-built two-phase adversary built here drives the same
expectation to the order of sqrt(n).

The estimator in this module reports the averaged quantity E[X] over a
uniformly random target process and coin assignment, which lower-bounds the
max-over-processes definition; the atomic upper bound holds per process, so
the averaged estimate is comparable against it on both sides.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from math import ceil, isqrt, sqrt
from typing import Any, Callable, Mapping

from .engine import (
    DEFAULT_BUDGET,
    AdversaryPolicy,
    AlgorithmSpec,
    Binding,
    EngineError,
    PerProcessCoins,
    RunRecord,
    derive_mark_state,
    run,
)
from .histories import BASE, INV, RSP, Step
from .objects import counter_spec, llsc_strong_counter, writefirst_strong_counter

COUNTER_KINDS = ("atomic", "llsc", "writefirst")


def counter_key(i: int) -> str:
    return f"F{i}"


def loadbalance_algorithm(n: int, counters: str = "atomic") -> AlgorithmSpec:
    """The balancing algorithm over sqrt(n) strong counters.

    ``counters`` picks the counter flavour: "atomic" (a plain sequential
    spec), "llsc" (lock-free, LL is the first shared access of every
    operation) or "writefirst" (announces into a shared pool before the
    LL/SC loop, so the first shared access is a write).
    """
    m = isqrt(n)
    if m * m != n or n < 1:
        raise ValueError(f"process count must be a perfect square, got {n}")
    if counters not in COUNTER_KINDS:
        raise ValueError(f"unknown counter kind {counters!r}")

    def make_binding(i: int) -> Binding:
        key = counter_key(i)
        if counters == "atomic":
            return Binding(key, spec=counter_spec(0))
        if counters == "llsc":
            return Binding(key, impl=llsc_strong_counter())
        return Binding(key, impl=writefirst_strong_counter(n))

    def program(p: int):
        i = yield ("flip",)
        x = yield ("invoke", counter_key(i), "fetch_inc", ())
        yield ("invoke", counter_key(i), "fetch_dec", ())
        return x

    return AlgorithmSpec(
        processes=tuple(range(n)),
        bindings=tuple(make_binding(i) for i in range(m)),
        make_program=lambda p: program(p),
        omega=tuple(range(m)),
    )


# ---------------------------------------------------------------------------
# Reading runs back
# ---------------------------------------------------------------------------


def _owner_index(info) -> int | None:
    """Counter index owning an object, or None for coins and the like."""
    if info.type_name == "coin":
        return None
    params = dict(info.params)
    key = params.get("owner", params.get("key"))
    if key is None:
        return None
    return int(key[1:])


def _is_shared_access(step: Step, objects) -> bool:
    return (
        step.kind == RSP
        and step.level == BASE
        and objects[step.obj].type_name != "coin"
    )


def fai_return(rec: RunRecord, q: int) -> int | None:
    """Return value of q's fetch&inc, or None if it never completed."""
    for s in rec.history.steps:
        if s.kind == RSP and s.process == q and s.op == "fetch_inc":
            return s.payload
    return None


def _fai_done_index(steps, q: int) -> int | None:
    for k, s in enumerate(steps):
        if s.kind == RSP and s.process == q and s.op == "fetch_inc":
            return k
    return None


@dataclass(frozen=True)
class ApReport:
    """What the two-phase adversary saw, reconstructed from the history."""

    target: int
    i_star: int
    counter_of: Mapping[int, int]
    config_index: int
    case: int
    writers: frozenset
    sees_target: frozenset
    accesses_at_config: Mapping[int, int]

    @property
    def stalled_group(self) -> frozenset:
        return frozenset(
            q for q, i in self.counter_of.items() if i == self.i_star
        )


def ap_run_report(rec: RunRecord, p: int) -> ApReport:
    """Reconstruct configuration C of a run scheduled by the two-phase
    adversary: the earliest point where every process on the target's
    counter has taken its first shared step and everyone else is done.
    """
    steps = rec.history.steps
    objects = rec.history.objects
    first: dict[int, tuple[int, Step]] = {}
    counter_of: dict[int, int] = {}
    dec_done: dict[int, int] = {}
    for k, s in enumerate(steps):
        if _is_shared_access(s, objects) and s.process not in first:
            first[s.process] = (k, s)
            idx = _owner_index(objects[s.obj])
            if idx is None:
                raise EngineError(f"shared access on unowned object {s.obj}")
            counter_of[s.process] = idx
        if s.kind == RSP and s.op == "fetch_dec" and s.process not in dec_done:
            dec_done[s.process] = k
    if p not in counter_of:
        raise EngineError(f"target process {p} never accessed shared memory")
    i_star = counter_of[p]
    group = {q for q, i in counter_of.items() if i == i_star}
    outside = [q for q in rec.history.processes if counter_of.get(q) != i_star]
    marker_events = [first[q][0] for q in group]
    marker_events += [dec_done[q] for q in outside if q in dec_done]
    if any(q not in dec_done for q in outside) or any(
        q not in first for q in group
    ):
        raise EngineError("phase 1 never completed")
    config_index = max(marker_events)
    prefix = rec.history.prefix(config_index + 1)
    state = derive_mark_state(prefix)
    visible = p in dict(state.marks).values()
    writers = frozenset(q for q in group if first[q][1].op == "write")
    sees_target = frozenset(q for (q, x) in state.sees if x == p)
    accesses = {
        q: sum(
            1
            for s in prefix.steps
            if _is_shared_access(s, objects) and s.process == q
        )
        for q in group
    }
    return ApReport(
        target=p,
        i_star=i_star,
        counter_of=counter_of,
        config_index=config_index,
        case=1 if visible else 2,
        writers=writers,
        sees_target=sees_target,
        accesses_at_config=accesses,
    )


def assert_ap_invariants(rec: RunRecord, p: int) -> ApReport:
    """Certify the two-phase adversary's guarantees on one run.

    Checks the phase-1 postcondition (at configuration C every process in
    the target's counter group has made exactly one shared access and
    everyone else has finished), the contention cap |group| + 1, the
    case-1 sanity condition that a visible target was a writer, and the
    helper bound: whenever every process of a set P other than the target
    completes its fetch&inc on the target's counter, nobody ever invokes
    fetch&dec there, and no member of P sees a process outside P, then
    the target's fetch&inc must return at least |P|.
    """
    report = ap_run_report(rec, p)
    group = report.stalled_group
    for q in group:
        if report.accesses_at_config[q] != 1:
            raise EngineError(
                f"process {q} made {report.accesses_at_config[q]} shared "
                "accesses before configuration C"
            )
    if rec.max_point_contention > len(group) + 1:
        raise EngineError(
            f"contention {rec.max_point_contention} exceeds {len(group) + 1}"
        )
    if report.case == 1 and p not in report.writers:
        raise EngineError("target visible at C but its first access was no write")
    _assert_helper_bound(rec, report)
    return report


def _assert_helper_bound(rec: RunRecord, report: ApReport) -> None:
    steps = rec.history.steps
    objects = rec.history.objects
    p, i_star = report.target, report.i_star
    register_ops = {"read", "write", "ll", "sc"}
    for s in steps:
        if (
            s.level == BASE
            and objects[s.obj].type_name != "coin"
            and s.op not in register_ops
        ):
            # The sees relation only tracks information flow through
            # registers; with other base primitives a process can learn
            # about p without ever being recorded as seeing it.
            return
    finishers = {
        q
        for q in report.counter_of
        if report.counter_of[q] == i_star
        and fai_return(rec, q) is not None
        and q != p
    }
    if fai_return(rec, p) is None:
        return
    dec_invoked = any(
        s.op == "fetch_dec"
        and s.kind == INV
        and _owner_index(objects[s.obj]) == i_star
        for s in steps
    )
    if dec_invoked:
        return
    sees = rec.mark_state.sees
    outside_seen = any(
        q in finishers and x not in finishers for (q, x) in sees
    )
    if outside_seen:
        return
    got = fai_return(rec, p)
    if got < len(finishers):
        raise EngineError(
            f"certified run returned {got} < |P| = {len(finishers)}"
        )


# ---------------------------------------------------------------------------
# The two-phase adversary
# ---------------------------------------------------------------------------


def adversary_ap(p: int, n: int) -> AdversaryPolicy:
    """Weak adversary targeting process p in the n-process algorithm.

    Phase 1: p runs to its first shared access (revealing its counter
    i*), then each other process in ID order runs to its first shared
    access and either continues solo to completion (different counter) or
    stalls (same counter).  Phase 2 branches on whether p is visible at
    the resulting configuration: if so, the first-step writers of the
    group round-robin to the end of their fetch&inc calls; if not, the
    group minus everyone who saw p round-robins to the end of fetch&inc,
    and finally p itself finishes its fetch&inc.  Nobody the adversary
    stops ever starts a fetch&dec.
    """
    if not 0 <= p < n:
        raise ValueError(f"target process {p} out of range for n={n}")
    others = tuple(q for q in range(n) if q != p)

    def make_decide():
        seen = 0
        first: dict[int, tuple[int, str]] = {}
        fai_done: set[int] = set()
        phase = "target"
        probe_pos = 0
        i_star: int | None = None
        rr: list[int] = []
        rr_pos = 0
        case = 0

        def ingest(view) -> None:
            nonlocal seen
            steps = view.steps
            objects = view.objects
            while seen < len(steps):
                s = steps[seen]
                seen += 1
                if s.kind == RSP and s.op == "fetch_inc":
                    fai_done.add(s.process)
                if _is_shared_access(s, objects) and s.process not in first:
                    idx = _owner_index(objects[s.obj])
                    if idx is not None:
                        first[s.process] = (idx, s.op)

        def enter_phase2(view) -> None:
            nonlocal phase, rr, case
            group = [q for q in range(n) if first.get(q, (None,))[0] == i_star]
            if p in dict(view.marks).values():
                case = 1
                rr = sorted(q for q in group if first[q][1] == "write")
            else:
                case = 2
                saw_p = {q for (q, x) in view.sees if x == p}
                rr = sorted(set(group) - saw_p - {p})
            phase = "round-robin"

        def decide(view):
            nonlocal phase, probe_pos, i_star, rr_pos
            ingest(view)
            if phase == "target":
                if p not in first:
                    return p
                i_star = first[p][0]
                phase = "probe"
            if phase == "probe":
                while probe_pos < len(others):
                    q = others[probe_pos]
                    if q not in first:
                        return q
                    if first[q][0] != i_star and not view.finished(q):
                        return q
                    probe_pos += 1
                enter_phase2(view)
            if phase == "round-robin":
                for _ in range(len(rr)):
                    q = rr[rr_pos % len(rr)] if rr else None
                    rr_pos += 1
                    if q is not None and q not in fai_done:
                        return q
                phase = "final" if case == 2 else "done"
            if phase == "final":
                if p not in fai_done:
                    return p
                phase = "done"
            return None

        return decide

    return AdversaryPolicy("weak", make_decide=make_decide, name=f"A_p[{p}]")


# ---------------------------------------------------------------------------
# Scripted weak schedules
# ---------------------------------------------------------------------------


def round_robin_policy(n: int) -> AdversaryPolicy:
    """Everyone takes turns in ID order until all are done."""

    def make_decide():
        pos = 0

        def decide(view):
            nonlocal pos
            for _ in range(n):
                q = pos % n
                pos += 1
                if not view.finished(q):
                    return q
            return None

        return decide

    return AdversaryPolicy("weak", make_decide=make_decide, name="round-robin")


def solo_sequential_policy(n: int) -> AdversaryPolicy:
    """Processes run one after the other, each to completion."""

    def make_decide():
        def decide(view):
            for q in range(n):
                if not view.finished(q):
                    return q
            return None

        return decide

    return AdversaryPolicy(
        "weak", make_decide=make_decide, name="solo-sequential"
    )


def stagger_policy(n: int, batch: int) -> AdversaryPolicy:
    """Round-robin within ID-ordered batches of the given size; a batch
    must finish before the next one starts, capping contention at the
    batch size."""
    if batch < 1:
        raise ValueError("batch size must be positive")

    def make_decide():
        pos = 0

        def decide(view):
            nonlocal pos
            for start in range(0, n, batch):
                alive = [
                    q for q in range(start, min(start + batch, n))
                    if not view.finished(q)
                ]
                if alive:
                    pos += 1
                    return alive[pos % len(alive)]
            return None

        return decide

    return AdversaryPolicy(
        "weak", make_decide=make_decide, name=f"stagger[{batch}]"
    )


def scripted_weak_families(n: int, k_max: int) -> dict[str, Callable[[int], AdversaryPolicy]]:
    """Three fixed weak schedules, packaged as (target-independent)
    per-process families for the estimator."""
    return {
        "round-robin": lambda p: round_robin_policy(n),
        "solo-sequential": lambda p: solo_sequential_policy(n),
        "stagger": lambda p: stagger_policy(n, k_max),
    }


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhiEstimate:
    mean: float
    variance: float
    ci95: float
    trials: int
    seed: int
    k_max: int
    flags: tuple[str, ...]
    histogram: tuple[tuple[int, int], ...]

    def as_json_dict(self) -> dict[str, Any]:
        return {
            "mean": self.mean,
            "variance": self.variance,
            "ci95": self.ci95,
            "trials": self.trials,
            "seed": self.seed,
            "k_max": self.k_max,
            "flags": list(self.flags),
            "histogram": {str(c): v for c, v in self.histogram},
        }


def estimate_phi(
    alg: AlgorithmSpec,
    adv_family: Callable[[int], AdversaryPolicy],
    k_max: int,
    trials: int,
    seed: int,
    budget: int = DEFAULT_BUDGET,
) -> PhiEstimate:
    """Monte Carlo estimate of the expected balanced-load score.

    Per trial: draw one coin per process and a target process uniformly
    (seeded; trial streams are independent), run under the family's
    policy for that target, and score the target's fetch&inc return, or
    0 when contention exceeded k_max or the call never finished.  Runs
    under the two-phase adversary are additionally certified against its
    structural invariants.  Deterministic given (alg, family, seed).
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    n = len(alg.processes)
    m = len(alg.omega)
    xs: list[int] = []
    flags: set[str] = set()
    hist: dict[int, int] = {}
    for t in range(trials):
        rng = random.Random(f"{seed}:{t}")
        coins = PerProcessCoins(
            {q: (rng.randrange(m),) for q in alg.processes}
        )
        target = rng.randrange(n)
        adv = adv_family(target)
        rec = run(alg, adv, coins, budget=budget)
        cont = rec.max_point_contention
        hist[cont] = hist.get(cont, 0) + 1
        x = fai_return(rec, target)
        if "budget-exhausted" in rec.flags:
            flags.add("budget-exhausted")
            x = 0
        elif x is None:
            flags.add("fai-incomplete")
            x = 0
        elif cont > k_max:
            x = 0
        if adv.name.startswith("A_p"):
            assert_ap_invariants(rec, target)
        xs.append(x)
    mean = sum(xs) / trials
    var = (
        sum((x - mean) ** 2 for x in xs) / (trials - 1) if trials > 1 else 0.0
    )
    return PhiEstimate(
        mean=mean,
        variance=var,
        ci95=1.96 * sqrt(var / trials),
        trials=trials,
        seed=seed,
        k_max=k_max,
        flags=tuple(sorted(flags)),
        histogram=tuple(sorted(hist.items())),
    )


def k_max_for(n: int, delta: float = 0.5) -> int:
    """Contention cap: smallest integer at least (1 + delta) * sqrt(n)."""
    m = isqrt(n)
    if m * m != n:
        raise ValueError(f"process count must be a perfect square, got {n}")
    return ceil((1 + delta) * m)
