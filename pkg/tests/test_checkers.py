"""History trees, witness search and validation, normalization, points,
locality, and run-set equivalence."""

import itertools
import json
import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stronglin.checkers import (
    CheckerError,
    HistoryTree,
    ImageOp,
    TreeError,
    check_equivalence,
    check_locality,
    check_strong_lin,
    common_linearization,
    default_specs,
    extract_linearization_points,
    image_history,
    linearize_one,
    normality_violations,
    normalize_witness,
    project_tree,
    render_witness,
    timed_linearization,
    validate_witness,
    witness_violations,
)
from stronglin.engine import (
    AdversaryPolicy,
    AlgorithmSpec,
    Binding,
    VectorCoins,
    run,
    scripted_policy,
)
from stronglin.histories import (
    ANY_RESPONSE,
    BASE,
    BOTTOM,
    INTERPRETED,
    INV,
    RSP,
    History,
    ObjectInfo,
    Step,
    interpret,
    timed_from_history,
    validate_sequential,
)
from stronglin.objects import (
    cas_from_registers,
    counter_spec,
    mutex_wrapped,
    queue_spec,
    register_spec,
)


def inv(p, obj, op, args=()):
    return Step(INV, p, obj, op, args, BASE)


def rsp(p, obj, op, ret=None):
    return Step(RSP, p, obj, op, ret, BASE)


REG_OBJS = {
    0: ObjectInfo("register", BASE, (("key", "R"),)),
    1: ObjectInfo("coin", BASE, (("process", 0),)),
}
QUEUE_OBJS = {
    0: ObjectInfo("queue", BASE, (("key", "Q"),)),
    1: ObjectInfo("coin", BASE, (("process", 0),)),
}


# ---------------------------------------------------------------------------
# Engine fixtures
# ---------------------------------------------------------------------------


def write_flip_read_alg():
    def make_program(pid):
        def prog():
            if pid == 0:
                yield ("invoke", "R", "write", (5,))
                c = yield ("flip",)
                r = yield ("invoke", "R", "read", ())
                return (c, r)
            r = yield ("invoke", "R", "read", ())
            return r

        return prog()

    return AlgorithmSpec(
        (0, 1), (Binding("R", spec=register_spec()),), make_program, omega=(0, 1)
    )


def write_flip_read_tree():
    alg = write_flip_read_alg()
    runs = {
        (c,): run(alg, scripted_policy("strong", [0, 0, 1, 0]), VectorCoins([c]))
        for c in (0, 1)
    }
    return HistoryTree.from_runs(runs, omega=(0, 1))


def finish_in_order(order):
    """A strong policy that drains each process to completion in turn."""

    def make_decide():
        queue = list(order)

        def decide(view):
            while queue and view.finished(queue[0]):
                queue.pop(0)
            return queue[0] if queue else None

        return decide

    return AdversaryPolicy("strong", make_decide=make_decide, name="in-order")


def mutex_counter_runs():
    def make_program(pid):
        def prog():
            if pid == 0:
                a = yield ("invoke", "C1", "fetch_inc", ())
                c = yield ("flip",)
                b = yield ("invoke", "C2", "fetch_inc", ())
                return (a, c, b)
            r = yield ("invoke", "C2", "fetch_inc", ())
            return r

        return prog()

    alg = AlgorithmSpec(
        (0, 1),
        (
            Binding("C1", impl=mutex_wrapped(counter_spec())),
            Binding("C2", impl=mutex_wrapped(counter_spec())),
        ),
        make_program,
        omega=(0, 1),
    )
    return {(c,): run(alg, finish_in_order([0, 1]), VectorCoins([c])) for c in (0, 1)}


# ---------------------------------------------------------------------------
# Tree construction
# ---------------------------------------------------------------------------


def test_from_runs_builds_flip_branching_tree():
    tree = write_flip_read_tree()
    assert len(tree) == 14
    assert tree.node_ids() == tuple(range(14))
    branch = [n for n in tree.node_ids() if len(tree.children(n)) == 2]
    assert len(branch) == 1
    outcomes = sorted(
        tree.step(c).payload for c in tree.children(branch[0])
    )
    assert outcomes == [0, 1]
    assert len(tree.leaves()) == 2


def test_history_of_is_prefix_monotone():
    tree = write_flip_read_tree()
    for nid in tree.node_ids():
        pid = tree.parent(nid)
        if pid is not None:
            assert tree.history_of(pid).is_prefix_of(tree.history_of(nid))


def test_from_runs_rejects_divergence_at_non_flip():
    h1 = History((inv(0, 0, "write", (1,)),), (0,), REG_OBJS)
    h2 = History((inv(0, 0, "write", (2,)),), (0,), REG_OBJS)
    with pytest.raises(TreeError):
        HistoryTree.from_runs({(0,): h1, (1,): h2})


def test_from_runs_omega_coverage_enforced():
    tree_runs = {
        (c,): History(
            (inv(0, 1, "flip"), rsp(0, 1, "flip", c)), (0,), REG_OBJS
        )
        for c in (0, 1)
    }
    HistoryTree.from_runs(tree_runs, omega=(0, 1))
    with pytest.raises(TreeError):
        HistoryTree.from_runs(tree_runs, omega=(0, 1, 2))
    with pytest.raises(TreeError):
        HistoryTree.from_runs({(0,): tree_runs[(0,)]}, omega=(0, 1))


def test_json_round_trip_is_byte_identical():
    tree = write_flip_read_tree()
    text = tree.to_json()
    again = HistoryTree.from_json(text)
    assert again.to_json() == text
    assert len(again) == len(tree)
    for nid in tree.node_ids():
        assert again.step(nid) == tree.step(nid)


def test_from_json_rejects_malformed_trees():
    with pytest.raises(TreeError):
        HistoryTree.from_json("{nope")
    objs = {"0": {"type": "register", "level": BASE, "params": {"key": "R"}}}
    base = {"processes": [0], "objects": objs}

    def doc(nodes):
        return json.dumps({**base, "nodes": nodes})

    step = {
        "kind": INV,
        "process": 0,
        "object": 0,
        "op": "write",
        "payload": [1],
        "level": BASE,
    }
    with pytest.raises(TreeError):  # parent after child
        HistoryTree.from_json(doc([{"id": 0, "parent": None, "step": None},
                                   {"id": 2, "parent": 3, "step": step}]))
    with pytest.raises(TreeError):  # duplicate id
        HistoryTree.from_json(doc([{"id": 0, "parent": None, "step": None},
                                   {"id": 1, "parent": 0, "step": step},
                                   {"id": 1, "parent": 0, "step": step}]))
    with pytest.raises(TreeError):  # branch on a non-flip step
        HistoryTree.from_json(doc([
            {"id": 0, "parent": None, "step": None},
            {"id": 1, "parent": 0, "step": step},
            {"id": 2, "parent": 0, "step": {**step, "payload": [2]}},
        ]))


def test_from_json_rejects_duplicate_branch_outcomes():
    objs = {"0": {"type": "coin", "level": BASE, "params": {"process": 0}}}
    flip = {
        "kind": RSP,
        "process": 0,
        "object": 0,
        "op": "flip",
        "payload": 1,
        "level": BASE,
    }
    text = json.dumps({
        "processes": [0],
        "objects": objs,
        "nodes": [
            {"id": 0, "parent": None, "step": None},
            {"id": 1, "parent": 0,
             "step": {**flip, "kind": INV, "payload": []}},
            {"id": 2, "parent": 1, "step": flip},
            {"id": 3, "parent": 1, "step": flip},
        ],
    })
    with pytest.raises(TreeError):
        HistoryTree.from_json(text)


def test_empty_tree_has_empty_witness():
    tree = HistoryTree.from_json('{"processes": [], "objects": {}, "nodes": []}')
    assert len(tree) == 1
    assert check_strong_lin(tree, {}) == {0: ()}


# ---------------------------------------------------------------------------
# linearize_one against a brute-force oracle
# ---------------------------------------------------------------------------


def brute_linearizable(h, specs):
    """Subset of pendings, then every permutation, then replay."""
    ops = h.operations()
    done = [o for o in ops if o.complete]
    pend = [
        o for o in ops
        if not o.complete and h.objects[o.obj].type_name != "coin"
    ]
    for r in range(len(pend) + 1):
        for extra in itertools.combinations(pend, r):
            for perm in itertools.permutations(done + list(extra)):
                ok = True
                for i, a in enumerate(perm):
                    for b in perm[i + 1:]:
                        if b.rsp_index is not None and b.rsp_index < a.inv_index:
                            ok = False
                if not ok:
                    continue
                states = {}
                for o in perm:
                    spec = specs[o.obj]
                    state = states.get(o.obj, spec.initial_state)
                    state2, resp = spec.transition(state, o.op, o.args, o.process)
                    states[o.obj] = state2
                    if o.complete:
                        if resp is not ANY_RESPONSE and resp != o.ret:
                            ok = False
                            break
                    elif resp is ANY_RESPONSE:
                        ok = False
                        break
                if ok:
                    return True
    return False


@st.composite
def small_histories(draw):
    """Interleaved register and queue traffic with adversarial responses.

    Responses are drawn freely from small pools, so a sizable fraction
    of draws is not linearizable; that is the point.
    """
    flavor = draw(st.sampled_from(["register", "queue"]))
    objs = {0: ObjectInfo(flavor, BASE, (("key", "X"),))}
    nproc = draw(st.integers(min_value=1, max_value=3))
    scripts = []
    total = 0
    for p in range(nproc):
        n = draw(st.integers(min_value=0, max_value=3))
        n = min(n, 6 - total)
        total += n
        ops = []
        for _ in range(n):
            if flavor == "register":
                if draw(st.booleans()):
                    ops.append(("write", (draw(st.integers(1, 2)),), None))
                else:
                    ops.append(("read", (), draw(st.integers(0, 2))))
            else:
                if draw(st.booleans()):
                    ops.append(("enqueue", (draw(st.integers(1, 2)),), None))
                else:
                    ops.append(
                        ("dequeue", (), draw(st.sampled_from([BOTTOM, 1, 2])))
                    )
        scripts.append(ops)
    steps = []
    open_op = {p: None for p in range(nproc)}
    cursor = {p: 0 for p in range(nproc)}
    while True:
        live = [
            p
            for p in range(nproc)
            if open_op[p] is not None or cursor[p] < len(scripts[p])
        ]
        if not live:
            break
        p = draw(st.sampled_from(live))
        if open_op[p] is None:
            op, args, ret = scripts[p][cursor[p]]
            cursor[p] += 1
            steps.append(inv(p, 0, op, args))
            open_op[p] = (op, ret)
        else:
            op, ret = open_op[p]
            if draw(st.booleans()):
                steps.append(rsp(p, 0, op, ret))
            else:
                cursor[p] = len(scripts[p])  # abandon: stays pending forever
            open_op[p] = None
    spec = register_spec() if flavor == "register" else queue_spec()
    return History(tuple(steps), tuple(range(nproc)), objs), {0: spec}


@settings(max_examples=500, deadline=None)
@given(small_histories())
def test_linearize_one_matches_brute_force(case):
    h, specs = case
    got = linearize_one(h, specs)
    assert (got is not None) == brute_linearizable(h, specs)
    if got is not None:
        assert got.is_sequential()
        assert validate_sequential(got, specs)
        # every completed source op must appear (match on process + order)
        per_proc_done = {
            p: sum(1 for o in h.operations() if o.process == p and o.complete)
            for p in h.processes
        }
        per_proc_img = {
            p: sum(1 for o in got.operations() if o.process == p)
            for p in h.processes
        }
        for p in h.processes:
            assert per_proc_img.get(p, 0) >= per_proc_done[p]


def test_linearize_one_pinned_cases():
    # read of a value never written
    h = History(
        (inv(0, 0, "write", (1,)), rsp(0, 0, "write"),
         inv(0, 0, "read"), rsp(0, 0, "read", 7)),
        (0,), REG_OBJS,
    )
    assert linearize_one(h, {0: register_spec()}) is None
    # FIFO violation
    h = History(
        (inv(0, 0, "enqueue", (1,)), rsp(0, 0, "enqueue"),
         inv(0, 0, "enqueue", (2,)), rsp(0, 0, "enqueue"),
         inv(0, 0, "dequeue"), rsp(0, 0, "dequeue", 2)),
        (0,), QUEUE_OBJS,
    )
    assert linearize_one(h, {0: queue_spec()}) is None
    # pending write may be borrowed to explain a read
    h = History(
        (inv(1, 0, "write", (2,)),
         inv(0, 0, "read"), rsp(0, 0, "read", 2)),
        (0, 1), REG_OBJS,
    )
    got = linearize_one(h, {0: register_spec()})
    assert got is not None
    assert [s.payload for s in got.steps if s.is_rsp()] == [None, 2]


# ---------------------------------------------------------------------------
# Witness search
# ---------------------------------------------------------------------------


def test_register_flip_tree_has_witness():
    tree = write_flip_read_tree()
    specs = default_specs(tree.objects, tree.processes)
    w = check_strong_lin(tree, specs)
    assert w is not None
    assert set(w) == set(tree.node_ids())
    assert witness_violations(tree, w, specs) == []
    # root image is empty, leaf images carry everything completed
    assert w[0] == ()
    for leaf in tree.leaves():
        done = sum(1 for o in tree.ops_of(leaf) if o.complete)
        assert len(w[leaf]) >= done


@settings(max_examples=200, deadline=None)
@given(small_histories())
def test_single_path_tree_agrees_with_linearize_one(case):
    h, specs = case
    tree = HistoryTree.from_runs({(0,): h})
    w = check_strong_lin(tree, specs)
    lin = linearize_one(h, specs)
    assert (w is None) == (lin is None)
    if w is not None:
        assert witness_violations(tree, w, specs) == []


def committed_enqueue_tree():
    """Two completed concurrent enqueues, then a flip whose branches
    demand opposite dequeue orders.  Each leaf linearizes on its own,
    but no image for the shared prefix survives both branches."""
    objs = {
        0: ObjectInfo("queue", BASE, (("key", "Q"),)),
        1: ObjectInfo("coin", BASE, (("process", 0),)),
    }
    common = (
        inv(1, 0, "enqueue", (1,)),
        inv(2, 0, "enqueue", (2,)),
        rsp(1, 0, "enqueue"),
        rsp(2, 0, "enqueue"),
        inv(0, 1, "flip"),
    )
    h0 = common + (
        rsp(0, 1, "flip", 0),
        inv(0, 0, "dequeue"), rsp(0, 0, "dequeue", 1),
    )
    h1 = common + (
        rsp(0, 1, "flip", 1),
        inv(0, 0, "dequeue"), rsp(0, 0, "dequeue", 2),
        inv(0, 0, "dequeue"), rsp(0, 0, "dequeue", 1),
    )
    runs = {
        (0,): History(h0, (0, 1, 2), objs),
        (1,): History(h1, (0, 1, 2), objs),
    }
    return HistoryTree.from_runs(runs, omega=(0, 1))


def test_committed_enqueues_defeat_every_witness():
    tree = committed_enqueue_tree()
    specs = default_specs(tree.objects, tree.processes)
    for leaf in tree.leaves():
        assert linearize_one(tree.history_of(leaf), specs) is not None
    assert check_strong_lin(tree, specs) is None


def test_tampered_witnesses_are_rejected():
    tree = write_flip_read_tree()
    specs = default_specs(tree.objects, tree.processes)
    w = dict(check_strong_lin(tree, specs))
    leaf = tree.leaves()[0]

    bad = dict(w)
    e = bad[leaf][-1]
    bad[leaf] = bad[leaf][:-1] + (
        ImageOp(e.process, e.inv_index, e.obj, e.op, e.args, 99),
    )
    assert any("response" in v or "valid" in v
               for v in witness_violations(tree, bad, specs))

    bad = dict(w)
    bad[leaf] = bad[leaf][:-1]  # drop a completed operation
    assert witness_violations(tree, bad, specs) != []

    bad = dict(w)
    bad[leaf] = bad[leaf][::-1]  # breaks prefix property at least
    assert witness_violations(tree, bad, specs) != []

    bad = dict(w)
    del bad[leaf]
    assert any("no image" in v for v in witness_violations(tree, bad, specs))
    with pytest.raises(CheckerError):
        validate_witness(tree, bad, specs)


def test_search_guards():
    tree = write_flip_read_tree()
    specs = default_specs(tree.objects, tree.processes)
    with pytest.raises(TreeError):
        check_strong_lin(tree, specs, node_cap=3)
    h = History(
        tuple(inv(p, 0, "read") for p in range(3)), (0, 1, 2), REG_OBJS
    )
    small = HistoryTree.from_runs({(0,): h})
    with pytest.raises(TreeError):
        check_strong_lin(small, {0: register_spec()}, pending_cap=2)


def test_render_witness_shape():
    tree = write_flip_read_tree()
    specs = default_specs(tree.objects, tree.processes)
    w = check_strong_lin(tree, specs)
    doc = json.loads(render_witness(tree, w))
    assert set(doc) == {str(n) for n in tree.node_ids()}
    for nid in tree.node_ids():
        steps = doc[str(nid)]
        assert len(steps) == 2 * len(w[nid])
        assert all(s["kind"] in (INV, RSP) for s in steps)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def counter_race_fixture():
    """Three increments on one counter; the third client flips a coin
    right after its own increment returns, and the branch decides which
    of the two slower increments wins."""
    objs = {
        0: ObjectInfo("strong-counter", BASE, (("key", "X"),)),
        1: ObjectInfo("coin", BASE, (("process", 2),)),
    }
    common = (
        inv(0, 0, "fetch_inc"),
        inv(1, 0, "fetch_inc"),
        inv(2, 0, "fetch_inc"),
        rsp(2, 0, "fetch_inc", 0),
        inv(2, 1, "flip"),
    )
    h0 = common + (
        rsp(2, 1, "flip", 0),
        rsp(0, 0, "fetch_inc", 1),
        rsp(1, 0, "fetch_inc", 2),
    )
    h1 = common + (
        rsp(2, 1, "flip", 1),
        rsp(1, 0, "fetch_inc", 1),
        rsp(0, 0, "fetch_inc", 2),
    )
    runs = {
        (0,): History(h0, (0, 1, 2), objs),
        (1,): History(h1, (0, 1, 2), objs),
    }
    return HistoryTree.from_runs(runs, omega=(0, 1))


def test_normalize_pulls_flip_next_to_its_predecessor():
    tree = counter_race_fixture()
    specs = default_specs(tree.objects, tree.processes)
    op_r = ImageOp(2, 2, 0, "fetch_inc", (), 0)
    cf0 = ImageOp(2, 4, 1, "flip", (), 0)
    cf1 = ImageOp(2, 4, 1, "flip", (), 1)

    def p(ret):
        return ImageOp(0, 0, 0, "fetch_inc", (), ret)

    def q(ret):
        return ImageOp(1, 1, 0, "fetch_inc", (), ret)

    # a valid witness that parks both coin flips late in their images
    witness = {
        0: (), 1: (), 2: (), 3: (),
        4: (op_r,), 5: (op_r,),
        6: (op_r, p(1), q(2), cf0),
        7: (op_r, p(1), q(2), cf0),
        8: (op_r, p(1), q(2), cf0),
        9: (op_r, cf1, q(1), p(2)),
        10: (op_r, cf1, q(1), p(2)),
        11: (op_r, cf1, q(1), p(2)),
    }
    assert witness_violations(tree, witness, specs) == []
    flagged = normality_violations(tree, witness)
    assert {int(v.split(":")[0].split()[1]) for v in flagged} == {6, 7, 8}

    norm = normalize_witness(tree, witness, specs)
    assert normality_violations(tree, norm) == []
    # the flip moves directly behind the only operation that precedes it
    for nid in (6, 7, 8):
        assert norm[nid] == (op_r, cf0, p(1), q(2))
    # on the other branch the image was already normal, but the entries
    # whose responses are still outstanding fall off the tail
    assert norm[9] == (op_r, cf1)
    assert norm[10] == (op_r, cf1, q(1))
    assert norm[11] == (op_r, cf1, q(1), p(2))
    for nid in range(6):
        assert norm[nid] == witness[nid]


def test_normalize_found_witness_and_rejects_garbage():
    tree = counter_race_fixture()
    specs = default_specs(tree.objects, tree.processes)
    w = check_strong_lin(tree, specs)
    norm = normalize_witness(tree, w, specs)
    assert witness_violations(tree, norm, specs) == []
    assert normality_violations(tree, norm) == []
    with pytest.raises(CheckerError):
        normalize_witness(tree, {n: () for n in tree.node_ids()}, specs)


@settings(max_examples=500, deadline=None)
@given(small_histories())
def test_normalization_preserves_witness_properties(case):
    h, specs = case
    tree = HistoryTree.from_runs({(0,): h})
    w = check_strong_lin(tree, specs)
    if w is None:
        return
    norm = normalize_witness(tree, w, specs)
    assert witness_violations(tree, norm, specs) == []
    assert normality_violations(tree, norm) == []


# ---------------------------------------------------------------------------
# Linearization points
# ---------------------------------------------------------------------------


def test_points_follow_the_midpoint_rule():
    h = History(
        (inv(0, 0, "read"), inv(1, 0, "read"),
         rsp(0, 0, "read", 0), rsp(1, 0, "read", 0)),
        (0, 1), REG_OBJS,
    )
    e = timed_from_history(h)
    ops = h.operations()
    a = ImageOp(0, 0, 0, "read", (), 0)
    b = ImageOp(1, 1, 0, "read", (), 0)

    pts = extract_linearization_points(e, image_history(h, (b, a)))
    by_proc = {op.process: pts[op] for op in ops}
    assert by_proc[1] == Fraction(1)
    assert by_proc[0] == Fraction(3, 2)  # max(0, midpoint of 1 and 2)

    pts = extract_linearization_points(e, image_history(h, (a, b)))
    by_proc = {op.process: pts[op] for op in ops}
    assert by_proc[0] == Fraction(0)
    assert by_proc[1] == Fraction(1)

    # an operation left out of the image sits at infinity
    pts = extract_linearization_points(e, image_history(h, ()))
    assert all(t == math.inf for t in pts.values())


def test_points_of_trailing_image_op_without_following_steps():
    h = History((inv(0, 0, "read"), inv(1, 0, "read")), (0, 1), REG_OBJS)
    e = timed_from_history(h)
    a = ImageOp(0, 0, 0, "read", (), 0)
    b = ImageOp(1, 1, 0, "read", (), 0)
    pts = extract_linearization_points(e, image_history(h, (b, a)))
    by_proc = {op.process: pts[op] for op in h.operations()}
    assert by_proc[1] == Fraction(1)
    assert by_proc[0] == Fraction(2)  # no step after time 1: T* = t + 1


@settings(max_examples=500, deadline=None)
@given(small_histories())
def test_points_are_increasing_and_inside_intervals(case):
    h, specs = case
    img = linearize_one(h, specs)
    if img is None:
        return
    e = timed_from_history(h)
    pts = extract_linearization_points(e, img)
    times = e.times()
    finite = sorted(t for t in pts.values() if t != math.inf)
    assert all(x < y for x, y in zip(finite, finite[1:]))
    for op, t in pts.items():
        if t == math.inf:
            continue
        assert t >= times[op.inv_index]
        if op.complete:
            assert t <= times[op.rsp_index]
    timed = timed_linearization(e, img)
    assert timed.history().is_sequential()
    assert [t for _s, t in timed.pairs] == sorted(
        t for t in pts.values() for _ in (0, 1) if t != math.inf
    )


def test_points_agree_on_prefixes():
    def make_program(pid):
        def prog():
            if pid == 0:
                yield ("invoke", "R", "write", (5,))
                r = yield ("invoke", "R", "read", ())
                return r
            r = yield ("invoke", "R", "read", ())
            return r

        return prog()

    alg = AlgorithmSpec(
        (0, 1), (Binding("R", spec=register_spec()),), make_program
    )
    rec = run(alg, scripted_policy("strong", [0, 1, 0]), VectorCoins([]))
    tree = HistoryTree.from_runs({(): rec})
    specs = default_specs(tree.objects, tree.processes)
    w = check_strong_lin(tree, specs)
    assert w is not None
    path = sorted(tree.node_ids())
    leaf = path[-1]
    e_leaf = timed_from_history(tree.history_of(leaf))
    leaf_img = image_history(tree.history_of(leaf), w[leaf])
    leaf_timed = timed_linearization(e_leaf, leaf_img)
    for nid in path:
        e = timed_from_history(tree.history_of(nid))
        img = image_history(tree.history_of(nid), w[nid])
        timed = timed_linearization(e, img)
        assert timed.pairs == leaf_timed.pairs[: len(timed.pairs)]


def test_bad_images_are_rejected_for_points():
    h = History(
        (inv(0, 0, "write", (1,)), rsp(0, 0, "write"),
         inv(0, 0, "read"), rsp(0, 0, "read", 1)),
        (0,), REG_OBJS,
    )
    e = timed_from_history(h)
    w_op = ImageOp(0, 0, 0, "write", (1,), None)
    r_op = ImageOp(0, 2, 0, "read", (), 1)
    wrong_ret = ImageOp(0, 2, 0, "read", (), 9)
    with pytest.raises(CheckerError):  # missing completed op
        extract_linearization_points(e, image_history(h, (w_op,)))
    with pytest.raises(CheckerError):  # response mismatch
        extract_linearization_points(e, image_history(h, (w_op, wrong_ret)))
    with pytest.raises(CheckerError):  # order contradicts happens-before
        extract_linearization_points(e, image_history(h, (r_op, w_op)))
    nonseq = History(
        (inv(0, 0, "write", (1,)), inv(1, 0, "read"),
         rsp(0, 0, "write"), rsp(1, 0, "read", 1)),
        (0, 1), REG_OBJS,
    )
    with pytest.raises(CheckerError):
        extract_linearization_points(e, nonseq)


# ---------------------------------------------------------------------------
# Locality
# ---------------------------------------------------------------------------


def test_locality_composes_mutex_counters():
    runs = mutex_counter_runs()
    tree = HistoryTree.from_runs(runs, omega=(0, 1))
    impl = sorted(o for o, i in tree.objects.items() if i.level == INTERPRETED)
    assert len(impl) == 2
    per = {o: project_tree(tree, o) for o in impl}
    specs = default_specs(tree.objects, tree.processes)
    verdict = check_locality(per, tree, specs)
    assert verdict.status == "witness"
    assert witness_violations(tree, verdict.witness, specs) == []


def test_locality_single_object_reduction():
    runs = mutex_counter_runs()
    tree = HistoryTree.from_runs(runs, omega=(0, 1))
    impl = sorted(o for o, i in tree.objects.items() if i.level == INTERPRETED)
    specs = default_specs(tree.objects, tree.processes)
    for oid in impl:
        proj = project_tree(tree, oid)
        assert len(proj) <= len(tree)
        w = check_strong_lin(proj, specs)
        assert w is not None
        assert witness_violations(proj, w, specs) == []


def test_locality_not_applicable_without_per_object_witness():
    # an "implemented queue" whose projected tree repeats the committed
    # enqueue obstruction, plus an unrelated implemented counter
    objs = {
        0: ObjectInfo("queue", INTERPRETED, (("key", "Q"),), impl="demo"),
        1: ObjectInfo("coin", BASE, (("process", 0),)),
        2: ObjectInfo("strong-counter", INTERPRETED, (("key", "C"),), impl="demo"),
    }

    def istep(ctor, p, obj, op, payload=()):
        kind = INV if ctor is inv else RSP
        lvl = INTERPRETED if obj in (0, 2) else BASE
        return Step(kind, p, obj, op, payload, lvl)

    common = (
        istep(inv, 1, 0, "enqueue", (1,)),
        istep(inv, 2, 0, "enqueue", (2,)),
        istep(rsp, 1, 0, "enqueue", None),
        istep(rsp, 2, 0, "enqueue", None),
        istep(inv, 0, 1, "flip"),
    )
    h0 = common + (
        istep(rsp, 0, 1, "flip", 0),
        istep(inv, 0, 0, "dequeue"), istep(rsp, 0, 0, "dequeue", 1),
        istep(inv, 0, 2, "fetch_inc"), istep(rsp, 0, 2, "fetch_inc", 0),
    )
    h1 = common + (
        istep(rsp, 0, 1, "flip", 1),
        istep(inv, 0, 0, "dequeue"), istep(rsp, 0, 0, "dequeue", 2),
        istep(inv, 0, 0, "dequeue"), istep(rsp, 0, 0, "dequeue", 1),
    )
    runs = {
        (0,): History(h0, (0, 1, 2), objs),
        (1,): History(h1, (0, 1, 2), objs),
    }
    tree = HistoryTree.from_runs(runs, omega=(0, 1))
    per = {o: project_tree(tree, o) for o in (0, 2)}
    specs = default_specs(tree.objects, tree.processes)
    verdict = check_locality(per, tree, specs)
    assert verdict.status == "not-applicable"
    assert "object 0" in verdict.detail


def test_locality_rejects_mismatched_projections():
    runs = mutex_counter_runs()
    tree = HistoryTree.from_runs(runs, omega=(0, 1))
    impl = sorted(o for o, i in tree.objects.items() if i.level == INTERPRETED)
    per = {o: project_tree(tree, o) for o in impl}
    specs = default_specs(tree.objects, tree.processes)
    with pytest.raises(TreeError):
        check_locality({impl[0]: per[impl[0]]}, tree, specs)
    swapped = {impl[0]: per[impl[1]], impl[1]: per[impl[0]]}
    with pytest.raises(TreeError):
        check_locality(swapped, tree, specs)


def test_project_tree_demands_interpreted_object():
    tree = write_flip_read_tree()
    base_oid = next(
        o for o, i in tree.objects.items() if i.type_name == "register"
    )
    with pytest.raises(TreeError):
        project_tree(tree, base_oid)
    with pytest.raises(TreeError):
        project_tree(tree, 999)


def test_project_tree_merges_identical_branches():
    runs = mutex_counter_runs()
    tree = HistoryTree.from_runs(runs, omega=(0, 1))
    impl = sorted(o for o, i in tree.objects.items() if i.level == INTERPRETED)
    # C1 finishes before the flip, so its projection is branch-free
    c1 = next(
        o for o in impl
        if ("key", "C1") in tree.objects[o].params
    )
    proj = project_tree(tree, c1)
    assert all(len(proj.children(n)) <= 1 for n in proj.node_ids())


@settings(max_examples=100, deadline=None)
@given(st.randoms(use_true_random=False))
def test_locality_on_sampled_composed_runs(rng):
    """Random interleavings of two mutex-wrapped counters still compose."""

    def make_program(pid):
        def prog():
            a = yield ("invoke", "C1", "fetch_inc", ())
            b = yield ("invoke", "C2", "fetch_inc", ())
            return (a, b)

        return prog()

    alg = AlgorithmSpec(
        (0, 1),
        (
            Binding("C1", impl=mutex_wrapped(counter_spec())),
            Binding("C2", impl=mutex_wrapped(counter_spec())),
        ),
        make_program,
    )

    def make_decide():
        def decide(view):
            live = view.live()
            return rng.choice(live) if live else None

        return decide

    adv = AdversaryPolicy("strong", make_decide=make_decide, name="random")
    rec = run(alg, adv, VectorCoins([]))
    tree = HistoryTree.from_runs({(): rec})
    impl = sorted(o for o, i in tree.objects.items() if i.level == INTERPRETED)
    per = {o: project_tree(tree, o) for o in impl}
    specs = default_specs(tree.objects, tree.processes)
    verdict = check_locality(per, tree, specs)
    assert verdict.status == "witness"
    assert witness_violations(tree, verdict.witness, specs) == []


# ---------------------------------------------------------------------------
# Equivalence of run sets
# ---------------------------------------------------------------------------


def test_equivalence_of_identical_run_sets():
    runs = mutex_counter_runs()
    key_specs = {"C1": counter_spec(), "C2": counter_spec()}
    verdict = check_equivalence(runs, runs, key_specs)
    assert verdict.equivalent
    assert verdict.failures == ()
    for c, w in verdict.witnesses.items():
        assert w is not None and w.is_sequential()


def test_mutex_counter_equivalent_to_atomic_counter():
    def make_program(pid):
        def prog():
            a = yield ("invoke", "C", "fetch_inc", ())
            if pid == 0:
                c = yield ("flip",)
                return (a, c)
            return a

        return prog()

    impl_alg = AlgorithmSpec(
        (0, 1),
        (Binding("C", impl=mutex_wrapped(counter_spec())),),
        make_program,
        omega=(0, 1),
    )
    atomic_alg = AlgorithmSpec(
        (0, 1), (Binding("C", spec=counter_spec()),), make_program, omega=(0, 1)
    )
    runs_impl = {
        (c,): run(impl_alg, finish_in_order([1, 0]), VectorCoins([c]))
        for c in (0, 1)
    }
    runs_atomic = {
        (c,): run(atomic_alg, finish_in_order([1, 0]), VectorCoins([c]))
        for c in (0, 1)
    }
    verdict = check_equivalence(runs_impl, runs_atomic, {"C": counter_spec()})
    assert verdict.equivalent, verdict.failures


def test_inequivalence_shows_failing_coin_vector():
    objs1 = {0: ObjectInfo("register", BASE, (("key", "R"),))}
    h_read5 = History(
        (inv(0, 0, "write", (5,)), rsp(0, 0, "write"),
         inv(0, 0, "read"), rsp(0, 0, "read", 5)),
        (0,), objs1,
    )
    h_read0 = History(
        (inv(0, 0, "write", (5,)), rsp(0, 0, "write"),
         inv(0, 0, "read"), rsp(0, 0, "read", 0)),
        (0,), objs1,
    )
    verdict = check_equivalence(
        {(): h_read5}, {(): h_read0}, {"R": register_spec()}
    )
    assert not verdict.equivalent
    assert verdict.failures == ((),)
    with pytest.raises(CheckerError):
        check_equivalence({(0,): h_read5}, {(1,): h_read0}, {})


def test_common_linearization_tolerates_mismatched_pendings():
    objs = {0: ObjectInfo("register", BASE, (("key", "R"),))}
    h1 = History(
        (inv(0, 0, "read"), rsp(0, 0, "read", 0), inv(0, 0, "write", (1,))),
        (0,), objs,
    )
    h2 = History(
        (inv(0, 0, "read"), rsp(0, 0, "read", 0), inv(0, 0, "write", (2,))),
        (0,), objs,
    )
    got = common_linearization(h1, h2, {"R": register_spec()})
    assert got is not None
    assert [s.op for s in got.steps if s.is_inv()] == ["read"]
    # same shape, but the completed responses disagree
    h3 = h2.with_steps(
        h2.steps[:1] + (rsp(0, 0, "read", 1),) + h2.steps[2:]
    )
    assert common_linearization(h1, h3, {"R": register_spec()}) is None


def test_default_specs_cover_known_types_and_skip_internals():
    objects = {
        0: ObjectInfo("register", BASE, (("key", "R"),)),
        1: ObjectInfo("lock", BASE, (("owner", "C"),)),
        2: ObjectInfo("strong-counter", INTERPRETED, (("key", "C"),), "m"),
        3: ObjectInfo("coin", BASE, (("process", 0),)),
    }
    specs = default_specs(objects, (0, 1))
    assert set(specs) == {0, 2, 3}
    with pytest.raises(CheckerError):
        default_specs({0: ObjectInfo("widget", BASE, ())}, (0,))


# ---------------------------------------------------------------------------
# CAS from registers, end to end
# ---------------------------------------------------------------------------


def alternate(order):
    """A strong policy cycling over the given pids, skipping the halted."""

    def make_decide():
        ring = itertools.cycle(order)

        def decide(view):
            for _ in order:
                p = next(ring)
                if not view.finished(p):
                    return p
            return None

        return decide

    return AdversaryPolicy("strong", make_decide=make_decide, name="alternate")


def _cas_race_record():
    """Two CAS(0, .) calls race for the election while a third, expecting
    a stale value, fails against the current one."""
    calls = {0: (0, 5), 1: (0, 9), 2: (3, 7)}

    def make_program(pid):
        def prog():
            return (yield ("invoke", "K", "cas", calls[pid]))

        return prog()

    alg = AlgorithmSpec(
        (0, 1, 2),
        (Binding("K", impl=cas_from_registers(0)),),
        make_program,
        omega=(0, 1),
    )
    return run(alg, alternate((0, 1, 2)), VectorCoins(()))


def _sketch_points(raw):
    """Per-process points read off the raw steps: an election winner sits
    at its write to the block pointer, each loser at its leader's point
    plus (pid + 1)/(n + 2), and a mismatch failure at the value read that
    produced its return."""
    n = len(raw.processes)
    kind = {oid: info.type_name for oid, info in raw.objects.items()}
    block_of = {
        oid: dict(info.params)["block"]
        for oid, info in raw.objects.items()
        if kind[oid] == "block-election"
    }
    points = {}
    leader_of = {}
    lost_in = {}
    value_read = {}
    for i, s in enumerate(raw.steps):
        if s.level != BASE or not s.is_rsp():
            continue
        if kind[s.obj] == "current-block" and s.op == "write":
            points[s.process] = Fraction(i)
        elif kind[s.obj] == "block-election":
            if s.payload:
                lost_in[s.process] = block_of[s.obj]
            else:
                leader_of[block_of[s.obj]] = s.process
        elif kind[s.obj] == "block-value" and s.op == "read":
            value_read[s.process] = Fraction(i)
    for p, b in lost_in.items():
        points[p] = points[leader_of[b]] + Fraction(p + 1, n + 2)
    for p in raw.processes:
        if p not in points:
            points[p] = value_read[p]
    return points


def test_cas_sketch_points_validate_as_a_linearization():
    rec = _cas_race_record()
    assert rec.returns == {0: 0, 1: 5, 2: 0}

    raw = rec.history
    pts = _sketch_points(raw)
    bounds = {}
    for i, s in enumerate(raw.steps):
        if s.level == INTERPRETED:
            bounds.setdefault(s.process, [None, None])[int(s.is_rsp())] = i
    for p, t in pts.items():
        lo, hi_i = bounds[p]
        assert lo < t < hi_i

    order = sorted(pts, key=pts.get)
    assert order == [2, 0, 1]  # mismatch, then winner, then its loser
    ranked = [pts[p] for p in order]
    assert all(a < b for a, b in zip(ranked, ranked[1:]))

    hi = interpret(raw)
    by_proc = {op.process: op for op in hi.operations()}
    image = tuple(
        ImageOp(p, by_proc[p].inv_index, by_proc[p].obj, "cas",
                by_proc[p].args, by_proc[p].ret)
        for p in order
    )
    specs = default_specs(hi.objects, hi.processes)
    assert validate_sequential(image_history(hi, image), specs)

    mid = extract_linearization_points(timed_from_history(raw),
                                       image_history(hi, image))
    assert all(t != math.inf for t in mid.values())
    assert sorted(by_proc, key=lambda p: mid[by_proc[p]]) == order


def test_cas_from_registers_certified_on_a_small_tree():
    def make_program(pid):
        def prog():
            if pid == 0:
                c = yield ("flip",)
                return (yield ("invoke", "K", "cas", (0, 5 + c)))
            return (yield ("invoke", "K", "cas", (0, 9)))

        return prog()

    alg = AlgorithmSpec(
        (0, 1),
        (Binding("K", impl=cas_from_registers(0)),),
        make_program,
        omega=(0, 1),
    )
    runs = {
        (c,): interpret(run(alg, alternate((0, 1)), VectorCoins((c,))).history)
        for c in (0, 1)
    }
    tree = HistoryTree.from_runs(runs, omega=(0, 1))
    specs = default_specs(tree.objects, tree.processes)
    w = check_strong_lin(tree, specs)
    assert w is not None
    assert witness_violations(tree, w, specs) == []
    # p0 returned 9, the value p1 installed, so p1's cas comes first
    for leaf in tree.leaves():
        assert [io.process for io in w[leaf] if io.op == "cas"] == [1, 0]
