"""Decision procedures over finite history trees.

A prefix-closed set of interpreted histories forms a tree: one node per
prefix, one appended step per edge, branching only where a coin flip
response differs.  This module decides linearizability of a single
history, searches for prefix-preserving linearization witnesses over
whole trees, normalizes such witnesses, extracts linearization points
for timed executions, and exercises the locality and equivalence
arguments on concrete run sets.  Everything here is exhaustive by
design and guarded accordingly; these are desk-scale tools, not model
checkers.
"""

from __future__ import annotations

import itertools
import json
import math
from bisect import bisect_right
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable, Iterator, Mapping

from .histories import (
    ANY_RESPONSE,
    INTERPRETED,
    INV,
    RSP,
    History,
    MalformedHistoryError,
    ObjectInfo,
    OperationInstance,
    SeqSpec,
    Step,
    TimedExecution,
    _decode_payload,
    _encode_payload,
    interpret,
)
from .objects import (
    cas_spec,
    coin_spec,
    counter_spec,
    llsc_spec,
    queue_spec,
    register_spec,
    rmw_cell_spec,
    snapshot_spec,
    test_and_set_spec,
)


class CheckerError(Exception):
    """Unusable checker input (as opposed to a NONE verdict)."""


class TreeError(CheckerError):
    """A history tree violating its structural invariants."""


def _hb(a: OperationInstance, b: OperationInstance) -> bool:
    # a happens before b: a completed and responded before b was invoked.
    return a.rsp_index is not None and a.rsp_index < b.inv_index


def _is_flip_step(objects: Mapping[int, ObjectInfo], s: Step) -> bool:
    info = objects.get(s.obj)
    return info is not None and info.type_name == "coin"


# ---------------------------------------------------------------------------
# History trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeNode:
    """One prefix: the parent's history plus ``step`` appended."""

    node_id: int
    parent: int | None
    step: Step | None
    coin_outcome: Any = None


class HistoryTree:
    """A finite prefix-closed set of interpreted histories.

    Node ids ascend from the root (id 0, empty history) and every
    parent id is smaller than its children's, so iterating ids in
    order visits parents first.
    """

    def __init__(
        self,
        processes: tuple[int, ...],
        objects: Mapping[int, ObjectInfo],
        nodes: Mapping[int, TreeNode],
        children: Mapping[int, list[int]],
    ):
        self.processes = tuple(processes)
        self.objects = dict(objects)
        self._nodes = dict(nodes)
        self._children = {nid: tuple(ch) for nid, ch in children.items()}
        if 0 not in self._nodes or self._nodes[0].parent is not None:
            raise TreeError("tree has no root")
        self._hist: dict[int, History] = {}
        self._ops: dict[int, tuple[OperationInstance, ...]] = {}

    root = 0

    def __len__(self) -> int:
        return len(self._nodes)

    def node_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self._nodes))

    def parent(self, nid: int) -> int | None:
        return self._nodes[nid].parent

    def step(self, nid: int) -> Step | None:
        return self._nodes[nid].step

    def children(self, nid: int) -> tuple[int, ...]:
        return self._children.get(nid, ())

    def leaves(self) -> tuple[int, ...]:
        return tuple(n for n in self.node_ids() if not self.children(n))

    def history_of(self, nid: int) -> History:
        got = self._hist.get(nid)
        if got is None:
            node = self._nodes[nid]
            if node.parent is None:
                got = History((), self.processes, self.objects)
            else:
                parent = self.history_of(node.parent)
                got = parent.with_steps(parent.steps + (node.step,))
            self._hist[nid] = got
        return got

    def ops_of(self, nid: int) -> tuple[OperationInstance, ...]:
        got = self._ops.get(nid)
        if got is None:
            try:
                got = self.history_of(nid).operations()
            except MalformedHistoryError as exc:
                raise TreeError(f"node {nid}: {exc}") from None
            self._ops[nid] = got
        return got

    # -- construction --------------------------------------------------------

    @classmethod
    def from_runs(
        cls, records: Mapping[tuple, Any], omega: tuple | None = None
    ) -> "HistoryTree":
        """Build the prefix tree of a set of runs keyed by coin vector.

        Values may be RunRecords or plain histories; each is reduced to
        its interpreted form first.  Divergence anywhere but at a flip
        response means the runs did not come from one strong adversary
        and is rejected.
        """
        if not records:
            raise TreeError("no runs given")
        items = sorted(records.items())
        hists = [
            interpret(v.history if hasattr(v, "history") else v) for _c, v in items
        ]
        processes, objects = hists[0].processes, hists[0].objects
        for h in hists[1:]:
            if h.processes != processes or dict(h.objects) != dict(objects):
                raise TreeError("runs disagree on processes or objects")
        nodes = {0: TreeNode(0, None, None)}
        children: dict[int, list[int]] = {0: []}
        for h in hists:
            cur = 0
            for s in h.steps:
                nxt = None
                for ch in children[cur]:
                    if nodes[ch].step == s:
                        nxt = ch
                        break
                if nxt is None:
                    siblings = children[cur]
                    if siblings:
                        older = nodes[siblings[0]].step
                        ok = (
                            s.is_rsp()
                            and older.is_rsp()
                            and _is_flip_step(objects, s)
                            and (older.process, older.obj, older.op)
                            == (s.process, s.obj, s.op)
                        )
                        if not ok:
                            raise TreeError(
                                "runs diverge at a step that is not a flip response"
                            )
                    nxt = len(nodes)
                    outcome = (
                        s.payload
                        if s.is_rsp() and _is_flip_step(objects, s)
                        else None
                    )
                    nodes[nxt] = TreeNode(nxt, cur, s, outcome)
                    children[nxt] = []
                    children[cur].append(nxt)
                cur = nxt
        tree = cls(processes, objects, nodes, children)
        if omega is not None:
            want = sorted(omega)
            for nid in tree.node_ids():
                ch = tree.children(nid)
                if len(ch) > 1 or (ch and nodes[ch[0]].coin_outcome is not None):
                    got = sorted(nodes[c].coin_outcome for c in ch)
                    if got != want:
                        raise TreeError(
                            f"branch node {nid} covers outcomes {got}, not {want}"
                        )
        return tree

    @classmethod
    def from_json(cls, text: str) -> "HistoryTree":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TreeError(f"bad tree JSON: {exc}") from None
        objects = {
            int(oid): ObjectInfo(
                entry["type"],
                entry["level"],
                tuple((k, _decode_payload(v)) for k, v in entry["params"].items()),
                entry.get("impl"),
            )
            for oid, entry in doc.get("objects", {}).items()
        }
        processes = tuple(doc.get("processes", ()))
        raw = doc.get("nodes", [])
        if not raw:
            return cls(processes, objects, {0: TreeNode(0, None, None)}, {0: []})
        nodes: dict[int, TreeNode] = {}
        children: dict[int, list[int]] = {}
        for rec in raw:
            nid, parent = rec["id"], rec["parent"]
            if nid in nodes:
                raise TreeError(f"duplicate node id {nid}")
            if parent is None:
                step = None
                if rec.get("step") is not None or nodes:
                    raise TreeError("root must come first and carry no step")
            else:
                if parent not in nodes or parent >= nid:
                    raise TreeError(f"node {nid}: tree is not prefix-closed")
                sd = rec["step"]
                step = Step(
                    sd["kind"],
                    sd["process"],
                    sd["object"],
                    sd["op"],
                    _decode_payload(sd["payload"]),
                    sd["level"],
                )
            nodes[nid] = TreeNode(nid, parent, step, rec.get("coin_outcome"))
            children[nid] = []
            if parent is not None:
                children[parent].append(nid)
        for nid, kids in children.items():
            if len(kids) > 1:
                steps = [nodes[c].step for c in kids]
                heads = {(s.process, s.obj, s.op, s.kind) for s in steps}
                if len(heads) != 1 or not all(
                    s.is_rsp() and _is_flip_step(objects, s) for s in steps
                ):
                    raise TreeError(
                        f"node {nid} branches on something other than a flip response"
                    )
                if len({s.payload for s in steps}) != len(steps):
                    raise TreeError(f"node {nid} has duplicate branch outcomes")
        return cls(processes, objects, nodes, children)

    def to_json(self) -> str:
        doc = {
            "processes": list(self.processes),
            "objects": {
                str(oid): {
                    "type": info.type_name,
                    "level": info.level,
                    "params": {k: _encode_payload(v) for k, v in info.params},
                    "impl": info.impl,
                }
                for oid, info in sorted(self.objects.items())
            },
            "nodes": [
                self._node_json(self._nodes[nid]) for nid in self.node_ids()
            ],
        }
        return json.dumps(doc, separators=(",", ":"), ensure_ascii=True)

    @staticmethod
    def _node_json(node: TreeNode) -> dict:
        rec: dict[str, Any] = {"id": node.node_id, "parent": node.parent}
        if node.step is None:
            rec["step"] = None
        else:
            s = node.step
            rec["step"] = {
                "kind": s.kind,
                "process": s.process,
                "object": s.obj,
                "op": s.op,
                "payload": _encode_payload(s.payload),
                "level": s.level,
            }
        if node.coin_outcome is not None:
            rec["coin_outcome"] = node.coin_outcome
        return rec


# ---------------------------------------------------------------------------
# Witnesses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageOp:
    """One committed operation inside a witness image.

    ``inv_index`` names the operation by the position of its invocation
    in the node's history; ``ret`` is the actual response for completed
    operations and the replay-derived one for committed pending ops.
    """

    process: int
    inv_index: int
    obj: int
    op: str
    args: tuple
    ret: Any

    @property
    def key(self) -> tuple[int, int]:
        return (self.process, self.inv_index)


Witness = Mapping[int, tuple[ImageOp, ...]]


def render_witness(tree: HistoryTree, witness: Witness) -> str:
    """Witness interchange: JSON map node id -> sequential step list."""
    doc = {}
    for nid in tree.node_ids():
        hist = tree.history_of(nid)
        steps = []
        for e in witness[nid]:
            lvl = hist.steps[e.inv_index].level
            for kind, payload in ((INV, e.args), (RSP, e.ret)):
                steps.append(
                    {
                        "kind": kind,
                        "process": e.process,
                        "object": e.obj,
                        "op": e.op,
                        "payload": _encode_payload(payload),
                        "level": lvl,
                    }
                )
        doc[str(nid)] = steps
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=True)


def _spec_for(specs: Mapping[int, SeqSpec], oid: int) -> SeqSpec:
    spec = specs.get(oid)
    if spec is None:
        raise CheckerError(f"no specification for object {oid}")
    return spec


def default_specs(
    objects: Mapping[int, ObjectInfo], processes: tuple[int, ...]
) -> dict[int, SeqSpec]:
    """Specifications inferred from type names, with default initial values.

    Serialized trees do not carry initial states, so deserialized ones
    are checked against zero-initialized objects; snapshot width comes
    from the process registry.
    """
    factories: dict[str, Callable[[], SeqSpec]] = {
        "register": register_spec,
        "snapshot": lambda: snapshot_spec(max(len(processes), 1)),
        "queue": queue_spec,
        "strong-counter": counter_spec,
        "cas": cas_spec,
        "llsc-register": llsc_spec,
        "rmw-cell": rmw_cell_spec,
        "test-and-set": test_and_set_spec,
        "coin": coin_spec,
    }
    out = {}
    for oid, info in objects.items():
        if any(k == "owner" for k, _v in info.params):
            continue  # internal to some implementation; never visible interpreted
        make = factories.get(info.type_name)
        if make is None:
            raise CheckerError(f"cannot infer a specification for {info.type_name!r}")
        out[oid] = make()
    return out


# ---------------------------------------------------------------------------
# Linearizability of one history
# ---------------------------------------------------------------------------


def _sequential_history(h: History, entries: tuple[ImageOp, ...]) -> History:
    steps = []
    for e in entries:
        lvl = h.steps[e.inv_index].level
        steps.append(Step(INV, e.process, e.obj, e.op, e.args, lvl))
        steps.append(Step(RSP, e.process, e.obj, e.op, e.ret, lvl))
    return History(tuple(steps), h.processes, h.objects)


def image_history(h: History, image: tuple[ImageOp, ...]) -> History:
    """The image as a sequential history over ``h``'s registries."""
    return _sequential_history(h, tuple(image))


def linearize_one(h: History, specs: Mapping[int, SeqSpec]) -> History | None:
    """One linearization of an interpreted history, or None.

    All completed operations must appear; pending ones may be committed
    with replay-derived responses when that helps.  Incremental commit
    search, memoized on (committed set, object states); sound and
    complete at the sizes this artifact deals in.
    """
    ops = h.operations()
    eligible = [
        op
        for op in ops
        if op.complete or h.objects[op.obj].type_name != "coin"
    ]
    eligible.sort(key=lambda o: (o.complete is False, o.process, o.inv_index))
    need = frozenset(
        (op.process, op.inv_index) for op in ops if op.complete
    )
    preds = {
        (op.process, op.inv_index): frozenset(
            (q.process, q.inv_index) for q in eligible if _hb(q, op)
        )
        for op in eligible
    }
    dead: set = set()

    def search(committed: frozenset, states: dict, acc: tuple):
        if need <= committed:
            return acc
        sig = (committed, tuple(sorted(states.items())))
        if sig in dead:
            return None
        for op in eligible:
            k = (op.process, op.inv_index)
            if k in committed or not preds[k] <= committed:
                continue
            spec = _spec_for(specs, op.obj)
            state = states.get(op.obj, spec.initial_state)
            state2, resp = spec.transition(state, op.op, op.args, op.process)
            if op.complete:
                if resp is not ANY_RESPONSE and resp != op.ret:
                    continue
                ret = op.ret
            else:
                if resp is ANY_RESPONSE:
                    continue
                ret = resp
            entry = ImageOp(op.process, op.inv_index, op.obj, op.op, op.args, ret)
            nstates = dict(states)
            nstates[op.obj] = state2
            found = search(committed | {k}, nstates, acc + (entry,))
            if found is not None:
                return found
        dead.add(sig)
        return None

    got = search(frozenset(), {}, ())
    return None if got is None else _sequential_history(h, got)


# ---------------------------------------------------------------------------
# Strong linearization witnesses over trees
# ---------------------------------------------------------------------------


def _valid_orderings(
    chosen: list[OperationInstance],
    states0: dict,
    specs: Mapping[int, SeqSpec],
) -> Iterator[tuple[tuple[ImageOp, ...], dict]]:
    # Every happens-before-respecting, replay-valid sequence over `chosen`,
    # lexicographically by (process, invocation index).
    chosen = sorted(chosen, key=lambda o: (o.process, o.inv_index))

    def place(remaining, acc, states):
        if not remaining:
            yield tuple(acc), states
            return
        for op in remaining:
            if any(q is not op and _hb(q, op) for q in remaining):
                continue
            spec = _spec_for(specs, op.obj)
            state = states.get(op.obj, spec.initial_state)
            state2, resp = spec.transition(state, op.op, op.args, op.process)
            if op.complete:
                if resp is not ANY_RESPONSE and resp != op.ret:
                    continue
                ret = op.ret
            else:
                if resp is ANY_RESPONSE:
                    continue
                ret = resp
            entry = ImageOp(op.process, op.inv_index, op.obj, op.op, op.args, ret)
            nstates = dict(states)
            nstates[op.obj] = state2
            yield from place(
                [q for q in remaining if q is not op], acc + [entry], nstates
            )

    yield from place(chosen, [], dict(states0))


def _image_extensions(
    tree: HistoryTree,
    nid: int,
    parent_img: tuple[ImageOp, ...],
    parent_states: dict,
    specs: Mapping[int, SeqSpec],
) -> Iterator[tuple[tuple[ImageOp, ...], dict]]:
    """Legal images for a node, as extensions of its parent's image.

    Ordered by number of newly committed operations: completed-but-
    uncommitted ops are mandatory, pending ones optional (coins are
    never committed early, their outcome is not derivable).
    """
    hist = tree.history_of(nid)
    by_key = {(o.process, o.inv_index): o for o in tree.ops_of(nid)}
    for e in parent_img:
        op = by_key[e.key]
        if op.complete and op.ret != e.ret:
            return  # a guessed response for a pending op turned out wrong
    committed = {e.key for e in parent_img}
    must, may = [], []
    for op in tree.ops_of(nid):
        if (op.process, op.inv_index) in committed:
            continue
        if op.complete:
            must.append(op)
        elif hist.objects[op.obj].type_name != "coin":
            may.append(op)
    may.sort(key=lambda o: (o.process, o.inv_index))
    for size in range(len(may) + 1):
        for extra in itertools.combinations(may, size):
            for ext, states in _valid_orderings(
                must + list(extra), parent_states, specs
            ):
                yield parent_img + ext, states


class _Frame:
    __slots__ = ("nid", "exts", "img", "states", "child_i", "results")

    def __init__(self, nid, exts):
        self.nid = nid
        self.exts = exts
        self.img = None
        self.states = None
        self.child_i = 0
        self.results: dict = {}


def check_strong_lin(
    tree: HistoryTree,
    specs: Mapping[int, SeqSpec],
    node_cap: int = 100_000,
    pending_cap: int = 8,
) -> dict[int, tuple[ImageOp, ...]] | None:
    """A prefix-preserving linearization witness for the tree, or None.

    Depth-first over the tree: each node picks an image extending its
    parent's, fewest new commitments first, and a choice is kept only
    while every child subtree can complete under it; exhausting a
    node's choices backtracks into the parent.  Returned witnesses
    re-validate independently (see witness_violations).
    """
    if len(tree) > node_cap:
        raise TreeError(f"tree has {len(tree)} nodes, cap is {node_cap}")
    for nid in tree.node_ids():
        pending = sum(1 for op in tree.ops_of(nid) if not op.complete)
        if pending > pending_cap:
            raise TreeError(
                f"node {nid} has {pending} pending operations, cap is {pending_cap}"
            )

    def fresh(nid, pimg, pstates):
        return _Frame(nid, _image_extensions(tree, nid, pimg, pstates, specs))

    def admits(nid, img, states):
        probe = _image_extensions(tree, nid, img, states, specs)
        return next(probe, None) is not None

    frames = [fresh(tree.root, (), {})]
    while frames:
        f = frames[-1]
        if f.img is None:
            drawn = next(f.exts, None)
            while drawn is not None:
                img, states = drawn
                if all(admits(c, img, states) for c in tree.children(f.nid)):
                    break
                drawn = next(f.exts, None)
            if drawn is None:
                frames.pop()
                if not frames:
                    return None
                frames[-1].img = None
                frames[-1].results = {}
                continue
            f.img, f.states = drawn
            f.child_i = 0
            f.results = {}
        kids = tree.children(f.nid)
        if f.child_i < len(kids):
            frames.append(fresh(kids[f.child_i], f.img, f.states))
            continue
        solved = {f.nid: f.img}
        solved.update(f.results)
        frames.pop()
        if not frames:
            return solved
        frames[-1].results.update(solved)
        frames[-1].child_i += 1
    return None


def witness_violations(
    tree: HistoryTree, witness: Witness, specs: Mapping[int, SeqSpec]
) -> list[str]:
    """Re-validate (L) and (P) node by node, from first principles.

    Deliberately shares no machinery with the search: plain loops over
    the definition.  Returns human-readable violations, empty when the
    witness is good.
    """
    out = []
    for nid in tree.node_ids():
        img = witness.get(nid)
        if img is None:
            out.append(f"node {nid}: no image")
            continue
        hist = tree.history_of(nid)
        by_key = {(o.process, o.inv_index): o for o in tree.ops_of(nid)}
        resolved = []
        bad = False
        for e in img:
            op = by_key.get((e.process, e.inv_index))
            if op is None or (op.obj, op.op, op.args) != (e.obj, e.op, e.args):
                out.append(f"node {nid}: image op {e} is not in the history")
                bad = True
                break
            if op.complete and op.ret != e.ret:
                out.append(f"node {nid}: image response differs from history")
                bad = True
                break
            resolved.append(op)
        if bad:
            continue
        keys = [(o.process, o.inv_index) for o in resolved]
        if len(set(keys)) != len(keys):
            out.append(f"node {nid}: duplicate operation in image")
            continue
        missing = [
            o
            for o in tree.ops_of(nid)
            if o.complete and (o.process, o.inv_index) not in set(keys)
        ]
        if missing:
            out.append(f"node {nid}: completed operation missing from image")
            continue
        order_ok = True
        for i in range(len(resolved)):
            for j in range(i + 1, len(resolved)):
                if _hb(resolved[j], resolved[i]):
                    out.append(f"node {nid}: image order violates happens-before")
                    order_ok = False
                    break
            if not order_ok:
                break
        if not order_ok:
            continue
        states: dict = {}
        valid = True
        for e in img:
            spec = _spec_for(specs, e.obj)
            state = states.get(e.obj, spec.initial_state)
            state2, resp = spec.transition(state, e.op, e.args, e.process)
            states[e.obj] = state2
            if resp is not ANY_RESPONSE and resp != e.ret:
                out.append(f"node {nid}: image is not sequentially valid")
                valid = False
                break
        if not valid:
            continue
        pid = tree.parent(nid)
        if pid is not None:
            pimg = witness.get(pid, ())
            head = [(e.process, e.inv_index, e.ret) for e in img[: len(pimg)]]
            want = [(e.process, e.inv_index, e.ret) for e in pimg]
            if head != want:
                out.append(f"node {nid}: image does not extend its parent's")
    return out


def validate_witness(
    tree: HistoryTree, witness: Witness, specs: Mapping[int, SeqSpec]
) -> None:
    bad = witness_violations(tree, witness, specs)
    if bad:
        raise CheckerError("; ".join(bad[:3]))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def normality_violations(tree: HistoryTree, witness: Witness) -> list[str]:
    """Nodes where a flip directly follows an op it is concurrent with."""
    out = []
    for nid in tree.node_ids():
        hist = tree.history_of(nid)
        by_key = {(o.process, o.inv_index): o for o in tree.ops_of(nid)}
        img = witness[nid]
        for i in range(1, len(img)):
            e = img[i]
            if hist.objects[e.obj].type_name != "coin":
                continue
            before = by_key[img[i - 1].key]
            cf = by_key[e.key]
            if not _hb(before, cf):
                out.append(
                    f"node {nid}: flip at image position {i} follows a "
                    f"concurrent operation"
                )
    return out


def normalize_witness(
    tree: HistoryTree, witness: Witness, specs: Mapping[int, SeqSpec]
) -> dict[int, tuple[ImageOp, ...]]:
    """Pull flips to their earliest order-respecting image positions.

    Per node: drop trailing still-pending ops, take the flips out, then
    reinsert each (in history order) at the first position compatible
    with happens-before.  The output satisfies the same witness
    properties plus normality, which is re-checked before returning.
    """
    validate_witness(tree, witness, specs)
    out: dict[int, tuple[ImageOp, ...]] = {}
    for nid in tree.node_ids():
        hist = tree.history_of(nid)
        by_key = {(o.process, o.inv_index): o for o in tree.ops_of(nid)}
        img = list(witness[nid])
        while img and not by_key[img[-1].key].complete:
            img.pop()
        flips = [e for e in img if hist.objects[e.obj].type_name == "coin"]
        base = [e for e in img if hist.objects[e.obj].type_name != "coin"]
        for cf in sorted(flips, key=lambda e: e.inv_index):
            cf_op = by_key[cf.key]
            lo = 0
            hi = len(base)
            for i, e in enumerate(base):
                if _hb(by_key[e.key], cf_op):
                    lo = i + 1
                if _hb(cf_op, by_key[e.key]):
                    hi = min(hi, i)
            if lo > hi:
                raise CheckerError(
                    f"node {nid}: no order-respecting slot for a flip"
                )
            base.insert(lo, cf)
        out[nid] = tuple(base)
    bad = witness_violations(tree, out, specs) + normality_violations(tree, out)
    if bad:
        raise CheckerError(f"normalization produced a bad witness: {bad[0]}")
    return out


# ---------------------------------------------------------------------------
# Linearization points over timed executions
# ---------------------------------------------------------------------------


def _interpreted_indices(h: History) -> list[int]:
    # Positions, in the raw history, of the steps interpret() keeps.
    depth: dict[int, int] = {}
    kept = []
    for i, s in enumerate(h.steps):
        if s.level == INTERPRETED:
            kept.append(i)
            depth[s.process] = depth.get(s.process, 0) + (1 if s.is_inv() else -1)
        elif depth.get(s.process, 0) == 0:
            kept.append(i)
    return kept


def _match_image(
    hi: History, f_image: History
) -> list[tuple[OperationInstance, OperationInstance]]:
    """Pair image ops with history ops, in image order.

    Raises CheckerError unless the image is a linearization shape-wise:
    contains every completed op with its actual response, adds at most
    the pending ones, and orders everything consistently with
    happens-before.
    """
    try:
        if not f_image.is_sequential():
            raise CheckerError("image is not sequential")
        img_ops = f_image.operations()
    except MalformedHistoryError as exc:
        raise CheckerError(f"image is not a history: {exc}") from None
    pairs: list[tuple[OperationInstance, OperationInstance]] = []
    for p in set(op.process for op in img_ops):
        hist_p = [o for o in hi.operations() if o.process == p]
        img_p = [o for o in img_ops if o.process == p]
        if len(img_p) > len(hist_p):
            raise CheckerError(f"image has extra operations for process {p}")
        for io, ho in zip(img_p, hist_p):
            if (io.obj, io.op, io.args) != (ho.obj, ho.op, ho.args):
                raise CheckerError(f"image operation mismatch for process {p}")
            if ho.complete and io.ret != ho.ret:
                raise CheckerError(f"image response mismatch for process {p}")
            pairs.append((io, ho))
        done = sum(1 for o in hist_p if o.complete)
        if len(img_p) < done:
            raise CheckerError(f"image omits a completed operation of process {p}")
    pairs.sort(key=lambda pr: pr[0].inv_index)
    pos = {
        (ho.process, ho.inv_index): i for i, (_io, ho) in enumerate(pairs)
    }
    for _ia, ha in pairs:
        for _ib, hb_ in pairs:
            if _hb(ha, hb_) and not (
                pos[(ha.process, ha.inv_index)] < pos[(hb_.process, hb_.inv_index)]
            ):
                raise CheckerError("image order contradicts happens-before")
    return pairs


def extract_linearization_points(
    e: TimedExecution, f_image: History
) -> dict[OperationInstance, Any]:
    """Linearization points for an execution's image, by the midpoint rule.

    The first image op sits at its invocation time; each later one at
    the maximum of its own invocation time and the midpoint between its
    predecessor's point and the next step of the execution after it (a
    full unit out when no step follows).  Ops missing from the image
    map to infinity.  Exact rational arithmetic throughout.
    """
    h = e.history()
    hi = interpret(h)
    kept = _interpreted_indices(h)
    pairs = _match_image(hi, f_image)
    times = e.times()
    ts = sorted(times)

    def t_star(t: Fraction) -> Fraction:
        i = bisect_right(ts, t)
        if i < len(ts):
            return (t + ts[i]) / 2
        return t + 1

    points: dict[OperationInstance, Any] = {}
    prev: Fraction | None = None
    for _io, ho in pairs:
        t_inv = times[kept[ho.inv_index]]
        cur = t_inv if prev is None else max(t_inv, t_star(prev))
        points[ho] = cur
        prev = cur
    for op in hi.operations():
        if op not in points:
            points[op] = math.inf
    return points


def timed_linearization(
    e: TimedExecution, f_image: History
) -> TimedExecution:
    """The image as a timed sequential execution, each op atomic at its point."""
    points = extract_linearization_points(e, f_image)
    hi = interpret(e.history())
    pairs = _match_image(hi, f_image)
    out = []
    for io, ho in pairs:
        t = points[ho]
        lvl = hi.steps[ho.inv_index].level
        out.append((Step(INV, ho.process, ho.obj, ho.op, ho.args, lvl), t))
        out.append((Step(RSP, ho.process, ho.obj, ho.op, io.ret, lvl), t))
    return TimedExecution(tuple(out), e.processes, e.objects)


# ---------------------------------------------------------------------------
# Locality
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalityVerdict:
    """Outcome of composing per-object witnesses.

    ``witness`` holds the combined mapping when status is "witness";
    "not-applicable" means some per-object tree already has none (the
    composition theorem asserts nothing then); "counterexample" would
    falsify the implementation under test, not the theorem.
    """

    status: str
    witness: dict[int, tuple[ImageOp, ...]] | None
    detail: str = ""


def project_tree(tree: HistoryTree, oid: int) -> HistoryTree:
    """The tree of per-object projections of every history in the tree.

    Distinct branches whose projections coincide merge, so the result
    is the prefix tree of a plain set of histories and may branch at
    non-flip steps.
    """
    info = tree.objects.get(oid)
    if info is None:
        raise TreeError(f"unknown object {oid}")
    if info.level != INTERPRETED:
        raise TreeError(f"object {oid} is a base object")
    nodes = {0: TreeNode(0, None, None)}
    children: dict[int, list[int]] = {0: []}
    edge: dict[tuple[int, Step], int] = {}
    cursor = {tree.root: 0}
    for nid in tree.node_ids():
        if nid == tree.root:
            continue
        s = tree.step(nid)
        cur = cursor[tree.parent(nid)]
        if s.obj != oid:
            cursor[nid] = cur
            continue
        ch = edge.get((cur, s))
        if ch is None:
            ch = len(nodes)
            nodes[ch] = TreeNode(ch, cur, s)
            children[ch] = []
            children[cur].append(ch)
            edge[(cur, s)] = ch
        cursor[nid] = ch
    return HistoryTree(tree.processes, tree.objects, nodes, children)


def _child_with_step(tree: HistoryTree, nid: int, s: Step) -> int | None:
    for ch in tree.children(nid):
        if tree.step(ch) == s:
            return ch
    return None


def check_locality(
    per_object_trees: Mapping[int, HistoryTree],
    combined: HistoryTree,
    specs: Mapping[int, SeqSpec],
) -> LocalityVerdict:
    """Compose per-object witnesses into one for the combined tree.

    The combined image grows edge by edge: a step on implemented object
    O_j appends whatever O_j's own witness committed between the two
    projected prefixes (translated back to combined indices); a
    top-level atomic or coin response appends that one op.  The result
    is re-validated against the combined tree, so a failure here is a
    counterexample report against the inputs.
    """
    impl = sorted(
        oid for oid, info in combined.objects.items() if info.level == INTERPRETED
    )
    if sorted(per_object_trees) != impl:
        raise TreeError("projection mismatch: per-object trees do not cover "
                        "exactly the implemented objects")
    witnesses = {}
    for oid in impl:
        w = check_strong_lin(per_object_trees[oid], specs)
        if w is None:
            return LocalityVerdict(
                "not-applicable", None, f"object {oid} admits no witness"
            )
        witnesses[oid] = w

    comb: dict[int, tuple[ImageOp, ...]] = {combined.root: ()}
    cursors = {combined.root: {oid: per_object_trees[oid].root for oid in impl}}
    posmap = {combined.root: {oid: () for oid in impl}}
    visited = {oid: {per_object_trees[oid].root} for oid in impl}
    for nid in combined.node_ids():
        if nid == combined.root:
            continue
        pnid = combined.parent(nid)
        s = combined.step(nid)
        at = len(combined.history_of(pnid).steps)
        pcur, ppos, pimg = cursors[pnid], posmap[pnid], comb[pnid]
        info = combined.objects[s.obj]
        if info.level == INTERPRETED:
            oid = s.obj
            t = per_object_trees[oid]
            nxt = _child_with_step(t, pcur[oid], s)
            if nxt is None:
                raise TreeError(
                    f"projection mismatch: object {oid} tree lacks a projected step"
                )
            visited[oid].add(nxt)
            newpos = ppos[oid] + (at,)
            lam = witnesses[oid][nxt][len(witnesses[oid][pcur[oid]]) :]
            comb[nid] = pimg + tuple(
                ImageOp(x.process, newpos[x.inv_index], x.obj, x.op, x.args, x.ret)
                for x in lam
            )
            cursors[nid] = {**pcur, oid: nxt}
            posmap[nid] = {**ppos, oid: newpos}
        else:
            if s.is_rsp():
                prev = combined.history_of(pnid).steps[-1]
                if not (
                    prev.is_inv()
                    and (prev.process, prev.obj, prev.op)
                    == (s.process, s.obj, s.op)
                ):
                    raise TreeError(
                        "atomic response is not adjacent to its invocation"
                    )
                comb[nid] = pimg + (
                    ImageOp(s.process, at - 1, s.obj, s.op, prev.payload, s.payload),
                )
            else:
                comb[nid] = pimg
            cursors[nid] = pcur
            posmap[nid] = ppos
    for oid in impl:
        unreached = set(per_object_trees[oid].leaves()) - visited[oid]
        if unreached:
            raise TreeError(
                f"projection mismatch: object {oid} tree has histories no "
                f"combined history projects to"
            )
    bad = witness_violations(combined, comb, specs)
    if bad:
        return LocalityVerdict("counterexample", comb, bad[0])
    return LocalityVerdict("witness", comb, "")


# ---------------------------------------------------------------------------
# Equivalence of run sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EquivalenceVerdict:
    equivalent: bool
    failures: tuple
    witnesses: Mapping[tuple, History | None]


def _program_key(h: History, op: OperationInstance) -> tuple:
    info = h.objects[op.obj]
    params = dict(info.params)
    if info.type_name == "coin":
        return ("coin", params.get("process", op.process))
    if "key" in params:
        return ("obj", params["key"])
    raise CheckerError(f"object {op.obj} has no program-visible key")


def common_linearization(
    h1: History, h2: History, key_specs: Mapping[str, SeqSpec]
) -> History | None:
    """A sequential history linearizing both runs at once, or None.

    Operations are matched positionally per process and by the program
    key of their object; a completed op whose twin is missing, or whose
    recorded responses disagree, rules a common linearization out
    immediately.  Otherwise the same commit search as linearize_one
    runs against the union of both happens-before orders.
    """
    items = []
    for p in sorted(set(h1.processes) | set(h2.processes)):
        l1 = [o for o in h1.operations() if o.process == p]
        l2 = [o for o in h2.operations() if o.process == p]
        for j in range(max(len(l1), len(l2))):
            o1 = l1[j] if j < len(l1) else None
            o2 = l2[j] if j < len(l2) else None
            if o1 is None or o2 is None:
                present = o1 or o2
                if present.complete:
                    return None
                continue
            k1, k2 = _program_key(h1, o1), _program_key(h2, o2)
            if (k1, o1.op, o1.args) != (k2, o2.op, o2.args):
                if o1.complete or o2.complete:
                    return None
                continue
            rets = [o.ret for o in (o1, o2) if o.complete]
            if len(rets) == 2 and rets[0] != rets[1]:
                return None
            if not rets and k1[0] == "coin":
                continue
            items.append((o1, o2, k1, rets[0] if rets else None, bool(rets)))

    def spec_of(key: tuple) -> SeqSpec:
        if key[0] == "coin":
            return coin_spec()
        spec = key_specs.get(key[1])
        if spec is None:
            raise CheckerError(f"no specification for program object {key[1]!r}")
        return spec

    preds: list[frozenset] = []
    for o1, o2, _k, _r, _m in items:
        ps = set()
        for m, (q1, q2, _k2, _r2, _m2) in enumerate(items):
            if _hb(q1, o1) or _hb(q2, o2):
                ps.add(m)
        preds.append(frozenset(ps))
    need = frozenset(n for n, it in enumerate(items) if it[4])
    dead: set = set()

    def search(committed: frozenset, states: dict, acc: tuple):
        if need <= committed:
            return acc
        sig = (committed, tuple(sorted(states.items())))
        if sig in dead:
            return None
        for n, (o1, _o2, key, ret, must) in enumerate(items):
            if n in committed or not preds[n] <= committed:
                continue
            spec = spec_of(key)
            state = states.get(key, spec.initial_state)
            state2, resp = spec.transition(state, o1.op, o1.args, o1.process)
            if must:
                if resp is not ANY_RESPONSE and resp != ret:
                    continue
                got = ret
            else:
                if resp is ANY_RESPONSE:
                    continue
                got = resp
            entry = ImageOp(o1.process, o1.inv_index, o1.obj, o1.op, o1.args, got)
            nstates = dict(states)
            nstates[key] = state2
            found = search(committed | {n}, nstates, acc + (entry,))
            if found is not None:
                return found
        dead.add(sig)
        return None

    got = search(frozenset(), {}, ())
    return None if got is None else _sequential_history(h1, got)


def check_equivalence(
    runs_implemented: Mapping[tuple, Any],
    runs_atomic: Mapping[tuple, Any],
    key_specs: Mapping[str, SeqSpec],
) -> EquivalenceVerdict:
    """Coin vector by coin vector, hunt for common linearizations."""
    if set(runs_implemented) != set(runs_atomic):
        raise CheckerError("runs indexed by different coin vectors")

    def hist(v) -> History:
        return interpret(v.history if hasattr(v, "history") else v)

    witnesses: dict[tuple, History | None] = {}
    for c in sorted(runs_implemented):
        witnesses[c] = common_linearization(
            hist(runs_implemented[c]), hist(runs_atomic[c]), key_specs
        )
    failures = tuple(c for c, w in sorted(witnesses.items()) if w is None)
    return EquivalenceVerdict(not failures, failures, witnesses)
