"""Annotation generation: the contracts attached to each loop-nest node.

Structural tests pin where each annotation family lands (which loop carries
bounds, permissions, partial postconditions, reduction invariants) and the
dynamic sweep then executes every schedule under full instrumentation, so
each generated predicate is actually evaluated at its boundaries.
"""

from __future__ import annotations

import pathlib
from fractions import Fraction

import pytest

from minisched import checker as C
from minisched.annotate import Ann, AnnotateError, RegionPerm, annotate
from minisched.ir import BinOp, Var
from minisched.lowering import Consume, Loop, lower
from minisched.parser import parse_pipeline, parse_schedule

CORPUS = pathlib.Path(__file__).resolve().parent.parent / "corpus"

SCALES = {
    "blur": {"x": 64, "y": 64},
    "count": {"w": 16},
    "matmul": {"n": 8},
    "conv1d": {"n": 64},
    "chain3": {"n": 64},
    "update2": {"n": 32},
}

ALL_SCHEDULES = sorted(
    (d.name, f.stem)
    for d in (CORPUS / "schedules").iterdir()
    for f in d.glob("*.sched")
)

SEEDS = [0, 1, 2]


def load(algo: str):
    src = (CORPUS / f"{algo}.hal").read_text()
    return parse_pipeline(src).resolve(SCALES[algo]).validated()


def schedule(algo: str, name: str):
    return parse_schedule((CORPUS / "schedules" / algo / f"{name}.sched").read_text())


def annotated(algo: str, sched: str, include_user: bool = True):
    lp = lower(load(algo), schedule(algo, sched))
    return lp, annotate(lp, include_user=include_user)


def nodes(root):
    yield root
    for child in getattr(root, "body", []):
        yield from nodes(child)


def find_loop(root, var: str, owner=None, kind=None):
    for n in nodes(root):
        if not isinstance(n, Loop) or n.dim.var != var:
            continue
        if owner is not None and n.owner != owner:
            continue
        if kind is not None and n.dim.kind != kind:
            continue
        return n
    raise AssertionError(f"no loop over {var!r} with owner {owner!r}")


def all_annotations(lp, ap):
    yield from ap.top
    for n in nodes(lp.root):
        aset = ap.at(n)
        for slot in ("invariants", "requires", "ensures", "context"):
            yield from getattr(aset, slot)


# ---------------------------------------------------------------------------
# Attachment shapes


def test_blur_consume_loop_carries_four_families():
    lp, ap = annotated("blur", "ref")
    consume = next(n for n in nodes(lp.root) if isinstance(n, Consume))
    xo = find_loop(consume, "xo", owner=("blur_y", 0))
    families = ap.at(xo).invariants
    assert len(families) == 4

    bounds = [a for a in families if isinstance(a, Ann) and a.origin == ("bounds", "xo")]
    reads = [a for a in families if isinstance(a, RegionPerm) and not a.write]
    writes = [a for a in families if isinstance(a, Ann) and a.perm]
    partial = [
        a
        for a in families
        if isinstance(a, Ann) and not a.perm and a.origin[:2] == ("stage", "blur_y")
    ]
    assert len(bounds) == len(reads) == len(writes) == len(partial) == 1

    assert reads[0].target.name == "blur_x"
    assert reads[0].frac.value() == Fraction(1, 2)
    assert writes[0].origin == ("write", "blur_y")
    # the postcondition holds only for the columns already written
    assert partial[0].quants[0].hi == Var("xo")


def test_blur_parallel_contract_divides_reads_not_writes():
    lp, ap = annotated("blur", "ref")
    yo = find_loop(lp.root, "yo", kind="parallel")
    contract = ap.at(yo).context
    read = next(a for a in contract if isinstance(a, RegionPerm) and not a.write)
    write = next(a for a in contract if isinstance(a, Ann) and a.perm)
    assert read.target.name == "inp"
    assert read.frac.value() == Fraction(1, 2 * 8)
    assert write.origin == ("write", "blur_y")
    assert any(a.origin[-1] == "post" for a in ap.at(yo).ensures)


def test_count_parallel_iteration_contract():
    lp, ap = annotated("count", "par")
    x = find_loop(lp.root, "x", owner=("count", 1), kind="parallel")
    aset = ap.at(x)

    assert {a.origin[0] for a in aset.requires} == {"stage", "pendI"}
    assert {a.origin[0] for a in aset.ensures} == {"stage", "pendI"}
    write = next(a for a in aset.context if isinstance(a, Ann) and a.perm)
    assert write.origin == ("write", "count")
    read = next(a for a in aset.context if isinstance(a, RegionPerm))
    assert read.frac.value() == Fraction(1, 2 * 16)


def test_matmul_inner_reduction_invariant_absorbed_at_outer():
    lp, ap = annotated("matmul", "root")
    rk = find_loop(lp.root, "rk", owner=("prod", 1))
    rt = find_loop(lp.root, "rt", owner=("prod", 1))
    i = find_loop(lp.root, "i", owner=("prod", 1))

    assert any(a.origin[:1] == ("rinv",) and a.origin[3] == "rk" for a in ap.at(rk).invariants)
    assert any(a.origin[:1] == ("rinv",) and a.origin[3] == "rt" for a in ap.at(rt).invariants)
    # the rk half never escapes rt: the outer reduction's own invariant
    # already describes every completed rt step
    for n in (rt, i):
        assert not any(
            a.origin[0] == "pendI" and a.origin[3] == "rk"
            for a in ap.at(n).invariants
        )


def test_matmul_completed_pending_split_at_pure_loop():
    lp, ap = annotated("matmul", "root")
    i = find_loop(lp.root, "i", owner=("prod", 1))
    pend = [a for a in ap.at(i).invariants if a.origin[0] == "pendI"]
    assert len(pend) == 2
    completed = next(a for a in pend if a.quants[0].hi == Var("i"))
    pending = next(a for a in pend if a.quants[0].lo == Var("i"))
    assert completed is not pending


def test_chain3_tail_guard_folds_into_values_not_regions():
    lp, ap = annotated("chain3", "stage")
    xo = find_loop(lp.root, "xo", owner=("mid", 0))
    aset = ap.at(xo).invariants
    guarded = [
        a for a in aset if isinstance(a, Ann) and isinstance(a.body, BinOp) and a.body.op == "==>"
    ]
    # both the partial postcondition and the per-cell write permission are
    # conditional on the split guard; region boxes stay unconditional
    assert any(a.perm for a in guarded)
    assert any(not a.perm for a in guarded)
    for a in aset:
        if isinstance(a, RegionPerm):
            assert all(isinstance(v, str) for v, _, _ in a.dim_boxes)


def test_top_state_is_one_read_and_one_write_footprint():
    lp, ap = annotated("blur", "ref")
    assert len(ap.top) == 2
    read = next(a for a in ap.top if not a.write)
    write = next(a for a in ap.top if a.write)
    assert read.target.name == "inp" and read.frac.value() == Fraction(1, 2)
    assert write.target.name == "blur_y" and write.frac.value() == Fraction(1)


@pytest.mark.parametrize("algo,sched", ALL_SCHEDULES)
def test_no_user_mode_keeps_only_memory_annotations(algo, sched):
    lp, ap = annotated(algo, sched, include_user=False)
    for a in all_annotations(lp, ap):
        if isinstance(a, RegionPerm):
            continue
        assert a.perm or a.origin[0] == "bounds", a.origin


# ---------------------------------------------------------------------------
# Errors


def test_missing_reduction_invariant_is_an_error():
    src = (CORPUS / "count.hal").read_text()
    stripped = "\n".join(
        line for line in src.splitlines() if "count.invariant" not in line
    )
    p = parse_pipeline(stripped).resolve(SCALES["count"]).validated()
    lp = lower(p, parse_schedule("count.parallel(x);"))
    with pytest.raises(AnnotateError) as err:
        annotate(lp)
    assert err.value.code == "MissingReductionInvariant"
    # memory-safety mode needs no value invariants at all
    annotate(lp, include_user=False)


# ---------------------------------------------------------------------------
# Dynamic truth: every generated annotation holds on concrete runs


@pytest.mark.parametrize("algo,sched", ALL_SCHEDULES)
def test_annotations_hold_on_concrete_runs(algo, sched):
    res = C.check_schedule(load(algo), schedule(algo, sched), SEEDS)
    assert res.passed, [f.to_json() for f in res.findings]


@pytest.mark.parametrize("algo,sched", ALL_SCHEDULES)
def test_generated_permissions_alone_stay_clean(algo, sched):
    res = C.check_schedule(
        load(algo), schedule(algo, sched), SEEDS, include_user=False
    )
    assert res.findings == [], [f.to_json() for f in res.findings]


@pytest.mark.parametrize("factor", [2, 4, 8, 16])
def test_parallel_split_fractions_sum_to_a_whole(factor):
    p = load("count")
    d = parse_schedule(f"count.split(x, xo, xi, {factor}).parallel(xo);")
    res = C.check_schedule(p, d, SEEDS)
    assert res.passed, [f.to_json() for f in res.findings]
