"""Concrete execution of lowered pipelines, with instrumentation.

Two evaluators live here.  ``eval_reference`` computes every function of a
pipeline directly from its definition, stage by stage over full declared
domains; it is the semantic baseline.  ``run_lowered`` walks a built loop
nest statement by statement the way the emitted C would execute it, and
watches for the things a verifier would reject: reads of cells never
written, out-of-range indexes, values escaping 32-bit range, and writes
that would collide if a parallel loop really ran in parallel.

Both evaluate all random seeds at once: control flow never depends on data
(guards mention loop variables only), so one walk of the nest carries an
entire batch of input sets as a trailing lane axis.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .annotate import Ann, AnnotatedPipeline, RegionPerm, annotate, flatten_storage
from .ir import (
    Quantifier,
    BinOp,
    Const,
    Expr,
    MaxOf,
    MinOf,
    Not,
    PermAtom,
    Pipeline,
    Select,
    TableRead,
    Var,
    eval_const,
    _resolve_bound_refs,
)
from .kernels import INT32_MAX, INT32_MIN, vhdiv, vhmod
from .lowering import (
    Chain,
    Consume,
    FlatAlloc,
    If,
    Loop,
    LoweredPipeline,
    Produce,
    Store,
    StoreStmt,
    _stage_loop_dims,
    buffer_alloc,
)

POISON = np.int64(0x5EED_BADD_0000)


@dataclass(frozen=True)
class Finding:
    """One reason a run does not pass.  ``lanes`` names the input sets the
    problem occurred in, or None when it is input-independent."""

    kind: str
    message: str
    site: str = ""
    lanes: tuple[int, ...] | None = None

    def to_json(self) -> dict:
        out = {"kind": self.kind, "message": self.message, "site": self.site}
        if self.lanes is not None:
            out["lanes"] = list(self.lanes)
        return out


@dataclass
class RunResult:
    mem: dict[str, np.ndarray]
    findings: list[Finding]
    points: int
    millis: float
    instantiations: int = 0

    @property
    def passed(self) -> bool:
        return not self.findings


def make_inputs(p: Pipeline, seeds) -> dict[str, np.ndarray]:
    """Uniform int32 input buffers in [-100, 100], one lane per seed."""
    out: dict[str, np.ndarray] = {}
    for b in p.buffers:
        size = 1
        for _, iv in b.dims:
            size *= iv.extent
        lanes = [
            np.random.default_rng(seed).integers(-100, 101, size=size, dtype=np.int64)
            for seed in seeds
        ]
        out[b.name] = np.stack(lanes, axis=0)
    return out


def assert_buffer_requires(p: Pipeline, inputs: dict[str, np.ndarray]) -> None:
    """Hard check that generated inputs satisfy every buffer precondition.

    These conditions are implicitly quantified over the buffer's whole
    domain; a violation is a bug in the input generator, not a finding.
    """
    lanes = next(iter(inputs.values())).shape[0] if inputs else 1
    allocs = {b.name: declared_alloc(p, b.name) for b in p.buffers}
    mem = {name: arr.astype(np.int64) for name, arr in inputs.items()}
    for b in p.buffers:
        dims = b.dim_names()
        grids = np.meshgrid(
            *[np.arange(b.interval(d).lo_int, b.interval(d).hi_int) for d in dims],
            indexing="ij",
        )
        env = {d: g.reshape(-1) for d, g in zip(dims, grids)}
        n = env[dims[0]].size
        for cond in b.requires:
            held = _eval_lanes(p, cond.expr, env, mem, allocs, lanes, n)
            if not (held != 0).all():
                raise ValueError(f"generated inputs violate a precondition of {b.name!r}")


def declared_alloc(p: Pipeline, name: str) -> FlatAlloc:
    entity = None
    for b in p.buffers:
        if b.name == name:
            entity = b
    if entity is None:
        entity = p.func(name)
    size = 1
    strides: dict[str, int] = {}
    base: dict[str, Expr] = {}
    for d, iv in entity.dims:
        strides[d] = size
        base[d] = iv.lo
        size *= iv.extent
    return FlatAlloc(name, size, strides, base)


# ---------------------------------------------------------------------------
# Reference semantics


def eval_reference(p: Pipeline, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Every function of the pipeline over its full declared domain.

    Arrays are (lanes, size) in declared row-minor layout (first dimension
    has stride 1), exact in int64.
    """
    lanes = next(iter(inputs.values())).shape[0] if inputs else 1
    allocs = {b.name: declared_alloc(p, b.name) for b in p.buffers}
    mem = {name: arr.astype(np.int64) for name, arr in inputs.items()}

    for f in p.funcs:
        alloc = declared_alloc(p, f.name)
        allocs[f.name] = alloc
        mem[f.name] = np.full((lanes, alloc.size), POISON, dtype=np.int64)
        for s in f.stages:
            dims = _stage_loop_dims(f, s)
            grids = np.meshgrid(
                *[np.arange(f.interval(d).lo_int, f.interval(d).hi_int) for d in dims],
                indexing="ij",
            )
            env = {d: g.reshape(-1) for d, g in zip(dims, grids)}
            n = env[dims[0]].size if dims else 1
            point = dict(zip(f.dim_names(), s.lhs_args))
            idx = _eval_index(alloc.offset(point, list(dims)), env, n)
            rsteps = [{}]
            if s.rdom is not None:
                rsteps = []
                rgrids = np.meshgrid(
                    *[
                        np.arange(s.rdom.interval(rv).lo_int, s.rdom.interval(rv).hi_int)
                        # last declared variable is the outer loop
                        for rv in reversed(s.rdom.names())
                    ],
                    indexing="ij",
                )
                flat = [g.reshape(-1) for g in rgrids]
                for k in range(flat[0].size):
                    rsteps.append(
                        {rv: int(col[k]) for rv, col in zip(reversed(s.rdom.names()), flat)}
                    )
            for rstep in rsteps:
                full_env = dict(env) | {rv: np.full(n, v) for rv, v in rstep.items()}
                vals = _eval_lanes(p, s.rhs, full_env, mem, allocs, lanes, n)
                if s.guard is not None:
                    keep = _eval_lanes(p, s.guard, full_env, mem, allocs, lanes, n) != 0
                    cur = mem[f.name][:, idx]
                    mem[f.name][:, idx] = np.where(keep, vals, cur)
                else:
                    mem[f.name][:, idx] = vals
    return mem


def _eval_index(e: Expr, env: dict[str, np.ndarray], n: int) -> np.ndarray:
    v = _eval_grid(e, env)
    if np.isscalar(v) or getattr(v, "ndim", 1) == 0:
        return np.full(n, int(v), dtype=np.int64)
    return v.astype(np.int64)


def _eval_grid(e: Expr, env):
    """Point-indexed evaluation (no lane axis): indices and guards."""
    match e:
        case Const(v):
            return np.int64(v)
        case Var(name):
            return env[name]
        case BinOp(op, l, r):
            a, b = _eval_grid(l, env), _eval_grid(r, env)
            return _apply(op, a, b)
        case Not(x):
            return (_eval_grid(x, env) == 0).astype(np.int64)
        case Select(c, t, f):
            return np.where(_eval_grid(c, env) != 0, _eval_grid(t, env), _eval_grid(f, env))
        case MinOf(l, r):
            return np.minimum(_eval_grid(l, env), _eval_grid(r, env))
        case MaxOf(l, r):
            return np.maximum(_eval_grid(l, env), _eval_grid(r, env))
    raise TypeError(f"cannot evaluate {type(e).__name__} here")


def _apply(op: str, a, b):
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "hdiv":
        return vhdiv(a, b)
    if op == "hmod":
        return vhmod(a, b)
    if op == "<":
        return (a < b).astype(np.int64)
    if op == "<=":
        return (a <= b).astype(np.int64)
    if op == "==":
        return (a == b).astype(np.int64)
    if op == "!=":
        return (a != b).astype(np.int64)
    if op == "&&":
        return ((a != 0) & (b != 0)).astype(np.int64)
    if op == "||":
        return ((a != 0) | (b != 0)).astype(np.int64)
    if op == "==>":
        return ((a == 0) | (b != 0)).astype(np.int64)
    raise ValueError(f"unknown operator {op!r}")


def _eval_lanes(p, e: Expr, env, mem, allocs, lanes: int, n: int):
    """Evaluation with a lane axis: function bodies.  Returns (lanes, n)."""
    match e:
        case Const(v):
            return np.full((lanes, n), v, dtype=np.int64)
        case Var(name):
            return np.broadcast_to(env[name], (lanes, n))
        case BinOp(op, l, r):
            return _apply(op, _eval_lanes(p, l, env, mem, allocs, lanes, n), _eval_lanes(p, r, env, mem, allocs, lanes, n))
        case Not(x):
            return (_eval_lanes(p, x, env, mem, allocs, lanes, n) == 0).astype(np.int64)
        case Select(c, t, f):
            return np.where(
                _eval_lanes(p, c, env, mem, allocs, lanes, n) != 0,
                _eval_lanes(p, t, env, mem, allocs, lanes, n),
                _eval_lanes(p, f, env, mem, allocs, lanes, n),
            )
        case MinOf(l, r):
            return np.minimum(_eval_lanes(p, l, env, mem, allocs, lanes, n), _eval_lanes(p, r, env, mem, allocs, lanes, n))
        case MaxOf(l, r):
            return np.maximum(_eval_lanes(p, l, env, mem, allocs, lanes, n), _eval_lanes(p, r, env, mem, allocs, lanes, n))
    # function or buffer access
    name, args = _access_parts(e)
    alloc = allocs[name]
    order = [k for k in env]
    dimnames = (p.buffer(name) if any(b.name == name for b in p.buffers) else p.func(name)).dim_names()
    idx = _eval_index(alloc.offset(dict(zip(dimnames, args)), order), env, n)
    if (idx < 0).any() or (idx >= alloc.size).any():
        raise ValueError(f"reference evaluation reads {name} out of bounds")
    return mem[name][:, idx]


def _access_parts(e: Expr):
    kind = type(e).__name__
    if kind == "FuncAccess":
        return e.func, e.args
    if kind == "BufAccess":
        return e.buf, e.args
    raise TypeError(f"cannot evaluate {kind} here")


# ---------------------------------------------------------------------------
# Lowered execution


@dataclass
class _Cell:
    arr: np.ndarray  # (lanes, size)
    init: np.ndarray  # (size,) bool
    instance: int


@dataclass
class _Tracker:
    """Access log of one entered parallel loop: address -> (iteration, mode)."""

    var: str
    iteration: int = -1
    log: dict = field(default_factory=dict)


class _Runner:
    def __init__(self, lp: LoweredPipeline, inputs: dict[str, np.ndarray], observer=None):
        self.lp = lp
        self.p = lp.pipeline
        self.lanes = next(iter(inputs.values())).shape[0] if inputs else 1
        self.mem: dict[str, _Cell] = {}
        self.shadow: dict[str, list[_Cell]] = {}
        self.findings: list[Finding] = []
        self.seen: set = set()
        self.points = 0
        self.next_instance = 0
        self.trackers: list[_Tracker] = []
        self.grants: dict[str, list[tuple[bool, int, int]]] = {}
        self.obs = observer
        if observer is not None:
            observer.runner = self

        for bname, arr in inputs.items():
            cell = _Cell(arr.astype(np.int64), np.ones(arr.shape[1], dtype=bool), self._fresh())
            self.mem[bname] = cell
            self.grants[bname] = [(False, 0, arr.shape[1])]
        sited = {name for name, sf in lp.scheduled.funcs.items() if sf.compute_site is not None}
        for name in lp.scheduled.realized:
            if name not in sited:
                self.mem[name] = self._new_cell(lp.allocs[name].size)

    def _fresh(self) -> int:
        self.next_instance += 1
        return self.next_instance

    def _new_cell(self, size: int) -> _Cell:
        return _Cell(
            np.full((self.lanes, size), POISON, dtype=np.int64),
            np.zeros(size, dtype=bool),
            self._fresh(),
        )

    def report(self, kind: str, message: str, site: str = "", lanes=None, dedupe=None):
        key = dedupe if dedupe is not None else (kind, message, site)
        if key in self.seen:
            return
        self.seen.add(key)
        self.findings.append(Finding(kind, message, site, lanes))

    # -- memory traffic ---------------------------------------------------

    def _touch(self, cell: _Cell, offset: int, write: bool, site: str):
        for tr in self.trackers:
            key = (cell.instance, offset)
            prev = tr.log.get(key)
            if prev is None:
                tr.log[key] = (tr.iteration, write)
            else:
                it, wrote = prev
                if it != tr.iteration and (write or wrote):
                    what = "write collides with" if write else "read races against"
                    self.report(
                        "race",
                        f"iterations {it} and {tr.iteration} of parallel loop {tr.var!r}"
                        f" touch the same cell ({what} earlier access)",
                        site,
                        dedupe=("race", tr.var, cell.instance, offset),
                    )
                if write and not wrote:
                    tr.log[key] = (it, True)

    def _covered(self, name: str, offset: int, write: bool, site: str):
        for is_write, lo, hi in self.grants.get(name, ()):
            if lo <= offset < hi and (is_write or not write):
                return
        mode = "write to" if write else "read of"
        self.report(
            "uncovered_access",
            f"{mode} {name}[{offset}] outside any held permission scope",
            site,
            dedupe=("uncov", name, offset, write, site),
        )

    def read(self, name: str, offset, site: str):
        cell = self.mem[name]
        size = cell.arr.shape[1]
        offset = int(offset)
        if offset < 0 or offset >= size:
            self.report(
                "out_of_bounds",
                f"read of {name}[{offset}] outside its {size}-cell allocation",
                site,
                dedupe=("oob_r", name, offset, site),
            )
            return np.zeros(self.lanes, dtype=np.int64)
        self._covered(name, offset, write=False, site=site)
        if not cell.init[offset]:
            self.report(
                "uninitialized_read",
                f"{name}[{offset}] is read before any write",
                site,
                dedupe=("uninit", name, cell.instance, offset),
            )
        self._touch(cell, offset, write=False, site=site)
        return cell.arr[:, offset]

    def write(self, name: str, offset, vals, site: str):
        cell = self.mem[name]
        size = cell.arr.shape[1]
        offset = int(offset)
        if offset < 0 or offset >= size:
            self.report(
                "out_of_bounds",
                f"write of {name}[{offset}] outside its {size}-cell allocation",
                site,
                dedupe=("oob_w", name, offset, site),
            )
            return
        self._covered(name, offset, write=True, site=site)
        self._touch(cell, offset, write=True, site=site)
        cell.arr[:, offset] = vals
        cell.init[offset] = True

    # -- expressions -------------------------------------------------------

    def scalar(self, e: Expr, env: dict[str, int]) -> int:
        return eval_const(e, env)

    def value(self, e: Expr, env: dict[str, int], site: str):
        match e:
            case Const(v):
                return np.int64(v)
            case Var(name):
                return np.int64(env[name])
            case TableRead(target, index):
                return self.read(target.name, self.scalar(index, env), site)
            case BinOp(op, l, r):
                a = self.value(l, env, site)
                b = self.value(r, env, site)
                v = _apply(op, a, b)
                if op in ("+", "-", "*", "hdiv"):
                    self._check32(v, site)
                return v
            case Not(x):
                return (self.value(x, env, site) == 0).astype(np.int64)
            case Select(c, t, f):
                cv = self.value(c, env, site)
                tv = self.value(t, env, site)
                fv = self.value(f, env, site)
                return np.where(cv != 0, tv, fv)
            case MinOf(l, r):
                return np.minimum(self.value(l, env, site), self.value(r, env, site))
            case MaxOf(l, r):
                return np.maximum(self.value(l, env, site), self.value(r, env, site))
        raise TypeError(f"cannot execute {type(e).__name__}")

    def _check32(self, v, site: str):
        bad = (v < INT32_MIN) | (v > INT32_MAX)
        if np.any(bad):
            lanes = tuple(np.flatnonzero(np.atleast_1d(bad)).tolist()) or None
            self.report(
                "overflow",
                "intermediate value leaves the signed 32-bit range",
                site,
                lanes=lanes,
                dedupe=("overflow", site),
            )

    # -- statements and control -------------------------------------------

    def run(self, node, env: dict[str, int]):
        match node:
            case Chain(body):
                for c in body:
                    self.run(c, env)
            case Produce(func, body):
                self.grants.setdefault(func, []).append(
                    (True, 0, self.mem[func].arr.shape[1])
                )
                for c in body:
                    self.run(c, env)
                self.grants[func].pop()
            case Consume(func, body):
                self.grants.setdefault(func, []).append(
                    (False, 0, self.mem[func].arr.shape[1])
                )
                if self.obs is not None:
                    self.obs.consume_enter(node, env)
                for c in body:
                    self.run(c, env)
                self.grants[func].pop()
            case Store(func, alloc, body):
                prev = self.mem.get(func)
                self.mem[func] = self._new_cell(alloc.size)
                for c in body:
                    self.run(c, env)
                if prev is not None:
                    self.mem[func] = prev
                else:
                    del self.mem[func]
            case Loop(dim, owner, body):
                if dim.kind == "unrolled":
                    # the body already holds one substituted copy per step
                    for c in body:
                        self.run(c, env)
                    return
                lo = self.scalar(dim.lo, env)
                if dim.kind == "parallel":
                    tr = _Tracker(dim.display)
                    self.trackers.append(tr)
                    if self.obs is not None:
                        self.obs.par_enter(node)
                    for v in range(lo, lo + dim.extent):
                        tr.iteration = v
                        env[dim.var] = v
                        if self.obs is not None:
                            self.obs.par_iter_pre(node, env)
                        for c in body:
                            self.run(c, env)
                        if self.obs is not None:
                            self.obs.par_iter_post(node, env)
                    if self.obs is not None:
                        self.obs.par_exit(node)
                    self.trackers.pop()
                else:
                    for v in range(lo, lo + dim.extent):
                        env[dim.var] = v
                        if self.obs is not None:
                            self.obs.serial_boundary(node, env)
                        for c in body:
                            self.run(c, env)
                    if self.obs is not None:
                        # one-past-the-end boundary closes the loop
                        env[dim.var] = lo + dim.extent
                        self.obs.serial_boundary(node, env)
                env.pop(dim.var, None)
            case If(cond, owner, body):
                if self.scalar(cond, env) != 0:
                    for c in body:
                        self.run(c, env)
            case StoreStmt(func, stage, target, index, value, _):
                site = f"{func}.stage{stage}"
                self.points += 1
                if self.obs is not None:
                    self.obs.stmt_pre(node, env)
                vals = self.value(value, env, site)
                self._check32(np.atleast_1d(vals), site)
                self.write(target.name, self.scalar(index, env), vals, site)
                if self.obs is not None:
                    self.obs.stmt_post(node, env)
            case _:
                raise TypeError(f"cannot execute node {type(node).__name__}")


class InstantiationBudget(Exception):
    """A single annotation asked for more concrete instances than allowed."""


class _AnnObserver:
    """Evaluates attached annotations at the runner's boundary events.

    Value annotations are checked for truth with quantifiers enumerated
    over their concrete ranges; permission annotations of parallel block
    contracts are charged to a per-loop ledger and the fraction sum per
    cell must not exceed a whole permission.  All arithmetic on fractions
    is exact.
    """

    def __init__(self, ap: AnnotatedPipeline, cap: int = 10_000_000):
        self.ap = ap
        self.cap = cap
        self.runner: _Runner | None = None
        self.instantiations = 0
        self.ledgers: list[tuple[Loop, dict[str, list]]] = []

    def aset(self, node):
        return self.ap.node.get(id(node))

    def _budget(self, n: int):
        self.instantiations += n
        if n > self.cap:
            raise InstantiationBudget(
                f"one annotation expands to {n} instances (limit {self.cap})"
            )

    # -- event entry points ------------------------------------------------

    def serial_boundary(self, loop: Loop, env):
        aset = self.aset(loop)
        if aset is None:
            return
        v = env[loop.dim.var]
        for a in aset.invariants:
            if isinstance(a, RegionPerm) or a.perm:
                continue
            self._check(
                a,
                env,
                "invariant_violation",
                f"loop {loop.dim.display}",
                f"loop invariant does not hold at {loop.dim.display} = {v}",
            )

    def par_enter(self, loop: Loop):
        self.ledgers.append((loop, {}))

    def par_iter_pre(self, loop: Loop, env):
        aset = self.aset(loop)
        if aset is None:
            return
        self._charge(aset, env)
        v = env[loop.dim.var]
        for a in aset.requires + [c for c in aset.context if self._is_value(c)]:
            self._check(
                a,
                env,
                "contract_violation",
                f"loop {loop.dim.display}",
                f"iteration contract fails on entry at {loop.dim.display} = {v}",
            )

    def par_iter_post(self, loop: Loop, env):
        aset = self.aset(loop)
        if aset is None:
            return
        v = env[loop.dim.var]
        for a in aset.ensures + [c for c in aset.context if self._is_value(c)]:
            self._check(
                a,
                env,
                "contract_violation",
                f"loop {loop.dim.display}",
                f"iteration contract fails on exit at {loop.dim.display} = {v}",
            )

    def par_exit(self, loop: Loop):
        loop, ledger = self.ledgers.pop()
        for name, batches in ledger.items():
            cell = self.runner.mem.get(name)
            if cell is None:
                continue
            size = cell.arr.shape[1]
            den = math.lcm(*[f.denominator for _, f in batches])
            acc = np.zeros(size, dtype=np.int64)
            for offsets, frac in batches:
                np.add.at(acc, offsets, den * frac.numerator // frac.denominator)
            over = acc > den
            if over.any():
                off = int(np.flatnonzero(over)[0])
                total = Fraction(int(acc[off]), den)
                self.runner.report(
                    "race",
                    f"iterations of parallel loop {loop.dim.display!r} together"
                    f" claim {total} of {name}[{off}]"
                    " (fraction sum exceeds a whole permission)",
                    f"loop {loop.dim.display}",
                    dedupe=("perm_sum", loop.dim.var, name, off),
                )

    def consume_enter(self, node: Consume, env):
        aset = self.aset(node)
        if aset is None:
            return
        for a in aset.context:
            if self._is_value(a):
                self._check(
                    a,
                    env,
                    "contract_violation",
                    f"consume {node.func}",
                    f"consumed values of {node.func!r} disagree with its definition",
                )

    def stmt_pre(self, node: StoreStmt, env):
        aset = self.aset(node)
        if aset is None:
            return
        for a in aset.requires:
            self._check(
                a,
                env,
                "contract_violation",
                f"{node.func}.stage{node.stage}",
                "statement precondition does not hold",
            )

    def stmt_post(self, node: StoreStmt, env):
        aset = self.aset(node)
        if aset is None:
            return
        for a in aset.ensures:
            self._check(
                a,
                env,
                "contract_violation",
                f"{node.func}.stage{node.stage}",
                "statement postcondition does not hold",
            )

    def pipeline_post(self):
        """User pipeline postconditions against the final memory state."""
        if not self.ap.include_user:
            return
        p = self.runner.p
        allocs = dict(self.runner.lp.allocs)
        for b in p.buffers:
            allocs[b.name] = buffer_alloc(b)
        for qc in p.ensures:
            quants = tuple(
                Quantifier(
                    q.var,
                    _resolve_bound_refs(p, q.lo),
                    _resolve_bound_refs(p, q.hi),
                )
                for q in qc.quants
            )
            a = Ann(
                "ensures",
                quants,
                flatten_storage(p, allocs, _resolve_bound_refs(p, qc.body)),
                origin=("pipeline",),
            )
            self._check(
                a,
                {},
                "postcondition_violation",
                "pipeline",
                "pipeline postcondition does not hold on the final output",
            )

    # -- evaluation --------------------------------------------------------

    @staticmethod
    def _is_value(a) -> bool:
        return not isinstance(a, RegionPerm) and not a.perm

    def _grid(self, a: Ann, env):
        """Environment with quantifier variables flattened to index arrays,
        or None when any quantifier range is empty."""
        envq: dict = dict(env)
        axes = []
        total = 1
        for q in a.quants:
            lo = eval_const(q.lo, env)
            hi = eval_const(q.hi, env)
            axes.append((q.var, lo, max(hi, lo)))
            total *= max(hi - lo, 0)
        self._budget(total)
        if total == 0:
            return None
        grids = np.meshgrid(
            *[np.arange(lo, hi, dtype=np.int64) for _, lo, hi in axes], indexing="ij"
        )
        for (var, _, _), g in zip(axes, grids):
            envq[var] = g.reshape(-1)
        return envq

    def _check(self, a: Ann, env, kind: str, site: str, message: str):
        key = (kind, id(a), site)
        if key in self.runner.seen:
            return
        envq = self._grid(a, env)
        if envq is None:
            return
        # leading implications are grid guards: restrict the grid to points
        # they keep, so excluded points are never read at all
        body = a.body
        while isinstance(body, BinOp) and body.op == "==>":
            cv = np.asarray(self._vec(body.left, envq, site))
            if cv.ndim >= 2:
                break  # data-dependent guard; evaluate in place
            if cv.ndim == 0:
                if cv == 0:
                    return
                body = body.right
                continue
            keep = cv != 0
            if not keep.any():
                return
            if not keep.all():
                envq = {
                    k: v[keep]
                    if isinstance(v, np.ndarray) and v.shape == keep.shape
                    else v
                    for k, v in envq.items()
                }
            body = body.right
        vals = np.asarray(self._vec(body, envq, site))
        if vals.ndim == 2:
            ok = (vals != 0).all(axis=1)
            if ok.all():
                return
            lanes = tuple(np.flatnonzero(~ok).tolist())
        else:
            if (vals != 0).all():
                return
            lanes = None
        self.runner.report(kind, message, site, lanes=lanes, dedupe=key)

    def _vec(self, e: Expr, envq, site: str):
        """Annotation body over a quantifier grid, lanes leading when any
        storage is read.  Shapes are scalar, (points,), or (lanes, points)."""
        match e:
            case Const(v):
                return np.int64(v)
            case Var(name):
                v = envq[name]
                return v if isinstance(v, np.ndarray) else np.int64(v)
            case TableRead(target, index):
                idx = np.atleast_1d(np.asarray(self._vec(index, envq, site), dtype=np.int64))
                cell = self.runner.mem[target.name]
                size = cell.arr.shape[1]
                bad = (idx < 0) | (idx >= size)
                if bad.any():
                    off = int(idx[bad][0])
                    self.runner.report(
                        "out_of_bounds",
                        f"annotation reads {target.name}[{off}] outside its"
                        f" {size}-cell allocation",
                        site,
                        dedupe=("ann_oob", target.name, off, site),
                    )
                    idx = np.clip(idx, 0, size - 1)
                return cell.arr[:, idx]
            case BinOp(op, l, r):
                return _apply(op, self._vec(l, envq, site), self._vec(r, envq, site))
            case Not(x):
                return (np.asarray(self._vec(x, envq, site)) == 0).astype(np.int64)
            case Select(c, t, f):
                return np.where(
                    np.asarray(self._vec(c, envq, site)) != 0,
                    self._vec(t, envq, site),
                    self._vec(f, envq, site),
                )
            case MinOf(l, r):
                return np.minimum(self._vec(l, envq, site), self._vec(r, envq, site))
            case MaxOf(l, r):
                return np.maximum(self._vec(l, envq, site), self._vec(r, envq, site))
        raise TypeError(f"cannot evaluate {type(e).__name__} in an annotation")

    # -- the permission ledger ---------------------------------------------

    def _charge(self, aset, env):
        _, ledger = self.ledgers[-1]
        for a in aset.context:
            if isinstance(a, RegionPerm):
                offsets = self._region_offsets(a, env)
                ledger.setdefault(a.target.name, []).append((offsets, a.frac.value()))
            elif a.perm:
                inst = self._perm_instances(a, env)
                if inst is not None:
                    name, offsets, frac = inst
                    ledger.setdefault(name, []).append((offsets, frac))

    def _region_offsets(self, a: RegionPerm, env) -> np.ndarray:
        cell = self.runner.mem[a.target.name]
        size = cell.arr.shape[1]
        total = 1
        point = {}
        for d, lo, ext in a.dim_boxes:
            point[d] = Const(eval_const(lo, env))
            total *= ext
        self._budget(total)
        base = eval_const(a.alloc.offset(point, []), env)
        offs = np.zeros(1, dtype=np.int64)
        for d, _, ext in a.dim_boxes:
            stride = a.alloc.strides[d]
            offs = (offs[:, None] + stride * np.arange(ext, dtype=np.int64)[None, :]).ravel()
        offsets = base + offs
        # a region claims the cells of its box that exist
        return offsets[(offsets >= 0) & (offsets < size)]

    def _perm_instances(self, a: Ann, env):
        envq = self._grid(a, env)
        if envq is None:
            return None
        conds = []
        body = a.body
        while isinstance(body, BinOp) and body.op == "==>":
            conds.append(body.left)
            body = body.right
        atom: PermAtom = body
        idx = np.atleast_1d(np.asarray(self._vec(atom.index, envq, ""), dtype=np.int64))
        keep = np.ones(idx.shape, dtype=bool)
        for c in conds:
            cv = np.asarray(self._vec(c, envq, ""))
            keep &= np.atleast_1d(cv != 0)
        cell = self.runner.mem.get(atom.target.name)
        if cell is None:
            return None
        size = cell.arr.shape[1]
        keep &= (idx >= 0) & (idx < size)
        return atom.target.name, idx[keep], atom.frac.value()


def check_annotations(
    lp: LoweredPipeline, ap: AnnotatedPipeline, inputs: dict[str, np.ndarray]
) -> RunResult:
    """Execute the nest with every annotation checked at its boundaries."""
    t0 = time.perf_counter()
    obs = _AnnObserver(ap)
    runner = _Runner(lp, inputs, observer=obs)
    runner.run(lp.root, {})
    out = lp.pipeline.output
    cell = runner.mem[out]
    if not cell.init.all():
        holes = int((~cell.init).sum())
        runner.report(
            "mismatch",
            f"{holes} cell(s) of the output {out!r} were never written",
            f"{out}",
        )
    obs.pipeline_post()
    mem = {name: c.arr for name, c in runner.mem.items()}
    return RunResult(
        mem,
        runner.findings,
        runner.points,
        (time.perf_counter() - t0) * 1000,
        obs.instantiations,
    )


def check_schedule(
    p: Pipeline, directives, seeds, include_user: bool = True
) -> RunResult:
    """The whole back-end check for one schedule: lower, annotate, execute
    under full instrumentation, and compare the output with the reference
    semantics.  With ``include_user`` false only generated memory-safety
    annotations are in force."""
    from .lowering import lower

    lp = lower(p, directives)
    ap = annotate(lp, include_user=include_user)
    inputs = make_inputs(p, seeds)
    assert_buffer_requires(p, inputs)
    result = check_annotations(lp, ap, inputs)
    reference = eval_reference(p, inputs)
    result.findings.extend(compare_to_reference(lp, result, reference))
    return result


def run_lowered(lp: LoweredPipeline, inputs: dict[str, np.ndarray]) -> RunResult:
    t0 = time.perf_counter()
    runner = _Runner(lp, inputs)
    runner.run(lp.root, {})
    out = lp.pipeline.output
    cell = runner.mem[out]
    if not cell.init.all():
        holes = int((~cell.init).sum())
        runner.report(
            "mismatch",
            f"{holes} cell(s) of the output {out!r} were never written",
            f"{out}",
        )
    mem = {name: c.arr for name, c in runner.mem.items()}
    return RunResult(mem, runner.findings, runner.points, (time.perf_counter() - t0) * 1000)


def compare_to_reference(
    lp: LoweredPipeline, result: RunResult, reference: dict[str, np.ndarray]
) -> list[Finding]:
    """Exact equality of the produced output with the reference semantics."""
    out = lp.pipeline.output
    got = result.mem[out]
    want = reference[out]
    findings: list[Finding] = []
    diff = got != want
    if diff.any():
        lanes = tuple(np.flatnonzero(diff.any(axis=1)).tolist())
        first = int(np.flatnonzero(diff.any(axis=0))[0])
        findings.append(
            Finding(
                "mismatch",
                f"output {out}[{first}] disagrees with the reference evaluation",
                out,
                lanes,
            )
        )
    return findings


def check_lowered(p: Pipeline, directives, seeds) -> RunResult:
    """Lower, execute under instrumentation, and compare with the reference.

    The returned result carries all findings, differential mismatches
    included; pass verdicts per seed come from :func:`to_reports`.
    """
    from .lowering import lower

    lp = lower(p, directives)
    inputs = make_inputs(p, seeds)
    assert_buffer_requires(p, inputs)
    result = run_lowered(lp, inputs)
    reference = eval_reference(p, inputs)
    result.findings.extend(compare_to_reference(lp, result, reference))
    return result


def to_reports(
    pipeline: str, schedule: str, seeds, result: RunResult, instantiations: int | None = None
) -> list[dict]:
    """One JSON-ready report per seed, splitting lane-tagged findings."""
    if instantiations is None:
        instantiations = result.instantiations
    reports = []
    for lane, seed in enumerate(seeds):
        mine = [
            f for f in result.findings if f.lanes is None or lane in f.lanes
        ]
        reports.append(
            {
                "pipeline": pipeline,
                "schedule": schedule,
                "seed": int(seed),
                "verdict": "pass" if not mine else "fail",
                "findings": [f.to_json() for f in mine],
                "stats": {
                    "points": result.points,
                    "instantiations": instantiations,
                    "millis": round(result.millis, 3),
                },
            }
        )
    return reports
