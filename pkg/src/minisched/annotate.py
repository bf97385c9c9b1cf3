"""Annotation generation and bottom-up transformation through a loop nest.

Every store statement seeds a small contract: a full write permission on the
cell it defines, fractional read permissions on everything it consumes, and
the user's stage annotations instantiated at the current point.  Walking the
nest from the leaves outward, each loop absorbs the seeds that mention its
variable: serial loops turn them into loop invariants (completed iterations
keep their postconditions, pending ones keep their preconditions), parallel
loops take them verbatim as a per-iteration block contract with read
fractions split across iterations, and unrolled loops contribute nothing
but pass a fully quantified copy outward.

Value annotations quantify over iteration variables.  Read permissions do
not: a sliding window read overlaps itself across iterations, and claiming
one fraction per origin point would sum past a whole permission on interior
cells.  They are kept in region form instead, a box in the producer's own
coordinates that widens as each loop is crossed, so every cell is claimed
once per nesting level no matter how the reads overlap.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .ir import (
    BinOp,
    BufAccess,
    Const,
    Expr,
    Frac,
    FuncAccess,
    MemTarget,
    PermAtom,
    Quantifier,
    Stage,
    TableRead,
    Var,
    free_vars,
    hdiv,
    rewrite,
    substitute,
    walk,
)
from .lowering import (
    Chain,
    Consume,
    FlatAlloc,
    If,
    Loop,
    LoweredPipeline,
    NonAffineAccess,
    Produce,
    Store,
    StoreStmt,
    buffer_alloc,
    inline_expr,
    linearize,
    poly_expr,
)


class AnnotateError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Ann:
    """One annotation line: a boolean predicate, or a (possibly guarded)
    permission atom, under a prefix of quantified fresh variables."""

    kind: str  # requires | ensures | context | invariant
    quants: tuple[Quantifier, ...]
    body: Expr
    perm: bool = False
    origin: tuple = ()
    until: str | None = None  # dormant until this reduction loop is crossed

    @property
    def live(self) -> bool:
        return self.until is None


@dataclass(frozen=True)
class RegionPerm:
    """Permission over a box of cells of one entity.

    ``dim_boxes`` pairs each entity dimension with the box's low corner (an
    expression over still-free loop variables) and a constant extent.
    """

    target: MemTarget
    alloc: FlatAlloc
    dim_boxes: tuple[tuple[str, Expr, int], ...]
    frac: Frac
    write: bool = False
    origin: tuple = ()

    def quantified(self) -> Ann:
        """Render as a quantified permission for emission."""
        used: set[str] = set()
        for _, lo, _ in self.dim_boxes:
            used |= free_vars(lo)
        quants = []
        point: dict[str, Expr] = {}
        for d, lo, ext in self.dim_boxes:
            v = _fresh_name(d, used)
            used.add(v)
            quants.append(Quantifier(v, lo, lo + Const(ext)))
            point[d] = Var(v)
        index = self.alloc.offset(point, [q.var for q in quants])
        return Ann(
            "context", tuple(quants), PermAtom(self.target, index, self.frac),
            perm=True, origin=self.origin,
        )


@dataclass
class AnnSet:
    """Annotations attached to one loop-nest node.

    Serial loops fill ``invariants``; parallel loops use ``requires`` and
    ``ensures`` as their per-iteration block contract plus ``context`` for
    permissions; consume nodes and statements use ``context``, ``requires``
    and ``ensures`` directly.
    """

    invariants: list = field(default_factory=list)
    requires: list = field(default_factory=list)
    ensures: list = field(default_factory=list)
    context: list = field(default_factory=list)


@dataclass(frozen=True)
class AnnotatedPipeline:
    lp: LoweredPipeline
    node: dict[int, AnnSet]
    top: list
    include_user: bool

    def at(self, n) -> AnnSet:
        return self.node.get(id(n)) or AnnSet()


def _fresh_name(base: str, used: set[str]) -> str:
    name = base + "f"
    k = 2
    while name in used:
        name = f"{base}f{k}"
        k += 1
    return name


def _names_in(a: Ann) -> set[str]:
    out = {q.var for q in a.quants} | free_vars(a.body)
    for q in a.quants:
        out |= free_vars(q.lo) | free_vars(q.hi)
    return out


def _subst_ann(a: Ann, m: dict[str, Expr]) -> Ann:
    return replace(
        a,
        body=substitute(a.body, m),
        quants=tuple(
            Quantifier(q.var, substitute(q.lo, m), substitute(q.hi, m)) for q in a.quants
        ),
    )


def _mentions(a: Ann, v: str) -> bool:
    return v in _names_in(a)


def _prefix(a: Ann, v: str, lo: Expr, hi: Expr) -> Ann:
    """forall vf in [lo, hi): a[v -> vf], as a loop invariant line."""
    vf = _fresh_name(v, _names_in(a))
    a = _subst_ann(a, {v: Var(vf)})
    return replace(a, kind="invariant", quants=(Quantifier(vf, lo, hi),) + a.quants)


def _quantify_full(a: Ann, v: str, lo: Expr, extent: int) -> Ann:
    if not _mentions(a, v):
        return a
    vf = _fresh_name(v, _names_in(a))
    a = _subst_ann(a, {v: Var(vf)})
    return replace(a, quants=(Quantifier(vf, lo, lo + Const(extent)),) + a.quants)


def _widen_box(lo: Expr, ext: int, v: str, vlo: Expr, vextent: int) -> tuple[Expr, int]:
    """Range of the box ``[lo, lo+ext)`` as ``v`` sweeps ``[vlo, vlo+vextent)``."""
    coeffs, const = linearize(lo)
    lo_form: dict = {}
    lo_k = hi_k = const
    vlo_c, vlo_k = linearize(vlo)
    for key, c in coeffs.items():
        if key == v:
            for bk, bc in vlo_c.items():
                lo_form[bk] = lo_form.get(bk, 0) + bc * c
            lo_k += c * vlo_k + min(0, c * (vextent - 1))
            hi_k += c * vlo_k + max(0, c * (vextent - 1))
        elif not isinstance(key, str) and v in free_vars(key):
            alo, ahi = _atom_range(key, v, vlo, vextent)
            lo_k += c * alo if c > 0 else c * ahi
            hi_k += c * ahi if c > 0 else c * alo
        else:
            lo_form[key] = lo_form.get(key, 0) + c
    order = sorted(k for k in lo_form if isinstance(k, str))
    return poly_expr(lo_form, lo_k, order), ext + (hi_k - lo_k)


def _atom_range(atom: BinOp, v: str, vlo: Expr, vextent: int) -> tuple[int, int]:
    """Numeric range of a division atom as its only variable sweeps a range."""
    e = atom.right.value
    if atom.op == "hmod":
        return 0, e - 1
    lc, lk = linearize(atom.left)
    vc, vk = linearize(vlo)
    if vc or set(lc) != {v}:
        raise NonAffineAccess(f"cannot bound {atom.op} atom while widening over {v!r}")
    c = lc[v]
    ends = (lk + c * vk, lk + c * (vk + vextent - 1))
    return hdiv(min(ends), e), hdiv(max(ends), e)


# ---------------------------------------------------------------------------


class _Annotator:
    def __init__(self, lp: LoweredPipeline, include_user: bool):
        self.lp = lp
        self.p = lp.pipeline
        self.sp = lp.scheduled
        self.include_user = include_user
        self.node: dict[int, AnnSet] = {}
        self.allocs: dict[str, FlatAlloc] = dict(lp.allocs)
        for b in self.p.buffers:
            self.allocs[b.name] = buffer_alloc(b)
        self.passed_r: dict[tuple[str, int], list[str]] = {}

    def run(self) -> AnnotatedPipeline:
        top = self.walk_node(self.lp.root)
        return AnnotatedPipeline(self.lp, self.node, top, self.include_user)

    def at(self, n) -> AnnSet:
        return self.node.setdefault(id(n), AnnSet())

    def target(self, name: str) -> MemTarget:
        return storage_target(self.p, name)

    def flatten(self, e: Expr) -> Expr:
        return flatten_storage(self.p, self.allocs, e)

    # -- seeds -------------------------------------------------------------

    def stage_subst(self, func: str, si: int) -> dict[str, Expr]:
        """Canonical dims to loop expressions, renames applied throughout."""
        f = self.p.func(func)
        s = f.stages[si]
        sub = dict(self.sp.funcs[func].origin)
        for d, arg in zip(f.dim_names(), s.lhs_args):
            if arg != Var(d):
                sub[d] = arg
        ren = {old: Var(new) for old, new in self.lp.renames.get((func, si), {}).items()}
        return {k: substitute(v, ren) for k, v in sub.items()} | ren

    def seeds_for(self, stmt: StoreStmt) -> list:
        func, si = stmt.func, stmt.stage
        f = self.p.func(func)
        s = f.stages[si]
        sub = self.stage_subst(func, si)
        state: list = [
            Ann(
                "context",
                (),
                PermAtom(stmt.target, stmt.index, Frac(1, 1)),
                perm=True,
                origin=("write", func),
            )
        ]
        for name, accesses in self.stage_reads(func, s).items():
            if name == func:
                continue  # covered by the stage's own write permission
            state.append(self.read_region(name, accesses, origin=("read", name, func, si)))
        if not self.include_user:
            return state

        until = None
        if s.rdom is not None:
            outer = s.rdom.names()[-1]
            until = self.lp.renames.get((func, si), {}).get(outer, outer)

        for cond in s.ensures:
            body = self.flatten(substitute(cond.expr, sub))
            state.append(Ann("ensures", (), body, origin=("stage", func, si, "post"), until=until))

        if si > 0:
            # pre-state of this step: the previous step's post-state, at
            # every point of the function this step actually reads
            prev = f.stages[si - 1]
            points: list[tuple[Expr, ...]] = []
            for n in walk(s.rhs):
                if isinstance(n, FuncAccess) and n.func == func and n.args not in points:
                    points.append(n.args)
            for cond in prev.ensures:
                for args in points:
                    inst = substitute(cond.expr, dict(zip(f.dim_names(), args)))
                    body = self.flatten(substitute(inst, sub))
                    state.append(
                        Ann("requires", (), body, origin=("stage", func, si, "pre"), until=until)
                    )

        if s.rdom is not None:
            for rv in s.rdom.names():
                inv = s.invariant_for(rv)
                if inv is None:
                    raise AnnotateError(
                        "MissingReductionInvariant",
                        f"{func} stage {si}: reduction variable {rv!r} has no invariant",
                    )
                rv_l = self.lp.renames.get((func, si), {}).get(rv, rv)
                body = self.flatten(substitute(inv.expr, sub))
                state.append(Ann("invariant", (), body, origin=("rinv", func, si, rv_l)))
        return state

    def stage_reads(self, func: str, s: Stage) -> dict[str, list[tuple[Expr, ...]]]:
        """Entity name to access argument tuples, in loop variables."""
        sub = self.stage_subst(func, s.index)
        out: dict[str, list[tuple[Expr, ...]]] = {}
        for e in [s.rhs] + ([s.guard] if s.guard is not None else []):
            e = substitute(inline_expr(self.sp, e), sub)
            for n in walk(e):
                name = args = None
                if isinstance(n, FuncAccess) and n.func in self.allocs:
                    name, args = n.func, n.args
                elif isinstance(n, BufAccess):
                    name, args = n.buf, n.args
                if name is not None and args not in out.setdefault(name, []):
                    out[name].append(args)
        return out

    def read_region(self, name: str, accesses, origin) -> RegionPerm:
        entity = (
            self.p.buffer(name)
            if any(b.name == name for b in self.p.buffers)
            else self.p.func(name)
        )
        boxes = []
        for idx, d in enumerate(entity.dim_names()):
            forms = [linearize(args[idx]) for args in accesses]
            shape = forms[0][0]
            if any(c != shape for c, _ in forms[1:]):
                raise NonAffineAccess(f"{name}.{d}: reads have mixed shapes; cannot box them")
            ks = [k for _, k in forms]
            order = sorted(k for k in shape if isinstance(k, str))
            boxes.append((d, poly_expr(shape, min(ks), order), max(ks) - min(ks) + 1))
        return RegionPerm(
            self.target(name), self.allocs[name], tuple(boxes), Frac(1, 2), origin=origin
        )

    def footprint_write(self, f: str) -> RegionPerm:
        fp = self.lp.footprints[f].store
        boxes = tuple((d, fp[d].lo, fp[d].extent) for d in self.p.func(f).dim_names())
        return RegionPerm(
            self.target(f), self.allocs[f], boxes, Frac(1, 1), write=True, origin=("write", f)
        )

    def consume_equalities(self, g: str) -> list[Ann]:
        """``g`` holds its defining values over the consumed footprint."""
        gf = self.p.func(g)
        fp = self.lp.footprints[g].compute
        out = []
        for cond in gf.stages[-1].ensures:
            used = set(free_vars(cond.expr))
            for d in gf.dim_names():
                used |= free_vars(fp[d].lo)
            quants = []
            point: dict[str, Expr] = {}
            for d in gf.dim_names():
                v = _fresh_name(d, used)
                used.add(v)
                quants.append(Quantifier(v, fp[d].lo, fp[d].lo + Const(fp[d].extent)))
                point[d] = Var(v)
            body = self.flatten(substitute(cond.expr, point))
            out.append(Ann("context", tuple(quants), body, origin=("ceq", g)))
        return out

    # -- walking -----------------------------------------------------------

    def walk_list(self, body: list) -> list:
        state: list = []
        for child in body:
            state.extend(self.walk_node(child))
        return state

    def walk_node(self, n) -> list:
        match n:
            case Chain(body):
                return self.walk_list(body)
            case StoreStmt():
                state = self.seeds_for(n)
                aset = self.at(n)
                for a in state:
                    if isinstance(a, Ann) and not a.perm and a.live and a.kind in ("requires", "ensures"):
                        getattr(aset, a.kind).append(a)
                return state
            case If(cond, _, body):
                return [self.guard_ann(a, cond) for a in self.walk_list(body)]
            case Loop(dim, _, body):
                inner = self.walk_list(n.symbolic if n.symbolic is not None else body)
                if dim.kind == "serial":
                    return self.through_serial(n, inner)
                if dim.kind == "parallel":
                    return self.through_parallel(n, inner)
                return self.through_unrolled(n, inner)
            case Consume(g, body):
                state = self.walk_list(body)
                if self.include_user:
                    self.at(n).context.extend(self.consume_equalities(g))
                # read claims on g stop here: outside the consume section the
                # producer's write claim on the same cells stands alone
                return [
                    a
                    for a in state
                    if not (isinstance(a, RegionPerm) and not a.write and a.target.name == g)
                    and getattr(a, "origin", ())[:2] != ("ceq", g)
                ]
            case Produce(f, body):
                state = self.walk_list(body)
                # everything inside is about producing f; its cell-level
                # permissions collapse into one footprint-wide write claim
                out = [
                    a
                    for a in state
                    if not (self.stage_value_of(a, f) or self.mentions_target(a, f))
                ]
                return out + [self.footprint_write(f)]
            case Store(f, _, body):
                return [a for a in self.walk_list(body) if not self.mentions_target(a, f)]
        raise TypeError(f"unhandled node {type(n).__name__}")

    def guard_ann(self, a, cond: Expr):
        if isinstance(a, RegionPerm):
            return a  # the box over-approximates the guarded body
        return replace(a, body=BinOp("==>", cond, a.body))

    def stage_value_of(self, a, f: str) -> bool:
        if isinstance(a, RegionPerm) or a.perm:
            return False
        return len(a.origin) >= 2 and a.origin[0] in ("stage", "rinv", "pendI") and a.origin[1] == f

    def mentions_target(self, a, f: str) -> bool:
        if isinstance(a, RegionPerm):
            return a.target.name == f
        for n in walk(a.body):
            if isinstance(n, (TableRead, PermAtom)) and n.target.name == f:
                return True
        return False

    # -- per-loop transformation rows ---------------------------------------

    def through_serial(self, loop: Loop, state: list) -> list:
        dim = loop.dim
        v, lo, ext = dim.var, dim.lo, dim.extent
        hi = lo + Const(ext)
        aset = self.at(loop)
        aset.invariants.append(
            Ann(
                "invariant",
                (),
                BinOp("&&", BinOp("<=", lo, Var(v)), BinOp("<=", Var(v), hi)),
                origin=("bounds", v),
            )
        )
        out: list = []
        perm_lines: list = []
        value_lines: list = []
        for a in state:
            if isinstance(a, RegionPerm):
                widened = self.widen_region(a, v, lo, ext)
                perm_lines.append(widened)
                out.append(widened)
                continue
            step = self.reduction_step(a, loop)
            if step is not None:
                lines, outward = step
                value_lines.extend(lines)
                out.extend(outward)
                continue
            if not a.live:
                out.append(self.wake(a, loop))
                continue
            if not _mentions(a, v):
                out.append(a)
                continue
            if a.perm or a.kind == "context":
                value_lines.append(_prefix(a, v, lo, hi))
            elif a.kind == "ensures":
                value_lines.append(_prefix(a, v, lo, Var(v)))
            elif a.kind == "requires":
                value_lines.append(_prefix(a, v, Var(v), hi))
            out.append(_quantify_full(a, v, lo, ext))
        aset.invariants.extend(perm_lines)
        aset.invariants.extend(value_lines)
        return out

    def through_parallel(self, loop: Loop, state: list) -> list:
        dim = loop.dim
        v, lo, ext = dim.var, dim.lo, dim.extent
        aset = self.at(loop)
        out: list = []
        for a in state:
            if isinstance(a, RegionPerm):
                held = a if a.write else replace(a, frac=replace(a.frac, par=a.frac.par + (ext,)))
                aset.context.append(held)
                # iterations hold split fractions; the join returns them whole
                out.append(self.widen_region(a, v, lo, ext))
                continue
            step = self.reduction_step(a, loop, parallel=True)
            if step is not None:
                pre, post, outward = step
                aset.requires.extend(pre)
                aset.ensures.extend(post)
                out.extend(outward)
                continue
            if not a.live:
                out.append(self.wake(a, loop))
                continue
            if a.perm or a.kind == "context":
                aset.context.append(a)
            elif a.kind == "ensures":
                aset.ensures.append(a)
            else:
                aset.requires.append(a)
            out.append(_quantify_full(a, v, lo, ext))
        return out

    def through_unrolled(self, loop: Loop, state: list) -> list:
        dim = loop.dim
        out = []
        for a in state:
            if isinstance(a, RegionPerm):
                out.append(self.widen_region(a, dim.var, dim.lo, dim.extent))
            elif not a.live:
                out.append(self.wake(a, loop))
            else:
                out.append(_quantify_full(a, dim.var, dim.lo, dim.extent))
        return out

    def wake(self, a: Ann, loop: Loop) -> Ann:
        if a.until == loop.dim.var and (a.origin[1], a.origin[2]) == loop.owner:
            return replace(a, until=None)
        return a

    def widen_region(self, a: RegionPerm, v: str, lo: Expr, ext: int) -> RegionPerm:
        if not any(v in free_vars(b_lo) for _, b_lo, _ in a.dim_boxes):
            return a
        boxes = tuple((d, *_widen_box(b_lo, b_ext, v, lo, ext)) for d, b_lo, b_ext in a.dim_boxes)
        return replace(a, dim_boxes=boxes)

    def reduction_step(self, a, loop: Loop, parallel: bool = False):
        """Invariant threading for reductions; None when ``a`` is uninvolved.

        Serial result: (invariant lines, outward state).  Parallel result:
        (pre, post, outward) for the block contract.
        """
        if isinstance(a, RegionPerm) or a.perm or a.origin[:1] not in (("rinv",), ("pendI",)):
            return None
        func, si = a.origin[1], a.origin[2]
        dim = loop.dim
        v, lo, ext = dim.var, dim.lo, dim.extent
        hi = lo + Const(ext)

        if a.origin[0] == "rinv":
            if loop.owner != (func, si) or v != a.origin[3]:
                if self._own_reduction_loop(a, loop):
                    # an inner reduction variable's loop; not this invariant's
                    return ([], [a]) if not parallel else ([], [], [a])
                return None
            body = a.body
            for rprev in self.passed_r.setdefault((func, si), []):
                body = substitute(body, {rprev: self._rdom_range(func, si, rprev)[0]})
            self.passed_r[(func, si)].append(v)
            inv = replace(a, body=body)
            self.at(loop).invariants.append(inv)
            pend = Ann("invariant", a.quants, body, origin=("pendI", func, si, v))
            return ([], [pend]) if not parallel else ([], [], [pend])

        # a pending invariant climbing out of its reduction loop
        if loop.owner != (func, si):
            return None
        if self._own_reduction_loop(a, loop):
            # an enclosing reduction loop's own invariant subsumes it
            return ([], []) if not parallel else ([], [], [])
        rprev = a.origin[3]
        rlo, rhi = self._rdom_range(func, si, rprev)
        P = replace(a, body=substitute(a.body, {rprev: rlo}))
        Q = replace(a, body=substitute(a.body, {rprev: rhi}))
        outward = [_quantify_full(a, v, lo, ext)]
        if parallel:
            return [replace(P, kind="requires")], [replace(Q, kind="ensures")], outward
        # completed iterations have run the whole reduction, pending ones
        # have not started it
        lines = [
            _prefix(Q, v, lo, Var(v)) if _mentions(Q, v) else replace(Q, kind="invariant"),
            _prefix(P, v, Var(v), hi) if _mentions(P, v) else replace(P, kind="invariant"),
        ]
        return lines, outward

    def _own_reduction_loop(self, a: Ann, loop: Loop) -> bool:
        func, si = a.origin[1], a.origin[2]
        if loop.owner != (func, si):
            return False
        s = self.p.func(func).stages[si]
        ren = self.lp.renames.get((func, si), {})
        rnames = {ren.get(r, r) for r in (s.rdom.names() if s.rdom else ())}
        return loop.dim.var in rnames

    def _rdom_range(self, func: str, si: int, rv: str) -> tuple[Expr, Expr]:
        s = self.p.func(func).stages[si]
        ren = self.lp.renames.get((func, si), {})
        for r in s.rdom.names():
            if ren.get(r, r) == rv:
                iv = s.rdom.interval(r)
                return iv.lo, Const(iv.lo_int + iv.extent)
        raise KeyError(rv)


def storage_target(p, name: str) -> MemTarget:
    if any(b.name == name for b in p.buffers):
        return MemTarget("buffer", name)
    return MemTarget("output" if name == p.output else "alloc", name)


def flatten_storage(p, allocs: dict[str, FlatAlloc], e: Expr) -> Expr:
    """Rewrite entity accesses in a predicate to flat table reads."""

    def repl(n: Expr) -> Expr | None:
        if isinstance(n, FuncAccess) and n.func in allocs:
            point = dict(zip(p.func(n.func).dim_names(), n.args))
            return TableRead(storage_target(p, n.func), allocs[n.func].offset(point, []))
        if isinstance(n, BufAccess):
            point = dict(zip(p.buffer(n.buf).dim_names(), n.args))
            return TableRead(storage_target(p, n.buf), allocs[n.buf].offset(point, []))
        return None

    return rewrite(e, repl)


def annotate(lp: LoweredPipeline, include_user: bool = True) -> AnnotatedPipeline:
    """Generate and thread all annotations for a lowered pipeline.

    With ``include_user`` false only machine-derived annotations remain:
    permissions, loop bounds, and footprint contracts.  That is the mode
    behind memory-safety-only checking.
    """
    return _Annotator(lp, include_user).run()
