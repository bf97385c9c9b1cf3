"""Schedule application, bounds inference, and loop-nest construction.

The passes here turn a validated pipeline plus a directive list into the
imperative form everything downstream consumes: ``apply_directives``
rewrites each function's loop axes and records placements, ``infer_bounds``
computes the region of every producer its consumers actually touch, and
``build_loop_nest`` assembles the produce/consume/store tree with all
storage flattened to one-dimensional arrays.

Index expressions are kept in a linear normal form (``c1*v1 + ... + c0``
with positive terms first, variables ordered outermost loop first), which
makes allocation offsets deterministic and lets the emitter hoist
loop-invariant parts of an index by splitting the sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .ir import (
    BinOp,
    BufAccess,
    Const,
    Expr,
    Func,
    FuncAccess,
    MemTarget,
    Pipeline,
    ScheduleError,
    Span,
    Stage,
    TableRead,
    Var,
    as_expr,
    free_vars,
    lt,
    rewrite,
    substitute,
    walk,
)

MAX_UNROLL = 256


# ---------------------------------------------------------------------------
# Linear index arithmetic


class NonAffineAccess(ScheduleError):
    def __init__(self, message: str, span: Span | None = None):
        super().__init__("NonAffineAccess", message, span)


Term = "str | Expr"  # a loop variable, or an opaque hdiv/hmod atom


def linearize(e: Expr) -> tuple[dict, int]:
    """Decompose ``e`` as sum(coeff * term) + const, or raise NonAffineAccess.

    Terms are loop variables; division and remainder by a positive constant
    (the shapes fusion introduces) survive as opaque atoms keyed by their
    expression node.
    """
    match e:
        case Const(v):
            return {}, v
        case Var(n):
            return {n: 1}, 0
        case BinOp("+", l, r):
            cl, kl = linearize(l)
            cr, kr = linearize(r)
            return _merge(cl, cr, 1), kl + kr
        case BinOp("-", l, r):
            cl, kl = linearize(l)
            cr, kr = linearize(r)
            return _merge(cl, cr, -1), kl - kr
        case BinOp("*", l, r):
            cl, kl = linearize(l)
            cr, kr = linearize(r)
            if not cl:
                return {v: kl * c for v, c in cr.items() if kl * c != 0}, kl * kr
            if not cr:
                return {v: kr * c for v, c in cl.items() if kr * c != 0}, kl * kr
            raise NonAffineAccess("product of two loop-dependent expressions in an access")
        case BinOp("hdiv" | "hmod", _, Const(d)) if d > 0:
            return {e: 1}, 0
    raise NonAffineAccess(f"access index is not affine: {type(e).__name__}")


def _merge(a: dict[str, int], b: dict[str, int], sign: int) -> dict[str, int]:
    out = dict(a)
    for v, c in b.items():
        out[v] = out.get(v, 0) + sign * c
        if out[v] == 0:
            del out[v]
    return out


def poly_expr(coeffs: dict, const: int, order: list[str]) -> Expr:
    """Rebuild a linear form as an expression.

    Positive terms come first so the sum never has to lead with a negation;
    within each sign group, variables follow ``order`` (outermost loops
    first), then unknown variables alphabetically, then opaque atoms.
    """
    rank = {v: i for i, v in enumerate(order)}

    def key(v) -> tuple:
        if isinstance(v, str):
            return (coeffs[v] < 0, 0, rank.get(v, len(order)), v)
        return (coeffs[v] < 0, 1, len(order), repr(v))

    e: Expr | None = None
    for v in sorted(coeffs, key=key):
        c = coeffs[v]
        base: Expr = Var(v) if isinstance(v, str) else v
        mag: Expr = base if abs(c) == 1 else BinOp("*", base, Const(abs(c)))
        if e is None:
            e = mag if c > 0 else BinOp("-", Const(0), mag)
        else:
            e = BinOp("+" if c > 0 else "-", e, mag)
    if e is None:
        return Const(const)
    if const > 0:
        e = BinOp("+", e, Const(const))
    elif const < 0:
        e = BinOp("-", e, Const(-const))
    return e


def fold_divmod(coeffs: dict, const: int) -> tuple[dict, int]:
    """Collapse ``c*hmod(v, E) + c*E*hdiv(v, E)`` back into ``c*v``.

    The identity ``v == E*hdiv(v, E) + hmod(v, E)`` holds for every integer
    when ``E > 0``, so a fused loop variable flattened against matching
    strides reduces to itself.
    """
    out = dict(coeffs)
    changed = True
    while changed:
        changed = False
        for k in list(out):
            if not (isinstance(k, BinOp) and k.op == "hmod"):
                continue
            e = k.right.value  # linearize only admits positive-constant divisors
            div = BinOp("hdiv", k.left, k.right)
            c = out.get(k, 0)
            if c != 0 and out.get(div, 0) == c * e:
                del out[k]
                del out[div]
                ic, ik = linearize(k.left)
                out = _merge(out, {v: cv * c for v, cv in ic.items()}, 1)
                const += c * ik
                changed = True
                break
    return out, const


def normalize_affine(e: Expr, order: list[str]) -> Expr:
    coeffs, const = linearize(e)
    return poly_expr(coeffs, const, order)


def dec(e: Expr) -> Expr:
    """``e - 1`` with the constant folded into an affine tail when possible."""
    match e:
        case Const(v):
            return Const(v - 1)
        case BinOp("+", l, Const(v)) if v > 1:
            return BinOp("+", l, Const(v - 1))
        case BinOp("+", l, Const(1)):
            return l
        case BinOp("-", l, Const(v)):
            return BinOp("-", l, Const(v + 1))
    return BinOp("-", e, Const(1))


# ---------------------------------------------------------------------------
# Scheduled form


@dataclass(frozen=True)
class Axis:
    """One loop of a function's nest; lists hold them outermost-first.

    ``original`` axes still stand for a declared dimension and iterate a
    range chosen by bounds inference; split or fused children iterate a
    zero-based range of known extent.  ``roots`` names the declared
    dimensions the axis covers (one, or several after fusion).
    """

    var: str
    display: str
    root: str
    kind: str = "serial"
    extent: int = 0
    lo: Expr = Const(0)
    original: bool = False
    roots: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.roots:
            object.__setattr__(self, "roots", (self.root,))


@dataclass(frozen=True)
class ScheduledFunc:
    func: Func
    axes: tuple[Axis, ...]
    origin: dict[str, Expr]
    guards: tuple[Expr, ...]
    compute_site: tuple[str, str] | None = None  # (consumer func, axis var)
    store_site: tuple[str, str] | None = None
    inline: bool = False
    scheduled: bool = False

    def axis(self, var: str) -> Axis:
        for a in self.axes:
            if a.var == var:
                return a
        raise KeyError(var)


@dataclass(frozen=True)
class ScheduledPipeline:
    pipeline: Pipeline
    funcs: dict[str, ScheduledFunc]
    directives: tuple = ()

    @property
    def realized(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.pipeline.funcs if not self.funcs[f.name].inline)


def _err(code: str, msg: str, span: Span | None = None) -> ScheduleError:
    return ScheduleError(code, msg, span)


def apply_directives(p: Pipeline, ds: list) -> ScheduledPipeline:
    """Apply a directive list in order.  Bounds must already be concrete."""
    state: dict[str, ScheduledFunc] = {}
    for f in p.funcs:
        axes = tuple(
            Axis(var=d, display=d, root=d, extent=iv.extent, lo=iv.lo, original=True)
            for d, iv in reversed(f.dims)
        )
        state[f.name] = ScheduledFunc(
            func=f, axes=axes, origin={d: Var(d) for d, _ in f.dims}, guards=()
        )

    for d in ds:
        if d.func not in state:
            raise _err("UnknownFunc", f"schedule names unknown func {d.func!r}", d.span)
        state[d.func] = _apply_one(state, state[d.func], d)

    return ScheduledPipeline(p, _resolve_placements(p, state), tuple(ds))


def _apply_one(state: dict[str, ScheduledFunc], sf: ScheduledFunc, d) -> ScheduledFunc:
    sf = replace(sf, scheduled=True)

    if d.kind == "split":
        old, outer, inner, factor = d.args
        if factor <= 0:
            raise _err("SplitNonPositiveFactor", f"split factor must be positive, got {factor}", d.span)
        ax = _find_axis(sf, old, d.span)
        for taken in (outer, inner):
            if taken != old and any(a.var == taken for a in sf.axes):
                raise _err("DuplicateDim", f"{d.func}: name {taken!r} already in use", d.span)
        if outer == inner:
            raise _err("DuplicateDim", f"{d.func}: split halves must have distinct names", d.span)
        n_outer = -(-ax.extent // factor)
        sub = ax.lo + Var(outer) * factor + Var(inner)
        i = sf.axes.index(ax)
        new_axes = (
            sf.axes[:i]
            + (
                Axis(outer, f"{ax.root}.{outer}", ax.root, ax.kind, n_outer),
                Axis(inner, f"{ax.root}.{inner}", ax.root, "serial", factor),
            )
            + sf.axes[i + 1 :]
        )
        origin = {k: substitute(v, {old: sub}) for k, v in sf.origin.items()}
        guards = tuple(substitute(g, {old: sub}) for g in sf.guards)
        if ax.extent % factor != 0:
            guards += (lt(sub, ax.lo + ax.extent),)
        return replace(sf, axes=new_axes, origin=origin, guards=guards)

    if d.kind == "fuse":
        a_name, b_name, fused = d.args
        ax_a = _find_axis(sf, a_name, d.span)
        ax_b = _find_axis(sf, b_name, d.span)
        ia, ib = sf.axes.index(ax_a), sf.axes.index(ax_b)
        if ib != ia - 1:
            raise _err("FuseNotAdjacent", f"{d.func}: {b_name!r} must be the loop immediately outside {a_name!r}", d.span)
        if ax_a.kind != ax_b.kind:
            raise _err("FuseKindMismatch", f"{d.func}: cannot fuse a {ax_a.kind} loop with a {ax_b.kind} one", d.span)
        if any(a.var == fused for a in sf.axes if a.var not in (a_name, b_name)):
            raise _err("DuplicateDim", f"{d.func}: name {fused!r} already in use", d.span)
        joined = set(ax_a.roots) | set(ax_b.roots)
        for s in sf.func.stages:
            if s.kind == "pure":
                continue
            stage_dims = set(_stage_loop_dims(sf.func, s))
            if joined & stage_dims and not joined <= stage_dims:
                raise _err("FuseAcrossUpdate", f"{d.func}: fuse joins a dimension stage {s.index} does not iterate", d.span)
        sub = {
            a_name: ax_a.lo + BinOp("hmod", Var(fused), Const(ax_a.extent)),
            b_name: ax_b.lo + BinOp("hdiv", Var(fused), Const(ax_a.extent)),
        }
        fused_ax = Axis(
            fused, fused, fused, ax_a.kind, ax_a.extent * ax_b.extent, roots=ax_b.roots + ax_a.roots
        )
        new_axes = sf.axes[:ib] + (fused_ax,) + sf.axes[ia + 1 :]
        origin = {k: substitute(v, sub) for k, v in sf.origin.items()}
        guards = tuple(substitute(g, sub) for g in sf.guards)
        return replace(sf, axes=new_axes, origin=origin, guards=guards)

    if d.kind == "reorder":
        wanted = list(d.args)
        have = [a.var for a in sf.axes]
        if sorted(wanted) != sorted(have):
            raise _err("UnknownDim", f"{d.func}: reorder must list every loop exactly once (have {', '.join(have)})", d.span)
        new_order = list(reversed(wanted))  # arguments are innermost-first
        by_var = {a.var: a for a in sf.axes}
        if len(sf.func.stages) > 1:
            old_pos = {v: i for i, v in enumerate(have)}
            new_pos = {v: i for i, v in enumerate(new_order)}
            for s in have:
                if by_var[s].kind != "serial":
                    continue
                for par in have:
                    if by_var[par].kind != "parallel":
                        continue
                    if old_pos[s] < old_pos[par] and new_pos[s] > new_pos[par]:
                        raise _err(
                            "ReorderUnsafe",
                            f"{d.func}: moving serial {s!r} inside parallel {par!r} would change the order of update steps",
                            d.span,
                        )
        return replace(sf, axes=tuple(by_var[v] for v in new_order))

    if d.kind in ("parallel", "unroll"):
        (var,) = d.args
        ax = _find_axis(sf, var, d.span)
        if d.kind == "unroll" and ax.extent > MAX_UNROLL:
            raise _err("UnrollTooLarge", f"{d.func}: unrolling {var!r} would expand {ax.extent} copies", d.span)
        new_kind = "parallel" if d.kind == "parallel" else "unrolled"
        i = sf.axes.index(ax)
        return replace(sf, axes=sf.axes[:i] + (replace(ax, kind=new_kind),) + sf.axes[i + 1 :])

    if d.kind in ("compute_at", "store_at"):
        consumer, var = d.args
        if consumer not in state:
            raise _err("UnknownFunc", f"{d.func}: {d.kind} names unknown func {consumer!r}", d.span)
        if consumer == d.func:
            raise _err("PlacementCycle", f"{d.func}: cannot be computed inside itself", d.span)
        _find_axis(state[consumer], var, d.span)
        site = (consumer, var)
        if d.kind == "compute_at":
            return replace(sf, compute_site=site)
        return replace(sf, store_site=site)

    raise _err("UnknownDirective", f"unsupported directive {d.kind!r}", d.span)


def _find_axis(sf: ScheduledFunc, var: str, span: Span) -> Axis:
    for a in sf.axes:
        if a.var == var:
            return a
    raise _err("UnknownDim", f"{sf.func.name}: no loop named {var!r}", span)


def _stage_loop_dims(f: Func, s: Stage) -> tuple[str, ...]:
    if s.kind == "pure":
        return f.dim_names()
    return tuple(d for d, arg in zip(f.dim_names(), s.lhs_args) if arg == Var(d))


def _consumers(p: Pipeline) -> dict[str, set[str]]:
    """Func name -> funcs whose definitions read it."""
    out: dict[str, set[str]] = {f.name: set() for f in p.funcs}
    for f in p.funcs:
        for s in f.stages:
            for e in [s.rhs] + ([s.guard] if s.guard is not None else []):
                for n in walk(e):
                    if isinstance(n, FuncAccess) and n.func != f.name:
                        out[n.func].add(f.name)
    return out


def _resolve_placements(p: Pipeline, state: dict[str, ScheduledFunc]) -> dict[str, ScheduledFunc]:
    consumers = _consumers(p)
    out: dict[str, ScheduledFunc] = {}
    for f in p.funcs:
        sf = state[f.name]
        if f.name == p.output:
            if sf.compute_site or sf.store_site:
                raise _err("PlacementCycle", f"output {f.name!r} cannot be placed inside another func")
            out[f.name] = sf
            continue
        if sf.store_site and not sf.compute_site:
            raise _err("StoreWithoutCompute", f"{f.name}: store_at without compute_at")
        if sf.compute_site:
            out[f.name] = sf if sf.store_site else replace(sf, store_site=sf.compute_site)
        elif sf.scheduled or len(f.stages) > 1:
            out[f.name] = sf  # realized at root
        else:
            out[f.name] = replace(sf, inline=True)

    # Placement sanity: sites must name realized consumers that actually use
    # the producer, store must enclose compute, and chains must be acyclic.
    for name, sf in out.items():
        if sf.compute_site is None:
            continue
        consumer, var = sf.compute_site
        if out[consumer].inline:
            raise _err("PlacementInInlined", f"{name}: computed at {consumer!r}, which is inlined away")
        if consumer not in _transitive_consumers(consumers, name, out):
            raise _err("PlacementNotConsumer", f"{name}: {consumer!r} never uses it")
        sc, svar = sf.store_site  # type: ignore[misc]
        if sc != consumer:
            raise _err("StorePlacementUnsupported", f"{name}: store_at and compute_at must name the same func")
        cvars = [a.var for a in out[consumer].axes]
        if cvars.index(svar) > cvars.index(var):
            raise _err("StoreBelowCompute", f"{name}: storage at {svar!r} sits inside the compute loop {var!r}")

    for name in out:
        chain: list[str] = []
        cur = name
        while out[cur].compute_site is not None:
            if cur in chain:
                raise _err("PlacementCycle", f"compute_at chain loops through {cur!r}")
            chain.append(cur)
            cur = out[cur].compute_site[0]
    return out


def _transitive_consumers(consumers: dict[str, set[str]], name: str, out: dict[str, ScheduledFunc]) -> set[str]:
    """Funcs that read ``name`` directly or through inlined middlemen."""
    result: set[str] = set()
    frontier = list(consumers[name])
    while frontier:
        g = frontier.pop()
        if g in result:
            continue
        result.add(g)
        if out[g].inline:
            frontier.extend(consumers[g])
    return result


# ---------------------------------------------------------------------------
# Bounds inference


@dataclass(frozen=True)
class FootDim:
    lo: Expr
    extent: int

    @property
    def hi(self) -> Expr:
        if isinstance(self.lo, Const):
            return Const(self.lo.value + self.extent)
        return BinOp("+", self.lo, Const(self.extent))


@dataclass(frozen=True)
class Footprint:
    """Per-dimension regions of one func: where it must be computed, and the
    (possibly wider) region its storage covers."""

    compute: dict[str, FootDim]
    store: dict[str, FootDim]


@dataclass(frozen=True)
class FlatAlloc:
    name: str
    size: int
    strides: dict[str, int]
    base: dict[str, Expr]

    def offset(self, args: dict[str, Expr], order: list[str]) -> Expr:
        coeffs: dict = {}
        const = 0
        for d, stride in self.strides.items():
            ca, ka = linearize(args[d])
            cb, kb = linearize(self.base[d])
            for v, c in _merge(ca, cb, -1).items():
                coeffs[v] = coeffs.get(v, 0) + stride * c
                if coeffs[v] == 0:
                    del coeffs[v]
            const += stride * (ka - kb)
        coeffs, const = fold_divmod(coeffs, const)
        return poly_expr(coeffs, const, order)


def _site_path(sp: ScheduledPipeline, name: str) -> list[tuple[str, str]]:
    sf = sp.funcs[name]
    if sf.compute_site is None:
        return []
    consumer, var = sf.compute_site
    return _site_path(sp, consumer) + [(consumer, var)]


def _free_axes(sp: ScheduledPipeline, site: list[tuple[str, str]]) -> list[str]:
    """Loop variables in scope at a site, outermost first."""
    free: list[str] = []
    for consumer, var in site:
        for a in sp.funcs[consumer].axes:
            free.append(a.var)
            if a.var == var:
                break
    return free


def infer_bounds(sp: ScheduledPipeline) -> dict[str, Footprint]:
    p = sp.pipeline
    inline_body = _inline_closure(sp)
    fps: dict[str, Footprint] = {}

    out_f = p.output_func
    full = {d: FootDim(iv.lo, iv.extent) for d, iv in out_f.dims}
    fps[p.output] = Footprint(compute=full, store=full)

    for name in reversed([n for n in sp.realized if n != p.output]):
        sf = sp.funcs[name]
        compute_path = _site_path(sp, name)
        store_path = compute_path
        if sf.store_site is not None and sf.store_site != sf.compute_site:
            consumer, svar = sf.store_site
            store_path = _site_path(sp, consumer) + [(consumer, svar)]

        accesses = _collect_accesses(sp, name, inline_body)
        if not accesses:
            raise NonAffineAccess(f"{name} is realized but never read; nothing to infer bounds from")
        fps[name] = Footprint(
            compute=_region(sp, sf, accesses, _free_axes(sp, compute_path), fps),
            store=_region(sp, sf, accesses, _free_axes(sp, store_path), fps),
        )
    return fps


def _inline_closure(sp: ScheduledPipeline) -> dict[str, Expr]:
    """Fully substituted stage-0 bodies of every inlined func."""
    done: dict[str, Expr] = {}

    def body(name: str) -> Expr:
        if name not in done:
            f = sp.pipeline.func(name)
            done[name] = _inline_into(sp, f.stages[0].rhs, body)
        return done[name]

    for f in sp.pipeline.funcs:
        if sp.funcs[f.name].inline:
            body(f.name)
    return done


def _inline_into(sp: ScheduledPipeline, e: Expr, body) -> Expr:
    def repl(n: Expr) -> Expr | None:
        if isinstance(n, FuncAccess) and n.func in sp.funcs and sp.funcs[n.func].inline:
            g = sp.pipeline.func(n.func)
            return substitute(body(n.func), dict(zip(g.dim_names(), n.args)))
        return None

    return rewrite(e, repl)


def inline_expr(sp: ScheduledPipeline, e: Expr) -> Expr:
    """Substitute every inlined func application in ``e`` by its definition."""
    closure = _inline_closure(sp)
    return _inline_into(sp, e, lambda n: closure[n])


def _collect_accesses(sp, name: str, inline_body: dict[str, Expr]) -> list[tuple[str, tuple[Expr, ...]]]:
    """Occurrences of ``name(args)`` in realized consumers, arguments
    rewritten into the consumer's loop variables."""
    out: list[tuple[str, tuple[Expr, ...]]] = []
    for g in sp.pipeline.funcs:
        if sp.funcs[g.name].inline or g.name == name:
            continue
        gsf = sp.funcs[g.name]
        for s in g.stages:
            for e in [s.rhs] + ([s.guard] if s.guard is not None else []):
                e = _inline_into(sp, e, lambda n: inline_body[n])
                e = substitute(e, gsf.origin)
                for node in walk(e):
                    if isinstance(node, FuncAccess) and node.func == name:
                        out.append((g.name, node.args))
    return out


def _axis_range(sp, fname: str, ax: Axis, fps) -> tuple[Expr, Expr]:
    """Inclusive (lo, hi) of one loop, possibly in outer-loop variables."""
    if ax.original:
        fd = fps[fname].compute[ax.root]
        return fd.lo, dec(fd.hi)
    return Const(0), Const(ax.extent - 1)


def _region(sp, sf: ScheduledFunc, accesses, free: list[str], fps) -> dict[str, FootDim]:
    region: dict[str, FootDim] = {}
    split_roots = {r for a in sf.axes if not a.original for r in a.roots}
    for idx, (dname, iv) in enumerate(sf.func.dims):
        if dname in split_roots:
            # A split or fused dimension iterates over its declared range, so
            # the storage must cover it regardless of what consumers touch.
            region[dname] = FootDim(iv.lo, iv.extent)
            continue
        mins = []
        maxs = []
        for consumer, args in accesses:
            mins.append(_extreme(sp, consumer, args[idx], free, fps, want_max=False))
            maxs.append(_extreme(sp, consumer, args[idx], free, fps, want_max=True))
        lo_c, lo_k = _combine(mins, take_max=False, who=sf.func.name)
        hi_c, hi_k = _combine(maxs, take_max=True, who=sf.func.name)
        if _merge(hi_c, lo_c, -1):
            raise NonAffineAccess(f"{sf.func.name}.{dname}: footprint extent is not constant")
        region[dname] = FootDim(poly_expr(lo_c, lo_k, free), hi_k - lo_k + 1)
    return region


def _extreme(sp, consumer: str, e: Expr, free: list[str], fps, want_max: bool) -> tuple[dict, int]:
    """Extremal value of an affine access over all loops not in ``free``."""
    coeffs, const = linearize(e)
    freeset = set(free)

    def is_free(k) -> bool:
        if isinstance(k, str):
            return k in freeset
        return free_vars(k) <= freeset

    for _ in range(1000):
        inner = [k for k in coeffs if not is_free(k)]
        if not inner:
            return coeffs, const
        k = inner[0]
        c = coeffs.pop(k)
        if isinstance(k, str):
            lo, hi = _var_bounds(sp, consumer, k, fps)
            bound = hi if (c > 0) == want_max else lo
            bc, bk = linearize(bound)
            coeffs = _merge(coeffs, {bv: bcv * c for bv, bcv in bc.items()}, 1)
            const += c * bk
        else:
            const += c * _atom_bound(sp, consumer, k, freeset, fps, want_atom_max=(c > 0) == want_max)
    raise NonAffineAccess(f"{consumer}: could not close access bounds over loop variables")


def _atom_bound(sp, consumer: str, atom: BinOp, freeset: set[str], fps, want_atom_max: bool) -> int:
    """Numeric extreme of a division or remainder atom over non-free loops."""
    e = atom.right.value
    if atom.op == "hmod":
        return e - 1 if want_atom_max else 0
    ic, ik = _extreme(sp, consumer, atom.left, list(freeset), fps, want_max=want_atom_max)
    if ic:
        raise NonAffineAccess(f"{consumer}: cannot bound {atom.op} over a mix of inner and outer loop variables")
    from .ir import hdiv as _hdiv

    return _hdiv(ik, e)


def _var_bounds(sp, consumer: str, v: str, fps) -> tuple[Expr, Expr]:
    """Inclusive bounds of a loop or reduction variable of ``consumer``."""
    sf = sp.funcs[consumer]
    for ax in sf.axes:
        if ax.var == v:
            return _axis_range(sp, consumer, ax, fps)
    for s in sf.func.stages:
        if s.rdom is not None and v in s.rdom.names():
            iv = s.rdom.interval(v)
            return iv.lo, Const(iv.lo_int + iv.extent - 1)
    raise NonAffineAccess(f"{consumer}: access mentions unknown variable {v!r}")


def _combine(forms, take_max: bool, who: str) -> tuple[dict[str, int], int]:
    best = forms[0]
    for c, k in forms[1:]:
        if c != best[0]:
            raise NonAffineAccess(f"{who}: consumer accesses disagree in shape; cannot union footprints")
        if (k > best[1]) == take_max:
            best = (c, k)
    return best


# ---------------------------------------------------------------------------
# The loop nest


@dataclass(frozen=True)
class LoopDim:
    var: str
    display: str
    kind: str
    lo: Expr
    extent: int


@dataclass
class Loop:
    dim: LoopDim
    owner: tuple[str, int]
    body: list
    # unrolled loops hold expanded copies in ``body``; the original body,
    # with the loop variable still symbolic, is kept for the annotator
    symbolic: list | None = None

    kind = "loop"


@dataclass
class Produce:
    func: str
    body: list

    kind = "produce"


@dataclass
class Consume:
    func: str
    body: list

    kind = "consume"


@dataclass
class Store:
    func: str
    alloc: FlatAlloc
    body: list

    kind = "store"


@dataclass
class If:
    cond: Expr
    owner: tuple[str, int]
    body: list

    kind = "if"


@dataclass
class StoreStmt:
    func: str
    stage: int
    target: MemTarget
    index: Expr
    value: Expr
    point: dict[str, Expr]
    body: list = field(default_factory=list)

    kind = "stmt"


@dataclass
class Chain:
    """Top-level sequence when several funcs are realized at the root."""

    body: list

    kind = "chain"


Node = Loop | Produce | Consume | Store | If | StoreStmt | Chain


@dataclass(frozen=True)
class LoweredPipeline:
    pipeline: Pipeline
    scheduled: ScheduledPipeline
    footprints: dict[str, Footprint]
    allocs: dict[str, FlatAlloc]
    root: Node
    renames: dict[tuple[str, int], dict[str, str]]


def _alloc_for(sp, name: str, fps) -> FlatAlloc:
    p = sp.pipeline
    f = p.func(name)
    size = 1
    strides: dict[str, int] = {}
    base: dict[str, Expr] = {}
    for d, iv in f.dims:  # declaration order; the first dimension is innermost
        strides[d] = size
        if name == p.output:
            base[d] = iv.lo
            size *= iv.extent
        else:
            base[d] = fps[name].store[d].lo
            size *= fps[name].store[d].extent
    return FlatAlloc(name, size, strides, base)


def buffer_alloc(b) -> FlatAlloc:
    size = 1
    strides: dict[str, int] = {}
    base: dict[str, Expr] = {}
    for d, iv in b.dims:
        strides[d] = size
        base[d] = iv.lo
        size *= iv.extent
    return FlatAlloc(b.name, size, strides, base)


def build_loop_nest(sp: ScheduledPipeline, fps: dict[str, Footprint]) -> LoweredPipeline:
    p = sp.pipeline
    allocs = {name: _alloc_for(sp, name, fps) for name in sp.realized}
    for b in p.buffers:
        allocs[b.name] = buffer_alloc(b)
    builder = _Builder(sp, fps, allocs)

    roots = [n for n in sp.realized if sp.funcs[n].compute_site is None]
    nest: list[Node] = [builder.produce(roots[-1], [])]
    for name in reversed(roots[:-1]):
        nest = [builder.produce(name, []), Consume(name, nest)]
    root: Node = nest[0] if len(nest) == 1 else Chain(nest)
    return LoweredPipeline(p, sp, fps, allocs, root, builder.renames)


class _Builder:
    def __init__(self, sp: ScheduledPipeline, fps, allocs):
        self.sp = sp
        self.p = sp.pipeline
        self.fps = fps
        self.allocs = allocs
        self.inline_body = _inline_closure(sp)
        self.renames: dict[tuple[str, int], dict[str, str]] = {}
        self.at_site: dict[tuple[str, str], list[str]] = {}
        self.store_only_site: dict[tuple[str, str], list[str]] = {}
        for name in sp.realized:
            sf = sp.funcs[name]
            if sf.compute_site is not None:
                self.at_site.setdefault(sf.compute_site, []).append(name)
                if sf.store_site != sf.compute_site:
                    self.store_only_site.setdefault(sf.store_site, []).append(name)  # type: ignore[arg-type]

    # -- expression lowering ----------------------------------------------

    def lower_value(self, fname: str, e: Expr, scope: list[str], ren: dict[str, Expr]) -> Expr:
        sf = self.sp.funcs[fname]
        e = _inline_into(self.sp, e, lambda n: self.inline_body[n])
        e = substitute(substitute(e, sf.origin), ren)
        return self.flatten(e, scope)

    def flatten(self, e: Expr, scope: list[str]) -> Expr:
        def repl(n: Expr) -> Expr | None:
            if isinstance(n, FuncAccess):
                alloc = self.allocs[n.func]
                args = dict(zip(self.p.func(n.func).dim_names(), n.args))
                tkind = "output" if n.func == self.p.output else "alloc"
                return TableRead(MemTarget(tkind, n.func), alloc.offset(args, scope))
            if isinstance(n, BufAccess):
                alloc = self.allocs[n.buf]
                args = dict(zip(self.p.buffer(n.buf).dim_names(), n.args))
                return TableRead(MemTarget("buffer", n.buf), alloc.offset(args, scope))
            return None

        return rewrite(e, repl)

    # -- nest construction -------------------------------------------------

    def produce(self, name: str, scope: list[str]) -> Produce:
        body: list[Node] = []
        for s in self.sp.funcs[name].func.stages:
            body.extend(self.stage_nest(name, s, scope))
        return Produce(name, body)

    def stage_nest(self, name: str, s: Stage, scope: list[str]) -> list[Node]:
        sf = self.sp.funcs[name]
        stage_dims = set(_stage_loop_dims(sf.func, s))
        axes = [a for a in sf.axes if set(a.roots) & stage_dims]
        if s.rdom is not None:
            for rv in reversed(s.rdom.names()):  # first declared ends up innermost
                iv = s.rdom.interval(rv)
                axes.append(Axis(rv, rv, rv, "serial", iv.extent, iv.lo, original=False))

        # A producer placed inside a consumer may reuse the consumer's loop
        # names; rename its own loops so the nest stays unambiguous.
        taken = set(scope) | {a.var for a in axes}
        renames: dict[str, Expr] = {}
        fresh_axes: list[Axis] = []
        for a in axes:
            if a.var in scope:
                fresh = a.var + "_"
                while fresh in taken:
                    fresh += "_"
                taken.add(fresh)
                renames[a.var] = Var(fresh)
                display = fresh if a.display == a.var else f"{a.root}.{fresh}"
                a = replace(a, var=fresh, display=display)
            fresh_axes.append(a)
        self.renames[(name, s.index)] = {v: e.name for v, e in renames.items()}
        return self.loops(name, s, fresh_axes, scope, renames)

    def loops(self, name: str, s: Stage, axes: list[Axis], scope: list[str], ren: dict[str, Expr]) -> list[Node]:
        if not axes:
            return self.stmts(name, s, scope, ren)
        ax, rest = axes[0], axes[1:]
        if ax.original:
            fd = self.fps[name].compute[ax.root]
            lo, extent = fd.lo, fd.extent
        else:
            lo, extent = ax.lo, ax.extent
        inner_scope = scope + [ax.var]
        inner = self.loops(name, s, rest, inner_scope, ren)

        if s.index == 0:
            site = (name, ax.var)
            for g in reversed(self.at_site.get(site, [])):
                inner = [self.produce(g, inner_scope), Consume(g, inner)]
                gsf = self.sp.funcs[g]
                if gsf.store_site == gsf.compute_site:
                    inner = [Store(g, self.allocs[g], inner)]
            for g in reversed(self.store_only_site.get(site, [])):
                inner = [Store(g, self.allocs[g], inner)]

        dim = LoopDim(ax.var, ax.display, ax.kind, lo, extent)
        loop = Loop(dim, (name, s.index), inner)
        if ax.kind == "unrolled":
            copies: list[Node] = []
            for k in range(extent):
                point = lo + k if not isinstance(lo, Const) else Const(lo.value + k)
                copies.extend(_subst_nodes(inner, {ax.var: as_expr(point)}))
            loop.symbolic = inner
            loop.body = copies
        return [loop]

    def stmts(self, name: str, s: Stage, scope: list[str], ren: dict[str, Expr]) -> list[Node]:
        sf = self.sp.funcs[name]
        alloc = self.allocs[name]
        point = {
            d: substitute(substitute(arg, sf.origin), ren)
            for d, arg in zip(sf.func.dim_names(), s.lhs_args)
        }
        index = alloc.offset(point, scope)
        value = self.lower_value(name, s.rhs, scope, ren)
        tkind = "output" if name == self.p.output else "alloc"
        nodes: list[Node] = [StoreStmt(name, s.index, MemTarget(tkind, name), index, value, point)]
        conds: list[Expr] = []
        in_scope = set(scope)
        for g in sf.guards:
            g = substitute(g, ren)
            if free_vars(g) <= in_scope:
                conds.append(g)
        if s.guard is not None:
            conds.append(self.lower_value(name, s.guard, scope, ren))
        for c in reversed(conds):
            nodes = [If(c, (name, s.index), nodes)]
        return nodes


def _subst_nodes(nodes: list[Node], mapping: dict[str, Expr]) -> list[Node]:
    out: list[Node] = []
    for n in nodes:
        match n:
            case Loop(dim, owner, body):
                nd = LoopDim(dim.var, dim.display, dim.kind, substitute(dim.lo, mapping), dim.extent)
                out.append(Loop(nd, owner, _subst_nodes(body, mapping)))
            case Produce(func, body):
                out.append(Produce(func, _subst_nodes(body, mapping)))
            case Consume(func, body):
                out.append(Consume(func, _subst_nodes(body, mapping)))
            case Store(func, alloc, body):
                out.append(Store(func, alloc, _subst_nodes(body, mapping)))
            case If(cond, owner, body):
                out.append(If(substitute(cond, mapping), owner, _subst_nodes(body, mapping)))
            case StoreStmt(func, stage, target, index, value, point):
                out.append(
                    StoreStmt(
                        func,
                        stage,
                        target,
                        substitute(index, mapping),
                        substitute(value, mapping),
                        {d: substitute(e, mapping) for d, e in point.items()},
                    )
                )
    return out


def lower(p: Pipeline, ds: list) -> LoweredPipeline:
    """One call from validated pipeline to loop nest."""
    sp = apply_directives(p, ds)
    fps = infer_bounds(sp)
    return build_loop_nest(sp, fps)


# ---------------------------------------------------------------------------
# Dump


def loop_range(dim: LoopDim) -> tuple[Expr, Expr]:
    """(lo, inclusive hi) of a loop."""
    if isinstance(dim.lo, Const):
        return dim.lo, Const(dim.lo.value + dim.extent - 1)
    return dim.lo, dec(BinOp("+", dim.lo, Const(dim.extent)))


def print_loop_nest(lp: LoweredPipeline) -> str:
    from .printing import ExprPrinter

    pr = ExprPrinter("dsl")
    lines: list[str] = []

    def emit(n: Node, depth: int) -> None:
        pad = "  " * depth
        match n:
            case Chain(body):
                for c in body:
                    emit(c, depth)
            case Produce(func, body):
                lines.append(f"{pad}produce {func}:")
                for c in body:
                    emit(c, depth + 1)
            case Consume(func, body):
                lines.append(f"{pad}consume {func}:")
                for c in body:
                    emit(c, depth + 1)
            case Store(func, _, body):
                lines.append(f"{pad}store {func}:")
                for c in body:
                    emit(c, depth + 1)
            case Loop(dim, _, body):
                word = {"serial": "for", "parallel": "parallel", "unrolled": "unrolled"}[dim.kind]
                lo, hi = loop_range(dim)
                lines.append(f"{pad}{word} {dim.display} in [{pr(lo)}, {pr(hi)}]:")
                for c in body:
                    emit(c, depth + 1)
            case If(cond, _, body):
                lines.append(f"{pad}if {pr(cond)}:")
                for c in body:
                    emit(c, depth + 1)
            case StoreStmt(_, _, target, index, value, _):
                lines.append(f"{pad}_{target.name}[{pr(index)}] = {pr(value)}")

    emit(lp.root, 0)
    return "\n".join(lines) + "\n"
