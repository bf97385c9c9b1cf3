"""Core data model for scheduled integer pipelines.

A pipeline is a list of integer-valued functions defined over rectangular
domains, reading from input buffers and from each other.  Every value is a
64-bit signed integer internally; buffer cells are 32-bit, and the runtime
treats a store outside the int32 range as an error rather than wrapping.

Conventions that the rest of the package relies on:

* Intervals are half-open.  ``Interval(lo, hi)`` covers ``lo <= v < hi``.
  Loop dumps render the inclusive upper bound (``[0, 127]`` for extent 128)
  because that is how boundary states are reported.
* Division and modulo are Euclidean and total: ``hdiv(x, 0) == 0`` and
  ``0 <= hmod(x, y) < |y|`` for ``y != 0``.  The identity
  ``x == y * hdiv(x, y) + hmod(x, y)`` holds whenever ``y != 0``.
* A function is built from stages.  Stage 0 is pure (defines every point of
  the domain); later stages either update a slice of the domain or fold over
  a reduction domain.  Reduction variables iterate with the first-declared
  variable fastest.
* Update and reduction stages are restricted so that the loop over their
  left-hand points commutes: each left-hand argument is either the matching
  domain variable itself or an expression free of domain variables.  This is
  what makes the in-place imperative execution agree with the pointwise
  functional encoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Iterator

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


def hdiv(x: int, y: int) -> int:
    """Euclidean quotient, total: ``hdiv(x, 0) == 0``.

    The remainder ``hmod`` is always non-negative, so the quotient rounds
    towards negative infinity for positive divisors and towards positive
    infinity for negative ones.
    """
    if y == 0:
        return 0
    return (x - x % abs(y)) // y


def hmod(x: int, y: int) -> int:
    """Euclidean remainder, total: ``hmod(x, 0) == x`` so that the
    decomposition ``x == y * hdiv(x, y) + hmod(x, y)`` degenerates sanely."""
    if y == 0:
        return x
    return x % abs(y)


# ---------------------------------------------------------------------------
# Source positions and diagnostics


@dataclass(frozen=True)
class Span:
    """1-based line/column of the token that introduced a node."""

    line: int
    col: int

    def __str__(self) -> str:
        return f"{self.line}:{self.col}"


NO_SPAN = Span(0, 0)


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    span: Span = NO_SPAN

    def __str__(self) -> str:
        where = f" at {self.span}" if self.span != NO_SPAN else ""
        return f"{self.code}{where}: {self.message}"


class PipelineError(Exception):
    """Base for all user-facing failures while building or checking."""


class ParseError(PipelineError):
    def __init__(self, message: str, span: Span = NO_SPAN, code: str = "ParseError"):
        super().__init__(f"{code} at {span}: {message}" if span != NO_SPAN else f"{code}: {message}")
        self.code = code
        self.span = span
        self.detail = message


class ValidationError(PipelineError):
    def __init__(self, diagnostics: list[Diagnostic]):
        super().__init__("; ".join(str(d) for d in diagnostics))
        self.diagnostics = diagnostics


class ScheduleError(PipelineError):
    def __init__(self, code: str, message: str, span: Span = NO_SPAN):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.span = span
        self.detail = message


class EncodeError(PipelineError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.detail = message


# ---------------------------------------------------------------------------
# Expressions


@dataclass(frozen=True)
class Expr:
    """Base class.  All subclasses are frozen, so trees hash and compare
    structurally; sharing subtrees is safe and encouraged."""

    def __add__(self, other: "Expr | int") -> "Expr":
        return _fold(BinOp("+", self, as_expr(other)))

    def __radd__(self, other: "Expr | int") -> "Expr":
        return _fold(BinOp("+", as_expr(other), self))

    def __sub__(self, other: "Expr | int") -> "Expr":
        return _fold(BinOp("-", self, as_expr(other)))

    def __rsub__(self, other: "Expr | int") -> "Expr":
        return _fold(BinOp("-", as_expr(other), self))

    def __mul__(self, other: "Expr | int") -> "Expr":
        return _fold(BinOp("*", self, as_expr(other)))

    def __rmul__(self, other: "Expr | int") -> "Expr":
        return _fold(BinOp("*", as_expr(other), self))


@dataclass(frozen=True)
class Const(Expr):
    value: int


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class FuncAccess(Expr):
    """Application of a pipeline function (or an encoder-introduced pure
    function such as ``p_i``) at a point."""

    func: str
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class BufAccess(Expr):
    buf: str
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class BinOp(Expr):
    """op is one of + - * hdiv hmod < <= == != && || ==>."""

    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Not(Expr):
    operand: Expr


@dataclass(frozen=True)
class Select(Expr):
    cond: Expr
    if_true: Expr
    if_false: Expr


@dataclass(frozen=True)
class MinOf(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class MaxOf(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class BoundRef(Expr):
    """``entity.dim.min`` or ``entity.dim.max`` where entity is a buffer or a
    function.  Resolves to a constant once bounds are concrete; kept symbolic
    in pipeline contracts so the emitted artifacts can restate the relation."""

    entity: str
    dim: str
    end: str  # "min" | "max"


@dataclass(frozen=True)
class Result(Expr):
    """``\\result`` inside an encoded function contract."""


@dataclass(frozen=True)
class TableRead(Expr):
    """Read of flattened storage: an input buffer, an intermediate
    allocation, or the output buffer.  Appears only after lowering; the
    front-end never produces it."""

    target: "MemTarget"
    index: Expr


@dataclass(frozen=True)
class Frac(Expr):
    """A permission fraction ``num \\ (den * par1 * par2 * ...)``.

    The parallel factors are kept separate from ``den`` so the printed form
    shows where the division came from, e.g. ``1\\(2*128)`` for a half
    permission shared across 128 parallel iterations.
    """

    num: int = 1
    den: int = 1
    par: tuple[int, ...] = ()

    def value(self) -> Fraction:
        d = self.den
        for p in self.par:
            d *= p
        return Fraction(self.num, d)


@dataclass(frozen=True)
class PermAtom(Expr):
    """Access permission for one flattened storage cell.

    Inside annotation bodies this is the only non-arithmetic atom; the
    checker charges it to the permission ledger and treats its truth value
    as settled by that ledger rather than by evaluation.
    """

    target: "MemTarget"
    index: Expr
    frac: Frac


@dataclass(frozen=True)
class MemTarget:
    """Identity of a flattened storage region.

    kind is "buffer" for pipeline inputs, "output" for the caller-provided
    result buffer, and "alloc" for an intermediate realisation."""

    kind: str
    name: str

    def __str__(self) -> str:
        return self.name


def as_expr(x: "Expr | int") -> Expr:
    if isinstance(x, Expr):
        return x
    return Const(int(x))


def _plus_const(e: Expr, k: int) -> Expr:
    """``e + k`` with any constant tail of ``e`` merged into ``k``."""
    if isinstance(e, Const):
        return Const(e.value + k)
    if isinstance(e, BinOp) and isinstance(e.right, Const):
        if e.op == "+":
            return _plus_const(e.left, e.right.value + k)
        if e.op == "-":
            return _plus_const(e.left, k - e.right.value)
    if k == 0:
        return e
    if k > 0:
        return BinOp("+", e, Const(k))
    return BinOp("-", e, Const(-k))


def _fold(e: BinOp) -> Expr:
    """Constant-fold the arithmetic operators used by lowering so generated
    indices stay readable (``x + 0`` never survives, constant tails merge)."""
    l, r = e.left, e.right
    if isinstance(l, Const) and isinstance(r, Const):
        if e.op == "+":
            return Const(l.value + r.value)
        if e.op == "-":
            return Const(l.value - r.value)
        if e.op == "*":
            return Const(l.value * r.value)
    if e.op in ("+", "-") and isinstance(r, Const):
        return _plus_const(l, r.value if e.op == "+" else -r.value)
    if e.op == "+" and isinstance(l, Const) and l.value == 0:
        return r
    if e.op == "*":
        if isinstance(l, Const) and l.value == 1:
            return r
        if isinstance(r, Const) and r.value == 1:
            return l
        if (isinstance(l, Const) and l.value == 0) or (isinstance(r, Const) and r.value == 0):
            return Const(0)
    return e


def lt(a: Expr | int, b: Expr | int) -> Expr:
    return BinOp("<", as_expr(a), as_expr(b))


def le(a: Expr | int, b: Expr | int) -> Expr:
    return BinOp("<=", as_expr(a), as_expr(b))


def eq(a: Expr | int, b: Expr | int) -> Expr:
    return BinOp("==", as_expr(a), as_expr(b))


def ne(a: Expr | int, b: Expr | int) -> Expr:
    return BinOp("!=", as_expr(a), as_expr(b))


def and_(*xs: Expr) -> Expr:
    parts = [x for x in xs if x is not None]
    if not parts:
        return Const(1)
    out = parts[0]
    for x in parts[1:]:
        out = BinOp("&&", out, x)
    return out


def or_(a: Expr, b: Expr) -> Expr:
    return BinOp("||", a, b)


def implies(a: Expr, b: Expr) -> Expr:
    return BinOp("==>", a, b)


def hdiv_(a: Expr | int, b: Expr | int) -> Expr:
    return BinOp("hdiv", as_expr(a), as_expr(b))


def hmod_(a: Expr | int, b: Expr | int) -> Expr:
    return BinOp("hmod", as_expr(a), as_expr(b))


def children(e: Expr) -> tuple[Expr, ...]:
    match e:
        case BinOp(_, l, r) | MinOf(l, r) | MaxOf(l, r):
            return (l, r)
        case Not(x):
            return (x,)
        case Select(c, t, f):
            return (c, t, f)
        case FuncAccess(_, args) | BufAccess(_, args):
            return args
        case TableRead(_, idx):
            return (idx,)
        case PermAtom(_, idx, _):
            return (idx,)
        case _:
            return ()


def walk(e: Expr) -> Iterator[Expr]:
    """Yield every node of the tree, parents before children."""
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(children(node))


def free_vars(e: Expr) -> set[str]:
    return {n.name for n in walk(e) if isinstance(n, Var)}


def substitute(e: Expr, mapping: dict[str, Expr]) -> Expr:
    """Replace free variables by expressions.

    Expressions carry no binders (quantifiers live on annotations), so this
    is a plain structural rewrite.  Callers that substitute under a
    quantifier must first drop shadowed names from the mapping.
    """
    if not mapping:
        return e
    match e:
        case Var(name):
            return mapping.get(name, e)
        case BinOp(op, l, r):
            return _fold(BinOp(op, substitute(l, mapping), substitute(r, mapping)))
        case Not(x):
            return Not(substitute(x, mapping))
        case Select(c, t, f):
            return Select(substitute(c, mapping), substitute(t, mapping), substitute(f, mapping))
        case MinOf(l, r):
            return MinOf(substitute(l, mapping), substitute(r, mapping))
        case MaxOf(l, r):
            return MaxOf(substitute(l, mapping), substitute(r, mapping))
        case FuncAccess(f, args):
            return FuncAccess(f, tuple(substitute(a, mapping) for a in args))
        case BufAccess(b, args):
            return BufAccess(b, tuple(substitute(a, mapping) for a in args))
        case TableRead(t, idx):
            return TableRead(t, substitute(idx, mapping))
        case PermAtom(t, idx, frac):
            return PermAtom(t, substitute(idx, mapping), frac)
        case _:
            return e


def rewrite(e: Expr, fn: Callable[[Expr], Expr | None]) -> Expr:
    """Bottom-up rewrite: ``fn`` sees each rebuilt node and may replace it
    (return None to keep it)."""
    match e:
        case BinOp(op, l, r):
            e2: Expr = _fold(BinOp(op, rewrite(l, fn), rewrite(r, fn)))
        case Not(x):
            e2 = Not(rewrite(x, fn))
        case Select(c, t, f):
            e2 = Select(rewrite(c, fn), rewrite(t, fn), rewrite(f, fn))
        case MinOf(l, r):
            e2 = MinOf(rewrite(l, fn), rewrite(r, fn))
        case MaxOf(l, r):
            e2 = MaxOf(rewrite(l, fn), rewrite(r, fn))
        case FuncAccess(f, args):
            e2 = FuncAccess(f, tuple(rewrite(a, fn) for a in args))
        case BufAccess(b, args):
            e2 = BufAccess(b, tuple(rewrite(a, fn) for a in args))
        case TableRead(t, idx):
            e2 = TableRead(t, rewrite(idx, fn))
        case PermAtom(t, idx, frac):
            e2 = PermAtom(t, rewrite(idx, fn), frac)
        case _:
            e2 = e
    out = fn(e2)
    return e2 if out is None else out


def eval_const(e: Expr, env: dict[str, int] | None = None) -> int:
    """Evaluate a closed arithmetic expression to an int.

    Used for bound expressions and schedule factors; raises ValueError when
    the expression touches anything that is not a constant under ``env``.
    """
    env = env or {}
    match e:
        case Const(v):
            return v
        case Var(name):
            if name in env:
                return env[name]
            raise ValueError(f"variable {name!r} is not a compile-time constant")
        case BinOp(op, l, r):
            a, b = eval_const(l, env), eval_const(r, env)
            match op:
                case "+":
                    return a + b
                case "-":
                    return a - b
                case "*":
                    return a * b
                case "hdiv":
                    return hdiv(a, b)
                case "hmod":
                    return hmod(a, b)
                case "<":
                    return int(a < b)
                case "<=":
                    return int(a <= b)
                case "==":
                    return int(a == b)
                case "!=":
                    return int(a != b)
                case "&&":
                    return int(bool(a) and bool(b))
                case "||":
                    return int(bool(a) or bool(b))
                case "==>":
                    return int(not a or bool(b))
            raise ValueError(f"unknown operator {op!r}")
        case Not(x):
            return int(not eval_const(x, env))
        case Select(c, t, f):
            return eval_const(t, env) if eval_const(c, env) else eval_const(f, env)
        case MinOf(l, r):
            return min(eval_const(l, env), eval_const(r, env))
        case MaxOf(l, r):
            return max(eval_const(l, env), eval_const(r, env))
        case _:
            raise ValueError(f"not a constant expression: {type(e).__name__}")


# ---------------------------------------------------------------------------
# Scheduling directives


@dataclass(frozen=True)
class Directive:
    """One scheduling command, applied in file order.

    args by kind:
      split       (old, outer, inner, factor:int)
      fuse        (a, b, fused)            a is the inner dimension
      reorder     (dim, ...)               innermost first
      parallel    (dim,)
      unroll      (dim,)
      compute_at  (consumer, dim)
      store_at    (consumer, dim)
    """

    kind: str
    func: str
    args: tuple[str | int, ...]
    span: Span = field(default=NO_SPAN, compare=False)


# ---------------------------------------------------------------------------
# Declarations


@dataclass(frozen=True)
class Interval:
    """Half-open ``[lo, hi)``.  Bounds are expressions over pipeline
    parameters until :meth:`Pipeline.resolve` makes them constants."""

    lo: Expr
    hi: Expr

    @property
    def lo_int(self) -> int:
        return eval_const(self.lo)

    @property
    def hi_int(self) -> int:
        return eval_const(self.hi)

    @property
    def extent(self) -> int:
        return self.hi_int - self.lo_int


@dataclass(frozen=True)
class Cond:
    """A bare predicate with a source position (stage or buffer spec)."""

    expr: Expr
    span: Span = field(default=NO_SPAN, compare=False)


@dataclass(frozen=True)
class Quantifier:
    """One bound integer variable ranging over half-open ``[lo, hi)``."""

    var: str
    lo: Expr
    hi: Expr


@dataclass(frozen=True)
class QuantCond:
    """A (possibly) quantified predicate: pipeline postconditions."""

    quants: tuple[Quantifier, ...]
    body: Expr
    span: Span = field(default=NO_SPAN, compare=False)


@dataclass(frozen=True)
class RDom:
    """Reduction domain.  Variables are listed innermost (fastest) first;
    the imperative order runs the last-declared variable as the outer loop."""

    vars: tuple[tuple[str, Interval], ...]

    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.vars)

    def interval(self, name: str) -> Interval:
        for n, iv in self.vars:
            if n == name:
                return iv
        raise KeyError(name)


@dataclass(frozen=True)
class Stage:
    """One definition step of a function.

    ``lhs_args`` line up with the function's dimensions.  ``guard`` is the
    optional ``if`` predicate of an update.  ``invariants`` maps reduction
    variables to the predicate that holds at each of their loop boundaries,
    written in the one-past-the-end convention: at boundary ``r`` the first
    ``r - lo`` iterations have been folded in.
    """

    func: str
    index: int
    lhs_args: tuple[Expr, ...]
    rhs: Expr
    rdom: RDom | None = None
    guard: Expr | None = None
    requires: tuple[Cond, ...] = ()
    ensures: tuple[Cond, ...] = ()
    invariants: tuple[tuple[str, Cond], ...] = ()
    span: Span = field(default=NO_SPAN, compare=False)

    @property
    def kind(self) -> str:
        if self.index == 0:
            return "pure"
        return "reduction" if self.rdom is not None else "update"

    def invariant_for(self, var: str) -> Cond | None:
        for n, c in self.invariants:
            if n == var:
                return c
        return None


@dataclass(frozen=True)
class Buffer:
    name: str
    dims: tuple[tuple[str, Interval], ...]
    requires: tuple[Cond, ...] = ()

    def dim_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.dims)

    def interval(self, dim: str) -> Interval:
        for n, iv in self.dims:
            if n == dim:
                return iv
        raise KeyError(dim)


@dataclass(frozen=True)
class Func:
    name: str
    dims: tuple[tuple[str, Interval], ...]
    stages: tuple[Stage, ...]

    def dim_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.dims)

    def interval(self, dim: str) -> Interval:
        for n, iv in self.dims:
            if n == dim:
                return iv
        raise KeyError(dim)

    @property
    def has_updates(self) -> bool:
        return len(self.stages) > 1


@dataclass(frozen=True)
class Pipeline:
    """A whole program: parameters, input buffers, functions in definition
    order, and the contract relating them.

    Pipeline ``requires`` relate dimension bounds of inputs and the output
    (and constrain input values via :attr:`Buffer.requires`); ``ensures``
    may only mention input buffers and the output function.
    """

    name: str
    params: tuple[tuple[str, Expr], ...]
    buffers: tuple[Buffer, ...]
    funcs: tuple[Func, ...]
    output: str
    requires: tuple[Cond, ...] = ()
    ensures: tuple[QuantCond, ...] = ()

    def buffer(self, name: str) -> Buffer:
        for b in self.buffers:
            if b.name == name:
                return b
        raise KeyError(name)

    def func(self, name: str) -> Func:
        for f in self.funcs:
            if f.name == name:
                return f
        raise KeyError(name)

    def entity_interval(self, name: str, dim: str) -> Interval:
        for b in self.buffers:
            if b.name == name:
                return b.interval(dim)
        return self.func(name).interval(dim)

    @property
    def output_func(self) -> Func:
        return self.func(self.output)

    def param_values(self, overrides: dict[str, int] | None = None) -> dict[str, int]:
        """Evaluate parameters in declaration order, applying overrides.

        Overrides are matched case-insensitively so a command line written
        against dimension-style names still lands on the parameter."""
        overrides = dict(overrides or {})
        lowered = {k.lower(): v for k, v in overrides.items()}
        values: dict[str, int] = {}
        seen = set()
        for name, expr in self.params:
            if name in overrides:
                values[name] = overrides[name]
            elif name.lower() in lowered:
                values[name] = lowered[name.lower()]
            else:
                values[name] = eval_const(expr, values)
            seen.add(name.lower())
        unknown = [k for k in overrides if k.lower() not in seen]
        if unknown:
            raise ParseError(f"unknown scale parameter(s): {', '.join(sorted(unknown))}", code="UnknownParam")
        return values

    def resolve(self, overrides: dict[str, int] | None = None) -> "Pipeline":
        """Substitute parameter values everywhere, making every interval
        bound a constant.  Scoping is respected: a stage variable or
        reduction variable shadowing a parameter keeps the inner meaning."""
        values = self.param_values(overrides)
        pmap = {k: Const(v) for k, v in values.items()}

        def sub_expr(e: Expr, shadow: set[str]) -> Expr:
            live = {k: v for k, v in pmap.items() if k not in shadow}
            return substitute(e, live)

        def sub_interval(iv: Interval, shadow: set[str]) -> Interval:
            return Interval(Const(eval_const(sub_expr(iv.lo, shadow))), Const(eval_const(sub_expr(iv.hi, shadow))))

        def sub_cond(c: Cond, shadow: set[str]) -> Cond:
            return Cond(sub_expr(c.expr, shadow), c.span)

        buffers = []
        for b in self.buffers:
            shadow = set(b.dim_names())
            buffers.append(
                replace(
                    b,
                    dims=tuple((n, sub_interval(iv, set())) for n, iv in b.dims),
                    requires=tuple(sub_cond(c, shadow) for c in b.requires),
                )
            )
        funcs = []
        for f in self.funcs:
            shadow_f = set(f.dim_names())
            stages = []
            for s in f.stages:
                shadow = set(shadow_f)
                rdom = None
                if s.rdom is not None:
                    rdom = RDom(tuple((n, sub_interval(iv, shadow)) for n, iv in s.rdom.vars))
                    shadow |= set(s.rdom.names())
                stages.append(
                    replace(
                        s,
                        lhs_args=tuple(sub_expr(a, shadow) for a in s.lhs_args),
                        rhs=sub_expr(s.rhs, shadow),
                        rdom=rdom,
                        guard=None if s.guard is None else sub_expr(s.guard, shadow),
                        requires=tuple(sub_cond(c, shadow) for c in s.requires),
                        ensures=tuple(sub_cond(c, shadow) for c in s.ensures),
                        invariants=tuple((n, sub_cond(c, shadow)) for n, c in s.invariants),
                    )
                )
            funcs.append(replace(f, dims=tuple((n, sub_interval(iv, set())) for n, iv in f.dims), stages=tuple(stages)))
        ensures = []
        for q in self.ensures:
            shadow = {qt.var for qt in q.quants}
            ensures.append(
                QuantCond(
                    tuple(Quantifier(qt.var, sub_expr(qt.lo, set()), sub_expr(qt.hi, set())) for qt in q.quants),
                    sub_expr(q.body, shadow),
                    q.span,
                )
            )
        return replace(
            self,
            params=tuple((k, Const(values[k])) for k, _ in self.params),
            buffers=tuple(buffers),
            funcs=tuple(funcs),
            requires=tuple(Cond(sub_expr(c.expr, set()), c.span) for c in self.requires),
            ensures=tuple(ensures),
        )

    def validated(self, overrides: dict[str, int] | None = None) -> "Pipeline":
        resolved = self.resolve(overrides)
        diags = validate_pipeline(resolved)
        if diags:
            raise ValidationError(diags)
        return resolved


# ---------------------------------------------------------------------------
# Validation


def _is_var_free_of(e: Expr, names: set[str]) -> bool:
    return not (free_vars(e) & names)


def validate_pipeline(p: Pipeline) -> list[Diagnostic]:
    """Structural and scoping checks on a resolved pipeline.

    Returns the full list of problems instead of stopping at the first, so
    a driver can show everything wrong with a source file at once.
    """
    diags: list[Diagnostic] = []
    names: dict[str, str] = {}
    for b in p.buffers:
        if b.name in names:
            diags.append(Diagnostic("DuplicateName", f"buffer {b.name!r} redeclared"))
        names[b.name] = "buffer"
    for f in p.funcs:
        if f.name in names:
            diags.append(Diagnostic("DuplicateName", f"func {f.name!r} redeclared"))
        names[f.name] = "func"

    if p.output not in names or names.get(p.output) != "func":
        diags.append(Diagnostic("UnknownFunc", f"output {p.output!r} is not a declared func"))
        return diags

    for b in p.buffers:
        _check_dims(b.name, b.dims, diags)
        point = {n for n, _ in b.dims}
        for c in b.requires:
            _check_value_spec(p, b.name, b.dim_names(), c, point, diags, allow_funcs=False)

    defined: set[str] = {b.name for b in p.buffers}
    for f in p.funcs:
        _check_dims(f.name, f.dims, diags)
        dim_names = set(f.dim_names())
        if not f.stages:
            diags.append(Diagnostic("EmptyFunc", f"func {f.name!r} has no definition"))
            continue
        for s in f.stages:
            _validate_stage(p, f, s, defined, diags)
        defined.add(f.name)
        del dim_names

    out = p.output_func
    allowed = {b.name for b in p.buffers} | {p.output}
    for c in p.requires:
        for n in walk(c.expr):
            if isinstance(n, (FuncAccess, BufAccess)):
                diags.append(Diagnostic("PipelineSpecNotBounds", "pipeline requires may only relate dimension bounds", c.span))
                break
            if isinstance(n, BoundRef) and n.entity not in allowed:
                diags.append(Diagnostic("UnknownFunc", f"pipeline requires mentions {n.entity!r}, which is neither an input buffer nor the output", c.span))
        try:
            if eval_const(_resolve_bound_refs(p, c.expr)) == 0:
                diags.append(Diagnostic("RequiresUnsatisfied", "pipeline requires is false for the declared bounds", c.span))
        except ValueError:
            diags.append(Diagnostic("NonConcreteBound", "pipeline requires must be closed over bounds", c.span))
        except KeyError:
            pass  # the unknown entity was reported just above
    for q in p.ensures:
        bound = {qt.var for qt in q.quants}
        for n in walk(q.body):
            if isinstance(n, FuncAccess) and n.func != p.output:
                diags.append(Diagnostic("PipelineSpecScope", f"pipeline ensures may reference input buffers and {p.output!r} only, not {n.func!r}", q.span))
            if isinstance(n, Var) and n.name not in bound:
                diags.append(Diagnostic("UnboundVar", f"variable {n.name!r} is not quantified in pipeline ensures", q.span))
        for qt in q.quants:
            for side in (qt.lo, qt.hi):
                for n in walk(side):
                    if isinstance(n, BoundRef) and n.entity not in allowed:
                        diags.append(Diagnostic("UnknownFunc", f"pipeline ensures range mentions {n.entity!r}, which is neither an input buffer nor the output", q.span))
                try:
                    eval_const(_resolve_bound_refs(p, side))
                except (ValueError, KeyError):
                    diags.append(Diagnostic("NonConcreteBound", "pipeline ensures ranges must be closed over bounds", q.span))
    del out
    return diags


def _check_dims(owner: str, dims: tuple[tuple[str, Interval], ...], diags: list[Diagnostic]) -> None:
    seen = set()
    for n, iv in dims:
        if n in seen:
            diags.append(Diagnostic("DuplicateDim", f"{owner}: dimension {n!r} repeated"))
        seen.add(n)
        try:
            if iv.extent <= 0:
                diags.append(Diagnostic("EmptyInterval", f"{owner}.{n}: extent must be positive"))
            elif iv.extent > 1 << 20 or abs(iv.lo_int) > 1 << 20:
                diags.append(Diagnostic("BoundTooLarge", f"{owner}.{n}: bounds exceed the 2^20 limit that keeps index arithmetic overflow-free"))
        except ValueError:
            diags.append(Diagnostic("NonConcreteBound", f"{owner}.{n}: bounds did not resolve to constants"))


def _resolve_bound_refs(p: Pipeline, e: Expr) -> Expr:
    def repl(n: Expr) -> Expr | None:
        if isinstance(n, BoundRef):
            iv = p.entity_interval(n.entity, n.dim)
            return Const(iv.lo_int if n.end == "min" else iv.hi_int)
        return None

    return rewrite(e, repl)


def _validate_stage(p: Pipeline, f: Func, s: Stage, defined: set[str], diags: list[Diagnostic]) -> None:
    dim_names = f.dim_names()
    if s.index == 0 and (s.rdom is not None or s.kind != "pure"):
        diags.append(Diagnostic("StageZeroNotPure", f"{f.name}: stage 0 must be a pure definition", s.span))
    if s.guard is not None and s.kind != "update":
        diags.append(Diagnostic("GuardNotUpdate", f"{f.name} stage {s.index}: an if clause is only meaningful on an update step; reductions fold conditions with select", s.span))
    if len(s.lhs_args) != len(dim_names):
        diags.append(Diagnostic("ArityMismatch", f"{f.name} stage {s.index}: {len(s.lhs_args)} left-hand arguments for {len(dim_names)} dimensions", s.span))
        return

    pure_vars = set(dim_names)
    rvars = set(s.rdom.names()) if s.rdom else set()
    if s.kind == "pure":
        scope = pure_vars | rvars
    else:
        # An update or reduction step iterates only the dimensions whose
        # left-hand argument is the dimension variable itself; the pinned
        # ones have no runtime value on the right-hand side.
        looped = {d for d, arg in zip(dim_names, s.lhs_args) if arg == Var(d)}
        scope = looped | rvars

    if s.kind == "pure":
        for arg, dn in zip(s.lhs_args, dim_names):
            if arg != Var(dn):
                diags.append(Diagnostic("LhsNotCanonical", f"{f.name}: pure stage must be defined at ({', '.join(dim_names)})", s.span))
                break
    else:
        for arg, dn in zip(s.lhs_args, dim_names):
            if arg == Var(dn):
                continue
            if not _is_var_free_of(arg, pure_vars):
                diags.append(
                    Diagnostic(
                        "LhsNotCanonical",
                        f"{f.name} stage {s.index}: left-hand argument for {dn!r} must be the variable itself or be free of stage variables",
                        s.span,
                    )
                )
            if rvars and not _is_var_free_of(arg, rvars) and s.kind == "update":
                diags.append(Diagnostic("UnknownRVar", f"{f.name} stage {s.index}: reduction variable used without a reduction domain", s.span))

    canonical = s.lhs_args

    def check_expr(e: Expr, where: str, span: Span, self_rule: str) -> None:
        for n in walk(e):
            match n:
                case Var(name) if name not in scope:
                    diags.append(Diagnostic("UnboundVar", f"{f.name} stage {s.index} {where}: unknown variable {name!r}", span))
                case BufAccess(b, args):
                    try:
                        buf = p.buffer(b)
                    except KeyError:
                        diags.append(Diagnostic("UnknownFunc", f"{f.name} stage {s.index} {where}: unknown buffer {b!r}", span))
                        continue
                    if len(args) != len(buf.dims):
                        diags.append(Diagnostic("ArityMismatch", f"{f.name} stage {s.index} {where}: {b} takes {len(buf.dims)} arguments", span))
                case FuncAccess(g, args):
                    if g == f.name:
                        if self_rule == "forbid":
                            diags.append(Diagnostic("SelfReference", f"{f.name}: pure stage may not reference {f.name}", span))
                        elif self_rule == "canonical" and args != canonical:
                            diags.append(
                                Diagnostic(
                                    "SelfReferenceNotCanonical",
                                    f"{f.name} stage {s.index} {where}: reduction self-reference must be at the updated point",
                                    span,
                                )
                            )
                        if len(args) != len(dim_names):
                            diags.append(Diagnostic("ArityMismatch", f"{f.name} stage {s.index} {where}: {g} takes {len(dim_names)} arguments", span))
                        continue
                    if g not in defined:
                        kind = "forward reference to" if any(h.name == g for h in p.funcs) else "unknown func"
                        diags.append(Diagnostic("UnknownFunc", f"{f.name} stage {s.index} {where}: {kind} {g!r}", span))
                        continue
                    gf = p.func(g)
                    if len(args) != len(gf.dims):
                        diags.append(Diagnostic("ArityMismatch", f"{f.name} stage {s.index} {where}: {g} takes {len(gf.dims)} arguments", span))

    self_rule = {"pure": "forbid", "update": "any", "reduction": "canonical"}[s.kind]
    check_expr(s.rhs, "rhs", s.span, self_rule)
    if s.guard is not None:
        check_expr(s.guard, "guard", s.span, "any")

    # Specs must talk about the function at the point being defined.
    for c in list(s.requires) + list(s.ensures):
        check_expr(c.expr, "spec", c.span, "any")
        for n in walk(c.expr):
            if isinstance(n, FuncAccess) and n.func == f.name and n.args != canonical:
                diags.append(Diagnostic("SpecNotCanonical", f"{f.name} stage {s.index}: specs reference {f.name} at the defined point only", c.span))

    if s.kind == "reduction":
        rnames = s.rdom.names()
        order = {n: i for i, n in enumerate(rnames)}
        for n, c in s.invariants:
            if n not in order:
                diags.append(Diagnostic("UnknownRVar", f"{f.name} stage {s.index}: invariant names unknown reduction variable {n!r}", c.span))
                continue
            check_expr(c.expr, f"invariant({n})", c.span, "any")
            for node in walk(c.expr):
                if isinstance(node, Var) and node.name in order and order[node.name] < order[n]:
                    diags.append(
                        Diagnostic(
                            "InvariantVarOrder",
                            f"{f.name} stage {s.index}: invariant for {n!r} may not mention the inner variable {node.name!r}",
                            c.span,
                        )
                    )
    elif s.invariants:
        diags.append(Diagnostic("UnknownRVar", f"{f.name} stage {s.index}: invariants belong to reduction stages", s.span))


def _check_value_spec(
    p: Pipeline,
    owner: str,
    dims: tuple[str, ...],
    c: Cond,
    point: set[str],
    diags: list[Diagnostic],
    allow_funcs: bool,
) -> None:
    for n in walk(c.expr):
        match n:
            case Var(name) if name not in point:
                diags.append(Diagnostic("UnboundVar", f"{owner} requires: unknown variable {name!r}", c.span))
            case BufAccess(b, args):
                if b != owner:
                    diags.append(Diagnostic("PipelineSpecScope", f"{owner} requires may only constrain {owner}", c.span))
                elif tuple(args) != tuple(Var(d) for d in dims):
                    diags.append(Diagnostic("SpecNotCanonical", f"{owner} requires must constrain the cell ({', '.join(dims)})", c.span))
            case FuncAccess(_, _) if not allow_funcs:
                diags.append(Diagnostic("PipelineSpecScope", f"{owner} requires may not call functions", c.span))
