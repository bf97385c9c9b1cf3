"""Batch evaluation of expressions over many points.

Expressions compile to a small stack program; the evaluator runs it over a
matrix of variable assignments (one row per point) against flat integer
tables.  Two interchangeable backends exist: a compiled one built on numba
and a pure-numpy one.  ``MINI_SCHED_NUMBA=0`` forces the numpy path, and
the numba path is also skipped for tiny batches where compilation and call
overhead would dominate.

All arithmetic happens in int64; each point carries a flag byte recording
out-of-range table reads (bit 0) and results that left the signed 32-bit
range (bit 1).  Division and remainder are Euclidean and total: a zero
divisor yields quotient 0 and remainder x.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .ir import (
    BinOp,
    BoundRef,
    Const,
    Expr,
    MaxOf,
    MemTarget,
    MinOf,
    Not,
    Select,
    TableRead,
    Var,
    walk,
)

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1

FLAG_OOB = 1
FLAG_OVERFLOW = 2

OP_CONST = 0
OP_LOAD = 1
OP_TABLE = 2
OP_ADD = 3
OP_SUB = 4
OP_MUL = 5
OP_HDIV = 6
OP_HMOD = 7
OP_LT = 8
OP_LE = 9
OP_EQ = 10
OP_NE = 11
OP_AND = 12
OP_OR = 13
OP_IMP = 14
OP_NOT = 15
OP_SELECT = 16
OP_MIN = 17
OP_MAX = 18

_BINOP_CODE = {
    "+": OP_ADD,
    "-": OP_SUB,
    "*": OP_MUL,
    "hdiv": OP_HDIV,
    "hmod": OP_HMOD,
    "<": OP_LT,
    "<=": OP_LE,
    "==": OP_EQ,
    "!=": OP_NE,
    "&&": OP_AND,
    "||": OP_OR,
    "==>": OP_IMP,
}


class CompileError(Exception):
    pass


@dataclass(frozen=True)
class Program:
    """A compiled expression: (op, operand) rows plus its environment shape."""

    instrs: np.ndarray  # int64, shape (n, 2)
    stack_need: int
    slots: tuple[str, ...]
    tables: tuple[tuple[str, str], ...]  # (kind, name) per table id


def collect_tables(exprs) -> tuple[tuple[str, str], ...]:
    """Deterministic table order: first appearance across the expressions."""
    seen: dict[tuple[str, str], None] = {}
    for e in exprs:
        for n in walk(e):
            if isinstance(n, TableRead):
                seen.setdefault((n.target.kind, n.target.name), None)
    return tuple(seen)


def compile_expr(e: Expr, slots, tables) -> Program:
    slot_of = {s: i for i, s in enumerate(slots)}
    table_of = {t: i for i, t in enumerate(tables)}
    rows: list[tuple[int, int]] = []
    depth = 0
    peak = 0

    def push(n: int):
        nonlocal depth, peak
        depth += n
        peak = max(peak, depth)

    def emit(node: Expr) -> None:
        match node:
            case Const(v):
                rows.append((OP_CONST, v))
                push(1)
            case Var(name):
                if name not in slot_of:
                    raise CompileError(f"variable {name!r} has no slot")
                rows.append((OP_LOAD, slot_of[name]))
                push(1)
            case TableRead(target, index):
                emit(index)
                key = (target.kind, target.name)
                if key not in table_of:
                    raise CompileError(f"no table bound for {target.kind} {target.name!r}")
                rows.append((OP_TABLE, table_of[key]))
            case BinOp(op, l, r):
                emit(l)
                emit(r)
                if op not in _BINOP_CODE:
                    raise CompileError(f"operator {op!r} is not executable")
                rows.append((_BINOP_CODE[op], 0))
                push(-1)
            case Not(x):
                emit(x)
                rows.append((OP_NOT, 0))
            case Select(c, t, f):
                emit(c)
                emit(t)
                emit(f)
                rows.append((OP_SELECT, 0))
                push(-2)
            case MinOf(l, r):
                emit(l)
                emit(r)
                rows.append((OP_MIN, 0))
                push(-1)
            case MaxOf(l, r):
                emit(l)
                emit(r)
                rows.append((OP_MAX, 0))
                push(-1)
            case BoundRef():
                raise CompileError("bound references must be resolved before compilation")
            case _:
                raise CompileError(f"cannot compile {type(node).__name__}")

    emit(e)
    instrs = np.array(rows, dtype=np.int64).reshape(len(rows), 2)
    return Program(instrs, peak, tuple(slots), tuple(tables))


# ---------------------------------------------------------------------------
# Euclidean division on arrays


def vhdiv(x, y):
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    ay = np.abs(y)
    safe = np.where(ay == 0, 1, ay)
    r = np.mod(x, safe)
    q = (x - r) // np.where(y == 0, 1, y)
    return np.where(y == 0, 0, q)


def vhmod(x, y):
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    ay = np.abs(y)
    safe = np.where(ay == 0, 1, ay)
    return np.where(y == 0, x, np.mod(x, safe))


# ---------------------------------------------------------------------------
# numpy backend


def _eval_numpy(instrs, cols, heap, offs, sizes, stack_need):
    n = cols.shape[0]
    flags = np.zeros(n, dtype=np.uint8)
    stack: list[np.ndarray] = []

    def check32(v):
        bad = (v < INT32_MIN) | (v > INT32_MAX)
        if bad.any():
            flags[bad] |= FLAG_OVERFLOW
        return v

    for op, a in instrs:
        if op == OP_CONST:
            stack.append(np.full(n, a, dtype=np.int64))
        elif op == OP_LOAD:
            stack.append(cols[:, a].astype(np.int64, copy=True))
        elif op == OP_TABLE:
            idx = stack.pop()
            oob = (idx < 0) | (idx >= sizes[a])
            if oob.any():
                flags[oob] |= FLAG_OOB
            safe = np.clip(idx, 0, sizes[a] - 1) + offs[a]
            stack.append(heap[safe])
        elif op == OP_NOT:
            stack.append(np.where(stack.pop() != 0, 0, 1).astype(np.int64))
        elif op == OP_SELECT:
            f = stack.pop()
            t = stack.pop()
            c = stack.pop()
            stack.append(np.where(c != 0, t, f))
        else:
            r = stack.pop()
            l = stack.pop()
            if op == OP_ADD:
                v = check32(l + r)
            elif op == OP_SUB:
                v = check32(l - r)
            elif op == OP_MUL:
                v = check32(l * r)
            elif op == OP_HDIV:
                v = check32(vhdiv(l, r))
            elif op == OP_HMOD:
                v = vhmod(l, r)
            elif op == OP_LT:
                v = (l < r).astype(np.int64)
            elif op == OP_LE:
                v = (l <= r).astype(np.int64)
            elif op == OP_EQ:
                v = (l == r).astype(np.int64)
            elif op == OP_NE:
                v = (l != r).astype(np.int64)
            elif op == OP_AND:
                v = ((l != 0) & (r != 0)).astype(np.int64)
            elif op == OP_OR:
                v = ((l != 0) | (r != 0)).astype(np.int64)
            elif op == OP_IMP:
                v = ((l == 0) | (r != 0)).astype(np.int64)
            elif op == OP_MIN:
                v = np.minimum(l, r)
            elif op == OP_MAX:
                v = np.maximum(l, r)
            else:
                raise AssertionError(f"bad opcode {op}")
            stack.append(v)
    return stack[-1], flags


# ---------------------------------------------------------------------------
# numba backend (built lazily so the numpy path never pays for it)

_NUMBA_KERNEL = None
_NUMBA_FAILED = False


def _numba_kernel():
    global _NUMBA_KERNEL, _NUMBA_FAILED
    if _NUMBA_KERNEL is not None or _NUMBA_FAILED:
        return _NUMBA_KERNEL
    try:
        from numba import njit
    except ImportError:
        _NUMBA_FAILED = True
        return None

    @njit(cache=True)
    def run(instrs, cols, heap, offs, sizes, out, flags, stack_need):  # pragma: no cover
        n = cols.shape[0]
        stack = np.empty(stack_need, dtype=np.int64)
        for p in range(n):
            sp = 0
            fl = 0
            for k in range(instrs.shape[0]):
                op = instrs[k, 0]
                a = instrs[k, 1]
                if op == 0:  # const
                    stack[sp] = a
                    sp += 1
                elif op == 1:  # load
                    stack[sp] = cols[p, a]
                    sp += 1
                elif op == 2:  # table
                    idx = stack[sp - 1]
                    if idx < 0 or idx >= sizes[a]:
                        fl |= 1
                        idx = 0
                    stack[sp - 1] = heap[offs[a] + idx]
                elif op == 15:  # not
                    stack[sp - 1] = 0 if stack[sp - 1] != 0 else 1
                elif op == 16:  # select
                    f = stack[sp - 1]
                    t = stack[sp - 2]
                    c = stack[sp - 3]
                    sp -= 2
                    stack[sp - 1] = t if c != 0 else f
                else:
                    r = stack[sp - 1]
                    l = stack[sp - 2]
                    sp -= 1
                    if op == 3:
                        v = l + r
                        if v < INT32_MIN or v > INT32_MAX:
                            fl |= 2
                    elif op == 4:
                        v = l - r
                        if v < INT32_MIN or v > INT32_MAX:
                            fl |= 2
                    elif op == 5:
                        v = l * r
                        if v < INT32_MIN or v > INT32_MAX:
                            fl |= 2
                    elif op == 6:
                        if r == 0:
                            v = 0
                        else:
                            ar = -r if r < 0 else r
                            v = (l - l % ar) // r
                            if v < INT32_MIN or v > INT32_MAX:
                                fl |= 2
                    elif op == 7:
                        if r == 0:
                            v = l
                        else:
                            ar = -r if r < 0 else r
                            v = l % ar
                    elif op == 8:
                        v = 1 if l < r else 0
                    elif op == 9:
                        v = 1 if l <= r else 0
                    elif op == 10:
                        v = 1 if l == r else 0
                    elif op == 11:
                        v = 1 if l != r else 0
                    elif op == 12:
                        v = 1 if l != 0 and r != 0 else 0
                    elif op == 13:
                        v = 1 if l != 0 or r != 0 else 0
                    elif op == 14:
                        v = 1 if l == 0 or r != 0 else 0
                    elif op == 17:
                        v = l if l < r else r
                    else:
                        v = l if l > r else r
                    stack[sp - 1] = v
            out[p] = stack[sp - 1]
            flags[p] = fl

    _NUMBA_KERNEL = run
    return run


def numba_enabled() -> bool:
    if os.environ.get("MINI_SCHED_NUMBA", "1") == "0":
        return False
    return _numba_kernel() is not None


# numba wins once per-point python dispatch would dominate; under this many
# points the numpy path is faster even warm.
_NUMBA_CUTOVER = 2048


def eval_batch(prog: Program, cols: np.ndarray, tables) -> tuple[np.ndarray, np.ndarray]:
    """Run a program over ``cols`` (points x slots) against ``tables``.

    Returns (values, flags), both one entry per point.  ``tables`` supplies
    one flat int64 array per entry of ``prog.tables``, in order.
    """
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    if cols.ndim != 2 or cols.shape[1] != len(prog.slots):
        raise ValueError(f"expected columns for {prog.slots}, got shape {cols.shape}")
    arrays = [np.ascontiguousarray(t, dtype=np.int64) for t in tables]
    if len(arrays) != len(prog.tables):
        raise ValueError(f"expected {len(prog.tables)} tables, got {len(arrays)}")
    sizes = np.array([a.size for a in arrays], dtype=np.int64)
    offs = np.zeros(len(arrays), dtype=np.int64)
    if arrays:
        offs[1:] = np.cumsum(sizes)[:-1]
        heap = np.concatenate(arrays) if len(arrays) > 1 else arrays[0]
    else:
        heap = np.zeros(1, dtype=np.int64)

    kernel = _numba_kernel() if numba_enabled() and cols.shape[0] >= _NUMBA_CUTOVER else None
    if kernel is not None:
        out = np.empty(cols.shape[0], dtype=np.int64)
        flags = np.empty(cols.shape[0], dtype=np.uint8)
        kernel(prog.instrs, cols, heap, offs, sizes, out, flags, max(prog.stack_need, 1))
        return out, flags
    return _eval_numpy(prog.instrs, cols, heap, offs, sizes, prog.stack_need)


def eval_batch_numpy(prog: Program, cols: np.ndarray, tables) -> tuple[np.ndarray, np.ndarray]:
    """The numpy path unconditionally; exists for differential tests and
    the backend benchmark."""
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    arrays = [np.ascontiguousarray(t, dtype=np.int64) for t in tables]
    sizes = np.array([a.size for a in arrays], dtype=np.int64)
    offs = np.zeros(len(arrays), dtype=np.int64)
    if arrays:
        offs[1:] = np.cumsum(sizes)[:-1]
        heap = np.concatenate(arrays) if len(arrays) > 1 else arrays[0]
    else:
        heap = np.zeros(1, dtype=np.int64)
    return _eval_numpy(prog.instrs, cols, heap, offs, sizes, prog.stack_need)


def eval_batch_numba(prog: Program, cols: np.ndarray, tables) -> tuple[np.ndarray, np.ndarray]:
    """The numba path unconditionally; raises if numba is unavailable."""
    kernel = _numba_kernel()
    if kernel is None:
        raise RuntimeError("numba backend is not available")
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    arrays = [np.ascontiguousarray(t, dtype=np.int64) for t in tables]
    sizes = np.array([a.size for a in arrays], dtype=np.int64)
    offs = np.zeros(len(arrays), dtype=np.int64)
    if arrays:
        offs[1:] = np.cumsum(sizes)[:-1]
        heap = np.concatenate(arrays) if len(arrays) > 1 else arrays[0]
    else:
        heap = np.zeros(1, dtype=np.int64)
    out = np.empty(cols.shape[0], dtype=np.int64)
    flags = np.empty(cols.shape[0], dtype=np.uint8)
    kernel(prog.instrs, cols, heap, offs, sizes, out, flags, max(prog.stack_need, 1))
    return out, flags
