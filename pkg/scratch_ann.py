"""Scratch: dump annotation sets for a lowered pipeline."""
import sys
from pathlib import Path

from minisched.parser import parse_pipeline, parse_schedule
from minisched.lowering import lower, Loop, Produce, Consume, Store, If, StoreStmt, Chain
from minisched.annotate import annotate, Ann, RegionPerm
from minisched.printing import ExprPrinter, quantified, frac_text

pr = ExprPrinter(dialect="cann")


def ann_text(a):
    if isinstance(a, RegionPerm):
        a = a.quantified()
    body = pr.print(a.body)
    if a.quants:
        body = quantified(a.quants, None, body, pr)
    tag = "" if a.live else f"  [dormant until {a.until}]"
    return f"{a.kind}: {body}{tag}  <{a.origin}>"


def dump(n, ap, depth=0):
    pad = "  " * depth
    aset = ap.at(n)
    label = {
        Loop: lambda n: f"{n.dim.kind} loop {n.dim.var} [{pr.print(n.dim.lo)}, +{n.dim.extent}) owner={n.owner}",
        Produce: lambda n: f"produce {n.func}",
        Consume: lambda n: f"consume {n.func}",
        Store: lambda n: f"store {n.func}",
        If: lambda n: f"if {pr.print(n.cond)}",
        StoreStmt: lambda n: f"stmt {n.func}.s{n.stage} {pr.print(n.index)} = {pr.print(n.value)}",
        Chain: lambda n: "chain",
    }[type(n)](n)
    print(f"{pad}{label}")
    for slot in ("invariants", "requires", "ensures", "context"):
        for a in getattr(aset, slot):
            print(f"{pad}  | {slot[:3]} {ann_text(a)}")
    for c in getattr(n, "body", []):
        dump(c, ap, depth + 1)


name, sched = sys.argv[1], sys.argv[2]
scales = {
    "blur": {"x": 64, "y": 64}, "count": {"w": 16}, "matmul": {"n": 8},
    "conv1d": {"n": 64}, "chain3": {"n": 64}, "update2": {"n": 32},
}
src = Path(f"corpus/{name}.hal").read_text()
p = parse_pipeline(src).resolve(scales[name])
dirs = parse_schedule(Path(f"corpus/schedules/{name}/{sched}.sched").read_text())
lp = lower(p, dirs)
ap = annotate(lp, include_user="--no-user" not in sys.argv)
print("== top ==")
for a in ap.top:
    print("  " + ann_text(a))
dump(lp.root, ap)
