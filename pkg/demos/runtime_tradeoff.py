"""Templating vs waylaying: how the attack budget splits as n grows.

Prints the runtime curve around the optimum and the full plan table for a
12 GiB machine.
"""

from hammersim.orchestrator import GIB, OptimizerInput, optimize_n, plan_table, runtime

inp = OptimizerInput(P=12 * GIB)
best = optimize_n(inp)
print(f"optimum n = {best.n}, {best.total_s / 3600:.1f} h total")
for n in (1, 10, 25, best.n, 100, 400, 1600):
    print(f"  n={n:5d}  {runtime(inp, n) / 3600:8.1f} h")

print("\ntechnique      method     n   templ_h  wayl_h  total_h")
for p in plan_table():
    t, w, total = p.hours()
    print(f"{p.technique:13s}  {p.method:9s} {p.n:4d}  {t:7.1f} {w:7.1f} {total:8.1f}")
