"""How big is the reasoner and what does one packet cost to score?

Counts are exact: parameters are summed over the model's tensors, FLOPs
are tallied layer by layer (a multiply-add counts as two). Both are set
against a 110M-parameter transformer encoder that would need at least
2 * 110M FLOPs per token.
"""

from trafficsem import evaluate as ev, reason

model = ev.default_cost_model()
rep = ev.count_flops(model)
print(f"parameters       {rep.params:>12,}  ({100 * rep.param_ratio:.3f}% of 110M)")
print(f"FLOPs / packet   {rep.flops:>12,}  ({100 * rep.flop_ratio:.2f}% of one reference token)")
print(f"FLOPs / window   {rep.flops_window:>12,}  (recomputing all {model.cfg.window} tokens)")
print("\nbreakdown (streaming)")
for part, n in rep.breakdown.items():
    print(f"  {part:28s} {n:>10,}")

print("\nwindow length vs per-packet cost")
for a in (10, 30, 60, 120):
    m = ev.default_cost_model(cfg=reason.ReasonerConfig(window=a))
    print(f"  A={a:<4d} {ev.count_flops(m).flops:>10,}")
