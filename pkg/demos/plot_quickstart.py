"""
Training a small model over a simulated uplink
==============================================

Twenty devices hold shards of a synthetic 10-class problem and train a
one-hidden-layer network together. Each round they send a sparsified update
to the base station through a mix of analog summation and digital links.
"""

from feelsim import RunConfig, Simulation

# The defaults describe the desk-scale setting: 20 devices, 25 sub-channels,
# ten local SGD steps per round and 16-bit quantization.
cfg = RunConfig(seed=0, max_rounds=30, slot_budget=20_000)
print(f"model dimension d = {cfg.d}, global / local sparsity = {cfg.k_global} / {cfg.k_local}")

# ``step`` runs one round and returns its report, or None once the run is over.
sim = Simulation(cfg)
for rep in iter(sim.step, None):
    if rep.round % 5 == 0:
        print(f"round {rep.round:3d}  acc {rep.accuracy:.3f}  loss {rep.loss:.3f}  "
              f"scheduled {rep.n_scheduled:2d}  slots {rep.u_round:3d}  blocks so far {rep.blocks_cum}")

# The budget ledger records every device's energy and the slots consumed.
print("slots used:", sim.budget.spent_slots, "of", cfg.slot_budget)
print("largest device energy:", round(float(sim.budget.spent_power.max()), 2),
      "of", cfg.slot_budget * cfg.p_bar)
