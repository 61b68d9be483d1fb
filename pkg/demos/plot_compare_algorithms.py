"""
Comparing the hybrid scheme with two digital baselines
======================================================

All three algorithms share data, initial model and channel draws. The
baselines schedule a fixed random subset per round, sized to match the
average number of devices the hybrid scheme admitted.
"""

from feelsim import RunConfig, Simulation
from feelsim.cli import accuracy_at_budget, summarize

cfg = RunConfig(seed=1, slot_budget=6000, max_rounds=10_000)

hybrid = Simulation(cfg)
runs = {"tcs_h": hybrid.run()}
k = max(1, round(summarize(runs["tcs_h"])["mean_scheduled"]))
for alg in ("tcs_d", "top_k"):
    sim = Simulation(cfg.replace(algorithm=alg, n_scheduled_digital=k), data=(hybrid.shards, hybrid.test))
    runs[alg] = sim.run()

# Slots per round: the analog phase carries the shared coordinates in
# ceil(K_global / M) slots, while the baselines must send them bit by bit.
for alg, reps in runs.items():
    s = summarize(reps)
    print(f"{alg:6s} rounds {s['rounds']:4d}  slots/round {reps[0].u_round:4d}  "
          f"final acc {s['final_accuracy']:.3f}")

# Accuracy reached once each algorithm has used the blocks Top-K finished with.
budget = runs["top_k"][-1].blocks_cum
for alg, reps in runs.items():
    print(f"accuracy at {budget} blocks, {alg}: {accuracy_at_budget(reps, budget):.3f}")
