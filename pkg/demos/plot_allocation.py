"""
Sharing sub-channels between devices in one round
=================================================

Each scheduled device first gets one sub-channel from a max-min matching.
Spare sub-channels then go to whichever device is currently slowest, and
finally every device water-fills its power over the channels it holds.
"""

import numpy as np

from feelsim.allocation import allocate_round, bottleneck_matching
from feelsim.channel import draw_channel
from feelsim.core import RngStream

ch = draw_channel(4, 7, RngStream(3, ("channel", 1)), noise_var=1e-6)
p_slot = np.full(4, 5.0)

# Per-edge rate if a device put its whole budget on one sub-channel.
r = np.log2(1 + p_slot[:, None] * ch.gains ** 2 / ch.noise_var)
assign, worst = bottleneck_matching(r)
print("matching:", assign.tolist(), f"bottleneck rate {worst:.2f} bits/slot")

alloc = allocate_round([0, 1, 2, 3], ch, p_slot, bits=1700, U_global=9)
for i, n in enumerate(alloc.scheduled):
    chans = np.flatnonzero(alloc.beta[i]).tolist()
    print(f"device {n}: channels {chans}  power {np.round(alloc.powers[i, chans], 3).tolist()}  "
          f"rate {alloc.rates[i]:.1f}  slots {alloc.U_device[i]}")
print("round length:", alloc.U_global, "analog +", alloc.U_local, "digital =", alloc.U_total, "slots")

# ``check`` raises if a sub-channel is shared, a budget is exceeded or a
# device cannot deliver its payload in the slots it was given.
alloc.check(p_slot, 1700)
