"""Per-round device scheduling, sub-channel assignment and power allocation.

The digital phase minimizes the slowest scheduled device's slot count. The
mixed-integer problem is decoupled into a max-min (bottleneck) matching that
gives every device one sub-channel, a greedy hand-out of spare sub-channels
by equal-power rate gain, and per-device water-filling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelRealization, _log2_1p_snr
from .core import ContractViolation

__all__ = [
    "Allocation",
    "PowerBudget",
    "allocate_round",
    "assign_remaining",
    "bottleneck_matching",
    "equal_split_rate",
    "max_bipartite_matching",
    "potential_gain",
    "schedule_devices",
    "slots_needed",
    "water_fill",
]


@dataclass
class PowerBudget:
    """Running slot/energy ledger for the whole run.

    ``spent_power[n]`` is the energy (power x slots) device ``n`` has used so
    far and ``spent_slots`` the slots consumed by all finished rounds.
    """

    C: int
    P_bar: np.ndarray
    spent_power: np.ndarray = None
    spent_slots: int = 0
    alpha: float = 1.0

    def __post_init__(self):
        self.P_bar = np.asarray(self.P_bar, dtype=np.float64).copy()
        if self.spent_power is None:
            self.spent_power = np.zeros_like(self.P_bar)
        else:
            self.spent_power = np.asarray(self.spent_power, dtype=np.float64).copy()
        if self.C < 1 or np.any(self.P_bar < 0) or self.alpha <= 0:
            raise ValueError("need C >= 1, P_bar >= 0 and alpha > 0")

    @property
    def remaining_slots(self) -> int:
        return self.C - self.spent_slots

    @property
    def remaining_energy(self) -> np.ndarray:
        return self.C * self.P_bar - self.spent_power

    def per_slot(self) -> np.ndarray:
        """Power each device may spend per remaining slot, ``(C*P_bar - spent) / (C - slots)``."""
        left = self.remaining_slots
        if left <= 0:
            return np.zeros_like(self.P_bar)
        return self.remaining_energy / left

    def commit(self, energy: np.ndarray, slots: int) -> None:
        energy = np.asarray(energy, dtype=np.float64)
        if np.any(energy < 0) or slots < 0:
            raise ContractViolation("negative energy or slot charge")
        self.spent_power = self.spent_power + energy
        self.spent_slots += int(slots)


def schedule_devices(oac_powers, p_slot, U_global: int, alpha: float = 1.0) -> list[int]:
    """Devices whose analog-phase energy fits ``alpha * p_slot * U_global``.

    Devices with no remaining per-slot budget are never scheduled.
    """
    e = np.asarray(oac_powers, dtype=np.float64)
    p = np.asarray(p_slot, dtype=np.float64)
    ok = (p > 0) & (e <= alpha * p * U_global)
    return [int(n) for n in np.flatnonzero(ok)]


# -- bottleneck matching ------------------------------------------------------


def max_bipartite_matching(adj: np.ndarray) -> np.ndarray:
    """Maximum-cardinality matching of rows into columns (augmenting paths).

    Returns ``match[row] = column`` or ``-1``. Columns are tried in
    increasing index order, so the result is deterministic.
    """
    adj = np.asarray(adj, dtype=bool)
    n_rows, n_cols = adj.shape
    owner = np.full(n_cols, -1, dtype=np.int64)
    nbrs = [np.flatnonzero(adj[r]) for r in range(n_rows)]

    def augment(r, seen):
        for c in nbrs[r]:
            if seen[c]:
                continue
            seen[c] = True
            if owner[c] < 0 or augment(owner[c], seen):
                owner[c] = r
                return True
        return False

    for r in range(n_rows):
        augment(r, np.zeros(n_cols, dtype=bool))
    match = np.full(n_rows, -1, dtype=np.int64)
    for c in np.flatnonzero(owner >= 0):
        match[owner[c]] = c
    return match


def bottleneck_matching(weights) -> tuple[np.ndarray, float]:
    """One distinct column per row maximizing the smallest chosen weight.

    Binary search over the sorted distinct weights for the largest threshold
    at which the edges ``w >= threshold`` still admit a perfect matching of
    the rows.

    Returns
    -------
    (np.ndarray, float)
        ``assign[row] = column`` and the bottleneck (minimum chosen) weight.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("weights must be a matrix")
    n, m = w.shape
    if n > m:
        raise ValueError(f"cannot match {n} devices into {m} sub-channels")
    if n == 0:
        return np.zeros(0, dtype=np.int64), math.inf
    levels = np.unique(w)
    lo, hi = 0, levels.size - 1
    best = max_bipartite_matching(w >= levels[0])
    while lo < hi:
        mid = (lo + hi + 1) // 2
        match = max_bipartite_matching(w >= levels[mid])
        if np.all(match >= 0):
            lo, best = mid, match
        else:
            hi = mid - 1
    if np.any(best < 0):
        raise ContractViolation("complete bipartite graph without a perfect matching")
    return best, float(w[np.arange(n), best].min())


# -- spare sub-channels -------------------------------------------------------


def equal_split_rate(h, total_power: float, noise_var: float) -> float:
    """Sum rate when ``total_power`` is split evenly over channels with amplitudes ``h``."""
    h = np.asarray(h, dtype=np.float64)
    if h.size == 0:
        return 0.0
    p = np.full(h.size, total_power / h.size)
    return float(np.sum(_log2_1p_snr(p, h, noise_var)))


def potential_gain(h_row, current, m_new: int, total_power: float, noise_var: float) -> float:
    """Equal-power rate gain of adding sub-channel ``m_new`` to the set ``current``."""
    h_row = np.asarray(h_row, dtype=np.float64)
    cur = sorted(current)
    with np.errstate(invalid="ignore"):
        return equal_split_rate(h_row[cur + [m_new]], total_power, noise_var) - equal_split_rate(
            h_row[cur], total_power, noise_var
        )


def assign_remaining(beta, gains, p_slot, noise_var: float) -> np.ndarray:
    """Hand out unassigned sub-channels to the currently slowest devices.

    ``beta`` is the (N_t, M) 0/1 assignment after matching and ``gains`` /
    ``p_slot`` the matching rows of amplitudes and per-slot budgets. Ties in
    argmin/argmax go to the lowest index.
    """
    beta = np.array(beta, dtype=bool)
    gains = np.asarray(gains, dtype=np.float64)
    p_slot = np.asarray(p_slot, dtype=np.float64)
    n_dev, M = beta.shape
    rates = np.array([equal_split_rate(gains[i, beta[i]], p_slot[i], noise_var) for i in range(n_dev)])
    improvable = set(range(n_dev))
    free = set(np.flatnonzero(~beta.any(axis=0)).tolist())
    while free and improvable:
        cand = sorted(improvable)
        i = cand[int(np.argmin(rates[cand]))]
        spare = sorted(free)
        m = spare[int(np.argmax(gains[i, spare]))]
        gain = potential_gain(gains[i], np.flatnonzero(beta[i]).tolist(), m, p_slot[i], noise_var)
        if gain > 0:
            beta[i, m] = True
            free.discard(m)
            rates[i] = equal_split_rate(gains[i, beta[i]], p_slot[i], noise_var)
        else:
            improvable.discard(i)
    return beta


# -- power ---------------------------------------------------------------------


def water_fill(gains, total_power: float, noise_var: float) -> tuple[np.ndarray, float]:
    """Rate-optimal split of ``total_power`` over parallel channels with amplitudes ``gains``.

    ``p_m = (level - noise_var / h_m^2)^+`` where the water level is found
    exactly from the sorted floor heights.

    Returns
    -------
    (np.ndarray, float)
        Per-channel powers (input order) and the water level ``1 / lambda``.
    """
    h = np.asarray(gains, dtype=np.float64)
    if h.size == 0:
        raise ValueError("at least one channel is required")
    if total_power <= 0:
        raise ValueError("total_power must be positive")
    with np.errstate(divide="ignore", over="ignore"):
        floor = noise_var / h ** 2
    order = np.argsort(floor, kind="stable")
    fs = floor[order]
    k = np.arange(1, h.size + 1)
    with np.errstate(invalid="ignore"):
        levels = (total_power + np.cumsum(fs)) / k
    active = int(np.flatnonzero(levels > fs)[-1]) + 1
    level = float(levels[active - 1])
    p = np.zeros(h.size)
    p[order[:active]] = level - fs[:active]
    return p, level


def slots_needed(bits: int, rate: float) -> int:
    """Smallest integer ``U`` with ``U * rate >= bits``."""
    if bits <= 0 or math.isinf(rate):
        return 0
    if not rate > 0:
        raise ContractViolation("scheduled device has zero digital rate")
    U = math.ceil(bits / rate)
    while U * rate < bits:
        U += 1
    return U


@dataclass
class Allocation:
    scheduled: list[int]
    beta: np.ndarray  # (N_t, M) bool
    powers: np.ndarray  # (N_t, M) per-slot digital power
    rates: np.ndarray  # (N_t,) bits per slot
    U_device: np.ndarray  # (N_t,) digital slots per device
    U_global: int
    U_local: int
    bottleneck: float = field(default=math.nan)

    @property
    def U_total(self) -> int:
        return self.U_global + self.U_local

    def check(self, p_slot, bits: int) -> None:
        """Raise if channel exclusivity, per-device power or bit delivery is violated."""
        if np.any(self.beta.sum(axis=0) > 1):
            raise ContractViolation("sub-channel assigned to more than one device")
        if np.any(self.powers[~self.beta] != 0):
            raise ContractViolation("power on an unassigned sub-channel")
        p = np.asarray(p_slot, dtype=np.float64)[self.scheduled]
        if np.any(self.powers.sum(axis=1) > p * (1 + 1e-9)):
            raise ContractViolation("per-slot power budget exceeded")
        finite = np.isfinite(self.rates)
        if bits > 0 and np.any(self.U_device[finite] * self.rates[finite] < bits):
            raise ContractViolation("digital payload not delivered")

    def energy(self) -> np.ndarray:
        """Digital-phase energy per scheduled device: slots x total per-slot power."""
        return self.U_device * self.powers.sum(axis=1)


def allocate_round(
    scheduled, ch: ChannelRealization, p_slot, bits: int, U_global: int
) -> Allocation:
    """Sub-channels and powers for the digital phase of ``scheduled`` devices.

    ``p_slot`` is indexed by device id. Pure: budgets are not touched.
    """
    sched = [int(n) for n in scheduled]
    if not sched:
        raise ContractViolation("allocation requested for an empty schedule")
    p = np.asarray(p_slot, dtype=np.float64)[sched]
    h = ch.gains[sched]
    M = ch.M
    with np.errstate(divide="ignore"):
        r = _log2_1p_snr(p[:, None], h, ch.noise_var)
    assign, bott = bottleneck_matching(r)
    beta = np.zeros((len(sched), M), dtype=bool)
    beta[np.arange(len(sched)), assign] = True
    beta = assign_remaining(beta, h, p, ch.noise_var)

    powers = np.zeros((len(sched), M))
    rates = np.zeros(len(sched))
    for i in range(len(sched)):
        idx = np.flatnonzero(beta[i])
        pw, _ = water_fill(h[i, idx], p[i], ch.noise_var)
        powers[i, idx] = pw
        rates[i] = float(np.sum(_log2_1p_snr(pw, h[i, idx], ch.noise_var)))
    U_dev = np.array([slots_needed(bits, R) for R in rates], dtype=np.int64)
    return Allocation(
        scheduled=sched,
        beta=beta,
        powers=powers,
        rates=rates,
        U_device=U_dev,
        U_global=int(U_global),
        U_local=int(U_dev.max()) if U_dev.size else 0,
        bottleneck=bott,
    )
