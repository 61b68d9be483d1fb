"""Training loops for the hybrid scheme and the two digital baselines.

All three algorithms share data, partitions, initial model, per-device SGD
batches and channel draws for a given seed, so they can be compared round
by round. A run stops when the uplink slot budget is used up, when
``max_rounds`` is reached, or when the optional target accuracy is hit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .allocation import Allocation, PowerBudget, allocate_round, schedule_devices
from .channel import OacConfig, draw_channel, oac_aggregate, oac_slots, oac_transmit_power
from .compression import (
    CompressionSpec,
    SparseUpdate,
    compress_round,
    dequantize,
    error_update,
    global_mask,
    local_mask,
    position_bits,
    quantize,
)
from .config import ConfigError, RunConfig
from .core import ContractViolation, RngStream, top_k_mask
from .learning import (
    Dataset,
    DeviceState,
    evaluate,
    init_params,
    load_csv_dataset,
    local_sgd,
    loss_and_grad,
    partition,
    synthesize_dataset,
)

__all__ = [
    "RoundReport",
    "Simulation",
    "aggregate_eq2",
    "build_data",
    "digital_payload_bits",
    "initialize",
    "run",
    "run_tcs_d",
    "run_tcs_h",
    "run_top_k",
]

log = logging.getLogger(__name__)


@dataclass
class RoundReport:
    round: int
    loss: float
    accuracy: float
    n_scheduled: int
    u_round: int
    slots_cum: int
    blocks_cum: int
    power_spent_max: float
    power_spent: list = field(default_factory=list)
    gamma: float = math.nan
    residual_ratio: float = math.nan
    skipped: bool = False


def aggregate_eq2(y_t, locals_, N_t: int, sigma_t: float) -> np.ndarray:
    """``y_t / (sigma_t N_t) + (1 / N_t) * sum(locals)``."""
    if N_t < 1:
        raise ContractViolation("aggregation with no scheduled device")
    out = np.asarray(y_t, dtype=np.float64) / (sigma_t * N_t)
    for u in locals_:
        if not isinstance(u, SparseUpdate):
            u = dequantize(u)
        out[u.mask.positions] += u.values / N_t
    return out


def digital_payload_bits(cfg: RunConfig, algorithm: Optional[str] = None) -> int:
    """Bits each scheduled device sends digitally per round."""
    algorithm = algorithm or cfg.algorithm
    pb = position_bits(cfg.d)
    if algorithm == "tcs_h":
        return (pb + cfg.q) * cfg.k_local
    if algorithm == "tcs_d":
        return cfg.q * cfg.k_global + (pb + cfg.q) * cfg.k_local
    if algorithm == "top_k":
        return (pb + cfg.q) * (cfg.k_global + cfg.k_local)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def build_data(cfg: RunConfig) -> tuple[list[Dataset], Dataset]:
    root = RngStream(cfg.seed)
    if cfg.train_csv is not None:
        train = load_csv_dataset(cfg.train_csv, cfg.num_classes)
        if cfg.test_csv is None:
            raise ValueError("test_csv is required with train_csv")
        test = load_csv_dataset(cfg.test_csv, cfg.num_classes)
        if train.features.shape[1] != cfg.input_dim:
            raise ValueError("input_dim does not match the CSV feature count")
    else:
        full = synthesize_dataset(
            cfg.num_classes, cfg.n_train + cfg.n_test, cfg.input_dim,
            root.child("data"), cfg.separation,
        )
        train = full.subset(np.arange(cfg.n_train))
        test = full.subset(np.arange(cfg.n_train, cfg.n_train + cfg.n_test))
    shards = partition(train, cfg.n_devices, cfg.partition, root.child("partition"),
                       cfg.classes_per_device)
    small = min(len(s) for s in shards)
    if cfg.batch_size > small:
        raise ConfigError("batch_size", f"exceeds the smallest shard ({small} samples)")
    return shards, test


def initialize(cfg: RunConfig, shards: list[Dataset]):
    """Common starting point ``(w_0, g_hat_0, devices)``.

    ``w_{-1}`` is random; one exact full-batch gradient step averaged over
    all devices gives ``g_0``, which also seeds the first global mask. This
    step is not charged to the uplink budget.
    """
    spec = cfg.model
    w_prev = init_params(spec, RngStream(cfg.seed).child("init"))
    grads = [loss_and_grad(spec, w_prev, s)[1] for s in shards]
    g0 = -cfg.eta * np.mean(grads, axis=0)
    w0 = w_prev + g0
    devices = [DeviceState.fresh(s, spec.d) for s in shards]
    return w0, g0.copy(), devices


class Simulation:
    """Stateful round-by-round runner.

    ``step()`` executes one round and returns its :class:`RoundReport`, or
    ``None`` once the run is over. The current model is ``self.w`` and the
    last aggregate ``self.g_hat``.
    """

    def __init__(self, cfg: RunConfig, data: Optional[tuple[list[Dataset], Dataset]] = None):
        self.cfg = cfg
        self.spec = cfg.model
        self.comp: CompressionSpec = cfg.compression
        self.shards, self.test = data if data is not None else build_data(cfg)
        if len(self.shards) != cfg.n_devices:
            raise ValueError("one shard per device is required")
        self.w, self.g_hat, self.devices = initialize(cfg, self.shards)
        self.budget = PowerBudget(cfg.slot_budget, np.full(cfg.n_devices, cfg.p_bar),
                                  alpha=cfg.alpha)
        self.oac = OacConfig(cfg.sigma_t, cfg.n_subchannels, cfg.k_global)
        self.bits = digital_payload_bits(cfg)
        self.root = RngStream(cfg.seed)
        self.t = 0
        self.done = False
        self.reports: list[RoundReport] = []
        self.last_allocation: Optional[Allocation] = None
        self.last_masks: list = []
        self._round = {
            "tcs_h": self._round_tcs_h,
            "tcs_d": self._round_tcs_d,
            "top_k": self._round_top_k,
        }[cfg.algorithm]
        if cfg.algorithm != "tcs_h" and cfg.n_scheduled_digital < 1:
            raise ValueError("n_scheduled_digital must be >= 1 for the digital baselines")

    # -- shared pieces ----------------------------------------------------

    def _local(self, n: int) -> np.ndarray:
        """Error-compensated local model difference of device ``n``."""
        c = self.cfg
        g = local_sgd(self.spec, self.w, self.devices[n].shard, c.local_steps, c.batch_size,
                      c.eta, self.root.child("sgd", self.t, n))
        return g + self.devices[n].error

    def _channel(self):
        return draw_channel(self.cfg.n_devices, self.cfg.n_subchannels,
                            self.root.child("channel", self.t), self.cfg.noise_var)

    def _random_schedule(self, p_slot: np.ndarray) -> list[int]:
        pool = np.flatnonzero(p_slot > 0)
        k = min(self.cfg.n_scheduled_digital, pool.size)
        if k == 0:
            return []
        gen = self.root.child("schedule", self.t).generator()
        return sorted(int(n) for n in gen.choice(pool, size=k, replace=False))

    def _affordable_allocation(self, sched, ch, p_slot, bits, U_g, analog):
        """Allocate, dropping devices whose round energy would exceed their remaining budget.

        Dropping a device never lowers the others' rates.
        """
        sched = list(sched)
        cap = self.budget.C * self.budget.P_bar
        while sched:
            alloc = allocate_round(sched, ch, p_slot, bits, U_g)
            alloc.check(p_slot, bits)
            energy = np.zeros(self.cfg.n_devices)
            energy[sched] = analog[sched] + alloc.energy()
            ok = [n for n in sched if self.budget.spent_power[n] + energy[n] <= cap[n]]
            if len(ok) == len(sched):
                return alloc, energy
            log.info("round %d: %d device(s) cannot afford the round", self.t, len(sched) - len(ok))
            # With alpha <= 1 only a round that overruns the remaining slots can outspend a
            # device's energy; it still runs with the affordable devices and
            # then ends the run.
            self.done = True
            sched = ok
        return None, np.zeros(self.cfg.n_devices)

    def _report(self, sched, alloc, energy, residuals, skipped=False) -> RoundReport:
        c = self.cfg
        U = alloc.U_total if alloc is not None else 0
        if alloc is not None:
            self.budget.commit(energy, U)
        losses = [evaluate(self.spec, self.w, s)[0] for s in self.shards]
        _, acc = evaluate(self.spec, self.w, self.test)
        prev_slots = self.reports[-1].slots_cum if self.reports else 0
        slots = prev_slots + U
        rep = RoundReport(
            round=self.t,
            loss=float(np.mean(losses)),
            accuracy=acc,
            n_scheduled=len(sched),
            u_round=U,
            slots_cum=slots,
            blocks_cum=slots * c.n_subchannels,
            power_spent_max=float(energy.max()) if energy.size else 0.0,
            power_spent=[float(e) for e in energy],
            gamma=self.comp.gamma if c.algorithm != "top_k" else (c.k_global + c.k_local) / c.d,
            residual_ratio=float(np.mean(residuals)) if residuals else math.nan,
            skipped=skipped,
        )
        return rep

    # -- algorithms ---------------------------------------------------------

    def _round_tcs_h(self):
        c = self.cfg
        p_slot = self.budget.per_slot()
        U_g = oac_slots(c.k_global, c.n_subchannels)
        g_ec, parts = [], []
        for n in range(c.n_devices):
            x = self._local(n)
            g_ec.append(x)
            parts.append(compress_round(x, self.g_hat, self.comp, self.root.child("quant", self.t, n)))
        m_g = parts[0][0].mask
        if any(p[0].mask != m_g for p in parts):
            raise ContractViolation("global masks differ across devices")
        self.last_masks = [p[0].mask for p in parts]

        ch = self._channel()
        analog = np.array([oac_transmit_power(p[0], ch, n, self.oac) for n, p in enumerate(parts)])
        sched = schedule_devices(analog, p_slot, U_g, c.alpha)
        alloc, energy = (None, np.zeros(c.n_devices))
        if sched:
            alloc, energy = self._affordable_allocation(sched, ch, p_slot, self.bits, U_g, analog)
        if alloc is None:
            if sched:
                return self._exhausted()
            return self._skip()
        sched = alloc.scheduled
        self.last_allocation = alloc

        y = oac_aggregate([parts[n][0] for n in sched], ch, self.oac, self.root.child("oac", self.t))
        self.g_hat = aggregate_eq2(y, [parts[n][1] for n in sched], len(sched), c.sigma_t)
        self.w = self.w + self.g_hat
        residuals = []
        for n in sched:
            e = error_update(g_ec[n], parts[n][0], parts[n][1], True)
            residuals.append(_ratio(e, g_ec[n]))
            self.devices[n].error = e
        return self._report(sched, alloc, energy, residuals)

    def _digital_round(self, compress: Callable[[int, np.ndarray], list]):
        c = self.cfg
        p_slot = self.budget.per_slot()
        sched = self._random_schedule(p_slot)
        if not sched:
            return self._skip()
        ch = self._channel()
        alloc, energy = self._affordable_allocation(sched, ch, p_slot, self.bits, 0, np.zeros(c.n_devices))
        if alloc is None:
            return self._exhausted()
        sched = alloc.scheduled
        self.last_allocation = alloc
        # unscheduled devices would discard their work, so it is not computed
        agg = np.zeros(c.d)
        residuals = []
        for n in sched:
            x = self._local(n)
            sent = [dequantize(qu) for qu in compress(n, x)]
            for u in sent:
                agg[u.mask.positions] += u.values
            e = error_update(x, *sent, True) if len(sent) == 2 else error_update(x, sent[0], None, True)
            residuals.append(_ratio(e, x))
            self.devices[n].error = e
        self.g_hat = agg / len(sched)
        self.w = self.w + self.g_hat
        return self._report(sched, alloc, energy, residuals)

    def _round_tcs_d(self):
        m_g = global_mask(self.g_hat, self.comp)

        def compress(n, x):
            m_l = local_mask(x, m_g, self.comp)
            qg = quantize(SparseUpdate.from_dense(x, m_g), self.cfg.q, self.root.child("quant_g", self.t, n))
            ql = quantize(SparseUpdate.from_dense(x, m_l), self.cfg.q, self.root.child("quant", self.t, n))
            return [qg, ql]

        return self._digital_round(compress)

    def _round_top_k(self):
        K = self.cfg.k_global + self.cfg.k_local

        def compress(n, x):
            m = top_k_mask(x, K)
            return [quantize(SparseUpdate.from_dense(x, m), self.cfg.q, self.root.child("quant", self.t, n))]

        return self._digital_round(compress)

    def _exhausted(self) -> None:
        # Nobody can afford the remaining slots: the run ends without a round.
        log.info("round %d not executed: energy budget exhausted", self.t)
        self.done = True
        return None

    def _skip(self) -> RoundReport:
        log.info("round %d skipped: no device scheduled", self.t)
        return self._report([], None, np.zeros(self.cfg.n_devices), [], skipped=True)

    # -- driver -------------------------------------------------------------

    def step(self) -> Optional[RoundReport]:
        c = self.cfg
        if self.done or self.t >= c.max_rounds or self.budget.spent_slots >= c.slot_budget:
            self.done = True
            return None
        self.t += 1
        rep = self._round()
        if rep is None:
            self.t -= 1
            return None
        self.reports.append(rep)
        if c.target_accuracy is not None and rep.accuracy >= c.target_accuracy:
            self.done = True
        return rep

    def run(self, on_round: Optional[Callable[[RoundReport], None]] = None) -> list[RoundReport]:
        while (rep := self.step()) is not None:
            if on_round is not None:
                on_round(rep)
        return self.reports


def _ratio(e: np.ndarray, x: np.ndarray) -> float:
    den = float(np.dot(x, x))
    return float(np.dot(e, e)) / den if den > 0 else 0.0


def run(cfg: RunConfig, **kw) -> list[RoundReport]:
    return Simulation(cfg, **kw).run()


def _run_as(algorithm: str):
    def runner(cfg: RunConfig, **kw) -> list[RoundReport]:
        if cfg.algorithm != algorithm:
            cfg = cfg.replace(algorithm=algorithm)
        return Simulation(cfg, **kw).run()

    runner.__name__ = f"run_{algorithm}"
    runner.__doc__ = f"Run the ``{algorithm}`` algorithm to completion."
    return runner


run_tcs_h = _run_as("tcs_h")
run_tcs_d = _run_as("tcs_d")
run_top_k = _run_as("top_k")
