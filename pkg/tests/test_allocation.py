import math

import numpy as np
import pytest

from feelsim.allocation import (
    PowerBudget,
    allocate_round,
    assign_remaining,
    bottleneck_matching,
    equal_split_rate,
    max_bipartite_matching,
    schedule_devices,
    slots_needed,
    water_fill,
)
from feelsim.channel import ChannelRealization, digital_rate
from feelsim.core import ContractViolation
from feelsim.verify import brute_force_bottleneck


def eq4_gain(h_row, current, m, P, noise):
    """Equal-power rate gain, written out term by term."""
    def rate(chs):
        if not chs:
            return 0.0
        return sum(math.log2(1 + (P / len(chs)) * h_row[c] ** 2 / noise) for c in chs)
    return rate(list(current) + [m]) - rate(list(current))


class TestBudget:
    def test_per_slot_formula(self):
        b = PowerBudget(100, np.array([5.0, 2.0]))
        assert b.per_slot().tolist() == [5.0, 2.0]
        b.commit(np.array([40.0, 10.0]), 20)
        np.testing.assert_allclose(b.per_slot(), [(500 - 40) / 80, (200 - 10) / 80])
        assert b.remaining_slots == 80

    def test_exhausted(self):
        b = PowerBudget(10, np.array([1.0]))
        b.commit(np.array([0.0]), 12)
        assert b.per_slot().tolist() == [0.0]

    def test_negative_commit(self):
        with pytest.raises(ContractViolation):
            PowerBudget(10, np.array([1.0])).commit(np.array([-1.0]), 1)


class TestSchedule:
    def test_zero_energy_schedules_everyone_with_budget(self):
        assert schedule_devices([0, 0, 0], [1.0, 0.0, 2.0], 5) == [0, 2]

    def test_gate_boundary(self):
        p, U = 2.0, 9
        edge = p * U
        assert schedule_devices([np.nextafter(edge, 0)], [p], U) == [0]
        assert schedule_devices([edge], [p], U) == [0]
        assert schedule_devices([np.nextafter(edge, np.inf)], [p], U) == []

    def test_alpha(self):
        assert schedule_devices([15.0], [1.0], 10, alpha=1.0) == []
        assert schedule_devices([15.0], [1.0], 10, alpha=2.0) == [0]


class TestMatching:
    def test_two_by_two(self):
        assign, value = bottleneck_matching([[3, 1], [2, 4]])
        assert assign.tolist() == [0, 1] and value == 3
        assert brute_force_bottleneck(np.array([[3.0, 1.0], [2.0, 4.0]])) == 3

    def test_single_device_takes_best(self):
        w = np.array([[0.2, 1.7, 0.9, 1.7]])
        assign, value = bottleneck_matching(w)
        assert assign.tolist() == [1] and value == 1.7

    def test_identical_rows(self):
        w = np.tile([5.0, 1.0, 3.0, 4.0], (3, 1))
        assign, value = bottleneck_matching(w)
        assert value == 3.0 == brute_force_bottleneck(w)
        assert len(set(assign.tolist())) == 3

    def test_random_against_brute_force(self):
        gen = np.random.default_rng(0)
        for _ in range(100):
            n = int(gen.integers(1, 7))
            m = int(gen.integers(n, 9))
            w = gen.integers(0, 4, size=(n, m)).astype(float) if gen.random() < 0.5 else gen.random((n, m))
            assign, value = bottleneck_matching(w)
            assert len(set(assign.tolist())) == n
            assert value == w[np.arange(n), assign].min() == brute_force_bottleneck(w)

    def test_too_many_devices(self):
        with pytest.raises(ValueError):
            bottleneck_matching(np.ones((3, 2)))

    def test_max_matching_cardinality(self):
        adj = np.array([[1, 1, 0], [1, 0, 0], [0, 0, 0]], dtype=bool)
        match = max_bipartite_matching(adj)
        assert match.tolist() == [1, 0, -1]


class TestAssignRemaining:
    def test_no_spare(self):
        beta = np.eye(3, dtype=bool)
        out = assign_remaining(beta, np.ones((3, 3)), np.ones(3), 1.0)
        np.testing.assert_array_equal(out, beta)

    def test_useless_channel_skipped(self):
        # device 0 is slowest, but splitting its power onto a near-dead channel lowers its rate
        h = np.array([[1.0, 1e-9, 0.1], [10.0, 1e-9, 10.0]])
        beta = np.array([[True, False, False], [False, False, True]])
        out = assign_remaining(beta, h, np.array([1.0, 1.0]), 1.0)
        assert not out[0, 1]
        assert out.sum(axis=0).max() <= 1

    def test_accepted_gains_are_positive(self):
        gen = np.random.default_rng(5)
        for trial in range(50):
            h = gen.rayleigh(size=(3, 6))
            p = gen.uniform(0.5, 3.0, 3)
            noise = 0.3
            r = np.log2(1 + p[:, None] * h ** 2 / noise)
            assign, _ = bottleneck_matching(r)
            beta = np.zeros((3, 6), dtype=bool)
            beta[np.arange(3), assign] = True
            out = assign_remaining(beta, h, p, noise)
            assert np.all(out[beta])
            assert out.sum(axis=0).max() <= 1
            # replay the additions in the order the greedy loop must have made them
            cur = [set(np.flatnonzero(beta[i])) for i in range(3)]
            added = {i: sorted(set(np.flatnonzero(out[i])) - cur[i]) for i in range(3)}
            for i in range(3):
                # channels are added best-gain first among the free ones at each step
                for m in sorted(added[i], key=lambda c: -h[i, c]):
                    assert eq4_gain(h[i], sorted(cur[i]), m, p[i], noise) > 0
                    cur[i].add(m)

    def test_greedy_favours_slowest(self):
        h = np.array([[0.1, 1.0, 1.0], [5.0, 1.0, 1.0]])
        beta = np.array([[True, False, False], [False, True, False]])
        out = assign_remaining(beta, h, np.array([1.0, 1.0]), 0.01)
        assert out[0, 2]


class TestWaterFill:
    def test_equal_gains(self):
        p, _ = water_fill(np.full(4, 0.7), 2.0, 0.1)
        np.testing.assert_allclose(p, 0.5, rtol=1e-14)

    def test_dead_channel(self):
        p, _ = water_fill(np.array([1.0, 1e-8]), 3.0, 1.0)
        assert p[1] == 0.0 and p[0] == pytest.approx(3.0)

    def test_kkt(self):
        gen = np.random.default_rng(6)
        for _ in range(500):
            k = int(gen.integers(1, 8))
            h = gen.rayleigh(size=k)
            noise, P = gen.uniform(0.01, 3), gen.uniform(0.01, 10)
            p, level = water_fill(h, P, noise)
            floor = noise / h ** 2
            assert abs(p.sum() - P) <= 1e-9 * P
            assert np.all(p >= 0)
            on = p > 0
            np.testing.assert_allclose(p[on], level - floor[on], atol=1e-9)
            assert np.all(level <= floor[~on] + 1e-9)

    def test_beats_equal_split(self):
        gen = np.random.default_rng(7)
        for _ in range(500):
            k = int(gen.integers(1, 8))
            h = gen.rayleigh(size=k)
            noise, P = gen.uniform(0.01, 3), gen.uniform(0.01, 10)
            p, _ = water_fill(h, P, noise)
            ch = ChannelRealization(h[None, :], noise)
            assert digital_rate(ch, 0, range(k), p) >= equal_split_rate(h, P, noise) - 1e-12

    def test_beats_random_splits(self):
        gen = np.random.default_rng(8)
        h = gen.rayleigh(size=5)
        p, _ = water_fill(h, 2.0, 0.5)
        best = np.log2(1 + p * h ** 2 / 0.5).sum()
        splits = gen.dirichlet(np.ones(5), size=100_000) * 2.0
        assert best >= np.log2(1 + splits * h ** 2 / 0.5).sum(axis=1).max()

    def test_errors(self):
        with pytest.raises(ValueError):
            water_fill(np.array([]), 1.0, 1.0)
        with pytest.raises(ValueError):
            water_fill(np.ones(2), 0.0, 1.0)


class TestSlots:
    def test_ceiling(self):
        assert slots_needed(100, 10.0) == 10
        assert slots_needed(101, 10.0) == 11
        assert slots_needed(0, 3.0) == 0
        assert slots_needed(5, math.inf) == 0

    def test_product_covers_bits(self):
        gen = np.random.default_rng(9)
        for _ in range(1000):
            bits, rate = int(gen.integers(1, 10 ** 6)), float(gen.uniform(0.01, 500))
            U = slots_needed(bits, rate)
            assert U * rate >= bits and (U - 1) * rate < bits

    def test_zero_rate(self):
        with pytest.raises(ContractViolation):
            slots_needed(10, 0.0)


class TestAllocateRound:
    def test_one_device_by_hand(self):
        h = np.array([[1.0, 0.9, 0.8]])
        ch = ChannelRealization(h, 0.01)
        a = allocate_round([0], ch, np.array([1.0]), 1000, 4)
        idx = np.flatnonzero(a.beta[0])
        assert idx.size > 1
        p, _ = water_fill(h[0, idx], 1.0, 0.01)
        R = sum(math.log2(1 + p[j] * h[0, c] ** 2 / 0.01) for j, c in enumerate(idx))
        assert a.U_local == math.ceil(1000 / R)
        assert a.U_total == 4 + a.U_local

    def test_zero_payload(self):
        ch = ChannelRealization(np.ones((2, 3)), 1e-6)
        a = allocate_round([0, 1], ch, np.ones(2), 0, 7)
        assert a.U_local == 0 and a.U_total == 7

    def test_only_scheduled_rows(self):
        gen = np.random.default_rng(10)
        ch = ChannelRealization(gen.rayleigh(size=(5, 6)), 1e-3)
        a = allocate_round([1, 3], ch, np.full(5, 2.0), 500, 3)
        assert a.beta.shape == (2, 6) and a.scheduled == [1, 3]
        for i, n in enumerate(a.scheduled):
            assert a.rates[i] == pytest.approx(digital_rate(ch, n, np.flatnonzero(a.beta[i]), a.powers[i]))

    def test_invariants_random(self):
        gen = np.random.default_rng(11)
        for _ in range(1000):
            N = int(gen.integers(1, 7))
            M = int(gen.integers(N, 10))
            ch = ChannelRealization(gen.rayleigh(size=(N, M)) + 1e-12, float(gen.choice([1e-6, 1e-2, 1.0])))
            p_slot = gen.uniform(0.01, 5.0, N)
            sched = sorted(gen.choice(N, int(gen.integers(1, N + 1)), replace=False).tolist())
            bits = int(gen.integers(0, 50_000))
            a = allocate_round(sched, ch, p_slot, bits, 3)
            a.check(p_slot, bits)
            assert np.all(a.beta.sum(axis=1) >= 1)
            assert np.all(a.powers >= 0)
            assert a.U_local == a.U_device.max()
            np.testing.assert_allclose(a.energy(), a.U_device * a.powers.sum(axis=1))

    def test_empty_schedule(self):
        with pytest.raises(ContractViolation):
            allocate_round([], ChannelRealization(np.ones((1, 1)), 1.0), np.ones(1), 10, 1)
