"""Independent numerical checks of the compression bound and the allocation routines.

Each suite returns a list of :class:`Check` records. The oracles here are
deliberately naive (brute force, random search, finite differences) and do
not reuse the code paths they check.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .allocation import bottleneck_matching, water_fill
from .channel import ChannelRealization, OacConfig, oac_aggregate
from .compression import CompressionSpec, SparseUpdate, compress_round
from .core import MaskVector, RngStream
from .learning import ModelSpec, init_params, loss_and_grad, synthesize_dataset

__all__ = [
    "Check",
    "SUITES",
    "brute_force_bottleneck",
    "finite_difference_grad",
    "run_suite",
    "verify_gradcheck",
    "verify_lemma1",
    "verify_matching",
    "verify_oac",
    "verify_waterfill",
]


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    counterexample: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def verify_lemma1(seed: int = 0, trials: int = 10_000, d: int = 1000, K_global: int = 200,
                  K_local: int = 50, q: int = 16) -> list[Check]:
    """Monte Carlo residual energy of the two-mask compressor on Gaussian inputs."""
    spec = CompressionSpec(K_global, K_local, q, d)
    gen = RngStream(seed).child("lemma1").generator()
    ratios = np.empty(trials)
    for i in range(trials):
        x = gen.standard_normal(d)
        g_part, l_part = compress_round(x, x, spec, gen)
        r = x.copy()
        r[g_part.mask.positions] -= g_part.values
        r -= l_part.densify()
        ratios[i] = np.dot(r, r) / np.dot(x, x)
    mean, se = ratios.mean(), ratios.std(ddof=1) / math.sqrt(trials)
    bound = 1.0 - spec.gamma
    ok = mean <= bound + 3 * se
    return [Check(
        "lemma1_residual_bound", bool(ok),
        f"mean ratio {mean:.6f} (SE {se:.2e}) vs 1 - gamma = {bound:.6f}",
        {} if ok else {"d": d, "K_global": K_global, "K_local": K_local, "q": q, "seed": seed},
    )]


def brute_force_bottleneck(w: np.ndarray) -> float:
    """Best minimum edge weight over every injection of rows into columns."""
    n, m = w.shape
    rows = np.arange(n)
    return max(w[rows, list(p)].min() for p in itertools.permutations(range(m), n))


def verify_matching(seed: int = 0, trials: int = 100) -> list[Check]:
    gen = RngStream(seed).child("matching").generator()
    agree, first_bad = 0, None
    for _ in range(trials):
        n = int(gen.integers(2, 7))
        m = int(gen.integers(n, 9))
        # coarse grid of values forces plenty of ties
        w = gen.integers(0, 6, size=(n, m)).astype(float) if gen.random() < 0.5 else gen.random((n, m))
        assign, value = bottleneck_matching(w)
        injective = len(set(assign.tolist())) == n
        ok = injective and value == w[np.arange(n), assign].min() == brute_force_bottleneck(w)
        agree += ok
        if not ok and first_bad is None:
            first_bad = {"weights": w.tolist(), "assign": assign.tolist(), "value": value}
    return [Check("bottleneck_vs_brute_force", agree == trials, f"{agree}/{trials} agreements",
                  first_bad or {})]


def _rate(p: np.ndarray, h2: np.ndarray, noise_var: float) -> np.ndarray:
    return np.log2(1.0 + p * h2 / noise_var).sum(axis=-1)


def verify_waterfill(seed: int = 0, trials: int = 100, splits: int = 100_000,
                     tol: float = 1e-9) -> list[Check]:
    gen = RngStream(seed).child("waterfill").generator()
    worst_kkt, worst_gap, bad_kkt, bad_opt = 0.0, math.inf, None, None
    for _ in range(trials):
        k = int(gen.integers(2, 7))
        h = gen.rayleigh(1.0, size=k)
        noise_var = float(gen.uniform(0.05, 2.0))
        P = float(gen.uniform(0.1, 5.0))
        p, level = water_fill(h, P, noise_var)
        floor = noise_var / h ** 2
        on = p > 0
        kkt = max(
            float(np.max(np.abs(level - floor[on] - p[on]), initial=0.0)),
            float(np.max(level - floor[~on], initial=0.0)),
            abs(p.sum() - P) / P,
        )
        if kkt > worst_kkt:
            worst_kkt = kkt
            if kkt >= tol and bad_kkt is None:
                bad_kkt = {"h": h.tolist(), "P": P, "noise_var": noise_var, "p": p.tolist()}
        splits_p = gen.dirichlet(np.ones(k), size=splits) * P
        best_random = float(_rate(splits_p, h ** 2, noise_var).max())
        best_equal = float(_rate(np.full(k, P / k), h ** 2, noise_var))
        gap = float(_rate(p, h ** 2, noise_var)) - max(best_random, best_equal)
        if gap < worst_gap:
            worst_gap = gap
        if gap < 0 and bad_opt is None:
            bad_opt = {"h": h.tolist(), "P": P, "noise_var": noise_var, "p": p.tolist(), "gap": gap}
    return [
        Check("waterfill_kkt", worst_kkt < tol, f"max KKT residual {worst_kkt:.2e} (< {tol:g})",
              bad_kkt or {}),
        Check("waterfill_beats_random_splits", bad_opt is None,
              f"min(rate - best of {splits} random splits) = {worst_gap:.3e}", bad_opt or {}),
    ]


def verify_oac(seed: int = 0, trials: int = 10_000, noise_var: float = 1e-6) -> list[Check]:
    gen = RngStream(seed).child("oac").generator()
    d, K, M, N, sigma_t = 64, 20, 6, 4, 5.0
    mask = MaskVector(np.sort(gen.choice(d, K, replace=False)), d)
    ups = [SparseUpdate(mask, gen.standard_normal(K)) for _ in range(N)]
    gains = gen.rayleigh(1.0, size=(N, M)) + 1e-3
    cfg = OacConfig(sigma_t, M, K)
    expect = np.zeros(d)
    for u in ups:
        expect[mask.positions] += u.values

    clean = oac_aggregate(ups, ChannelRealization(gains, 0.0), cfg, RngStream(seed, ("oac",)))
    rel = np.linalg.norm(clean / sigma_t - expect) / np.linalg.norm(expect)

    ch = ChannelRealization(gains, noise_var)
    base = RngStream(seed).child("oac-noise")
    noise = np.empty((trials, K))
    for i in range(trials):
        noise[i] = oac_aggregate(ups, ch, cfg, base.child(i))[mask.positions] - sigma_t * expect[mask.positions]
    var = noise.var(axis=0, ddof=1)
    worst = float(np.max(np.abs(var / noise_var - 1.0)))
    return [
        Check("oac_noiseless_exact", rel < 1e-10, f"relative error {rel:.2e} (< 1e-10)"),
        Check("oac_noise_variance", worst < 0.05,
              f"max |var / noise_var - 1| over {K} coordinates = {worst:.4f} (< 0.05)"),
    ]


def finite_difference_grad(f: Callable[[np.ndarray], float], w: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def verify_gradcheck(seed: int = 0, trials: int = 10, tol: float = 1e-5) -> list[Check]:
    spec = ModelSpec((5, 7, 4))
    root = RngStream(seed).child("gradcheck")
    data = synthesize_dataset(4, 40, 5, root.child("data"), separation=2.0)
    worst = 0.0
    for i in range(trials):
        w = init_params(spec, root.child("point", i)) + 0.1 * root.child("shift", i).generator().standard_normal(spec.d)
        _, g = loss_and_grad(spec, w, data)
        fd = finite_difference_grad(lambda v: loss_and_grad(spec, v, data)[0], w)
        worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
    return [Check("gradient_vs_finite_differences", worst < tol,
                  f"max relative error {worst:.2e} over {trials} points (< {tol:g})")]


SUITES = {
    "lemma1": verify_lemma1,
    "matching": verify_matching,
    "waterfill": verify_waterfill,
    "oac": verify_oac,
    "gradcheck": verify_gradcheck,
}


def run_suite(name: str, seed: int = 0, trials: int | None = None) -> list[Check]:
    fn = SUITES[name]
    return fn(seed=seed) if trials is None else fn(seed=seed, trials=trials)
