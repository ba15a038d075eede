"""Self-check suites behind ``amss verify``.

Each check compares library output with an independent oracle:
finite differences for gradients, exact enumeration for sampling
and inclusion probabilities, and closed-form identities for ratios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np
from scipy import stats

from .masking import (
    accumulate_fisher,
    inclusion_probabilities,
    sample_without_replacement,
    subset_probabilities,
)
from .model import FUSIONS, LabeledBatch, ModelSpec, build_model
from .significance import update_ratios_from
from .tensor import finite_diff_gradient, max_relative_error


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def random_problem(seed: int, fusion: str = "concat", batch: int = 6):
    """A small model plus a random labelled batch."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec((3, 4), ((5,), (4, 3)), 3, fusion)
    model = build_model(spec, rng)
    # Biases start at zero; perturb them so their gradients are exercised.
    for name in model.params:
        if name.endswith(".bias") or name == "fusion.logits":
            model.params[name] = 0.3 * rng.standard_normal(model.params[name].shape)
    xs = [rng.standard_normal((batch, d)) for d in spec.input_dims]
    y = np.eye(3)[rng.integers(0, 3, batch)]
    return model, LabeledBatch(xs, y)


def gradient_check(seeds=range(10), eps: float = 1e-5, tol: float = 1e-5) -> CheckResult:
    worst = 0.0
    for seed in seeds:
        fusion = FUSIONS[seed % len(FUSIONS)]
        model, batch = random_problem(seed, fusion)
        _, cache = model.forward(batch)
        analytic = model.backward(cache)
        numeric = finite_diff_gradient(lambda _p: model.loss(batch), model.params, eps)
        worst = max(worst, max_relative_error(analytic, numeric))
    return CheckResult("gradients", worst <= tol,
                       f"max relative error {worst:.2e} (tol {tol:.0e}) over {len(seeds)} seeds")


def fisher_layer(seed: int = 0, units: int = 5):
    """Importance vector and gradient of a ``units``-wide encoder layer."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec((4, 3), ((units,), (units,)), 3, "concat")
    model = build_model(spec, rng)
    xs = [rng.standard_normal((16, d)) for d in spec.input_dims]
    batch = LabeledBatch(xs, np.eye(3)[rng.integers(0, 3, 16)])
    imp = accumulate_fisher(model, batch, 0)["enc0.0"]
    _, cache = model.forward(batch)
    grads = model.backward(cache)
    g = np.concatenate([grads["enc0.0.weight"], grads["enc0.0.bias"][:, None]], axis=1)
    return imp.p, g


def _mask_draws(p, n: int, draws: int, rng) -> np.ndarray:
    """Selection indicator matrix, one row per draw."""
    hits = np.zeros((draws, p.size))
    for t in range(draws):
        hits[t, sample_without_replacement(p, n, rng)] = 1.0
    return hits


def unbiasedness_check(draws: int = 200_000, seed: int = 0, n: int = 2) -> CheckResult:
    p, g = fisher_layer(seed)
    pi = inclusion_probabilities(p, n)
    hits = _mask_draws(p, n, draws, np.random.default_rng(seed + 1))
    m = hits / pi  # 1/pi on selected units
    mean_m = m.mean(axis=0)
    se_m = m.std(axis=0, ddof=1) / math.sqrt(draws)
    est = g * mean_m[:, None]
    se = np.abs(g) * se_m[:, None]
    z = np.where(se > 0, np.abs(est - g) / np.where(se > 0, se, 1), 0.0)
    return CheckResult("unbiased masks", bool(z.max() <= 4.0),
                       f"max |mean - g| = {z.max():.2f} standard errors over {draws} draws")


def bias_check(draws: int = 200_000, seed: int = 0, n: int = 2) -> CheckResult:
    p, g = fisher_layer(seed)
    pi = inclusion_probabilities(p, n)
    freq = _mask_draws(p, n, draws, np.random.default_rng(seed + 2)).mean(axis=0)
    target = g * pi[:, None]
    est = g * freq[:, None]
    rel = float(np.linalg.norm(est - target) / np.linalg.norm(target))
    nz = np.abs(target) > 0
    worst = float(np.max(np.abs(est[nz] - target[nz]) / np.abs(target[nz])))
    return CheckResult("0/1 mask bias", rel <= 0.01,
                       f"relative deviation from g*pi {rel:.4f} (tol 0.01), "
                       f"worst coordinate {worst:.4f}")


def sampling_check(draws: int = 200_000, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    p = np.array([0.5, 0.3, 0.2])
    oracle = subset_probabilities(p, 2)
    counts: Dict[frozenset, int] = {s: 0 for s in oracle}
    for _ in range(draws):
        counts[frozenset(sample_without_replacement(p, 2, rng).tolist())] += 1
    zs = []
    for s, q in oracle.items():
        sigma = math.sqrt(q * (1 - q) / draws)
        zs.append(abs(counts[s] / draws - q) / sigma)
    weighted = CheckResult("weighted subsets", max(zs) <= 3.0,
                           f"max deviation {max(zs):.2f} sigma over {draws} draws")

    L, n = 5, 2
    uni = np.full(L, 1.0 / L)
    ucount: Dict[frozenset, int] = {}
    for _ in range(draws):
        key = frozenset(sample_without_replacement(uni, n, rng).tolist())
        ucount[key] = ucount.get(key, 0) + 1
    observed = [ucount.get(s, 0) for s in subset_probabilities(uni, n)]
    pval = float(stats.chisquare(observed).pvalue)
    uniform = CheckResult("uniform subsets", pval > 0.01, f"chi-square p = {pval:.3f}")
    return [weighted, uniform]


def ratio_check(seed: int = 0, trials: int = 200) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        K = int(rng.integers(2, 5))
        u = rng.uniform(0, 2, K)
        tau = float(rng.uniform(0.05, 5))
        worst = max(worst, abs(update_ratios_from(u, tau).sum() - (K - 1)))
    total = CheckResult("ratio sum", worst <= 1e-12, f"max |sum - (K-1)| = {worst:.1e}")
    taus = [0.1, 0.25, 0.5, 1, 2, 4]
    u = np.array([0.7, 0.3])
    gaps = [float(np.ptp(update_ratios_from(u, t))) for t in taus]
    monotone = all(a > b for a, b in zip(gaps, gaps[1:]))
    trend = CheckResult("disparity vs tau", monotone,
                        "gaps " + ", ".join(f"{g:.4f}" for g in gaps))
    return [total, trend]


SUITES: Dict[str, Callable[..., object]] = {
    "gradients": gradient_check,
    "unbiasedness": unbiasedness_check,
    "bias": bias_check,
    "sampling": sampling_check,
    "ratios": ratio_check,
}


def run_all(draws: int = 200_000) -> List[CheckResult]:
    results: List[CheckResult] = [gradient_check()]
    results.append(unbiasedness_check(draws))
    results.append(bias_check(draws))
    results += sampling_check(draws)
    results += ratio_check()
    return results


__all__ = ["CheckResult", "run_all", "SUITES"]
