"""Executable checks of the three analytic properties behind the
reference-weight design, run as vectorized grid sweeps.

1. With total neighbor degree N fixed, splitting the non-reference degree
   mass across distinct neighbors (high diversity) yields a strictly
   smaller normalized reference weight than concentrating it (low
   diversity), whenever N - w_r > 1.
2. W(n) = (A + n*alpha*x) / (A + n*x) is strictly decreasing in the
   neighbor count n for A, x > 0 and alpha in [0, 1).
3. f(alpha) = alpha / sqrt(alpha^2 + (1-alpha)^2 * C) is strictly
   increasing on [0, 1] for any C > 0, with f(0) = 0 and f(1) = 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TheoremSweepConfig:
    n_min: int = 3
    n_max: int = 50
    mixture_a_values: tuple = (0.1, 0.5, 1.0, 2.0, 5.0)
    mixture_x_values: tuple = (0.1, 0.5, 1.0, 2.0, 5.0)
    mixture_alpha_count: int = 20
    mixture_n_max: int = 20
    cosine_c_values: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    cosine_alpha_count: int = 1000


@dataclass
class TheoremReport:
    checked: dict = field(default_factory=dict)
    violations: dict = field(default_factory=dict)
    anchors: dict = field(default_factory=dict)

    @property
    def total_checked(self) -> int:
        return sum(self.checked.values())

    @property
    def passed(self) -> bool:
        return all(len(v) == 0 for v in self.violations.values())

    def summary_lines(self):
        lines = []
        for name in sorted(self.checked):
            status = "ok" if not self.violations[name] else f"{len(self.violations[name])} violations"
            lines.append(f"{name}: {self.checked[name]} tuples, {status}")
        return lines


def reference_weight_low_diversity(n: float, w_r: float) -> float:
    """Reference weight when all N - w_r non-reference degrees coincide."""
    return np.log(w_r + 1) / (np.log(w_r + 1) + np.log(n - w_r + 1))


def reference_weight_high_diversity(n: float, w_r: float) -> float:
    """Reference weight when all N - w_r non-reference degrees are unique."""
    return np.log(w_r + 1) / (np.log(w_r + 1) + (n - w_r) * np.log(2.0))


def mixture_contribution(n, alpha, a, x):
    """Normalized reference contribution for n equal-weight neighbors that
    each carry an alpha fraction of the reference embedding."""
    return (a + n * alpha * x) / (a + n * x)


def reference_cosine(alpha, c):
    """Cosine between a reference/other mixture and the reference axis."""
    return alpha / np.sqrt(alpha**2 + (1.0 - alpha) ** 2 * c)


def check_theorems(config: TheoremSweepConfig | None = None) -> TheoremReport:
    """Sweep all three properties on a grid; a correct implementation
    produces a report with zero violations."""
    cfg = config or TheoremSweepConfig()
    report = TheoremReport()

    # diversity vs reference weight
    pairs = [(n, w) for n in range(cfg.n_min, cfg.n_max + 1)
             for w in range(1, n - 1)]
    n_arr = np.array([p[0] for p in pairs], dtype=np.float64)
    w_arr = np.array([p[1] for p in pairs], dtype=np.float64)
    low = reference_weight_low_diversity(n_arr, w_arr)
    high = reference_weight_high_diversity(n_arr, w_arr)
    bad = ~(high < low)
    report.checked["diversity"] = len(pairs)
    report.violations["diversity"] = [pairs[i] for i in np.nonzero(bad)[0]]

    # neighborhood growth vs reference contribution
    alphas = np.linspace(0.0, 0.95, cfg.mixture_alpha_count)
    ns = np.arange(1, cfg.mixture_n_max + 1, dtype=np.float64)
    grid_checked = 0
    grid_violations = []
    for a in cfg.mixture_a_values:
        for x in cfg.mixture_x_values:
            w_now = mixture_contribution(ns[None, :], alphas[:, None], a, x)
            w_next = mixture_contribution(ns[None, :] + 1, alphas[:, None], a, x)
            bad = ~(w_next < w_now)
            grid_checked += bad.size
            for i, j in zip(*np.nonzero(bad)):
                grid_violations.append((a, x, float(alphas[i]), int(ns[j])))
    report.checked["growth"] = grid_checked
    report.violations["growth"] = grid_violations

    # reference portion vs cosine similarity
    alphas = np.linspace(0.0, 1.0, cfg.cosine_alpha_count)
    cos_checked = 0
    cos_violations = []
    for c in cfg.cosine_c_values:
        f = reference_cosine(alphas, c)
        bad = ~(np.diff(f) > 0)
        cos_checked += bad.size
        for i in np.nonzero(bad)[0]:
            cos_violations.append((c, float(alphas[i])))
    report.checked["cosine"] = cos_checked
    report.violations["cosine"] = cos_violations

    report.anchors["low_diversity_weight_n10_w2"] = float(
        reference_weight_low_diversity(10.0, 2.0))
    report.anchors["high_diversity_weight_n10_w2"] = float(
        reference_weight_high_diversity(10.0, 2.0))
    report.anchors["cosine_at_0"] = float(reference_cosine(np.array(0.0), 1.0))
    report.anchors["cosine_at_1"] = float(reference_cosine(np.array(1.0), 1.0))
    return report
