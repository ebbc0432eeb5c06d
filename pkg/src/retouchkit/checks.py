"""Self-contained invariance and finite-difference suites for the policy
objective, runnable from the CLI (`grpo-check`) and reused by the test
suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import (
    CategoricalPolicy,
    GrpoConfig,
    GrpoGroup,
    categorical_kl,
    group_advantages,
    grpo_gradient,
    grpo_objective,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float

    def line(self) -> str:
        return "%s\t%s\tmax_err=%.3e\ttol=%.0e" % (
            "PASS" if self.passed else "FAIL",
            self.name,
            self.max_error,
            self.tolerance,
        )


def _random_policy(rng: np.random.Generator, n: int) -> CategoricalPolicy:
    p = rng.random(n) + 0.05
    return CategoricalPolicy(p / p.sum())


def _random_group(rng: np.random.Generator, n_actions: int, size: int) -> GrpoGroup:
    while True:
        rewards = rng.random(size)
        if rewards.std() > 1e-3:
            break
    actions = rng.integers(0, n_actions, size=size)
    return GrpoGroup(actions, rewards)


def check_advantage_normalization(trials: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        adv = np.asarray(group_advantages(rng.random(rng.integers(2, 16))))
        worst = max(worst, abs(adv.mean()), abs(adv.std() - 1.0))
    return CheckResult("advantage mean-0 / std-1", worst <= 1e-10, worst, 1e-10)


def check_identity_objective(trials: int = 200, seed: int = 1) -> CheckResult:
    # theta = old = ref forces every ratio to 1 and KL to 0, so the
    # objective equals mean(advantages) = 0
    rng = np.random.default_rng(seed)
    cfg = GrpoConfig(epsilon_clip=0.2, beta=0.5)
    worst = 0.0
    for _ in range(trials):
        pi = _random_policy(rng, int(rng.integers(2, 8)))
        group = _random_group(rng, len(pi), int(rng.integers(2, 10)))
        worst = max(worst, abs(grpo_objective(pi, pi, pi, group, cfg)))
    return CheckResult("objective = 0 at theta=old=ref", worst <= 1e-12, worst, 1e-12)


def check_reward_shift_invariance(trials: int = 200, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = GrpoConfig()
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 8))
        theta = _random_policy(rng, n)
        ref = _random_policy(rng, n)
        old = _random_policy(rng, n)
        group = _random_group(rng, n, int(rng.integers(2, 10)))
        shifted = GrpoGroup(group.actions, [r + 17.5 for r in group.rewards])
        worst = max(
            worst,
            abs(
                grpo_objective(theta, ref, old, group, cfg)
                - grpo_objective(theta, ref, old, shifted, cfg)
            ),
        )
    # analytically zero; the tolerance only absorbs IEEE-754 rounding of
    # the shifted rewards
    return CheckResult("reward-shift invariance", worst <= 1e-11, worst, 1e-11)


def check_kl_nonnegative(trials: int = 1000, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    min_kl = float("inf")
    max_self = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 12))
        p = _random_policy(rng, n)
        q = _random_policy(rng, n)
        min_kl = min(min_kl, categorical_kl(p, q))
        max_self = max(max_self, abs(categorical_kl(p, p)))
    err = max(max(0.0, -min_kl), max_self)
    return CheckResult("KL >= 0 and KL(p||p) = 0", err <= 1e-12, err, 1e-12)


def finite_difference_gradient(
    logits: np.ndarray,
    ref: CategoricalPolicy,
    old: CategoricalPolicy,
    group: GrpoGroup,
    cfg: GrpoConfig,
    h: float = 1e-5,
) -> np.ndarray:
    """Central finite differences of the objective w.r.t. logits, with
    advantages frozen to the group's values."""
    adv = group_advantages(group.rewards)

    def objective(z: np.ndarray) -> float:
        theta = CategoricalPolicy.from_logits(z)
        ratios = np.asarray([theta.probs[a] / old.probs[a] for a in group.actions])
        clipped = np.clip(ratios, 1 - cfg.epsilon_clip, 1 + cfg.epsilon_clip)
        surr = np.minimum(ratios * np.asarray(adv), clipped * np.asarray(adv))
        return float(surr.mean() - cfg.beta * categorical_kl(theta, ref))

    grad = np.zeros_like(logits, dtype=np.float64)
    for i in range(len(logits)):
        zp = logits.copy()
        zm = logits.copy()
        zp[i] += h
        zm[i] -= h
        grad[i] = (objective(zp) - objective(zm)) / (2 * h)
    return grad


def _away_from_clip_boundary(
    logits: np.ndarray, old: CategoricalPolicy, group: GrpoGroup, cfg: GrpoConfig, margin: float
) -> bool:
    theta = CategoricalPolicy.from_logits(logits)
    for a in group.actions:
        r = theta.probs[a] / old.probs[a]
        if abs(r - (1 - cfg.epsilon_clip)) < margin or abs(r - (1 + cfg.epsilon_clip)) < margin:
            return False
    return True


def check_gradient_fd(trials: int = 100, seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < trials:
        n = int(rng.integers(2, 6))
        logits = rng.normal(size=n)
        ref = _random_policy(rng, n)
        old = _random_policy(rng, n)
        cfg = GrpoConfig(epsilon_clip=0.2, beta=float(rng.random()))
        group = _random_group(rng, n, int(rng.integers(2, 8)))
        # skip subgradient points: finite differences straddle the kink
        if not _away_from_clip_boundary(logits, old, group, cfg, margin=1e-3):
            continue
        analytic = np.asarray(grpo_gradient(logits, ref, old, group, cfg))
        fd = finite_difference_gradient(logits, ref, old, group, cfg)
        scale = max(np.abs(fd).max(), 1e-8)
        worst = max(worst, float(np.abs(analytic - fd).max() / scale))
        done += 1
    return CheckResult("gradient vs finite differences", worst <= 1e-4, worst, 1e-4)


def run_all_checks() -> list[CheckResult]:
    return [
        check_advantage_normalization(),
        check_identity_objective(),
        check_reward_shift_invariance(),
        check_kl_nonnegative(),
        check_gradient_fd(),
    ]
