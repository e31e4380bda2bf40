"""Synthetic contextual bandit, the upper-bound softmax policy, and logging.

Arms are indexed from 0 internally. Every random draw comes from a named
substream of one master seed (see :class:`Streams`), so changing how one
consumer draws never shifts the numbers another consumer sees.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.special import expit, log_expit, logit

from .core import LoggedDataset, build_dataset
from .errors import AllZeroUpperBounds, DegenerateDesign, InsufficientArmData, ValidationError

# substream tags
CONTEXT, ARMS, REWARDS, BEHAVIOR = 0, 1, 2, 3
_MC_CHUNK = 50_000


@dataclass(frozen=True)
class Streams:
    """Deterministic tree of random generators below one master seed."""

    seed: int
    key: tuple[int, ...] = ()

    def child(self, *key: int) -> "Streams":
        return Streams(self.seed, self.key + tuple(int(k) for k in key))

    def generator(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key + tuple(int(k) for k in key))
        return np.random.Generator(np.random.PCG64(ss))


def as_streams(rng) -> Streams:
    if isinstance(rng, Streams):
        return rng
    if isinstance(rng, (int, np.integer)):
        return Streams(int(rng))
    raise ValidationError(f"expected an integer seed or Streams, got {type(rng).__name__}")


@dataclass(frozen=True)
class BanditEnvironment:
    K: int = 10
    d: int = 12
    beta0: float = 0.0
    beta1: float = 3.0

    def __post_init__(self):
        if self.K < 2:
            raise ValidationError(f"need at least 2 arms, got {self.K}")
        if self.d < 1:
            raise ValidationError(f"context dimension must be positive, got {self.d}")


@dataclass(frozen=True)
class ContextDraw:
    x_c: np.ndarray  # (..., d) on the simplex
    x_arms: np.ndarray  # (..., K, d)
    z: np.ndarray  # (..., K), z_a = x_c . x_a


def sample_contexts(env: BanditEnvironment, size: int, rng: np.random.Generator,
                    arm_rng: np.random.Generator | None = None) -> ContextDraw:
    """``size`` i.i.d. contexts; Dirichlet(1,...,1) via normalised exponentials."""
    arm_rng = rng if arm_rng is None else arm_rng
    e = rng.standard_exponential((size, env.d))
    x_c = e / e.sum(axis=1, keepdims=True)
    x_arms = arm_rng.standard_normal((size, env.K, env.d))
    z = np.einsum("nd,nkd->nk", x_c, x_arms)
    return ContextDraw(x_c, x_arms, z)


def sample_context(env: BanditEnvironment, rng: np.random.Generator) -> ContextDraw:
    draw = sample_contexts(env, 1, rng)
    return ContextDraw(draw.x_c[0], draw.x_arms[0], draw.z[0])


def true_arm_probs(env: BanditEnvironment, ctx: ContextDraw | np.ndarray) -> np.ndarray:
    z = ctx.z if isinstance(ctx, ContextDraw) else np.asarray(ctx, dtype=float)
    return expit(env.beta0 + env.beta1 * z)


@dataclass(frozen=True, eq=False)
class BanditLog:
    """Rounds logged under the uniform behaviour policy.

    Only the context summary ``z`` is kept: the policies here see the
    context through ``z`` alone.
    """

    z: np.ndarray  # (n, K)
    arm: np.ndarray  # (n,) in 0..K-1
    reward: np.ndarray  # (n,) in {0, 1}
    propensity: np.ndarray  # (n,) behaviour probability of the logged arm

    @property
    def n(self) -> int:
        return self.arm.shape[0]


def generate_log(env: BanditEnvironment, n: int, rng) -> BanditLog:
    """Log ``n`` rounds where the arm is drawn uniformly regardless of context."""
    if n < 1:
        raise ValidationError(f"need at least one round, got {n}")
    st = as_streams(rng)
    ctx = sample_contexts(env, n, st.generator(CONTEXT), st.generator(ARMS))
    arm = st.generator(BEHAVIOR).integers(0, env.K, size=n)
    p = true_arm_probs(env, ctx.z[np.arange(n), arm])
    reward = (st.generator(REWARDS).random(n) < p).astype(float)
    return BanditLog(ctx.z, arm, reward, np.full(n, 1.0 / env.K))


# ---------------------------------------------------------------------------
# per-arm logistic fits

RIDGE = 1e-6


@dataclass(frozen=True)
class LogisticFit:
    b0: float
    b1: float
    fisher: np.ndarray
    iterations: int
    converged: bool
    degenerate: bool


def fit_arm_logistic(z, r, max_iter: int = 100, tol: float = 1e-8, strict: bool = False) -> LogisticFit:
    """Ridge-stabilised Newton fit of ``P(r = 1) = expit(b0 + b1 z)``.

    The ridge of 1e-6 enters the objective, so separated data give finite
    coefficients. ``degenerate`` flags a constant covariate, where the slope
    is pinned by the ridge; ``strict=True`` turns that into an error.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    r = np.asarray(r, dtype=float).reshape(-1)
    if z.shape != r.shape or z.shape[0] < 2:
        raise ValidationError("need at least 2 (z, r) pairs of matching length")
    degenerate = bool(np.all(z == z[0]))
    if degenerate and strict:
        raise DegenerateDesign("covariate is constant; slope not identified")
    X = np.column_stack([np.ones_like(z), z])
    b = np.zeros(2)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(X @ b)
        grad = X.T @ (r - p) - RIDGE * b
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        H = (X * (p * (1 - p))[:, None]).T @ X + RIDGE * np.eye(2)
        b = b + np.linalg.solve(H, grad)
    p = expit(X @ b)
    fisher = (X * (p * (1 - p))[:, None]).T @ X
    return LogisticFit(float(b[0]), float(b[1]), fisher, it, converged, degenerate)


# ---------------------------------------------------------------------------
# policies


class Policy(Protocol):
    K: int

    def probs(self, z: np.ndarray) -> np.ndarray:
        """Action probabilities, shape (..., K), for context summaries ``z``."""


@dataclass(frozen=True, eq=False)
class LearnedPolicy:
    coef: np.ndarray  # (K, 2): (b0_a, b1_a)
    fisher: np.ndarray  # (K, 2, 2)
    m: float
    s: float
    kprime: int
    fits: tuple[LogisticFit, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.m < 0 or self.s < 0:
            raise ValidationError("m and s must be non-negative")
        if not 1 <= self.kprime <= self.K:
            raise ValidationError(f"K' must lie in 1..{self.K}, got {self.kprime}")

    @property
    def K(self) -> int:
        return self.coef.shape[0]

    def probs(self, z: np.ndarray) -> np.ndarray:
        return policy_probs(self, z)


def _log_upper_bound(policy: LearnedPolicy, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    eta = policy.coef[:, 0] + policy.coef[:, 1] * z
    if policy.m == 0.0:
        return log_expit(eta)
    cov = np.linalg.pinv(policy.fisher, hermitian=True)  # (K, 2, 2)
    var = cov[:, 0, 0] + 2.0 * cov[:, 0, 1] * z + cov[:, 1, 1] * z * z
    se = np.sqrt(np.maximum(var, 0.0))
    return log_expit(eta + policy.m * se)


def upper_bound(policy: LearnedPolicy, z_a: float, arm: int) -> float:
    """Optimistic success probability of ``arm`` at covariate ``z_a``."""
    z = np.zeros(policy.K)
    z[arm] = z_a
    return float(np.exp(_log_upper_bound(policy, z)[arm]))


def policy_probs(policy: LearnedPolicy, z: np.ndarray) -> np.ndarray:
    """Probabilities proportional to ``ub**s`` over the ``K'`` largest bounds.

    Ties at the ``K'`` cut go to the lower arm index. Computed in log space.
    """
    z = np.asarray(z, dtype=float)
    flat = z.reshape(-1, policy.K)
    logub = _log_upper_bound(policy, flat)
    order = np.argsort(-logub, axis=1, kind="stable")
    keep = np.zeros_like(logub, dtype=bool)
    np.put_along_axis(keep, order[:, : policy.kprime], True, axis=1)
    if policy.s == 0.0:
        score = np.where(keep, 0.0, -np.inf)
    else:
        score = np.where(keep, policy.s * logub, -np.inf)
    top = score.max(axis=1, keepdims=True)
    dead = ~np.isfinite(top[:, 0])
    if dead.any():
        warnings.warn(AllZeroUpperBounds(f"{int(dead.sum())} contexts with all surviving upper bounds zero"))
        score[dead] = np.where(keep[dead], 0.0, -np.inf)
        top[dead] = 0.0
    w = np.exp(score - top)
    out = w / w.sum(axis=1, keepdims=True)
    return out.reshape(z.shape)


def learn_policy(log: BanditLog, m: float, s: float, kprime: int, K: int | None = None) -> LearnedPolicy:
    """Fit one logistic model per arm on the rounds where that arm was played."""
    K = log.z.shape[1] if K is None else K
    fits = []
    for a in range(K):
        rows = log.arm == a
        count = int(rows.sum())
        if count < 2:
            raise InsufficientArmData(a, count)
        fits.append(fit_arm_logistic(log.z[rows, a], log.reward[rows]))
    coef = np.array([[f.b0, f.b1] for f in fits])
    fisher = np.array([f.fisher for f in fits])
    return LearnedPolicy(coef, fisher, float(m), float(s), int(kprime), tuple(fits))


@dataclass(frozen=True)
class OraclePolicy:
    """Always plays the arm with the highest success probability (lowest index on ties)."""

    env: BanditEnvironment

    @property
    def K(self) -> int:
        return self.env.K

    def probs(self, z: np.ndarray) -> np.ndarray:
        p = true_arm_probs(self.env, z)
        best = np.argmax(p, axis=-1)
        return np.eye(self.env.K)[best]


def oracle_policy(env: BanditEnvironment) -> OraclePolicy:
    return OraclePolicy(env)


@dataclass(frozen=True)
class UniformPolicy:
    K: int

    def probs(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        return np.full(z.shape, 1.0 / self.K)


# ---------------------------------------------------------------------------
# policy values and logged datasets


def mc_true_value(policy: Policy, env: BanditEnvironment, N: int, rng, workers: int = 1,
                  return_se: bool = False):
    """Monte Carlo value of ``policy``: mean over fresh contexts of sum_a pi(a|x) p_a(x).

    ``N`` is split into fixed chunks, each with its own substream; partial
    sums are combined in chunk order, so the result ignores ``workers``.
    """
    if N < 1:
        raise ValidationError(f"need at least one Monte Carlo point, got {N}")
    st = as_streams(rng)
    sizes = [min(_MC_CHUNK, N - lo) for lo in range(0, N, _MC_CHUNK)]

    def chunk(c):
        sub = st.child(c)
        ctx = sample_contexts(env, sizes[c], sub.generator(CONTEXT), sub.generator(ARMS))
        per = np.sum(policy.probs(ctx.z) * true_arm_probs(env, ctx.z), axis=1)
        return per.sum(), np.square(per).sum()

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(chunk, range(len(sizes))))
    else:
        parts = [chunk(c) for c in range(len(sizes))]
    s1 = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    mean = s1 / N
    if not return_se:
        return float(mean)
    var = max(s2 / N - mean * mean, 0.0)
    return float(mean), float(np.sqrt(var / N))


def build_logged_dataset(log: BanditLog, policies: Sequence[Policy], env: BanditEnvironment) -> LoggedDataset:
    """Importance weights pi_j(a_i|x_i) / p(a_i|x_i) for each target policy."""
    if not policies:
        raise ValidationError("need at least one target policy")
    idx = np.arange(log.n)
    cols = [pol.probs(log.z)[idx, log.arm] / log.propensity for pol in policies]
    bounds = [(0.0, float(env.K))] * len(policies)
    return build_dataset(np.column_stack(cols), log.reward, bounds)


# ---------------------------------------------------------------------------
# policy recipes


@dataclass(frozen=True)
class Recipe:
    train_size: int
    m: float
    s: float
    kprime: int


RECIPES = {
    "baseline": Recipe(256, 1.0, 2.0, 3),
    "new": Recipe(1024, 1.0, 1.0, 1),
}
# substream tags for training logs, one per recipe name
TRAIN_TAGS = {"baseline": 101, "new": 102}


def train_policy(env: BanditEnvironment, recipe: Recipe | str, seed: int, tag: int | None = None) -> LearnedPolicy:
    """Learn a policy from a fresh uniform log drawn under ``seed``."""
    if isinstance(recipe, str):
        tag = TRAIN_TAGS.get(recipe, 100) if tag is None else tag
        recipe = RECIPES[recipe]
    tag = 100 if tag is None else tag
    log = generate_log(env, recipe.train_size, Streams(seed).child(tag))
    return learn_policy(log, recipe.m, recipe.s, recipe.kprime, env.K)


def logit_of(p: float) -> float:
    return float(logit(p))
