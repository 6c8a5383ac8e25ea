"""Renyi-DP accounting and noise calibration for edge- and node-level privacy.

Edge level: the only mechanism touching the graph is NAP, queried once per
stage with sensitivity 1, so ``K`` Gaussian mechanisms compose to
``K * alpha / (2 sigma^2)`` and the real-alpha optimum has the closed form of
:func:`edge_epsilon_closed_form`.

Node level: ``K`` NAP mechanisms with sensitivity ``sqrt(D)`` compose with
``K + 1`` DP-SGD runs of ``T`` subsampled Gaussian steps each. The DP-SGD
bound needs integer orders, so node-level curves live on :data:`ALPHAS`.
Edge-level curves are pure Gaussian compositions, valid at every real order,
and use the finer :data:`EDGE_ALPHAS` so the grid minimum tracks the
real-alpha optimum even when that optimum sits between two integers.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import gammaln, logsumexp

ALPHAS = np.arange(2, 129)
EDGE_ALPHAS = np.round(np.arange(1.01, 128.0 + 1e-9, 0.01), 2)
LEVELS = ("edge", "node", "none")


class CalibrationError(RuntimeError):
    """The target epsilon cannot be reached; ``achievable`` is the best bound found."""

    def __init__(self, message: str, achievable: float):
        super().__init__(message)
        self.achievable = achievable


def default_delta(num_units: int) -> float:
    """``1 / (10 * number of private units)``: edges or nodes, depending on level."""
    return 1.0 / (10.0 * max(int(num_units), 1))


@dataclass(frozen=True)
class PrivacySpec:
    """Parameters of one private training run.

    ``sigma_ap`` is the aggregation noise (the NAP ``sigma``); ``sigma_gp``
    the gradient noise std. Either give both noise scales or a target
    ``epsilon`` and fill them in with :func:`calibrate`. ``num_nodes`` is the
    size of the population DP-SGD samples from, so ``q = batch_size / num_nodes``.
    """

    level: str = "edge"
    delta: float = 1e-5
    depth: int = 1
    max_degree: int = 1
    clip: float = 1.0
    batch_size: Optional[int] = None
    iterations: int = 0
    num_nodes: Optional[int] = None
    sigma_ap: Optional[float] = None
    sigma_gp: Optional[float] = None
    epsilon: Optional[float] = None

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}, got {self.level!r}")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")
        if self.level == "none":
            return
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.level == "node":
            if self.max_degree < 1:
                raise ValueError("node level needs max_degree >= 1")
            if not self.clip > 0:
                raise ValueError("node level needs clip > 0")
            if self.iterations < 0:
                raise ValueError("iterations must be non-negative")
            if self.batch_size is not None and self.num_nodes is not None:
                if not 0 < self.batch_size < self.num_nodes:
                    raise ValueError("node level needs 0 < batch_size < num_nodes")
        for name in ("sigma_ap", "sigma_gp"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("target epsilon must be positive")

    @property
    def sample_rate(self) -> float:
        if self.batch_size is None or self.num_nodes is None:
            raise ValueError("batch_size and num_nodes are needed for the sampling rate")
        return self.batch_size / self.num_nodes


@dataclass(frozen=True)
class RdpCurve:
    alphas: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if alphas.shape != values.shape or alphas.ndim != 1:
            raise ValueError("alphas and values must be 1-d and aligned")
        if alphas.size > 1 and np.any(np.diff(alphas) <= 0):
            raise ValueError("alpha grid must be strictly increasing")
        if np.any(alphas <= 1):
            raise ValueError("RDP orders must exceed 1")
        if np.any(values < 0):
            raise ValueError("RDP values must be non-negative")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "values", values)

    def __add__(self, other: RdpCurve) -> RdpCurve:
        if not np.array_equal(self.alphas, other.alphas):
            raise ValueError("curves live on different alpha grids")
        return RdpCurve(self.alphas, self.values + other.values)


@dataclass
class AccountingReport:
    epsilon: float
    delta: float
    alpha_star: Optional[float]
    terms: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    method: str = "rdp_grid"

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v

        return clean(asdict(self))

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _check_alpha_int(alpha) -> int:
    if isinstance(alpha, (bool, np.bool_)) or float(alpha) != int(alpha) or alpha < 2:
        raise ValueError(f"alpha must be an integer >= 2, got {alpha}")
    return int(alpha)


def rdp_gaussian(alpha, sensitivity: float = 1.0, sigma: float = 1.0):
    """RDP of the Gaussian mechanism: ``alpha * sensitivity^2 / (2 sigma^2)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    a = np.asarray(alpha, dtype=np.float64)
    if sigma == 0:
        out = np.full_like(a, math.inf if sensitivity else 0.0)
    else:
        out = a * sensitivity**2 / (2.0 * sigma**2)
    return float(out) if out.ndim == 0 else out


def rdp_nap_total(alpha, sigma: float, depth: int, level: str = "edge", max_degree: int = 1):
    """RDP of ``depth`` composed NAP queries (sensitivity 1 or ``sqrt(D)``)."""
    if depth < 0:
        raise ValueError("depth must be non-negative")
    if depth == 0:
        zero = np.zeros_like(np.asarray(alpha, dtype=np.float64))
        return float(zero) if zero.ndim == 0 else zero
    if level == "edge":
        sens2 = 1.0
    elif level == "node":
        sens2 = float(max_degree)
    else:
        raise ValueError(f"NAP accounting needs level 'edge' or 'node', got {level!r}")
    return depth * rdp_gaussian(alpha, math.sqrt(sens2), sigma)


def _log_comb(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def _subsampled_curve(alphas: np.ndarray, q: float, clip: float, sigma: float) -> np.ndarray:
    """Per-step subsampled Gaussian RDP bound for each integer order in ``alphas``."""
    alphas = np.asarray(alphas, dtype=np.float64)
    if q == 0:
        return np.zeros_like(alphas)
    if sigma == 0:
        return np.full_like(alphas, math.inf)
    c2 = (clip / sigma) ** 2
    log_q = math.log(q)
    log_1mq = math.log1p(-q) if q < 1 else -math.inf

    def pow_1mq(n):
        # n * log(1 - q) with 0 * log(0) = 0
        n = np.asarray(n, dtype=np.float64)
        out = np.zeros(np.broadcast(n, log_1mq).shape)
        np.multiply(n, log_1mq, out=out, where=n > 0)
        return out

    a = alphas[:, None]
    l = np.arange(2, int(alphas.max()) + 1, dtype=np.float64)[None, :]
    terms = _log_comb(a, l) + l * log_q + pow_1mq(a - l) + (l - 1) * l * c2 / 2.0
    terms = np.where(l <= a, terms, -np.inf)
    # l = 0 and l = 1 combine into (1-q)^(a-1) * (a q - q + 1)
    head = pow_1mq(alphas - 1) + np.log1p((alphas - 1) * q)
    total = logsumexp(np.concatenate([head[:, None], terms], axis=1), axis=1)
    return np.maximum(total / (alphas - 1), 0.0)


def rdp_subsampled_gaussian(alpha, q: float, clip: float, sigma: float) -> float:
    """Per-iteration RDP of the Poisson-subsampled Gaussian mechanism.

    Evaluates, in log space,

        1/(a-1) * log{ (1-q)^(a-1) (a q - q + 1)
                       + C(a,2) q^2 (1-q)^(a-2) e^(C^2/s^2)
                       + sum_{l=3..a} C(a,l) (1-q)^(a-l) q^l e^((l-1) l C^2 / (2 s^2)) }

    for integer order ``a``, sampling rate ``q``, clip ``C`` and noise std ``s``.
    """
    alpha = _check_alpha_int(alpha)
    if not 0 <= q <= 1:
        raise ValueError(f"sampling rate must lie in [0, 1], got {q}")
    if sigma < 0 or clip < 0:
        raise ValueError("clip and sigma must be non-negative")
    return float(_subsampled_curve(np.array([alpha]), q, clip, sigma)[0])


def _node_terms(alphas: np.ndarray, spec: PrivacySpec) -> tuple[np.ndarray, np.ndarray]:
    steps = (spec.depth + 1) * spec.iterations
    if steps:
        dpsgd = steps * _subsampled_curve(alphas, spec.sample_rate, spec.clip, spec.sigma_gp)
    else:
        dpsgd = np.zeros_like(alphas, dtype=np.float64)
    napc = np.asarray(
        rdp_nap_total(alphas, spec.sigma_ap if spec.depth else 1.0, spec.depth, "node", spec.max_degree),
        dtype=np.float64,
    )
    return dpsgd, napc


def total_rdp_node(alpha, spec: PrivacySpec) -> float:
    """``(K+1) T`` DP-SGD steps plus ``K`` node-level NAP queries, at order ``alpha``."""
    alpha = _check_alpha_int(alpha)
    _require_noise(spec)
    dpsgd, napc = _node_terms(np.array([alpha], dtype=np.float64), spec)
    return float(dpsgd[0] + napc[0])


def _require_noise(spec: PrivacySpec) -> None:
    if spec.depth and spec.sigma_ap is None:
        raise ValueError("sigma_ap is required; calibrate the spec first")
    if spec.level == "node" and spec.iterations and spec.sigma_gp is None:
        raise ValueError("sigma_gp is required; calibrate the spec first")


def rdp_curve(spec: PrivacySpec, alphas=None) -> RdpCurve:
    _require_noise(spec)
    if alphas is None:
        alphas = EDGE_ALPHAS if spec.level == "edge" else ALPHAS
    alphas = np.asarray(alphas, dtype=np.float64)
    if spec.level == "edge":
        sigma = spec.sigma_ap if spec.depth else 1.0
        return RdpCurve(alphas, np.asarray(rdp_nap_total(alphas, sigma, spec.depth, "edge")))
    if spec.level == "node":
        dpsgd, napc = _node_terms(alphas, spec)
        return RdpCurve(alphas, dpsgd + napc)
    raise ValueError("non-private runs have no RDP curve")


def rdp_to_dp(curve: RdpCurve, delta: float) -> AccountingReport:
    """Convert an RDP curve to (epsilon, delta)-DP, minimizing over the grid.

    A curve that is zero everywhere means no mechanism touched private data,
    which is 0-DP; it reports ``epsilon = 0`` instead of the conversion slack.
    """
    if curve.alphas.size == 0:
        raise ValueError("cannot convert an empty RDP curve")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not np.any(curve.values):
        return AccountingReport(0.0, delta, None)
    eps = curve.values + math.log(1.0 / delta) / (curve.alphas - 1.0)
    i = int(np.argmin(eps))
    return AccountingReport(float(eps[i]), delta, float(curve.alphas[i]))


def edge_epsilon_closed_form(depth: int, sigma: float, delta: float) -> float:
    """``K / (2 sigma^2) + sqrt(2 K log(1/delta)) / sigma``."""
    if depth == 0:
        return 0.0
    if sigma <= 0:
        return math.inf
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return depth / (2.0 * sigma**2) + math.sqrt(2.0 * depth * math.log(1.0 / delta)) / sigma


def _spec_params(spec: PrivacySpec) -> dict:
    params = asdict(spec)
    params.pop("epsilon")
    if spec.level == "edge":
        for k in ("max_degree", "clip", "batch_size", "iterations", "num_nodes", "sigma_gp"):
            params.pop(k)
    return params


def account(spec: PrivacySpec, method: str = "auto") -> AccountingReport:
    """Privacy guarantee of a spec with explicit noise scales.

    Edge level reports the closed form (``method="auto"``) or the minimum
    over :data:`EDGE_ALPHAS` (``method="grid"``). Node level always uses the
    integer grid.
    Non-private runs report ``epsilon = inf``.
    """
    if spec.level == "none":
        return AccountingReport(math.inf, spec.delta, None, {}, _spec_params(spec), "none")
    _require_noise(spec)
    if spec.level == "edge" and method in ("auto", "closed_form"):
        eps = edge_epsilon_closed_form(spec.depth, spec.sigma_ap or 0.0, spec.delta)
        alpha_star = None
        terms = {"nap": 0.0}
        if spec.depth and spec.sigma_ap:
            log_inv = math.log(1.0 / spec.delta)
            alpha_star = 1.0 + spec.sigma_ap * math.sqrt(2.0 * log_inv / spec.depth)
            terms["nap"] = float(rdp_nap_total(alpha_star, spec.sigma_ap, spec.depth, "edge"))
        elif spec.depth:
            terms["nap"] = math.inf
        return AccountingReport(eps, spec.delta, alpha_star, terms, _spec_params(spec), "closed_form")

    report = rdp_to_dp(rdp_curve(spec), spec.delta)
    a = report.alpha_star if report.alpha_star is not None else float(ALPHAS[0])
    if spec.level == "edge":
        sigma = spec.sigma_ap if spec.depth else 1.0
        report.terms = {"nap": float(rdp_nap_total(a, sigma, spec.depth, "edge"))}
    else:
        dpsgd, napc = _node_terms(np.array([a]), spec)
        report.terms = {"dpsgd": float(dpsgd[0]), "nap": float(napc[0])}
    report.params = _spec_params(spec)
    return report


def _bisect_decreasing(eps_of, target: float, accept, lo: float, hi: float, max_iter: int = 200):
    """Bisection on a decreasing ``eps_of`` keeping ``eps_of(hi) <= target``."""
    for _ in range(max_iter):
        if accept(eps_of(hi)):
            return hi
        mid = math.sqrt(lo * hi) if hi / lo > 4 else 0.5 * (lo + hi)
        if eps_of(mid) <= target:
            hi = mid
        else:
            lo = mid
    return hi


def _bracket(eps_of, target: float, ceiling: float):
    hi = 1.0
    while eps_of(hi) > target:
        if hi >= ceiling:
            return None
        hi *= 2.0
    lo = hi / 2.0
    while eps_of(lo) <= target:
        hi, lo = lo, lo / 2.0
        if lo < 1e-12:
            break
    return lo, hi


def calibrate(spec: PrivacySpec, max_noise: float = 1e6) -> PrivacySpec:
    """Fill in noise scales so that the spec meets ``spec.epsilon``.

    Edge level solves for the NAP ``sigma`` against the closed form to a
    relative tolerance of 1e-6 (never exceeding the target). Node level
    searches one multiplier ``lam`` with ``sigma_gp = lam * C`` and
    ``sigma_ap = lam * sqrt(D)`` until ``eps <= target <= eps * (1 + 1e-4)``.
    An infinite or missing target yields zero noise.
    """
    target = spec.epsilon
    if spec.level == "none" or target is None or math.isinf(target):
        return replace(spec, sigma_ap=0.0, sigma_gp=0.0 if spec.level == "node" else None)

    if spec.level == "edge":
        if spec.depth == 0:
            return replace(spec, sigma_ap=0.0)

        def eps_of(sigma):
            return edge_epsilon_closed_form(spec.depth, sigma, spec.delta)

        def accept(e):
            return e <= target and target - e < 1e-6 * target

        lo, hi = _bracket(eps_of, target, math.inf)
        return replace(spec, sigma_ap=_bisect_decreasing(eps_of, target, accept, lo, hi))

    if spec.depth == 0 and spec.iterations == 0:
        return replace(spec, sigma_ap=0.0, sigma_gp=0.0)
    root_d = math.sqrt(spec.max_degree)

    def with_lam(lam):
        return replace(spec, sigma_gp=lam * spec.clip, sigma_ap=lam * root_d)

    def eps_of(lam):
        return account(with_lam(lam)).epsilon

    def accept(e):
        return e <= target <= e * (1.0 + 1e-4)

    bracket = _bracket(eps_of, target, max_noise)
    if bracket is None:
        best = eps_of(max_noise)
        raise CalibrationError(
            f"target epsilon {target:g} is unreachable; the best achievable bound is {best:.6g}",
            best,
        )
    return with_lam(_bisect_decreasing(eps_of, target, accept, *bracket))
