"""Hypergradients of a validation loss with respect to augmentation parameters.

Two routes are provided:

* :func:`hypergradient` -- implicit differentiation at an (assumed) inner
  optimum, with the inverse Hessian replaced by a truncated Neumann series
  built from Hessian-vector products.  Auxiliary memory is a few M-vectors.
* :func:`unrolled_hypergradient` -- backpropagation through T explicit SGD
  steps, which has to keep every intermediate parameter state alive.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import CurvatureGraph, ModelParams, NodeMonitor, Tape, Tensor, flat_grad, grad

__all__ = [
    "HypergradConfig",
    "HypergradResult",
    "ConfigError",
    "NeumannDivergenceError",
    "UnrollBudgetError",
    "neumann_inverse_hvp",
    "hypergradient",
    "unrolled_hypergradient",
]

METHODS = ("neumann_implicit", "unrolled")


class ConfigError(ValueError):
    """Invalid configuration value; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class NeumannDivergenceError(FloatingPointError):
    """The Neumann iterates blew up; ``term`` is the index where it was caught."""

    def __init__(self, term: int, norm: float):
        super().__init__(f"Neumann series diverged at term {term} (iterate norm {norm:.3e})")
        self.term = term
        self.norm = norm


class UnrollBudgetError(MemoryError):
    """Unrolling would cache more parameter states than the configured cap."""


@dataclass(frozen=True)
class HypergradConfig:
    alpha: float = 1e-3
    neumann_terms: int = 5
    method: str = "neumann_implicit"
    divergence_factor: float = 1e6
    unroll_cache_cap: int | None = None

    def __post_init__(self):
        if not (isinstance(self.alpha, (int, float)) and np.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigError("alpha", f"must be a positive finite number, got {self.alpha!r}")
        if isinstance(self.neumann_terms, bool) or not isinstance(self.neumann_terms, (int, np.integer)) or self.neumann_terms < 1:
            raise ConfigError("neumann_terms", f"must be an integer >= 1, got {self.neumann_terms!r}")
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {METHODS}, got {self.method!r}")
        if not self.divergence_factor > 0:
            raise ConfigError("divergence_factor", "must be positive")
        if self.unroll_cache_cap is not None and self.unroll_cache_cap <= 0:
            raise ConfigError("unroll_cache_cap", "must be positive when set")


@dataclass
class HypergradResult:
    grad_phi: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.grad_phi))


def _neumann(graph: CurvatureGraph, v: np.ndarray, cfg: HypergradConfig):
    """alpha * sum_{j=0..J} (I - alpha H)^j v, holding two M-vectors plus one HVP."""
    v = np.asarray(v, dtype=graph.grad_theta[0].dtype if graph.grad_theta else None)
    if not np.all(np.isfinite(v)):
        raise ValueError("neumann_inverse_hvp: input vector is not finite")
    limit = cfg.divergence_factor * max(float(np.linalg.norm(v)), np.finfo(float).tiny)
    alpha = cfg.alpha
    p = v.copy()
    acc = v.copy()
    term_norms = [alpha * float(np.linalg.norm(acc))]
    for j in range(1, cfg.neumann_terms + 1):
        hp = graph.hvp(p)
        p -= alpha * hp
        del hp
        norm = float(np.linalg.norm(p))
        if not np.isfinite(norm) or norm > limit:
            raise NeumannDivergenceError(j, norm)
        acc += p
        term_norms.append(alpha * float(np.linalg.norm(acc)))
    acc *= alpha
    diag = {
        "term_norms": term_norms,
        # p, acc and one transient hvp result
        "aux_peak_floats": 3 * v.size,
    }
    return acc, diag


def neumann_inverse_hvp(
    f_builder: Callable,
    params: ModelParams,
    hyper,
    v,
    cfg: HypergradConfig | None = None,
) -> np.ndarray:
    """Approximate ``(d2f/dtheta2)^{-1} v`` with a regularised Neumann series.

    ``f_builder`` is called as ``f_builder(theta)`` when ``hyper`` is None,
    otherwise as ``f_builder(theta, hyper)``.
    """
    cfg = cfg or HypergradConfig()
    graph = CurvatureGraph(f_builder, params, hyper)
    out, _ = _neumann(graph, np.asarray(v), cfg)
    return out


def _grad_of(g_builder: Callable, params: ModelParams) -> tuple[np.ndarray, float]:
    tape = Tape()
    view, theta = params.as_variables(tape)
    g = g_builder(view)
    value = float(np.asarray(g.data if isinstance(g, Tensor) else g))
    if not isinstance(g, Tensor) or g.tape is None:
        return np.zeros(params.total_dim), value
    return flat_grad(grad(g, theta)), value


def hypergradient(
    f_builder: Callable,
    g_builder: Callable,
    params: ModelParams,
    hyper,
    cfg: HypergradConfig | None = None,
) -> HypergradResult:
    """dg/dphi through the best-response map, by implicit differentiation.

    ``f_builder(theta, phi)`` is the inner (training) objective and
    ``g_builder(theta)`` the outer (validation) objective, which must not
    depend on ``phi`` directly.
    """
    cfg = cfg or HypergradConfig()
    with NodeMonitor() as mon:
        dg, g_value = _grad_of(g_builder, params)
        graph = CurvatureGraph(f_builder, params, hyper)
        u, diag = _neumann(graph, dg, cfg)
        grad_phi = -graph.mixed(u)
        grad_f = graph.gradient()
        f_value = graph.value
        del graph
    diag.update(
        method="neumann_implicit",
        f_value=f_value,
        g_value=g_value,
        grad_norm_g_theta=float(np.linalg.norm(dg)),
        # the implicit-function premise is grad_theta f == 0; logged, not enforced
        grad_norm_f_theta=float(np.linalg.norm(grad_f)),
        peak_tape_nodes=mon.peak,
        cache_floats=0,
    )
    if not np.all(np.isfinite(grad_phi)):
        raise NeumannDivergenceError(cfg.neumann_terms, float("nan"))
    return HypergradResult(np.asarray(grad_phi), diag)


def unrolled_hypergradient(
    f_builder: Callable | Sequence[Callable],
    g_builder: Callable,
    params_init: ModelParams,
    hyper,
    steps: int,
    lr: float,
    cache_cap: int | None = None,
) -> HypergradResult:
    """dg(theta_T)/dphi by differentiating through ``steps`` plain SGD updates.

    ``f_builder`` may be one callable used at every step or a sequence with
    one callable per step (e.g. one per minibatch).  All intermediate
    parameter states stay on the tape, so memory grows as ``steps * M``.
    The final parameters are returned in ``diagnostics["theta_final"]``.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    builders = list(f_builder) if isinstance(f_builder, (list, tuple)) else [f_builder] * steps
    if len(builders) != steps:
        raise ValueError(f"got {len(builders)} objective builders for {steps} steps")
    m = params_init.total_dim
    cache_floats = steps * m
    if cache_cap is not None and cache_floats > cache_cap:
        raise UnrollBudgetError(
            f"unrolling {steps} steps caches {cache_floats} floats, above the cap of {cache_cap}"
        )
    with NodeMonitor() as mon:
        tape = Tape()
        _, theta = params_init.as_variables(tape)
        phi_view, phi = hyper.as_variables(tape)
        current = theta
        f_values = []
        for build in builders:
            f = build(params_init.replace(current), phi_view)
            f_values.append(float(np.asarray(f.data)))
            if f.tape is None:
                continue
            grads = grad(f, current, retain=True, create_graph=True)
            current = [c - g * lr for c, g in zip(current, grads)]
        g = g_builder(params_init.replace(current))
        theta_final = params_init.replace([np.array(c.data) for c in current])
        n_phi = int(sum(p.size for p in phi))
        if isinstance(g, Tensor) and g.tape is not None:
            grad_phi = flat_grad(grad(g, phi, retain=False))
        else:
            grad_phi = np.zeros(n_phi)
        g_value = float(np.asarray(g.data if isinstance(g, Tensor) else g))
        del tape, current, theta, phi, phi_view
    diag = {
        "method": "unrolled",
        "cache_floats": cache_floats,
        "aux_peak_floats": cache_floats,
        "peak_tape_nodes": mon.peak,
        "f_values": f_values,
        "g_value": g_value,
        "theta_final": theta_final,
    }
    return HypergradResult(grad_phi, diag)
