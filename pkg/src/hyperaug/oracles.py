"""Closed-form fixtures used by ``hyperaug verify`` and the test suite.

Every oracle here computes its reference value with plain numpy (dense
solves, central differences, geometric sums), independently of the tape.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import ModelParams, Tape, flat_grad, grad, ops, precision
from .hypergrad import HypergradConfig, hypergradient, neumann_inverse_hvp

__all__ = [
    "QuadraticBilevel",
    "central_difference",
    "relative_error",
    "scalar_neumann",
    "analytic_bilevel",
    "primitive_gradient_checks",
    "run_all",
]


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        out[i] = (fn(xp) - fn(xm)) / (2 * eps)
    return out


@dataclass
class QuadraticBilevel:
    """f(theta, phi) = 1/2 theta'A theta - theta'B phi, g(theta) = 1/2 |theta - t|^2.

    theta*(phi) = A^-1 B phi, so dg/dphi = B' A^-1 (theta* - t).
    """

    A: np.ndarray
    B: np.ndarray
    t: np.ndarray
    phi: np.ndarray
    lam_max: float

    @classmethod
    def random(cls, seed: int, dim: int = 10, n_phi: int = 10, eig_range=(1.0, 4.0)) -> "QuadraticBilevel":
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        eigs = rng.uniform(*eig_range, size=dim)
        return cls(
            A=(q * eigs) @ q.T,
            B=rng.normal(size=(dim, n_phi)),
            t=rng.normal(size=dim),
            phi=rng.normal(size=n_phi),
            lam_max=float(eigs.max()),
        )

    @property
    def theta_star(self) -> np.ndarray:
        return np.linalg.solve(self.A, self.B @ self.phi)

    def exact(self) -> np.ndarray:
        return self.B.T @ np.linalg.inv(self.A) @ (self.theta_star - self.t)

    def f(self, theta, phi):
        th, ph = theta["theta"], phi["phi"]
        return 0.5 * ops.dot(th, ops.matmul(self.A, th)) - ops.dot(th, ops.matmul(self.B, ph))

    def g(self, theta):
        d = theta["theta"] - self.t
        return 0.5 * ops.dot(d, d)

    def neumann(self, terms: int = 200, alpha: float | None = None) -> np.ndarray:
        alpha = alpha if alpha is not None else 0.9 / self.lam_max
        cfg = HypergradConfig(alpha=alpha, neumann_terms=terms)
        theta = ModelParams({"theta": self.theta_star})
        phi = ModelParams({"phi": self.phi})
        return hypergradient(self.f, self.g, theta, phi, cfg).grad_phi


def scalar_neumann(a: float = 2.0, alpha: float = 0.1, terms: int = 5) -> tuple[float, float]:
    """(implementation, geometric-series oracle) for f = a theta^2 / 2, v = 1."""
    params = ModelParams({"theta": np.array([0.7])})
    got = neumann_inverse_hvp(
        lambda th: 0.5 * a * ops.sum(th["theta"] * th["theta"]),
        params,
        None,
        np.array([1.0]),
        HypergradConfig(alpha=alpha, neumann_terms=terms),
    )
    r = 1.0 - alpha * a
    return float(got[0]), alpha * (1.0 - r ** (terms + 1)) / (1.0 - r)


def analytic_bilevel(phi: float = 1.0, alpha: float = 0.5, terms: int = 20) -> tuple[float, float]:
    """f = (theta - phi)^2 / 2, g = theta^2 / 2; exact dg/dphi = phi at theta = phi."""
    res = hypergradient(
        lambda th, ph: 0.5 * ops.sum((th["theta"] - ph["phi"]) ** 2),
        lambda th: 0.5 * ops.sum(th["theta"] ** 2),
        ModelParams({"theta": np.array([phi])}),
        ModelParams({"phi": np.array([phi])}),
        HypergradConfig(alpha=alpha, neumann_terms=terms),
    )
    return float(res.grad_phi[0]), phi


_PRIMITIVES = {
    "exp": lambda x: ops.sum(ops.exp(x)),
    "log": lambda x: ops.sum(ops.log(x * x + 1.0)),
    "tanh": lambda x: ops.sum(ops.tanh(x)),
    "sigmoid": lambda x: ops.sum(ops.sigmoid(x) * x),
    "matmul": lambda x: ops.sum(ops.matmul(x, ops.swap_last(x)) ** 2),
    "softmax": lambda x: ops.sum(ops.softmax(x, axis=-1) * np.arange(x.shape[-1])),
    "max": lambda x: ops.sum(ops.max(x * x, axis=-1)),
    "conv2d": lambda x: ops.sum(ops.conv2d(ops.reshape(x, (1, 1, 4, 4)), np.ones((2, 1, 3, 3)) * 0.3, None, pad=1) ** 2),
}


def primitive_gradient_checks(seed: int = 0) -> dict[str, float]:
    """Relative error of tape gradients against central differences."""
    rng = np.random.default_rng(seed)
    out = {}
    with precision("float64"):
        for name, fn in _PRIMITIVES.items():
            x0 = rng.normal(size=(4, 4))

            def value(x, fn=fn):
                return float(fn(x).data)

            tape = Tape()
            xv = tape.variable(x0)
            (gx,) = grad(fn(xv), [xv])
            out[name] = relative_error(gx.data, central_difference(value, x0))
    return out


def run_all(alpha: float | None = None, neumann_terms: int = 200) -> list[tuple[str, bool, str]]:
    """The oracle table: (name, passed, detail)."""
    rows = []
    with precision("float64"):
        worst = 0.0
        for seed in range(10):
            prob = QuadraticBilevel.random(seed)
            worst = max(worst, relative_error(prob.neumann(neumann_terms, alpha), prob.exact()))
        rows.append(("quadratic bilevel vs dense inverse (10 problems)", worst < 1e-3, f"max rel err {worst:.2e}"))

        got, want = scalar_neumann()
        rows.append(("Neumann scalar closed form", abs(got - want) < 1e-9, f"{got:.9f} vs {want:.9f}"))

        got, want = scalar_neumann(terms=200)
        rows.append(("Neumann J=200 vs exact inverse", abs(got - 0.5) < 1e-6, f"{got:.9f} vs 0.5"))

        got, want = analytic_bilevel()
        rows.append(("analytic bilevel best response", abs(got - want) < 1e-4, f"{got:.7f} vs {want}"))

    for name, err in primitive_gradient_checks().items():
        rows.append((f"gradient check: {name}", err < 1e-6, f"rel err {err:.1e}"))
    return rows
