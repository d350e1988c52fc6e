"""Check the curvature machinery against closed forms.

1. A quadratic bilevel problem whose hypergradient is a dense linear solve.
2. The truncated Neumann series on f = theta^2, a geometric sum.
3. A Hessian-vector product on the small CNN against finite differences of
   the gradient.

    python demos/hypergradient_oracles.py
"""
import numpy as np

from hyperaug.autodiff import CurvatureGraph, Tape, flat_grad, grad, precision
from hyperaug.models import ModelSpec, forward, init_params, loss_ce
from hyperaug.oracles import QuadraticBilevel, relative_error, scalar_neumann

with precision("float64"):
    prob = QuadraticBilevel.random(0)
    for terms in (5, 50, 200):
        err = relative_error(prob.neumann(terms), prob.exact())
        print(f"quadratic, {terms:>3} Neumann terms: relative error {err:.2e}")

    got, oracle = scalar_neumann(a=2.0, alpha=0.1, terms=5)
    print(f"scalar series: {got:.9f} vs geometric sum {oracle:.9f}")

    spec = ModelSpec()
    params = init_params(spec, seed=0)
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=(8, 1, 28, 28)), rng.integers(0, 10, size=8)

    def loss(th):
        return loss_ce(forward(spec, th, x), y)

    def gradient(flat):
        view, variables = params.unflatten(flat).as_variables(Tape())
        return flat_grad(grad(loss(view), variables))

    v = rng.normal(size=params.total_dim)
    v /= np.linalg.norm(v)
    eps, theta = 1e-5, params.flatten()
    fd = (gradient(theta + eps * v) - gradient(theta - eps * v)) / (2 * eps)
    hv = CurvatureGraph(loss, params).hvp(v)
    print(f"smallcnn ({params.total_dim} weights) HVP vs finite differences: {relative_error(hv, fd):.2e}")
