"""Learnable augmentation policy: K stages of Gumbel-softmax op selection."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .augment import MAGNITUDE_OPS, OPS, apply_with_probability, logistic_noise
from .autodiff import ModelParams, Tensor, as_tensor, get_default_dtype
from .autodiff import ops

__all__ = [
    "PolicyParams",
    "PolicySnapshot",
    "init_policy",
    "sample_and_apply",
    "draw_noise",
    "snapshot",
    "selection_frequencies",
    "N_OPS",
    "N_MAGNITUDES",
]

N_OPS = len(OPS)
N_MAGNITUDES = len(MAGNITUDE_OPS)
_MU_SLOT = {op: i for i, op in enumerate(MAGNITUDE_OPS)}


class PolicyParams(ModelParams):
    """Raw policy parameters for ``K`` stages.

    ``select_logits`` (K, 14) parameterise the selection weights through a
    softmax; ``raw_mu`` (K, 11) and ``raw_p`` (K, 14) pass through a sigmoid
    to give magnitudes and application probabilities.
    """

    NAMES = ("select_logits", "raw_mu", "raw_p")

    def __init__(self, tensors, temperature: float = 0.05):
        super().__init__(tensors)
        if tuple(self.names) != self.NAMES:
            raise ValueError(f"policy tensors must be named {self.NAMES}, got {tuple(self.names)}")
        self.temperature = float(temperature)

    def replace(self, values) -> "PolicyParams":
        values = list(values)
        if len(values) != 3:
            raise ValueError(f"expected 3 policy tensors, got {len(values)}")
        return PolicyParams(zip(self.NAMES, values), temperature=self.temperature)

    @property
    def select_logits(self):
        return self.tensors["select_logits"]

    @property
    def raw_mu(self):
        return self.tensors["raw_mu"]

    @property
    def raw_p(self):
        return self.tensors["raw_p"]

    @property
    def k_stages(self) -> int:
        return int(np.shape(_data(self.select_logits))[0])

    def effective(self) -> dict[str, np.ndarray]:
        """Post-activation values: selection weights, magnitudes, probabilities."""
        logits = np.asarray(_data(self.select_logits), dtype=np.float64)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return {
            "pi": z / z.sum(axis=1, keepdims=True),
            "mu": _sigmoid(np.asarray(_data(self.raw_mu), dtype=np.float64)),
            "p": _sigmoid(np.asarray(_data(self.raw_p), dtype=np.float64)),
        }


def _data(v):
    return v.data if isinstance(v, Tensor) else v


def _sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def init_policy(k_stages: int = 2, seed: int | None = None, temperature: float = 0.05) -> PolicyParams:
    """Uniform selection, every magnitude and probability at sigmoid(0.5).

    ``seed`` is accepted for interface symmetry; the initial policy is
    deterministic.
    """
    if k_stages < 1:
        raise ValueError(f"k_stages must be >= 1, got {k_stages}")
    dtype = get_default_dtype()
    return PolicyParams(
        [
            ("select_logits", np.zeros((k_stages, N_OPS), dtype=dtype)),
            ("raw_mu", np.full((k_stages, N_MAGNITUDES), 0.5, dtype=dtype)),
            ("raw_p", np.full((k_stages, N_OPS), 0.5, dtype=dtype)),
        ],
        temperature=temperature,
    )


def draw_noise(k_stages: int, batch: int, rng_seed=None) -> dict[str, np.ndarray]:
    """Gumbel noise for op selection and logistic noise for op application."""
    rng = np.random.default_rng(rng_seed)
    gumbel = rng.gumbel(size=(k_stages, batch, N_OPS))
    logistic = np.stack([logistic_noise(rng, batch) for _ in range(k_stages)])
    return {"gumbel": gumbel, "logistic": logistic}


def sample_and_apply(
    params: PolicyParams,
    x,
    rng_seed=None,
    noise: dict | None = None,
    selection_temperature: float | None = None,
) -> Tensor:
    """Augment every image with one sampled op per stage.

    For each image and stage, ``u ~ RelaxCat(pi, tau)`` is drawn, the op at
    ``argmax u`` is applied (itself gated by a relaxed Bernoulli on its
    probability), and the result is scaled by ``u_i / stop_gradient(u_i)``:
    exactly 1 in value, but it routes gradient into the selection logits.
    """
    x = as_tensor(x)
    b = x.shape[0]
    k_stages = params.k_stages
    tau = params.temperature if selection_temperature is None else selection_temperature
    if noise is None:
        noise = draw_noise(k_stages, b, rng_seed)
    dtype = x.dtype
    logits_all = as_tensor(params.select_logits)
    mu_all = ops.sigmoid(as_tensor(params.raw_mu))
    p_all = ops.sigmoid(as_tensor(params.raw_p))
    for k in range(k_stages):
        log_pi = ops.log_softmax(logits_all[k], axis=-1)
        u = ops.softmax((log_pi + noise["gumbel"][k].astype(dtype)) * (1.0 / tau), axis=-1)
        choice = np.argmax(u.data, axis=1)
        picked = ops.take_last(ops.reshape(u, (b, 1, N_OPS)), choice.reshape(b, 1))
        scale = ops.reshape(picked / picked.data, (b,))
        pieces, order = [], []
        for op_index in np.unique(choice):
            rows = np.nonzero(choice == op_index)[0]
            op = OPS[op_index]
            mu = mu_all[k, _MU_SLOT[op]] if op.has_magnitude else None
            y = apply_with_probability(
                op,
                ops.index_select(x, rows),
                mu,
                p_all[k, int(op_index)],
                temperature=params.temperature,
                noise=noise["logistic"][k][rows],
            )
            pieces.append(y * ops.reshape(ops.index_select(scale, rows), (rows.size, 1, 1, 1)))
            order.append(rows)
        perm = np.concatenate(order)
        x = ops.index_select(ops.concat(pieces, axis=0), np.argsort(perm))
    return x


def selection_frequencies(params: PolicyParams, stage: int, n_draws: int, rng_seed=None) -> np.ndarray:
    """Empirical frequency of each op being the argmax of a Gumbel-softmax draw."""
    rng = np.random.default_rng(rng_seed)
    logits = np.asarray(_data(params.select_logits), dtype=np.float64)[stage]
    log_pi = logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()
    u = (log_pi + rng.gumbel(size=(n_draws, N_OPS))) / params.temperature
    return np.bincount(np.argmax(u, axis=1), minlength=N_OPS) / n_draws


@dataclass
class PolicySnapshot:
    epoch: int
    pi: list
    mu: list
    p: list

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "pi": self.pi, "mu": self.mu, "p": self.p}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicySnapshot":
        return cls(epoch=int(d["epoch"]), pi=d["pi"], mu=d["mu"], p=d["p"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PolicySnapshot":
        return cls.from_dict(json.loads(text))


def snapshot(params: PolicyParams, epoch: int) -> PolicySnapshot:
    eff = params.effective()
    return PolicySnapshot(
        epoch=int(epoch),
        pi=eff["pi"].tolist(),
        mu=eff["mu"].tolist(),
        p=eff["p"].tolist(),
    )
