import numpy as np
import pytest

from hyperaug.autodiff import ModelParams, ops, precision
from hyperaug.data import SplitSpec, split, synth_dataset
from hyperaug.hypergrad import ConfigError, HypergradConfig, NeumannDivergenceError, hypergradient
from hyperaug.models import ModelSpec, init_params
from hyperaug.policy import init_policy
from hyperaug.trainloop import (
    OptimizerState,
    TrainConfig,
    TrainingError,
    evaluate,
    inner_step,
    outer_step,
    rmsprop_update,
    run,
    sgd_momentum_update,
)
from hyperaug.trainloop import with_overrides

SYNTH_SPEC = ModelSpec(input_shape=(1, 16, 16), num_classes=4)
TINY_SPEC = ModelSpec(input_shape=(1, 16, 16), num_classes=4, channels=(4, 8), hidden=(16,))


@pytest.fixture(scope="module")
def synth():
    with precision("float64"):
        train, val = split(synth_dataset(600, seed=0), SplitSpec(0.1, 0))
        test = synth_dataset(200, seed=10_000)
    return train, val, test


def _cfg(**kw):
    base = dict(dataset_kind="synth", record_wall_time=False)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- optimizers
def test_sgd_without_momentum_on_quadratic():
    params = ModelParams({"w": np.array([1.0, -2.0])})
    A = np.diag([3.0, 0.5])
    g = A @ params["w"]
    new = sgd_momentum_update(params, [g], [np.zeros(2)], lr=0.1, momentum=0.0)
    np.testing.assert_array_equal(new["w"], [1.0 - 0.1 * 3.0, -2.0 + 0.1 * 1.0])


def test_sgd_momentum_accumulates():
    params = ModelParams({"w": np.array([0.0])})
    buf = [np.zeros(1)]
    p1 = sgd_momentum_update(params, [np.array([1.0])], buf, lr=0.1, momentum=0.9)
    p2 = sgd_momentum_update(p1, [np.array([1.0])], buf, lr=0.1, momentum=0.9)
    assert p1["w"][0] == pytest.approx(-0.1) and p2["w"][0] == pytest.approx(-0.1 - 0.19)


def test_rmsprop_single_scalar_step():
    params = ModelParams({"p": np.array(1.0)})
    v = [np.array(0.0)]
    new = rmsprop_update(params, [np.array(2.0)], v, lr=0.01, decay=0.99, eps=1e-8)
    # v = 0.01 * 4 = 0.04; step = 0.01 * 2 / (0.2 + 1e-8)
    assert new["p"] == pytest.approx(1.0 - 0.02 / (0.2 + 1e-8), rel=1e-14)
    assert v[0] == pytest.approx(0.04, rel=1e-14)


def test_zero_hypergradient_leaves_policy_unchanged():
    policy = init_policy(2)
    new = rmsprop_update(policy, [np.zeros_like(a) for a in policy.arrays()],
                         [np.zeros_like(a) for a in policy.arrays()], 1e-2, 0.99, 1e-8)
    for a, b in zip(policy.arrays(), new.arrays()):
        assert np.array_equal(a, b)


# ---------------------------------------------------------------- inner step
def test_inner_step_momentum_zero_matches_hand_gradient(f64):
    spec = ModelSpec(kind="mlp", input_shape=(1, 2, 2), num_classes=3, hidden=())
    params = init_params(spec, seed=1)
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(5, 1, 2, 2))
    y = rng.integers(0, 3, size=5)
    opt = OptimizerState.create(params, init_policy(1))
    cfg = _cfg(momentum=0.0, inner_lr=0.3)
    new, info = inner_step(params, init_policy(1), (x, y), opt, cfg, spec, augment=False)

    # softmax cross-entropy of a linear layer: dL/dz = (softmax - onehot) / B
    W, b = params["fc1.weight"], params["fc1.bias"]
    flat = x.reshape(5, -1)
    z = flat @ W.T + b
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    dz = (p - np.eye(3)[y]) / 5
    np.testing.assert_allclose(new["fc1.weight"], W - 0.3 * dz.T @ flat, atol=1e-14)
    np.testing.assert_allclose(new["fc1.bias"], b - 0.3 * dz.sum(0), atol=1e-14)
    assert info["grad_norm"] == pytest.approx(np.sqrt(np.sum((dz.T @ flat) ** 2) + np.sum(dz.sum(0) ** 2)))
    assert opt.inner_count == 1


def test_inner_step_rejects_non_finite_loss(f64, synth):
    train = synth[0]
    params = init_params(TINY_SPEC)
    params = params.replace([np.full_like(a, np.nan) for a in params.arrays()])
    opt = OptimizerState.create(params, init_policy(2))
    with pytest.raises(TrainingError):
        inner_step(params, init_policy(2), (train.images[:4], train.labels[:4]), opt, _cfg(), TINY_SPEC, augment=False)


def test_augmented_inner_step_needs_noise(f64, synth):
    train = synth[0]
    params = init_params(TINY_SPEC)
    with pytest.raises(ValueError):
        inner_step(params, init_policy(2), (train.images[:4], train.labels[:4]),
                   OptimizerState.create(params, init_policy(2)), _cfg(), TINY_SPEC, augment=True)


def test_inner_steps_reduce_loss_in_most_seeds(synth):
    from hyperaug.data import iterate_batches
    from hyperaug.policy import draw_noise

    train = synth[0]
    decreased = 0
    with precision("float64"):
        for seed in range(20):
            params = init_params(TINY_SPEC, seed=seed)
            policy = init_policy(2)
            opt = OptimizerState.create(params, policy)
            cfg = _cfg(seed=seed)
            before = evaluate(TINY_SPEC, params, train)[0]
            rng = np.random.default_rng(seed)
            steps = 0
            while steps < 30:
                for x, y in iterate_batches(train, 64, rng):
                    noise = draw_noise(2, len(y), rng)
                    params, _ = inner_step(params, policy, (x, y), opt, cfg, TINY_SPEC, True, noise)
                    steps += 1
                    if steps == 30:
                        break
            decreased += evaluate(TINY_SPEC, params, train)[0] < before
    assert decreased >= 19


# ---------------------------------------------------------------- outer step
def test_outer_step_requires_an_inner_step(f64, synth):
    train, val, _ = synth
    params = init_params(TINY_SPEC)
    policy = init_policy(2)
    opt = OptimizerState.create(params, policy)
    with pytest.raises(TrainingError):
        outer_step(params, policy, (val.images[:8], val.labels[:8]), opt, _cfg(), TINY_SPEC,
                   (train.images[:8], train.labels[:8]), None)


def _outer_setup(cfg):
    from hyperaug.policy import draw_noise

    with precision("float64"):
        train, val = split(synth_dataset(64, seed=3), SplitSpec(0.5, 0))
        params = init_params(TINY_SPEC)
        policy = init_policy(2)
        opt = OptimizerState.create(params, policy)
        noise = draw_noise(2, 8, 0)
        batch = (train.images[:8], train.labels[:8])
        params, _ = inner_step(params, policy, batch, opt, cfg, TINY_SPEC, True, noise)
        return params, policy, opt, (val.images[:8], val.labels[:8]), batch, noise


def test_outer_step_updates_policy_and_resets_counter(f64):
    cfg = _cfg()
    params, policy, opt, val_batch, batch, noise = _outer_setup(cfg)
    new, info = outer_step(params, policy, val_batch, opt, cfg, TINY_SPEC, batch, noise)
    assert not info["skipped"] and info["hypergrad_norm"] > 0
    assert any(not np.array_equal(a, b) for a, b in zip(policy.arrays(), new.arrays()))
    assert opt.inner_count == 0 and opt.outer_count == 1


def test_divergence_skips_or_aborts(f64):
    cfg = _cfg(hypergrad=HypergradConfig(alpha=1e4, neumann_terms=50))
    params, policy, opt, val_batch, batch, noise = _outer_setup(cfg)
    new, info = outer_step(params, policy, val_batch, opt, cfg, TINY_SPEC, batch, noise)
    assert info["skipped"] and new is policy
    abort = with_overrides(cfg, on_divergence="abort")
    params, policy, opt, val_batch, batch, noise = _outer_setup(abort)
    with pytest.raises(NeumannDivergenceError):
        outer_step(params, policy, val_batch, opt, abort, TINY_SPEC, batch, noise)


def test_repeated_outer_steps_reach_analytic_optimum(f64):
    # f = 0.5 (theta - phi)^2, g = 0.5 theta^2: best response theta = phi, optimum phi = 0
    def f(th, ph):
        return 0.5 * ops.sum((th["t"] - ph["p"]) ** 2)

    def g(th):
        return 0.5 * ops.sum(th["t"] ** 2)

    theta = ModelParams({"t": np.array([1.0])})
    phi = ModelParams({"p": np.array([1.0])})
    mom, sq = [np.zeros(1)], [np.zeros(1)]
    cfg = HypergradConfig(alpha=0.5, neumann_terms=20)
    for _ in range(200):
        for _ in range(5):
            theta = sgd_momentum_update(theta, [theta["t"] - phi["p"]], mom, lr=0.5, momentum=0.0)
        res = hypergradient(f, g, theta, phi, cfg)
        phi = rmsprop_update(phi, phi.split(res.grad_phi), sq, lr=1e-2, decay=0.99, eps=1e-8)
    assert abs(phi["p"][0]) < 1e-2


# ---------------------------------------------------------------- config
@pytest.mark.parametrize(
    "kwargs,key",
    [
        ({"inner_steps": 0}, "inner_steps"),
        ({"warmup_epochs": -1}, "warmup_epochs"),
        ({"inner_lr": 0.0}, "inner_lr"),
        ({"policy_lr": -1.0}, "policy_lr"),
        ({"method": "rl"}, "method"),
        ({"momentum": 1.0}, "momentum"),
        ({"on_divergence": "ignore"}, "on_divergence"),
        ({"epochs": 1.5}, "epochs"),
    ],
)
def test_config_validation(kwargs, key):
    with pytest.raises(ConfigError) as info:
        TrainConfig(**kwargs)
    assert info.value.key == key


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.inner_steps, cfg.warmup_epochs, cfg.momentum, cfg.policy_lr) == (30, 20, 0.9, 1e-2)
    assert (cfg.rmsprop_decay, cfg.rmsprop_eps, cfg.inner_lr) == (0.99, 1e-8, 0.05)


# ---------------------------------------------------------------- run
def test_zero_epochs_gives_initial_record_only(f64, synth):
    m = run(_cfg(epochs=0), TINY_SPEC, *synth)
    assert [r["epoch"] for r in m.records] == [0]
    snap = m.records[0]["policy_snapshot"]
    assert np.allclose(snap["pi"], 1 / 14)


def test_warmup_never_invokes_augmentation(f64, synth):
    calls = []
    run(_cfg(epochs=2, warmup_epochs=2), TINY_SPEC, *synth, augment_hook=lambda e, s: calls.append(e))
    assert calls == []
    run(_cfg(epochs=2, warmup_epochs=1), TINY_SPEC, *synth, augment_hook=lambda e, s: calls.append(e))
    assert calls and set(calls) == {2}


def test_policy_frozen_through_warmup(f64, synth):
    m = run(_cfg(epochs=3, warmup_epochs=3, inner_steps=2), TINY_SPEC, *synth)
    snaps = [r["policy_snapshot"] for r in m.records]
    assert all({k: v for k, v in s.items() if k != "epoch"} == {k: v for k, v in snaps[0].items() if k != "epoch"} for s in snaps)
    for a, b in zip(m.policy.arrays(), init_policy(2).arrays()):
        assert np.array_equal(a, b)
    assert all(r["outer_steps"] == 0 for r in m.records)


def test_policy_moves_after_warmup(f64, synth):
    m = run(_cfg(epochs=2, warmup_epochs=1, inner_steps=3), TINY_SPEC, *synth)
    assert m.records[2]["outer_steps"] == 9 // 3
    assert m.records[1]["policy_snapshot"]["pi"] != m.records[2]["policy_snapshot"]["pi"]


def test_fixed_policy_never_updates(f64, synth):
    m = run(_cfg(epochs=2, warmup_epochs=0, method="fixed-policy", inner_steps=2), TINY_SPEC, *synth)
    for a, b in zip(m.policy.arrays(), init_policy(2).arrays()):
        assert np.array_equal(a, b)


def test_run_is_deterministic(f64, synth):
    cfg = _cfg(epochs=2, warmup_epochs=1, inner_steps=4, seed=5)
    a, b = run(cfg, TINY_SPEC, *synth), run(cfg, TINY_SPEC, *synth)
    assert a.records == b.records
    assert np.array_equal(a.params.flatten(), b.params.flatten())


def test_madao_and_fixed_policy_see_the_same_data(f64, synth):
    # outer steps draw no randomness, so only the policy differs between the two runs
    cfg = _cfg(epochs=1, warmup_epochs=0, inner_steps=100)
    a = run(cfg, TINY_SPEC, *synth)
    b = run(with_overrides(cfg, method="fixed-policy"), TINY_SPEC, *synth)
    assert a.records == b.records


def test_records_have_expected_fields(f64, synth):
    seen = []
    m = run(_cfg(epochs=1, warmup_epochs=0, inner_steps=3), TINY_SPEC, *synth, sink=seen.append)
    assert seen == m.records
    keys = {"epoch", "train_loss", "val_loss", "val_error", "test_error", "grad_norm_theta", "hypergrad_norm",
            "policy_snapshot", "peak_tape_nodes", "outer_steps", "skipped_outer", "wall_ms"}
    assert all(set(r) == keys for r in m.records)
    assert m.records[1]["wall_ms"] == 0.0


def test_nan_parameters_abort_with_context(f64, synth):
    params = init_params(TINY_SPEC)
    params = params.replace([np.full_like(a, np.nan) for a in params.arrays()])
    with pytest.raises(TrainingError) as info:
        run(_cfg(epochs=1), TINY_SPEC, *synth, params=params)
    assert info.value.epoch == 1 and info.value.step == 1


def test_memory_contract(f64, synth):
    # 540 training images, batch 64, drop_last: 8 full batches per epoch
    peaks = {}
    for method in ("neumann_implicit", "unrolled"):
        for s in (1, 2, 8):
            cfg = _cfg(epochs=1, warmup_epochs=0, inner_steps=s, drop_last=True, hypergrad=HypergradConfig(method=method))
            m = run(cfg, TINY_SPEC, *synth)
            peaks[method, s] = max(e["peak_tape_nodes"] for e in m.outer_log)
    # one differentiated step with the policy on the tape is the unrolled s=1 graph
    single = peaks["unrolled", 1]
    neumann = [peaks["neumann_implicit", s] for s in (1, 2, 8)]
    assert max(neumann) <= 2 * single
    assert max(neumann) - min(neumann) < 0.1 * min(neumann)
    for s in (2, 8):
        assert peaks["unrolled", s] >= 0.9 * s * single


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(3))
def test_synth_training_improves_on_initial_error(seed, synth):
    with precision("float64"):
        m = run(_cfg(epochs=30, seed=seed), SYNTH_SPEC, *synth)
    assert m.records[-1]["test_error"] < m.records[0]["test_error"]


def test_unrolled_replay_matches_eager_plain_sgd(f64, synth):
    from hyperaug.hypergrad import unrolled_hypergradient
    from hyperaug.policy import draw_noise
    from hyperaug.trainloop import _train_objective, _val_objective

    train, val, _ = synth
    params = init_params(TINY_SPEC)
    policy = init_policy(2)
    cfg = _cfg(momentum=0.0)
    opt = OptimizerState.create(params, policy)
    batches = [(train.images[i : i + 16], train.labels[i : i + 16]) for i in range(0, 48, 16)]
    noises = [draw_noise(2, 16, i) for i in range(3)]
    eager = params
    for b, n in zip(batches, noises):
        eager, _ = inner_step(eager, policy, b, opt, cfg, TINY_SPEC, True, n)
    res = unrolled_hypergradient([_train_objective(TINY_SPEC, x, y, n, True) for (x, y), n in zip(batches, noises)],
                                 _val_objective(TINY_SPEC, val.images[:16], val.labels[:16]), params, policy,
                                 steps=3, lr=cfg.inner_lr)
    assert abs(res.diagnostics["theta_final"].flatten() - eager.flatten()).max() < 1e-12


def test_unrolled_blocks_span_epochs(f64, synth):
    # 9 batches per epoch, s = 6: blocks close at steps 6, 12 and 18
    cfg = _cfg(epochs=2, warmup_epochs=0, inner_steps=6, hypergrad=HypergradConfig(method="unrolled"))
    m = run(cfg, TINY_SPEC, *synth)
    assert [e["step"] for e in m.outer_log] == [6, 12, 18]
    assert [r["outer_steps"] for r in m.records] == [0, 1, 2]
