import dataclasses

import numpy as np
import pytest

from helpers import max_rel_error, numeric_grads
from ifedavg.data import ClientDataset, DataError, SyntheticConfig, partition_synthetic
from ifedavg.federation import (
    ClientState,
    ClientUpdate,
    ConfigError,
    ExperimentConfig,
    aggregate_uniform,
    apfl_step,
    client_predictor,
    init_federation,
    local_epoch,
    make_personal,
    run_experiment,
    run_round,
)
from ifedavg.nn import OptimizerState, PersonalParams, SharedParams, draw_masks

SEED = 8273


@pytest.fixture(scope="module")
def clients():
    return partition_synthetic(SyntheticConfig(n_clients=3, n_samples=120, n_features=4), 1)


def cfg(**kw):
    base = dict(algorithm="fedavg", rounds=3, seeds=(SEED,))
    base.update(kw)
    return ExperimentConfig(**base)


def assert_shared_equal(a: SharedParams, b: SharedParams):
    for k, v in a.arrays().items():
        assert np.array_equal(v, b.arrays()[k]), k


def trajectory(config, datasets, rounds=3):
    state = init_federation(config, datasets, SEED)
    out = []
    for _ in range(rounds):
        run_round(state)
        out.append(state.shared.copy())
    return state, out


# -- local epoch -------------------------------------------------------------

def test_zero_lr_changes_nothing(clients):
    state = init_federation(cfg(algorithm="ifedavg", fout="both"), clients, SEED)
    c = state.clients[0]
    before = c.personal.copy()
    update = local_epoch(c, state.shared, 0.0, np.random.default_rng(0), 32)
    assert_shared_equal(update.shared, state.shared)
    for k in ("b_in", "w_in", "b_out", "w_out"):
        assert np.array_equal(getattr(before, k), getattr(c.personal, k))


def test_single_sample_step_matches_finite_differences():
    rng = np.random.default_rng(0)
    D, K, lr = 3, 2, 0.5
    X = rng.normal(size=(2, D))
    ds = ClientDataset("a", X, np.array([1, 0]), [f"f{j}" for j in range(D)], ["continuous"] * D, K,
                       train_idx=np.array([0]), test_idx=np.array([1]))
    shared = SharedParams.init(D, K, rng)
    personal = PersonalParams.identity(D, K, scalar_w_out=False, train_b_out=True, train_w_out=True)
    personal.b_in[:] = rng.normal(size=D) * 0.3
    weights = np.array([0.7, 1.3])
    state = ClientState(ds, shared.copy(), personal.copy(), OptimizerState(lr, 0.0), weights)
    update = local_epoch(state, shared, lr, np.random.default_rng(42), None)

    replay = np.random.default_rng(42)
    replay.permutation(1)
    masks = draw_masks(replay, 1, D)
    ref_personal = personal.copy()
    grads = numeric_grads(shared, ref_personal, X[:1], np.array([1]), weights, masks=masks)
    for name, before in shared.arrays().items():
        step = (before - update.shared.arrays()[name]) / lr
        assert max_rel_error(step, grads[name]) < 1e-5, name
    for name in ("b_in", "w_in", "b_out", "w_out"):
        step = (getattr(personal, name) - getattr(state.personal, name)) / lr
        assert max_rel_error(step, grads[name]) < 1e-5, name


def test_empty_training_set_raises():
    ds = ClientDataset("a", np.zeros((1, 2)), np.array([0]), ["f0", "f1"], ["continuous"] * 2, 2,
                       train_idx=np.arange(0), test_idx=np.array([0]))
    shared = SharedParams.init(2, 2, np.random.default_rng(0))
    state = ClientState(ds, shared, PersonalParams.identity(2, 2, scalar_w_out=False),
                        OptimizerState(0.1), np.ones(2))
    with pytest.raises(DataError):
        local_epoch(state, shared, 0.1, np.random.default_rng(0), 32)


def test_frozen_ifedavg_update_equals_fedavg(clients):
    a = init_federation(cfg(algorithm="ifedavg", fin=False), clients, SEED)
    b = init_federation(cfg(), clients, SEED)
    ua = local_epoch(a.clients[1], a.shared, 0.01, np.random.default_rng(5), 32)
    ub = local_epoch(b.clients[1], b.shared, 0.01, np.random.default_rng(5), 32)
    assert_shared_equal(ua.shared, ub.shared)


def test_personal_training_modes():
    on = make_personal(cfg(algorithm="ifedavg", fout="scalar-weight"), 4, 3)
    assert on.w_out.shape == (1,) and on.train_w_out and on.train_b_out and on.train_b_in
    assert on.size() == 2 * 4 + 3 + 1
    bias = make_personal(cfg(algorithm="ifedavg", fout="bias"), 4, 3)
    assert bias.train_b_out and not bias.train_w_out
    off = make_personal(cfg(algorithm="fedavg", fout="both"), 4, 3)
    assert not off.trainable()


# -- aggregation -------------------------------------------------------------

def upd(shared, client="c"):
    return ClientUpdate(client, 10, shared)


def test_aggregate_single_returns_copy():
    p = SharedParams.init(3, 2, np.random.default_rng(0))
    out = aggregate_uniform([upd(p)])
    assert_shared_equal(out, p)
    assert out.w1 is not p.w1


def test_aggregate_symmetric_pair_is_zero():
    p = SharedParams.init(3, 2, np.random.default_rng(0))
    neg = SharedParams(**{k: -v for k, v in p.arrays().items()})
    out = aggregate_uniform([upd(p, "a"), upd(neg, "b")])
    assert all(not v.any() for v in out.arrays().values())


def test_aggregate_mean_ignores_sample_counts():
    vals = [1.0, 3.0, 5.0]
    ups = []
    for i, v in enumerate(vals):
        p = SharedParams.zeros(2, 2)
        for arr in p.arrays().values():
            arr[...] = v
        ups.append(ClientUpdate(str(i), 10 ** i, p))
    out = aggregate_uniform(ups)
    assert all(np.all(a == 3.0) for a in out.arrays().values())


def test_aggregate_shape_mismatch():
    with pytest.raises(ValueError):
        aggregate_uniform([upd(SharedParams.zeros(2, 2), "a"), upd(SharedParams.zeros(3, 2), "b")])
    with pytest.raises(ValueError):
        aggregate_uniform([])


# -- regime equivalences -----------------------------------------------------

def test_frozen_ifedavg_trajectory_equals_fedavg_bitwise(clients):
    _, a = trajectory(cfg(algorithm="ifedavg", fin=False, fout="none"), clients)
    _, b = trajectory(cfg(), clients)
    for x, y in zip(a, b):
        assert_shared_equal(x, y)


def test_one_client_fedavg_equals_central(clients):
    one = clients[:1]
    _, a = trajectory(cfg(), one)
    _, b = trajectory(cfg(algorithm="central"), one)
    for x, y in zip(a, b):
        assert_shared_equal(x, y)


def test_central_pools_training_rows(clients):
    state = init_federation(cfg(algorithm="central"), clients, SEED)
    assert len(state.clients) == 1
    assert len(state.clients[0].data.y_train) == sum(len(d.y_train) for d in state.datasets)
    scores = run_experiment(cfg(algorithm="central", rounds=1), clients).scores
    assert [s.client for s in scores] == [d.client for d in clients]


def test_apfl_alpha_zero_matches_fedavg_without_momentum(clients):
    a = run_experiment(cfg(algorithm="apfl", alpha=0.0), clients).runs[0]
    b = run_experiment(cfg(momentum=0.0), clients).runs[0]
    assert_shared_equal(a.shared, b.shared)
    for sa, sb in zip(a.scores, b.scores):
        for m in ("f1", "roc_auc", "balanced_acc"):
            assert abs(getattr(sa, m) - getattr(sb, m)) <= 1e-12


def test_apfl_alpha_one_predicts_with_private_model(clients):
    state = init_federation(cfg(algorithm="apfl", alpha=1.0), clients, SEED)
    run_round(state)
    run_round(state)
    for i, c in enumerate(state.clients):
        shared, personal = client_predictor(state, i)
        assert personal is None
        assert_shared_equal(shared, c.local)
    # the private model moved, and differs from the aggregated global model
    assert not np.array_equal(state.clients[0].local.w1, state.shared.w1)


def test_apfl_zero_lr_leaves_both_models(clients):
    state = init_federation(cfg(algorithm="apfl"), clients, SEED)
    c = state.clients[0]
    local_before = c.local.copy()
    u = apfl_step(c, state.shared, 0.5, 0.0, np.random.default_rng(1), np.random.default_rng(2), 32)
    assert_shared_equal(u.shared, state.shared)
    assert_shared_equal(c.local, local_before)


def test_apfl_has_no_momentum():
    assert cfg(algorithm="apfl", momentum=0.5).effective_momentum == 0.0
    assert cfg(momentum=0.5).effective_momentum == 0.5


# -- protocol invariants -----------------------------------------------------

def test_local_regime_clients_are_independent(clients):
    base = init_federation(cfg(algorithm="local"), clients, SEED)
    mutated = [dataclasses.replace(clients[0], X=clients[0].X + 3.0)] + list(clients[1:])
    other = init_federation(cfg(algorithm="local"), mutated, SEED)
    for _ in range(2):
        run_round(base)
        run_round(other)
    assert not np.array_equal(base.clients[0].shared.w1, other.clients[0].shared.w1)
    for b, o in zip(base.clients[1:], other.clients[1:]):
        assert_shared_equal(b.shared, o.shared)


@pytest.mark.parametrize("algorithm", ["fedavg", "ifedavg", "apfl"])
def test_broadcast_consistency(clients, algorithm):
    state, _ = trajectory(cfg(algorithm=algorithm), clients, rounds=2)
    for c in state.clients:
        assert_shared_equal(c.shared, state.shared)


@pytest.mark.parametrize("algorithm", ["fedavg", "ifedavg", "apfl", "local"])
def test_client_order_does_not_matter(clients, algorithm):
    config = cfg(algorithm=algorithm, fout="both")
    a, _ = trajectory(config, clients)
    b, _ = trajectory(config, list(reversed(clients)))
    assert_shared_equal(a.shared, b.shared)
    by_label = {c.label: c for c in b.clients}
    for c in a.clients:
        other = by_label[c.label]
        assert_shared_equal(c.shared, other.shared)
        assert np.array_equal(c.personal.b_in, other.personal.b_in)


def test_update_message_carries_shared_block_only():
    assert {f.name for f in dataclasses.fields(ClientUpdate)} == {"client", "n_samples", "shared"}
    assert set(SharedParams.zeros(2, 2).arrays()) == {"w1", "b1", "w2", "b2", "w3", "b3"}


def test_personal_layers_stay_on_clients(clients):
    state = init_federation(cfg(algorithm="ifedavg", fout="both"), clients, SEED)
    run_round(state)
    personal = [c.personal.b_in.copy() for c in state.clients]
    assert not np.array_equal(personal[0], personal[1])
    assert not np.array_equal(personal[0], np.zeros_like(personal[0]))


def test_momentum_persists_unless_reset(clients):
    keep, _ = trajectory(cfg(), clients, rounds=2)
    reset, _ = trajectory(cfg(reset_momentum=True), clients, rounds=2)
    assert keep.clients[0].opt.velocity
    assert not np.array_equal(keep.shared.w1, reset.shared.w1)


# -- experiments -------------------------------------------------------------

def test_run_experiment_is_deterministic(clients):
    config = cfg(algorithm="ifedavg", fout="scalar-weight", seeds=(1, 2))
    a, b = run_experiment(config, clients), run_experiment(config, clients)
    assert a.scores == b.scores
    for ra, rb in zip(a.runs, b.runs):
        assert_shared_equal(ra.shared, rb.shared)
        for label in ra.personal:
            assert np.array_equal(ra.personal[label].w_out, rb.personal[label].w_out)


def test_zero_rounds_scores_the_initial_model(clients):
    art = run_experiment(cfg(rounds=0), clients)
    run = art.runs[0]
    assert len(run.scores) == len(clients)
    init = init_federation(cfg(rounds=0), clients, SEED).shared
    assert_shared_equal(run.shared, init)


def test_five_seeds_give_five_runs(clients):
    art = run_experiment(cfg(rounds=1, seeds=(2934384, 10231938, 8273, 2019231, 62739)), clients)
    assert [r.seed for r in art.runs] == [2934384, 10231938, 8273, 2019231, 62739]
    assert len({r.shared.w1.tobytes() for r in art.runs}) == 5
    assert len(art.scores) == 5 * len(clients)


def test_eval_trace(clients):
    run = run_experiment(cfg(rounds=4, eval_every=2), clients).runs[0]
    assert [t for t, _ in run.trace] == [2]


@pytest.mark.parametrize("bad", [dict(algorithm="fedprox"), dict(alpha=1.5), dict(rounds=-1),
                                 dict(lr=0.0), dict(fout="sideways"), dict(seeds=())])
def test_config_errors_before_training(clients, bad):
    with pytest.raises(ConfigError):
        run_experiment(cfg(**bad), clients)


def test_clients_must_agree_on_shape(clients):
    odd = dataclasses.replace(clients[0], client="z", X=clients[0].X[:, :3], features=clients[0].features[:3])
    with pytest.raises(DataError):
        init_federation(cfg(), [odd, clients[1]], SEED)


def test_glorot_init_option(clients):
    state = init_federation(cfg(init="glorot"), clients, SEED)
    assert not state.shared.b1.any()
    assert np.abs(state.shared.w2).max() <= np.sqrt(6 / (128 + 64))
    with pytest.raises(ConfigError):
        init_federation(cfg(init="he"), clients, SEED)
