import numpy as np
import pytest

from normlab.attacks import pgd
from normlab.data_io import Checkpoint, Dataset, save_checkpoint
from normlab.geometry import Budget, Norm, batch_norms
from normlab.models import ConsistencyObjective, ModelSpec, Network, consistency_loss, init_params
from normlab.training import (EnsembleLoadError, TrainConfig, alternation_schedule, inner_maximize, load_ensemble,
                              train)

TOY = ModelSpec.toy_mlp(2, (8,), 2)
L2 = Budget(Norm.L2, 0.1, 0.01, 5)
LINF = Budget(Norm.LINF, 0.05, 0.01, 5)


def separable(n=200, seed=0, margin=0.05):
    """n points in the unit square labelled by x0 + x1 > 1, none within ``margin`` of that line."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(8 * n, 2))
    x = x[np.abs(x.sum(axis=1) - 1.0) > margin][:n]
    return Dataset(x, (x.sum(axis=1) > 1.0).astype(np.int64))


def same_params(a, b):
    return list(a) == list(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(regime="atda")
    with pytest.raises(ValueError):
        TrainConfig(regime="mixed", budgets=(L2, L2))
    with pytest.raises(ValueError):
        TrainConfig(regime="ensemble", budgets=(L2,))
    with pytest.raises(ValueError):
        TrainConfig(regime="trades", budgets=(L2,), lam=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(regime="madry")


def test_zero_budget_madry_and_zero_lambda_trades_match_natural():
    data = separable(60)
    base = dict(epochs=3, batch_size=16, lr=0.1, seed=5)
    nat, _ = train(TOY, data, TrainConfig(regime="natural", **base))
    madry, _ = train(TOY, data, TrainConfig(regime="madry", budgets=(Budget(Norm.LINF, 0.0, 0.01, 3),), **base))
    trades, _ = train(TOY, data, TrainConfig(regime="trades", budgets=(L2,), lam=0.0, **base))
    assert same_params(nat, madry)
    assert same_params(nat, trades)


def test_training_is_deterministic_and_logs_every_epoch():
    cfg = TrainConfig(regime="madry", budgets=(LINF,), epochs=2, batch_size=20, lr=0.1, seed=1, random_start=True)
    (a, la), (b, lb) = train(TOY, separable(80), cfg), train(TOY, separable(80), cfg)
    assert same_params(a, b)
    assert len(la.epochs) == 2 and la.to_dict() == lb.to_dict()
    assert la.epochs[0].inner_loss is not None


def test_natural_training_separates_toy_set():
    data = separable()
    params, log = train(TOY, data, TrainConfig(regime="natural", epochs=200, batch_size=20, lr=0.5, momentum=0.9))
    acc = (Network(TOY, params).predict(data.images) == data.labels).mean()
    assert acc == 1.0


def test_eps_warmup_ramps_budget():
    cfg = TrainConfig(regime="madry", budgets=(Budget(Norm.LINF, 0.3, 0.06, 5),), epochs=5, eps_warmup=3)
    eps = [cfg.epoch_budgets(e)[0].epsilon for e in range(5)]
    assert eps == pytest.approx([0.0, 0.1, 0.2, 0.3, 0.3])
    assert cfg.epoch_budgets(2)[0].alpha == pytest.approx(0.04)
    data = separable(40)
    base = dict(batch_size=16, lr=0.1, seed=4)
    # a warmup epoch at epsilon 0 is natural training
    warm, _ = train(TOY, data, TrainConfig(regime="madry", budgets=cfg.budgets, epochs=1, eps_warmup=2, **base))
    nat, _ = train(TOY, data, TrainConfig(regime="natural", epochs=1, **base))
    assert same_params(warm, nat)


def test_alternation_parity():
    pair = (L2, LINF)
    assert alternation_schedule(0, pair) is L2 and alternation_schedule(7, pair) is LINF
    picks = [alternation_schedule(i, pair).norm for i in range(1000)]
    assert picks.count(Norm.L2) == 500
    with pytest.raises(ValueError):
        alternation_schedule(0, (L2, L2))


def test_mixed_training_runs_and_differs_from_single_norm():
    data = separable(60)
    base = dict(epochs=1, batch_size=16, lr=0.1, seed=2)
    mixed, _ = train(TOY, data, TrainConfig(regime="mixed", budgets=(L2, LINF), **base))
    only_l2, _ = train(TOY, data, TrainConfig(regime="madry", budgets=(L2,), **base))
    assert not same_params(mixed, only_l2)


@pytest.mark.parametrize("regime", ["madry", "trades", "ensemble"])
def test_inner_maximize_is_feasible(regime):
    net = Network(TOY, init_params(TOY, 0))
    x = np.random.default_rng(0).uniform(size=(30, 2))
    y = (x.sum(axis=1) > 1).astype(int)
    for b in (L2, LINF):
        x_adv = inner_maximize(net, x, y, regime, b, seed=3)
        assert (batch_norms(x_adv - x, b.norm) <= b.epsilon + 1e-9).all()
        assert x_adv.min() >= 0 and x_adv.max() <= 1
        assert inner_maximize(net, x, y, regime, b.with_(steps=0)).tobytes() == x.tobytes()


def test_trades_inner_loss_is_nondecreasing():
    rising, trials = 0, 100
    for t in range(trials):
        rng = np.random.default_rng(t)
        net = Network(TOY, init_params(TOY, t))
        x = rng.uniform(0.1, 0.9, size=(8, 2))
        b = Budget(Norm.L2, 0.1, 0.01, 10)
        start = x + 1e-3 * rng.standard_normal(x.shape)
        obj = ConsistencyObjective(net, x)
        losses = [consistency_loss(net, x, pgd(obj, x, None, b.with_(steps=k), start=start,
                                               record_trace=False).x_adv) for k in range(11)]
        rising += all(b2 >= a2 - 1e-15 for a2, b2 in zip(losses, losses[1:]))
    assert rising >= 95


@pytest.mark.parametrize("seed", range(3))
def test_madry_training_flattens_input_gradients(seed):
    # margin 0.3 leaves room for the 0.1 ball around every training point
    data, held = separable(200, seed, margin=0.3), separable(100, seed + 100, margin=0.3)
    init = init_params(TOY, seed)

    def grad_norm(params):
        _, g = Network(TOY, params).input_gradient(held.images, held.labels)
        return batch_norms(g, Norm.L2).mean()

    cfg = TrainConfig(regime="madry", budgets=(Budget(Norm.LINF, 0.1, 0.02, 7),), epochs=100, batch_size=20,
                      lr=0.1, momentum=0.9, seed=seed)
    trained, _ = train(TOY, data, cfg, init=init)
    assert grad_norm(trained) < grad_norm(init)


def test_ensemble_training(tmp_path):
    static = init_params(TOY, 9)
    path = tmp_path / "static.ckpt"
    save_checkpoint(path, Checkpoint(TOY, static))
    cfg = TrainConfig(regime="ensemble", budgets=(LINF,), ensemble=(str(path),), epochs=2, batch_size=16, lr=0.1)
    a, log = train(TOY, separable(60), cfg)
    b, _ = train(TOY, separable(60), cfg)
    assert same_params(a, b) and len(log.epochs) == 2
    assert len(load_ensemble([path])) == 1


def test_ensemble_load_failure_names_checkpoint(tmp_path):
    missing = tmp_path / "gone.ckpt"
    with pytest.raises(EnsembleLoadError, match="gone.ckpt"):
        train(TOY, separable(20), TrainConfig(regime="ensemble", budgets=(LINF,), ensemble=(str(missing),)))
