import numpy as np
import pytest
import torch

from ntl.attacks import (AttackConfig, _prunable, attacker_data, finetune_attack, fisher_diagonal, overwrite_attack,
                         prune_attack, run_attack, stamp_trigger, trigger_accuracy)
from ntl.errors import UnknownAttack, ValidationError


def _params(m):
    return [p.detach().clone() for p in m.parameters()]


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_defaults():
    cfg = AttackConfig("ftal")
    assert cfg.data_fraction == 0.30 and cfg.prune_ratio == 0.70 and cfg.epochs == 50
    assert cfg.poison_fraction == pytest.approx(1 / 15) and cfg.trigger_size == 3
    assert cfg.aux_unlabeled_ratio == 1.0 and cfg.ewc_lambda == 1.0


@pytest.mark.parametrize("kw", [{"data_fraction": 0}, {"data_fraction": 1.5}, {"prune_ratio": 1.0},
                                {"prune_ratio": 0}, {"poison_fraction": -0.1}, {"epochs": -1}])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        AttackConfig("ftal", **kw)


def test_unknown_method():
    with pytest.raises(UnknownAttack):
        AttackConfig("distill")
    with pytest.raises(UnknownAttack):
        finetune_attack(None, None, AttackConfig("prune"))


@pytest.mark.parametrize("method", ["ftal", "rtal", "ewc", "au"])
def test_zero_epochs_is_noop(method, small_model, small_pair):
    src, tgt = small_pair
    out = finetune_attack(small_model, src, AttackConfig(method, epochs=0), unlabeled=tgt)
    assert _same(_params(small_model), out.parameters())


def test_attacker_share_is_stratified(small_pair):
    src, _ = small_pair
    att = attacker_data(src, AttackConfig("ftal"))
    assert len(att) == 90
    assert att.balance_ratio() <= 1.2


@pytest.mark.parametrize("method", ["ftal", "rtal", "ewc", "au"])
def test_finetune_changes_model_and_is_reproducible(method, small_model, small_pair):
    src, tgt = small_pair
    cfg = AttackConfig(method, epochs=1, seed=3)
    a = finetune_attack(small_model, src, cfg, unlabeled=tgt)
    b = finetune_attack(small_model, src, cfg, unlabeled=tgt)
    assert _same(_params(a), b.parameters())
    assert not _same(_params(small_model), a.parameters())


def test_au_needs_unlabeled(small_model, small_pair):
    src, _ = small_pair
    with pytest.raises(ValidationError):
        finetune_attack(small_model, src, AttackConfig("au", epochs=1))


def test_ewc_scales_steps_by_fisher(small_model, small_pair):
    src, _ = small_pair
    att = attacker_data(src, AttackConfig("ewc"))
    fisher = fisher_diagonal(small_model, att.subset(np.arange(10)))
    assert set(fisher) == {n for n, _ in small_model.named_parameters()}
    assert all(torch.all(f >= 0) for f in fisher.values())
    # large lambda nearly freezes parameters with nonzero Fisher
    strong = finetune_attack(small_model, src, AttackConfig("ewc", epochs=1, ewc_lambda=1e12))
    weak = finetune_attack(small_model, src, AttackConfig("ewc", epochs=1, ewc_lambda=0.0 + 1e-12))
    moved = lambda m: sum(float((a - b).abs().sum()) for a, b in zip(m.parameters(), small_model.parameters()))  # noqa: E731
    assert moved(strong) < moved(weak)


def test_fisher_is_mean_of_per_sample_squared_gradients(small_model, small_pair):
    from ntl.objective import kl_class_loss

    src, _ = small_pair
    sub = src.subset(np.arange(3))
    fisher = fisher_diagonal(small_model, sub)
    small_model.eval()
    name, param = next(iter(small_model.named_parameters()))
    acc = torch.zeros_like(param)
    for i in range(3):
        small_model.zero_grad()
        kl_class_loss(small_model(sub.to_tensor([i]))[1], sub.label_tensor([i])).backward()
        acc += param.grad ** 2
    assert torch.allclose(fisher[name], acc / 3)


def test_stamp_trigger(small_pair):
    src, _ = small_pair
    out = stamp_trigger(src.subset(np.arange(4)), 3)
    assert np.all(out.images[:, -3:, -3:, :] == 255)
    assert np.array_equal(out.images[:, :-3, :, :], src.images[:4, :-3, :, :])


def test_overwrite_zero_poison_is_ftal(small_model, small_pair):
    src, _ = small_pair
    a = overwrite_attack(small_model, src, AttackConfig("overwrite", epochs=1, poison_fraction=0.0))
    b = finetune_attack(small_model, src, AttackConfig("ftal", epochs=1))
    assert _same(_params(a), b.parameters())


def test_trigger_accuracy_range(small_model, small_pair):
    src, _ = small_pair
    acc = trigger_accuracy(small_model, src, AttackConfig("overwrite"))
    assert 0.0 <= acc <= 1.0


def test_prune_counts_per_layer(small_model):
    cfg = AttackConfig("prune", prune_ratio=0.7)
    pruned = prune_attack(small_model, cfg)
    for (_, before), (_, after) in zip(_prunable(small_model), _prunable(pruned)):
        n = after.weight.numel()
        assert int((after.weight == 0).sum()) == int(np.floor(0.7 * n))
        assert torch.equal(after.bias, before.bias)
        kept = after.weight != 0
        assert torch.equal(after.weight[kept], before.weight[kept])
        # every surviving weight is at least as large as every pruned one
        assert before.weight[kept].abs().min() >= before.weight[~kept].abs().max()


def test_prune_tiny_ratio_is_noop(small_model):
    out = prune_attack(small_model, AttackConfig("prune", prune_ratio=1e-9))
    assert _same(_params(small_model), out.parameters())


def test_run_attack_dispatch(small_model, small_pair):
    src, tgt = small_pair
    a = run_attack(small_model, src, AttackConfig("prune"))
    assert _same(_params(a), prune_attack(small_model, AttackConfig("prune")).parameters())
    b = run_attack(small_model, src, AttackConfig("overwrite", epochs=1))
    assert _same(_params(b), overwrite_attack(small_model, src, AttackConfig("overwrite", epochs=1)).parameters())
