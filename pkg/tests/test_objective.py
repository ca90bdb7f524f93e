import math

import numpy as np
import pytest
import torch

from conftest import finite_difference_grads, max_relative_error
from mgcc.backbone import ForwardOutputs
from mgcc.errors import NumericalError
from mgcc.objective import (WarmupSchedule, bce_dice, consistency_loss, lambda_at,
                            supervised_loss, total_loss)

HAND_VALUE = 0.5 * math.log(2) + (1 - (2 * 2 + 1e-5) / (2 + 4 + 1e-5))  # 0.679906...


def logit(p):
    return math.log(p / (1 - p))


# ---------------------------------------------------------------- bce_dice

def test_bce_dice_perfect_prediction():
    target = torch.tensor([[[[1.0, 0.0], [0.0, 1.0]]]], dtype=torch.float64)
    logits = torch.where(target > 0.5, 40.0, -40.0)
    assert float(bce_dice(logits, target)) < 1e-6


def test_bce_dice_hand_value():
    target = torch.ones((1, 1, 2, 2), dtype=torch.float64)
    logits = torch.zeros((1, 1, 2, 2), dtype=torch.float64)
    value = float(bce_dice(logits, target))
    assert value == pytest.approx(0.67991, abs=1e-4)
    assert value == pytest.approx(HAND_VALUE, abs=1e-9)


def test_bce_dice_empty_target_limit():
    target = torch.zeros((1, 1, 2, 2), dtype=torch.float64)
    logits = torch.full((1, 1, 2, 2), -40.0, dtype=torch.float64)
    assert float(bce_dice(logits, target)) < 1e-6


def test_bce_dice_input_validation():
    with pytest.raises(ValueError):
        bce_dice(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))
    with pytest.raises(ValueError):
        bce_dice(torch.zeros(1, 1, 2, 2), torch.full((1, 1, 2, 2), 0.5))


def test_bce_dice_nonnegative_and_permutation_invariant():
    rng = np.random.default_rng(0)
    for _ in range(20):
        logits = torch.tensor(rng.normal(size=(1, 1, 4, 4)))
        target = torch.tensor((rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64))
        base = float(bce_dice(logits, target))
        assert base >= -1e-5
        perm = rng.permutation(16)
        lp = logits.view(-1)[perm].view(1, 1, 4, 4)
        tp = target.view(-1)[perm].view(1, 1, 4, 4)
        assert float(bce_dice(lp, tp)) == pytest.approx(base, rel=1e-12)


def test_bce_dice_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    logits = torch.tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)
    target = torch.tensor((rng.random((1, 1, 4, 4)) > 0.4).astype(np.float64))
    loss = bce_dice(logits, target)
    loss.backward()
    analytic = logits.grad.detach().clone()

    def loss_fn():
        return bce_dice(logits, target)

    numeric = finite_difference_grads(loss_fn, [logits], eps=1e-6)[0]
    assert max_relative_error([analytic], [numeric]) <= 1e-6


# ---------------------------------------------------------------- supervised

def outputs_for(target, aux_logits, main_logits):
    return ForwardOutputs(main_logits, aux_logits)


def test_supervised_loss_mean_of_identical_decoders():
    target = torch.ones((1, 1, 2, 2), dtype=torch.float64)
    z = torch.zeros((1, 1, 2, 2), dtype=torch.float64)
    out = ForwardOutputs(z, [z.clone(), z.clone(), z.clone()])
    loss, per_dec = supervised_loss(out, target)
    assert float(loss) == pytest.approx(HAND_VALUE, abs=1e-9)
    assert len(per_dec) == 4
    assert all(v == pytest.approx(HAND_VALUE, abs=1e-9) for v in per_dec)


def test_supervised_loss_one_perfect_decoder():
    target = torch.ones((1, 1, 2, 2), dtype=torch.float64)
    zero = torch.zeros((1, 1, 2, 2), dtype=torch.float64)
    perfect = torch.full((1, 1, 2, 2), 40.0, dtype=torch.float64)
    out = ForwardOutputs(perfect, [zero.clone() for _ in range(3)])
    loss, _ = supervised_loss(out, target)
    assert float(loss) == pytest.approx(3 * HAND_VALUE / 4, abs=1e-6)
    assert float(loss) == pytest.approx(0.51, abs=2e-3)


def test_supervised_loss_batch_duplication_invariant():
    rng = np.random.default_rng(2)
    logits = torch.tensor(rng.normal(size=(2, 1, 4, 4)))
    target = torch.tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64))
    out1 = ForwardOutputs(logits, [logits * 0.5])
    base, _ = supervised_loss(out1, target)
    out2 = ForwardOutputs(torch.cat([logits, logits]), [torch.cat([logits * 0.5, logits * 0.5])])
    doubled, _ = supervised_loss(out2, torch.cat([target, target]))
    # invariance holds up to the Dice smoothing constant (1e-5)
    assert float(doubled) == pytest.approx(float(base), abs=1e-5)


# ---------------------------------------------------------------- consistency

def test_consistency_zero_when_identical():
    z = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    out = ForwardOutputs(z, [z.clone(), z.clone()])
    assert float(consistency_loss(out)) == 0.0


def test_consistency_saturated_difference():
    main = torch.full((1, 1, 4, 4), 40.0, dtype=torch.float64)    # p ~ 1.0
    aux = torch.full((1, 1, 4, 4), -40.0, dtype=torch.float64)    # p ~ 0.0
    out = ForwardOutputs(main, [aux])
    assert float(consistency_loss(out)) == pytest.approx(1.0, abs=1e-10)


def test_consistency_constant_offset_squared():
    for d in (0.05, 0.2, 0.4):
        main = torch.full((1, 1, 8, 8), logit(0.5), dtype=torch.float64)
        aux = torch.full((1, 1, 8, 8), logit(0.5 + d), dtype=torch.float64)
        out = ForwardOutputs(main, [aux])
        assert float(consistency_loss(out)) == pytest.approx(d ** 2, abs=1e-10)
        # independent of image size
        big = ForwardOutputs(torch.full((1, 1, 16, 16), logit(0.5), dtype=torch.float64),
                             [torch.full((1, 1, 16, 16), logit(0.5 + d), dtype=torch.float64)])
        assert float(consistency_loss(big)) == pytest.approx(d ** 2, abs=1e-10)


def test_consistency_detaches_main_branch():
    main = torch.randn(1, 1, 4, 4, dtype=torch.float64, requires_grad=True)
    aux = torch.randn(1, 1, 4, 4, dtype=torch.float64, requires_grad=True)
    loss = consistency_loss(ForwardOutputs(main, [aux]))
    loss.backward()
    assert main.grad is None or torch.all(main.grad == 0)
    assert aux.grad is not None and torch.any(aux.grad != 0)


def test_consistency_requires_aux():
    with pytest.raises(ValueError):
        consistency_loss(ForwardOutputs(torch.zeros(1, 1, 2, 2), []))


# ---------------------------------------------------------------- warm-up

def test_lambda_values():
    sched = WarmupSchedule(w_max=0.1, t_max=1000)
    assert lambda_at(1000, sched) == 0.1
    assert lambda_at(0, sched) == pytest.approx(6.7379e-4, rel=1e-4)
    assert lambda_at(500, sched) == pytest.approx(2.8650e-2, rel=1e-4)


def test_lambda_monotone_and_clamped():
    sched = WarmupSchedule(w_max=0.1, t_max=100)
    values = [lambda_at(t, sched) for t in range(101)]
    assert all(b > a for a, b in zip(values, values[1:]))
    assert lambda_at(150, sched) == 0.1


def test_lambda_negative_step():
    with pytest.raises(ValueError):
        lambda_at(-1, WarmupSchedule(0.1, 10))


# ---------------------------------------------------------------- total

def test_total_loss_arithmetic():
    sched = WarmupSchedule(w_max=0.1, t_max=100)
    report = total_loss(0.5, 0.2, 100, sched)
    assert report.total == pytest.approx(0.52, abs=1e-12)
    assert report.lam == 0.1
    assert report.total == report.supervised + report.lam * report.unsupervised


def test_total_loss_zero_unsupervised():
    sched = WarmupSchedule(0.1, 10)
    for step in (0, 5, 10):
        assert total_loss(0.7, 0.0, step, sched).total == 0.7


def test_total_loss_warmup_start():
    sched = WarmupSchedule(0.1, 1000)
    report = total_loss(0.5, 1.0, 0, sched)
    assert report.total == pytest.approx(0.5 + 6.7379e-4, abs=1e-7)


def test_total_loss_nan_rejected():
    with pytest.raises(NumericalError, match="supervised"):
        total_loss(float("nan"), 0.0, 0, WarmupSchedule(0.1, 10))
    with pytest.raises(NumericalError, match="unsupervised"):
        total_loss(0.0, float("inf"), 0, WarmupSchedule(0.1, 10))
