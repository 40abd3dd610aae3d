import pytest
import torch

from indigo.errors import DivergenceError
from indigo.optim import NesterovSGD, lr_schedule, sgd_nesterov_step


@pytest.mark.parametrize("epoch,factor", [(1, 1.0), (6, 1.0), (7, 0.1), (10, 0.1)])
def test_step_schedule(epoch, factor):
    assert lr_schedule(epoch, 1e-3) == pytest.approx(1e-3 * factor, rel=0, abs=1e-18)


def test_schedule_rejects_epoch_zero():
    with pytest.raises(ValueError):
        lr_schedule(0, 0.1)


def test_two_steps_unrolled_by_hand():
    lr, mu, wd, a = 0.1, 0.9, 0.01, 2.0
    p = torch.tensor([1.0], dtype=torch.float64)
    state = {}
    # f(p) = a p^2 / 2, gradient a p
    p0 = 1.0
    d1 = a * p0 + wd * p0
    p1 = p0 - lr * (d1 + mu * d1)
    d2 = a * p1 + wd * p1
    b2 = mu * d1 + d2
    p2 = p1 - lr * (d2 + mu * b2)
    for _ in range(2):
        sgd_nesterov_step([p], [a * p.clone()], state, lr, wd, mu)
    assert float(p) == pytest.approx(p2, abs=1e-15)


def test_matches_torch_sgd_over_many_steps():
    gen = torch.Generator().manual_seed(0)
    w0 = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    target = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    mine = w0.clone().requires_grad_(True)
    ref = w0.clone().requires_grad_(True)
    opt = NesterovSGD([{"params": [mine], "lr": 0.05}], weight_decay=5e-5, momentum=0.9)
    ref_opt = torch.optim.SGD([ref], lr=0.05, momentum=0.9, nesterov=True, weight_decay=5e-5)
    for _ in range(20):
        for w, o in ((mine, opt), (ref, ref_opt)):
            o.zero_grad()
            (((w - target) ** 2).sum() + 0.1 * (w ** 4).sum()).backward()
            o.step()
    torch.testing.assert_close(mine, ref, rtol=0, atol=1e-12)


def test_groups_follow_schedule_and_skip_frozen():
    a = torch.nn.Parameter(torch.ones(2))
    b = torch.nn.Parameter(torch.ones(2))
    frozen = torch.nn.Parameter(torch.ones(2), requires_grad=False)
    opt = NesterovSGD([{"name": "visual", "params": [a, frozen], "lr": 1e-3},
                       {"name": "fusion", "params": [b], "lr": 5e-3}])
    assert opt.groups[0]["params"] == [a]
    opt.set_epoch(7)
    assert [g["lr"] for g in opt.groups] == pytest.approx([1e-4, 5e-4])
    opt.set_epoch(3)
    assert [g["lr"] for g in opt.groups] == pytest.approx([1e-3, 5e-3])


def test_plain_momentum_and_no_momentum():
    p = torch.tensor([1.0], dtype=torch.float64)
    sgd_nesterov_step([p], [torch.tensor([2.0], dtype=torch.float64)], {}, 0.5, 0.0, 0.0)
    assert float(p) == 0.0
    q = torch.tensor([1.0], dtype=torch.float64)
    state = {}
    for _ in range(2):
        sgd_nesterov_step([q], [torch.tensor([1.0], dtype=torch.float64)], state, 0.1, 0.0, 0.5, nesterov=False)
    assert float(q) == pytest.approx(1.0 - 0.1 * 1.0 - 0.1 * 1.5)


def test_non_finite_gradient_raises():
    p = torch.zeros(2)
    with pytest.raises(DivergenceError):
        sgd_nesterov_step([p], [torch.tensor([1.0, float("nan")])], {}, 0.1, 0.0, 0.9)
    with pytest.raises(ValueError):
        sgd_nesterov_step([p], [torch.zeros(3)], {}, 0.1, 0.0, 0.9)
