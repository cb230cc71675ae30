import pytest
import torch

from services.errors import ContractViolation, NumericError
from services.numerics import (
    backward,
    finite_difference_grad,
    init_optim_state,
    optimizer_step,
    param_set,
    resolve_dtype,
)


def _quadratic_module():
    module = torch.nn.Linear(3, 2).double()
    with torch.no_grad():
        module.weight.copy_(torch.tensor([[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]], dtype=torch.float64))
        module.bias.copy_(torch.tensor([0.25, -0.75], dtype=torch.float64))
    return module


def test_resolve_dtype_defaults_to_float64():
    assert resolve_dtype() == torch.float64
    assert resolve_dtype("float32") == torch.float32


def test_resolve_dtype_reads_environment(monkeypatch):
    monkeypatch.setenv("ORYX_PRECISION", "float32")
    assert resolve_dtype() == torch.float32


def test_resolve_dtype_rejects_unknown():
    with pytest.raises(ContractViolation):
        resolve_dtype("float16")


def test_backward_matches_closed_form():
    module = _quadratic_module()
    x = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
    loss = (module(x) ** 2).sum()
    grads = backward(loss, param_set(module))

    y = module(x).detach()
    assert torch.allclose(grads["weight"], 2 * y.T @ x)
    assert torch.allclose(grads["bias"], 2 * y.sum(dim=0))


def test_backward_zero_for_unused_parameters():
    module = _quadratic_module()
    extra = torch.nn.Parameter(torch.ones(4, dtype=torch.float64))
    params = param_set(module)
    params["extra"] = extra
    grads = backward(module.bias.sum(), params)
    assert torch.equal(grads["extra"], torch.zeros(4, dtype=torch.float64))
    assert torch.equal(grads["weight"], torch.zeros_like(module.weight))


def test_backward_rejects_non_scalar():
    module = _quadratic_module()
    with pytest.raises(ContractViolation):
        backward(module(torch.ones(1, 3, dtype=torch.float64)), param_set(module))


def test_backward_names_node_on_nan():
    module = _quadratic_module()
    loss = torch.log(module.bias - 10.0).sum()
    with pytest.raises(NumericError) as info:
        backward(loss, param_set(module))
    assert info.value.node


def test_finite_differences_agree_with_backward():
    module = _quadratic_module()
    params = param_set(module)
    x = torch.tensor([[0.5, -1.0, 2.0], [1.5, 0.0, -0.5]], dtype=torch.float64)

    def f(_params):
        return torch.tanh(module(x)).pow(2).sum()

    analytic = backward(f(params), params)
    numeric = finite_difference_grad(f, params, h=1e-6)
    for name in params:
        assert torch.allclose(analytic[name], numeric[name], rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("trial", range(100))
def test_backward_matches_finite_differences_on_random_inputs(trial):
    gen = torch.Generator().manual_seed(trial)
    in_dim, out_dim, rows = (int(v) for v in torch.randint(1, 5, (3,), generator=gen))
    module = torch.nn.Linear(in_dim, out_dim).double()
    with torch.no_grad():
        module.weight.copy_(torch.randn(out_dim, in_dim, generator=gen, dtype=torch.float64))
        module.bias.copy_(torch.randn(out_dim, generator=gen, dtype=torch.float64))
    x = torch.randn(rows, in_dim, generator=gen, dtype=torch.float64)
    params = param_set(module)

    def f(_params):
        return torch.tanh(module(x)).pow(2).sum()

    analytic = backward(f(params), params)
    numeric = finite_difference_grad(f, params, h=1e-6)
    for name in params:
        assert torch.allclose(analytic[name], numeric[name], rtol=1e-6, atol=1e-8)


def test_finite_differences_restore_parameters():
    module = _quadratic_module()
    before = {name: p.detach().clone() for name, p in module.named_parameters()}
    finite_difference_grad(lambda p: module.weight.sum() ** 2, param_set(module))
    for name, p in module.named_parameters():
        assert torch.equal(p.detach(), before[name])


def test_finite_differences_visit_only_selected_coordinates():
    module = _quadratic_module()
    grads = finite_difference_grad(lambda p: (module.weight ** 2).sum(), param_set(module),
                                   coordinates={"weight": [1]})
    assert grads["weight"].view(-1)[1].item() == pytest.approx(-4.0, abs=1e-6)
    assert grads["weight"].view(-1)[0].item() == 0.0
    assert torch.equal(grads["bias"], torch.zeros(2, dtype=torch.float64))


def test_optimizer_step_moves_parameters_by_learning_rate():
    module = _quadratic_module()
    params = param_set(module)
    state = init_optim_state(params, lr=0.1)
    before = module.weight.detach().clone()
    grads = {name: torch.ones_like(p) for name, p in params.items()}

    optimizer_step(params, grads, state)

    # first Adam step moves each coordinate by lr * sign(g) (up to eps)
    assert torch.allclose(module.weight.detach(), before - 0.1, atol=1e-6)
    assert state.step == 1
    m, v = state.moments(params)["weight"]
    assert torch.allclose(m, torch.full_like(m, 0.1))
    assert torch.allclose(v, torch.full_like(v, 0.001))


def test_optimizer_step_with_zero_learning_rate_keeps_parameters():
    module = _quadratic_module()
    params = param_set(module)
    state = init_optim_state(params, lr=0.0)
    before = {name: p.detach().clone() for name, p in params.items()}
    optimizer_step(params, {name: torch.randn_like(p) for name, p in params.items()}, state)
    for name, p in params.items():
        assert torch.equal(p.detach(), before[name])


def test_optimizer_step_rejects_mismatched_gradients():
    module = _quadratic_module()
    params = param_set(module)
    state = init_optim_state(params)
    with pytest.raises(ContractViolation):
        optimizer_step(params, {"weight": torch.zeros_like(module.weight)}, state)
    with pytest.raises(ContractViolation):
        optimizer_step(params, {"weight": torch.zeros(2, 2, dtype=torch.float64),
                                "bias": torch.zeros(2, dtype=torch.float64)}, state)


def test_optimizer_approaches_quadratic_minimum_monotonically():
    module = torch.nn.Linear(1, 1, bias=False).double()
    with torch.no_grad():
        module.weight.zero_()
    params = param_set(module)
    state = init_optim_state(params, lr=0.05)
    argmin = 20.0

    distances = []
    for _ in range(200):
        loss = (module.weight - argmin).pow(2).sum()
        optimizer_step(params, backward(loss, params), state)
        distances.append(abs(module.weight.item() - argmin))

    after_warmup = distances[10:]
    assert all(later < earlier for earlier, later in zip(after_warmup, after_warmup[1:]))
    assert distances[-1] < argmin - 5.0


def test_fresh_optimizer_states_give_identical_updates():
    def run():
        module = _quadratic_module()
        params = param_set(module)
        state = init_optim_state(params, lr=0.01)
        gen = torch.Generator().manual_seed(3)
        for _ in range(5):
            grads = {name: torch.randn(p.shape, generator=gen, dtype=torch.float64) for name, p in params.items()}
            optimizer_step(params, grads, state)
        return {name: p.detach().clone() for name, p in params.items()}

    first, second = run(), run()
    for name in first:
        assert torch.equal(first[name], second[name])


def test_optim_state_reports_the_optimizer_hyperparameters():
    params = param_set(_quadratic_module())
    state = init_optim_state(params, lr=0.02, betas=(0.8, 0.99), eps=1e-6)
    assert state.lr == 0.02
    assert state.betas == (0.8, 0.99)
    assert state.eps == 1e-6
    state.optimizer.param_groups[0]["lr"] = 0.5
    assert state.lr == 0.5
