import pytest
import torch
from torch import nn

from crossbid.core_nn import (
  Mlp, MlpSpec, NonFiniteError, OptimizerConfig, build_mlp, check_finite, forward,
  gradient_check, grad, load_checkpoint, make_optimizer, read_checkpoint_meta,
  save_checkpoint, soft_update, step,
)


def _net(dtype=torch.float32, activation="relu"):
  torch.manual_seed(0)
  return Mlp(MlpSpec.make(3, [5, 4], 2, activation), dtype=dtype)


def test_spec_validation():
  with pytest.raises(ValueError):
    MlpSpec((3, 2))
  with pytest.raises(ValueError):
    MlpSpec((3, 0, 2))
  with pytest.raises(ValueError):
    MlpSpec((3, 4, 2), activations="swish")
  with pytest.raises(ValueError):
    MlpSpec((3, 4, 4, 2), activations=("relu",))
  spec = MlpSpec.make(3, [4], 2, output_activation="softmax")
  assert MlpSpec.from_dict(spec.to_dict()) == spec


def test_build_mlp_layers():
  body = build_mlp(MlpSpec.make(3, [5, 4], 2, "tanh", "sigmoid"))
  kinds = [type(m) for m in body]
  assert kinds == [nn.Linear, nn.Tanh, nn.Linear, nn.Tanh, nn.Linear, nn.Sigmoid]


def test_forward_checks_width():
  net = _net()
  assert forward(net, torch.zeros(7, 3)).shape == (7, 2)
  with pytest.raises(ValueError):
    forward(net, torch.zeros(7, 4))


def test_check_finite_names_block():
  with pytest.raises(NonFiniteError) as info:
    check_finite(torch.tensor([1.0, float("inf")]), "top.loss")
  assert info.value.block == "top.loss"


def test_grad_and_step_descend():
  net = _net()
  x = torch.randn(16, 3, generator=torch.Generator().manual_seed(1))

  def loss_fn(module, batch):
    return (module(batch) ** 2).mean()

  before = loss_fn(net, x).item()
  optimizer = make_optimizer(net, OptimizerConfig(lr=1e-2))
  for _ in range(20):
    gradients = grad(net, loss_fn, x)
    assert set(gradients) == {name for name, _ in net.named_parameters()}
    step(optimizer, net, gradients)
  assert loss_fn(net, x).item() < before


def test_grad_reports_non_finite_loss():
  net = _net()
  with pytest.raises(NonFiniteError):
    grad(net, lambda module, batch: module(batch).sum() * float("nan"), torch.zeros(2, 3))


def test_zero_learning_rate_keeps_parameters():
  net = _net()
  before = [p.detach().clone() for p in net.parameters()]
  optimizer = make_optimizer(net, OptimizerConfig(lr=0.0))
  step(optimizer, net, grad(net, lambda m, b: m(b).sum(), torch.ones(4, 3)))
  assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))


def test_optimizer_config_validation():
  with pytest.raises(ValueError):
    OptimizerConfig(lr=-1e-3)
  with pytest.raises(ValueError):
    OptimizerConfig(lr=1e-3, betas=(0.9, 1.0))
  with pytest.raises(ValueError):
    OptimizerConfig(lr=1e-3, clip_norm=0.0)


def test_step_rejects_wrong_gradient_shape():
  net = _net()
  optimizer = make_optimizer(net, OptimizerConfig(lr=1e-3))
  bad = {name: torch.zeros(1) for name, _ in net.named_parameters()}
  with pytest.raises(ValueError):
    step(optimizer, net, bad)


def test_soft_update():
  target, online = _net(), Mlp(MlpSpec.make(3, [5, 4], 2))
  soft_update(target, online, 1.0)
  assert all(torch.equal(t, o) for t, o in zip(target.parameters(), online.parameters()))
  with pytest.raises(ValueError):
    soft_update(target, online, 1.5)
  with pytest.raises(ValueError):
    soft_update(target, Mlp(MlpSpec.make(3, [4], 2)), 0.5)


def test_gradient_check_float64():
  net = _net(torch.float64, "tanh")
  x = torch.randn(8, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
  error = gradient_check(lambda: (net(x) ** 2).mean(), net.parameters(), eps=1e-6)
  assert error < 1e-6


def test_checkpoint_round_trip(tmp_path):
  net = _net()
  optimizer = make_optimizer(net, OptimizerConfig(lr=1e-3))
  path = tmp_path / "ckpt" / "net.pt"
  digest = save_checkpoint(path, {"net": net}, {"net": optimizer}, {"stage": "top", "seed": 3})
  assert len(digest) == 64

  fresh = Mlp(MlpSpec.make(3, [5, 4], 2))
  meta = load_checkpoint(path, {"net": fresh}, {"net": make_optimizer(fresh, OptimizerConfig(lr=1e-3))})
  assert meta == {"stage": "top", "seed": 3}
  assert all(torch.equal(a, b) for a, b in zip(net.parameters(), fresh.parameters()))
  assert read_checkpoint_meta(path) == meta


def test_checkpoint_failures(tmp_path):
  with pytest.raises(FileNotFoundError):
    load_checkpoint(tmp_path / "missing.pt", {"net": _net()})
  assert read_checkpoint_meta(tmp_path / "missing.pt") is None

  path = tmp_path / "net.pt"
  save_checkpoint(path, {"net": _net()})
  with pytest.raises(RuntimeError):
    load_checkpoint(path, {"other": _net()})

  garbage = tmp_path / "garbage.pt"
  garbage.write_bytes(b"not a checkpoint")
  with pytest.raises(RuntimeError):
    load_checkpoint(garbage, {"net": _net()})
