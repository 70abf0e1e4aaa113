import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cdstl.errors import DataError, DataFormatError, DimensionError, UsageError
from cdstl.nncore import (
    Arch,
    Rng,
    backward,
    build_model,
    checkpoint_bytes,
    cross_entropy,
    derive_seed,
    embed,
    flatten_params,
    forward,
    load_model,
    model_hash,
    parse_model,
    save_model,
    sgd_step,
    train_sgd,
    unflatten_params,
)
from cdstl.nncore.rng import splitmix64

from oracles import np_cross_entropy, np_mlp_forward, param_fd, rel_err


# ---------------------------------------------------------------- rng


def test_splitmix64_reference_stream():
    # published SplitMix64 outputs for seed 1234567
    expected = [6457827717110365317, 3203168211198807973, 9817491932198370423, 4593380528125082431, 16408922859458223821]
    assert [int(v) for v in Rng(1234567).bits(5)] == expected


def test_splitmix64_scalar_matches_stream():
    assert splitmix64(0) == int(Rng(0).bits(1)[0]) == 0xE220A8397B1DCDAF


def test_rng_blocks_match_one_at_a_time():
    a = Rng(99)
    whole = a.bits(10)
    b = Rng(99)
    parts = np.concatenate([b.bits(3), b.bits(7)])
    assert np.array_equal(whole, parts)


def test_derive_seed_keys_matter():
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
    assert derive_seed(1, "a") != derive_seed(2, "a")


@given(st.integers(0, 2**64 - 1), st.integers(1, 200))
@settings(max_examples=40, deadline=None)
def test_permutation_is_a_permutation(seed, n):
    p = Rng(seed).permutation(n)
    assert sorted(p.tolist()) == list(range(n))


def test_uniform_and_integers_ranges():
    r = Rng(5)
    u = r.uniform(10000)
    assert u.min() >= 0 and u.max() < 1 and abs(u.mean() - 0.5) < 0.02
    ints = r.integers(3, 7, size=1000)
    assert set(ints.tolist()) == {3, 4, 5, 6}
    z = r.normal(20000)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03


# ---------------------------------------------------------------- forward


def test_linear_probe_identity_weights():
    k = 4
    model = build_model("LinearProbe", (1, 2, 3), k, zero=True)
    with torch.no_grad():
        model.params["head.weight"][:, :k] = torch.eye(k)
    x = np.arange(6, dtype=np.float64).reshape(1, 1, 2, 3) / 10
    logits = forward(model, x)
    assert np.allclose(logits.detach().numpy(), x.reshape(1, -1)[:, :k], atol=0)


def test_zero_convnet_gives_zero_logits(rng):
    model = build_model("ConvNetS", (1, 16, 16), 4, zero=True)
    out = forward(model, rng.uniform(size=(3, 1, 16, 16)))
    assert torch.count_nonzero(out) == 0


def test_mlp_matches_matmul_oracle():
    model = build_model("MLP", (1, 2, 2), 3, seed=42)
    x = np.array([[[[0.1, -0.4], [0.7, 0.25]]], [[[1.0, 0.0], [-0.3, 0.5]]]])
    got = forward(model, x).detach().numpy()
    assert np.max(np.abs(got - np_mlp_forward(model.params, x))) < 1e-12


@pytest.mark.parametrize("arch", ["ConvNetS", "ConvNetDeep", "MLP", "LinearProbe"])
def test_logit_shape(arch, rng):
    model = build_model(arch, (1, 16, 16), 5, seed=1)
    assert forward(model, rng.uniform(size=(7, 1, 16, 16))).shape == (7, 5)


def test_bad_input_shape_names_layer():
    model = build_model("ConvNetS", (1, 16, 16), 4)
    with pytest.raises(DimensionError, match="block0.conv"):
        forward(model, np.zeros((2, 3, 16, 16)))
    with pytest.raises(DimensionError):
        forward(model, np.zeros((16, 16)))
    with pytest.raises(DimensionError):
        build_model("ConvNetDeep", (1, 12, 12), 4)


# ---------------------------------------------------------------- cross entropy


def test_uniform_logits_give_log_k():
    loss = cross_entropy(torch.zeros(3, 10, dtype=torch.float64), [0, 4, 9])
    assert abs(loss.item() - math.log(10)) < 1e-12


def test_confident_correct_logit():
    logits = torch.tensor([[1e9, 0.0, 0.0]], dtype=torch.float64)
    assert cross_entropy(logits, [0]).item() < 1e-6


def test_cross_entropy_matches_direct_sum(rng):
    z = rng.normal(size=(4, 3))
    y = [0, 2, 1, 2]
    assert abs(cross_entropy(torch.from_numpy(z), y).item() - np_cross_entropy(z, y)) < 1e-12


@given(st.floats(-1e6, 1e6), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_softmax_shift_invariance(c, seed):
    z = np.random.default_rng(seed).normal(size=(5, 4)) * 3
    y = np.arange(5) % 4
    a = cross_entropy(torch.from_numpy(z), y).item()
    b = cross_entropy(torch.from_numpy(z + c), y).item()
    assert abs(a - b) < 1e-10


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(DataError):
        cross_entropy(torch.zeros(2, 3, dtype=torch.float64), [0, 3])


# ---------------------------------------------------------------- backward


def test_backward_square():
    x = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
    backward(x**2)
    assert x.grad.item() == 6.0


def test_backward_relu_at_negative():
    x = torch.tensor([-1.0, 2.0], dtype=torch.float64, requires_grad=True)
    backward(torch.relu(x).sum())
    assert x.grad.tolist() == [0.0, 1.0]


def test_relu_derivative_at_zero_is_zero():
    x = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    backward(torch.relu(x).sum())
    assert x.grad.tolist() == [0.0]


def test_backward_usage_errors():
    with pytest.raises(UsageError):
        backward(torch.zeros(2, dtype=torch.float64, requires_grad=True))
    with pytest.raises(UsageError):
        backward(torch.tensor(1.0, dtype=torch.float64))


def test_convnet_every_parameter_matches_finite_differences(rng):
    model = build_model("ConvNetS", (1, 8, 8), 3, seed=11)
    x = torch.from_numpy(rng.uniform(size=(2, 1, 8, 8)))
    y = [0, 2]
    model.zero_grad()
    backward(cross_entropy(forward(model, x), y))
    for name, p in model.params.items():
        fd = param_fd(model, lambda params: cross_entropy(forward(model, x, params), y), name)
        assert rel_err(p.grad.numpy(), fd) < 1e-4, name


# ---------------------------------------------------------------- sgd


def _one_param_model(value, grad):
    model = build_model("LinearProbe", (1, 1, 1), 1, zero=True)
    model.params = {"head.weight": torch.tensor([[value]], dtype=torch.float64, requires_grad=True)}
    model.params["head.weight"].grad = torch.tensor([[grad]], dtype=torch.float64)
    return model


def test_sgd_step_arithmetic():
    m = _one_param_model(1.0, 2.0)
    sgd_step(m, 0.1)
    assert abs(m.params["head.weight"].item() - 0.8) < 1e-15


def test_sgd_lr_zero_is_noop():
    m = _one_param_model(1.0, 2.0)
    sgd_step(m, 0.0)
    assert m.params["head.weight"].item() == 1.0


def test_two_steps_equal_one_double_step():
    a, b = _one_param_model(0.3, 0.7), _one_param_model(0.3, 0.7)
    sgd_step(a, 0.05)
    sgd_step(a, 0.05)
    sgd_step(b, 0.1)
    assert abs(a.params["head.weight"].item() - b.params["head.weight"].item()) < 1e-15


def test_sgd_without_grad_raises():
    model = build_model("LinearProbe", (1, 2, 2), 2)
    with pytest.raises(UsageError):
        sgd_step(model, 0.1)


# ---------------------------------------------------------------- flatten


def test_flatten_counts_entries():
    model = build_model("LinearProbe", (1, 1, 2), 2)
    model.params = {"a": torch.zeros(2, 2, dtype=torch.float64), "b": torch.zeros(3, dtype=torch.float64)}
    assert flatten_params(model).numel() == 7


@pytest.mark.parametrize("arch", ["ConvNetS", "MLP", "LinearProbe"])
def test_flatten_unflatten_round_trip(arch):
    model = build_model(arch, (1, 8, 8), 3, seed=2)
    flat = flatten_params(model)
    back = unflatten_params(model, flat)
    assert list(back) == list(model.params)
    assert all(torch.equal(back[k], model.params[k]) for k in back)


def test_same_seed_models_flatten_equal():
    a = flatten_params(build_model("ConvNetS", (1, 16, 16), 4, seed=7))
    b = flatten_params(build_model("ConvNetS", (1, 16, 16), 4, seed=7))
    assert torch.equal(a, b)


# ---------------------------------------------------------------- embed


def test_probe_embedding_is_flattened_input(rng):
    model = build_model("LinearProbe", (1, 4, 4), 3, seed=1)
    x = rng.uniform(size=(2, 1, 4, 4))
    assert np.array_equal(embed(model, x).detach().numpy(), x.reshape(2, -1))


def test_convnet_embedding_width():
    model = build_model("ConvNetS", (1, 16, 16), 4, seed=1)
    # 32 channels after two 2x pools of a 16x16 map
    assert embed(model, np.zeros((1, 1, 16, 16))).shape == (1, 32 * 4 * 4)


def test_zero_input_zero_bias_zero_embedding():
    model = build_model("MLP", (1, 4, 4), 3, seed=1)
    assert torch.count_nonzero(embed(model, np.zeros((2, 1, 4, 4)))) == 0


# ---------------------------------------------------------------- training + checkpoints


def test_training_is_deterministic(rng):
    x = rng.uniform(size=(20, 1, 8, 8))
    y = np.arange(20) % 2

    def run():
        m = build_model("ConvNetS", (1, 8, 8), 2, seed=3)
        train_sgd(m, x, y, epochs=2, lr=0.1, batch_size=8, rng=Rng(4))
        return model_hash(m)

    assert run() == run()


def test_checkpoint_round_trip(tmp_path):
    model = build_model("ConvNetDeep", (1, 16, 16), 4, seed=9)
    digest = save_model(model, tmp_path / "m.nnc")
    back = load_model(tmp_path / "m.nnc")
    assert back.arch == Arch.CONVNET_DEEP
    assert list(back.params) == list(model.params)
    assert all(torch.equal(back.params[k], model.params[k]) for k in back.params)
    assert model_hash(back) == digest


def test_checkpoint_size_arithmetic():
    model = build_model("LinearProbe", (1, 2, 2), 3)
    names = {"head.weight": 2, "head.bias": 1}
    expected = 4 + 1 + 8 + sum(2 + len(n) + 1 + 4 * rank for n, rank in names.items()) + 8 * (12 + 3)
    assert len(checkpoint_bytes(model)) == expected


def test_checkpoint_truncation_reports_offset():
    data = checkpoint_bytes(build_model("LinearProbe", (1, 2, 2), 3))
    with pytest.raises(DataFormatError, match="offset"):
        parse_model(data[:-5])
    with pytest.raises(DataFormatError):
        parse_model(b"XXXX" + data[4:])
