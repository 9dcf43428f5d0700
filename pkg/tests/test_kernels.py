import os
import subprocess
import sys

import numpy as np
import pytest

from odemerge import kernels
from odemerge._fallback import mlp_forward
from odemerge.params import ACTIVATIONS, ArchDescriptor
from odemerge.tasks import init_params

compiled = pytest.mark.skipif("compiled" not in kernels.BACKENDS, reason="extension not built")


def _problem(activation, n=300, sizes=(2, 16, 16, 4), seed=0):
    arch = ArchDescriptor.mlp(list(sizes), activation)
    rng = np.random.default_rng(seed)
    theta = init_params(arch, seed) + 0.1 * rng.standard_normal(arch.size)
    X = rng.standard_normal((n, sizes[0]))
    y = rng.integers(0, sizes[-1], n)
    return theta, X, y, arch.mlp_sizes(), ACTIVATIONS[activation]


@compiled
@pytest.mark.parametrize("activation", ["tanh", "relu"])
@pytest.mark.parametrize("n", [1, 63, 64, 65, 1024])
def test_backends_agree(activation, n):
    theta, X, y, sizes, act = _problem(activation, n)
    lp, gp = kernels.mlp_loss_grad(theta, X, y, sizes, act, backend="python")
    lc, gc = kernels.mlp_loss_grad(theta, X, y, sizes, act, backend="compiled")
    assert abs(lp - lc) <= 1e-12 * max(1.0, abs(lp))
    assert np.max(np.abs(gp - gc)) <= 1e-12 * max(1.0, np.max(np.abs(gp)))


@compiled
def test_backends_agree_deep_narrow():
    theta, X, y, sizes, act = _problem("tanh", 200, (3, 5, 7, 2, 3))
    lp, gp = kernels.mlp_loss_grad(theta, X, y, sizes, act, backend="python")
    lc, gc = kernels.mlp_loss_grad(theta, X, y, sizes, act, backend="compiled")
    assert np.allclose(gp, gc, rtol=0, atol=1e-13) and abs(lp - lc) < 1e-13


@pytest.mark.parametrize("backend", sorted(kernels.BACKENDS))
def test_loss_only_and_repeatable(backend):
    theta, X, y, sizes, act = _problem("tanh")
    l1, g1 = kernels.mlp_loss_grad(theta, X, y, sizes, act, backend=backend)
    l2, g2 = kernels.mlp_loss_grad(theta, X, y, sizes, act, backend=backend)
    l3, g3 = kernels.mlp_loss_grad(theta, X, y, sizes, act, want_grad=False, backend=backend)
    assert l1 == l2 == l3 and g3 is None and np.array_equal(g1, g2)


@pytest.mark.parametrize("backend", sorted(kernels.BACKENDS))
def test_zero_params_give_log_c(backend):
    _, X, y, sizes, act = _problem("tanh")
    loss, _ = kernels.mlp_loss_grad(np.zeros(ArchDescriptor.mlp(sizes).size), X, y, sizes, act, backend=backend)
    assert abs(loss - np.log(4)) < 1e-14


def test_forward_layout():
    # one linear layer: logits = X W + b with W stored row-major (n_in x n_out)
    W = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    b = np.array([0.5, -0.5, 0.0])
    X = np.array([[1.0, 1.0], [2.0, -1.0]])
    out = mlp_forward(np.concatenate([W.ravel(), b]), X, [2, 3], 0)[-1]
    assert np.array_equal(out, X @ W + b)


def test_unknown_backend():
    theta, X, y, sizes, act = _problem("tanh", 4)
    with pytest.raises(ValueError):
        kernels.mlp_loss_grad(theta, X, y, sizes, act, backend="gpu")


def test_env_selects_python_backend():
    code = "from odemerge import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, ODEMERGE_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
