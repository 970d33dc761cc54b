"""Blocks against the loop transcriptions in oracles.py, both BN modes."""

import numpy as np
import pytest

import oracles
from conftest import param_dict, randomize
from hgpe.blocks import ASA, CRA, GIG, IRB, LSAE, gn_groups
from hgpe.tensor import Tensor

N_INSTANCES = 20


def instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(2, 7, size=2))
    training = bool(seed % 2)
    return rng, n, h, w, training


def run(module, x, training):
    module.set_mode(training)
    return module(Tensor(x)).data


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_gig_matches_loops(seed):
    rng, n, h, w, training = instance(seed)
    c, k = int(rng.integers(1, 5)), int(rng.choice([3, 5, 7]))
    m = randomize(GIG(c, k), seed)
    p = param_dict(m)
    x = rng.standard_normal((n, c, h, w))
    got = run(m, x, training)
    np.testing.assert_allclose(got, oracles.gig(x, p, k, training), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_lsae_matches_loops(seed):
    rng, n, h, w, training = instance(seed)
    heads = int(rng.choice([1, 2]))
    c = heads * int(rng.integers(1, 4))
    window = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    m = randomize(LSAE(c, window, heads), seed)
    p = param_dict(m)
    x = rng.standard_normal((n, c, h, w))
    got = run(m, x, training)
    np.testing.assert_allclose(got, oracles.lsae(x, p, window, heads, training), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_asa_matches_loops(seed):
    rng, n, h, w, _ = instance(seed)
    c = int(rng.choice([1, 2, 4, 6, 20]))
    m = randomize(ASA(c), seed)
    p = param_dict(m)
    x = rng.standard_normal((n, c, h, w))
    got = run(m, x, False)
    np.testing.assert_allclose(got, oracles.asa(x, p, 3, gn_groups(c)), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_cra_matches_loops(seed):
    rng, n, h, w, _ = instance(seed)
    c = int(rng.integers(1, 40))
    m = randomize(CRA(c), seed)
    p = param_dict(m)
    x = rng.standard_normal((n, c, h, w))
    got = run(m, x, False)
    np.testing.assert_allclose(got, oracles.cra(x, p, m.kernel), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_irb_matches_loops(seed):
    rng, n, h, w, training = instance(seed)
    cin = int(rng.integers(1, 4))
    cout = cin if seed % 3 else int(rng.integers(1, 4))
    stride = 2 if seed % 4 == 0 else 1
    t = int(rng.integers(1, 4))
    m = randomize(IRB(cin, cout, t, stride), seed)
    p = param_dict(m)
    x = rng.standard_normal((n, cin, h, w))
    got = run(m, x, training)
    expect = oracles.irb(x, p, stride, m.residual, training)
    np.testing.assert_allclose(got, expect, rtol=0, atol=1e-10)
