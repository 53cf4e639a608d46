import gzip
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from blockadmm.core import build_topology
from blockadmm.problems import (LibsvmFormatError, LocalDataset, LossOracle, Regularizer,
                                load_libsvm, make_problem)
from blockadmm.reference import solve_reference
from blockadmm.synthetic import generate_synthetic

from oracles import central_diff, logistic_mp, logistic_naive, prox_grid


def one_sample(a, y=1.0, kind="logistic", dims=None):
    dims = dims or [1] * len(a)
    top = build_topology({(0, j) for j in range(len(dims))}, dims)
    return LossOracle(kind, LocalDataset(sp.csr_matrix([a]), [y]), top)


def random_instance(rng, m, d, kind, density=0.7):
    A = rng.standard_normal((m, d)) * (rng.random((m, d)) < density)
    A[np.arange(m), rng.integers(d, size=m)] = rng.standard_normal(m)
    y = np.where(rng.random(m) < 0.5, -1.0, 1.0) if kind == "logistic" else rng.standard_normal(m)
    dims = [1] * d
    top = build_topology({(0, j) for j in range(d)}, dims)
    return LossOracle(kind, LocalDataset(sp.csr_matrix(A), y), top), A, y


def test_logistic_at_zero_is_log2():
    f = one_sample([1.0, 0.0])
    assert f.value(np.zeros(2)) == pytest.approx(math.log(2), abs=1e-15)


def test_logistic_large_margin_matches_mpmath():
    f = one_sample([1.0, 0.0])
    val = f.value(np.array([1e4, 0.0]))
    exact = float(logistic_mp([1.0, 0.0], 1, [1e4, 0.0]))
    assert math.isfinite(val)
    assert val == pytest.approx(exact, abs=1e-300)
    neg = f.value(np.array([-1e4, 0.0]))
    assert neg == pytest.approx(float(logistic_mp([1.0, 0.0], 1, [-1e4, 0.0])), rel=1e-14)


def test_logistic_matches_naive_loop():
    rng = np.random.default_rng(1)
    f, A, y = random_instance(rng, 2, 4, "logistic")
    x = rng.standard_normal(4)
    assert f.value(x) == pytest.approx(logistic_naive(A, y, x), abs=1e-12)


def test_hand_block_gradient():
    f = one_sample([1.0, 0.0])
    assert f.block_gradient(np.zeros(2), 0) == pytest.approx([-0.5])
    assert f.block_gradient(np.zeros(2), 1) == pytest.approx([0.0])
    with pytest.raises(KeyError):
        f.block_gradient(np.zeros(2), 7)
    with pytest.raises(ValueError):
        f.value(np.zeros(3))


@pytest.mark.parametrize("kind", ["logistic", "least-squares"])
def test_gradient_vs_finite_differences(kind):
    rng = np.random.default_rng(5)
    for _ in range(10):
        f, _, _ = random_instance(rng, 6, 5, kind)
        x = rng.standard_normal(5)
        for j in range(5):
            g = f.block_gradient(x, j)
            fd = central_diff(f.value, x, [j])
            assert np.allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_block_gradient_is_slice_of_full():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((7, 6))
    top = build_topology({(0, 0), (0, 1), (0, 2)}, [1, 2, 3])
    f = LossOracle("logistic", LocalDataset(sp.csr_matrix(A), np.sign(rng.standard_normal(7))),
                   top)
    x = rng.standard_normal(6)
    full = f.gradient(x)
    for j in range(3):
        assert np.allclose(f.block_gradient(x, j), full[top.block_slice(j)], atol=1e-15)


def test_permutation_invariance():
    rng = np.random.default_rng(3)
    f, A, y = random_instance(rng, 9, 4, "logistic")
    perm = rng.permutation(9)
    g = LossOracle("logistic", LocalDataset(sp.csr_matrix(A[perm]), y[perm]), f.topology)
    x = rng.standard_normal(4)
    assert g.value(x) == pytest.approx(f.value(x), rel=1e-14)


def test_prox_examples():
    assert np.array_equal(Regularizer("none", 0.0).prox(np.array([1.5, -2.0]), 1.0), [1.5, -2.0])
    assert Regularizer("ell1", 0.6).prox(np.array([1.0]), 2.0)[0] == pytest.approx(0.7)
    clipped = Regularizer("ell1", 0.6, 0.5).prox(np.array([1.0]), 2.0)[0]
    assert clipped == pytest.approx(0.5)
    assert clipped == pytest.approx(prox_grid(1.0, 0.6, 2.0, 0.5), abs=1e-6)
    with pytest.raises(ValueError):
        Regularizer("ell1", 0.6).prox(np.array([1.0]), 0.0)


@settings(max_examples=200, deadline=None)
@given(v=st.floats(-5, 5), lam=st.floats(0, 3), mu=st.floats(0.1, 10), clip=st.floats(0.05, 6))
def test_prox_matches_grid(v, lam, mu, clip):
    out = Regularizer("ell1", lam, clip).prox(np.array([v]), mu)[0]
    assert abs(out - prox_grid(v, lam, mu, clip)) <= 1e-3


@settings(max_examples=200, deadline=None)
@given(a=st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
       b=st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
       lam=st.floats(0, 10), mu=st.floats(0.01, 100), clip=st.floats(0.1, 1e4))
def test_prox_nonexpansive(a, b, lam, mu, clip):
    reg = Regularizer("ell1", lam, clip)
    a, b = np.array(a), np.array(b)
    assert np.linalg.norm(reg.prox(a, mu) - reg.prox(b, mu)) <= np.linalg.norm(a - b) + 1e-9


def test_subdiff_distance_closed_form():
    reg = Regularizer("ell1", 1.0, 2.0)
    z = np.array([0.0, 0.0, 1.0, 2.0, -2.0])
    v = np.array([0.5, -1.5, 0.2, 3.0, -0.5])
    assert np.allclose(reg.subdiff_distance(z, v), [0.0, 0.5, 0.8, 0.0, 0.5])


def test_lipschitz_examples():
    f = one_sample([2.0, 0.0])
    assert f.block_lipschitz(0) == pytest.approx(1.0, rel=1e-6)
    assert f.block_lipschitz(1) == 0.0


def test_lipschitz_vs_eigvalsh():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((5, 3))
    top = build_topology({(0, 0)}, [3])
    for kind, scale in (("logistic", 0.25), ("least-squares", 1.0)):
        f = LossOracle(kind, LocalDataset(sp.csr_matrix(A), np.ones(5)), top)
        exact = scale * np.linalg.eigvalsh(A.T @ A)[-1] / 5
        assert f.block_lipschitz(0) == pytest.approx(exact, rel=1e-3)


SIX_LINES = """\
+1 1:0.5 2:1
-1 3:2
0 5:1
+1 4:1 5:-1
-1 2:3
+1 1:1
"""


def test_libsvm_six_line_edges(tmp_path):
    path = tmp_path / "six.svm"
    path.write_text(SIX_LINES)
    top, data, block_map = load_libsvm(path, num_shards=2, block_width=2)
    assert top.edges == {(0, 0), (0, 2), (1, 0), (1, 1), (1, 2)}
    assert block_map == {0: (0, 2), 1: (2, 4), 2: (4, 5)}
    assert [d.m for d in data] == [3, 3]
    assert list(data[0].labels) == [1.0, -1.0, -1.0]


def test_libsvm_round_robin_and_edges(tmp_path):
    path = tmp_path / "two.svm"
    path.write_text("+1 1:1 2:1\n-1 3:1\n")
    top, data, _ = load_libsvm(path, num_shards=2, block_width=2)
    assert [d.m for d in data] == [1, 1]
    assert top.blocks_of(0) == (0,)


def test_libsvm_drops_empty_ranges(tmp_path):
    path = tmp_path / "gap.svm"
    path.write_text("+1 1:1 7:2\n-1 2:1\n")
    top, data, block_map = load_libsvm(path, num_shards=1, block_width=2)
    assert block_map == {0: (0, 2), 1: (6, 7)}
    assert top.block_dims == (2, 1)
    assert data[0].features.toarray().tolist() == [[1, 0, 2], [0, 1, 0]]


def test_libsvm_gzip(tmp_path):
    path = tmp_path / "six.svm.gz"
    with gzip.open(path, "wt") as fh:
        fh.write(SIX_LINES)
    top, _, _ = load_libsvm(path, num_shards=2, block_width=2)
    assert len(top.edges) == 5


@pytest.mark.parametrize("text, msg", [
    ("+1 1:1\n+1 3:1 2:1\n", "line 2: indices not ascending"),
    ("+1 1:1\n2 1:1\n", "line 2: label"),
    ("+1 1:x\n", "line 1: malformed"),
    ("+1 0:1\n", "line 1: malformed"),
])
def test_libsvm_errors(tmp_path, text, msg):
    path = tmp_path / "bad.svm"
    path.write_text(text)
    with pytest.raises(LibsvmFormatError, match=msg):
        load_libsvm(path, 1, 2)


def test_synthetic_deterministic_and_dense():
    a = generate_synthetic(2, 1, 4, 5, density=1.0, seed=9)
    b = generate_synthetic(2, 1, 4, 5, density=1.0, seed=9)
    assert np.array_equal(a.truth, b.truth)
    for da, db in zip(a.datasets, b.datasets):
        assert (da.features != db.features).nnz == 0
        assert da.features.nnz == 20


def test_planted_model_recovered():
    inst = generate_synthetic(2, 4, 5, 25, density=1.0, noise=0.0, seed=21)
    x = solve_reference(inst.problem(lam=1e-6))
    assert np.max(np.abs(x - inst.truth)) < 1e-3


def test_zero_gradient_on_non_edges():
    inst = generate_synthetic(4, 4, 2, 10, seed=1, blocks_per_worker=2)
    prob = inst.problem()
    x = np.random.default_rng(0).standard_normal(prob.topology.dim)
    for i, f in enumerate(prob.losses):
        for j in range(4):
            if (i, j) not in prob.topology.edges:
                assert not f.block_gradient(x, j).any()


def test_make_problem_regularizer_kind():
    inst = generate_synthetic(1, 1, 2, 4, seed=0)
    assert make_problem("least-squares", inst.datasets, inst.topology).reg.kind == "none"
    assert make_problem("least-squares", inst.datasets, inst.topology, lam=0.1).reg.kind == "ell1"
