import types

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchverb.matrices import (DESIGNS, SinkhornDivergenceError,
                                assemble_feedback, closest_unilossless,
                                householder_block, sinkhorn_balance,
                                specular_permutation, uniform_block)


# ---------------------------------------------------------------------------
# specular permutation


def test_perm_dominant_diagonal():
    block = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert specular_permutation(block).tolist() == [0, 1]


def test_perm_is_greedy_not_optimal():
    # Greedy grabs 0.9 first and is left with 0.1; the optimal assignment
    # (0.8 + 0.85) is deliberately not what this routine computes.
    block = np.array([[0.9, 0.8], [0.85, 0.1]])
    assert specular_permutation(block).tolist() == [0, 1]


def test_perm_degenerate():
    assert specular_permutation(np.array([[3.0]])).tolist() == [0]
    assert specular_permutation(np.zeros((3, 3))).tolist() == [0, 1, 2]
    # ties resolve toward low row, then low column
    assert specular_permutation(np.full((2, 2), 0.5)).tolist() == [0, 1]


def test_perm_rejects_rectangular():
    with pytest.raises(ValueError):
        specular_permutation(np.zeros((2, 3)))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_perm_is_bijection(seed, m):
    rng = np.random.default_rng(seed)
    block = rng.random((m, m)) * rng.integers(0, 2, size=(m, m))
    perm = specular_permutation(block)
    assert sorted(perm.tolist()) == list(range(m))


# ---------------------------------------------------------------------------
# block constructions


def test_householder_entries():
    b = householder_block(np.arange(4))
    assert np.array_equal(b, np.where(np.eye(4, dtype=bool), -0.5, 0.5))
    assert np.array_equal(b.T @ b, np.eye(4))  # exact for power-of-two sizes


def test_householder_small():
    assert householder_block(np.array([0, 1])).tolist() == [[0.0, 1.0], [1.0, 0.0]]
    assert householder_block(np.array([0])).tolist() == [[1.0]]


def test_householder_orthogonal_any_size():
    for m in (3, 5, 7, 11):
        perm = np.random.default_rng(m).permutation(m)
        b = householder_block(perm)
        np.testing.assert_allclose(b.T @ b, np.eye(m), atol=1e-14)


def test_uniform_entries():
    b = uniform_block(np.arange(5), 0.25)
    assert np.array_equal(b, np.where(np.eye(5, dtype=bool), 0.75, 0.0625))
    np.testing.assert_allclose(b.sum(axis=0), 1.0, atol=1e-15)
    np.testing.assert_allclose(b.sum(axis=1), 1.0, atol=1e-15)


def test_uniform_limits():
    perm = np.array([2, 0, 1])
    pure = uniform_block(perm, 0.0)
    expect = np.zeros((3, 3))
    expect[np.arange(3), perm] = 1.0
    assert np.array_equal(pure, expect)

    diffuse = uniform_block(perm, 1.0)
    assert np.array_equal(diffuse, np.where(expect > 0, 0.0, 0.5))

    assert uniform_block(np.array([0]), 0.7).tolist() == [[1.0]]


# ---------------------------------------------------------------------------
# Sinkhorn balancing


def test_sinkhorn_2x2_fixed_point():
    balanced, e1, e2 = sinkhorn_balance(np.array([[1.0, 2.0], [3.0, 4.0]]))
    # closed form for 2x2: top-left goes to sqrt(ad) / (sqrt(ad) + sqrt(bc))
    x = 2.0 / (2.0 + np.sqrt(6.0))
    np.testing.assert_allclose(balanced, [[x, 1 - x], [1 - x, x]], atol=1e-9)
    np.testing.assert_allclose(balanced.sum(axis=0), 1.0, atol=1e-10)
    np.testing.assert_allclose(balanced.sum(axis=1), 1.0, atol=1e-10)


def test_sinkhorn_reconstruction_and_gauge():
    rng = np.random.default_rng(11)
    a = rng.random((6, 6)) + 0.05
    balanced, e1, e2 = sinkhorn_balance(a)
    np.testing.assert_allclose(np.diag(e1) @ a @ np.diag(e2), balanced, atol=1e-12)
    # the gauge pins the two scaling vectors to a common geometric mean
    g1 = np.exp(np.mean(np.log(e1)))
    g2 = np.exp(np.mean(np.log(e2)))
    assert g1 == pytest.approx(g2, rel=1e-10)


def test_sinkhorn_fixed_point_of_doubly_stochastic():
    ds = uniform_block(np.arange(4), 0.3)
    balanced, e1, e2 = sinkhorn_balance(ds)
    np.testing.assert_allclose(balanced, ds, atol=1e-12)
    np.testing.assert_allclose(e1, 1.0, atol=1e-10)
    np.testing.assert_allclose(e2, 1.0, atol=1e-10)


def test_sinkhorn_support_deficient():
    # the (0,0) entry sits on no positive diagonal, so balancing cannot settle
    with pytest.raises(SinkhornDivergenceError, match="no total support"):
        sinkhorn_balance(np.array([[0.5, 0.5], [1.0, 0.0]]))


def test_sinkhorn_zero_column():
    with pytest.raises(SinkhornDivergenceError, match="zero row or column"):
        sinkhorn_balance(np.array([[1.0, 0.0], [2.0, 0.0]]))


def test_sinkhorn_rejects_negative():
    with pytest.raises(ValueError):
        sinkhorn_balance(np.array([[1.0, -0.1], [0.5, 1.0]]))


# ---------------------------------------------------------------------------
# closest orthogonal magnitude match


def test_unilossless_identity():
    b, res = closest_unilossless(np.eye(3))
    assert res < 1e-12
    np.testing.assert_allclose(np.abs(b), np.eye(3), atol=1e-12)


def test_unilossless_flat_2x2():
    b, res = closest_unilossless(np.full((2, 2), 0.5))
    assert res < 1e-9
    np.testing.assert_allclose(np.abs(b), np.sqrt(0.5), atol=1e-9)
    np.testing.assert_allclose(b.T @ b, np.eye(2), atol=1e-12)
    assert (b < 0).any()  # a sign flip is what makes the flat target reachable


def test_unilossless_permutation_target():
    target = np.zeros((3, 3))
    target[[0, 1, 2], [1, 2, 0]] = 1.0
    b, res = closest_unilossless(target)
    assert res < 1e-12
    np.testing.assert_allclose(np.abs(b), target, atol=1e-12)


def test_unilossless_residual_is_self_consistent():
    rng = np.random.default_rng(5)
    for _ in range(10):
        raw = rng.random((5, 5)) + 0.02
        target, _, _ = sinkhorn_balance(raw)
        b, res = closest_unilossless(target)
        assert np.abs(b.T @ b - np.eye(5)).max() < 1e-9
        assert res == pytest.approx(np.linalg.norm(np.abs(b) - np.sqrt(target)), abs=1e-12)


def test_unilossless_deterministic():
    target, _, _ = sinkhorn_balance(np.random.default_rng(3).random((6, 6)) + 0.1)
    b1, r1 = closest_unilossless(target, seed=42)
    b2, r2 = closest_unilossless(target, seed=42)
    assert np.array_equal(b1, b2) and r1 == r2


# ---------------------------------------------------------------------------
# assembly


@pytest.mark.parametrize("design", DESIGNS)
def test_assemble_hallway(design, hallway_coarse):
    patches, _, kern = hallway_coarse
    fb = assemble_feedback(kern, patches, design, seed=0)
    assert fb.design == design
    assert len(fb.blocks) == 6
    for blk in fb.blocks:
        assert blk.matrix.shape == (5, 5)
        assert sorted(blk.perm.tolist()) == list(range(5))
        assert blk.orthogonality_error < 1e-9
        if design == "sinkhorn":
            assert blk.comp_in.shape == (5,) and np.all(blk.comp_in > 0)
            assert blk.comp_out.shape == (5,) and np.all(blk.comp_out > 0)
        else:
            assert blk.comp_in is None and blk.comp_out is None
    assert fb.max_orthogonality_error() < 1e-9


def test_assemble_reports_offending_patch():
    kern = types.SimpleNamespace(blocks=[np.eye(2), np.array([[0.5, 0.5], [1.0, 0.0]])])
    with pytest.raises(SinkhornDivergenceError, match="patch 1: no total support"):
        assemble_feedback(kern, None, "sinkhorn")


def test_assemble_unknown_design():
    with pytest.raises(ValueError, match="unknown design"):
        assemble_feedback(types.SimpleNamespace(blocks=[]), None, "hadamard")
