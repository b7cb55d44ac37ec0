import itertools

import numpy as np
import pytest

from kzpeps.tensor import ContractionError, ZeroTensorError, contract, orthogonalize, svd_truncate


def test_identity_contraction():
    out = contract(np.eye(2), np.array([1.0, 2.0]), [(1, 0)])
    np.testing.assert_allclose(out, [1.0, 2.0])


def test_full_self_contraction_is_norm(rng):
    t = rng.normal(size=(3, 4, 2)) + 1j * rng.normal(size=(3, 4, 2))
    val = contract(t, t.conj(), [(0, 0), (1, 1), (2, 2)])
    assert abs(val - np.linalg.norm(t) ** 2) < 1e-12


def test_contraction_against_loops(rng):
    a = rng.normal(size=(3, 4, 2))
    b = rng.normal(size=(4, 2, 5))
    out = contract(a, b, [(1, 0), (2, 1)])
    ref = np.zeros((3, 5))
    for i, l, j, k in itertools.product(range(3), range(5), range(4), range(2)):
        ref[i, l] += a[i, j, k] * b[j, k, l]
    assert np.max(np.abs(out - ref)) < 1e-12


def test_contraction_mismatch():
    with pytest.raises(ContractionError, match=r"\(0, 0\)"):
        contract(np.ones((2, 3)), np.ones((3, 2)), [(0, 0)])


def test_svd_diagonal():
    r = svd_truncate(np.diag([3.0, 2.0, 1.0]), [0], max_rank=2)
    np.testing.assert_allclose(r.singular_values, [3.0, 2.0])
    assert r.truncation_error == pytest.approx(1 / 6)


def test_svd_isometry_no_error(rng):
    q, _ = np.linalg.qr(rng.normal(size=(6, 4)))
    r = svd_truncate(q, [0], max_rank=6)
    assert r.truncation_error == 0.0


def test_svd_discarded_norm_matches_best_approx(rng):
    m = rng.normal(size=(8, 8))
    r = svd_truncate(m, [0], max_rank=3)
    u, s, vh = np.linalg.svd(m)
    best = (u[:, :3] * s[:3]) @ vh[:3]
    dist = np.linalg.norm(m - best)
    assert r.discarded_norm == pytest.approx(dist, rel=1e-10)
    assert np.linalg.norm(m - r.reconstruct()) == pytest.approx(dist, rel=1e-10)


def test_svd_factors_isometric(rng):
    t = rng.normal(size=(3, 4, 5)) + 1j * rng.normal(size=(3, 4, 5))
    r = svd_truncate(t, [0, 2], max_rank=4)
    L = r.left.reshape(-1, r.rank)
    R = r.right.reshape(r.rank, -1)
    assert np.allclose(L.conj().T @ L, np.eye(r.rank), atol=1e-10)
    assert np.allclose(R @ R.conj().T, np.eye(r.rank), atol=1e-10)
    assert np.all(np.diff(r.singular_values) <= 0)


def test_svd_zero_tensor():
    with pytest.raises(ZeroTensorError):
        svd_truncate(np.zeros((2, 2)), [0])


def test_orthogonalize_isometry_input(rng):
    q, _ = np.linalg.qr(rng.normal(size=(4, 2)))
    iso, rem = orthogonalize(q, [0])
    assert np.max(np.abs(np.abs(rem) - np.eye(2))) < 1e-10


def test_orthogonalize_reconstruction(rng):
    m = rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2))
    iso, rem = orthogonalize(m, [0])
    assert np.max(np.abs(iso @ rem - m)) < 1e-12
    assert np.allclose(iso.conj().T @ iso, np.eye(2), atol=1e-12)
