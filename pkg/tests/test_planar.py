import numpy as np
import opt_einsum as oe
import pytest

from kzpeps.planar import BoundaryMps, StripEnv, mps_overlap, strip_value, trivial_mps, zipper_advance


def _grid(rng, nx, ny, D, p=None):
    """Random single-layer planar grid; boundary legs have dimension 1."""
    rows = []
    for y in range(ny):
        row = []
        for x in range(nx):
            shape = [
                D if x > 0 else 1,
                D if x < nx - 1 else 1,
                D if y > 0 else (p or 1),
                D if y < ny - 1 else (p or 1),
            ]
            a = rng.normal(size=shape) + 1j * rng.normal(size=shape)
            row.append([(a, [])])
        rows.append(row)
    return rows


def _dense(rows, open_bottom=False, open_top=False):
    """Brute-force contraction; open outer legs are returned in column order."""
    nx, ny = len(rows[0]), len(rows)
    labels = {}

    def lab(key):
        return labels.setdefault(key, oe.get_symbol(len(labels)))

    arrays, subs = [], []
    for y in range(ny):
        for x in range(nx):
            arrays.append(rows[y][x][0][0])
            # left, right, down, up bonds
            subs.append(lab(("h", x, y)) + lab(("h", x + 1, y)) + lab(("v", x, y)) + lab(("v", x, y + 1)))
    out = ""
    if open_bottom:
        out += "".join(lab(("v", x, 0)) for x in range(nx))
    if open_top:
        out += "".join(lab(("v", x, ny)) for x in range(nx))
    return oe.contract(",".join(subs) + "->" + out, *arrays)


def _mps_dense(mps: BoundaryMps):
    t = mps.tensors[0]
    for nxt in mps.tensors[1:]:
        t = np.tensordot(t, nxt, axes=(t.ndim - 1, 0))
    return t.reshape(-1) * np.exp(mps.log_scale)


def test_strip_value_matches_dense(rng):
    rows = _grid(rng, 3, 3, 2)
    val, log = strip_value(rows, trivial_mps(3, 1), trivial_mps(3, 1))
    ref = _dense(rows)
    assert abs(complex(val) * np.exp(log) - ref) < 1e-10 * abs(ref)


def test_zipper_exact_matches_dense_row(rng):
    rows = _grid(rng, 4, 2, 2)
    mps = zipper_advance(trivial_mps(4, 1), rows[0], None, from_top=False)
    mps = zipper_advance(mps, rows[1], None, from_top=False)
    # with two rows of four the final top legs have dimension one; compare the scalar
    ref = _dense(rows)
    got = _mps_dense(mps)
    assert got.size == 1
    assert abs(got[0] - ref) < 1e-10 * abs(ref)


def test_zipper_open_legs_match_dense(rng):
    rows = _grid(rng, 4, 3, 2)
    bnd = trivial_mps(4, 1)
    for y in range(2):
        bnd = zipper_advance(bnd, rows[y], 64, from_top=False)
    ref = _dense(rows[:2], open_top=True).reshape(-1)
    got = _mps_dense(bnd)
    assert np.max(np.abs(got - ref)) < 1e-10 * np.max(np.abs(ref))
    assert bnd.trunc_error < 1e-12 and bnd.center == 3


def test_zipper_from_top_matches_dense(rng):
    rows = _grid(rng, 3, 3, 2)
    bnd = trivial_mps(3, 1)
    for y in (2, 1):
        bnd = zipper_advance(bnd, rows[y], None, from_top=True)
    ref = _dense(rows[1:], open_bottom=True).reshape(-1)
    got = _mps_dense(bnd)
    assert np.max(np.abs(got - ref)) < 1e-10 * np.max(np.abs(ref))


def test_identity_row_keeps_boundary(rng):
    rows = _grid(rng, 4, 2, 2)
    bnd = zipper_advance(trivial_mps(4, 1), rows[0], None, from_top=False)
    ident = [[(np.eye(2).reshape(1, 1, 2, 2), [])] for _ in range(4)]
    out = zipper_advance(bnd, ident, 16, from_top=False)
    a, b = _mps_dense(bnd), _mps_dense(out)
    ov = abs(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))
    assert ov == pytest.approx(1.0, abs=1e-10)
    assert np.linalg.norm(a - b) < 1e-10 * np.linalg.norm(a)


def test_overlap_grows_with_chi():
    rng = np.random.default_rng(7)
    rows = _grid(rng, 6, 3, 3)
    exact = trivial_mps(6, 1)
    for y in range(2):
        exact = zipper_advance(exact, rows[y], None, from_top=False)
    ref = _mps_dense(exact)
    fids = []
    for chi in (2, 4, 8):
        bnd = trivial_mps(6, 1)
        for y in range(2):
            bnd = zipper_advance(bnd, rows[y], chi, from_top=False)
        got = _mps_dense(bnd)
        fids.append(abs(np.vdot(ref, got)) / (np.linalg.norm(ref) * np.linalg.norm(got)))
    assert fids[0] <= fids[1] + 1e-12 <= fids[2] + 2e-12
    assert fids[0] < 1 - 1e-6


def test_mps_overlap_and_strip_env(rng):
    rows = _grid(rng, 3, 4, 2)
    bot = trivial_mps(3, 1)
    for y in range(2):
        bot = zipper_advance(bot, rows[y], None, from_top=False)
    top = trivial_mps(3, 1)
    for y in (3, 2):
        top = zipper_advance(top, rows[y], None, from_top=True)
    ref = _dense(rows)
    assert abs(mps_overlap(bot, top) - ref) < 1e-10 * abs(ref)
    env = StripEnv([rows[2]], bot, zipper_advance(trivial_mps(3, 1), rows[3], None, from_top=True))
    val, log = env.value(1, [None])
    assert abs(complex(val) * np.exp(log) - ref) < 1e-10 * abs(ref)
