import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_molecules
from aica.engine import SimConfig, run_serial
from aica.forces import (ForceAccumulator, OverlapError, PairPotential, block_pairs, flatten_lists,
                         lj_pair, real_real_pass)
from aica.meshgen import hex_box
from aica.oracle import minimum_image_forces

POT = PairPotential()
# 4 * (2.5**-12 - 2.5**-6), evaluated separately with mpmath at 30 digits
SHIFT_2_5 = -0.016316891136
R_MIN = 2.0 ** (1.0 / 6.0)


def test_shift_value():
    assert POT.shift == pytest.approx(SHIFT_2_5, abs=1e-12)


def test_minimum_energy_and_zero_force():
    f, u = lj_pair([R_MIN, 0, 0], POT)
    assert u == pytest.approx(-1.0 - SHIFT_2_5, abs=1e-12)
    np.testing.assert_allclose(f, 0.0, atol=1e-12)


def test_energy_vanishes_at_cutoff_force_does_not():
    u, fr = POT.energy_force(np.array([2.5 ** 2 * (1 - 1e-15)]))
    assert abs(u[0]) < 1e-12
    assert fr[0] * 2.5 == pytest.approx(24 * (2 * 2.5 ** -13 - 2.5 ** -7), rel=1e-9)
    f, u = lj_pair([2.5, 0, 0], POT)
    assert u == 0.0 and not f.any()


@settings(max_examples=100, deadline=None)
@given(st.floats(0.9, 2.4))
def test_force_is_minus_energy_gradient(r):
    h = 1e-6
    up, _ = POT.energy_force(np.array([(r + h) ** 2]))
    um, _ = POT.energy_force(np.array([(r - h) ** 2]))
    _, fr = POT.energy_force(np.array([r * r]))
    assert fr[0] * r == pytest.approx(-(up[0] - um[0]) / (2 * h), rel=1e-6)


def test_repulsive_force_direction():
    f, _ = lj_pair([1.0, 0, 0], POT)
    assert f[0] > 0


def test_overlap_is_an_error():
    with pytest.raises(OverlapError):
        lj_pair([1e-8, 0, 0], POT)


def test_block_pairs_matches_enumeration():
    sa, na = np.array([0, 5, 9]), np.array([2, 0, 3])
    sb, nb = np.array([10, 3, 20]), np.array([3, 4, 1])
    a, b = block_pairs(sa, na, sb, nb)
    want = [(s + i, t + j) for s, n, t, m in zip(sa, na, sb, nb)
            for i, j in itertools.product(range(n), range(m))]
    assert list(zip(a.tolist(), b.tolist())) == want


def test_flatten_lists():
    i, j = flatten_lists([[1, 2], [], [0]])
    assert i.tolist() == [0, 0, 2] and j.tolist() == [1, 2, 0]


def test_real_real_pass_all_pairs_and_third_law():
    rng = np.random.default_rng(3)
    pos = rng.uniform(0, 4, size=(60, 3))
    cells = np.sort(rng.integers(0, 4, size=60))
    # every cell interacts with every later cell
    dil_i, dil_j = flatten_lists([[j for j in range(4) if j > i] for i in range(4)])
    acc = real_real_pass(dil_i, dil_j, 4, pos, cells, POT, ForceAccumulator.zeros(60))
    F = np.zeros((60, 3))
    E = 0.0
    n_in = 0
    for a, b in itertools.combinations(range(60), 2):
        f, u = lj_pair(pos[a] - pos[b], POT)
        F[a] += f
        F[b] -= f
        E += u
        n_in += u != 0.0 or np.any(f)
    np.testing.assert_allclose(acc.forces, F, rtol=1e-12, atol=1e-12 * np.abs(F).max())
    assert acc.energy.sum() == pytest.approx(E, rel=1e-12)
    assert acc.pair_count == n_in
    np.testing.assert_allclose(acc.forces.sum(axis=0), 0.0, atol=1e-10 * np.abs(F).max())


def test_overlap_names_molecules():
    pos = np.array([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5 + 1e-9]])
    cells = np.zeros(2, np.int64)
    with pytest.raises(OverlapError, match="molecules 7 and 9"):
        real_real_pass(np.zeros(0, np.int64), np.zeros(0, np.int64), 1, pos, cells, POT,
                       ForceAccumulator.zeros(2), ids=np.array([7, 9]))


@pytest.mark.parametrize("grading", [1.0, 1.5])
def test_full_force_field_matches_oracle(grading):
    L = 7.0
    m = hex_box(4, L, "xyz", grading=grading)
    mols = random_molecules(m, 150, seed=11, min_sep=0.7)
    res = run_serial(m, SimConfig(steps=0), mols)
    F, E, npair = minimum_image_forces(res.molecules.positions, np.full(3, L))
    err = np.linalg.norm(res.forces - F, axis=1) / np.linalg.norm(F, axis=1)
    assert err.max() < 1e-10
    row = res.rows[0]
    assert row["pe_per_mol"] * 150 == pytest.approx(E.sum(), rel=1e-12)
    # each real-referred pair is seen from both sides, real-real pairs once
    assert row["pair_count"] + row["referred_pair_count"] / 2 == npair


def test_oracle_rejects_small_box():
    with pytest.raises(ValueError):
        minimum_image_forces(np.zeros((2, 3)), [4.0, 4.0, 4.0])
