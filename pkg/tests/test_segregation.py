"""Coupling continuation, segregation measures, partition extraction, and
interface/nodal diagnostics."""

import math
import warnings

import numpy as np
import pytest

from yamabe.constants import sphere_volume
from yamabe.errors import DegeneratePartitionError, DomainError, ShapeError
from yamabe.mesh import (
    assemble_forms,
    build_dumbbell_sphere,
    build_round_sphere,
)
from yamabe.segregation import (
    LambdaSchedule,
    continue_lambda,
    equation_residual,
    extract_partition,
    holder_estimate,
    interface_diagnostics,
    nodal_solution,
    overlap_measure,
    pair_swap_reflection,
    segregation_integral,
    support_energy,
    threshold_check_m10,
)


def _sphere_forms(n=64, m=3):
    return assemble_forms(build_round_sphere(m, n))


@pytest.fixture(scope="module")
def dumbbell_forms():
    mesh = build_dumbbell_sphere(3, 256, neck=4.0, waist=0.3, taper=0.8,
                                 well_depth=5.0, well_radius=0.9)
    return assemble_forms(mesh)


@pytest.fixture(scope="module")
def chain(dumbbell_forms):
    """Short two-component continuation on the pinched dumbbell: a mirror
    pair of polar bumps driven through five geometric coupling steps."""
    forms = dumbbell_forms
    theta = forms.mesh.theta
    bump = np.exp(-(theta / 0.8) ** 2) + 1e-4
    u0 = np.vstack([bump, bump[::-1]])
    schedule = LambdaSchedule(-1.0, 4.0, 5)
    return continue_lambda(u0, schedule, forms,
                           symmetrize=pair_swap_reflection)


# ---------------------------------------------------------------------------
# schedule

def test_schedule_values_geometric():
    sched = LambdaSchedule(-2.0, 3.0, 4)
    assert np.allclose(sched.values, [-2.0, -6.0, -18.0, -54.0])


def test_schedule_validation():
    with pytest.raises(DomainError):
        LambdaSchedule(lambda0=0.0)
    with pytest.raises(DomainError):
        LambdaSchedule(ratio=1.0)
    with pytest.raises(DomainError):
        LambdaSchedule(steps=0)


# ---------------------------------------------------------------------------
# segregation measures

def test_segregation_integral_constant_fields():
    forms = _sphere_forms()
    u = np.ones((2, forms.mesh.n_nodes))
    seg = segregation_integral(u, -1.0, forms)
    assert seg[0, 0] == 0.0 and seg[1, 1] == 0.0
    assert seg[0, 1] == pytest.approx(-sphere_volume(3), rel=1e-8)
    assert seg[0, 1] == seg[1, 0]


def test_segregation_integral_disjoint_supports():
    forms = _sphere_forms()
    n = forms.mesh.n_nodes
    u = np.zeros((2, n))
    u[0, : n // 2 - 1] = 1.0
    u[1, n // 2 + 1:] = 1.0  # one-node gap: supports share no cell
    seg = segregation_integral(u, -7.0, forms)
    assert np.all(seg == 0.0)


def test_segregation_integral_coupling_shape_guard():
    forms = _sphere_forms()
    u = np.ones((2, forms.mesh.n_nodes))
    with pytest.raises(ShapeError):
        segregation_integral(u, np.zeros((3, 3)), forms)


def test_overlap_measure_single_component_is_zero():
    forms = _sphere_forms()
    u = np.ones(forms.mesh.n_nodes)
    assert overlap_measure(u, 0.5, forms) == 0.0


def test_overlap_measure_full_overlap_is_volume():
    forms = _sphere_forms()
    u = np.ones((2, forms.mesh.n_nodes))
    assert overlap_measure(u, 0.5, forms) == pytest.approx(
        sphere_volume(3), rel=1e-8)


def test_holder_constant_field_is_zero():
    forms = _sphere_forms()
    u = np.full(forms.mesh.n_nodes, 3.7)
    assert holder_estimate(u, 0.5, forms) == 0.0


def test_holder_exponent_guard():
    forms = _sphere_forms()
    u = np.ones(forms.mesh.n_nodes)
    for alpha in (0.0, 1.0, -0.3, 2.0):
        with pytest.raises(DomainError):
            holder_estimate(u, alpha, forms)


def test_holder_refinement_consistent():
    vals = []
    for n in (128, 256):
        forms = _sphere_forms(n)
        vals.append(holder_estimate(np.cos(forms.mesh.theta), 0.5, forms))
    assert vals[1] == pytest.approx(vals[0], rel=0.05)


def test_threshold_check_m10():
    assert threshold_check_m10(0.005, 1.0)
    assert not threshold_check_m10(0.009, 1.0)
    assert not threshold_check_m10(0.0, 1.0)
    with pytest.raises(DomainError):
        threshold_check_m10(0.005, -1.0)


# ---------------------------------------------------------------------------
# symmetry hook

def test_pair_swap_reflection_shape_guard():
    with pytest.raises(ShapeError):
        pair_swap_reflection(np.ones((3, 8)))


def test_pair_swap_reflection_is_projection():
    rng = np.random.default_rng(5)
    u = rng.standard_normal((2, 32))
    once = pair_swap_reflection(u)
    assert np.allclose(pair_swap_reflection(once), once)
    # symmetric states are fixed
    sym = np.vstack([u[0], u[0][::-1]])
    assert np.allclose(pair_swap_reflection(sym), sym)


# ---------------------------------------------------------------------------
# continuation

def test_continue_single_component_ignores_coupling(dumbbell_forms):
    forms = dumbbell_forms
    theta = forms.mesh.theta
    u0 = (np.exp(-(theta / 0.8) ** 2) + 1e-4)[None, :]
    records = continue_lambda(u0, LambdaSchedule(-1.0, 10.0, 3), forms)
    assert len(records) == 3
    energies = [r.energy for r in records]
    assert max(energies) - min(energies) <= 1e-9 * abs(energies[0])
    assert all(r.max_offdiag == 0.0 for r in records)


def test_chain_converges_with_energy_bridge(chain):
    assert all(r.converged for r in chain)
    for prev, nxt in zip(chain, chain[1:]):
        assert nxt.energy <= 1.01 * prev.energy


def test_chain_overlap_decreases(chain, dumbbell_forms):
    forms = dumbbell_forms
    overlaps = [forms.integrate_pair(r.u[1], r.u[0], 3.0, 3.0)
                for r in chain]
    assert all(b < a for a, b in zip(overlaps, overlaps[1:]))
    assert overlaps[-1] < 1e-1 * overlaps[0]


def test_chain_keeps_mirror_symmetry(chain):
    u = chain[-1].u
    assert np.allclose(u, u[::-1, ::-1], atol=1e-9 * np.abs(u).max())


def test_chain_holder_stays_bounded(chain):
    holders = [r.holder for r in chain]
    assert max(holders) <= 2.0 * holders[0]


def test_chain_fields_stay_bounded(chain):
    peaks = [np.abs(r.u).max() for r in chain]
    assert max(peaks) <= 2.0 * peaks[0]


# ---------------------------------------------------------------------------
# partition extraction

def test_partition_of_chain_limit(chain, dumbbell_forms):
    forms = dumbbell_forms
    u = chain[-1].u
    tau = 1e-3 * np.abs(u).max()
    part = extract_partition(u, tau, forms)
    assert len(part.supports) == 2
    assert np.all(part.connected)
    # labels tile the node set
    sizes = sum(len(s) for s in part.supports) + len(part.interface)
    assert sizes == forms.mesh.n_nodes
    assert not np.intersect1d(*part.supports).size
    # measures sum to the total volume
    total = part.measures.sum() + part.interface_measure
    assert total == pytest.approx(forms.measure(), rel=1e-12)
    # restricted-norm energies track the recorded value up to the
    # interface band's contribution
    assert part.energies.sum() == pytest.approx(chain[-1].energy, rel=0.2)
    # the mirror pair splits the energy evenly
    assert part.energies[0] == pytest.approx(part.energies[1], rel=1e-6)


def test_partition_hemispheres():
    forms = _sphere_forms(128)
    theta = forms.mesh.theta
    u = np.vstack([np.maximum(np.cos(theta), 0.0),
                   np.maximum(-np.cos(theta), 0.0)])
    part = extract_partition(u, 0.05, forms)
    assert np.all(part.connected)
    assert len(part.interface) > 0
    # the interface is the equatorial band where both fields are small
    band = np.abs(np.cos(theta)) <= 0.05
    assert np.array_equal(part.interface, np.flatnonzero(band))


def test_partition_empty_support_raises():
    forms = _sphere_forms()
    u = np.vstack([np.ones(forms.mesh.n_nodes),
                   np.zeros(forms.mesh.n_nodes)])
    with pytest.raises(DegeneratePartitionError):
        extract_partition(u, 0.5, forms)


# ---------------------------------------------------------------------------
# interface diagnostics

def test_interface_single_component_empty():
    forms = _sphere_forms()
    u = np.ones(forms.mesh.n_nodes)
    part = extract_partition(u, 0.5, forms)
    report = interface_diagnostics(u, part, forms)
    assert report.rows == []
    assert report.median_mismatch == 0.0


def test_interface_mismatch_small_for_mirror_pair(chain, dumbbell_forms):
    forms = dumbbell_forms
    u = chain[-1].u
    part = extract_partition(u, 1e-3 * np.abs(u).max(), forms)
    report = interface_diagnostics(u, part, forms)
    assert report.rows
    assert report.median_mismatch <= 0.1
    for node, i, j, gi, gj, mismatch, singular in report.rows:
        assert 0 <= node < forms.mesh.n_nodes
        assert {i, j} == {0, 1}
        assert gi >= 0.0 and gj >= 0.0
        assert 0.0 <= mismatch <= 1.0


# ---------------------------------------------------------------------------
# nodal difference

def test_nodal_difference_two_domains(chain, dumbbell_forms):
    forms = dumbbell_forms
    u = chain[-1].u
    report = nodal_solution(u, forms)
    assert report.n_positive == 1
    assert report.n_negative == 1
    assert report.n_domains == 2
    assert report.energy == pytest.approx(chain[-1].energy, rel=1e-9)
    assert report.interior.sum() < forms.mesh.n_nodes


def test_nodal_difference_antisymmetric_under_swap(chain, dumbbell_forms):
    forms = dumbbell_forms
    u = chain[-1].u
    w = nodal_solution(u, forms).w
    w_swapped = nodal_solution(u[::-1], forms).w
    assert np.allclose(w_swapped, -w)


def test_nodal_difference_warns_on_extra_domains():
    forms = _sphere_forms(128)
    theta = forms.mesh.theta
    # two separated bumps against one in between: three sign domains
    u = np.vstack([np.exp(-(theta / 0.2) ** 2)
                   + np.exp(-((theta - math.pi) / 0.2) ** 2) + 1e-6,
                   np.exp(-((theta - math.pi / 2) / 0.2) ** 2) + 1e-6])
    with pytest.warns(RuntimeWarning):
        report = nodal_solution(u, forms)
    assert report.n_domains > 2


def test_nodal_needs_exactly_two_components():
    forms = _sphere_forms()
    with pytest.raises(ShapeError):
        nodal_solution(np.ones((3, forms.mesh.n_nodes)), forms)


# ---------------------------------------------------------------------------
# equation residual and per-support consistency

def test_equation_residual_of_converged_solve(dumbbell_forms):
    from yamabe.nehari import CouplingSpec, minimize

    forms = dumbbell_forms
    res = minimize(np.ones((1, forms.mesh.n_nodes)),
                   CouplingSpec.symmetric(3, 1, -1.0), forms)
    assert res.converged
    l2, mx = equation_residual(res.u[0], forms)
    assert l2 <= 1e-6
    assert mx <= 1e-6


def test_equation_residual_of_rough_field_is_large():
    forms = _sphere_forms(128)
    rng = np.random.default_rng(11)
    l2, _ = equation_residual(1.0 + 0.5 * rng.standard_normal(
        forms.mesh.n_nodes), forms)
    assert l2 > 1.0


def test_support_energy_consistency(chain, dumbbell_forms):
    forms = dumbbell_forms
    u = chain[-1].u
    part = extract_partition(u, 1e-3 * np.abs(u).max(), forms)
    for i in range(2):
        solve = support_energy(u[i], part.supports[i], forms)
        assert solve.converged
        assert solve.energy == pytest.approx(part.energies[i], rel=0.2)
        # zero outside the support
        outside = np.ones(forms.mesh.n_nodes, dtype=bool)
        outside[part.supports[i]] = False
        assert np.all(solve.field[outside] == 0.0)


def test_support_energy_empty_mass_raises():
    forms = _sphere_forms()
    with pytest.raises(DegeneratePartitionError):
        support_energy(np.zeros(forms.mesh.n_nodes), np.array([0, 1]), forms)
