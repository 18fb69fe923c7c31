"""Mesh construction, quadrature exactness, assembled forms, and file I/O."""

import math

import numpy as np
import pytest

from yamabe.constants import sphere_volume
from yamabe.errors import DomainError, MeshError, ShapeError
from yamabe.mesh import (
    MeshMetric,
    assemble_forms,
    build_capsule_sphere,
    build_dumbbell_sphere,
    build_flat_torus,
    build_octahedron_sphere,
    build_round_sphere,
    coercivity_check,
    load_fields,
    load_mesh,
    save_fields,
    save_mesh,
    simplex_rule,
)


# ---------------------------------------------------------------------------
# quadrature rules

def _simplex_monomial(exponents):
    """Exact integral of prod x_i^{a_i} over the unit d-simplex."""
    d = len(exponents)
    num = 1
    for a in exponents:
        num *= math.factorial(a)
    return num / math.factorial(sum(exponents) + d)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_simplex_rule_degree_five(d):
    bary, w = simplex_rule(d)
    assert np.all(w > 0)
    assert w.sum() == pytest.approx(1.0 / math.factorial(d), rel=1e-14)
    for total in range(6):
        for expo in _compositions(total, d):
            x = bary[:, 1:]
            val = w @ np.prod(x ** np.array(expo), axis=1)
            assert val == pytest.approx(_simplex_monomial(expo), rel=1e-12), \
                f"monomial {expo}"


def _compositions(total, d):
    if d == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, d - 1):
            yield (first,) + rest


def test_simplex_rule_bad_dimension():
    with pytest.raises(DomainError):
        simplex_rule(4)


# ---------------------------------------------------------------------------
# builders and global measure

@pytest.mark.parametrize("m", [3, 4, 10])
def test_round_sphere_measure(m):
    forms = assemble_forms(build_round_sphere(m, 128))
    assert forms.measure() == pytest.approx(sphere_volume(m), rel=1e-8)


def test_round_sphere_validation():
    with pytest.raises(DomainError):
        build_round_sphere(2, 64)
    with pytest.raises(DomainError):
        build_round_sphere(3, 8)


def test_octahedron_sphere_area_converges():
    errs = []
    for level in (3, 4):
        forms = assemble_forms(build_octahedron_sphere(level))
        errs.append(abs(forms.measure() - 4 * math.pi))
    assert errs[1] < 0.005 * 4 * math.pi
    assert errs[0] / errs[1] > 3.5  # second-order in the mesh width


def test_octahedron_euler_characteristic():
    for level in (0, 1, 2, 3):
        mesh = build_octahedron_sphere(level)
        assert mesh.euler_characteristic() == 2


def test_flat_torus_measure_and_euler():
    mesh = build_flat_torus(4)
    forms = assemble_forms(mesh)
    assert forms.measure() == pytest.approx(1.0, rel=1e-12)
    assert mesh.euler_characteristic() == 0
    assert len(mesh.cells) == 6 * 4 ** 3


def test_flat_torus_validation():
    with pytest.raises(DomainError):
        build_flat_torus(1)


# ---------------------------------------------------------------------------
# assembled forms

def test_stiffness_symmetric_and_kills_constants():
    for mesh in (build_round_sphere(3, 64),
                 build_octahedron_sphere(2),
                 build_flat_torus(3)):
        forms = assemble_forms(mesh)
        K = forms.stiffness
        asym = abs(K - K.T).max()
        assert asym <= 1e-14 * abs(K).max()
        ones = np.ones(mesh.n_nodes)
        assert np.max(np.abs(K @ ones)) <= 1e-12 * abs(K).max()


def test_interpolation_partition_of_unity():
    for mesh in (build_round_sphere(3, 64), build_flat_torus(3)):
        forms = assemble_forms(mesh)
        q = forms.quad_interp @ np.ones(mesh.n_nodes)
        assert np.allclose(q, 1.0, atol=1e-14)
        assert forms.node_weights.sum() == pytest.approx(forms.measure(),
                                                         rel=1e-13)
        assert np.all(forms.node_weights > 0)


def test_constant_field_natural_norm():
    # int |grad 1|^2 + kappa S_g = kappa m(m-1) vol(S^m)
    m = 3
    forms = assemble_forms(build_round_sphere(m, 128))
    val = forms.norm_g_sq(np.ones(forms.mesh.n_nodes))
    assert val == pytest.approx(0.75 * sphere_volume(m), rel=1e-8)


def test_latitude_first_harmonic_rate():
    # Rayleigh quotient of the first sphere harmonic cos(theta) tends to
    # the eigenvalue m at second order
    m = 3
    errs = []
    for n in (64, 128):
        forms = assemble_forms(build_round_sphere(m, n))
        u = np.cos(forms.mesh.theta)
        rq = (u @ (forms.stiffness @ u)) / (u @ (forms.l2_mass @ u))
        errs.append(abs(rq - m))
    assert errs[0] / errs[1] > 3.5
    assert errs[1] < 1e-3


def test_octahedron_first_harmonic():
    forms = assemble_forms(build_octahedron_sphere(4))
    u = forms.mesh.vertices[:, 0]
    rq = (u @ (forms.stiffness @ u)) / (u @ (forms.l2_mass @ u))
    assert rq == pytest.approx(2.0, rel=0.02)


def test_torus_first_harmonic():
    forms = assemble_forms(build_flat_torus(10))
    u = np.cos(2 * math.pi * forms.mesh.vertices[:, 0])
    rq = (u @ (forms.stiffness @ u)) / (u @ (forms.l2_mass @ u))
    assert rq == pytest.approx(4 * math.pi ** 2, rel=0.06)


def test_lp_integrals_match_closed_forms():
    m = 3
    forms = assemble_forms(build_round_sphere(m, 256))
    u = np.cos(forms.mesh.theta)
    # int cos^2 and cos^4 of the colatitude over S^3
    assert forms.integrate_power(u, 2) == pytest.approx(
        sphere_volume(3) / 4, rel=5e-4)
    assert forms.integrate_power(u, 4) == pytest.approx(
        sphere_volume(3) / 8, rel=5e-4)


def test_power_gradient_matches_difference_quotient():
    rng = np.random.default_rng(7)
    forms = assemble_forms(build_round_sphere(3, 32))
    n = forms.mesh.n_nodes
    u = 0.5 + rng.random(n)
    v = rng.standard_normal(n)
    for p in (2.0, 3.0, 2.5):
        g = forms.grad_power(u, p)
        eps = 1e-6
        fd = (forms.integrate_power(u + eps * v, p)
              - forms.integrate_power(u - eps * v, p)) / (2 * eps)
        assert g @ v == pytest.approx(fd, rel=1e-6)


def test_pair_gradient_matches_difference_quotient():
    rng = np.random.default_rng(11)
    forms = assemble_forms(build_flat_torus(3))
    n = forms.mesh.n_nodes
    ui = 0.5 + rng.random(n)
    uj = 0.5 + rng.random(n)
    v = rng.standard_normal(n)
    a, b = 3.0, 3.0
    g = forms.grad_pair(uj, ui, a, b)
    eps = 1e-6
    fd = (forms.integrate_pair(uj, ui + eps * v, a, b)
          - forms.integrate_pair(uj, ui - eps * v, a, b)) / (2 * eps)
    assert g @ v == pytest.approx(fd, rel=1e-6)


def test_solve_inner_inverts_natural_form():
    for mesh in (build_round_sphere(3, 64), build_flat_torus(4, s_value=2.0)):
        forms = assemble_forms(mesh)
        rng = np.random.default_rng(3)
        b = rng.standard_normal(mesh.n_nodes)
        x = forms.solve_inner(b)
        assert np.allclose(forms.inner_matrix @ x, b,
                           atol=1e-8 * np.linalg.norm(b))


def test_solve_inner_iterative_agrees_with_direct():
    forms = assemble_forms(build_flat_torus(4, s_value=2.0))
    rng = np.random.default_rng(9)
    b = rng.standard_normal(forms.mesh.n_nodes)
    xd = forms.solve_inner(b, method="direct")
    xc = forms.solve_inner(b, method="cg", rtol=1e-12)
    assert np.allclose(xc, xd, atol=1e-8 * np.linalg.norm(xd))


# ---------------------------------------------------------------------------
# coercivity

def test_coercivity_round_sphere():
    forms = assemble_forms(build_round_sphere(3, 200))
    lam, ok = coercivity_check(forms)
    assert ok
    assert lam == pytest.approx(0.75, rel=1e-9)


def test_coercivity_flat_torus_sign():
    lam, ok = coercivity_check(assemble_forms(build_flat_torus(4, s_value=2.0)))
    assert ok
    assert lam == pytest.approx(0.25, rel=1e-9)
    lam, ok = coercivity_check(assemble_forms(build_flat_torus(4,
                                                               s_value=-1.0)))
    assert not ok
    assert lam == pytest.approx(-0.125, rel=1e-9)


def test_coercivity_zero_curvature_not_coercive():
    lam, ok = coercivity_check(assemble_forms(build_round_sphere(3, 64,
                                                                 s_value=0.0)))
    assert not ok
    assert abs(lam) < 1e-10


# ---------------------------------------------------------------------------
# file round trips and validation

def test_mesh_round_trip_embedding(tmp_path):
    mesh = build_octahedron_sphere(1)
    path = tmp_path / "sphere.msh"
    save_mesh(mesh, path)
    back = load_mesh(path)
    assert back.dim == 2
    assert back.vertex_metric is None
    assert np.allclose(back.vertices, mesh.vertices, atol=0)
    assert np.array_equal(back.cells, mesh.cells)
    assert np.allclose(back.S, mesh.S, atol=0)


def test_mesh_round_trip_metric(tmp_path):
    mesh = build_flat_torus(3)
    # unwrapped periodic cells cannot round-trip through vertex positions;
    # compare the stored vertex data only
    path = tmp_path / "torus.msh"
    save_mesh(mesh, path)
    back = load_mesh(path)
    assert back.dim == 3
    assert np.allclose(back.vertex_metric, mesh.vertex_metric, atol=0)
    assert np.allclose(back.S, mesh.S, atol=0)


def test_field_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    u = rng.standard_normal((3, 40))
    path = tmp_path / "state.fld"
    save_fields(u, path)
    back = load_fields(path)
    assert back.shape == (3, 40)
    assert np.array_equal(back, u)


def test_field_checkpoint_validation(tmp_path):
    path = tmp_path / "state.fld"
    save_fields(np.ones((2, 10)), path)
    mesh = build_octahedron_sphere(0)  # 6 nodes
    with pytest.raises(ShapeError):
        load_fields(path, mesh=mesh)
    bad = tmp_path / "junk.fld"
    bad.write_bytes(b"NOTFLD" + b"\x00" * 16)
    with pytest.raises(ShapeError):
        load_fields(bad)


def _write_mesh_text(path, body):
    path.write_text(body)
    return path


def test_load_mesh_rejects_missing_curvature(tmp_path):
    # tetrahedron boundary: closed surface, but vertex lines lack S_g
    body = "YPMESH 1\n4 4 1\n"
    verts = ["0 0 0", "1 0 0", "0 1 0", "0 0 1"]
    cells = ["0 2 1", "0 1 3", "0 3 2", "1 2 3"]
    body += "\n".join(verts) + "\n" + "\n".join(cells) + "\n"
    with pytest.raises(MeshError, match="curvature"):
        load_mesh(_write_mesh_text(tmp_path / "m.msh", body))


def test_load_mesh_rejects_open_complex(tmp_path):
    mesh = build_octahedron_sphere(0)
    path = tmp_path / "m.msh"
    save_mesh(mesh, path)
    lines = path.read_text().strip().split("\n")
    lines[1] = "6 7 1"
    path.write_text("\n".join(lines[:-1]) + "\n")  # drop one face
    with pytest.raises(MeshError, match="closed"):
        load_mesh(path)


def test_load_mesh_rejects_bad_header(tmp_path):
    with pytest.raises(MeshError, match="header"):
        load_mesh(_write_mesh_text(tmp_path / "m.msh", "MESH 2\n0 0 1\n"))


def test_load_mesh_rejects_degenerate_cell(tmp_path):
    body = "YPMESH 1\n4 4 1\n"
    verts = ["0 0 0 1", "1 0 0 1", "0 1 0 1", "0 0 1 1"]
    cells = ["0 2 1", "0 1 3", "0 3 2", "1 1 3"]
    body += "\n".join(verts) + "\n" + "\n".join(cells) + "\n"
    with pytest.raises(MeshError, match="degenerate"):
        load_mesh(_write_mesh_text(tmp_path / "m.msh", body))


def test_load_mesh_rejects_indefinite_metric(tmp_path):
    mesh = build_flat_torus(2)
    path = tmp_path / "m.msh"
    metric = mesh.vertex_metric.copy()
    metric[0] = -np.eye(3)
    bad = MeshMetric(kind="simplicial", dim=3, vertices=mesh.vertices,
                     cells=mesh.cells, cell_coords=mesh.cell_coords,
                     vertex_metric=metric, S=mesh.S)
    save_mesh(bad, path)
    with pytest.raises(MeshError, match="positive definite"):
        load_mesh(path)


def test_load_mesh_rejects_index_out_of_range(tmp_path):
    body = "YPMESH 1\n4 4 1\n"
    verts = ["0 0 0 1", "1 0 0 1", "0 1 0 1", "0 0 1 1"]
    cells = ["0 2 1", "0 1 3", "0 3 2", "1 2 9"]
    body += "\n".join(verts) + "\n" + "\n".join(cells) + "\n"
    with pytest.raises(MeshError, match="out of range"):
        load_mesh(_write_mesh_text(tmp_path / "m.msh", body))


# ---------------------------------------------------------------------------
# graph structure

def test_edges_and_adjacency():
    mesh = build_octahedron_sphere(0)
    e = mesh.edges()
    assert len(e) == 12
    adj = mesh.adjacency()
    assert adj.shape == (6, 6)
    assert adj.nnz == 24
    lat = build_round_sphere(3, 32)
    assert len(lat.edges()) == 31


# ---------------------------------------------------------------------------
# warped latitude builders

def test_capsule_curvature_pieces():
    mesh = build_capsule_sphere(3, 256, neck=4.0)
    a = 0.5 * math.pi
    caps = (mesh.theta < a) | (mesh.theta > a + 4.0)
    assert np.all(mesh.S[caps] == 6.0)
    assert np.all(mesh.S[~caps] == 2.0)
    assert np.all(mesh.warp > 0.0)
    assert np.all(mesh.warp[~caps] == 1.0)


def test_capsule_measure_matches_profile():
    neck = 4.0
    forms = assemble_forms(build_capsule_sphere(3, 512, neck=neck))
    # |S^2| * (two quarter-sphere cap integrals of sin^2 + the neck)
    exact = 4.0 * math.pi * (math.pi / 2.0 + neck)
    assert forms.measure() == pytest.approx(exact, rel=1e-4)


def test_capsule_wells_dip_at_half_neck_midpoints():
    plain = build_capsule_sphere(3, 256, neck=4.0)
    welled = build_capsule_sphere(3, 256, neck=4.0, well_depth=1.5,
                                  well_radius=0.5)
    total = math.pi + 4.0
    for center in (0.5 * total - 1.0, 0.5 * total + 1.0):
        at = np.argmin(np.abs(welled.theta - center))
        assert plain.S[at] - welled.S[at] == pytest.approx(1.5, rel=1e-3)
    # far from the wells nothing changes
    assert welled.S[0] == pytest.approx(plain.S[0], abs=1e-9)


def test_capsule_validation():
    with pytest.raises(DomainError):
        build_capsule_sphere(2, 64)
    with pytest.raises(DomainError):
        build_capsule_sphere(3, 8)
    with pytest.raises(DomainError):
        build_capsule_sphere(3, 64, neck=0.0)
    with pytest.raises(DomainError):
        build_capsule_sphere(3, 64, well_depth=1.0, well_radius=0.0)


def test_dumbbell_validation():
    with pytest.raises(DomainError):
        build_dumbbell_sphere(2, 64)
    with pytest.raises(DomainError):
        build_dumbbell_sphere(3, 8)
    with pytest.raises(DomainError):
        build_dumbbell_sphere(3, 64, neck=-1.0)
    for waist in (0.0, 1.0, 1.3):
        with pytest.raises(DomainError):
            build_dumbbell_sphere(3, 64, waist=waist)
    with pytest.raises(DomainError):
        build_dumbbell_sphere(3, 64, taper=0.0)
    with pytest.raises(DomainError):
        build_dumbbell_sphere(3, 64, well_depth=1.0, well_radius=0.0)


def test_dumbbell_mirror_symmetric():
    mesh = build_dumbbell_sphere(3, 256, well_depth=5.0, well_radius=0.9)
    assert np.allclose(mesh.S, mesh.S[::-1], atol=1e-10)
    assert np.allclose(mesh.warp, mesh.warp[::-1], atol=1e-12)


def test_dumbbell_pinch_profile():
    waist = 0.3
    mesh = build_dumbbell_sphere(3, 512, neck=4.0, waist=waist, taper=0.8)
    plain = build_capsule_sphere(3, 512, neck=4.0)
    assert np.all(mesh.warp > 0.0)
    # the pinch only shrinks cross-sections, down to the waist radius at
    # the neck midpoint (the global warp minimum stays at the poles)
    assert np.all(mesh.warp <= plain.warp + 1e-15)
    center = np.argmin(np.abs(mesh.theta - 0.5 * (math.pi + 4.0)))
    assert mesh.warp[center] == pytest.approx(waist, rel=1e-2)
    # caps sit several taper widths away and keep the round curvature
    # (the taper's Gaussian tail enters the curvature amplified by
    # 1/warp^2, so "unchanged" means a few parts in 1e4 near the pole)
    assert mesh.S[0] == pytest.approx(6.0, abs=1e-2)
    assert mesh.warp[0] == pytest.approx(plain.warp[0], abs=1e-8)


def test_dumbbell_with_frozen_wells_is_coercive():
    forms = assemble_forms(build_dumbbell_sphere(
        3, 128, neck=4.0, waist=0.3, taper=0.8,
        well_depth=5.0, well_radius=0.9))
    gap, ok = coercivity_check(forms)
    assert ok
    assert gap > 0.1
