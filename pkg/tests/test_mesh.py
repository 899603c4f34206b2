from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swimctl.errors import InvalidGeometry, MeshFileError, TagError
from swimctl.mesh import (
    FLUID,
    OUTER_BOUNDARY,
    SOLID,
    SOLID_BOUNDARY,
    ScalarField,
    Space,
    VectorField,
    boundary_integral,
    build_disk_in_disk_mesh,
    check_mesh,
    read_mesh,
    volume_integral,
    write_mesh,
)


def shoelace(mesh, tag):
    e = mesh.tagged_edges(tag)
    p = mesh.vertices
    return 0.5 * abs(np.sum(p[e[:, 0], 0] * p[e[:, 1], 1] - p[e[:, 1], 0] * p[e[:, 0], 1]))


def perimeter(mesh, tag):
    e = mesh.tagged_edges(tag)
    return float(np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1).sum())


def test_fluid_area_matches_polygon_and_disk(fine_mesh):
    area = fine_mesh.cell_areas()[fine_mesh.region_cells(FLUID)].sum()
    poly = shoelace(fine_mesh, OUTER_BOUNDARY) - shoelace(fine_mesh, SOLID_BOUNDARY)
    # frozen from the boundary shoelace oracle
    assert poly == pytest.approx(11.781131421152123, abs=1e-12)
    assert area == pytest.approx(poly, abs=1e-12)
    assert abs(area - np.pi * 3.75) < 0.1**2


def test_invariants(fine_mesh):
    check_mesh(fine_mesh)
    assert np.all(fine_mesh.cell_areas() > 0)
    ss = Space(fine_mesh, SOLID)
    assert np.abs(volume_integral(lambda y: y, SOLID, space=ss)).max() < 1e-12 * 0.5
    assert set(np.unique(fine_mesh.boundary_tags)) == {SOLID_BOUNDARY, OUTER_BOUNDARY}


@pytest.mark.parametrize("a,R", [(0.5, 0.5), (1.0, 0.5), (0.0, 1.0), (-1.0, 1.0)])
def test_degenerate_radii(a, R):
    with pytest.raises(InvalidGeometry):
        build_disk_in_disk_mesh(a, R, 0.1)


def test_nonpositive_h():
    with pytest.raises(InvalidGeometry):
        build_disk_in_disk_mesh(0.5, 1.0, 0.0)


def test_perimeter_converges_quadratically():
    errs = [np.pi - perimeter(build_disk_in_disk_mesh(0.5, 2.0, h), SOLID_BOUNDARY) for h in (0.2, 0.1, 0.05)]
    # frozen from the chord-sum oracle
    assert errs == pytest.approx([0.020147501331741147, 0.005374671979395895, 0.0013018569658722612], rel=1e-9)
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_boundary_integral_examples(fine_mesh):
    fluid_space = Space(fine_mesh, FLUID)
    c = np.array([0.3, -1.7])
    assert abs(boundary_integral(lambda y: np.broadcast_to(c, y.shape), SOLID_BOUNDARY, "normal", fluid_space)) < 1e-12
    assert boundary_integral(lambda y: np.zeros(y.shape), SOLID_BOUNDARY, "normal", fluid_space) == 0.0
    # divergence theorem: flux of y through the solid boundary equals 2 |S|
    mesh = fluid_space.mesh
    area = mesh.cell_areas()[mesh.region_cells(SOLID)].sum()
    flux = boundary_integral(lambda y: y, SOLID_BOUNDARY, "normal", fluid_space)
    # fluid-side normals point out of the origin, so the flux is taken as the solid sees it
    assert abs(abs(flux) - 2 * area) < 1e-12
    # an inscribed polygon with chord h misses about pi h^2 / 6 of the disk
    assert abs(2 * area - 2 * np.pi * 0.25) < 2 * 0.1**2


def test_boundary_integral_unknown_tag(fluid_space):
    with pytest.raises(TagError):
        boundary_integral(lambda y: y, "NOPE", "normal", fluid_space)
    with pytest.raises(TagError):
        volume_integral(lambda y: y, "NOPE", space=fluid_space)


def test_volume_integral_examples(fine_mesh):
    ss = Space(fine_mesh, SOLID)
    a = 0.5
    one = volume_integral(lambda y: np.ones(y.shape[:2]), SOLID, space=ss)
    second = volume_integral(lambda y: np.ones(y.shape[:2]), SOLID, "second_moment", space=ss)
    h2 = 0.1**2
    assert abs(one - np.pi * a**2) < h2
    assert abs(second - np.pi * a**4 / 2) < h2
    # exact for the polygon: sum of triangle areas
    assert one == pytest.approx(fine_mesh.cell_areas()[fine_mesh.region_cells(SOLID)].sum(), abs=1e-13)


def test_discrete_divergence_theorem(fluid_space, rng):
    v = rng.normal(size=(fluid_space.n, 2))
    div = np.trace(fluid_space.grad_at_quad(v), axis1=-2, axis2=-1)
    vol = np.einsum("cq,cq->", fluid_space.qweight, div)
    f = VectorField(fluid_space, v)
    # normals point away from the origin on both circles; the fluid's own outward normal flips on the solid
    bnd = boundary_integral(f, OUTER_BOUNDARY, "normal") - boundary_integral(f, SOLID_BOUNDARY, "normal")
    assert bnd == pytest.approx(vol, abs=1e-11)


@settings(max_examples=20, deadline=None)
@given(alpha=st.floats(-5, 5), beta=st.floats(-5, 5), seed=st.integers(0, 2**16))
def test_integrals_are_linear(alpha, beta, seed, fluid_space):
    r = np.random.default_rng(seed)
    f, g = r.normal(size=(2, fluid_space.n, 2))
    lhs = boundary_integral(VectorField(fluid_space, alpha * f + beta * g), SOLID_BOUNDARY, "normal")
    rhs = alpha * boundary_integral(VectorField(fluid_space, f), SOLID_BOUNDARY, "normal") + beta * boundary_integral(
        VectorField(fluid_space, g), SOLID_BOUNDARY, "normal"
    )
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_field_shape_checked(fluid_space):
    with pytest.raises(ValueError):
        VectorField(fluid_space, np.zeros((3, 2)))
    ScalarField(fluid_space, np.zeros(fluid_space.n_p1), space_tag="P1")


def test_round_trip(tmp_path, coarse_mesh):
    p = tmp_path / "m.txt"
    write_mesh(coarse_mesh, p)
    back = read_mesh(p)
    assert np.array_equal(back.vertices, coarse_mesh.vertices)
    assert np.array_equal(back.cells, coarse_mesh.cells)
    assert np.array_equal(back.boundary_tags, coarse_mesh.boundary_tags)
    assert back.ring_radii == coarse_mesh.ring_radii
    write_mesh(back, tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_bytes() == p.read_bytes()


@pytest.mark.parametrize(
    "text",
    ["", "garbage\n", "radii 0.5 1.5\nvertices 2\n0 0\n", "radii 0.5 1.5\nvertices 1\n0 0\ncells 1\n0 1 2 FLUID\n"],
)
def test_corrupted_mesh_file(tmp_path, text):
    p = tmp_path / "bad.txt"
    p.write_text(text)
    with pytest.raises(MeshFileError) as info:
        read_mesh(p)
    assert info.value.path == str(p)
    assert isinstance(info.value, OSError)


def test_missing_mesh_file(tmp_path):
    with pytest.raises(MeshFileError):
        read_mesh(tmp_path / "absent.txt")


@settings(max_examples=8, deadline=None)
@given(h=st.floats(0.15, 0.45), a=st.floats(0.3, 0.7))
def test_generated_meshes_are_valid(h, a):
    m = build_disk_in_disk_mesh(a, 2.0, h)
    check_mesh(m)
    assert m.cell_areas().sum() == pytest.approx(shoelace(m, OUTER_BOUNDARY), rel=1e-12)
