import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptnet import mesh as m
from adaptnet.errors import ValidationError


def test_unit_square_initial():
    msh = m.make_initial_mesh("unit_square")
    assert msh.n_elements == 2
    assert msh.n_vertices == 4
    # the diagonal is shared and is the refinement edge of both elements
    shared = [e for e, owners in msh.edge_to_elements().items() if len(owners) == 2]
    assert shared == [(0, 2)]
    m.check_conformity(msh)


def test_l_shape_has_six_elements():
    msh = m.make_initial_mesh("l_shape")
    assert msh.n_elements == 6
    m.check_conformity(msh)


def test_z_shape_conforming():
    msh = m.make_initial_mesh("z_shape")
    assert msh.n_elements >= 8
    m.check_conformity(msh)
    # total area: square (4.0) minus slit triangle (1/2 * 1 * 0.2)
    assert np.isclose(m.areas(msh).sum(), 4.0 - 0.1)


def test_refine_empty_is_identity():
    msh = m.make_initial_mesh("l_shape")
    out = m.refine_nvb(msh, set())
    assert out is msh


def test_refine_forces_neighbor_on_shared_diagonal():
    msh = m.make_initial_mesh("unit_square")
    out = m.refine_nvb(msh, {0})
    assert out.n_elements == 4
    m.check_conformity(out)
    # input vertices are a prefix of the output vertices
    assert np.array_equal(out.vertices[: msh.n_vertices], msh.vertices)


def test_refine_all_l_shape():
    msh = m.make_initial_mesh("l_shape")
    out = m.refine_nvb(msh, range(msh.n_elements))
    assert out.n_elements >= 2 * msh.n_elements
    m.check_conformity(out)


def test_refine_invalid_id():
    msh = m.make_initial_mesh("unit_square")
    with pytest.raises(ValidationError):
        m.refine_nvb(msh, {7})


def test_uniform_refine_counts():
    msh = m.make_initial_mesh("unit_square")
    out = m.uniform_refine(msh)
    assert out.n_elements == 8
    m.check_conformity(out)
    twice = m.uniform_refine(out)
    assert twice.n_elements == 32
    m.check_conformity(twice)


def test_uniform_matches_iterated_mark_all():
    msh = m.make_initial_mesh("l_shape")
    direct = m.uniform_refine(msh)
    # mark-all sweeps until every input element is bisected twice
    iterated = msh
    for _ in range(2):
        iterated = m.refine_nvb(iterated, range(iterated.n_elements))
    assert iterated.n_elements == direct.n_elements
    assert sorted(map(tuple, iterated.vertices.tolist())) == sorted(
        map(tuple, direct.vertices.tolist())
    )


def test_element_patch():
    msh = m.uniform_refine(m.uniform_refine(m.make_initial_mesh("unit_square")))
    e2e = msh.edge_to_elements()
    interior = [
        i
        for i in range(msh.n_elements)
        if all(len(e2e[k]) == 2 for k in _edges(msh.triangles[i]))
    ]
    assert interior  # the criss-cross has interior elements
    assert len(m.element_patch(msh, interior[0])) == 4

    two = m.make_initial_mesh("unit_square")
    assert len(m.element_patch(two, 0)) == 2
    # symmetry
    for i in range(msh.n_elements):
        for j in m.element_patch(msh, i):
            assert i in m.element_patch(msh, j)


def _edges(tri):
    a, b, c = tri
    return [m._ekey(b, c), m._ekey(c, a), m._ekey(a, b)]


def test_element_geometry_reference():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2]])
    msh = m._mesh_from_lists(verts, tris, [0], [0], [-1], [0], 0, 1)
    area, diam_inf, perim, coords = m.element_geometry(msh, 0)
    assert area == 0.5
    assert diam_inf == 1.0
    assert np.isclose(perim, 2 + np.sqrt(2))


@pytest.mark.parametrize(
    "pts,expected",
    [([(0, 0), (2, 0), (0, 1)], 2.0), ([(0, 0), (1, 1), (-1, 1)], 2.0)],
)
def test_element_geometry_diam_inf(pts, expected):
    verts = np.array(pts, dtype=float)
    tris = np.array([[0, 1, 2]])
    msh = m._mesh_from_lists(verts, tris, [0], [0], [-1], [0], 0, 1)
    _, diam_inf, _, _ = m.element_geometry(msh, 0)
    assert diam_inf == expected


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=10 ** 6), min_size=1, max_size=4),
       st.sampled_from(["unit_square", "l_shape", "z_shape"]))
def test_random_refinement_keeps_invariants(picks, domain):
    msh = m.make_initial_mesh(domain)
    floor = m.min_angle(m.uniform_refine(m.uniform_refine(msh)))
    for p in picks:
        marked = {p % msh.n_elements, (p // 7) % msh.n_elements}
        msh = m.refine_nvb(msh, marked)
    m.check_conformity(msh)
    assert m.min_angle(msh) >= floor - 1e-12
    # monotone: leaves refine the initial mesh
    assert m.is_refinement_of(msh, m.make_initial_mesh(domain))


def test_levels_increase_by_one():
    msh = m.make_initial_mesh("unit_square")
    out = m.refine_nvb(msh, {0})
    by_uid = dict(zip(msh.uids.tolist(), msh.levels.tolist()))
    for lev, parent in zip(out.levels, out.parent_uids):
        if parent >= 0 and parent in by_uid:
            assert lev == by_uid[parent] + 1


def test_bisect_element_no_closure():
    msh = m.make_initial_mesh("unit_square")
    out = m.bisect_element(msh, 0)
    assert out.n_elements == 3  # hanging node allowed
    with pytest.raises(Exception):
        m.check_conformity(out)


def test_serialization_roundtrip():
    msh = m.refine_nvb(m.make_initial_mesh("l_shape"), {0, 3})
    text = m.mesh_to_text(msh)
    back = m.mesh_from_text(text)
    assert m.mesh_to_text(back) == text
    assert np.array_equal(back.vertices, msh.vertices)
    assert np.array_equal(back.triangles, msh.triangles)
    assert np.array_equal(back.levels, msh.levels)


def test_marked_elements_are_bisected():
    msh = m.make_initial_mesh("l_shape")
    for _ in range(3):
        marked = {0, msh.n_elements - 1}
        out = m.refine_nvb(msh, marked)
        surviving = set(out.uids.tolist())
        for i in marked:
            assert msh.uids[i] not in surviving
        msh = out
