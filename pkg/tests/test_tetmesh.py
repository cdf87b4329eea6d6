import numpy as np
import pytest

from distill3d import tetmesh
from distill3d.errors import Distill3DError, StaleStateError
from distill3d.scenes import sphere_sdf

from conftest import rel_err


def sphere_grid(res=16, radius=0.6):
    grid = tetmesh.build_tet_grid(res)
    grid.sdf = sphere_sdf(grid.vertices, radius)
    return grid


class TestBuildTetGrid:
    def test_counts(self):
        grid = tetmesh.build_tet_grid(8)
        assert grid.vertices.shape[0] == 9**3 == 729
        assert grid.tets.shape[0] == 6 * 8**3 == 3072

    def test_positive_volumes(self):
        grid = tetmesh.build_tet_grid(8)
        assert grid.tet_volumes().min() > 0

    def test_volumes_fill_cube(self):
        grid = tetmesh.build_tet_grid(8)
        assert grid.tet_volumes().sum() == pytest.approx(8.0, abs=1e-9)

    def test_resolution_bounds(self):
        for bad in (7, 129, 0):
            with pytest.raises(ValueError):
                tetmesh.build_tet_grid(bad)

    def test_deform_clamp(self):
        grid = tetmesh.build_tet_grid(8)
        grid.deform[:] = 1.0
        grid.clamp_deform()
        assert np.abs(grid.deform).max() == pytest.approx(0.45 * grid.spacing)


class TestMarchingTets:
    def test_all_positive_empty(self):
        grid = tetmesh.build_tet_grid(8)
        grid.sdf = np.ones(grid.sdf.shape)
        assert tetmesh.marching_tets(grid).is_empty()

    def test_all_zero_treated_positive(self, caplog):
        grid = tetmesh.build_tet_grid(8)
        with caplog.at_level("WARNING"):
            mesh = tetmesh.marching_tets(grid)
        assert mesh.is_empty()
        assert any("all-zero" in r.message for r in caplog.records)

    def test_single_tet_midpoints(self):
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
        grid = tetmesh.TetGrid(verts, np.array([[0, 1, 2, 3]]),
                               sdf=np.array([-1.0, 1.0, 1.0, 1.0]),
                               deform=np.zeros((4, 3)), resolution=8)
        mesh = tetmesh.marching_tets(grid)
        assert mesh.num_faces == 1
        assert mesh.num_vertices == 3
        assert np.allclose(sorted(mesh.prov_lambda), [0.5, 0.5, 0.5])
        expected = {(0.5, 0.0, 0.0), (0.0, 0.5, 0.0), (0.0, 0.0, 0.5)}
        got = {tuple(np.round(v, 9)) for v in mesh.vertices}
        assert got == expected

    def test_sphere_vertices_near_surface(self):
        grid = sphere_grid(res=32)
        mesh = tetmesh.marching_tets(grid)
        err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.6)
        assert err.max() <= 2.0 / 32

    def test_sphere_watertight(self):
        mesh = tetmesh.marching_tets(sphere_grid(res=16))
        assert np.all(tetmesh.boundary_edge_counts(mesh) == 2)

    def test_lambda_in_open_interval(self):
        mesh = tetmesh.marching_tets(sphere_grid(res=16))
        assert mesh.prov_lambda.min() > 0.0 and mesh.prov_lambda.max() < 1.0
        s = sphere_sdf(np.zeros((1, 3)), 0.6)  # just exercising import
        a, b = mesh.prov_edges[:, 0], mesh.prov_edges[:, 1]
        grid = sphere_grid(res=16)
        assert np.all(grid.sdf[a] * grid.sdf[b] < 0)

    def test_scale_invariance_bit_exact(self):
        # Power-of-two scales commute with every float op in the lambda formula.
        grid = sphere_grid(res=16)
        base = tetmesh.marching_tets(grid)
        for k in (2.0, 0.25, 512.0):
            scaled_grid = sphere_grid(res=16)
            scaled_grid.sdf = scaled_grid.sdf * k
            scaled = tetmesh.marching_tets(scaled_grid)
            assert np.array_equal(base.vertices, scaled.vertices)
            assert np.array_equal(base.faces, scaled.faces)

    def test_scale_invariance_general(self):
        grid = sphere_grid(res=16)
        base = tetmesh.marching_tets(grid)
        scaled_grid = sphere_grid(res=16)
        scaled_grid.sdf = scaled_grid.sdf * 3.7
        scaled = tetmesh.marching_tets(scaled_grid)
        assert np.allclose(base.vertices, scaled.vertices, atol=1e-12)

    def test_deterministic(self):
        a = tetmesh.marching_tets(sphere_grid(res=12))
        b = tetmesh.marching_tets(sphere_grid(res=12))
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.faces, b.faces)


class TestMarchingTetsBackward:
    def test_zero_upstream(self):
        grid = sphere_grid()
        mesh = tetmesh.marching_tets(grid)
        d_s, d_v = tetmesh.marching_tets_backward(grid, mesh,
                                                  np.zeros((mesh.num_vertices, 3)))
        assert not d_s.any() and not d_v.any()

    def test_symmetric_edge_lambda_derivative(self):
        # s_a = -s_b: dl/ds_a = dl/ds_b = 1/(4 s_a), checked by finite differences.
        def lam(sa, sb):
            return sa / (sa - sb)

        sa, sb = -0.5, 0.5
        an = 1.0 / (4.0 * sa)
        fd_a = (lam(sa + 1e-7, sb) - lam(sa - 1e-7, sb)) / 2e-7
        fd_b = (lam(sa, sb + 1e-7) - lam(sa, sb - 1e-7)) / 2e-7
        assert rel_err(an, fd_a) < 1e-6 and rel_err(an, fd_b) < 1e-6

        verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
        grid = tetmesh.TetGrid(verts, np.array([[0, 1, 2, 3]]),
                               sdf=np.array([sa, sb, sb, sb]),
                               deform=np.zeros((4, 3)), resolution=8)
        mesh = tetmesh.marching_tets(grid)
        up = np.zeros((mesh.num_vertices, 3))
        vid = np.argmax(mesh.vertices[:, 0])  # crossing on edge (0, 1): x position = lambda
        up[vid, 0] = 1.0
        d_s, _ = tetmesh.marching_tets_backward(grid, mesh, up)
        assert rel_err(d_s[0], an) < 1e-9
        assert rel_err(d_s[1], an) < 1e-9

    def test_matches_finite_differences(self, rng):
        grid = tetmesh.build_tet_grid(8)
        grid.sdf = sphere_sdf(grid.vertices - 0.03, 0.52) + rng.normal(0, 0.01, grid.sdf.shape)
        grid.deform[:] = rng.normal(0, 0.008, grid.deform.shape)
        mesh = tetmesh.marching_tets(grid)
        up = rng.normal(size=(mesh.num_vertices, 3))
        d_s, d_v = tetmesh.marching_tets_backward(grid, mesh, up)

        def loss():
            return float(np.sum(up * tetmesh.marching_tets(grid).vertices))

        for arr, grad in ((grid.sdf, d_s), (grid.deform, d_v)):
            flat = grad.ravel()
            idx = rng.choice(np.nonzero(np.abs(flat) > 1e-7)[0], size=25, replace=False)
            for i in idx:
                orig = arr.ravel()[i]
                arr.ravel()[i] = orig + 1e-6
                fp = loss()
                arr.ravel()[i] = orig - 1e-6
                fm = loss()
                arr.ravel()[i] = orig
                fd = (fp - fm) / 2e-6
                assert rel_err(flat[i], fd) < 1e-3

    def test_inflation_direction(self):
        grid = sphere_grid(res=16)
        mesh = tetmesh.marching_tets(grid)
        mean_r = np.linalg.norm(mesh.vertices, axis=1).mean()
        up = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
        up /= mesh.num_vertices
        d_s, _ = tetmesh.marching_tets_backward(grid, mesh, up)
        grid.sdf += 0.05 * d_s / np.abs(d_s).max() * np.sign(1.0)  # ascend mean radius
        mesh2 = tetmesh.marching_tets(grid)
        assert np.linalg.norm(mesh2.vertices, axis=1).mean() > mean_r

    def test_stale_provenance_rejected(self):
        grid = sphere_grid()
        mesh = tetmesh.marching_tets(grid)
        grid.sdf *= 1.1
        with pytest.raises(StaleStateError):
            tetmesh.marching_tets_backward(grid, mesh, np.zeros((mesh.num_vertices, 3)))

    def test_loaded_mesh_rejected(self, tmp_path):
        grid = sphere_grid()
        mesh = tetmesh.marching_tets(grid)
        tetmesh.export_mesh(mesh, tmp_path / "m.obj")
        loaded = tetmesh.load_obj(tmp_path / "m.obj")
        with pytest.raises(StaleStateError):
            tetmesh.marching_tets_backward(grid, loaded, np.zeros((loaded.num_vertices, 3)))


class TestVertexNormals:
    def test_sphere_normals_radial(self):
        mesh = tetmesh.marching_tets(sphere_grid(res=24))
        radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
        cosang = np.clip(np.einsum("mc,mc->m", mesh.normals, radial), -1, 1)
        assert np.degrees(np.arccos(cosang)).mean() < 5.0

    def test_single_triangle_uniform(self):
        mesh = tetmesh.SurfaceMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
                                   np.array([[0, 1, 2]]))
        normals = tetmesh.vertex_normals(mesh)
        assert np.allclose(normals, [[0, 0, 1]] * 3)

    def test_flipped_winding_flips_normal(self):
        mesh = tetmesh.SurfaceMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
                                   np.array([[0, 2, 1]]))
        assert np.allclose(tetmesh.vertex_normals(mesh), [[0, 0, -1]] * 3)

    def test_isolated_vertex_errors(self):
        mesh = tetmesh.SurfaceMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]]),
                                   np.array([[0, 1, 2]]))
        with pytest.raises(Distill3DError):
            tetmesh.vertex_normals(mesh)

    def test_backward_matches_fd(self, rng):
        mesh = tetmesh.marching_tets(sphere_grid(res=10))
        up = rng.normal(size=(mesh.num_vertices, 3))
        grad = tetmesh.vertex_normals_backward(mesh, up)

        def loss():
            return float(np.sum(up * tetmesh.vertex_normals(mesh)))

        flat = grad.ravel()
        idx = rng.choice(np.nonzero(np.abs(flat) > 1e-6)[0], size=20, replace=False)
        for i in idx:
            orig = mesh.vertices.ravel()[i]
            mesh.vertices.ravel()[i] = orig + 1e-6
            fp = loss()
            mesh.vertices.ravel()[i] = orig - 1e-6
            fm = loss()
            mesh.vertices.ravel()[i] = orig
            assert rel_err(flat[i], (fp - fm) / 2e-6) < 1e-3


class TestExport:
    def test_obj_line_counts(self, tmp_path):
        mesh = tetmesh.SurfaceMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
                                   np.array([[0, 1, 2]]))
        mesh.normals = tetmesh.vertex_normals(mesh)
        path = tmp_path / "tri.obj"
        tetmesh.export_mesh(mesh, path)
        lines = path.read_text().splitlines()
        assert sum(l.startswith("v ") for l in lines) == 3
        assert sum(l.startswith("vn ") for l in lines) == 3
        faces = [l for l in lines if l.startswith("f ")]
        assert faces == ["f 1//1 2//2 3//3"]

    def test_roundtrip_vertices(self, tmp_path):
        mesh = tetmesh.marching_tets(sphere_grid(res=10))
        path = tmp_path / "s.obj"
        tetmesh.export_mesh(mesh, path)
        back = tetmesh.load_obj(path)
        assert back.num_faces == mesh.num_faces
        assert np.abs(back.vertices - mesh.vertices).max() < 1e-5

    def test_empty_mesh_warns(self, tmp_path, caplog):
        grid = tetmesh.build_tet_grid(8)
        grid.sdf = np.ones(grid.sdf.shape)
        mesh = tetmesh.marching_tets(grid)
        with caplog.at_level("WARNING"):
            tetmesh.export_mesh(mesh, tmp_path / "e.obj")
        assert any("empty" in r.message for r in caplog.records)
        assert (tmp_path / "e.obj").exists()

    def test_ply_with_colors(self, tmp_path, rng):
        mesh = tetmesh.marching_tets(sphere_grid(res=10))
        colors = rng.uniform(0, 1, (mesh.num_vertices, 3))
        tetmesh.export_mesh(mesh, tmp_path / "m.obj", colors=colors,
                            path_ply=tmp_path / "m.ply")
        text = (tmp_path / "m.ply").read_text().splitlines()
        assert text[0] == "ply"
        assert f"element vertex {mesh.num_vertices}" in text
        assert "property uchar red" in text
        header_end = text.index("end_header")
        first_vertex = text[header_end + 1].split()
        assert len(first_vertex) == 6
