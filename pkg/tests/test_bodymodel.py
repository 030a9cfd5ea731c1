import numpy as np
import pytest

from shapefuse import autodiff as ad
from shapefuse import bodymodel as bm
from shapefuse.containerio import ContainerError


@pytest.fixture(scope="module")
def toy():
    return bm.generate_toy_model(seed=11, num_vertices=300, num_joints=16)


class TestRodrigues:
    def test_zero_gives_identity(self):
        np.testing.assert_allclose(bm.rodrigues(np.zeros(3)), np.eye(3), atol=1e-15)

    def test_quarter_turn_about_x(self):
        R = bm.rodrigues(np.array([np.pi / 2, 0.0, 0.0]))
        np.testing.assert_allclose(R @ np.array([0.0, 1.0, 0.0]), [0.0, 0.0, 1.0], atol=1e-12)

    def test_orthonormal_det_plus_one(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            aa = rng.uniform(-np.pi * 0.95, np.pi * 0.95, 3)
            R = np.asarray(bm.rodrigues(aa))
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
            assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)

    def test_round_trip_via_inverse_map(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            aa = axis * rng.uniform(1e-4, np.pi - 1e-3)
            back = bm.rotation_to_axis_angle(np.asarray(bm.rodrigues(aa)))
            np.testing.assert_allclose(back, aa, atol=1e-9)

    def test_gradient_matches_fd_incl_origin(self):
        def f(xs):
            R = bm.rodrigues(ad.stack(xs, axis=-1))
            return ad.sum_(R * np.arange(9.0).reshape(3, 3))

        assert ad.grad_check(f, [0.3, -0.2, 0.9]) < 1e-6
        assert ad.grad_check(f, [0.0, 0.0, 0.0]) < 1e-6

    def test_batched_shape(self):
        aa = np.zeros((4, 5, 3))
        assert np.asarray(bm.rodrigues(aa)).shape == (4, 5, 3, 3)


class TestForward:
    def test_neutral_pose_is_template_exact(self, toy):
        mesh = bm.forward(toy, np.zeros(toy.pose_dim), np.zeros(10), np.zeros(3))
        np.testing.assert_array_equal(mesh.vertices, toy.template_vertices)

    def test_shape_basis_is_linear(self, toy):
        e1 = np.zeros(10)
        e1[0] = 1.0
        mesh = bm.forward(toy, np.zeros(toy.pose_dim), e1, np.zeros(3))
        np.testing.assert_allclose(
            mesh.vertices, toy.template_vertices + toy.shape_basis[:, :, 0], atol=1e-12
        )

    def test_global_rotation_is_rigid_transform(self, toy):
        # rigid-transform oracle: rotate the neutral mesh about the root pivot
        gamma = np.array([0.0, np.pi, 0.0])
        mesh = bm.forward(toy, np.zeros(toy.pose_dim), np.zeros(10), gamma)
        R = np.asarray(bm.rodrigues(gamma))
        root = toy.skeleton_regressor[0] @ toy.template_vertices
        expected = (toy.template_vertices - root) @ R.T + root
        np.testing.assert_allclose(mesh.vertices, expected, atol=1e-9)

    def test_additivity_in_shape_at_zero_pose(self, toy):
        rng = np.random.default_rng(2)
        b1, b2 = rng.normal(size=10), rng.normal(size=10)
        zero = np.zeros(toy.pose_dim)
        g = np.zeros(3)
        f = lambda b: bm.forward(toy, zero, b, g).vertices
        lhs = f(b1 + b2) - f(b1)
        rhs = f(b2) - f(np.zeros(10))
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_rigid_equivariance_of_root_rotation(self, toy):
        rng = np.random.default_rng(3)
        pose = rng.normal(scale=0.2, size=toy.pose_dim)
        betas = rng.normal(size=10)
        gamma = rng.normal(scale=0.4, size=3)
        rho = rng.normal(scale=0.4, size=3)
        composed = bm.compose_rotations(rho, gamma)

        v1 = bm.forward(toy, pose, betas, composed).vertices
        v0 = bm.forward(toy, pose, betas, gamma).vertices
        root = toy.skeleton_regressor[0] @ (
            toy.template_vertices + toy.shape_basis @ betas
        )
        R = np.asarray(bm.rodrigues(rho))
        np.testing.assert_allclose(v1, (v0 - root) @ R.T + root, atol=1e-9)

    def test_dimension_mismatch_rejected(self, toy):
        with pytest.raises(ValueError):
            bm.forward(toy, np.zeros(toy.pose_dim + 1), np.zeros(10), np.zeros(3))
        with pytest.raises(ValueError):
            bm.forward(toy, np.zeros(toy.pose_dim), np.zeros(9), np.zeros(3))

    def test_jacobians_match_finite_differences(self):
        # directional derivative probe over 20 random configurations
        model = bm.generate_toy_model(seed=5, num_vertices=120, num_joints=8)
        rng = np.random.default_rng(4)
        P = model.pose_dim
        worst = 0.0
        for _ in range(20):
            pose = rng.normal(scale=0.3, size=P)
            betas = rng.normal(scale=1.0, size=10)
            gamma = rng.normal(scale=0.5, size=3)
            probe = rng.normal(size=(model.num_vertices, 3))

            def f(xs):
                p = ad.stack(xs[:P])
                b = ad.stack(xs[P : P + 10])
                g = ad.stack(xs[P + 10 :])
                verts = bm.forward(model, p, b, g).vertices
                return ad.sum_(verts * probe)

            x0 = np.concatenate([pose, betas, gamma])
            worst = max(worst, ad.grad_check(f, x0, step=1e-5))
        assert worst < 1e-4


class TestRegressJoints:
    def test_one_hot_row_selects_vertex(self, toy):
        mesh = bm.neutral_pose_mesh(toy, np.zeros(10))
        model2 = bm.BodyModel(**{**toy.__dict__})
        row = np.zeros(toy.num_vertices)
        row[7] = 1.0
        model2.joint_regressor = np.vstack([row, toy.joint_regressor[1:]])
        joints = bm.regress_joints(model2, mesh)
        np.testing.assert_allclose(joints[0], mesh.vertices[7])

    def test_uniform_row_gives_centroid(self, toy):
        mesh = bm.neutral_pose_mesh(toy, np.zeros(10))
        model2 = bm.BodyModel(**{**toy.__dict__})
        model2.joint_regressor = np.full(
            (1, toy.num_vertices), 1.0 / toy.num_vertices
        )
        joints = bm.regress_joints(model2, mesh)
        np.testing.assert_allclose(joints[0], mesh.vertices.mean(axis=0), atol=1e-12)

    def test_neutral_joints_inside_bounding_box(self, toy):
        mesh = bm.neutral_pose_mesh(toy, np.zeros(10))
        joints = bm.regress_joints(toy, mesh)
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        assert np.all(joints >= lo - 1e-9) and np.all(joints <= hi + 1e-9)

    def test_vertex_count_mismatch(self, toy):
        with pytest.raises(ValueError):
            bm.regress_joints(toy, np.zeros((toy.num_vertices + 1, 3)))


class TestNeutralPose:
    def test_matches_forward_zero(self, toy):
        betas = np.full(10, 0.5)
        a = bm.neutral_pose_mesh(toy, betas).vertices
        b = bm.forward(toy, np.zeros(toy.pose_dim), betas, np.zeros(3)).vertices
        np.testing.assert_array_equal(a, b)

    def test_second_basis_direction(self, toy):
        e2 = np.zeros(10)
        e2[1] = 1.0
        mesh = bm.neutral_pose_mesh(toy, e2)
        np.testing.assert_allclose(
            mesh.vertices, toy.template_vertices + toy.shape_basis[:, :, 1], atol=1e-12
        )

    def test_height_positive(self, toy):
        mesh = bm.neutral_pose_mesh(toy, np.zeros(10))
        assert mesh.vertices[:, 1].max() - mesh.vertices[:, 1].min() > 0


class TestToyGenerator:
    def test_same_seed_identical(self):
        m1 = bm.generate_toy_model(seed=3, num_vertices=150, num_joints=12)
        m2 = bm.generate_toy_model(seed=3, num_vertices=150, num_joints=12)
        np.testing.assert_array_equal(m1.template_vertices, m2.template_vertices)
        np.testing.assert_array_equal(m1.skinning_weights, m2.skinning_weights)
        np.testing.assert_array_equal(m1.shape_basis, m2.shape_basis)

    def test_different_seed_differs(self):
        m1 = bm.generate_toy_model(seed=3, num_vertices=150)
        m2 = bm.generate_toy_model(seed=4, num_vertices=150)
        assert not np.array_equal(m1.template_vertices, m2.template_vertices)

    @pytest.mark.parametrize("V,J", [(600, 16), (600, 24), (120, 8), (50, 9)])
    def test_invariants_across_budgets(self, V, J):
        model = bm.generate_toy_model(seed=7, num_vertices=V, num_joints=J)
        model.validate()
        assert model.num_vertices == V
        assert model.num_joints == J
        assert model.num_keypoints == 17
        assert model.pose_dim == 3 * (J - 1)

    def test_24_joint_model_has_69_pose_dims(self):
        model = bm.generate_toy_model(seed=0, num_vertices=120, num_joints=24)
        assert model.pose_dim == 69

    def test_invalid_sizes_rejected(self):
        with pytest.raises(ValueError):
            bm.generate_toy_model(seed=0, num_vertices=10)
        with pytest.raises(ValueError):
            bm.generate_toy_model(seed=0, num_vertices=100, num_joints=4)


class TestModelIO:
    def test_round_trip_bit_exact(self, toy, tmp_path):
        path = tmp_path / "model.sfc"
        bm.save_model(path, toy)
        loaded = bm.load_model(path)
        np.testing.assert_array_equal(loaded.template_vertices, toy.template_vertices)
        np.testing.assert_array_equal(loaded.shape_basis, toy.shape_basis)
        np.testing.assert_array_equal(loaded.skinning_weights, toy.skinning_weights)
        np.testing.assert_array_equal(loaded.parents, toy.parents)
        np.testing.assert_array_equal(loaded.faces, toy.faces)
        assert loaded.joint_names == toy.joint_names
        assert loaded.meta["measurements"] == toy.meta["measurements"]

    def test_truncated_file_rejected(self, toy, tmp_path):
        path = tmp_path / "model.sfc"
        bm.save_model(path, toy)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(ContainerError):
            bm.load_model(path)

    def test_wrong_magic_rejected(self, toy, tmp_path):
        path = tmp_path / "model.sfc"
        bm.save_model(path, toy)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(ContainerError):
            bm.load_model(path)
