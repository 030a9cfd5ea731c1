import numpy as np
import pytest

from shapefuse import autodiff as ad
from shapefuse import bodymodel as bm
from shapefuse import camera as cr
from shapefuse import network as net_mod
from shapefuse import synth
from shapefuse.containerio import ContainerError
from shapefuse.gaussians import GaussianDiag, PredictionSet
from shapefuse.rng import named_rng

TINY_ENCODER = dict(pool_to=16, channels=(2, 4, 8))


@pytest.fixture(scope="module")
def tiny_model():
    return bm.generate_toy_model(seed=5, num_vertices=120, num_joints=16)


@pytest.fixture(scope="module")
def tiny_net(tiny_model):
    return net_mod.PredictorNet.for_model(
        tiny_model, net_mod.EncoderConfig(**TINY_ENCODER), hidden=16, seed=0
    )


@pytest.fixture(scope="module")
def tiny_data(tiny_model):
    cfg = synth.GenerationConfig(image_size=64, focal_length=75.0)
    samples = synth.generate_dataset(
        tiny_model, cfg, synth.AugmentationConfig(), num_subjects=10,
        poses_per_subject=2, seed=3, corrupt=True,
    )
    return cfg, samples


def heads_from_prediction(pred, tape=None):
    arrays = {
        "pose_mean": pred.pose.mean[None],
        "pose_var": pred.pose.var[None],
        "shape_mean": pred.shape.mean[None],
        "shape_var": pred.shape.var[None],
        "glob": pred.global_rot[None],
        "camera": pred.camera[None],
    }
    if tape is None:
        return arrays, None
    leaves = {k: tape.variable(v) for k, v in arrays.items()}
    return leaves, leaves


class TestOutputContract:
    def test_output_dim_164_for_24_joint_body(self):
        model = bm.generate_toy_model(seed=1, num_vertices=150, num_joints=24)
        net = net_mod.PredictorNet.for_model(model)
        assert model.pose_dim == 69
        assert net.output_dim == 164
        sl = net.head_slices()
        widths = [sl[k].stop - sl[k].start for k in
                  ("pose_mean", "pose_logvar", "shape_mean", "shape_logvar", "glob", "camera")]
        assert widths == [69, 69, 10, 10, 3, 3]

    def test_zero_input_finite_positive_variances(self, tiny_net, tiny_model):
        L = tiny_model.num_keypoints
        proxy = cr.ProxyRepresentation(
            np.zeros((64, 64), dtype=np.uint8), np.zeros((64, 64, L))
        )
        pred = net_mod.forward_net(tiny_net, proxy)
        assert np.all(np.isfinite(pred.pose.mean))
        assert np.all(pred.pose.var > 0)
        assert np.all(pred.shape.var > 0)
        assert pred.camera[0] > 0

    def test_deterministic(self, tiny_net, tiny_data):
        _, samples = tiny_data
        p1 = net_mod.forward_net(tiny_net, samples[0].proxy)
        p2 = net_mod.forward_net(tiny_net, samples[0].proxy)
        np.testing.assert_array_equal(p1.pose.mean, p2.pose.mean)
        np.testing.assert_array_equal(p1.pose.var, p2.pose.var)
        np.testing.assert_array_equal(p1.camera, p2.camera)

    def test_positive_variances_on_random_inputs(self, tiny_net, tiny_model):
        rng = np.random.default_rng(0)
        L = tiny_model.num_keypoints
        pooled = rng.uniform(0, 1, size=(64, 16, 16, L + 1))
        heads = tiny_net.heads(pooled)
        assert np.all(heads["pose_var"] > 0)
        assert np.all(heads["shape_var"] > 0)
        assert np.all(heads["camera"][:, 0] > 0)

    def test_channel_mismatch_rejected(self, tiny_net):
        proxy = cr.ProxyRepresentation(np.zeros((64, 64), dtype=np.uint8),
                                       np.zeros((64, 64, 3)))
        with pytest.raises(ValueError):
            net_mod.forward_net(tiny_net, proxy)


class TestEncoderConfig:
    def test_feature_dim_floor(self):
        with pytest.raises(ValueError):
            net_mod.EncoderConfig(pool_to=8, channels=(2, 2, 2)).validate()

    def test_default_is_valid(self):
        cfg = net_mod.EncoderConfig()
        cfg.validate()
        assert cfg.feature_dim == 8 * 8 * 32


class TestGlobalRotationLoss:
    def test_zero_at_equality(self):
        g = np.array([0.3, -0.5, 0.2])
        assert float(ad.value_of(net_mod.loss_glob(g, g))) == pytest.approx(0.0)

    def test_pi_rotation_gives_eight(self):
        # trace identity: |R1 - R2|_F^2 = 6 - 2 tr(R1^T R2) = 8 at angle pi
        g = np.array([0.0, 0.0, 0.0])
        g_hat = np.array([np.pi - 1e-12, 0.0, 0.0])
        val = float(ad.value_of(net_mod.loss_glob(g_hat, g)))
        assert val == pytest.approx(8.0, abs=1e-9)

    def test_trace_identity_random(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rng.normal(scale=0.7, size=(2, 3))
            val = float(ad.value_of(net_mod.loss_glob(a, b)))
            Ra, Rb = np.asarray(bm.rodrigues(a)), np.asarray(bm.rodrigues(b))
            want = 6.0 - 2.0 * np.trace(Rb.T @ Ra)
            assert val == pytest.approx(want, abs=1e-9)

    def test_gradient_matches_fd(self):
        target = np.array([0.2, 0.4, -0.3])

        def f(xs):
            return net_mod.loss_glob(ad.stack(xs), target)

        rng = np.random.default_rng(2)
        for _ in range(5):
            assert ad.grad_check(f, rng.normal(scale=0.6, size=3)) < 1e-4


class TestReprojectionLoss:
    def _make_pred(self, model, var=1e-4):
        P = model.pose_dim
        rng = np.random.default_rng(3)
        return PredictionSet(
            pose=GaussianDiag(rng.normal(scale=0.2, size=P), np.full(P, var)),
            shape=GaussianDiag(rng.normal(scale=0.5, size=10), np.full(10, var)),
            global_rot=rng.normal(scale=0.3, size=3),
            camera=np.array([0.9, 0.05, -0.02]),
        )

    def test_all_invisible_gives_zero(self, tiny_model):
        pred = self._make_pred(tiny_model)
        L = tiny_model.num_keypoints
        loss = net_mod.loss_reproj(pred, tiny_model, np.zeros((L, 2)),
                                   np.zeros(L, dtype=int), 4, named_rng(0, "r"))
        assert loss == 0.0

    def test_degenerate_distribution_recovers_targets(self, tiny_model):
        pred = self._make_pred(tiny_model, var=1e-18)
        mesh = bm.forward(tiny_model, pred.pose.mean, pred.shape.mean, pred.global_rot)
        joints3d = np.asarray(bm.regress_joints(tiny_model, mesh))
        targets = np.asarray(cr.project_weak(joints3d, pred.camera))
        L = tiny_model.num_keypoints
        loss = net_mod.loss_reproj(pred, tiny_model, targets, np.ones(L, dtype=int),
                                   4, named_rng(1, "r"))
        assert loss < 1e-12

    def test_gradients_match_fd_with_frozen_noise(self, tiny_model):
        model = tiny_model
        P = model.pose_dim
        reduced = net_mod.reduced_for_keypoints(model)
        rng = np.random.default_rng(4)
        L = model.num_keypoints
        joints_norm = rng.uniform(-0.8, 0.8, size=(1, L, 2))
        vis = (rng.random((1, L)) < 0.8).astype(np.int64)
        n_draws = 2
        noise_pose = rng.standard_normal((1, n_draws, P))
        noise_shape = rng.standard_normal((1, n_draws, 10))

        x0 = np.concatenate([
            rng.normal(scale=0.2, size=P),      # pose mean
            rng.uniform(-2, 0, size=P),         # pose log-var
            rng.normal(scale=0.5, size=10),     # shape mean
            rng.uniform(-2, 0, size=10),        # shape log-var
            rng.normal(scale=0.3, size=3),      # glob
            [0.0, 0.05, -0.05],                 # camera (log-scale, tx, ty)
        ])

        def f(xs):
            stacked = ad.stack(xs)
            heads = {
                "pose_mean": ad.reshape(stacked[:P], (1, P)),
                "pose_var": ad.reshape(ad.exp(stacked[P : 2 * P]), (1, P)),
                "shape_mean": ad.reshape(stacked[2 * P : 2 * P + 10], (1, 10)),
                "shape_var": ad.reshape(ad.exp(stacked[2 * P + 10 : 2 * P + 20]), (1, 10)),
                "glob": ad.reshape(stacked[2 * P + 20 : 2 * P + 23], (1, 3)),
                "camera": ad.reshape(
                    ad.concat([ad.exp(stacked[2 * P + 23 : 2 * P + 24]),
                               stacked[2 * P + 24 :]]),
                    (1, 3),
                ),
            }
            return net_mod.loss_reproj_batch(heads, reduced, joints_norm, vis,
                                             noise_pose, noise_shape)

        assert ad.grad_check(f, x0, step=1e-5) < 1e-4

    def test_estimator_mean_independent_of_draw_count(self, tiny_model):
        # per-draw average has the same expectation for any B (3 SE check)
        pred = self._make_pred(tiny_model, var=0.05)
        mesh = bm.forward(tiny_model, pred.pose.mean, pred.shape.mean, pred.global_rot)
        joints3d = np.asarray(bm.regress_joints(tiny_model, mesh))
        targets = np.asarray(cr.project_weak(joints3d, pred.camera))
        L = tiny_model.num_keypoints
        vis = np.ones(L, dtype=int)

        def estimate(n_draws, n_rep, key):
            vals = []
            for i in range(n_rep):
                v = net_mod.loss_reproj(pred, tiny_model, targets, vis, n_draws,
                                        named_rng(key, "mc", i))
                vals.append(v / n_draws)
            return np.array(vals)

        a = estimate(1, 2500, 10)
        b = estimate(4, 650, 11)
        se = np.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
        assert abs(a.mean() - b.mean()) <= 3 * se


class TestTotalLoss:
    def _setup(self, tiny_model, tiny_net, tiny_data):
        gen_cfg, samples = tiny_data
        ds_targets = {
            "theta": np.stack([s.theta for s in samples[:4]]),
            "beta": np.stack([s.beta for s in samples[:4]]),
            "glob": np.stack([s.glob for s in samples[:4]]),
            "joints_norm": np.stack(
                [cr.normalize_pixels(s.joints2d, 64, 64) for s in samples[:4]]
            ),
            "visibility": np.stack([s.visibility for s in samples[:4]]),
        }
        pooled = np.stack(
            [net_mod.average_pool(s.proxy.stacked(), 16) for s in samples[:4]]
        )
        return pooled, ds_targets

    def test_zero_lambdas_equals_nll(self, tiny_model, tiny_net, tiny_data):
        pooled, targets = self._setup(tiny_model, tiny_net, tiny_data)
        reduced = net_mod.reduced_for_keypoints(tiny_model)
        heads = tiny_net.heads(pooled)
        cfg = net_mod.TrainConfig(lambda_glob=0.0, lambda_2d=0.0, reproj_samples=2)
        noise_p = np.zeros((4, 2, tiny_model.pose_dim))
        noise_s = np.zeros((4, 2, 10))
        total, parts = net_mod.loss_total_batch(heads, targets, reduced, cfg, noise_p, noise_s)
        assert float(ad.value_of(total)) == pytest.approx(parts["nll"])

    def test_additivity_in_lambdas(self, tiny_model, tiny_net, tiny_data):
        pooled, targets = self._setup(tiny_model, tiny_net, tiny_data)
        reduced = net_mod.reduced_for_keypoints(tiny_model)
        heads = tiny_net.heads(pooled)
        rng = named_rng(0, "noise")
        noise_p = rng.standard_normal((4, 2, tiny_model.pose_dim))
        noise_s = rng.standard_normal((4, 2, 10))

        def total_for(lg, l2):
            cfg = net_mod.TrainConfig(lambda_glob=lg, lambda_2d=l2, reproj_samples=2)
            t, parts = net_mod.loss_total_batch(heads, targets, reduced, cfg, noise_p, noise_s)
            return float(ad.value_of(t)), parts

        t_full, parts = total_for(1.0, 0.01)
        t_zero, _ = total_for(0.0, 0.0)
        assert t_full - t_zero == pytest.approx(
            parts["glob"] + 0.01 * parts["reproj"], rel=1e-9
        )

    def test_finite_on_random_net(self, tiny_model, tiny_net, tiny_data):
        pooled, targets = self._setup(tiny_model, tiny_net, tiny_data)
        reduced = net_mod.reduced_for_keypoints(tiny_model)
        heads = tiny_net.heads(pooled)
        cfg = net_mod.TrainConfig(reproj_samples=2)
        rng = named_rng(1, "noise")
        total, _ = net_mod.loss_total_batch(
            heads, targets, reduced, cfg,
            rng.standard_normal((4, 2, tiny_model.pose_dim)),
            rng.standard_normal((4, 2, 10)),
        )
        assert np.isfinite(float(ad.value_of(total)))


class TestTraining:
    def test_smoke_one_epoch(self, tiny_model, tiny_data):
        _, samples = tiny_data
        net = net_mod.PredictorNet.for_model(
            tiny_model, net_mod.EncoderConfig(**TINY_ENCODER), hidden=16, seed=1
        )
        cfg = net_mod.TrainConfig(epochs=1, batch_size=5, reproj_samples=2, seed=0)
        log = net_mod.train(net, samples[:10], cfg, tiny_model)
        assert len(log) == 1
        assert np.isfinite(log[0]["total"])

    @pytest.mark.slow
    def test_overfits_small_set(self, tiny_model, tiny_data):
        _, samples = tiny_data
        net = net_mod.PredictorNet.for_model(
            tiny_model, net_mod.EncoderConfig(**TINY_ENCODER), hidden=16, seed=2
        )
        cfg = net_mod.TrainConfig(epochs=500, batch_size=20, learning_rate=3e-4,
                                  reproj_samples=2, seed=0)
        log = net_mod.train(net, samples[:20], cfg, tiny_model)
        assert log[-1]["nll"] < log[0]["nll"]

    def test_same_seed_identical_weights(self, tiny_model, tiny_data):
        _, samples = tiny_data

        def run():
            net = net_mod.PredictorNet.for_model(
                tiny_model, net_mod.EncoderConfig(**TINY_ENCODER), hidden=16, seed=3
            )
            cfg = net_mod.TrainConfig(epochs=2, batch_size=7, reproj_samples=2, seed=5)
            net_mod.train(net, samples[:14], cfg, tiny_model)
            return net.params

        p1, p2 = run(), run()
        for k in p1:
            np.testing.assert_array_equal(p1[k], p2[k])


class TestWeightsIO:
    def test_round_trip_bit_exact(self, tiny_net, tmp_path):
        path = tmp_path / "w.sfw"
        opt = net_mod.AdamState(tiny_net.params)
        opt.t = 17
        net_mod.save_weights(path, tiny_net, opt, epoch=3)
        loaded, opt2, meta = net_mod.load_weights(path)
        assert meta["epoch"] == 3
        assert opt2.t == 17
        for k in tiny_net.params:
            np.testing.assert_array_equal(loaded.params[k], tiny_net.params[k])

    def test_checksum_corruption_detected(self, tiny_net, tmp_path):
        path = tmp_path / "w.sfw"
        net_mod.save_weights(path, tiny_net)
        data = bytearray(path.read_bytes())
        data[-5] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(ContainerError):
            net_mod.load_weights(path)

    def test_shape_mismatch_detected(self, tiny_net, tiny_model, tmp_path):
        path = tmp_path / "w.sfw"
        other = net_mod.PredictorNet.for_model(
            tiny_model, net_mod.EncoderConfig(**TINY_ENCODER), hidden=24, seed=0
        )
        net_mod.save_weights(path, other)
        loaded, _, meta = net_mod.load_weights(path)  # same layout reloads fine
        assert loaded.hidden == 24


class TestPooling:
    def test_pooled_from_dataset_matches_full_resolution(self, tiny_model, tmp_path):
        gen_cfg = synth.GenerationConfig(image_size=64, focal_length=75.0)
        aug = synth.AugmentationConfig()
        samples = synth.generate_dataset(tiny_model, gen_cfg, aug, 2, 2, seed=9, corrupt=True)
        path = tmp_path / "d.sfd"
        synth.write_dataset(path, samples, gen_cfg, aug, seed=9)
        ds = synth.read_dataset(path)
        for i in range(len(ds)):
            fast = net_mod.pooled_from_dataset(ds, i, 16)
            full = net_mod.average_pool(ds.sample(i).proxy.stacked(), 16)
            np.testing.assert_allclose(fast, full, atol=1e-12)

    def test_average_pool_rejects_indivisible(self):
        with pytest.raises(ValueError):
            net_mod.average_pool(np.zeros((50, 50, 2)), 16)
