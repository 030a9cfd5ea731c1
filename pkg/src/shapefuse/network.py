"""Distribution-prediction network and its training losses.

A small convolutional encoder (average-pooled proxy input, three stride-2
stages) feeds an MLP with one 512-unit hidden layer and a single output
layer whose width is 2*pose_dim + 2*shape_dim + 6 — 164 for a 24-joint
body. Variance heads pass through a clamped exponential so they are always
strictly positive; the camera scale gets the same treatment.

Training minimizes

    total = nll + lambda_glob * glob + lambda_2d * reproj

where the reprojection term pushes B reparameterized samples from the
predicted distributions through the body model and weak-perspective
projection onto the visible target keypoints (normalized image
coordinates).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import bodymodel as bm
from . import camera as cr
from .containerio import ContainerError, read_container, write_container
from .gaussians import GaussianDiag, PredictionSet, gaussian_nll, reparam_sample
from .rng import named_rng

LOGVAR_CLAMP = 12.0
LOGSCALE_CLAMP = 6.0
WEIGHTS_VERSION = "1"


class TrainDivergenceError(RuntimeError):
    """Loss became non-finite; message carries the batch index and weight norm."""


@dataclass
class EncoderConfig:
    """Convolutional feature extractor layout."""

    pool_to: int = 64            # proxy is average-pooled to this square size
    channels: tuple = (8, 16, 32)
    kernel: int = 3

    @property
    def feature_dim(self) -> int:
        side = self.pool_to // (2 ** len(self.channels))
        return side * side * self.channels[-1]

    def validate(self):
        if self.pool_to % (2 ** len(self.channels)) != 0:
            raise ValueError("pooled size must survive the stride-2 stages")
        if self.feature_dim < 32:
            raise ValueError("encoder feature dimension must be at least 32")


@dataclass
class TrainConfig:
    """Adam training hyperparameters (desk-scale defaults)."""

    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    lambda_glob: float = 1.0
    lambda_2d: float = 0.01
    reproj_samples: int = 8    # reparameterized draws per example
    seed: int = 0

    def validate(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("learning rate, batch size and epochs must be positive")
        if self.reproj_samples < 1:
            raise ValueError("need at least one reprojection sample")


def _conv_indices(h, w, c_in, kernel, stride):
    """Patch-gather indices into a flattened (H*W*C + 1) layout; index
    H*W*C is the zero-padding sentinel."""
    pad = kernel // 2
    out_h = (h + 2 * pad - kernel) // stride + 1
    out_w = (w + 2 * pad - kernel) // stride + 1
    sentinel = h * w * c_in
    idx = np.empty((out_h * out_w, kernel * kernel * c_in), dtype=np.int64)
    pos = 0
    for orow in range(out_h):
        for ocol in range(out_w):
            k = 0
            for kr in range(kernel):
                for kc in range(kernel):
                    ir = orow * stride - pad + kr
                    ic = ocol * stride - pad + kc
                    inside = 0 <= ir < h and 0 <= ic < w
                    base = (ir * w + ic) * c_in if inside else sentinel
                    for ch in range(c_in):
                        idx[pos, k] = base + ch if inside else sentinel
                        k += 1
            pos += 1
    return idx, out_h, out_w


def elu(x):
    xv = ad.value_of(x)
    return ad.where(xv > 0, x, ad.exp(ad.clamp(x, hi=0.0)) - 1.0)


def average_pool(images: np.ndarray, out_size: int) -> np.ndarray:
    """(..., H, W, C) -> (..., out, out, C) by block averaging."""
    h, w = images.shape[-3], images.shape[-2]
    if h == out_size and w == out_size:
        return images
    if h % out_size or w % out_size:
        raise ValueError(f"image size {h}x{w} not divisible by pooled size {out_size}")
    f = h // out_size
    lead = images.shape[:-3]
    c = images.shape[-1]
    reshaped = images.reshape(lead + (out_size, f, out_size, f, c))
    return reshaped.mean(axis=(-4, -2))


class PredictorNet:
    """Weights plus layout; immutable shapes, mutable parameter values."""

    def __init__(self, pose_dim: int, shape_dim: int, in_channels: int,
                 encoder: EncoderConfig = None, hidden: int = 512, seed: int = 0):
        encoder = encoder or EncoderConfig()
        encoder.validate()
        self.pose_dim = pose_dim
        self.shape_dim = shape_dim
        self.in_channels = in_channels
        self.encoder = encoder
        self.hidden = hidden

        self.params: dict[str, np.ndarray] = {}
        c_prev = in_channels
        k = encoder.kernel
        for i, c_out in enumerate(encoder.channels):
            fan_in = k * k * c_prev
            rng = named_rng(seed, "init", f"conv{i}")
            self.params[f"conv{i}_w"] = rng.normal(0, np.sqrt(2.0 / fan_in), (fan_in, c_out))
            self.params[f"conv{i}_b"] = np.zeros(c_out)
            c_prev = c_out
        rng = named_rng(seed, "init", "dense0")
        self.params["dense0_w"] = rng.normal(
            0, np.sqrt(2.0 / encoder.feature_dim), (encoder.feature_dim, hidden)
        )
        self.params["dense0_b"] = np.zeros(hidden)
        rng = named_rng(seed, "init", "dense1")
        self.params["dense1_w"] = rng.normal(0, 0.01, (hidden, self.output_dim))
        self.params["dense1_b"] = np.zeros(self.output_dim)

        # gather index tables per conv stage (static for the layout)
        self._conv_tables = []
        h = w = encoder.pool_to
        c_prev = in_channels
        for c_out in encoder.channels:
            idx, h, w = _conv_indices(h, w, c_prev, k, stride=2)
            self._conv_tables.append(idx)
            c_prev = c_out

    @classmethod
    def for_model(cls, model: bm.BodyModel, encoder: EncoderConfig = None,
                  hidden: int = 512, seed: int = 0) -> "PredictorNet":
        return cls(model.pose_dim, model.shape_dim, model.num_keypoints + 1,
                   encoder, hidden, seed)

    @property
    def output_dim(self) -> int:
        return 2 * self.pose_dim + 2 * self.shape_dim + 6

    def head_slices(self) -> dict:
        p, s = self.pose_dim, self.shape_dim
        return {
            "pose_mean": slice(0, p),
            "pose_logvar": slice(p, 2 * p),
            "shape_mean": slice(2 * p, 2 * p + s),
            "shape_logvar": slice(2 * p + s, 2 * p + 2 * s),
            "glob": slice(2 * p + 2 * s, 2 * p + 2 * s + 3),
            "camera": slice(2 * p + 2 * s + 3, 2 * p + 2 * s + 6),
        }

    # ---- forward ---------------------------------------------------------

    def raw_outputs(self, pooled: np.ndarray, params: dict = None):
        """Encoder + MLP on pooled inputs (B, pool, pool, C) -> (B, out_dim).

        `params` may map names to tape nodes for differentiable evaluation;
        defaults to the stored numpy weights.
        """
        if params is None:
            params = self.params
        B = pooled.shape[0]
        if pooled.shape[1] != self.encoder.pool_to or pooled.shape[3] != self.in_channels:
            raise ValueError(
                f"expected pooled input (B, {self.encoder.pool_to}, "
                f"{self.encoder.pool_to}, {self.in_channels})"
            )
        x = pooled.reshape(B, -1)
        for i in range(len(self.encoder.channels)):
            idx = self._conv_tables[i]
            if isinstance(x, np.ndarray):
                cols = np.concatenate([x, np.zeros((B, 1))], axis=1)[:, idx.ravel()]
            else:
                padded = ad.concat([x, np.zeros((B, 1))], axis=1)
                cols = padded[:, idx.ravel()]
            cols = ad.reshape(cols, (B, idx.shape[0], idx.shape[1]))
            out = ad.matmul(cols, params[f"conv{i}_w"]) + params[f"conv{i}_b"]
            out = elu(out)
            x = ad.reshape(out, (B, -1))
        h = elu(ad.matmul(x, params["dense0_w"]) + params["dense0_b"])
        return ad.matmul(h, params["dense1_w"]) + params["dense1_b"]

    def heads(self, pooled: np.ndarray, params: dict = None) -> dict:
        """Named output heads with positivity maps applied to the variances
        and the camera scale."""
        raw = self.raw_outputs(pooled, params)
        sl = self.head_slices()
        pose_var = ad.exp(ad.clamp(raw[:, sl["pose_logvar"]], -LOGVAR_CLAMP, LOGVAR_CLAMP))
        shape_var = ad.exp(ad.clamp(raw[:, sl["shape_logvar"]], -LOGVAR_CLAMP, LOGVAR_CLAMP))
        cam_raw = raw[:, sl["camera"]]
        cam_scale = ad.exp(ad.clamp(cam_raw[:, 0:1], -LOGSCALE_CLAMP, LOGSCALE_CLAMP))
        camera = ad.concat([cam_scale, cam_raw[:, 1:3]], axis=1)
        return {
            "pose_mean": raw[:, sl["pose_mean"]],
            "pose_var": pose_var,
            "shape_mean": raw[:, sl["shape_mean"]],
            "shape_var": shape_var,
            "glob": raw[:, sl["glob"]],
            "camera": camera,
        }


def pooled_input(net: PredictorNet, stacked: np.ndarray) -> np.ndarray:
    return average_pool(stacked, net.encoder.pool_to)


def pooled_from_dataset(dataset, index: int, pool_to: int) -> np.ndarray:
    """Pooled proxy (pool, pool, L+1) straight from packed dataset arrays.

    Skips materializing the full-resolution heatmap stack: each Gaussian
    window is block-averaged over an aligned sub-region only. Heatmap
    channels land at slots 1..L, silhouette at 0, matching
    ProxyRepresentation.stacked().
    """
    size = dataset.image_size
    if size % pool_to:
        raise ValueError(f"image size {size} not divisible by pooled size {pool_to}")
    f = size // pool_to
    joints2d = dataset.arrays["joints2d"][index]
    visibility = dataset.arrays["visibility"][index]
    sigma = dataset.heatmap_sigma
    L = joints2d.shape[0]

    out = np.zeros((pool_to, pool_to, L + 1))
    sil = dataset.silhouette(index).astype(np.float64)
    out[:, :, 0] = sil.reshape(pool_to, f, pool_to, f).mean(axis=(1, 3))

    radius = int(np.ceil(4 * sigma))
    for l in range(L):
        if not visibility[l]:
            continue
        cx = int(np.rint(joints2d[l, 0]))
        cy = int(np.rint(joints2d[l, 1]))
        lo_c, hi_c = max(cx - radius, 0), min(cx + radius, size - 1)
        lo_r, hi_r = max(cy - radius, 0), min(cy + radius, size - 1)
        if lo_c > hi_c or lo_r > hi_r:
            continue
        alo_c, ahi_c = (lo_c // f) * f, ((hi_c // f) + 1) * f - 1
        alo_r, ahi_r = (lo_r // f) * f, ((hi_r // f) + 1) * f - 1
        buf = np.zeros((ahi_r - alo_r + 1, ahi_c - alo_c + 1))
        cs = np.arange(lo_c, hi_c + 1)
        rs = np.arange(lo_r, hi_r + 1)[:, None]
        buf[lo_r - alo_r : hi_r - alo_r + 1, lo_c - alo_c : hi_c - alo_c + 1] = np.exp(
            -((cs - cx) ** 2 + (rs - cy) ** 2) / (2.0 * sigma**2)
        )
        pooled = buf.reshape(buf.shape[0] // f, f, buf.shape[1] // f, f).mean(axis=(1, 3))
        out[alo_r // f : (ahi_r + 1) // f, alo_c // f : (ahi_c + 1) // f, l + 1] = pooled
    return out


def forward_net(net: PredictorNet, proxy: cr.ProxyRepresentation) -> PredictionSet:
    """Single proxy input -> PredictionSet (deterministic, variances > 0)."""
    stacked = proxy.stacked()
    if stacked.shape[2] != net.in_channels:
        raise ValueError("proxy channel count does not match the network")
    heads = net.heads(pooled_input(net, stacked)[None])
    return PredictionSet(
        pose=GaussianDiag(heads["pose_mean"][0], heads["pose_var"][0]),
        shape=GaussianDiag(heads["shape_mean"][0], heads["shape_var"][0]),
        global_rot=heads["glob"][0],
        camera=heads["camera"][0],
    )


def _heads_to_predictions(heads: dict, count: int) -> list:
    return [
        PredictionSet(
            pose=GaussianDiag(heads["pose_mean"][i], heads["pose_var"][i]),
            shape=GaussianDiag(heads["shape_mean"][i], heads["shape_var"][i]),
            global_rot=heads["glob"][i],
            camera=heads["camera"][i],
        )
        for i in range(count)
    ]


def predict_batch(net: PredictorNet, proxies: list) -> list:
    stacked = np.stack([p.stacked() for p in proxies])
    heads = net.heads(average_pool(stacked, net.encoder.pool_to))
    return _heads_to_predictions(heads, len(proxies))


def predict_dataset(net: PredictorNet, dataset, chunk: int = 256) -> list:
    """One PredictionSet per dataset sample, in index order."""
    out = []
    for start in range(0, len(dataset), chunk):
        idx = range(start, min(start + chunk, len(dataset)))
        pooled = np.stack(
            [pooled_from_dataset(dataset, i, net.encoder.pool_to) for i in idx]
        )
        heads = net.heads(pooled)
        out.extend(_heads_to_predictions(heads, len(pooled)))
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def reduced_for_keypoints(model: bm.BodyModel) -> bm.BodyModel:
    """Slice the model down to the vertices the keypoint and skeleton
    regressors actually touch; keypoint outputs are unchanged, the LBS pass
    inside the reprojection loss gets much cheaper."""
    support = np.flatnonzero(
        (model.joint_regressor > 0).any(axis=0) | (model.skeleton_regressor > 0).any(axis=0)
    )
    return bm.BodyModel(
        template_vertices=model.template_vertices[support],
        shape_basis=model.shape_basis[support],
        faces=np.zeros((0, 3), dtype=np.int64),
        joint_regressor=model.joint_regressor[:, support],
        skeleton_regressor=model.skeleton_regressor[:, support],
        skinning_weights=model.skinning_weights[support],
        parents=model.parents,
        part_labels=model.part_labels[support],
        part_names=model.part_names,
        joint_names=model.joint_names,
        keypoint_names=model.keypoint_names,
        keypoint_attach=model.keypoint_attach,
        meta=dict(model.meta),
    )


def loss_glob(pred_glob, target_glob):
    """Squared Frobenius distance between the two rotation matrices."""
    diff = bm.rodrigues(target_glob) - bm.rodrigues(pred_glob)
    return ad.sum_(ad.square(diff))


def loss_reproj_batch(heads: dict, model: bm.BodyModel, joints_norm: np.ndarray,
                      visibility: np.ndarray, noise_pose: np.ndarray,
                      noise_shape: np.ndarray):
    """Sum over examples and reparameterized draws of the masked squared
    keypoint reprojection error (normalized image coordinates).

    `model` should be the keypoint-reduced model for speed; noise arrays
    have shape (B, n_draws, dim) and are supplied by the caller so the
    estimator stays deterministic and differentiable.
    """
    B, S, P = noise_pose.shape
    sdim = noise_shape.shape[2]
    L = joints_norm.shape[1]

    pose_s = heads["pose_mean"][:, None, :] + ad.sqrt(heads["pose_var"])[:, None, :] * noise_pose
    shape_s = heads["shape_mean"][:, None, :] + ad.sqrt(heads["shape_var"])[:, None, :] * noise_shape
    glob_tiled = heads["glob"][:, None, :] + np.zeros((1, S, 1))

    verts = bm.lbs_vertices(
        model,
        ad.reshape(pose_s, (B * S, P)),
        ad.reshape(shape_s, (B * S, sdim)),
        ad.reshape(glob_tiled, (B * S, 3)),
    )
    joints3d = ad.matmul(model.joint_regressor, verts)           # (B*S, L, 3)
    xy = ad.reshape(joints3d, (B, S, L, 3))[:, :, :, :2]

    cam = heads["camera"]
    scale = ad.reshape(cam[:, 0:1], (B, 1, 1, 1))
    trans = ad.reshape(cam[:, 1:3], (B, 1, 1, 2))
    projected = scale * xy + trans

    mask = visibility.astype(np.float64)[:, None, :, None]
    diff = (joints_norm[:, None, :, :] - projected) * mask
    return ad.sum_(ad.square(diff))


def loss_total_batch(heads: dict, targets: dict, model_reduced: bm.BodyModel,
                     cfg: TrainConfig, noise_pose: np.ndarray, noise_shape: np.ndarray):
    """Per-batch mean of nll + lambda_glob * glob + lambda_2d * reproj.

    Returns (total, dict of detached component means).
    """
    B = targets["theta"].shape[0]
    nll = gaussian_nll(heads["pose_mean"], heads["pose_var"], targets["theta"]) + gaussian_nll(
        heads["shape_mean"], heads["shape_var"], targets["beta"]
    )
    glob = loss_glob(heads["glob"], targets["glob"])
    total = nll + cfg.lambda_glob * glob
    if cfg.lambda_2d != 0.0:
        reproj = loss_reproj_batch(
            heads, model_reduced, targets["joints_norm"], targets["visibility"],
            noise_pose, noise_shape,
        )
        total = total + cfg.lambda_2d * reproj
    else:
        reproj = 0.0
    total = total / float(B)
    parts = {
        "nll": float(ad.value_of(nll)) / B,
        "glob": float(ad.value_of(glob)) / B,
        "reproj": float(ad.value_of(reproj)) / B,
        "total": float(ad.value_of(total)),
    }
    return total, parts


# single-sample convenience wrappers used by tests and diagnostics

def loss_reproj(pred: PredictionSet, model: bm.BodyModel, joints_norm: np.ndarray,
                visibility: np.ndarray, n_draws: int, rng) -> float:
    noise_pose = rng.standard_normal((1, n_draws, pred.pose.dim))
    noise_shape = rng.standard_normal((1, n_draws, pred.shape.dim))
    heads = {
        "pose_mean": pred.pose.mean[None],
        "pose_var": pred.pose.var[None],
        "shape_mean": pred.shape.mean[None],
        "shape_var": pred.shape.var[None],
        "glob": pred.global_rot[None],
        "camera": pred.camera[None],
    }
    value = loss_reproj_batch(
        heads, reduced_for_keypoints(model), joints_norm[None],
        np.asarray(visibility)[None], noise_pose, noise_shape,
    )
    return float(ad.value_of(value))


def loss_total(pred: PredictionSet, labels: dict, model: bm.BodyModel,
               cfg: TrainConfig, rng) -> float:
    nll = gaussian_nll(pred.pose.mean, pred.pose.var, labels["theta"]) + gaussian_nll(
        pred.shape.mean, pred.shape.var, labels["beta"]
    )
    glob = loss_glob(pred.global_rot, labels["glob"])
    reproj = loss_reproj(pred, model, labels["joints_norm"], labels["visibility"],
                         cfg.reproj_samples, rng)
    return float(ad.value_of(nll)) + cfg.lambda_glob * float(ad.value_of(glob)) + cfg.lambda_2d * reproj


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float,
             beta1=0.9, beta2=0.999, eps=1e-8):
        self.t += 1
        correction1 = 1.0 - beta1**self.t
        correction2 = 1.0 - beta2**self.t
        for k, g in grads.items():
            self.m[k] = beta1 * self.m[k] + (1 - beta1) * g
            self.v[k] = beta2 * self.v[k] + (1 - beta2) * g * g
            m_hat = self.m[k] / correction1
            v_hat = self.v[k] / correction2
            params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)


def _training_view(dataset, pool_to: int):
    """Uniform access to a SynthDataset or a plain list of samples:
    (count, pooled inputs for an index batch, targets for an index batch)."""
    if hasattr(dataset, "arrays"):  # SynthDataset
        size = dataset.image_size

        def pooled(idx):
            return np.stack([pooled_from_dataset(dataset, int(i), pool_to) for i in idx])

        def targets(idx):
            a = dataset.arrays
            return {
                "theta": a["theta"][idx],
                "beta": a["beta"][idx],
                "glob": a["glob"][idx],
                "joints_norm": cr.normalize_pixels(a["joints2d"][idx], size, size),
                "visibility": a["visibility"][idx].astype(np.int64),
            }

        return len(dataset), pooled, targets

    samples = list(dataset)
    if not samples:
        raise ValueError("training dataset is empty")
    size = samples[0].proxy.silhouette.shape[0]

    def pooled(idx):
        return np.stack(
            [average_pool(samples[int(i)].proxy.stacked(), pool_to) for i in idx]
        )

    def targets(idx):
        chosen = [samples[int(i)] for i in idx]
        return {
            "theta": np.stack([s.theta for s in chosen]),
            "beta": np.stack([s.beta for s in chosen]),
            "glob": np.stack([s.glob for s in chosen]),
            "joints_norm": np.stack(
                [cr.normalize_pixels(s.joints2d, size, size) for s in chosen]
            ),
            "visibility": np.stack([s.visibility for s in chosen]),
        }

    return len(samples), pooled, targets


def _param_norm(params: dict) -> float:
    return float(np.sqrt(sum(float((v**2).sum()) for v in params.values())))


def train(net: PredictorNet, dataset, cfg: TrainConfig, model: bm.BodyModel,
          start_epoch: int = 0, optimizer: AdamState = None,
          epoch_callback=None) -> list:
    """Adam training over the dataset; returns per-epoch loss log rows.

    Deterministic given cfg.seed: shuffling, reparameterization noise and
    initialization all derive from named substreams. A non-finite loss
    aborts with the failing batch index and current weight norm.
    """
    cfg.validate()
    n, pooled_fn, targets_fn = _training_view(dataset, net.encoder.pool_to)
    if n == 0:
        raise ValueError("training dataset is empty")
    reduced = reduced_for_keypoints(model)
    optimizer = optimizer or AdamState(net.params)

    log = []
    for epoch in range(start_epoch, cfg.epochs):
        order = named_rng(cfg.seed, "shuffle", epoch).permutation(n)
        sums = {"total": 0.0, "nll": 0.0, "glob": 0.0, "reproj": 0.0}
        n_batches = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            pooled = pooled_fn(idx)
            targets = targets_fn(idx)

            noise_rng = named_rng(cfg.seed, "noise", epoch, step)
            noise_pose = noise_rng.standard_normal(
                (len(idx), cfg.reproj_samples, net.pose_dim)
            )
            noise_shape = noise_rng.standard_normal(
                (len(idx), cfg.reproj_samples, net.shape_dim)
            )

            tape = ad.Tape()
            leaves = {k: tape.variable(v) for k, v in net.params.items()}
            heads = net.heads(pooled, leaves)
            total, parts = loss_total_batch(heads, targets, reduced, cfg,
                                            noise_pose, noise_shape)
            if not np.isfinite(parts["total"]):
                raise TrainDivergenceError(
                    f"non-finite loss at epoch {epoch} batch {step}; "
                    f"parameter norm {_param_norm(net.params):.3e}"
                )
            grads = ad.gradient(total, list(leaves.values()))
            optimizer.step(net.params, dict(zip(leaves.keys(), grads)), cfg.learning_rate)

            for k in sums:
                sums[k] += parts[k]
            n_batches += 1

        row = {"epoch": epoch}
        row.update({k: sums[k] / n_batches for k in sums})
        log.append(row)
        if epoch_callback is not None:
            epoch_callback(epoch, row)
    return log


# ---------------------------------------------------------------------------
# weight serialization
# ---------------------------------------------------------------------------

def save_weights(path, net: PredictorNet, optimizer: AdamState = None,
                 epoch: int = 0, extra_meta: dict = None) -> None:
    arrays = {f"param/{k}": v for k, v in net.params.items()}
    if optimizer is not None:
        arrays.update({f"adam_m/{k}": v for k, v in optimizer.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in optimizer.v.items()})
    meta = {
        "weights_version": WEIGHTS_VERSION,
        "pose_dim": net.pose_dim,
        "shape_dim": net.shape_dim,
        "in_channels": net.in_channels,
        "hidden": net.hidden,
        "encoder": dataclasses.asdict(net.encoder),
        "adam_t": optimizer.t if optimizer is not None else 0,
        "epoch": int(epoch),
    }
    meta.update(extra_meta or {})
    write_container(path, "weights", arrays, meta)


def load_weights(path):
    """Returns (net, optimizer or None, meta); validates version and shapes."""
    arrays, meta = read_container(path, expected_kind="weights")
    if meta.get("weights_version") != WEIGHTS_VERSION:
        raise ContainerError(f"{path}: unsupported weights version")
    enc = meta["encoder"]
    net = PredictorNet(
        pose_dim=int(meta["pose_dim"]),
        shape_dim=int(meta["shape_dim"]),
        in_channels=int(meta["in_channels"]),
        encoder=EncoderConfig(pool_to=int(enc["pool_to"]),
                              channels=tuple(enc["channels"]),
                              kernel=int(enc["kernel"])),
        hidden=int(meta["hidden"]),
    )
    for k in net.params:
        key = f"param/{k}"
        if key not in arrays:
            raise ContainerError(f"{path}: missing parameter {k}")
        if arrays[key].shape != net.params[k].shape:
            raise ContainerError(f"{path}: parameter {k} has wrong shape")
        net.params[k] = arrays[key]
    optimizer = None
    if any(k.startswith("adam_m/") for k in arrays):
        optimizer = AdamState(net.params)
        for k in net.params:
            optimizer.m[k] = arrays[f"adam_m/{k}"]
            optimizer.v[k] = arrays[f"adam_v/{k}"]
        optimizer.t = int(meta.get("adam_t", 0))
    return net, optimizer, meta
