"""Synthetic training/evaluation data generation.

Bodies with randomly sampled shape are posed from a pose bank, rendered
through a randomly sampled perspective camera into silhouette + joint
heatmap proxy inputs, and optionally corrupted to mimic detector failure
modes: occluded silhouettes, missing/swapped/noisy keypoints. Joint
visibility is recomputed after the silhouette corruptions and the heatmaps
of invisible joints are zeroed, so the network can learn to be uncertain
about unobserved body parts.

Generation is a pure function of (seed, configs, model): every sample draws
from its own named rng substream, making parallel and serial generation
byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import bodymodel as bm
from . import camera as cr
from .containerio import read_container, write_container
from .rng import named_rng

MAX_CAMERA_RETRIES = 10


@dataclass
class AugmentationConfig:
    """Corruption suite; defaults follow the reference augmentation table."""

    body_part_occlusion_prob: float = 0.1
    joint_lr_swap_prob: float = 0.1
    half_image_occlusion_prob: float = 0.05
    joint_removal_prob: float = 0.1
    joint_noise_range: float = 8.0      # pixels, uniform in [-r, r]
    vertex_noise_range: float = 0.010   # meters, uniform in [-r, r]
    occlusion_box_prob: float = 0.5
    occlusion_box_size: int = 48        # pixels

    def validate(self):
        for name in ("body_part_occlusion_prob", "joint_lr_swap_prob",
                     "half_image_occlusion_prob", "joint_removal_prob",
                     "occlusion_box_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.joint_noise_range < 0 or self.vertex_noise_range < 0:
            raise ValueError("noise ranges must be non-negative")
        if self.occlusion_box_size < 0:
            raise ValueError("occlusion box size must be non-negative")


@dataclass
class GenerationConfig:
    """Rendering and sampling hyperparameters (reference defaults)."""

    shape_mean: float = 0.0
    shape_variance: float = 2.25
    shape_clip: float = 6.0
    cam_translation_mean: tuple = (0.0, -0.2, 2.5)   # meters
    cam_translation_var: tuple = (0.05, 0.05, 0.25)  # meters^2
    focal_length: float = 300.0
    image_size: int = 256
    confidence_threshold: float = 0.025
    heatmap_sigma: float = 4.0

    def validate(self):
        if any(v <= 0 for v in self.cam_translation_var):
            raise ValueError("camera translation variances must be positive")
        if self.shape_variance <= 0:
            raise ValueError("shape variance must be positive")
        if self.focal_length <= 0 or self.image_size <= 0:
            raise ValueError("focal length and image size must be positive")


@dataclass
class SyntheticSample:
    """One proxy input with its ground-truth labels."""

    proxy: cr.ProxyRepresentation
    theta: np.ndarray        # (P,) pose label
    beta: np.ndarray         # (S,) shape label
    glob: np.ndarray         # (3,) global rotation label
    joints2d: np.ndarray     # (L, 2) target keypoints, pixels
    visibility: np.ndarray   # (L,) in {0, 1}
    corrupted: bool
    subject_id: int = -1
    cam_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    events: dict = field(default_factory=dict)  # applied augmentations (not serialized)


@dataclass
class PoseSource:
    """Bank of plausible pose vectors plus canonical global rotations."""

    poses: np.ndarray        # (n, P)
    facings: np.ndarray      # (m, 3) canonical global rotations
    global_jitter_std: float = 0.15

    def __post_init__(self):
        if len(self.poses) == 0 or len(self.facings) == 0:
            raise ValueError("pose source must be non-empty")

    def sample(self, rng) -> tuple:
        theta = self.poses[rng.integers(len(self.poses))]
        gamma = self.facings[rng.integers(len(self.facings))]
        if self.global_jitter_std > 0:
            jitter = rng.normal(scale=self.global_jitter_std, size=3)
            gamma = bm.compose_rotations(jitter, gamma)
        return theta.copy(), np.asarray(gamma, dtype=np.float64)

    def get(self, pose_index: int, facing_index: int) -> tuple:
        return (
            self.poses[pose_index % len(self.poses)].copy(),
            self.facings[facing_index % len(self.facings)].copy(),
        )


# the four canonical subject orientations: camera facing front/back/left/right
# (back rotation is clamped just under pi to respect the axis-angle range)
CANONICAL_FACINGS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.0, np.pi - 1e-4, 0.0],
        [0.0, np.pi / 2, 0.0],
        [0.0, -np.pi / 2, 0.0],
    ]
)

_HINGE_EXTRA = {"l_elbow": 0.4, "r_elbow": 0.4, "l_knee": 0.4, "r_knee": 0.4}


def procedural_pose_source(model: bm.BodyModel, n_poses: int = 256, seed: int = 0,
                           pose_std: float = 0.3,
                           global_jitter_std: float = 0.15) -> PoseSource:
    """Plausible random poses: per-joint zero-mean rotations with extra
    flexion on elbows/knees, norms clamped inside the axis-angle range."""
    rng = named_rng(seed, "pose_source")
    J = model.num_joints
    poses = np.empty((n_poses, model.pose_dim))
    for i in range(n_poses):
        aa = rng.normal(scale=pose_std, size=(J - 1, 3))
        for j in range(1, J):
            name = model.joint_names[j]
            extra = _HINGE_EXTRA.get(name)
            if extra:
                aa[j - 1, 1 if "elbow" in name else 0] += abs(rng.normal(scale=extra))
            norm = np.linalg.norm(aa[j - 1])
            limit = 0.95 * np.pi
            if norm > limit:
                aa[j - 1] *= limit / norm
        poses[i] = aa.reshape(-1)
    return PoseSource(poses, CANONICAL_FACINGS.copy(), global_jitter_std)


def sample_shape(rng, cfg: GenerationConfig = None) -> np.ndarray:
    """Shape coefficients from the high-variance Gaussian, truncated
    componentwise (by redraw) at the configured magnitude."""
    cfg = cfg or GenerationConfig()
    std = np.sqrt(cfg.shape_variance)
    beta = cfg.shape_mean + std * rng.standard_normal(bm.SHAPE_DIM)
    for _ in range(100):
        bad = np.abs(beta) > cfg.shape_clip
        if not bad.any():
            break
        beta[bad] = cfg.shape_mean + std * rng.standard_normal(int(bad.sum()))
    return np.clip(beta, -cfg.shape_clip, cfg.shape_clip)


def occlude_body_part(silhouette: np.ndarray, part_assignment: np.ndarray,
                      part_id: int) -> np.ndarray:
    """Clear the silhouette pixels assigned to one body part.

    The per-pixel part assignment partitions the silhouette, so occluding
    every part in turn empties it; occluding a part with no visible pixels
    is a no-op.
    """
    out = silhouette.copy()
    out[part_assignment == part_id] = 0
    return out


def swap_lr_joints(joints2d: np.ndarray, visibility: np.ndarray, rng,
                   swap_prob: float, pairs) -> tuple:
    """Exchange left/right coordinates and visibilities per pair with the
    configured probability. Returns (joints, visibility, n_swapped)."""
    joints2d = joints2d.copy()
    visibility = visibility.copy()
    n_swapped = 0
    for a, b in pairs:
        if rng.random() < swap_prob:
            joints2d[[a, b]] = joints2d[[b, a]]
            visibility[[a, b]] = visibility[[b, a]]
            n_swapped += 1
    return joints2d, visibility, n_swapped


def render_sample(model: bm.BodyModel, theta, beta, glob,
                  gen_cfg: GenerationConfig, aug_cfg: AugmentationConfig,
                  rng, corrupt: bool, subject_id: int = -1) -> SyntheticSample:
    """Full single-sample pipeline: pose the body, sample a camera, render
    the proxy input, optionally corrupt it, and derive joint visibility."""
    gen_cfg.validate()
    aug_cfg.validate()
    size = gen_cfg.image_size
    mesh = bm.forward(model, theta, beta, glob)
    vertices = np.asarray(mesh.vertices)

    cam_mean = np.asarray(gen_cfg.cam_translation_mean)
    cam_std = np.sqrt(np.asarray(gen_cfg.cam_translation_var))

    camera = None
    silhouette = None
    for _ in range(MAX_CAMERA_RETRIES):
        translation = cam_mean + cam_std * rng.standard_normal(3)
        if vertices[:, 2].min() + translation[2] <= 0.05:
            continue  # camera behind (or inside) the subject
        candidate = cr.PerspCamera(gen_cfg.focal_length, size, size, translation)
        sil = cr.rasterize_silhouette(bm.VertexMesh(vertices, model.faces), candidate)
        if sil.any():
            camera, silhouette = candidate, sil
            break
    if camera is None:
        raise RuntimeError("no valid camera after retries (empty silhouette)")

    keypoints3d = np.asarray(bm.regress_joints(model, mesh))
    joints2d = cr.project_persp(keypoints3d, camera)
    visibility = cr.in_frame_visibility(joints2d, size, size)

    events = {"part_occluded": False, "half_occluded": False, "box_occluded": False,
              "pairs_swapped": 0, "joints_removed": 0}

    if corrupt:
        # fixed order: vertex noise, part occlusion, half-image occlusion,
        # occlusion box, joint L/R swap, joint removal, joint noise
        if aug_cfg.vertex_noise_range > 0:
            noisy = vertices + rng.uniform(
                -aug_cfg.vertex_noise_range, aug_cfg.vertex_noise_range, vertices.shape
            )
            silhouette = cr.rasterize_silhouette(bm.VertexMesh(noisy, model.faces), camera)
        else:
            noisy = vertices

        erased = np.zeros_like(silhouette, dtype=bool)

        if rng.random() < aug_cfg.body_part_occlusion_prob:
            assignment = cr.rasterize_part_assignment(
                bm.VertexMesh(noisy, model.faces), model.part_labels, camera
            )
            part_id = int(rng.integers(len(model.part_names)))
            cleared = (assignment == part_id) & silhouette.astype(bool)
            silhouette = occlude_body_part(silhouette, assignment, part_id)
            erased |= cleared
            events["part_occluded"] = True

        if rng.random() < aug_cfg.half_image_occlusion_prob:
            side = int(rng.integers(4))
            half = np.zeros_like(erased)
            if side == 0:
                half[:, : size // 2] = True
            elif side == 1:
                half[:, size // 2 :] = True
            elif side == 2:
                half[: size // 2, :] = True
            else:
                half[size // 2 :, :] = True
            silhouette = silhouette * (~half)
            erased |= half
            events["half_occluded"] = True

        if rng.random() < aug_cfg.occlusion_box_prob and aug_cfg.occlusion_box_size > 0:
            box = min(aug_cfg.occlusion_box_size, size)
            r0 = int(rng.integers(0, size - box + 1))
            c0 = int(rng.integers(0, size - box + 1))
            silhouette = silhouette.copy()
            silhouette[r0 : r0 + box, c0 : c0 + box] = 0
            erased[r0 : r0 + box, c0 : c0 + box] = True
            events["box_occluded"] = True

        # visibility: inside the frame and not erased at the joint's pixel
        visibility = cr.in_frame_visibility(joints2d, size, size)
        cols = np.clip(np.rint(joints2d[:, 0]).astype(int), 0, size - 1)
        rows = np.clip(np.rint(joints2d[:, 1]).astype(int), 0, size - 1)
        visibility = visibility * (~erased[rows, cols]).astype(np.int64)

        pairs = model.meta.get("lr_swap_pairs", [])
        joints2d, visibility, n_swapped = swap_lr_joints(
            joints2d, visibility, rng, aug_cfg.joint_lr_swap_prob, pairs
        )
        events["pairs_swapped"] = n_swapped

        removal = rng.random(len(joints2d)) < aug_cfg.joint_removal_prob
        events["joints_removed"] = int(removal.sum())
        visibility = visibility * (~removal).astype(np.int64)

        if aug_cfg.joint_noise_range > 0:
            joints2d = joints2d + rng.uniform(
                -aug_cfg.joint_noise_range, aug_cfg.joint_noise_range, joints2d.shape
            )
            visibility = visibility * cr.in_frame_visibility(joints2d, size, size)

    heatmaps = cr.joints_to_heatmaps(joints2d, visibility, size, size,
                                     sigma=gen_cfg.heatmap_sigma)
    proxy = cr.ProxyRepresentation(silhouette.astype(np.uint8), heatmaps)
    return SyntheticSample(
        proxy=proxy,
        theta=np.asarray(theta, dtype=np.float64),
        beta=np.asarray(beta, dtype=np.float64),
        glob=np.asarray(glob, dtype=np.float64),
        joints2d=np.asarray(joints2d, dtype=np.float64),
        visibility=visibility.astype(np.int64),
        corrupted=bool(corrupt),
        subject_id=int(subject_id),
        cam_translation=camera.translation,
        events=events,
    )


def generate_sample(model: bm.BodyModel, pose_source: PoseSource,
                    gen_cfg: GenerationConfig, aug_cfg: AugmentationConfig,
                    rng, corrupt: bool) -> SyntheticSample:
    """Sample pose/facing from the bank and shape from the prior, then render."""
    theta, gamma = pose_source.sample(rng)
    beta = sample_shape(rng, gen_cfg)
    return render_sample(model, theta, beta, gamma, gen_cfg, aug_cfg, rng, corrupt)


def generate_dataset(model: bm.BodyModel, gen_cfg: GenerationConfig,
                     aug_cfg: AugmentationConfig, num_subjects: int,
                     poses_per_subject: int, seed: int, corrupt: bool,
                     pose_source: PoseSource = None,
                     exact_facings: bool = False) -> list:
    """Subject-structured dataset: one shape per subject, one pose+view per
    sample. With `exact_facings` the four canonical orientations cycle in
    order (front/back/left/right), as in grouped evaluation sets."""
    if pose_source is None:
        pose_source = procedural_pose_source(model, seed=seed)
    samples = []
    for subj in range(num_subjects):
        beta = sample_shape(named_rng(seed, "shape", subj), gen_cfg)
        for k in range(poses_per_subject):
            rng = named_rng(seed, "sample", subj, k)
            if exact_facings:
                theta, _ = pose_source.sample(rng)
                gamma = pose_source.facings[k % len(pose_source.facings)].copy()
            else:
                theta, gamma = pose_source.sample(rng)
            samples.append(
                render_sample(model, theta, beta, gamma, gen_cfg, aug_cfg, rng,
                              corrupt, subject_id=subj)
            )
    return samples


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------

class SynthDataset:
    """Random-access view over a generated dataset.

    Silhouettes are stored bit-packed; proxies are rebuilt on demand from
    the stored joints and visibilities (heatmap synthesis is deterministic,
    so the round trip is lossless).
    """

    def __init__(self, arrays: dict, meta: dict):
        self.arrays = arrays
        self.meta = meta
        self.image_size = int(meta["image_size"])
        self.heatmap_sigma = float(meta["heatmap_sigma"])

    def __len__(self) -> int:
        return self.arrays["theta"].shape[0]

    @property
    def subject_ids(self) -> np.ndarray:
        return self.arrays["subject_id"]

    def silhouette(self, i: int) -> np.ndarray:
        size = self.image_size
        bits = np.unpackbits(self.arrays["silhouette_bits"][i])[: size * size]
        return bits.reshape(size, size)

    def proxy(self, i: int) -> cr.ProxyRepresentation:
        size = self.image_size
        heatmaps = cr.joints_to_heatmaps(
            self.arrays["joints2d"][i], self.arrays["visibility"][i],
            size, size, sigma=self.heatmap_sigma,
        )
        return cr.ProxyRepresentation(self.silhouette(i), heatmaps)

    def sample(self, i: int) -> SyntheticSample:
        return SyntheticSample(
            proxy=self.proxy(i),
            theta=self.arrays["theta"][i],
            beta=self.arrays["beta"][i],
            glob=self.arrays["glob"][i],
            joints2d=self.arrays["joints2d"][i],
            visibility=self.arrays["visibility"][i].astype(np.int64),
            corrupted=bool(self.arrays["corrupted"][i]),
            subject_id=int(self.arrays["subject_id"][i]),
            cam_translation=self.arrays["cam_translation"][i],
        )

    def samples(self):
        return [self.sample(i) for i in range(len(self))]


def write_dataset(path, samples: list, gen_cfg: GenerationConfig,
                  aug_cfg: AugmentationConfig, seed: int, model_fingerprint: str = "") -> None:
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    size = gen_cfg.image_size
    arrays = {
        "silhouette_bits": np.stack(
            [np.packbits(s.proxy.silhouette.astype(np.uint8).ravel()) for s in samples]
        ),
        "joints2d": np.stack([s.joints2d for s in samples]),
        "visibility": np.stack([s.visibility for s in samples]).astype(np.uint8),
        "theta": np.stack([s.theta for s in samples]),
        "beta": np.stack([s.beta for s in samples]),
        "glob": np.stack([s.glob for s in samples]),
        "cam_translation": np.stack([s.cam_translation for s in samples]),
        "subject_id": np.array([s.subject_id for s in samples], dtype=np.int64),
        "corrupted": np.array([s.corrupted for s in samples], dtype=np.uint8),
    }
    meta = {
        "image_size": size,
        "heatmap_sigma": gen_cfg.heatmap_sigma,
        "num_samples": len(samples),
        "seed": int(seed),
        "generation_config": asdict(gen_cfg),
        "augmentation_config": asdict(aug_cfg),
        "model_fingerprint": model_fingerprint,
    }
    write_container(path, "dataset", arrays, meta)


def read_dataset(path) -> SynthDataset:
    arrays, meta = read_container(path, expected_kind="dataset")
    return SynthDataset(arrays, meta)


def model_fingerprint(model: bm.BodyModel) -> str:
    import hashlib

    h = hashlib.sha256()
    h.update(np.ascontiguousarray(model.template_vertices).tobytes())
    h.update(np.ascontiguousarray(model.skinning_weights).tobytes())
    return h.hexdigest()[:16]
