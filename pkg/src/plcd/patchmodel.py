"""Weight-shared satellite-drone encoder trained with triplets and patch
supervision from the frozen junior-peer drone branch.

The drone and satellite branches are one parameter set by construction, so
their weight sharing cannot drift. Each step samples a few identities, takes
their satellite record plus one drone per section, runs a semi-hard triplet
loss from drone anchors to satellite positives/negatives, and aligns the
student's region descriptors with the teacher's through a mean-squared
penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import losses, rmac
from .dataspace import DRONE, SATELLITE, DatasetSplit, ImageRecord
from .peerlearn import TrainingDiverged, _PooledCache
from .seeds import substream


@dataclass(frozen=True)
class PatchModelConfig:
    embed_dim: int = 32
    epochs: int = 30
    batch_pairs: int = 4
    margin: float = 0.3
    lambda2: float = 1.0
    lr_head: float = 0.01
    lr_body: float = 0.001
    momentum: float = 0.9
    decay_epoch: int = 40
    decay_factor: float = 0.1
    encoder_tanh: bool = False
    scales: tuple[int, ...] = (1, 2, 3, 4)
    width_table: dict | None = None
    reference_side: int = 12
    student_init: str = "teacher"  # or "fresh"
    seed: int = 0

    def validate(self) -> None:
        if self.margin <= 0:
            raise ValueError(f"margin must be positive (got {self.margin})")
        if self.lambda2 < 0:
            raise ValueError(f"lambda2 must be >= 0 (got {self.lambda2})")
        if self.batch_pairs < 2:
            raise ValueError(f"batch_pairs must be >= 2 (got {self.batch_pairs})")
        if self.student_init not in ("teacher", "fresh"):
            raise ValueError(
                f"student_init must be 'teacher' or 'fresh' (got {self.student_init!r})")


def drone_branch(params: enc.EncoderParams) -> enc.EncoderParams:
    """Drone-side view of the shared encoder (same object as the satellite side)."""
    return params


def satellite_branch(params: enc.EncoderParams) -> enc.EncoderParams:
    """Satellite-side view of the shared encoder (same object as the drone side)."""
    return params


def train_satellite_drone(split: DatasetSplit, teacher: enc.EncoderParams,
                          cfg: PatchModelConfig):
    """Train the shared encoder; the teacher is read-only.

    Returns (shared_params, log_lines); the log columns are
    ``epoch step loss_triplet loss_patch total``.
    """
    cfg.validate()
    drones: dict[int, dict[int, list[ImageRecord]]] = {}
    satellites: dict[int, ImageRecord] = {}
    for r in split.train:
        if r.view == DRONE:
            drones.setdefault(r.landmark, {}).setdefault(r.section, []).append(r)
        elif r.view == SATELLITE:
            satellites[r.landmark] = r
    landmarks = sorted(drones)
    if len(landmarks) < 2:
        raise ValueError("satellite-drone training needs at least 2 identities")
    missing = [lm for lm in landmarks if lm not in satellites]
    if missing:
        raise ValueError(f"missing satellite record for landmarks {missing}")

    map_shape = next(iter(satellites.values())).featmap.shape
    input_dim = int(np.prod(map_shape))
    if cfg.student_init == "teacher":
        params = teacher.copy(role=enc.ROLE_SHARED)
    else:
        params = enc.init_params(enc.ROLE_SHARED, cfg.embed_dim, input_dim,
                                 teacher.classes,
                                 substream(cfg.seed, "patchmodel.init"),
                                 cfg.encoder_tanh)
    rng = substream(cfg.seed, "patchmodel.train")
    state = enc.new_sgd_state(params, cfg.lr_head, cfg.lr_body, cfg.momentum,
                              cfg.decay_epoch, cfg.decay_factor)
    grid = rmac.region_grid((map_shape[1], map_shape[2]), cfg.scales,
                            cfg.width_table, cfg.reference_side)
    cache = _PooledCache(grid, map_shape)
    teacher_projector = cache.projector(teacher)  # frozen, built once
    sections = sorted({s for by_sec in drones.values() for s in by_sec})
    log: list[str] = []

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        order = rng.permutation(len(landmarks))
        for step, start in enumerate(range(0, len(order), cfg.batch_pairs)):
            chunk = [landmarks[i] for i in order[start : start + cfg.batch_pairs]]
            if len(chunk) < 2:
                continue
            drone_recs: list[ImageRecord] = []
            drone_owner: list[int] = []
            for lm in chunk:
                for sec in sections:
                    pool = drones[lm].get(sec)
                    if not pool:
                        raise ValueError(f"landmark {lm} has no drone in section {sec}")
                    drone_recs.append(pool[int(rng.integers(len(pool)))])
                    drone_owner.append(lm)
            sat_recs = [satellites[lm] for lm in chunk]

            grads = enc.new_grads(params)
            value_triplet, value_patch = _shared_step(
                params, teacher_projector, drone_recs, drone_owner, sat_recs,
                chunk, cache, cfg, grads)
            total = losses.joint_sd_loss(value_triplet, value_patch, cfg.lambda2)
            if not np.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss {total} at epoch {epoch} step {step}")
            enc.sgd_step(params, grads, state)
            log.append(f"{epoch} {step} {value_triplet:.6f} {value_patch:.6f} {total:.6f}")
    return params, log


def _shared_step(params, teacher_projector, drone_recs, drone_owner, sat_recs,
                 chunk, cache, cfg, grads):
    # Triplets run on unit embeddings (squared distance = 2 - 2cos), the same
    # geometry the cosine-based retrieval is scored in; raw embeddings leave
    # the hinge dominated by norm differences between the views.
    drone_x = [r.featmap.ravel() for r in drone_recs]
    sat_x = [r.featmap.ravel() for r in sat_recs]
    anchors = [enc.embed_vector(params, x, normalize=True) for x in drone_x]
    sat_embs = [enc.embed_vector(params, x, normalize=True) for x in sat_x]
    sat_slot = {lm: i for i, lm in enumerate(chunk)}

    value_triplet = 0.0
    n_anchors = len(anchors)
    g_anchors = [np.zeros_like(a) for a in anchors]
    g_sats = [np.zeros_like(s) for s in sat_embs]
    for i, (a, lm) in enumerate(zip(anchors, drone_owner)):
        pos_idx = sat_slot[lm]
        pool_idx = [j for j in range(len(sat_embs)) if j != pos_idx]
        value, tgrads = losses.semi_hard_triplet_loss(
            [a], [sat_embs[pos_idx]], [sat_embs[j] for j in pool_idx], cfg.margin)
        value_triplet += value / n_anchors
        g_anchors[i] += tgrads["anchors"][0] / n_anchors
        g_sats[pos_idx] += tgrads["positives"][0] / n_anchors
        for j, g in zip(pool_idx, tgrads["pool"]):
            g_sats[j] += g / n_anchors

    student_projector = cache.projector(params)
    teacher_patches = []
    student_patches = []
    pooled_stack = []
    for rec in drone_recs:
        pooled = cache.get(rec)  # row 0 (whole map) + grid rows
        pooled_stack.append(pooled)
        teacher_patches.append(teacher_projector.embed(pooled)[1:])
        student_patches.append(student_projector.embed(pooled)[1:])
    value_patch, patch_grads = losses.patch_mse_loss(teacher_patches, student_patches)

    for x, g in zip(drone_x, g_anchors):
        enc.embed_backward(params, x, g, grads, normalized=True)
    for x, g in zip(sat_x, g_sats):
        enc.embed_backward(params, x, g, grads, normalized=True)
    for pooled, g in zip(pooled_stack, patch_grads):
        padded = np.vstack([np.zeros((1, g.shape[1])), cfg.lambda2 * g])
        student_projector.backward(pooled, padded, grads)
    student_projector.flush(grads)
    return value_triplet, value_patch
