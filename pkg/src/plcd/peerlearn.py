"""Two-step ground-drone training with a frozen senior guiding a junior.

Step I trains the senior pair on mined triplets: the easiest positive is the
top-1 drone by current cosine similarity from a batch holding one drone per
direction section, the negatives are the top-N most similar other-identity
drones. Step II freezes the senior and trains the junior on doublets: the
hard objective is kept, and the senior's sharp similarity distribution over
whole-image and region descriptors supervises the junior's distribution at
temperature 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import losses, rmac
from .dataspace import DRONE, GROUND, DatasetSplit, ImageRecord
from .seeds import substream


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PeerConfig:
    embed_dim: int = 32
    epochs_senior: int = 30
    epochs_junior: int = 30
    batch_streets: int = 8
    num_negatives: int = 4
    num_positives: int = 0  # 0 -> one per section
    warmup_epochs: int = 0
    mining_space: str = "drone"
    tau: float = 0.1
    lambda1: float = 1.0
    lr_head: float = 0.01
    lr_body: float = 0.001
    momentum: float = 0.9
    decay_epoch: int = 40
    decay_factor: float = 0.1
    junior_lr_scale: float = 0.1
    encoder_tanh: bool = False
    scales: tuple[int, ...] = (1, 2, 3, 4)
    width_table: dict | None = None
    reference_side: int = 12
    junior_init: str = "senior"  # or "fresh"
    seed: int = 0

    def validate(self) -> None:
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1 (got {self.embed_dim})")
        if self.num_negatives < 1:
            raise ValueError(f"num_negatives must be >= 1 (got {self.num_negatives})")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive (got {self.tau})")
        if self.lambda1 < 0:
            raise ValueError(f"lambda1 must be >= 0 (got {self.lambda1})")
        if self.batch_streets < 2:
            raise ValueError(f"batch_streets must be >= 2 (got {self.batch_streets})")
        if self.warmup_epochs < 0:
            raise ValueError(f"warmup_epochs must be >= 0 (got {self.warmup_epochs})")
        if self.mining_space not in ("drone", "ground"):
            raise ValueError(
                f"mining_space must be 'drone' or 'ground' (got {self.mining_space!r})")
        if self.junior_init not in ("senior", "fresh"):
            raise ValueError(f"junior_init must be 'senior' or 'fresh' (got {self.junior_init!r})")


@dataclass
class MinedTriplet:
    positive: ImageRecord
    negatives: list[ImageRecord]


@dataclass
class _TrainContext:
    """Indexes over the train split shared by both training steps."""

    grounds: list[ImageRecord]
    drones: dict[int, dict[int, list[ImageRecord]]]  # landmark -> section -> records
    class_index: dict[int, int]
    map_shape: tuple[int, int, int]
    sections: list[int]

    @property
    def num_classes(self) -> int:
        return len(self.class_index)


def build_context(split: DatasetSplit) -> _TrainContext:
    grounds = [r for r in split.train if r.view == GROUND]
    if not grounds:
        raise ValueError("train split has no ground records")
    drones: dict[int, dict[int, list[ImageRecord]]] = {}
    for r in split.train:
        if r.view == DRONE:
            drones.setdefault(r.landmark, {}).setdefault(r.section, []).append(r)
    if not drones:
        raise ValueError("train split has no drone records")
    landmarks = sorted({r.landmark for r in split.train})
    sections = sorted({s for by_sec in drones.values() for s in by_sec})
    return _TrainContext(
        grounds=grounds,
        drones=drones,
        class_index={lm: i for i, lm in enumerate(landmarks)},
        map_shape=grounds[0].featmap.shape,
        sections=sections,
    )


def _one_hot(n: int, idx: int) -> np.ndarray:
    v = np.zeros(n)
    v[idx] = 1.0
    return v


def aggregate_feature(projector: enc.RegionProjector, pooled: np.ndarray) -> np.ndarray:
    """Drone-branch image feature: mean of L2-normalized region descriptors.

    Aggregating the region descriptors routes every training gradient through
    the region path, so the same descriptors that drive retrieval also back
    the similarity distributions and the best-sub-region representation. All
    rows of ``pooled`` participate (row 0, the global max pool, duplicates
    the scale-1 region and mildly emphasizes the global view); the mean keeps
    the feature on the same scale as a single unit descriptor.
    """
    descs = projector.embed(pooled)
    norms = np.maximum(np.linalg.norm(descs, axis=1, keepdims=True), 1e-12)
    return (descs / norms).mean(axis=0)


def aggregate_backward(projector: enc.RegionProjector, pooled: np.ndarray,
                       g_emb: np.ndarray, grads: enc.EncoderGrads) -> None:
    """Chain an aggregate-feature gradient back through normalization and the
    region projections."""
    descs = projector.embed(pooled)
    g_scaled = g_emb / descs.shape[0]
    g_rows = np.zeros_like(descs)
    for i, desc in enumerate(descs):
        norm = float(np.linalg.norm(desc))
        if norm < 1e-12:
            continue
        unit = desc / norm
        g_rows[i] = (g_scaled - float(g_scaled @ unit) * unit) / norm
    projector.backward(pooled, g_rows, grads)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(enc.l2_normalize(a) @ enc.l2_normalize(b))


def mine_easy_triplet(anchor: ImageRecord, positive_batch: list[ImageRecord],
                      negative_batch: list[ImageRecord],
                      ground_params: enc.EncoderParams,
                      drone_params: enc.EncoderParams,
                      num_negatives: int, space: str = "drone",
                      feature_fn=None) -> MinedTriplet:
    """Pick the easiest positive and the top-N hardest negatives by cosine.

    ``space`` selects whose features rank the candidates: ``"drone"`` embeds
    the anchor with the drone branch too (one map, so raw-geometry survives
    any single projection and mining is informative before the branches have
    aligned); ``"ground"`` ranks across the two branches. ``feature_fn``
    overrides how (params, record) turn into an embedding; trainers pass the
    current-step region-aggregate feature. The positive batch
    must hold one drone per direction section of the anchor's landmark;
    negatives must come from other identities. Ties break on the lowest
    record id.
    """
    if not negative_batch:
        raise ValueError("mine_easy_triplet got an empty negative batch")
    if num_negatives > len(negative_batch):
        raise ValueError(
            f"asked for {num_negatives} negatives but the pool holds {len(negative_batch)}"
        )
    if space not in ("drone", "ground"):
        raise ValueError(f"space must be 'drone' or 'ground' (got {space!r})")
    sections = [r.section for r in positive_batch]
    if len(set(sections)) != len(sections):
        raise ValueError("positive batch must hold one record per section")
    if any(r.landmark != anchor.landmark for r in positive_batch):
        raise ValueError("positive batch must share the anchor's landmark")
    if any(r.landmark == anchor.landmark for r in negative_batch):
        raise ValueError("negatives must be identity-disjoint from the anchor")

    if feature_fn is None:
        feature_fn = enc.forward
    anchor_params = drone_params if space == "drone" else ground_params
    a = feature_fn(anchor_params, anchor)
    pos_sims = [_cosine(a, feature_fn(drone_params, r)) for r in positive_batch]
    best = min(range(len(positive_batch)),
               key=lambda i: (-pos_sims[i], positive_batch[i].id))
    neg_sims = [_cosine(a, feature_fn(drone_params, r)) for r in negative_batch]
    order = sorted(range(len(negative_batch)),
                   key=lambda i: (-neg_sims[i], negative_batch[i].id))
    return MinedTriplet(
        positive=positive_batch[best],
        negatives=[negative_batch[i] for i in order[:num_negatives]],
    )


def _mining_feature_fn(ground_params, cache, drone_projector):
    """Feature hook for the miner: ground params embed through the whole-image
    path, anything else through the current region-aggregate feature.
    Memoized per record id (valid for the lifetime of the projector)."""
    memo: dict[int, np.ndarray] = {}

    def feature_fn(params, record):
        if params is ground_params:
            return enc.forward(params, record)
        emb = memo.get(record.id)
        if emb is None:
            emb = aggregate_feature(drone_projector, cache.get(record))
            memo[record.id] = emb
        return emb
    return feature_fn


def _sample_positive_batch(ctx: _TrainContext, landmark: int,
                           rng: np.random.Generator) -> list[ImageRecord]:
    by_sec = ctx.drones.get(landmark)
    if by_sec is None:
        raise ValueError(f"landmark {landmark} has no drone records")
    batch = []
    for sec in ctx.sections:
        pool = by_sec.get(sec)
        if not pool:
            raise ValueError(f"landmark {landmark} has no drone in section {sec}")
        batch.append(pool[int(rng.integers(len(pool)))])
    return batch


def _hard_step(ground_params, drone_params, anchor, mined, ctx,
               g_grads, d_grads, cache, drone_projector):
    """Consistency + per-branch cross-entropy for one anchor; returns the value.

    The ground anchor embeds through the affine whole-image path; drone
    records embed through the region-aggregate feature so the hard objective
    trains the region descriptors directly.
    """
    x_a = anchor.featmap.ravel()
    a = enc.embed_vector(ground_params, x_a)
    pooled_p = cache.get(mined.positive)
    p = aggregate_feature(drone_projector, pooled_p)
    pooled_negs = [cache.get(n) for n in mined.negatives]
    negs = [aggregate_feature(drone_projector, pn) for pn in pooled_negs]

    value, grads = losses.consistency_loss(a, p, negs)
    g_a, g_p = grads["anchor"], grads["positive"]

    target = _one_hot(ctx.num_classes, ctx.class_index[anchor.landmark])
    ce_a, g_log_a = losses.cross_entropy(enc.logits_from_embedding(ground_params, a), target)
    g_a = g_a + enc.classifier_backward(ground_params, a, g_log_a, g_grads)
    ce_p, g_log_p = losses.cross_entropy(enc.logits_from_embedding(drone_params, p), target)
    g_p = g_p + enc.classifier_backward(drone_params, p, g_log_p, d_grads)

    enc.embed_backward(ground_params, x_a, g_a, g_grads)
    aggregate_backward(drone_projector, pooled_p, g_p, d_grads)
    for pn, g_n in zip(pooled_negs, grads["negatives"]):
        aggregate_backward(drone_projector, pn, g_n, d_grads)
    return value + ce_a + ce_p


class _PooledCache:
    """Region-pooled descriptors per record: row 0 is the global max pool,
    the remaining rows follow the grid order. Maps never change, so this is
    computed once per record."""

    def __init__(self, grid: list[rmac.Region], map_shape: tuple[int, int, int]):
        self.grid = grid
        self.map_shape = map_shape
        full = np.arange(map_shape[1] * map_shape[2])
        self.cells_list = [full] + [rmac.region_cells(r, map_shape) for r in grid]
        self._store: dict[int, np.ndarray] = {}

    def projector(self, params: enc.EncoderParams) -> enc.RegionProjector:
        return enc.RegionProjector(params, self.map_shape, self.cells_list)

    def get(self, record: ImageRecord) -> np.ndarray:
        pooled = self._store.get(record.id)
        if pooled is None:
            rows = [rmac.global_max_pool(record.featmap)]
            rows += rmac.extract_patch_features(record.featmap, self.grid)
            pooled = np.stack(rows)
            self._store[record.id] = pooled
        return pooled


def _soft_step(senior_ground, junior, anchor, doublet_records, cache,
               senior_projector, junior_projector, tau, lambda1,
               jg_grads, jd_grads):
    """Distillation over whole+region descriptors for one doublet."""
    jg, jd = junior
    x_a = anchor.featmap.ravel()
    pooled = [cache.get(r) for r in doublet_records]
    senior_entries = np.vstack([senior_projector.embed(p) for p in pooled])
    junior_entries = np.vstack([junior_projector.embed(p) for p in pooled])

    a_sp = enc.embed_vector(senior_ground, x_a)
    a_jp = enc.embed_vector(jg, x_a)
    per_image = len(cache.grid) + 1
    senior_vec = _similarity_from_rows(a_sp, senior_entries, per_image, tau)
    junior_vec = _similarity_from_rows(a_jp, junior_entries, per_image, 1.0)

    value, g_dots = losses.soft_loss(senior_vec, junior_vec)
    g_anchor, g_entries = losses.similarity_input_grads(junior_vec, g_dots)
    enc.embed_backward(jg, x_a, lambda1 * g_anchor, jg_grads)
    for i, p in enumerate(pooled):
        junior_projector.backward(
            p, lambda1 * g_entries[i * per_image : (i + 1) * per_image], jd_grads)
    return value


def _similarity_from_rows(anchor: np.ndarray, entry_rows: np.ndarray,
                          per_image: int, tau: float) -> losses.SimilarityVector:
    positives = []
    for start in range(0, entry_rows.shape[0], per_image):
        block = entry_rows[start : start + per_image]
        positives.append(losses.DoubletEntry(whole=block[0], patches=list(block[1:])))
    return losses.similarity_softmax(anchor, positives, tau)


def _epoch_batches(ctx, cfg, rng):
    """Yield lists of (anchor, positive_batch) with per-batch drone pools."""
    order = rng.permutation(len(ctx.grounds))
    for start in range(0, len(order), cfg.batch_streets):
        chunk = [ctx.grounds[i] for i in order[start : start + cfg.batch_streets]]
        if len(chunk) < 2:
            continue  # a lone anchor has no in-batch negatives
        entries = [(anchor, _sample_positive_batch(ctx, anchor.landmark, rng))
                   for anchor in chunk]
        yield entries


def _batch_negatives(entries, anchor) -> list[ImageRecord]:
    pool = []
    for other, positives in entries:
        if other.landmark != anchor.landmark:
            pool.extend(positives)
    return pool


def _init_pair(ctx, cfg, stream_prefix):
    """The two branches start independent: cross-branch similarity begins at
    chance and only the consistency pull aligns the spaces, so retrieval
    quality measures what training built rather than what init gave away."""
    input_dim = int(np.prod(ctx.map_shape))
    g = enc.init_params(enc.ROLE_GROUND, cfg.embed_dim, input_dim, ctx.num_classes,
                        substream(cfg.seed, f"{stream_prefix}.ground"), cfg.encoder_tanh)
    d = enc.init_params(enc.ROLE_DRONE, cfg.embed_dim, input_dim, ctx.num_classes,
                        substream(cfg.seed, f"{stream_prefix}.drone"), cfg.encoder_tanh)
    return g, d


def train_senior(split: DatasetSplit, cfg: PeerConfig, mining: bool = True,
                 shared_branches: bool = False):
    """Step I. Returns (ground_params, drone_params, log_lines).

    ``mining=False`` trains the same two-branch architecture with a random
    positive and random negatives instead of mined ones (the plain baseline);
    ``shared_branches=True`` makes both branches one parameter set (the
    one-common-model baseline). With mining on, the first ``warmup_epochs``
    epochs still use random positives: the branches start unaligned, and the
    miner should not trust cross-branch similarities before the consistency
    pull has given them structure.
    """
    cfg.validate()
    ctx = build_context(split)
    ground_params, drone_params = _init_pair(ctx, cfg, "peerlearn.init.senior")
    if shared_branches:
        drone_params = ground_params
    rng = substream(cfg.seed, "peerlearn.senior")
    grid = rmac.region_grid((ctx.map_shape[1], ctx.map_shape[2]), cfg.scales,
                            cfg.width_table, cfg.reference_side)
    cache = _PooledCache(grid, ctx.map_shape)
    log: list[str] = []

    params_list = [ground_params] if shared_branches else [ground_params, drone_params]
    states = [enc.new_sgd_state(p, cfg.lr_head, cfg.lr_body, cfg.momentum,
                                cfg.decay_epoch, cfg.decay_factor) for p in params_list]

    for epoch in range(cfg.epochs_senior):
        for s in states:
            s.epoch = epoch
        for step, entries in enumerate(_epoch_batches(ctx, cfg, rng)):
            grads_list = [enc.new_grads(p) for p in params_list]
            g_grads, d_grads = grads_list[0], grads_list[-1]
            projector = cache.projector(drone_params)
            feature_fn = _mining_feature_fn(ground_params, cache, projector)
            total = 0.0
            used = 0
            for anchor, positives in entries:
                negatives = _batch_negatives(entries, anchor)
                if not negatives:
                    continue
                n_neg = min(cfg.num_negatives, len(negatives))
                if mining and epoch >= cfg.warmup_epochs:
                    mined = mine_easy_triplet(anchor, positives, negatives,
                                              ground_params, drone_params, n_neg,
                                              space=cfg.mining_space,
                                              feature_fn=feature_fn)
                else:
                    pos = positives[int(rng.integers(len(positives)))]
                    idx = rng.permutation(len(negatives))[:n_neg]
                    mined = MinedTriplet(pos, [negatives[i] for i in idx])
                total += _hard_step(ground_params, drone_params, anchor, mined,
                                    ctx, g_grads, d_grads, cache, projector)
                used += 1
            if not used:
                continue
            total /= used
            if not np.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss {total} at epoch {epoch} step {step}")
            projector.flush(d_grads)
            for params, grads, state in zip(params_list, grads_list, states):
                enc.scale_grads(grads, 1.0 / used)
                enc.sgd_step(params, grads, state)
            log.append(f"{epoch} {step} {total:.6f} {0.0:.6f} {total:.6f}")
    return ground_params, drone_params, log


def train_junior(split: DatasetSplit, senior: tuple[enc.EncoderParams, enc.EncoderParams],
                 cfg: PeerConfig, shared_branches: bool = False,
                 round_tag: str = ""):
    """Step II. The senior pair is read-only; returns (ground, drone, log).

    ``round_tag`` names the RNG substream so repeated senior<-junior swap
    rounds draw fresh batches.
    """
    cfg.validate()
    ctx = build_context(split)
    senior_ground, senior_drone = senior
    if cfg.junior_init == "senior":
        ground_params = senior_ground.copy()
        drone_params = ground_params if shared_branches else senior_drone.copy()
    else:
        ground_params, drone_params = _init_pair(ctx, cfg, "peerlearn.init.junior")
        if shared_branches:
            drone_params = ground_params
    rng = substream(cfg.seed, f"peerlearn.junior{round_tag}")
    grid = rmac.region_grid((ctx.map_shape[1], ctx.map_shape[2]), cfg.scales,
                            cfg.width_table, cfg.reference_side)
    cache = _PooledCache(grid, ctx.map_shape)
    senior_projector = cache.projector(senior_drone)  # frozen, built once
    log: list[str] = []

    # Step II refines an already-trained model: it continues at the schedule's
    # decayed rate rather than restarting at the step-I rate.
    params_list = [ground_params] if shared_branches else [ground_params, drone_params]
    states = [enc.new_sgd_state(p, cfg.lr_head * cfg.junior_lr_scale,
                                cfg.lr_body * cfg.junior_lr_scale, cfg.momentum,
                                cfg.decay_epoch, cfg.decay_factor) for p in params_list]

    for epoch in range(cfg.epochs_junior):
        for s in states:
            s.epoch = epoch
        for step, entries in enumerate(_epoch_batches(ctx, cfg, rng)):
            grads_list = [enc.new_grads(p) for p in params_list]
            g_grads, d_grads = grads_list[0], grads_list[-1]
            junior_projector = cache.projector(drone_params)
            feature_fn = _mining_feature_fn(ground_params, cache, junior_projector)
            hard_total = 0.0
            soft_total = 0.0
            used = 0
            for anchor, positives in entries:
                negatives = _batch_negatives(entries, anchor)
                if not negatives:
                    continue
                n_neg = min(cfg.num_negatives, len(negatives))
                # Step II works the difficult positives: the senior only ever
                # trained on the easiest one, the junior draws across all
                # sections while keeping the mined hard negatives.
                mined = mine_easy_triplet(anchor, positives, negatives,
                                          ground_params, drone_params, n_neg,
                                          space=cfg.mining_space,
                                          feature_fn=feature_fn)
                hard_positive = positives[int(rng.integers(len(positives)))]
                mined = MinedTriplet(hard_positive, mined.negatives)
                hard_total += _hard_step(ground_params, drone_params, anchor, mined,
                                         ctx, g_grads, d_grads, cache, junior_projector)
                doublet = positives
                if cfg.num_positives and cfg.num_positives < len(positives):
                    idx = sorted(rng.permutation(len(positives))[: cfg.num_positives])
                    doublet = [positives[i] for i in idx]
                soft_total += _soft_step(senior_ground,
                                         (ground_params, drone_params),
                                         anchor, doublet, cache,
                                         senior_projector, junior_projector,
                                         cfg.tau, cfg.lambda1, g_grads, d_grads)
                used += 1
            if not used:
                continue
            hard_total /= used
            soft_total /= used
            total = losses.joint_gd_loss(hard_total, soft_total, cfg.lambda1)
            if not np.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss {total} at epoch {epoch} step {step}")
            junior_projector.flush(d_grads)
            for params, grads, state in zip(params_list, grads_list, states):
                enc.scale_grads(grads, 1.0 / used)
                enc.sgd_step(params, grads, state)
            log.append(f"{epoch} {step} {hard_total:.6f} {soft_total:.6f} {total:.6f}")
    return ground_params, drone_params, log


# ---------------------------------------------------------------------------
# best-sub-region retrieval representation
# ---------------------------------------------------------------------------

def gallery_descriptors(params: enc.EncoderParams, record: ImageRecord,
                        grid: list[rmac.Region],
                        cache: _PooledCache | None = None,
                        projector: enc.RegionProjector | None = None) -> np.ndarray:
    """(m+1, dim) rows: the image-level region-aggregate feature, then one
    row per grid region, each L2-normalized for cosine scoring."""
    if not grid:
        raise ValueError("gallery_descriptors needs a non-empty grid")
    map_shape = record.featmap.shape
    if cache is None:
        cache = _PooledCache(grid, map_shape)
    if projector is None:
        projector = cache.projector(params)
    pooled = cache.get(record)
    rows = [aggregate_feature(projector, pooled)]
    rows += list(projector.embed(pooled)[1:])
    return np.stack([enc.l2_normalize(r) for r in rows])


def best_subregion_feature(params: enc.EncoderParams, record: ImageRecord,
                           grid: list[rmac.Region], query_emb: np.ndarray):
    """Most query-similar descriptor among whole + regions.

    Returns (descriptor, score, index) where index 0 is the whole image and
    index i >= 1 is grid region i-1.
    """
    descriptors = gallery_descriptors(params, record, grid)
    q = enc.l2_normalize(query_emb)
    scores = descriptors @ q
    best = min(range(len(scores)), key=lambda i: (-scores[i], i))
    return descriptors[best], float(scores[best]), best


def max_region_score(query_emb: np.ndarray, descriptors: np.ndarray) -> float:
    """Gallery score under the best-sub-region representation."""
    return float(np.max(descriptors @ enc.l2_normalize(query_emb)))


class DroneFeatures:
    """Batch helper producing the drone branch's image-level features for a
    fixed parameter set (retrieval-time counterpart of the training path)."""

    def __init__(self, params: enc.EncoderParams, grid: list[rmac.Region],
                 map_shape: tuple[int, int, int]):
        self.cache = _PooledCache(grid, map_shape)
        self.projector = self.cache.projector(params)

    def feature(self, record: ImageRecord, normalize: bool = False) -> np.ndarray:
        emb = aggregate_feature(self.projector, self.cache.get(record))
        return enc.l2_normalize(emb) if normalize else emb
