"""Synthetic multi-view landmark dataset with facet-visibility structure.

Each landmark owns a latent prototype laid out as a (channels, side, side)
grid, split spatially into one shared center block (what a top-down view
captures) and a ring of angular wedges, one per drone direction section. A
record's feature map exposes the blocks its view can see:

* a drone flying in section ``s`` exposes the center plus wedge ``s``,
* a ground shot exposes the center plus exactly one wedge (its visible
  facet),
* the satellite exposes the center block only.

Everything else is zeroed, and i.i.d. Gaussian noise of scale
``noise_sigma`` is added on top of the whole map. With zero noise, a ground
record and the drone record sharing its facet have identical feature maps,
so the ground record's nearest drone by cosine over flattened maps is always
in its visible-facet section; that is the ground truth the training-time
miner has to rediscover.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .seeds import substream

GROUND = "G"
DRONE = "D"
SATELLITE = "S"
VIEWS = (GROUND, DRONE, SATELLITE)

DATA_MAGIC = "#plcd-data v1"


@dataclass(frozen=True)
class GenConfig:
    """Knobs of the synthetic generator. ``latent_dim`` is derived."""

    num_landmarks: int = 40
    num_sections: int = 6
    drones_per_landmark: int = 18
    grounds_per_landmark: int = 10
    channels: int = 32
    map_side: int = 6
    latent_rank: int = 16
    basis_density: float = 0.1
    noise_sigma: float = 0.7
    train_fraction: float = 0.5
    seed: int = 0

    @property
    def latent_dim(self) -> int:
        return self.channels * self.map_side * self.map_side

    def validate(self) -> None:
        if self.num_landmarks < 2:
            raise ValueError(f"num_landmarks must be >= 2 (got {self.num_landmarks})")
        if self.num_sections < 2:
            raise ValueError(f"num_sections must be >= 2 (got {self.num_sections})")
        if self.drones_per_landmark < 1 or self.drones_per_landmark % self.num_sections:
            raise ValueError(
                "drones_per_landmark must be a positive multiple of num_sections "
                f"(got drones_per_landmark={self.drones_per_landmark}, "
                f"num_sections={self.num_sections})"
            )
        if self.grounds_per_landmark < 1:
            raise ValueError(
                f"grounds_per_landmark must be >= 1 (got {self.grounds_per_landmark})"
            )
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1 (got {self.channels})")
        if self.latent_rank < 1:
            raise ValueError(f"latent_rank must be >= 1 (got {self.latent_rank})")
        if not 0 < self.basis_density <= 1:
            raise ValueError(
                f"basis_density must be in (0, 1] (got {self.basis_density})")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0 (got {self.noise_sigma})")
        if not 0 < self.train_fraction < 1:
            raise ValueError(
                f"train_fraction must be in (0, 1) (got {self.train_fraction})"
            )
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0 (got {self.seed})")
        zones = facet_zones(self.num_sections, self.map_side)
        if any(not zone.any() for zone in zones):
            raise ValueError(
                f"map_side={self.map_side} too small to host {self.num_sections} "
                "facet wedges (some wedge would be empty)"
            )


@dataclass
class ImageRecord:
    """One synthetic image: identity label, view, drone section, feature map."""

    id: int
    view: str
    landmark: int
    section: int
    featmap: np.ndarray

    def __post_init__(self) -> None:
        if self.view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS} (got {self.view!r})")
        if self.view == DRONE and self.section < 1:
            raise ValueError(f"drone record {self.id} needs section >= 1")
        if self.view != DRONE and self.section != 0:
            raise ValueError(f"non-drone record {self.id} must have section 0")


@dataclass
class DatasetSplit:
    """Identity-disjoint train/test partition of a record set."""

    train: list[ImageRecord]
    test: list[ImageRecord]
    num_landmarks: int = 0
    num_sections: int = 0


def center_zone(map_side: int) -> np.ndarray:
    """Boolean (side, side) mask of the shared center block (the part a
    top-down view captures)."""
    size = max(1, map_side // 2)
    lo = (map_side - size) // 2
    mask = np.zeros((map_side, map_side), dtype=bool)
    mask[lo : lo + size, lo : lo + size] = True
    return mask


def facet_zones(num_sections: int, map_side: int) -> list[np.ndarray]:
    """Boolean (side, side) masks, one angular wedge of the outer ring per
    drone direction section."""
    center = center_zone(map_side)
    mid = (map_side - 1) / 2.0
    ys, xs = np.mgrid[0:map_side, 0:map_side]
    angles = np.arctan2(ys - mid, xs - mid)  # [-pi, pi)
    sector = np.floor(num_sections * (angles + math.pi) / (2 * math.pi)).astype(int)
    sector = np.clip(sector, 0, num_sections - 1)
    return [(~center) & (sector == s) for s in range(num_sections)]


def exposure_mask(cfg: GenConfig, view: str, section: int) -> np.ndarray:
    """(channels, side, side) 0/1 mask of the latent blocks a view exposes."""
    visible = center_zone(cfg.map_side).copy()
    if view != SATELLITE:
        visible |= facet_zones(cfg.num_sections, cfg.map_side)[section - 1]
    return np.broadcast_to(visible.astype(float), (cfg.channels, cfg.map_side,
                                                   cfg.map_side)).copy()


def generate_synthetic(cfg: GenConfig) -> DatasetSplit:
    """Generate the dataset and split it by identity. Deterministic per seed.

    Prototypes are drawn from one dataset-wide rank-``latent_rank`` basis
    (identity = coefficient vector), so unseen identities occupy the same
    subspace the training identities span; with full-rank i.i.d. prototypes
    nothing learned on the train identities could transfer. Basis atoms are
    spatially sparse (density ``basis_density``): prototypes concentrate in
    salient spots, which is what makes per-region channel maxima carry
    identity rather than order statistics of featureless noise. Coordinates
    keep unit marginal variance.
    """
    cfg.validate()
    rng = substream(cfg.seed, "dataspace.generate")
    per_section = cfg.drones_per_landmark // cfg.num_sections
    shape = (cfg.latent_rank, cfg.channels, cfg.map_side, cfg.map_side)
    basis = rng.standard_normal(shape) * (rng.random(shape) < cfg.basis_density)
    basis /= np.sqrt(cfg.basis_density)
    records: list[ImageRecord] = []
    next_id = 1

    def emit(view: str, landmark: int, section: int, proto: np.ndarray) -> None:
        nonlocal next_id
        noise = rng.standard_normal(proto.shape)
        featmap = exposure_mask(cfg, view, section) * proto + cfg.noise_sigma * noise
        featmap.setflags(write=False)
        records.append(ImageRecord(next_id, view, landmark, section if view == DRONE else 0, featmap))
        next_id += 1

    for landmark in range(1, cfg.num_landmarks + 1):
        coeffs = rng.standard_normal(cfg.latent_rank)
        proto = np.tensordot(coeffs, basis, axes=1) / np.sqrt(cfg.latent_rank)
        emit(SATELLITE, landmark, 0, proto)
        for section in range(1, cfg.num_sections + 1):
            for _ in range(per_section):
                emit(DRONE, landmark, section, proto)
        for _ in range(cfg.grounds_per_landmark):
            facet = int(rng.integers(1, cfg.num_sections + 1))
            emit(GROUND, landmark, facet, proto)

    return split_by_identity(records, cfg.train_fraction, cfg.seed,
                             num_sections=cfg.num_sections)


def split_by_identity(records: list[ImageRecord], train_fraction: float, seed: int,
                      num_sections: int = 0) -> DatasetSplit:
    """Shuffle identities deterministically; ceil(fraction * C) of them train.

    The train count is clamped so both halves stay non-empty.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1) (got {train_fraction})")
    identities = sorted({r.landmark for r in records})
    if len(identities) < 2:
        raise ValueError(f"need at least 2 identities to split (got {len(identities)})")
    rng = substream(seed, "dataspace.split")
    order = [identities[i] for i in rng.permutation(len(identities))]
    n_train = math.ceil(train_fraction * len(identities))
    n_train = max(1, min(n_train, len(identities) - 1))
    train_ids = set(order[:n_train])
    train = [r for r in records if r.landmark in train_ids]
    test = [r for r in records if r.landmark not in train_ids]
    sections = num_sections or max((r.section for r in records), default=0)
    return DatasetSplit(train=train, test=test,
                        num_landmarks=len(identities), num_sections=sections)


def infer_visible_facet(record: ImageRecord, num_sections: int) -> int:
    """Recover which facet wedge a map exposes, from per-wedge energy.

    Drone records carry the section explicitly; ground records do not (the
    wire format keeps section 0 for non-drone views), so evaluation recovers
    it as the wedge with the highest mean squared activation. Exact at zero
    noise; reliable while the noise floor stays well below the unit signal
    variance.
    """
    if record.view == DRONE:
        return record.section
    side = record.featmap.shape[-1]
    zones = facet_zones(num_sections, side)
    energies = [float(np.mean(record.featmap[:, zone] ** 2)) for zone in zones]
    return int(np.argmax(energies)) + 1


def by_view(records: list[ImageRecord]) -> dict[str, list[ImageRecord]]:
    out: dict[str, list[ImageRecord]] = {v: [] for v in VIEWS}
    for r in records:
        out[r.view].append(r)
    return out


# ---------------------------------------------------------------------------
# serialization (text, line-oriented; part of the CLI contract)
# ---------------------------------------------------------------------------

def format_records(records: list[ImageRecord], num_landmarks: int,
                   num_sections: int) -> str:
    lines = [f"{DATA_MAGIC} {len(records)} {num_landmarks} {num_sections}"]
    for r in records:
        c, h, w = r.featmap.shape
        values = " ".join(repr(float(v)) for v in r.featmap.ravel())
        lines.append(f"{r.id} {r.view} {r.landmark} {r.section} {c} {h} {w} {values}")
    return "\n".join(lines) + "\n"


def write_records(path, records: list[ImageRecord], num_landmarks: int,
                  num_sections: int) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_records(records, num_landmarks, num_sections))


def read_records(path) -> tuple[list[ImageRecord], int, int]:
    """Parse a dataset file; returns (records, num_landmarks, num_sections)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(DATA_MAGIC):
        raise ValueError(f"{path}: missing '{DATA_MAGIC}' header")
    head = lines[0].split()
    count, num_landmarks, num_sections = int(head[2]), int(head[3]), int(head[4])
    if len(lines) - 1 != count:
        raise ValueError(f"{path}: header promises {count} records, found {len(lines) - 1}")
    records = []
    for ln in lines[1:]:
        tok = ln.split()
        rid, view, landmark, section = int(tok[0]), tok[1], int(tok[2]), int(tok[3])
        c, h, w = int(tok[4]), int(tok[5]), int(tok[6])
        values = np.array([float(t) for t in tok[7 : 7 + c * h * w]])
        if values.size != c * h * w:
            raise ValueError(f"{path}: record {rid} has {values.size} values, needs {c * h * w}")
        featmap = values.reshape(c, h, w)
        featmap.setflags(write=False)
        records.append(ImageRecord(rid, view, landmark, section, featmap))
    return records, num_landmarks, num_sections
