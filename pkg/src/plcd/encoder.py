"""Per-view affine encoders with classifier heads and hand-derived gradients.

An encoder maps the flattened feature map through one affine layer (optional
tanh) to a ``dim``-dimensional embedding, plus a linear classifier head over
the training identities. Region descriptors share the same parameters: the
region-pooled channel vector is broadcast across the spatial grid and sent
through the identical affine map, which collapses to a (dim, channels)
projection and keeps the checkpoint format free of extra tensors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .dataspace import ImageRecord

ENC_MAGIC = "#plcd-enc v1"

ROLE_GROUND = "ground"
ROLE_DRONE = "drone"
ROLE_SHARED = "satdrone"


@dataclass
class EncoderParams:
    role: str
    weight: np.ndarray            # (dim, input_dim)
    bias: np.ndarray              # (dim,)
    classifier_weight: np.ndarray  # (classes, dim)
    classifier_bias: np.ndarray    # (classes,)
    tanh: bool = False

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def classes(self) -> int:
        return self.classifier_weight.shape[0]

    def copy(self, role: str | None = None) -> "EncoderParams":
        return EncoderParams(
            role=self.role if role is None else role,
            weight=self.weight.copy(),
            bias=self.bias.copy(),
            classifier_weight=self.classifier_weight.copy(),
            classifier_bias=self.classifier_bias.copy(),
            tanh=self.tanh,
        )


# Keeps typical squared distances between fresh embeddings O(1); larger
# scales saturate the exp(-distance) softmax and stall training.
INIT_SCALE = 0.25


def init_params(role: str, dim: int, input_dim: int, classes: int,
                rng: np.random.Generator, tanh: bool = False) -> EncoderParams:
    return EncoderParams(
        role=role,
        weight=rng.standard_normal((dim, input_dim)) * INIT_SCALE / np.sqrt(input_dim),
        bias=np.zeros(dim),
        classifier_weight=rng.standard_normal((classes, dim)) / np.sqrt(dim),
        classifier_bias=np.zeros(classes),
        tanh=tanh,
    )


def params_digest(params: EncoderParams) -> str:
    """Stable content hash, used by freeze-invariant checks."""
    h = hashlib.sha256()
    for arr in (params.weight, params.bias, params.classifier_weight,
                params.classifier_bias):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def l2_normalize(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v if n < eps else v / n


# ---------------------------------------------------------------------------
# forward paths
# ---------------------------------------------------------------------------

def embed_vector(params: EncoderParams, x: np.ndarray, normalize: bool = False) -> np.ndarray:
    if x.shape[0] != params.input_dim:
        raise ValueError(
            f"input of size {x.shape[0]} does not match encoder input_dim "
            f"{params.input_dim} (role {params.role})"
        )
    pre = params.weight @ x + params.bias
    emb = np.tanh(pre) if params.tanh else pre
    return l2_normalize(emb) if normalize else emb


def forward(params: EncoderParams, record: ImageRecord, normalize: bool = False) -> np.ndarray:
    """Whole-image embedding from the flattened feature map."""
    return embed_vector(params, record.featmap.ravel(), normalize=normalize)


def embed_map(params: EncoderParams, record: ImageRecord) -> np.ndarray:
    """Feature map handed to region pooling (the raw map for this encoder family)."""
    return record.featmap


def region_projection(params: EncoderParams, map_shape: tuple[int, int, int],
                      cells: np.ndarray) -> np.ndarray:
    """(dim, channels) projection for a region-pooled vector.

    The pooled vector is treated as sitting on the region's own cells (mean
    of the weight blocks it covers), so the spatial structure the weights
    learned from whole images carries over to region descriptors; a region
    covering the full map reduces to the per-channel mean of all blocks.
    """
    c, h, w = map_shape
    if c * h * w != params.input_dim:
        raise ValueError(
            f"map shape {map_shape} does not flatten to input_dim {params.input_dim}"
        )
    return params.weight.reshape(params.dim, c, h * w)[:, :, cells].mean(axis=2)


def _center(pooled: np.ndarray) -> np.ndarray:
    """Remove the per-vector channel mean from pooled maxima.

    Channel maxima share a large positive offset; without centering every
    region descriptor contains the same dominant direction and cosine scores
    measure alignment with that offset instead of content (the job PCA
    whitening does for full-scale region descriptors).
    """
    return pooled - pooled.mean(axis=-1, keepdims=True)


def patch_embed(params: EncoderParams, pooled: np.ndarray,
                map_shape: tuple[int, int, int], cells: np.ndarray,
                projection: np.ndarray | None = None) -> np.ndarray:
    """Embedding of one region-pooled channel vector."""
    proj = region_projection(params, map_shape, cells) if projection is None else projection
    pre = proj @ _center(pooled) + params.bias
    return np.tanh(pre) if params.tanh else pre


class RegionProjector:
    """Per-grid-region projections for one encoder's current weights.

    Rebuilt once per optimization step (the matrices depend on the weights);
    ``embed``/``backward`` then run over (k, channels) stacks whose rows
    follow the projector's region order.
    """

    def __init__(self, params: EncoderParams, map_shape: tuple[int, int, int],
                 cells_list: list[np.ndarray]):
        self.params = params
        self.map_shape = map_shape
        self.cells_list = cells_list
        self.matrices = np.stack([
            region_projection(params, map_shape, cells) for cells in cells_list
        ])  # (k, dim, channels)
        self._pending = np.zeros_like(self.matrices)
        self._dirty = False

    def embed(self, pooled: np.ndarray) -> np.ndarray:
        pre = np.einsum("kdc,kc->kd", self.matrices, _center(pooled)) + self.params.bias
        return np.tanh(pre) if self.params.tanh else pre

    def backward(self, pooled: np.ndarray, g_emb: np.ndarray,
                 grads: "EncoderGrads") -> None:
        """Accumulate one call's gradients; ``flush`` folds the per-region
        buffer into the weight gradient (cheap to call once per step)."""
        centered = _center(pooled)
        if self.params.tanh:
            pre = np.einsum("kdc,kc->kd", self.matrices, centered) + self.params.bias
            g_pre = g_emb * (1.0 - np.tanh(pre) ** 2)
        else:
            g_pre = g_emb
        self._pending += np.einsum("kd,kc->kdc", g_pre, centered)
        self._dirty = True
        grads.bias += g_pre.sum(axis=0)

    def flush(self, grads: "EncoderGrads") -> None:
        if not self._dirty:
            return
        c, h, w = self.map_shape
        weight3 = grads.weight.reshape(grads.weight.shape[0], c, h * w)
        for row, cells in enumerate(self.cells_list):
            weight3[:, :, cells] += self._pending[row][:, :, None] / len(cells)
        self._pending[:] = 0.0
        self._dirty = False


def logits_from_embedding(params: EncoderParams, emb: np.ndarray) -> np.ndarray:
    return params.classifier_weight @ emb + params.classifier_bias


def logits(params: EncoderParams, record: ImageRecord) -> np.ndarray:
    return logits_from_embedding(params, forward(params, record))


# ---------------------------------------------------------------------------
# backward paths
# ---------------------------------------------------------------------------

@dataclass
class EncoderGrads:
    """Accumulates parameter gradients across a batch."""

    weight: np.ndarray
    bias: np.ndarray
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "weight": self.weight,
            "bias": self.bias,
            "classifier_weight": self.classifier_weight,
            "classifier_bias": self.classifier_bias,
        }


def new_grads(params: EncoderParams) -> EncoderGrads:
    return EncoderGrads(
        weight=np.zeros_like(params.weight),
        bias=np.zeros_like(params.bias),
        classifier_weight=np.zeros_like(params.classifier_weight),
        classifier_bias=np.zeros_like(params.classifier_bias),
    )


def _pre_grad(params: EncoderParams, pre: np.ndarray, g_emb: np.ndarray) -> np.ndarray:
    if params.tanh:
        return g_emb * (1.0 - np.tanh(pre) ** 2)
    return g_emb


def embed_backward(params: EncoderParams, x: np.ndarray, g_emb: np.ndarray,
                   grads: EncoderGrads, normalized: bool = False) -> None:
    """Accumulate parameter gradients for one whole-image embedding.

    With ``normalized`` the incoming gradient is taken wrt the L2-normalized
    embedding and chained through the normalization.
    """
    pre = params.weight @ x + params.bias
    if normalized:
        emb = np.tanh(pre) if params.tanh else pre
        norm = float(np.linalg.norm(emb))
        if norm > 1e-12:
            unit = emb / norm
            g_emb = (g_emb - float(g_emb @ unit) * unit) / norm
    g_pre = _pre_grad(params, pre, g_emb)
    grads.weight += np.outer(g_pre, x)
    grads.bias += g_pre


def classifier_backward(params: EncoderParams, emb: np.ndarray, g_logits: np.ndarray,
                        grads: EncoderGrads) -> np.ndarray:
    """Accumulates head gradients; returns the gradient wrt the embedding."""
    grads.classifier_weight += np.outer(g_logits, emb)
    grads.classifier_bias += g_logits
    return params.classifier_weight.T @ g_logits


def scale_grads(grads: EncoderGrads, factor: float) -> None:
    grads.weight *= factor
    grads.bias *= factor
    grads.classifier_weight *= factor
    grads.classifier_bias *= factor


# ---------------------------------------------------------------------------
# SGD with momentum
# ---------------------------------------------------------------------------

@dataclass
class SgdState:
    """Classic momentum: v <- mu * v - lr * g; p <- p + v.

    The classifier head trains at ``lr_head``, the affine body at ``lr_body``;
    both rates are multiplied once by ``decay_factor`` from ``decay_epoch`` on.
    """

    lr_head: float
    lr_body: float
    momentum: float = 0.9
    decay_epoch: int = 40
    decay_factor: float = 0.1
    epoch: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def rate(self, name: str) -> float:
        base = self.lr_head if name.startswith("classifier") else self.lr_body
        if self.epoch >= self.decay_epoch:
            base *= self.decay_factor
        return base


def new_sgd_state(params: EncoderParams, lr_head: float, lr_body: float,
                  momentum: float = 0.9, decay_epoch: int = 40,
                  decay_factor: float = 0.1) -> SgdState:
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must be in [0, 1) (got {momentum})")
    state = SgdState(lr_head=lr_head, lr_body=lr_body, momentum=momentum,
                     decay_epoch=decay_epoch, decay_factor=decay_factor)
    state.velocity = {
        "weight": np.zeros_like(params.weight),
        "bias": np.zeros_like(params.bias),
        "classifier_weight": np.zeros_like(params.classifier_weight),
        "classifier_bias": np.zeros_like(params.classifier_bias),
    }
    return state


def sgd_step(params: EncoderParams, grads: EncoderGrads, state: SgdState) -> None:
    """One in-place momentum update; rejects non-finite gradients."""
    arrays = grads.arrays()
    for name, g in arrays.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(
                f"non-finite gradient in '{name}' of encoder role {params.role}; step rejected"
            )
    for name, g in arrays.items():
        v = state.velocity[name]
        v *= state.momentum
        v -= state.rate(name) * g
        getattr(params, name)[...] += v


# ---------------------------------------------------------------------------
# finite-difference gradient oracle
# ---------------------------------------------------------------------------

def check_gradients(loss_fn, params: list[np.ndarray], epsilon: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params) -> (value, grads)`` where ``grads`` mirrors ``params``.
    The error at each coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive (got {epsilon})")
    value, grads = loss_fn(params)
    if not np.isfinite(value):
        raise ValueError(f"loss is not finite at the given parameters (got {value})")
    worst = 0.0
    for arr, g in zip(params, grads):
        for idx in np.ndindex(arr.shape):
            keep = arr[idx]
            arr[idx] = keep + epsilon
            up, _ = loss_fn(params)
            arr[idx] = keep - epsilon
            down, _ = loss_fn(params)
            arr[idx] = keep
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError("loss is not finite near the given parameters")
            numeric = (up - down) / (2.0 * epsilon)
            worst = max(worst, abs(numeric - g[idx]) / max(1.0, abs(g[idx])))
    return worst


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def format_params(params: EncoderParams) -> str:
    lines = [f"{ENC_MAGIC} {params.role} {params.dim} {params.input_dim} {params.classes}"]
    for arr in (params.weight, params.bias, params.classifier_weight,
                params.classifier_bias):
        lines.append(" ".join(repr(float(v)) for v in arr.ravel()))
    return "\n".join(lines) + "\n"


def save_params(path, params: EncoderParams) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_params(params))


def load_params(path, tanh: bool = False) -> EncoderParams:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(ENC_MAGIC):
        raise ValueError(f"{path}: missing '{ENC_MAGIC}' header")
    _, _, role, dim, input_dim, classes = lines[0].split()
    dim, input_dim, classes = int(dim), int(input_dim), int(classes)
    values = [float(t) for ln in lines[1:] for t in ln.split()]
    expected = dim * input_dim + dim + classes * dim + classes
    if len(values) != expected:
        raise ValueError(f"{path}: expected {expected} values, found {len(values)}")
    flat = np.array(values)
    offset = 0

    def take(shape):
        nonlocal offset
        size = int(np.prod(shape))
        out = flat[offset : offset + size].reshape(shape)
        offset += size
        return out

    return EncoderParams(
        role=role,
        weight=take((dim, input_dim)),
        bias=take((dim,)),
        classifier_weight=take((classes, dim)),
        classifier_bias=take((classes,)),
        tanh=tanh,
    )
