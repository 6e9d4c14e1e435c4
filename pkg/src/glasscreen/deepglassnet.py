"""DeepGlassNet encoder.

Four stages: proportion-modulated component embeddings, residual message
passing over a low-rank learned interaction graph, scaled dot-product
self-attention, and a batch-normalized two-layer projection head whose output
is L2-normalized. All tensors are float64.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .data_pipeline import NormalizationStats, TgBand
from .numeric_core import (
    BatchNormState,
    NumericsWarning,
    RandomSource,
    batchnorm,
    batchnorm_train_cached,
    softmax_rows,
)

CHECKPOINT_MAGIC = b"DGNCKPT1"


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    """Magic header does not identify a supported checkpoint format."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint is truncated or fails its checksum."""


@dataclass(frozen=True)
class ArchConfig:
    """Encoder dimensions. Defaults are sized for CPU training."""

    n_components: int
    embed_dim: int = 16
    adjacency_rank: int = 5
    attention_dim: int = 16
    hidden_dim: int = 64
    feature_dim: int = 8
    dropout: float = 0.0
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("n_components", "embed_dim", "adjacency_rank",
                     "attention_dim", "hidden_dim", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.adjacency_rank > self.n_components:
            warnings.warn(
                f"adjacency_rank {self.adjacency_rank} exceeds n_components "
                f"{self.n_components}; the factorization is no longer low-rank",
                stacklevel=2,
            )

    @property
    def flat_dim(self) -> int:
        """Length of the flattened attention output fed to the projection head."""
        return self.n_components * self.attention_dim


@dataclass
class ModelParams:
    """All trainable tensors plus batch-norm state."""

    embeddings: np.ndarray          # (n, d) one row per component
    interaction_factors: np.ndarray  # (n, rank), rows unit-normalized on use
    w_query: np.ndarray             # (d, dk)
    w_key: np.ndarray               # (d, dk)
    w_value: np.ndarray             # (d, dk)
    w_hidden: np.ndarray            # (n * dk, h)
    b_hidden: np.ndarray            # (h,)
    w_out: np.ndarray               # (h, k)
    b_out: np.ndarray               # (k,)
    bn: BatchNormState

    def trainable(self) -> dict[str, np.ndarray]:
        """Name -> tensor for every parameter the optimizer updates."""
        return {
            "embeddings": self.embeddings,
            "interaction_factors": self.interaction_factors,
            "w_query": self.w_query,
            "w_key": self.w_key,
            "w_value": self.w_value,
            "w_hidden": self.w_hidden,
            "b_hidden": self.b_hidden,
            "w_out": self.w_out,
            "b_out": self.b_out,
            "bn_gamma": self.bn.gamma,
            "bn_beta": self.bn.beta,
        }

    def copy(self) -> "ModelParams":
        return ModelParams(
            embeddings=self.embeddings.copy(),
            interaction_factors=self.interaction_factors.copy(),
            w_query=self.w_query.copy(),
            w_key=self.w_key.copy(),
            w_value=self.w_value.copy(),
            w_hidden=self.w_hidden.copy(),
            b_hidden=self.b_hidden.copy(),
            w_out=self.w_out.copy(),
            b_out=self.b_out.copy(),
            bn=self.bn.copy(),
        )


# weight matrices get decoupled weight decay; biases and batch-norm do not
WEIGHT_DECAY_TENSORS = frozenset({
    "embeddings", "interaction_factors", "w_query", "w_key", "w_value",
    "w_hidden", "w_out",
})


def init_params(cfg: ArchConfig, seed: int) -> ModelParams:
    """Weights ~ N(0, 1/sqrt(fan_in)) with fan_in = input dimension (rows);
    biases zero; batch norm at identity with neutral running statistics."""
    rng = RandomSource(seed)

    def draw(rows: int, cols: int) -> np.ndarray:
        return rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols))

    n, d = cfg.n_components, cfg.embed_dim
    dk, h, k = cfg.attention_dim, cfg.hidden_dim, cfg.feature_dim
    return ModelParams(
        embeddings=draw(n, d),
        interaction_factors=draw(n, cfg.adjacency_rank),
        w_query=draw(d, dk),
        w_key=draw(d, dk),
        w_value=draw(d, dk),
        w_hidden=draw(cfg.flat_dim, h),
        b_hidden=np.zeros(h),
        w_out=draw(h, k),
        b_out=np.zeros(k),
        bn=BatchNormState.initial(h, momentum=cfg.bn_momentum, epsilon=cfg.bn_epsilon),
    )


# ---------------------------------------------------------------------------
# layers


def embed_proportions(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Row i of the result is x_i times component i's embedding. Accepts a
    single composition (n,) or a batch (B, n)."""
    x = np.asarray(x, dtype=np.float64)
    n = params.embeddings.shape[0]
    if x.shape[-1] != n:
        raise ValueError(f"composition has {x.shape[-1]} entries, model expects {n}")
    return x[..., :, None] * params.embeddings


def _unit_factors(params: ModelParams):
    """Row-normalized interaction factors plus their original norms."""
    v = params.interaction_factors
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms <= 1e-12):
        raise ValueError("interaction_factors contains a zero row; cannot normalize")
    vhat = v / norms[:, None]
    return vhat, norms


def adjacency(params: ModelParams) -> np.ndarray:
    """Symmetric component-interaction matrix with unit diagonal.

    Rows of the stored factors are L2-normalized first, so the Gram matrix has
    ones on the diagonal and entries in [-1, 1] by Cauchy-Schwarz.
    """
    vhat, _ = _unit_factors(params)
    return vhat @ vhat.T


def graph_convolve(hmat: np.ndarray, adj: np.ndarray) -> np.ndarray:
    """Residual message passing: each row keeps itself plus the interaction-
    weighted mean of the other rows. Accepts (n, d) or batched (B, n, d)."""
    hmat = np.asarray(hmat, dtype=np.float64)
    adj = np.asarray(adj, dtype=np.float64)
    n = adj.shape[0]
    if adj.shape != (n, n):
        raise ValueError(f"adjacency must be square, got {adj.shape}")
    if n < 2:
        raise ValueError("graph convolution needs at least 2 components")
    if hmat.shape[-2] != n:
        raise ValueError(f"row count {hmat.shape[-2]} does not match adjacency size {n}")
    masked = adj - np.diag(np.diag(adj))  # self message excluded by definition
    return hmat + np.matmul(masked, hmat) / (n - 1)


def _attention_cached(z: np.ndarray, params: ModelParams):
    dk = params.w_query.shape[1]
    q = z @ params.w_query
    k = z @ params.w_key
    v = z @ params.w_value
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(dk)
    alpha = softmax_rows(scores)
    attended = np.matmul(alpha, v)
    return attended, q, k, v, alpha


def self_attention(z: np.ndarray, params: ModelParams) -> np.ndarray:
    """Scaled dot-product attention across components; returns the attended
    (n, dk) rows (batched input gives (B, n, dk))."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != params.w_query.shape[0]:
        raise ValueError(
            f"attention input width {z.shape[-1]} does not match "
            f"w_query rows {params.w_query.shape[0]}"
        )
    attended, *_ = _attention_cached(z, params)
    return attended


def _normalize_rows_guarded(out: np.ndarray):
    """Unit-normalize rows; rows with norm <= 1e-12 pass through with a warning."""
    norms = np.linalg.norm(out, axis=-1)
    guarded = norms <= 1e-12
    if np.any(guarded):
        warnings.warn("feature vector with near-zero norm left unnormalized",
                      NumericsWarning, stacklevel=3)
    divisor = np.where(guarded, 1.0, norms)
    return out / divisor[..., None], norms, divisor


def project(u: np.ndarray, params: ModelParams, mode: str = "eval") -> np.ndarray:
    """Projection head for one attended (n, dk) block: flatten row-major,
    linear, batch norm, ReLU, linear, L2 normalize. Train mode is only valid
    inside a batch context and is rejected here."""
    u = np.asarray(u, dtype=np.float64)
    if mode == "train":
        raise ValueError("train-mode projection needs a batch of >= 2 samples; "
                         "use forward_batch")
    if mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    flat = u.reshape(-1)
    if flat.shape[0] != params.w_hidden.shape[0]:
        raise ValueError(f"flattened width {flat.shape[0]} does not match "
                         f"w_hidden rows {params.w_hidden.shape[0]}")
    pre = flat @ params.w_hidden + params.b_hidden
    activated = np.maximum(batchnorm(pre, params.bn, "eval"), 0.0)
    out = activated @ params.w_out + params.b_out
    feature, _, _ = _normalize_rows_guarded(out[None, :])
    return feature[0]


@dataclass
class ForwardTrace:
    """Per-sample intermediates of one forward pass."""

    modulated: np.ndarray   # (n, d)
    adjacency: np.ndarray   # (n, n)
    mixed: np.ndarray       # (n, d)
    query: np.ndarray       # (n, dk)
    key: np.ndarray         # (n, dk)
    value: np.ndarray       # (n, dk)
    attention: np.ndarray   # (n, n), rows sum to 1
    attended: np.ndarray    # (n, dk)
    flat: np.ndarray        # (n * dk,)
    pre_bn: np.ndarray      # (h,)
    post_relu: np.ndarray   # (h,)
    feature: np.ndarray     # (k,), unit norm


@dataclass
class BatchTrace:
    """Batched forward intermediates plus the caches backward needs."""

    inputs: np.ndarray          # (B, n)
    modulated: np.ndarray       # (B, n, d)
    unit_factors: np.ndarray    # (n, rank)
    factor_norms: np.ndarray    # (n,)
    adjacency: np.ndarray       # (n, n)
    masked_adjacency: np.ndarray  # (n, n), zero diagonal
    mixed: np.ndarray           # (B, n, d)
    query: np.ndarray           # (B, n, dk)
    key: np.ndarray             # (B, n, dk)
    value: np.ndarray           # (B, n, dk)
    attention: np.ndarray       # (B, n, n)
    attended: np.ndarray        # (B, n, dk)
    flat: np.ndarray            # (B, n*dk)
    pre_bn: np.ndarray          # (B, h)
    bn_x_hat: np.ndarray | None  # train-mode cache
    bn_inv_std: np.ndarray | None
    bn_out: np.ndarray          # (B, h)
    post_relu: np.ndarray       # (B, h)
    dropout_mask: np.ndarray | None
    head_out: np.ndarray        # (B, k) pre-normalization
    out_norms: np.ndarray       # (B,)
    out_divisor: np.ndarray     # (B,) 1.0 where the zero-norm guard fired
    features: np.ndarray        # (B, k)
    mode: str

    def sample(self, i: int) -> ForwardTrace:
        return ForwardTrace(
            modulated=self.modulated[i],
            adjacency=self.adjacency,
            mixed=self.mixed[i],
            query=self.query[i],
            key=self.key[i],
            value=self.value[i],
            attention=self.attention[i],
            attended=self.attended[i],
            flat=self.flat[i],
            pre_bn=self.pre_bn[i],
            post_relu=self.post_relu[i],
            feature=self.features[i],
        )


def forward_batch(
    x: np.ndarray,
    params: ModelParams,
    mode: str = "eval",
    dropout: float = 0.0,
    rng: RandomSource | None = None,
    update_running: bool = True,
) -> tuple[np.ndarray, BatchTrace]:
    """Run the encoder over a (B, n) batch of normalized compositions.

    Train mode normalizes the projection head by batch statistics (B >= 2)
    and, unless ``update_running`` is false, folds them into the running
    statistics. Eval mode is a pure function of (x, params).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a (B, n) batch, got shape {x.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and x.shape[0] < 2:
        raise ValueError("train-mode forward needs a batch of >= 2 samples")

    b = x.shape[0]
    n = params.embeddings.shape[0]
    modulated = embed_proportions(x, params)
    vhat, factor_norms = _unit_factors(params)
    adj = vhat @ vhat.T
    masked = adj - np.diag(np.diag(adj))
    mixed = modulated + np.matmul(masked, modulated) / (n - 1)
    attended, q, k, v, alpha = _attention_cached(mixed, params)
    flat = attended.reshape(b, -1)
    pre = flat @ params.w_hidden + params.b_hidden

    if mode == "train":
        bn_out, x_hat, inv_std = batchnorm_train_cached(pre, params.bn, update_running)
    else:
        bn_out = batchnorm(pre, params.bn, "eval")
        x_hat, inv_std = None, None

    post = np.maximum(bn_out, 0.0)
    mask = None
    if mode == "train" and dropout > 0.0:
        if rng is None:
            raise ValueError("dropout > 0 in train mode requires an rng")
        mask = (rng.uniform(size=post.shape) >= dropout) / (1.0 - dropout)
        post = post * mask

    head_out = post @ params.w_out + params.b_out
    features, norms, divisor = _normalize_rows_guarded(head_out)

    trace = BatchTrace(
        inputs=x, modulated=modulated, unit_factors=vhat, factor_norms=factor_norms,
        adjacency=adj, masked_adjacency=masked, mixed=mixed,
        query=q, key=k, value=v, attention=alpha, attended=attended,
        flat=flat, pre_bn=pre, bn_x_hat=x_hat, bn_inv_std=inv_std,
        bn_out=bn_out, post_relu=post, dropout_mask=mask,
        head_out=head_out, out_norms=norms, out_divisor=divisor,
        features=features, mode=mode,
    )
    return features, trace


def forward(x: np.ndarray, params: ModelParams, mode: str = "eval"):
    """Single-composition forward pass returning (feature, trace).

    Train mode is rejected: batch statistics need >= 2 samples, so training
    goes through forward_batch.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a single composition vector, got shape {x.shape}")
    if mode == "train":
        raise ValueError("train-mode forward needs a batch of >= 2 samples; "
                         "use forward_batch")
    features, trace = forward_batch(x[None, :], params, mode=mode)
    return features[0], trace.sample(0)


def eval_features(x: np.ndarray, params: ModelParams, chunk: int = 4096) -> np.ndarray:
    """Eval-mode features for a (B, n) batch, computed in bounded-size chunks."""
    x = np.asarray(x, dtype=np.float64)
    outputs = []
    for start in range(0, x.shape[0], chunk):
        f, _ = forward_batch(x[start:start + chunk], params, mode="eval")
        outputs.append(f)
    k = params.w_out.shape[1]
    if not outputs:
        return np.zeros((0, k))
    return np.concatenate(outputs, axis=0)


# ---------------------------------------------------------------------------
# checkpoint persistence

_CHECKPOINT_TENSORS = (
    "embeddings", "interaction_factors", "w_query", "w_key", "w_value",
    "w_hidden", "b_hidden", "w_out", "b_out",
)


@dataclass
class Checkpoint:
    params: ModelParams
    arch: ArchConfig
    stats: NormalizationStats
    band: TgBand
    center: np.ndarray | None = None


def _tensor_shapes(cfg: ArchConfig) -> dict[str, tuple[int, ...]]:
    n, d = cfg.n_components, cfg.embed_dim
    dk, h, k = cfg.attention_dim, cfg.hidden_dim, cfg.feature_dim
    return {
        "embeddings": (n, d),
        "interaction_factors": (n, cfg.adjacency_rank),
        "w_query": (d, dk),
        "w_key": (d, dk),
        "w_value": (d, dk),
        "w_hidden": (cfg.flat_dim, h),
        "b_hidden": (h,),
        "w_out": (h, k),
        "b_out": (k,),
    }


def save_checkpoint(
    params: ModelParams,
    cfg: ArchConfig,
    stats: NormalizationStats,
    band: TgBand,
    path,
    center: np.ndarray | None = None,
) -> None:
    """Write the versioned binary checkpoint (bit-exact round trip).

    Layout: magic, arch header, all tensors in declared order as little-endian
    float64, normalization stats, Tg band, optional class center, then a
    SHA-256 checksum of everything before it.
    """
    def le_bytes(a: np.ndarray) -> bytes:
        a = np.ascontiguousarray(a, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise ValueError("refusing to save non-finite tensor values")
        return a.astype("<f8", copy=False).tobytes()

    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<6q", cfg.n_components, cfg.embed_dim, cfg.adjacency_rank,
                        cfg.attention_dim, cfg.hidden_dim, cfg.feature_dim)
    blob += struct.pack("<3d", cfg.dropout, params.bn.momentum, params.bn.epsilon)
    for name in _CHECKPOINT_TENSORS:
        blob += le_bytes(getattr(params, name))
    for bn_field in (params.bn.gamma, params.bn.beta,
                     params.bn.running_mean, params.bn.running_var):
        blob += le_bytes(bn_field)
    blob += le_bytes(stats.mean)
    blob += le_bytes(stats.std)
    blob += struct.pack("<2d", band.low, band.high)
    if center is None:
        blob += struct.pack("<B", 0)
    else:
        blob += struct.pack("<B", 1)
        blob += le_bytes(np.asarray(center, dtype=np.float64))
    blob += hashlib.sha256(bytes(blob)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint, verifying format and
    checksum before constructing any model object."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) or blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: not a DGNCKPT1 checkpoint")
    if len(blob) < len(CHECKPOINT_MAGIC) + 32:
        raise CheckpointCorruptError(f"{path}: truncated checkpoint")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointCorruptError(f"{path}: checksum mismatch (corrupted or truncated)")

    offset = len(CHECKPOINT_MAGIC)

    def unpack(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(payload):
            raise CheckpointCorruptError(f"{path}: truncated checkpoint")
        values = struct.unpack_from(fmt, payload, offset)
        offset += size
        return values

    def read_array(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape))
        size = count * 8
        if offset + size > len(payload):
            raise CheckpointCorruptError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        offset += size
        return arr.astype(np.float64).reshape(shape)

    n, d, rank, dk, h, k = unpack("<6q")
    dropout, momentum, epsilon = unpack("<3d")
    cfg = ArchConfig(n_components=n, embed_dim=d, adjacency_rank=rank,
                     attention_dim=dk, hidden_dim=h, feature_dim=k,
                     dropout=dropout, bn_momentum=momentum, bn_epsilon=epsilon)
    shapes = _tensor_shapes(cfg)
    tensors = {name: read_array(shapes[name]) for name in _CHECKPOINT_TENSORS}
    bn = BatchNormState(
        gamma=read_array((h,)),
        beta=read_array((h,)),
        running_mean=read_array((h,)),
        running_var=read_array((h,)),
        momentum=momentum,
        epsilon=epsilon,
    )
    stats = NormalizationStats(mean=read_array((n,)), std=read_array((n,)))
    low, high = unpack("<2d")
    (has_center,) = unpack("<B")
    center = read_array((k,)) if has_center else None
    if offset != len(payload):
        raise CheckpointCorruptError(f"{path}: {len(payload) - offset} unexpected trailing bytes")
    params = ModelParams(bn=bn, **tensors)
    return Checkpoint(params=params, arch=cfg, stats=stats,
                      band=TgBand(low, high), center=center)
