"""Multi-scale residual vector-quantized autoencoder.

A small conv encoder maps a 1-channel raster to a [C, h, w] feature map,
which is decomposed into K token maps of increasing resolution: at each
scale the residual between the features and the accumulated composition
so far is downsampled, quantized against a shared codebook, and the
quantized map's contribution (embedding lookup, bilinear upsample, shared
3x3 conv) is added back. The decoder mirrors the encoder and reconstructs
the raster from the composed sum.

Codebook training follows the established recipe: straight-through
estimator for the encoder gradient, commitment term, and EMA codebook
updates, with k-means initialization over warm-up encoder outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .tensor import Tensor


class ScheduleError(ValueError):
    """Token maps do not conform to the scale schedule."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScaleSchedule:
    """Ordered token-map resolutions, non-decreasing, ending at the
    encoder's spatial output."""

    sizes: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.sizes:
            raise ScheduleError("schedule must have at least one scale")
        prev = (0, 0)
        for h, w in self.sizes:
            if h < 1 or w < 1:
                raise ScheduleError("scale extents must be positive")
            if h < prev[0] or w < prev[1]:
                raise ScheduleError("schedule must be non-decreasing")
            prev = (h, w)

    def __len__(self) -> int:
        return len(self.sizes)

    @property
    def latent(self) -> tuple[int, int]:
        return self.sizes[-1]

    def tokens_per_scale(self) -> list[int]:
        return [h * w for h, w in self.sizes]

    def total_tokens(self) -> int:
        return sum(self.tokens_per_scale())


DEFAULT_SCHEDULE = ScaleSchedule(((1, 1), (2, 2), (4, 4), (8, 8)))


@dataclass
class TokenMap:
    """Grid of codebook indices at one scale."""

    k: int
    indices: np.ndarray  # int32 [h, w]

    @property
    def h(self) -> int:
        return self.indices.shape[0]

    @property
    def w(self) -> int:
        return self.indices.shape[1]


class Codebook:
    """V embedding vectors of dimension C with nearest-neighbor lookup."""

    def __init__(self, vectors: np.ndarray):
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValueError("codebook must be [V, C]")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def nearest(self, flat: np.ndarray) -> np.ndarray:
        """Index of the L2-nearest entry per row; ties pick the lowest index."""
        f = np.asarray(flat, dtype=np.float32)
        d = (f * f).sum(axis=1, keepdims=True) \
            - 2.0 * (f @ self.vectors.T) \
            + (self.vectors * self.vectors).sum(axis=1)[None, :]
        return d.argmin(axis=1).astype(np.int32)

    def min_pairwise_distance(self) -> float:
        v = self.vectors.astype(np.float64)
        d2 = ((v[:, None, :] - v[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        return float(np.sqrt(d2.min()))


def quantize(features, codebook: Codebook, k: int = -1) -> TokenMap:
    """Nearest-codebook token map of a [C, h, w] feature grid."""
    f = features.data if isinstance(features, Tensor) else np.asarray(features)
    if f.ndim != 3 or f.shape[0] != codebook.dim:
        raise T.DimensionError(
            f"quantize: expected [C={codebook.dim}, h, w], got {f.shape}")
    c, h, w = f.shape
    idx = codebook.nearest(f.reshape(c, h * w).T)
    return TokenMap(k=k, indices=idx.reshape(h, w))


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

HIDDEN = 32  # encoder/decoder conv width


def _conv_init(rng, cout, cin, k):
    std = (2.0 / (cin * k * k)) ** 0.5
    return rng.standard_normal((cout, cin, k, k)).astype(np.float32) * std


class VqModel:
    """Encoder, decoder, shared codebook, and per-scale composition conv.

    Immutable after training; safe for concurrent read-only use.
    """

    def __init__(self, schedule: ScaleSchedule = DEFAULT_SCHEDULE,
                 codebook_size: int = 64, emb_dim: int = 16,
                 raster: int = 32, seed: int = 0):
        self.schedule = schedule
        self.raster = raster
        self.emb_dim = emb_dim
        rng = np.random.default_rng(seed)
        p = {}
        p["enc/w1"] = Tensor(_conv_init(rng, HIDDEN, 1, 3), requires_grad=True)
        p["enc/b1"] = Tensor(np.zeros(HIDDEN, np.float32), requires_grad=True)
        p["enc/w2"] = Tensor(_conv_init(rng, HIDDEN, HIDDEN, 3), requires_grad=True)
        p["enc/b2"] = Tensor(np.zeros(HIDDEN, np.float32), requires_grad=True)
        p["enc/w3"] = Tensor(_conv_init(rng, emb_dim, HIDDEN, 3), requires_grad=True)
        p["enc/b3"] = Tensor(np.zeros(emb_dim, np.float32), requires_grad=True)
        p["dec/w1"] = Tensor(_conv_init(rng, HIDDEN, emb_dim, 3), requires_grad=True)
        p["dec/b1"] = Tensor(np.zeros(HIDDEN, np.float32), requires_grad=True)
        p["dec/w2"] = Tensor(_conv_init(rng, HIDDEN, HIDDEN, 3), requires_grad=True)
        p["dec/b2"] = Tensor(np.zeros(HIDDEN, np.float32), requires_grad=True)
        p["dec/w3"] = Tensor(_conv_init(rng, 1, HIDDEN, 3), requires_grad=True)
        p["dec/b3"] = Tensor(np.zeros(1, np.float32), requires_grad=True)
        eta = np.zeros((emb_dim, emb_dim, 3, 3), np.float32)
        for c in range(emb_dim):
            eta[c, c, 1, 1] = 1.0  # identity init, no bias: keeps eta linear
        p["eta/w"] = Tensor(eta, requires_grad=True)
        self.params = p
        self.codebook = Codebook(
            rng.standard_normal((codebook_size, emb_dim)).astype(np.float32))

    # -- persistence -------------------------------------------------------

    def to_entries(self) -> dict[str, np.ndarray]:
        e = {name: t.data for name, t in self.params.items()}
        e["codebook"] = self.codebook.vectors
        e["schedule"] = np.asarray(self.schedule.sizes, dtype=np.float32)
        e["hp/raster"] = np.float32(self.raster)
        return e

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> "VqModel":
        sched = ScaleSchedule(tuple(
            (int(h), int(w)) for h, w in entries["schedule"]))
        cb = entries["codebook"]
        model = cls(schedule=sched, codebook_size=cb.shape[0],
                    emb_dim=cb.shape[1], raster=int(entries["hp/raster"]))
        for name in model.params:
            model.params[name] = Tensor(entries[name], requires_grad=True)
        model.codebook = Codebook(cb)
        return model

    def save(self, path: str) -> None:
        checkpoint.save(path, self.to_entries())

    @classmethod
    def load(cls, path: str) -> "VqModel":
        return cls.from_entries(checkpoint.load(path))

    # -- conv stacks ---------------------------------------------------------

    def encode(self, raster) -> Tensor:
        """Raster [1,H,W] or [B,1,H,W] in [-1,1] to features at the latent
        resolution. Two stride-2 stages then a projection to C channels."""
        x, single = _ensure_batch(raster, expect_channels=1)
        p = self.params
        h = T.gelu(T.conv2d(x, p["enc/w1"], p["enc/b1"], stride=2, padding=1))
        h = T.gelu(T.conv2d(h, p["enc/w2"], p["enc/b2"], stride=2, padding=1))
        f = T.conv2d(h, p["enc/w3"], p["enc/b3"], stride=1, padding=1)
        return _maybe_unbatch(f, single)

    def decode(self, features) -> Tensor:
        x, single = _ensure_batch(features, expect_channels=self.emb_dim)
        p = self.params
        h = T.gelu(T.conv2d(x, p["dec/w1"], p["dec/b1"], stride=1, padding=1))
        h = T.resize_bilinear(h, (self.raster // 2, self.raster // 2))
        h = T.gelu(T.conv2d(h, p["dec/w2"], p["dec/b2"], stride=1, padding=1))
        h = T.resize_bilinear(h, (self.raster, self.raster))
        out = T.conv2d(h, p["dec/w3"], p["dec/b3"], stride=1, padding=1)
        return _maybe_unbatch(out, single)

    # -- quantization and composition ----------------------------------------

    def quantize(self, features, k: int = -1) -> TokenMap:
        return quantize(features, self.codebook, k=k)

    def eta_features(self, feats: Tensor, apply_conv: bool = True) -> Tensor:
        """Upsample a [.., C, h, w] feature tensor to the latent resolution
        and apply the shared composition conv."""
        x, single = _ensure_batch(feats, expect_channels=self.emb_dim)
        up = T.resize_bilinear(x, self.schedule.latent)
        if apply_conv:
            up = T.conv2d(up, self.params["eta/w"], None, stride=1, padding=1)
        return _maybe_unbatch(up, single)

    def eta(self, token_map: TokenMap, apply_conv: bool = True) -> Tensor:
        """Composition operator: embeddings -> bilinear resize -> shared conv."""
        emb = self.codebook.vectors[token_map.indices]  # [h, w, C]
        feats = Tensor(np.ascontiguousarray(emb.transpose(2, 0, 1)))
        return self.eta_features(feats, apply_conv=apply_conv)

    def decompose(self, features) -> list[TokenMap]:
        """Iterative residual quantization over the schedule (coarse to fine)."""
        f = features.data if isinstance(features, Tensor) else np.asarray(features)
        _check_latent(f, self)
        maps: list[TokenMap] = []
        acc = np.zeros_like(f)
        for k, (h, w) in enumerate(self.schedule.sizes):
            resid = f - acc
            down = T.resize_bilinear(Tensor(resid), (h, w)).data
            m = quantize(down, self.codebook, k=k)
            maps.append(m)
            acc = acc + self.eta(m).data
        return maps

    def compose(self, maps: Sequence[TokenMap]) -> Tensor:
        """Sum of per-scale contributions, in schedule order."""
        if len(maps) > len(self.schedule):
            raise ScheduleError(
                f"compose: {len(maps)} maps for a {len(self.schedule)}-scale schedule")
        acc = np.zeros((self.emb_dim,) + self.schedule.latent, np.float32)
        for m in maps:
            expect = self.schedule.sizes[m.k]
            if (m.h, m.w) != expect:
                raise ScheduleError(
                    f"compose: map at scale {m.k} is {(m.h, m.w)}, schedule says {expect}")
            acc = acc + self.eta(m).data
        return Tensor(acc)

    # -- batched no-grad helpers (hot paths) -----------------------------------

    def encode_batch(self, rasters: np.ndarray) -> np.ndarray:
        return self.encode(Tensor(rasters)).data

    def decode_batch(self, feats: np.ndarray) -> np.ndarray:
        return self.decode(Tensor(feats)).data

    def nearest_batch(self, feats: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
        """Quantize [B, C, h, w] features; returns int32 [B, h*w]."""
        b, c = feats.shape[0], feats.shape[1]
        flat = feats.reshape(b, c, -1).transpose(0, 2, 1).reshape(-1, c)
        return self.codebook.nearest(flat).reshape(b, hw[0] * hw[1])

    def eta_batch(self, indices: np.ndarray, k: int) -> np.ndarray:
        """eta over a batch of flattened index maps [B, h_k*w_k]."""
        h, w = self.schedule.sizes[k]
        emb = self.codebook.vectors[indices.reshape(-1)].reshape(
            indices.shape[0], h, w, self.emb_dim).transpose(0, 3, 1, 2)
        return self.eta_features(Tensor(np.ascontiguousarray(emb))).data

    def decompose_batch(self, feats: np.ndarray) -> list[np.ndarray]:
        """Batched decompose; returns per-scale int32 index arrays [B, n_k]."""
        acc = np.zeros_like(feats)
        out = []
        for k, (h, w) in enumerate(self.schedule.sizes):
            down = T.resize_bilinear(Tensor(feats - acc), (h, w)).data
            idx = self.nearest_batch(down, (h, w))
            out.append(idx)
            acc = acc + self.eta_batch(idx, k)
        return out

    def compose_batch(self, idx_list: Sequence[np.ndarray]) -> np.ndarray:
        first = idx_list[0]
        acc = np.zeros((first.shape[0], self.emb_dim) + self.schedule.latent,
                       np.float32)
        for k, idx in enumerate(idx_list):
            acc = acc + self.eta_batch(idx, k)
        return acc

    def encode_image_batch(self, images: np.ndarray) -> np.ndarray:
        """Conditioning path: RGB [B,3,H,W] in [0,1] -> luminance in [-1,1]
        -> the same encoder used for depth rasters."""
        lum = (0.299 * images[:, 0] + 0.587 * images[:, 1] + 0.114 * images[:, 2])
        return self.encode_batch((lum * 2.0 - 1.0)[:, None, :, :].astype(np.float32))


def _ensure_batch(x, expect_channels: int) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if t.data.ndim == 3:
        t = T.reshape(t, (1,) + t.data.shape)
        single = True
    elif t.data.ndim == 4:
        single = False
    else:
        raise T.DimensionError(f"expected 3-D or 4-D input, got {t.data.shape}")
    if t.data.shape[1] != expect_channels:
        raise T.DimensionError(
            f"expected {expect_channels} channels, got {t.data.shape[1]}")
    return t, single


def _maybe_unbatch(t: Tensor, single: bool) -> Tensor:
    return T.reshape(t, t.data.shape[1:]) if single else t


def _check_latent(f: np.ndarray, model: VqModel) -> None:
    want = (model.emb_dim,) + model.schedule.latent
    if f.shape != want:
        raise T.DimensionError(f"expected features {want}, got {f.shape}")


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class VqTrainConfig:
    steps: int = 3000
    warmup_steps: int = 300       # plain-autoencoder phase before k-means init
    batch: int = 8
    lr: float = 2e-3
    seed: int = 0
    commitment: float = 0.25
    ema_decay: float = 0.99
    kmeans_samples: int = 512
    kmeans_iters: int = 20


def _kmeans(points: np.ndarray, k: int, iters: int, rng) -> np.ndarray:
    """Plain Lloyd's iterations; empty clusters respawn on random points."""
    n = points.shape[0]
    centers = points[rng.choice(n, size=k, replace=False)].copy()
    for _ in range(iters):
        d = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1) \
            if n * k * points.shape[1] < 4_000_000 else None
        if d is None:
            d = (points * points).sum(1, keepdims=True) \
                - 2 * points @ centers.T + (centers * centers).sum(1)[None, :]
        assign = d.argmin(axis=1)
        for j in range(k):
            sel = assign == j
            if sel.any():
                centers[j] = points[sel].mean(axis=0)
            else:
                centers[j] = points[rng.integers(n)]
    return centers.astype(np.float32)


def _masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    diff = T.sub(pred, Tensor(target))
    sq = T.mul(diff, diff)
    weighted = T.mul(sq, Tensor(mask))
    return T.scale(T.sum_all(weighted), 1.0 / max(float(mask.sum()), 1.0))


def train_vqvae(rasters: np.ndarray, masks: np.ndarray,
                config: VqTrainConfig = VqTrainConfig(),
                model: Optional[VqModel] = None,
                out_dir: Optional[str] = None):
    """Train the autoencoder and codebook on normalized depth rasters.

    ``rasters``: [N, 1, H, W] in [-1, 1]; ``masks``: same shape, {0, 1}.
    Returns (model, loss_curve) where the curve rows are (step, loss).
    Raises DivergenceError if the loss goes non-finite. With ``out_dir``
    set, a rolling checkpoint is written periodically.
    """
    import os

    from .optim import AdamW

    if rasters.shape[0] == 0:
        raise ValueError("train_vqvae: empty dataset")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = VqModel(seed=config.seed)
    opt = AdamW(model.params, lr=config.lr, weight_decay=0.0)
    n = rasters.shape[0]
    curve: list[tuple[int, float]] = []
    ckpt_period = 1000 if config.steps >= 5000 else max(1, config.steps // 5)
    ckpt_path = os.path.join(out_dir, "vqvae_ckpt_latest.dart") if out_dir else None
    if ckpt_path:
        model.save(ckpt_path)

    def batch_indices(step):
        return rng.integers(0, n, size=min(config.batch, n))

    # phase 1: reconstruction only, no quantization in the loop
    for step in range(config.warmup_steps):
        sel = batch_indices(step)
        x, m = rasters[sel], masks[sel]
        with T.Tape():
            recon = model.decode(model.encode(Tensor(x)))
            loss = _masked_mse(recon, x, m)
            _check_finite(loss, step)
            loss.backward()
        opt.step()
        curve.append((step, loss.item()))

    # k-means codebook init over warm-up encoder outputs
    sel = rng.choice(n, size=min(config.kmeans_samples, n), replace=False)
    feats = model.encode_batch(rasters[sel])
    pts = feats.transpose(0, 2, 3, 1).reshape(-1, model.emb_dim).astype(np.float64)
    model.codebook = Codebook(_kmeans(pts, model.codebook.size,
                                      config.kmeans_iters, rng))

    # phase 2: multi-scale residual VQ with straight-through + EMA updates
    ema_count = np.ones(model.codebook.size, np.float64)
    ema_sum = model.codebook.vectors.astype(np.float64).copy()
    v = model.codebook.size
    for step in range(config.warmup_steps, config.steps):
        sel = batch_indices(step)
        x, m = rasters[sel], masks[sel]
        stats: list[tuple[np.ndarray, np.ndarray]] = []
        with T.Tape():
            f = model.encode(Tensor(x))
            acc: Optional[Tensor] = None
            commit: Optional[Tensor] = None
            for k, (h, w) in enumerate(model.schedule.sizes):
                resid = f if acc is None else T.sub(f, acc)
                s_in = T.resize_bilinear(resid, (h, w))
                idx = model.nearest_batch(s_in.data, (h, w))
                emb = model.codebook.vectors[idx.reshape(-1)].reshape(
                    s_in.data.shape[0], h, w, model.emb_dim).transpose(0, 3, 1, 2)
                emb = np.ascontiguousarray(emb)
                stats.append((idx, np.ascontiguousarray(
                    s_in.data.transpose(0, 2, 3, 1).reshape(-1, model.emb_dim))))
                q = T.add(s_in, Tensor(emb - s_in.data))  # straight-through
                contrib = model.eta_features(q)
                acc = contrib if acc is None else T.add(acc, contrib)
                d = T.sub(s_in, Tensor(emb))
                c = T.mean_all(T.mul(d, d))
                commit = c if commit is None else T.add(commit, c)
            recon = model.decode(acc)
            loss = T.add(_masked_mse(recon, x, m),
                         T.scale(commit, config.commitment / len(model.schedule)))
            _check_finite(loss, step)
            loss.backward()
        opt.step()
        # EMA codebook update from this step's assignments
        cnt = np.zeros(v, np.float64)
        sm = np.zeros((v, model.emb_dim), np.float64)
        for idx, vecs in stats:
            flat = idx.reshape(-1)
            cnt += np.bincount(flat, minlength=v)
            np.add.at(sm, flat, vecs)
        d = config.ema_decay
        ema_count = d * ema_count + (1 - d) * cnt
        ema_sum = d * ema_sum + (1 - d) * sm
        total = ema_count.sum()
        smoothed = (ema_count + 1e-5) / (total + v * 1e-5) * total
        model.codebook = Codebook((ema_sum / smoothed[:, None]).astype(np.float32))
        curve.append((step, loss.item()))
        if ckpt_path and (step + 1) % ckpt_period == 0:
            model.save(ckpt_path)
    return model, curve


def _check_finite(loss: Tensor, step: int) -> None:
    if not np.isfinite(loss.data).all():
        raise DivergenceError(f"loss became non-finite at step {step}")
