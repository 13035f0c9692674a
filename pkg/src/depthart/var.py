"""Next-scale autoregressive transformer over token maps.

The sequence is [image tokens, scales 1..K][depth tokens, scales 1..k].
Image positions form a bidirectional conditioning prefix. The input row
for depth scale k is the accumulated composition of the previous depth
predictions, downsampled to scale k and linearly projected; scale 1 uses
a learned start embedding. Attention for a depth position at scale k
reaches the whole image prefix and depth scales strictly below k, so the
scale-k logits are a function of (image tokens, z_{<k}) only.

Decoding is greedy argmax per position, lowest index on ties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from .tensor import Tensor
from .vq import ScaleSchedule, ScheduleError, TokenMap, VqModel

NEG_INF = float("-inf")

# diagnostics only: number of transformer forward passes this process
forward_calls = 0


@dataclass(frozen=True)
class VarConfig:
    schedule: ScaleSchedule
    vocab: int = 64
    emb_dim: int = 16
    width: int = 128
    heads: int = 4
    blocks: int = 4
    mlp_ratio: int = 4


class VarModel:
    """Transformer weights plus the scale layout they were built for."""

    def __init__(self, config: VarConfig, seed: int = 0,
                 codebook_init: np.ndarray | None = None):
        self.config = config
        k = len(config.schedule)
        d = config.width
        c = config.emb_dim
        rng = np.random.default_rng(seed)

        def normal(*shape):
            return Tensor(rng.standard_normal(shape).astype(np.float32) * 0.02,
                          requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape, np.float32), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape, np.float32), requires_grad=True)

        p: dict[str, Tensor] = {}
        if codebook_init is not None:
            p["tok_emb"] = Tensor(np.asarray(codebook_init, np.float32).copy(),
                                  requires_grad=True)
        else:
            p["tok_emb"] = normal(config.vocab, c)
        p["img_proj_w"] = normal(c, d)
        p["img_proj_b"] = zeros(d)
        p["depth_proj_w"] = normal(c, d)
        p["depth_proj_b"] = zeros(d)
        p["start_emb"] = normal(1, d)
        p["scale_emb"] = normal(k, d)
        for ki, (h, w) in enumerate(config.schedule.sizes):
            p[f"pos_emb/{ki}"] = normal(h * w, d)
        for b in range(config.blocks):
            pre = f"block{b}/"
            p[pre + "ln1_g"] = ones(d)
            p[pre + "ln1_b"] = zeros(d)
            p[pre + "qkv_w"] = normal(d, 3 * d)
            p[pre + "qkv_b"] = zeros(3 * d)
            p[pre + "attn_w"] = normal(d, d)
            p[pre + "attn_b"] = zeros(d)
            p[pre + "ln2_g"] = ones(d)
            p[pre + "ln2_b"] = zeros(d)
            p[pre + "mlp_w1"] = normal(d, config.mlp_ratio * d)
            p[pre + "mlp_b1"] = zeros(config.mlp_ratio * d)
            p[pre + "mlp_w2"] = normal(config.mlp_ratio * d, d)
            p[pre + "mlp_b2"] = zeros(d)
        p["ln_f_g"] = ones(d)
        p["ln_f_b"] = zeros(d)
        p["head_w"] = normal(d, config.vocab)
        p["head_b"] = zeros(config.vocab)
        self.params = p
        self._mask_cache: dict[int, np.ndarray] = {}
        self._ids_cache: dict[int, np.ndarray] = {}

    # -- persistence --------------------------------------------------------

    def to_entries(self) -> dict[str, np.ndarray]:
        e = {name: t.data for name, t in self.params.items()}
        cfg = self.config
        e["schedule"] = np.asarray(cfg.schedule.sizes, np.float32)
        e["hp/width"] = np.float32(cfg.width)
        e["hp/heads"] = np.float32(cfg.heads)
        e["hp/blocks"] = np.float32(cfg.blocks)
        e["hp/mlp_ratio"] = np.float32(cfg.mlp_ratio)
        return e

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> "VarModel":
        sched = ScaleSchedule(tuple((int(h), int(w)) for h, w in entries["schedule"]))
        vocab, c = entries["tok_emb"].shape
        cfg = VarConfig(schedule=sched, vocab=vocab, emb_dim=c,
                        width=int(entries["hp/width"]),
                        heads=int(entries["hp/heads"]),
                        blocks=int(entries["hp/blocks"]),
                        mlp_ratio=int(entries["hp/mlp_ratio"]))
        model = cls(cfg)
        for name in model.params:
            model.params[name] = Tensor(entries[name], requires_grad=True)
        return model

    def save(self, path: str) -> None:
        checkpoint.save(path, self.to_entries())

    @classmethod
    def load(cls, path: str) -> "VarModel":
        return cls.from_entries(checkpoint.load(path))

    # -- layout ---------------------------------------------------------------

    def n_image_tokens(self) -> int:
        return self.config.schedule.total_tokens()

    def depth_slices(self, k_max: int) -> list[tuple[int, int]]:
        """(start, stop) of each depth scale within the depth logits block."""
        sizes = self.config.schedule.tokens_per_scale()[:k_max]
        out, off = [], 0
        for n in sizes:
            out.append((off, off + n))
            off += n
        return out

    def attention_mask(self, k_max: int) -> np.ndarray:
        """Additive [L, L] mask for a sequence holding k_max depth scales."""
        hit = self._mask_cache.get(k_max)
        if hit is not None:
            return hit
        tokens = self.config.schedule.tokens_per_scale()
        n_img = sum(tokens)
        length = n_img + sum(tokens[:k_max])
        mask = np.full((length, length), NEG_INF, np.float32)
        mask[:n_img, :n_img] = 0.0  # image attends to all of image
        off = n_img
        for k in range(k_max):
            rows = slice(off, off + tokens[k])
            mask[rows, :n_img] = 0.0                   # full image prefix
            mask[rows, n_img:off] = 0.0                # depth scales < k
            off += tokens[k]
        self._mask_cache[k_max] = mask
        return mask

    def _static_ids(self, k_max: int) -> np.ndarray:
        hit = self._ids_cache.get(k_max)
        if hit is not None:
            return hit
        tokens = self.config.schedule.tokens_per_scale()
        ids = []
        for k, n in enumerate(tokens):
            ids += [k] * n
        for k in range(k_max):
            ids += [k] * tokens[k]
        out = np.asarray(ids, np.int64)
        self._ids_cache[k_max] = out
        return out


# --------------------------------------------------------------------------
# input construction
# --------------------------------------------------------------------------


def depth_input_features(model: VarModel, vq: VqModel,
                         prev_indices: list[np.ndarray],
                         k_max: int) -> list[np.ndarray | None]:
    """Per-scale input features for depth scales 1..k_max.

    ``prev_indices``: flattened predicted/teacher maps [B, n_k] for scales
    below k_max. Scale 1 has no features (start embedding); scale j gets
    the accumulated composition of scales < j, resized to s_j. Computed
    outside the tape: predictions are constants for the transformer.
    """
    if len(prev_indices) < k_max - 1:
        raise ScheduleError("depth_input_features: not enough previous maps")
    sizes = model.config.schedule.sizes
    batch = prev_indices[0].shape[0] if prev_indices else 1
    acc = np.zeros((batch, vq.emb_dim) + vq.schedule.latent, np.float32)
    feats: list[np.ndarray | None] = []
    for j in range(k_max):
        if j == 0:
            feats.append(None)
        else:
            h, w = sizes[j]
            down = T.resize_bilinear(Tensor(acc), (h, w)).data
            feats.append(np.ascontiguousarray(
                down.reshape(batch, vq.emb_dim, h * w).transpose(0, 2, 1)))
        if j < len(prev_indices):
            acc = acc + vq.eta_batch(prev_indices[j], j)
    return feats


def embed_sequence(model: VarModel, img_tokens: np.ndarray,
                   depth_feats: list[np.ndarray | None]) -> Tensor:
    """Batched sequence embedding [B, L, D] from image token ids and the
    per-scale depth input features."""
    p = model.params
    k_max = len(depth_feats)
    b = img_tokens.shape[0]
    img = T.embedding_lookup(p["tok_emb"], img_tokens.astype(np.int64))
    parts = [T.linear(img, p["img_proj_w"], p["img_proj_b"])]
    for j, feats in enumerate(depth_feats):
        if j == 0:
            start = T.embedding_lookup(p["start_emb"],
                                       np.zeros((b, 1), np.int64))
            parts.append(start)
        else:
            parts.append(T.linear(Tensor(feats), p["depth_proj_w"],
                                  p["depth_proj_b"]))
    x = T.concat(parts, axis=1)
    ids = model._static_ids(k_max)
    scale_rows = T.embedding_lookup(p["scale_emb"], ids)
    pos_parts = [p[f"pos_emb/{k}"] for k in range(len(model.config.schedule))]
    pos_parts += [p[f"pos_emb/{k}"] for k in range(k_max)]
    pos_rows = T.concat(pos_parts, axis=0)
    return T.add_table(x, T.add(scale_rows, pos_rows))


def build_inputs(prev_depth_maps: list[TokenMap], image_maps: list[TokenMap],
                 model: VarModel, vq: VqModel) -> Tensor:
    """Single-sample sequence embedding for scales 1..len(prev)+1."""
    k_max = len(prev_depth_maps) + 1
    if k_max > len(model.config.schedule):
        raise ScheduleError("build_inputs: more previous maps than scales")
    img = flatten_maps(image_maps, model.config.schedule)[None, :]
    prev = [m.indices.reshape(1, -1) for m in prev_depth_maps]
    feats = depth_input_features(model, vq, prev, k_max)
    seq = embed_sequence(model, img, feats)
    return T.reshape(seq, seq.shape[1:])


def flatten_maps(maps: list[TokenMap], schedule: ScaleSchedule) -> np.ndarray:
    if len(maps) != len(schedule):
        raise ScheduleError(
            f"expected {len(schedule)} token maps, got {len(maps)}")
    flat = []
    for k, m in enumerate(maps):
        if (m.h, m.w) != schedule.sizes[k]:
            raise ScheduleError(
                f"map {k} is {(m.h, m.w)}, schedule says {schedule.sizes[k]}")
        flat.append(m.indices.reshape(-1))
    return np.concatenate(flat).astype(np.int64)


# --------------------------------------------------------------------------
# forward and inference
# --------------------------------------------------------------------------


def forward(model: VarModel, inputs: Tensor, mask: np.ndarray) -> Tensor:
    """Logits [B, N_depth, V] for every depth position in one pass."""
    global forward_calls
    forward_calls += 1
    x = inputs
    single = x.data.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.data.shape)
    if mask.shape[0] != x.data.shape[1]:
        raise ScheduleError(
            f"mask length {mask.shape[0]} != sequence length {x.data.shape[1]}")
    p = model.params
    cfg = model.config
    b, length, d = x.data.shape
    for blk in range(cfg.blocks):
        pre = f"block{blk}/"
        h = T.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
        qkv = T.linear(h, p[pre + "qkv_w"], p[pre + "qkv_b"])
        att = T.multihead_attention(qkv, cfg.heads, mask)
        x = T.add(x, T.linear(att, p[pre + "attn_w"], p[pre + "attn_b"]))
        h2 = T.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
        h2 = T.gelu(T.linear(h2, p[pre + "mlp_w1"], p[pre + "mlp_b1"]))
        x = T.add(x, T.linear(h2, p[pre + "mlp_w2"], p[pre + "mlp_b2"]))
    x = T.layer_norm(x, p["ln_f_g"], p["ln_f_b"])
    n_img = model.n_image_tokens()
    depth_part = T.slice_axis(x, 1, n_img, length)
    logits = T.linear(depth_part, p["head_w"], p["head_b"])
    if single:
        logits = T.reshape(logits, logits.shape[1:])
    return logits


class _KVCache:
    """Per-layer key/value history for incremental greedy decoding.

    Valid because the mask is prefix-closed: rows of depth scale k attend
    to exactly the rows processed before them (image prefix plus depth
    scales < k), never to their own scale. Decoding therefore needs no
    mask at all: new rows attend to everything cached.
    """

    def __init__(self, blocks: int):
        self.k: list[np.ndarray] = [None] * blocks  # [B, H, Lc, dh]
        self.v: list[np.ndarray] = [None] * blocks

    def append(self, layer: int, k_new: np.ndarray, v_new: np.ndarray) -> None:
        if self.k[layer] is None:
            self.k[layer] = k_new
            self.v[layer] = v_new
        else:
            self.k[layer] = np.concatenate([self.k[layer], k_new], axis=2)
            self.v[layer] = np.concatenate([self.v[layer], v_new], axis=2)


def _np_layer_norm(x, gain, bias, eps=1e-5):
    d = x.shape[-1]
    x2 = x.reshape(-1, d)
    mu = x2.mean(axis=1)
    xc = x2 - mu[:, None]
    var = np.einsum("nc,nc->n", xc, xc) / d
    xc *= (1.0 / np.sqrt(var + eps))[:, None]
    xc *= gain
    xc += bias
    return xc.reshape(x.shape)


def _np_gelu(x):
    u = x * x
    u *= 0.044715
    u += 1.0
    u *= x
    u *= 0.7978845608028654
    np.tanh(u, out=u)
    u += 1.0
    u *= x
    u *= 0.5
    return u


def _split_qkv(qkv: np.ndarray, heads: int):
    b, n, threed = qkv.shape
    d = threed // 3
    dh = d // heads
    arr = qkv.reshape(b, n, 3, heads, dh)
    q = np.ascontiguousarray(arr[:, :, 0].transpose(0, 2, 1, 3))
    k = np.ascontiguousarray(arr[:, :, 1].transpose(0, 2, 1, 3))
    v = np.ascontiguousarray(arr[:, :, 2].transpose(0, 2, 1, 3))
    return q, k, v


def _decode_rows(model: VarModel, rows: np.ndarray, cache: _KVCache,
                 self_attend: bool) -> np.ndarray:
    """Run the blocks over new rows against the cache (inference only).

    ``self_attend`` is True for the bidirectional image prefix, where the
    new rows also see each other; depth scales see only the cache.
    Appends the new rows' keys/values, returns their final hidden states.
    """
    p = model.params
    cfg = model.config
    heads = cfg.heads
    x = rows
    inv_sqrt = 1.0 / math.sqrt(cfg.width // heads)
    for blk in range(cfg.blocks):
        pre = f"block{blk}/"
        h = _np_layer_norm(x, p[pre + "ln1_g"].data, p[pre + "ln1_b"].data)
        qkv = h.reshape(-1, cfg.width) @ p[pre + "qkv_w"].data
        np.add(qkv, p[pre + "qkv_b"].data, out=qkv)
        q, k_new, v_new = _split_qkv(qkv.reshape(h.shape[:2] + (-1,)), heads)
        if self_attend:
            k_att, v_att = k_new, v_new
        else:
            k_att, v_att = cache.k[blk], cache.v[blk]
        s = q @ k_att.swapaxes(-1, -2)
        s *= inv_sqrt
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        att = s @ v_att  # [B, H, n, dh]
        b, _, n, _ = att.shape
        merged = att.transpose(0, 2, 1, 3).reshape(b, n, cfg.width)
        proj = merged.reshape(-1, cfg.width) @ p[pre + "attn_w"].data
        np.add(proj, p[pre + "attn_b"].data, out=proj)
        x = x + proj.reshape(x.shape)
        h2 = _np_layer_norm(x, p[pre + "ln2_g"].data, p[pre + "ln2_b"].data)
        up = h2.reshape(-1, cfg.width) @ p[pre + "mlp_w1"].data
        np.add(up, p[pre + "mlp_b1"].data, out=up)
        up = _np_gelu(up)
        down = up @ p[pre + "mlp_w2"].data
        np.add(down, p[pre + "mlp_b2"].data, out=down)
        x = x + down.reshape(x.shape)
        cache.append(blk, k_new, v_new)
    return x


def _head_logits(model: VarModel, hidden: np.ndarray) -> np.ndarray:
    p = model.params
    h = _np_layer_norm(hidden, p["ln_f_g"].data, p["ln_f_b"].data)
    out = h.reshape(-1, model.config.width) @ p["head_w"].data
    np.add(out, p["head_b"].data, out=out)
    return out.reshape(hidden.shape[:2] + (model.config.vocab,))


def infer_batch(model: VarModel, vq: VqModel,
                img_tokens: np.ndarray) -> list[np.ndarray]:
    """Greedy next-scale decoding for a batch; returns per-scale [B, n_k].

    One decode round per scale (K rounds total). The image prefix and
    earlier depth scales are reused through the key/value cache, which is
    exact here because the mask is prefix-closed. The sequence embedding
    is rebuilt per round by the same code the training passes use, so the
    inputs consumed here are bitwise what a full forward would consume.
    """
    global forward_calls
    schedule = model.config.schedule
    sizes = schedule.tokens_per_scale()
    n_img = sum(sizes)
    preds: list[np.ndarray] = []
    cache = _KVCache(model.config.blocks)
    row_start = 0
    for k in range(len(schedule)):
        feats = depth_input_features(model, vq, preds, k + 1)
        seq = embed_sequence(model, img_tokens, feats).data
        if k == 0:
            _decode_rows(model, seq[:, :n_img], cache, self_attend=True)
        new_rows = seq[:, n_img + row_start:]
        hidden = _decode_rows(model, new_rows, cache, self_attend=False)
        logits = _head_logits(model, hidden)
        forward_calls += 1
        preds.append(logits.argmax(axis=2).astype(np.int32))
        assert preds[-1].shape[1] == sizes[k]
        row_start += sizes[k]
    return preds


def infer(model: VarModel, image_maps: list[TokenMap],
          vq: VqModel) -> list[TokenMap]:
    """Greedy decoding of all K depth token maps for one sample."""
    img = flatten_maps(image_maps, model.config.schedule)[None, :]
    preds = infer_batch(model, vq, img)
    out = []
    for k, flat in enumerate(preds):
        h, w = model.config.schedule.sizes[k]
        out.append(TokenMap(k=k, indices=flat[0].reshape(h, w)))
    return out
