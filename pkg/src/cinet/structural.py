"""Keypoint grouping and group encoders.

Each cloud is split into FPS keypoints with fixed-size k-NN groups. Tokens
are linear embeddings of keypoint-relative positions; an attention encoder
(or a per-token MLP for the ablation) turns them into group embeddings.

Every cloud point is also assigned to the group of its nearest keypoint.
Points that are not members of that group get a query-only token that
attends to the group's members without being attended to, so each point
ends up with its own encoded token and member outputs are unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cinet import autodiff as ad
from cinet.autodiff import Tensor
from cinet.geometry import PointCloud, SpatialIndex, build_spatial_index, farthest_point_sample


def default_n_groups(n_points: int, n_max: int = 512) -> int:
    """512 groups for clouds of 16K points or more, else max(16, n/32)."""
    if n_points >= 16384:
        return min(n_max, n_points)
    return min(n_points, max(16, n_points // 32))


@dataclass(frozen=True)
class PointGroups:
    keypoints: np.ndarray  # (G,) cloud indices in FPS order
    members: np.ndarray  # (G, k) cloud indices, nearest first
    local: np.ndarray  # (G, k, 3) member minus keypoint position

    @property
    def n_groups(self) -> int:
        return self.members.shape[0]

    @property
    def k(self) -> int:
        return self.members.shape[1]


@dataclass(frozen=True)
class CloudStructure:
    """Grouping plus the per-point decoding slots used by the detection head."""

    groups: PointGroups
    assign: np.ndarray  # (N,) group of the nearest keypoint
    outsiders: np.ndarray  # (M,) points that are not members of their assigned group
    outsider_local: np.ndarray  # (M, 3) position relative to the assigned keypoint
    slot: np.ndarray  # (N,) row in [members (G*k) ; outsiders (M)]

    @property
    def n_points(self) -> int:
        return self.assign.shape[0]

    @property
    def outsider_group(self) -> np.ndarray:
        return self.assign[self.outsiders]


def group_points(cloud: PointCloud, n_groups: int, k: int, index: SpatialIndex | None = None) -> PointGroups:
    n = cloud.n_points
    if not 1 <= n_groups <= n:
        raise ValueError(f"n_groups must be in [1, {n}], got {n_groups}")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    keys = farthest_point_sample(cloud, n_groups)
    index = index or build_spatial_index(cloud)
    members, _ = index.query(cloud.points[keys], k)
    local = cloud.points[members] - cloud.points[keys][:, None, :]
    return PointGroups(keys, members, local)


def assign_to_groups(cloud: PointCloud, groups: PointGroups) -> CloudStructure:
    n = cloud.n_points
    key_index = SpatialIndex(cloud.points[groups.keypoints])
    assign = key_index.query(cloud.points, 1)[0][:, 0]
    pos = np.full(n, -1, dtype=np.int64)
    hit_p, hit_j = np.nonzero(groups.members[assign] == np.arange(n)[:, None])
    pos[hit_p] = hit_j
    outsiders = np.flatnonzero(pos < 0)
    local = cloud.points[outsiders] - cloud.points[groups.keypoints[assign[outsiders]]]
    slot = assign * groups.k + pos
    slot[outsiders] = groups.n_groups * groups.k + np.arange(outsiders.size)
    return CloudStructure(groups, assign, outsiders, local, slot)


def crop_structure(structure: CloudStructure, group_ids) -> tuple:
    """Restrict to some groups and the points assigned to them.

    Returns ``(cropped structure, point indices)``; the cropped structure
    numbers groups in the order of ``group_ids`` and points in cloud order.
    """
    gsel = np.asarray(group_ids, dtype=np.int64)
    g_all, k = structure.groups.n_groups, structure.groups.k
    remap = np.full(g_all, -1, dtype=np.int64)
    remap[gsel] = np.arange(gsel.size)
    pts = np.flatnonzero(remap[structure.assign] >= 0)
    assign = remap[structure.assign[pts]]
    old_slot = structure.slot[pts]
    member = old_slot < g_all * k
    out_pos = np.full(structure.outsiders.size, -1, dtype=np.int64)
    keep_out = remap[structure.outsider_group] >= 0
    out_pos[keep_out] = np.arange(int(keep_out.sum()))
    slot = np.empty(pts.size, dtype=np.int64)
    slot[member] = assign[member] * k + old_slot[member] % k
    slot[~member] = gsel.size * k + out_pos[old_slot[~member] - g_all * k]
    g = structure.groups
    groups = PointGroups(g.keypoints[gsel], g.members[gsel], g.local[gsel])
    return CloudStructure(groups, assign, np.flatnonzero(~member), structure.outsider_local[keep_out], slot), pts


def build_structure(cloud: PointCloud, n_groups: int | None = None, k: int = 32) -> CloudStructure:
    n_groups = n_groups or default_n_groups(cloud.n_points)
    groups = group_points(cloud, n_groups, min(k, cloud.n_points))
    return assign_to_groups(cloud, groups)


# ----------------------------------------------------------------------------
# parameters


@dataclass
class EncoderParams:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 2
    coord_scale: float | np.ndarray = 1.0  # scalar or per-axis (3,)
    kind: str = "transformer"
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if self.kind not in ("transformer", "mlp"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def named(self):
        return sorted(self.tensors.items())


def init_encoder(d_model: int = 64, n_layers: int = 2, n_heads: int = 4, seed: int = 0, kind: str = "transformer",
                 coord_scale=1.0, ffn_mult: int = 2, embed_bias_std: float = 0.0) -> EncoderParams:
    """Kaiming weights, zero biases.

    ``embed_bias_std > 0`` draws the token-embedding bias from N(0, std^2)
    instead, so a keypoint's own token (local position 0) is not the zero
    vector that the first LayerNorm cannot normalize.
    """
    rng = ad.make_rng(seed)
    t: dict[str, Tensor] = {}
    t["embed.W"] = ad.kaiming_init((3, d_model), 3, rng)
    t["embed.b"] = ad.zeros_param((d_model,))
    if embed_bias_std > 0:
        t["embed.b"].data = rng.standard_normal(d_model) * embed_bias_std
    hidden = ffn_mult * d_model
    if kind == "transformer":
        for layer in range(n_layers):
            p = f"layer{layer}."
            t[p + "ln1.g"] = ad.ones_param((d_model,))
            t[p + "ln1.b"] = ad.zeros_param((d_model,))
            for w in ("wq", "wk", "wv", "wo"):
                t[p + w] = ad.kaiming_init((d_model, d_model), d_model, rng)
            t[p + "bo"] = ad.zeros_param((d_model,))
            t[p + "ln2.g"] = ad.ones_param((d_model,))
            t[p + "ln2.b"] = ad.zeros_param((d_model,))
            t[p + "ff1.W"] = ad.kaiming_init((d_model, hidden), d_model, rng)
            t[p + "ff1.b"] = ad.zeros_param((hidden,))
            t[p + "ff2.W"] = ad.kaiming_init((hidden, d_model), hidden, rng)
            t[p + "ff2.b"] = ad.zeros_param((d_model,))
    else:
        t["mlp1.W"] = ad.kaiming_init((d_model, hidden), d_model, rng)
        t["mlp1.b"] = ad.zeros_param((hidden,))
        t["mlp2.W"] = ad.kaiming_init((hidden, d_model), hidden, rng)
        t["mlp2.b"] = ad.zeros_param((d_model,))
    t["final.g"] = ad.ones_param((d_model,))
    t["final.b"] = ad.zeros_param((d_model,))
    for name, tensor in t.items():
        tensor.name = name
    return EncoderParams(d_model, n_layers, n_heads, ffn_mult, coord_scale, kind, t)


# ----------------------------------------------------------------------------
# forward passes


def embed_points(local, params: EncoderParams) -> Tensor:
    """Linear token per member: W . (scaled keypoint-relative position) + b."""
    local = local.local if isinstance(local, PointGroups) else local
    pos = np.asarray(local, dtype=np.float64) * params.coord_scale
    return ad.matmul(ad.Tensor(pos), params["embed.W"]) + params["embed.b"]


@dataclass
class GroupEmbeddings:
    rows: Tensor  # (G, d) group embeddings
    tokens: Tensor  # (G, k, d) encoded member tokens
    outsider_tokens: Tensor | None = None  # (M, d) encoded query-only tokens
    kind: str = "transformer"

    @property
    def n_groups(self) -> int:
        return self.rows.shape[0]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (..., t, d) -> (..., h, t, d/h)
    *lead, t, d = x.shape
    y = ad.reshape(x, tuple(lead) + (t, n_heads, d // n_heads))
    nl = len(lead)
    return ad.transpose(y, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    nl = len(lead)
    y = ad.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return ad.reshape(y, tuple(lead) + (t, h * dh))


def _feed_forward(x: Tensor, params: EncoderParams, p: str) -> Tensor:
    xn = ad.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
    ff = ad.gelu(ad.matmul(xn, params[p + "ff1.W"]) + params[p + "ff1.b"])
    return x + (ad.matmul(ff, params[p + "ff2.W"]) + params[p + "ff2.b"])


def _attention_layer(x: Tensor, params: EncoderParams, layer: int, xo: Tensor | None = None, og=None):
    p = f"layer{layer}."
    h = params.n_heads
    scale = 1.0 / math.sqrt(params.d_model // h)
    xn = ad.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
    q = _split_heads(ad.matmul(xn, params[p + "wq"]), h)
    kk = _split_heads(ad.matmul(xn, params[p + "wk"]), h)
    v = _split_heads(ad.matmul(xn, params[p + "wv"]), h)
    attn = ad.softmax(ad.matmul(q, ad.transpose(kk, (0, 1, 3, 2))) * scale, axis=-1)
    out = _merge_heads(ad.matmul(attn, v))
    x_new = _feed_forward(x + (ad.matmul(out, params[p + "wo"]) + params[p + "bo"]), params, p)
    if xo is None:
        return x_new, None
    # Query-only tokens: each reads the (pre-update) keys/values of its group.
    m = xo.shape[0]
    xon = ad.layer_norm(xo, params[p + "ln1.g"], params[p + "ln1.b"])
    qo = ad.reshape(_split_heads(ad.reshape(ad.matmul(xon, params[p + "wq"]), (m, 1, -1)), h), (m, h, 1, -1))
    ko = ad.gather(kk, og, axis=0)
    vo = ad.gather(v, og, axis=0)
    attn_o = ad.softmax(ad.matmul(qo, ad.transpose(ko, (0, 1, 3, 2))) * scale, axis=-1)
    out_o = ad.reshape(_merge_heads(ad.matmul(attn_o, vo)), (m, -1))
    xo_new = _feed_forward(xo + (ad.matmul(out_o, params[p + "wo"]) + params[p + "bo"]), params, p)
    return x_new, xo_new


def _check_finite(t: Tensor | None, where: str):
    if t is not None and not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite activation in {where}")


def encode_groups(tokens: Tensor, params: EncoderParams, query_tokens: Tensor | None = None,
                  query_groups=None) -> GroupEmbeddings:
    """Pre-norm self-attention over each group's member tokens, mean-pooled.

    ``query_tokens`` (M, d) with group ids ``query_groups`` run through the
    same layers as queries only: they read their group's members and never
    feed back into them.
    """
    x, xo = tokens, query_tokens
    og = None if query_groups is None else np.asarray(query_groups, dtype=np.int64)
    if xo is not None and xo.shape[0] == 0:
        xo = None
    for layer in range(params.n_layers):
        x, xo = _attention_layer(x, params, layer, xo, og)
        _check_finite(x, f"encoder layer {layer}")
        _check_finite(xo, f"encoder layer {layer} (query tokens)")
    x = ad.layer_norm(x, params["final.g"], params["final.b"])
    if xo is not None:
        xo = ad.layer_norm(xo, params["final.g"], params["final.b"])
    return GroupEmbeddings(ad.mean(x, axis=1), x, xo, "transformer")


def _mlp(x: Tensor, params: EncoderParams) -> Tensor:
    hdn = ad.gelu(ad.matmul(x, params["mlp1.W"]) + params["mlp1.b"])
    out = ad.matmul(hdn, params["mlp2.W"]) + params["mlp2.b"]
    return ad.layer_norm(out, params["final.g"], params["final.b"])


def mlp_encode_groups(tokens: Tensor, params: EncoderParams, query_tokens: Tensor | None = None,
                      query_groups=None) -> GroupEmbeddings:
    """Ablation encoder: the same two-layer MLP on every token, mean-pooled.

    Tokens get the transformer's final LayerNorm, so both encoders hand the
    head features on the same scale and the ablation compares only the
    token mixing.
    """
    x = _mlp(tokens, params)
    _check_finite(x, "mlp encoder")
    xo = _mlp(query_tokens, params) if query_tokens is not None and query_tokens.shape[0] else None
    _check_finite(xo, "mlp encoder (query tokens)")
    return GroupEmbeddings(ad.mean(x, axis=1), x, xo, "mlp")


def encode_structure(structure: CloudStructure, params: EncoderParams) -> GroupEmbeddings:
    tokens = embed_points(structure.groups.local, params)
    queries = embed_points(structure.outsider_local, params) if structure.outsiders.size else None
    fn = encode_groups if params.kind == "transformer" else mlp_encode_groups
    return fn(tokens, params, queries, structure.outsider_group)


def point_tokens(emb: GroupEmbeddings, structure: CloudStructure) -> Tensor:
    """(N, d) encoded token of every cloud point, via its slot."""
    g, k, d = emb.tokens.shape
    flat = ad.reshape(emb.tokens, (g * k, d))
    if emb.outsider_tokens is not None:
        flat = ad.concat([flat, emb.outsider_tokens], axis=0)
    return ad.gather(flat, structure.slot, axis=0)
