"""Mapping-attention detection head.

A cloud-level density signal (standardized quality vector plus its log
mixture density) is projected into the same latent space as the group
embeddings. Its dot products with the group keys give one attention weight
per group; value-projected groups are scaled by those weights, averaged
(GAP), refined by a residual block, and decoded per point.

All functions accept a stack of signals ``(S, 4)`` so the mixture
components of the confounder model can be evaluated in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cinet import autodiff as ad
from cinet.autodiff import Tensor
from cinet.structural import CloudStructure, GroupEmbeddings, point_tokens

SIGNAL_DIM = 4


@dataclass
class MadParams:
    d_model: int = 64
    d_latent: int = 64
    fusion: str = "attention"
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fusion not in ("attention", "concat"):
            raise ValueError(f"unknown fusion {self.fusion!r}")

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def named(self):
        return sorted(self.tensors.items())


def init_mad(d_model: int = 64, d_latent: int = 64, seed: int = 0, fusion: str = "attention") -> MadParams:
    rng = ad.make_rng(seed)
    t: dict[str, Tensor] = {}
    if fusion == "attention":
        t["proj_q.W"] = ad.kaiming_init((SIGNAL_DIM, d_latent), SIGNAL_DIM, rng)
        t["proj_q.b"] = ad.zeros_param((d_latent,))
        t["proj_k.W"] = ad.kaiming_init((d_model, d_latent), d_model, rng)
        t["proj_k.b"] = ad.zeros_param((d_latent,))
        t["proj_v.W"] = ad.kaiming_init((d_model, d_latent), d_model, rng)
        t["proj_v.b"] = ad.zeros_param((d_latent,))
    else:
        t["fuse.W"] = ad.kaiming_init((d_model + SIGNAL_DIM, d_latent), d_model + SIGNAL_DIM, rng)
        t["fuse.b"] = ad.zeros_param((d_latent,))
    t["res1.W"] = ad.kaiming_init((d_latent, d_latent), d_latent, rng)
    t["res1.b"] = ad.zeros_param((d_latent,))
    t["res2.W"] = ad.kaiming_init((d_latent, d_latent), d_latent, rng)
    t["res2.b"] = ad.zeros_param((d_latent,))
    head_in = 2 * d_latent + d_model
    t["head.W"] = ad.kaiming_init((head_in, 1), head_in, rng)
    t["head.b"] = ad.zeros_param((1,))
    for name, tensor in t.items():
        tensor.name = name
    return MadParams(d_model, d_latent, fusion, t)


def _signals(density_signal) -> Tensor:
    s = ad.as_tensor(density_signal)
    if s.ndim == 1:
        s = ad.reshape(s, (1, -1))
    if s.shape[-1] != SIGNAL_DIM:
        raise ValueError(f"density signal must have {SIGNAL_DIM} entries, got shape {s.shape}")
    if not np.all(np.isfinite(s.data)):
        raise FloatingPointError("non-finite density signal")
    return s


def mapping_attention(rows: Tensor, density_signal, params: MadParams):
    """Attention of the density query over group keys.

    Returns ``(weighted, alpha)`` with shapes (S, G, d_latent) and (S, G).
    Each group's value is scaled by G * alpha, so uniform attention leaves
    values unchanged and their mean is the attention-weighted sum.
    """
    s = _signals(density_signal)
    if not np.all(np.isfinite(rows.data)):
        raise FloatingPointError("non-finite group embeddings")
    g = rows.shape[0]
    q = ad.matmul(s, params["proj_q.W"]) + params["proj_q.b"]  # (S, L)
    keys = ad.matmul(rows, params["proj_k.W"]) + params["proj_k.b"]  # (G, L)
    vals = ad.matmul(rows, params["proj_v.W"]) + params["proj_v.b"]  # (G, L)
    scores = ad.matmul(q, ad.transpose(keys)) * (1.0 / math.sqrt(params.d_latent))
    alpha = ad.softmax(scores, axis=-1)  # (S, G)
    weighted = ad.reshape(alpha * float(g), alpha.shape + (1,)) * ad.reshape(vals, (1, g, -1))
    return weighted, alpha


def concat_fusion(rows: Tensor, density_signal, params: MadParams) -> Tensor:
    """Ablation fusion: affine map of [group embedding, signal]; (S, G, d_latent)."""
    s = _signals(density_signal)
    n_sig, g = s.shape[0], rows.shape[0]
    rows_b = ad.mul(ad.reshape(rows, (1, g, -1)), np.ones((n_sig, 1, 1)))
    sig_b = ad.mul(ad.reshape(s, (n_sig, 1, -1)), np.ones((1, g, 1)))
    return ad.matmul(ad.concat([rows_b, sig_b], axis=-1), params["fuse.W"]) + params["fuse.b"]


def global_pool(weighted: Tensor) -> Tensor:
    """Mean over the group axis (second to last)."""
    return ad.mean(weighted, axis=-2)


def residual_enhance(x: Tensor, params: MadParams) -> Tensor:
    h = ad.gelu(ad.matmul(x, params["res1.W"]) + params["res1.b"])
    return x + (ad.matmul(h, params["res2.W"]) + params["res2.b"])


def point_logits(enhanced: Tensor, weighted: Tensor, structure: CloudStructure, tokens: Tensor,
                 params: MadParams) -> Tensor:
    """Per-point logits (S, N) from [global, own group's feature, own token].

    The affine head is split by input block so the group term is computed
    once per group and then gathered per point.
    """
    lat = params.d_latent
    w = params["head.W"]
    w_glob, w_grp, w_tok = w[:lat], w[lat : 2 * lat], w[2 * lat :]
    glob = ad.matmul(enhanced, w_glob)  # (S, 1)
    grp = ad.reshape(ad.matmul(weighted, w_grp), weighted.shape[:2])  # (S, G)
    grp_pt = ad.gather(grp, structure.assign, axis=1)  # (S, N)
    tok = ad.reshape(ad.matmul(tokens, w_tok), (1, -1))  # (1, N)
    return grp_pt + glob + tok + params["head.b"]


@dataclass
class HeadOutput:
    logits: Tensor  # (S, N)
    alpha: np.ndarray | None  # (S, G) attention weights, None for concat fusion
    enhanced: Tensor


def mad_forward(emb: GroupEmbeddings, structure: CloudStructure, density_signal, params: MadParams) -> HeadOutput:
    if params.fusion == "attention":
        weighted, alpha = mapping_attention(emb.rows, density_signal, params)
        alpha_np = alpha.data
    else:
        weighted = concat_fusion(emb.rows, density_signal, params)
        alpha_np = None
    enhanced = residual_enhance(global_pool(weighted), params)
    logits = point_logits(enhanced, weighted, structure, point_tokens(emb, structure), params)
    return HeadOutput(logits, alpha_np, enhanced)
