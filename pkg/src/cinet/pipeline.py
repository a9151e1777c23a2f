"""Backdoor-adjusted defect segmentation: model, loss, training, evaluation.

The prediction for a cloud x sums the detection head over the confounder:

    P(y | do(x)) = sum_c P(y | S(x), signal(c)) P(c)

The structural representation S(x) is a deterministic function of the
cloud, so the sum over S collapses to the realized one. The sum over c uses
the fitted mixture: each component mean is one quadrature node with its
mixture weight ("marginalize"). "plugin" feeds the cloud's own quality vector
instead and is the observational reference.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from cinet import autodiff as ad
from cinet.autodiff import Tensor
from cinet.geometry import PointCloud
from cinet.gmm import GmmModel, gmm_fit, select_components_bic
from cinet.mad import MadParams, init_mad, mad_forward
from cinet.metrics import MetricsReport, average_precision, confusion_counts, report
from cinet.quality import FEATURE_NAMES, quality_vector
from cinet.structural import (CloudStructure, EncoderParams, build_structure, crop_structure, default_n_groups,
                              encode_structure, init_encoder)

log = logging.getLogger(__name__)

MODES = ("plugin", "marginalize")
POS_WEIGHT_RANGE = (1.0, 1000.0)
PROB_FLOOR = 1e-15


@dataclass(frozen=True)
class Variant:
    sr: str = "transformer"  # transformer | mlp
    qa: str = "gmm"  # gmm | raw-vector
    fusion: str = "attention"  # attention | concat

    def __post_init__(self):
        if self.sr not in ("transformer", "mlp"):
            raise ValueError(f"sr must be transformer or mlp, got {self.sr!r}")
        if self.qa not in ("gmm", "raw-vector"):
            raise ValueError(f"qa must be gmm or raw-vector, got {self.qa!r}")
        if self.fusion not in ("attention", "concat"):
            raise ValueError(f"fusion must be attention or concat, got {self.fusion!r}")


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    positive_weight: float | None = None  # None: neg/pos of each batch, clamped
    intervention: str = "marginalize"
    patience: int | None = None  # validations without improvement before stopping
    sr: str = "transformer"
    qa: str = "gmm"
    fusion: str = "attention"
    feature_mask: str = "density,uniformity,integrity"  # features kept; the rest are neutralized
    d_model: int = 64
    d_latent: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_groups: int = 0  # 0: size-dependent default
    group_k: int = 32
    gmm_components: int = 0  # 0: choose by BIC
    gmm_max_components: int = 5
    threshold: float = 0.5
    crop_groups: int = 0  # >0: each step sees this many random groups per cloud
    lr_schedule: str = "constant"  # constant | cosine (decays from lr to 0 over all steps)
    val_every: int = 1  # validate every n epochs (and always after the last one)
    embed_bias_std: float = 0.0  # std of the token-embedding bias at init; 0 = zeros
    jobs: int = 1

    def __post_init__(self):
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ValueError(f"lr must be finite and >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.intervention not in MODES:
            raise ValueError(f"intervention must be one of {MODES}, got {self.intervention!r}")
        if self.positive_weight is not None and not self.positive_weight > 0:
            raise ValueError("positive_weight must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.crop_groups < 0:
            raise ValueError("crop_groups must be >= 0")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")
        if not self.embed_bias_std >= 0:
            raise ValueError("embed_bias_std must be >= 0")
        parse_feature_mask(self.feature_mask)
        Variant(self.sr, self.qa, self.fusion)

    @property
    def variant(self) -> Variant:
        return Variant(self.sr, self.qa, self.fusion)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def parse_feature_mask(text) -> tuple:
    """'density,integrity' -> (True, False, True)."""
    if isinstance(text, (tuple, list)) and all(isinstance(v, (bool, np.bool_)) for v in text):
        keep = tuple(bool(v) for v in text)
    else:
        names = [t.strip() for t in str(text).replace("+", ",").split(",") if t.strip()]
        unknown = set(names) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"unknown quality features {sorted(unknown)}; choose from {FEATURE_NAMES}")
        keep = tuple(n in names for n in FEATURE_NAMES)
    if len(keep) != 3 or not any(keep):
        raise ValueError("feature mask must keep at least one quality feature")
    return keep


def mask_name(keep) -> str:
    return "+".join(n for n, k in zip(FEATURE_NAMES, keep) if k)


# ----------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedCloud:
    """A cloud with its grouping and quality vector computed once."""

    cloud_id: str
    cloud: PointCloud
    structure: CloudStructure
    quality: np.ndarray  # (3,) raw density, uniformity, integrity

    @property
    def labels(self):
        return self.cloud.labels

    @property
    def n_points(self) -> int:
        return self.cloud.n_points


def prepare_cloud(cloud: PointCloud, n_groups: int = 0, group_k: int = 32, cloud_id: str | None = None) -> PreparedCloud:
    if cloud.n_points < max(group_k, 16):
        raise ValueError(f"cloud {cloud.source_id or cloud_id!r} has {cloud.n_points} points; "
                         f"at least {max(group_k, 16)} are needed for the group configuration")
    structure = build_structure(cloud, n_groups or default_n_groups(cloud.n_points), group_k)
    q = quality_vector(cloud).as_array()
    return PreparedCloud(cloud_id or cloud.source_id, cloud, structure, q)


def prepare_clouds(clouds, n_groups: int = 0, group_k: int = 32, jobs: int = 1) -> list:
    """Prepare many clouds; ``jobs > 1`` uses a process pool (same results)."""
    clouds = list(clouds)
    if all(isinstance(c, PreparedCloud) for c in clouds):
        return clouds
    ids = [c.source_id or f"cloud{i:04d}" for i, c in enumerate(clouds)]
    if jobs > 1 and len(clouds) > 1:
        from joblib import Parallel, delayed

        return Parallel(n_jobs=jobs)(delayed(prepare_cloud)(c, n_groups, group_k, i) for c, i in zip(clouds, ids))
    return [prepare_cloud(c, n_groups, group_k, i) for c, i in zip(clouds, ids)]


# ----------------------------------------------------------------------------
# model


class CINetModel:
    """Encoder + head parameters, the frozen confounder model and variant flags."""

    def __init__(self, encoder: EncoderParams, head: MadParams, variant: Variant, feature_mask=(True, True, True),
                 feature_means=None, gmm: GmmModel | None = None, raw_shift=None, raw_scale=None,
                 intervention: str = "marginalize", n_groups: int = 0, group_k: int = 32, trained: bool = False):
        if intervention not in MODES:
            raise ValueError(f"intervention must be one of {MODES}")
        if variant.qa == "gmm" and gmm is None:
            raise ValueError("qa=gmm needs a fitted mixture")
        if gmm is not None:
            gmm.check()
        self._variant = variant
        self._mask = parse_feature_mask(feature_mask)
        self.encoder = encoder
        self.head = head
        self.gmm = gmm
        self.feature_means = np.zeros(3) if feature_means is None else np.asarray(feature_means, dtype=np.float64)
        self.raw_shift = np.zeros(3) if raw_shift is None else np.asarray(raw_shift, dtype=np.float64)
        self.raw_scale = np.ones(3) if raw_scale is None else np.asarray(raw_scale, dtype=np.float64)
        self.intervention = intervention
        self.n_groups = int(n_groups)
        self.group_k = int(group_k)
        self.trained = trained
        for name, t in self.parameters():
            if not np.all(np.isfinite(t.data)):
                raise FloatingPointError(f"parameter {name} is not finite")

    @property
    def variant(self) -> Variant:
        return self._variant

    @property
    def feature_mask(self) -> tuple:
        return self._mask

    def parameters(self):
        """Trainable tensors as (qualified name, tensor), in a fixed order."""
        return [("enc." + n, t) for n, t in self.encoder.named()] + [("mad." + n, t) for n, t in self.head.named()]

    def neutralize(self, c) -> np.ndarray:
        """Replace masked quality features by their training-set means."""
        c = np.array(c, dtype=np.float64, copy=True)
        keep = np.array(self._mask)
        c[..., ~keep] = self.feature_means[~keep]
        return c

    def components(self, quality, mode: str | None = None):
        """Density signals (S, 4) and their weights (S,) for one cloud."""
        mode = mode or self.intervention
        if mode not in MODES:
            raise ValueError(f"intervention must be one of {MODES}")
        c = self.neutralize(quality)
        if self._variant.qa == "raw-vector":
            z = (c - self.raw_shift) / self.raw_scale
            return np.append(z, 0.0)[None, :], np.ones(1)
        g = self.gmm
        if mode == "plugin":
            z = g.standardize(c)
            return np.hstack([z, g.log_density_standardized(z)[:, None]]), np.ones(1)
        keep = g.weights > 0  # zero-weight components contribute nothing
        mu = g.means[keep]
        return np.hstack([mu, g.log_density_standardized(mu)[:, None]]), g.weights[keep]

    def prepare(self, cloud) -> PreparedCloud:
        if isinstance(cloud, PreparedCloud):
            return cloud
        return prepare_cloud(cloud, self.n_groups, self.group_k)


def init_model(config: TrainConfig, gmm: GmmModel | None, feature_means, raw_shift, raw_scale,
               coord_scale=1.0) -> CINetModel:
    ss = np.random.SeedSequence(config.seed)
    enc_seed, mad_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    enc = init_encoder(config.d_model, config.n_layers, config.n_heads, enc_seed, config.sr, coord_scale,
                       embed_bias_std=config.embed_bias_std)
    mad = init_mad(config.d_model, config.d_latent, mad_seed, config.fusion)
    return CINetModel(enc, mad, config.variant, parse_feature_mask(config.feature_mask), feature_means,
                      gmm if config.qa == "gmm" else None, raw_shift, raw_scale, config.intervention,
                      config.n_groups, config.group_k)


# ----------------------------------------------------------------------------
# prediction


@dataclass
class PointPrediction:
    prob: np.ndarray  # (N,) P(defect | do(x))
    logit: np.ndarray  # (N,) log-odds of prob
    component_prob: np.ndarray  # (S, N) head output for each signal
    weights: np.ndarray  # (S,) quadrature weights
    alpha: np.ndarray | None  # (S, G) attention weights

    def pred(self, threshold: float = 0.5) -> np.ndarray:
        return (self.prob >= threshold).astype(np.uint8)


def component_logits(prep: PreparedCloud, model: CINetModel, signals, structure: CloudStructure | None = None):
    """Head logits (S, N) for explicit density signals, plus attention weights."""
    structure = structure or prep.structure
    emb = encode_structure(structure, model.encoder)
    out = mad_forward(emb, structure, np.atleast_2d(signals), model.head)
    return out.logits, out.alpha


def mixture_log_probs(z: Tensor, weights) -> tuple:
    """log p and log(1 - p) for p = sum_k w_k sigmoid(z_k), in log space."""
    logw = np.log(np.asarray(weights, dtype=np.float64))[:, None]
    log_p = ad.logsumexp(ad.log_sigmoid(z) + logw, axis=0)
    log_q = ad.logsumexp(ad.log_sigmoid(-z) + logw, axis=0)
    return log_p, log_q


def intervene_predict(cloud, model: CINetModel, mode: str | None = None) -> PointPrediction:
    if not model.trained:
        raise RuntimeError("model is untrained; run train() or load a checkpoint first")
    prep = model.prepare(cloud)
    signals, weights = model.components(prep.quality, mode)
    z, alpha = component_logits(prep, model, signals)
    comp = ad.sigmoid_np(z.data)
    prob = weights @ comp
    log_p, log_q = mixture_log_probs(Tensor(z.data), weights)
    return PointPrediction(prob, log_p.data - log_q.data, comp, weights, alpha)


# ----------------------------------------------------------------------------
# loss


def default_positive_weight(labels) -> float:
    labels = np.asarray(labels).reshape(-1)
    pos = int(np.count_nonzero(labels == 1))
    neg = labels.size - pos
    ratio = neg / pos if pos else math.inf
    return float(np.clip(ratio, *POS_WEIGHT_RANGE))


def compute_loss(predictions, labels, positive_weight: float | None = None) -> float:
    """Weighted binary cross-entropy of probabilities, mean over points."""
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions for {y.size} labels")
    w = default_positive_weight(y) if positive_weight is None else positive_weight
    p = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    per_point = -(w * y * np.log(p) + (1 - y) * np.log1p(-p))
    return float(per_point.mean())


def cloud_loss(prep: PreparedCloud, model: CINetModel, positive_weight: float, denom: int,
               mode: str | None = None, crop=None) -> Tensor:
    """This cloud's share of a batch loss: its weighted BCE summed over points / denom.

    ``crop`` is a ``(structure, point indices)`` pair from ``crop_structure``;
    the density signal still comes from the whole cloud.
    """
    signals, weights = model.components(prep.quality, mode)
    structure, pts = crop if crop is not None else (prep.structure, slice(None))
    z, _ = component_logits(prep, model, signals, structure)
    log_p, log_q = mixture_log_probs(z, weights)
    y = prep.labels[pts].astype(np.float64)
    total = ad.sum(log_p * (positive_weight * y)) + ad.sum(log_q * (1.0 - y))
    return total * (-1.0 / denom)


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_miou: list = field(default_factory=list)
    wall_clock: float = 0.0
    best_epoch: int = 0
    checkpoint_path: str | None = None
    gmm_components: int = 0

    @property
    def epochs_completed(self) -> int:
        return len(self.train_loss)


def _fit_confounder(q: np.ndarray, config: TrainConfig):
    if config.qa != "gmm":
        return None
    k = config.gmm_components or select_components_bic(q, K_max=min(config.gmm_max_components, q.shape[0]))
    # Best of three EM restarts, seeded from the run seed.
    fits = [gmm_fit(q, k, seed=config.seed * 3 + s) for s in range(3)]
    return max(fits, key=lambda m: m.log_likelihood)


def _coord_scale(preps) -> np.ndarray:
    """Per-axis 1/RMS of keypoint-relative member positions over the training set.

    Thin plates have tiny z spread, so a shared scale would leave the
    height channel, where surface defects show up, near zero.
    """
    sq = sum(np.sum(p.structure.groups.local**2, axis=(0, 1)) for p in preps)
    cnt = sum(p.structure.groups.local.shape[0] * p.structure.groups.local.shape[1] for p in preps)
    rms = np.sqrt(sq / cnt)
    return np.where(rms > 0, 1.0 / np.where(rms > 0, rms, 1.0), 1.0)


def build_model(train_preps, config: TrainConfig) -> CINetModel:
    """Steps before gradient descent: features, confounder model, initialization."""
    q_raw = np.stack([p.quality for p in train_preps])
    feature_means = q_raw.mean(axis=0)
    keep = np.array(parse_feature_mask(config.feature_mask))
    q = q_raw.copy()
    q[:, ~keep] = feature_means[~keep]
    raw_shift = q.mean(axis=0)
    raw_scale = q.std(axis=0)
    raw_scale = np.where(raw_scale > 0, raw_scale, 1.0)
    gmm = _fit_confounder(q, config)
    return init_model(config, gmm, feature_means, raw_shift, raw_scale, _coord_scale(train_preps))


def _random_crop(prep: PreparedCloud, n_groups: int, rng):
    g = prep.structure.groups.n_groups
    if n_groups <= 0 or n_groups >= g:
        return None
    return crop_structure(prep.structure, np.sort(rng.choice(g, n_groups, replace=False)))


def _snapshot(model: CINetModel) -> list:
    return [t.data.copy() for _, t in model.parameters()]


def _restore(model: CINetModel, snap) -> None:
    for (_, t), data in zip(model.parameters(), snap):
        t.data = data.copy()


def train(train_set, val_set, config: TrainConfig | None = None, checkpoint_path=None, progress=None):
    """Fit the confounder model once, then ADAM on the network parameters.

    The parameters with the best validation mIoU are kept (ties keep the
    earlier epoch). ``progress(epoch, loss, val_miou)`` is called after each
    validation; epochs without one log NaN in ``val_miou``.
    """
    config = config or TrainConfig()
    start = time.perf_counter()
    train_preps = prepare_clouds(train_set, config.n_groups, config.group_k, config.jobs)
    val_preps = prepare_clouds(val_set, config.n_groups, config.group_k, config.jobs)
    if not train_preps or not val_preps:
        raise ValueError("train and validation splits must be non-empty")
    for p in train_preps + val_preps:
        if p.labels is None:
            raise ValueError(f"cloud {p.cloud_id!r} has no labels")
    model = build_model(train_preps, config)
    rep = TrainReport(gmm_components=model.gmm.n_components if model.gmm is not None else 0)
    params = [t for _, t in model.parameters()]
    state = ad.AdamState(lr=config.lr)
    rng = ad.make_rng(np.random.SeedSequence(config.seed).spawn(3)[2].generate_state(1)[0])
    steps_per_epoch = -(-len(train_preps) // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    best, best_miou, stale = _snapshot(model), -1.0, 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_preps))
        epoch_loss, n_seen = 0.0, 0
        for b in range(0, len(order), config.batch_size):
            batch = [train_preps[i] for i in order[b : b + config.batch_size]]
            crops = [_random_crop(p, config.crop_groups, rng) for p in batch]
            labels = np.concatenate([p.labels[c[1]] if c is not None else p.labels for p, c in zip(batch, crops)])
            pw = config.positive_weight or default_positive_weight(labels)
            for t in params:
                t.zero_grad()
            batch_loss = 0.0
            for p, c in zip(batch, crops):
                loss = cloud_loss(p, model, pw, labels.size, crop=c)
                batch_loss += float(loss.data)
                ad.backward(loss)
            if config.lr_schedule == "cosine":
                state.lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * state.step / total_steps))
            ad.adam_step(params, [t.grad for t in params], state)
            epoch_loss += batch_loss * labels.size
            n_seen += labels.size
        model.trained = True
        rep.train_loss.append(epoch_loss / n_seen)
        if epoch % config.val_every and epoch != config.epochs:
            rep.val_miou.append(float("nan"))
            log.info("epoch %d loss %.6f", epoch, rep.train_loss[-1])
            continue
        miou = evaluate(val_preps, model, threshold=config.threshold).miou
        rep.val_miou.append(miou)
        if progress:
            progress(epoch, rep.train_loss[-1], miou)
        log.info("epoch %d loss %.6f val mIoU %.4f", epoch, rep.train_loss[-1], miou)
        if miou > best_miou:
            best, best_miou, stale, rep.best_epoch = _snapshot(model), miou, 0, epoch
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                break
    _restore(model, best)
    rep.wall_clock = time.perf_counter() - start
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, config)
        rep.checkpoint_path = str(checkpoint_path)
    return model, rep


# ----------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    report: MetricsReport
    predictions: dict  # cloud id -> PointPrediction


def predict_all(test_set, model: CINetModel, mode: str | None = None) -> tuple:
    preps = [model.prepare(c) for c in test_set]
    return preps, [intervene_predict(p, model, mode) for p in preps]


def evaluate(test_set, model: CINetModel, mode: str | None = None, threshold: float = 0.5,
             return_predictions: bool = False):
    """Threshold the intervened probabilities and aggregate metrics over clouds."""
    preps, preds = predict_all(test_set, model, mode)
    for p in preps:
        if p.labels is None:
            raise ValueError(f"cloud {p.cloud_id!r} has no labels")
    counts = [confusion_counts(pr.pred(threshold), p.labels) for p, pr in zip(preps, preds)]
    rep = report(counts, [p.cloud_id for p in preps])
    rep.ap_rank = average_precision(np.concatenate([pr.prob for pr in preds]),
                                    np.concatenate([p.labels for p in preps]))
    if return_predictions:
        return EvalResult(rep, {p.cloud_id: pr for p, pr in zip(preps, preds)})
    return rep


# ----------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = "cinet-checkpoint 1"


def _tensor_block(name: str, arr) -> list:
    arr = np.asarray(arr, dtype=np.float64)
    return [f"tensor {name} {arr.ndim} " + " ".join(str(s) for s in arr.shape),
            " ".join(f"{v:.17g}" for v in arr.ravel())]


def format_checkpoint(model: CINetModel, config: TrainConfig | None = None) -> str:
    lines = [CHECKPOINT_VERSION]
    meta = {
        "sr": model.variant.sr,
        "qa": model.variant.qa,
        "fusion": model.variant.fusion,
        "feature_mask": mask_name(model.feature_mask),
        "intervention": model.intervention,
        "n_groups": model.n_groups,
        "group_k": model.group_k,
        "d_model": model.encoder.d_model,
        "n_layers": model.encoder.n_layers,
        "n_heads": model.encoder.n_heads,
        "ffn_mult": model.encoder.ffn_mult,
        "d_latent": model.head.d_latent,
    }
    lines += [f"meta {k} = {v}" for k, v in meta.items()]
    if config is not None:
        lines += [f"config {k} = {v}" for k, v in config.as_dict().items()]
    for name, t in model.parameters():
        lines += _tensor_block(name, t.data)
    lines += _tensor_block("std.coord_scale", model.encoder.coord_scale)
    lines += _tensor_block("std.feature_means", model.feature_means)
    lines += _tensor_block("std.raw_shift", model.raw_shift)
    lines += _tensor_block("std.raw_scale", model.raw_scale)
    if model.gmm is not None:
        g = model.gmm
        for name, arr in (("weights", g.weights), ("means", g.means), ("covariances", g.covariances),
                          ("shift", g.shift), ("scale", g.scale)):
            lines += _tensor_block("gmm." + name, arr)
    return "\n".join(lines) + "\n"


def save_checkpoint(model: CINetModel, path, config: TrainConfig | None = None) -> None:
    with open(path, "w") as fh:
        fh.write(format_checkpoint(model, config))


def parse_checkpoint(text: str) -> CINetModel:
    rows = text.splitlines()
    if not rows or rows[0].strip() != CHECKPOINT_VERSION:
        raise ValueError(f"not a checkpoint (expected first line {CHECKPOINT_VERSION!r})")
    meta, tensors = {}, {}
    i = 1
    while i < len(rows):
        row = rows[i]
        if row.startswith("meta "):
            key, _, val = row[5:].partition(" = ")
            meta[key] = val
        elif row.startswith("tensor "):
            head = row.split()
            name, ndim = head[1], int(head[2])
            shape = tuple(int(s) for s in head[3 : 3 + ndim])
            vals = np.array([float(v) for v in rows[i + 1].split()], dtype=np.float64)
            if vals.size != int(np.prod(shape)):
                raise ValueError(f"checkpoint tensor {name}: {vals.size} values for shape {shape}")
            tensors[name] = vals.reshape(shape)
            i += 1
        i += 1
    variant = Variant(meta["sr"], meta["qa"], meta["fusion"])
    d_model = int(meta["d_model"])
    enc = EncoderParams(d_model, int(meta["n_layers"]), int(meta["n_heads"]), int(meta["ffn_mult"]),
                        tensors["std.coord_scale"], variant.sr)
    mad = MadParams(d_model, int(meta["d_latent"]), variant.fusion)
    for name, arr in tensors.items():
        prefix, _, rest = name.partition(".")
        if prefix in ("enc", "mad"):
            (enc if prefix == "enc" else mad).tensors[rest] = Tensor(arr, requires_grad=True, name=rest)
    gmm = None
    if "gmm.weights" in tensors:
        gmm = GmmModel(tensors["gmm.weights"], tensors["gmm.means"], tensors["gmm.covariances"],
                       tensors["gmm.shift"], tensors["gmm.scale"])
    return CINetModel(enc, mad, variant, parse_feature_mask(meta["feature_mask"]), tensors["std.feature_means"], gmm,
                      tensors["std.raw_shift"], tensors["std.raw_scale"], meta["intervention"],
                      int(meta["n_groups"]), int(meta["group_k"]), trained=True)


def load_checkpoint(path) -> CINetModel:
    with open(path) as fh:
        return parse_checkpoint(fh.read())


# ----------------------------------------------------------------------------
# ablation

ABLATION_VARIANTS = (
    ("baseline", Variant("mlp", "raw-vector", "concat")),
    ("+SR", Variant("transformer", "raw-vector", "concat")),
    ("+QA", Variant("mlp", "gmm", "concat")),
    ("+MAD", Variant("mlp", "raw-vector", "attention")),
    ("full", Variant("transformer", "gmm", "attention")),
)
ABLATION_MASKS = ((True, False, False), (False, True, False), (False, False, True), (True, True, False),
                  (True, False, True), (False, True, True), (True, True, True))
ABLATION_METRICS = ("miou", "map", "macc", "oa", "iou_defect", "iou_normal", "ap_rank")


def ablation_suite(base: TrainConfig) -> list:
    """(table, row name, config) for the 5 variants and 7 feature masks."""
    rows = []
    for name, v in ABLATION_VARIANTS:
        rows.append(("variants", name, replace(base, sr=v.sr, qa=v.qa, fusion=v.fusion)))
    for keep in ABLATION_MASKS:
        rows.append(("features", mask_name(keep), replace(base, sr="transformer", qa="gmm", fusion="attention",
                                                          feature_mask=mask_name(keep))))
    return rows


def _config_key(cfg: TrainConfig) -> tuple:
    d = cfg.as_dict()
    d["feature_mask"] = parse_feature_mask(cfg.feature_mask)
    return tuple(sorted(d.items()))


def run_ablation(train_set, val_set, test_set, base: TrainConfig, seeds=(0, 1, 2), tables=None,
                 progress=None) -> list:
    """Train and evaluate every suite row for each seed.

    Returns dicts with ``table``, ``name``, per-seed metric lists and their
    mean and sample standard deviation. Rows with identical configurations
    (the full model appears in both tables) are trained once per seed.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    train_p = prepare_clouds(train_set, base.n_groups, base.group_k, base.jobs)
    val_p = prepare_clouds(val_set, base.n_groups, base.group_k, base.jobs)
    test_p = prepare_clouds(test_set, base.n_groups, base.group_k, base.jobs)
    cache: dict = {}
    out = []
    for table, name, cfg in ablation_suite(base):
        if tables is not None and table not in tables:
            continue
        per_seed = {m: [] for m in ABLATION_METRICS}
        for s in seeds:
            run_cfg = replace(cfg, seed=s)
            key = _config_key(run_cfg)
            if key not in cache:
                model, _ = train(train_p, val_p, run_cfg)
                cache[key] = evaluate(test_p, model).summary()
                if progress:
                    progress(table, name, s, cache[key])
            for m in ABLATION_METRICS:
                per_seed[m].append(cache[key][m])
        row = {"table": table, "name": name, "seeds": seeds, "values": per_seed}
        for m in ABLATION_METRICS:
            vals = np.array(per_seed[m])
            row[m + "_mean"] = float(vals.mean())
            row[m + "_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out.append(row)
    return out


def write_ablation(rows, csv_path, md_path) -> None:
    import csv

    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["table", "name", "n_seeds"] + [f"{m}_{s}" for m in ABLATION_METRICS for s in ("mean", "sd")])
        for r in rows:
            w.writerow([r["table"], r["name"], len(r["seeds"])]
                       + [f"{r[f'{m}_{s}']:.17g}" for m in ABLATION_METRICS for s in ("mean", "sd")])
    with open(md_path, "w") as fh:
        for table, title in (("variants", "Module ablation"), ("features", "Quality-feature ablation")):
            fh.write(f"## {title}\n\n| row | " + " | ".join(ABLATION_METRICS) + " |\n")
            fh.write("|---|" + "---|" * len(ABLATION_METRICS) + "\n")
            for r in rows:
                if r["table"] != table:
                    continue
                cells = [f"{r[m + '_mean']:.4f} ± {r[m + '_sd']:.4f}" for m in ABLATION_METRICS]
                fh.write(f"| {r['name']} | " + " | ".join(cells) + " |\n")
            fh.write("\n")
