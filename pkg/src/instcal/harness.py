"""Two-stage pipeline: source pretraining, calibration training, evaluation.

Training loops are single-threaded and a pure function of their config.
Evaluation runs images one at a time (batch size 1); with ``workers > 1``
images are spread over a process pool and the per-image results are merged
in image order, so reports do not depend on the worker count.
"""

from __future__ import annotations

import copy
import dataclasses
import functools
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .domains import KINDS, DomainSpec
from .metrics import CalibrationBins, ConfusionMatrix, N_BINS
from .norm import EVAL, TRAIN, ConvertMode, convert_model, iter_calibration_tensors
from .segnet import SegNet, SegNetConfig, build, predict
from .shapes import IGNORE_INDEX, N_CLASSES, generate_scene, scene_seed, weak_augment

log = logging.getLogger(__name__)

AUGMENTATIONS = ("default", "randcolor", "augmix", "netperturb")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, detail: str = ""):
        super().__init__(f"training diverged at iteration {iteration}" + (f": {detail}" if detail else ""))
        self.iteration = iteration


@dataclass
class TrainConfig:
    lr: float = 0.05
    lr_power: float = 0.9
    total_iters: int = 8000
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    augmentation: str = "default"
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"augmentation must be one of {AUGMENTATIONS}")


# defaults for each stage at desk scale
PRETRAIN_DEFAULTS = TrainConfig(lr=0.05, total_iters=8000, batch_size=8, augmentation="default")
INSTCAL_U_DEFAULTS = TrainConfig(lr=2.5e-3, total_iters=4000, batch_size=1, augmentation="netperturb")
INSTCAL_C_DEFAULTS = TrainConfig(lr=2.5e-2, total_iters=4000, batch_size=1, augmentation="netperturb")


def poly_lr(iteration: int, total: int, base_lr: float, power: float = 0.9) -> float:
    if total <= 0:
        raise ValueError("total must be positive")
    if not 0 <= iteration <= total:
        raise ValueError("iteration must lie in [0, total]")
    return base_lr * (1.0 - iteration / total) ** power


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay (PyTorch semantics)."""

    def __init__(self, params: dict, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = dict(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {k: None for k in self.params}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            assert p.requires_grad, f"refusing to update frozen tensor {name}"
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            buf = self.buffers[name]
            buf = g if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            # replace, never mutate: the old array may be shared with a snapshot
            p.data = p.data - lr * buf


# ---------------------------------------------------------------------------
# data


def training_batch(cfg: TrainConfig, iteration: int, rng: np.random.Generator):
    """Source scenes with weak augmentation, then the configured strong one."""
    strong = DomainSpec(cfg.augmentation if cfg.augmentation != "default" else "identity", cfg.seed)
    images, masks = [], []
    for b in range(cfg.batch_size):
        index = iteration * cfg.batch_size + b
        s = generate_scene(scene_seed(cfg.seed, "train", index))
        img, msk = weak_augment(s.image, s.mask, rng)
        img, msk = strong.apply(img, msk, index)
        images.append(img)
        masks.append(msk)
    return np.stack(images), np.stack(masks)


@functools.lru_cache(maxsize=64)
def eval_set(domain: DomainSpec, n_images: int, seed: int, split: str = "test"):
    """Read-only (images, masks) arrays for a domain's evaluation set."""
    images = np.empty((n_images, 3, 64, 64))
    masks = np.empty((n_images, 64, 64), dtype=np.int64)
    for i in range(n_images):
        s = generate_scene(scene_seed(seed, split, i))
        images[i], m = domain.apply(s.image, s.mask, i)
        masks[i] = s.mask if m is None else m
    images.flags.writeable = False
    masks.flags.writeable = False
    return images, masks


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SegNet
    curve: list = field(default_factory=list)  # (iteration, lr, loss)

    def curve_csv(self) -> str:
        lines = ["iter,lr,loss"]
        lines += [f"{i},{lr!r},{loss!r}" for i, lr, loss in self.curve]
        return "\n".join(lines) + "\n"


def _train_loop(model: SegNet, params: dict, cfg: TrainConfig, log_every: int = 0) -> list:
    opt = SGD(params, cfg.sgd_momentum, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 7])
    curve = []
    for it in range(cfg.total_iters):
        images, masks = training_batch(cfg, it, rng)
        lr = poly_lr(it, cfg.total_iters, cfg.lr, cfg.lr_power)
        try:
            logits = model.forward(images, TRAIN)
            loss = ad.cross_entropy_seg(logits, masks, IGNORE_INDEX)
            opt.zero_grad()
            loss.backward()
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(it, str(exc)) from exc
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(it, "loss is not finite")
        opt.step(lr)
        curve.append((it, lr, value))
        if log_every and it % log_every == 0:
            log.info("iter %d lr %.3g loss %.4f", it, lr, value)
    opt.zero_grad()
    return curve


def pretrain(cfg: TrainConfig, net: SegNetConfig | None = None, log_every: int = 0) -> TrainResult:
    """Train every parameter of a fresh BatchNorm network on the source domain."""
    net = net or SegNetConfig()
    if net.norm != "bn":
        raise ValueError("pretraining needs a plain BatchNorm network")
    model = build(net, seed=cfg.seed)
    curve = _train_loop(model, model.parameters(), cfg, log_every)
    return TrainResult(model, curve)


def train_instcal(model: SegNet, cfg: TrainConfig, log_every: int = 0) -> TrainResult:
    """Optimize only the calibration parameters of a converted model.

    Returns a new model; ``model`` itself is left untouched.
    """
    if model.config.norm not in ("instcal_u", "instcal_c"):
        raise ValueError("train_instcal needs a model converted to instcal_u or instcal_c")
    model = copy.deepcopy(model)
    params = model.parameters()
    cal_names = set(model.calibration_names())
    cal_params = {n for n in cal_names}
    # basis rows are stored per row but trained as one matrix
    cal_params |= {n.rsplit(".", 1)[0] for n in cal_names if ".basis_" in n}
    assert set(params) <= cal_params, f"non-calibration tensors are trainable: {sorted(set(params) - cal_params)}"
    curve = _train_loop(model, params, cfg, log_every)
    return TrainResult(model, curve)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    method: str
    domain: DomainSpec
    per_class_iou: list
    miou: float
    ece: float
    n_images: int
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "domain": self.domain.to_json(),
            "per_class_iou": [float(v) for v in self.per_class_iou],
            "miou": float(self.miou),
            "ece": float(self.ece),
            "n_images": int(self.n_images),
            "config_hash": self.config_hash,
            "extra": self.extra,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        return cls(d["method"], DomainSpec.from_json(d["domain"]), list(d["per_class_iou"]),
                   float(d["miou"]), float(d["ece"]), int(d["n_images"]),
                   d.get("config_hash", ""), dict(d.get("extra", {})))

    def csv_row(self) -> list:
        return [self.method, self.domain.label, self.domain.severity,
                repr(float(self.miou)), repr(float(self.ece)), self.n_images, self.config_hash]


CSV_COLUMNS = ["method", "domain", "severity", "miou", "ece", "n_images", "config_hash"]

REPORT_SCHEMA = {
    "type": "object",
    "required": ["method", "domain", "per_class_iou", "miou", "ece", "n_images", "config_hash"],
    "properties": {
        "method": {"type": "string"},
        "domain": {
            "type": "object",
            "required": ["kind", "seed", "params"],
            "properties": {"kind": {"enum": list(KINDS)}, "seed": {"type": "integer"},
                           "params": {"type": "object"}},
        },
        "per_class_iou": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "miou": {"type": "number", "minimum": 0, "maximum": 1},
        "ece": {"type": "number", "minimum": 0, "maximum": 1},
        "n_images": {"type": "integer", "minimum": 0},
        "config_hash": {"type": "string"},
        "extra": {"type": "object"},
    },
}


def _predict_all(model: SegNet, images: np.ndarray, workers: int = 1,
                 predict_fn: Callable | None = None) -> list:
    fn = predict_fn or _predict_one
    if workers <= 1 or len(images) < 2:
        return [fn(model, images[i:i + 1]) for i in range(len(images))]
    import multiprocessing as mp

    blob = ckpt.model_bytes(model)
    chunks = np.array_split(np.arange(len(images)), workers)
    ctx = mp.get_context("fork")
    with ctx.Pool(workers, initializer=_worker_init, initargs=(blob, fn)) as pool:
        parts = pool.map(_worker_run, [images[c] for c in chunks if len(c)])
    return [r for part in parts for r in part]


_WORKER: dict = {}


def _worker_init(blob: bytes, fn) -> None:
    _WORKER["model"], _ = ckpt.from_bytes(blob)
    _WORKER["fn"] = fn


def _worker_run(images: np.ndarray) -> list:
    m, fn = _WORKER["model"], _WORKER["fn"]
    return [fn(m, images[i:i + 1]) for i in range(len(images))]


def _predict_one(model: SegNet, image: np.ndarray):
    labels, conf = predict(model, image)
    return labels[0], conf[0]


def _accumulate(results, masks, n_classes: int):
    cm = ConfusionMatrix(n_classes)
    bins = CalibrationBins(N_BINS)
    for (pred, conf), truth in zip(results, masks):
        keep = truth != IGNORE_INDEX
        cm.update(pred, truth, IGNORE_INDEX)
        bins.update(conf[keep], (pred == truth)[keep])
    return cm, bins


def _report(method, domain, cm, bins, n, config_hash, **extra) -> MetricsReport:
    miou, per_class = cm.iou()
    return MetricsReport(method, domain, per_class.tolist(), miou, bins.ece(), n, config_hash, extra)


STRENGTH_KEYS = ("m_mu", "m_sigma", "basis_mu", "basis_sigma")


def strength_summary(model: SegNet) -> dict:
    """Range of learned calibration strengths; values outside [0, 1] are counted, not clipped.

    For InstCal-C the bases bound every per-instance strength, since the
    coefficients are convex weights.
    """
    vals = [np.asarray(t.data).ravel() for name, t in iter_calibration_tensors(model)
            if name.rsplit(".", 1)[-1] in STRENGTH_KEYS]
    if not vals:
        return {}
    v = np.concatenate(vals)
    return {"strength_min": float(v.min()), "strength_max": float(v.max()),
            "strength_out_of_range": int(((v < 0.0) | (v > 1.0)).sum())}


def method_name(model: SegNet) -> str:
    c = model.config
    return {"bn": "pretrained", "manual": f"manual-{c.m:g}", "instcal_u": "instcal-u",
            "instcal_c": f"instcal-c{c.k}"}[c.norm]


def evaluate(model: SegNet, domains: Sequence[DomainSpec], n_images: int = 200, seed: int = 0,
             method: str | None = None, config_hash: str = "", workers: int = 1,
             predictions: dict | None = None) -> list[MetricsReport]:
    """Per-domain mIoU / ECE at batch size 1; the model is not modified.

    If ``predictions`` is a dict, per-domain label arrays are stored in it.
    """
    method = method or method_name(model)
    strengths = strength_summary(model)
    reports = []
    for d in domains:
        images, masks = eval_set(d, n_images, seed)
        results = _predict_all(model, images, workers)
        if predictions is not None:
            predictions[d] = np.stack([r[0] for r in results])
        cm, bins = _accumulate(results, masks, model.config.n_classes)
        reports.append(_report(method, d, cm, bins, n_images, config_hash, **strengths))
    return reports


DEFAULT_M_VALUES = tuple(round(0.1 * i, 1) for i in range(11))


def sweep_manual_m(model: SegNet, domains: Sequence[DomainSpec], m_values=DEFAULT_M_VALUES,
                   n_images: int = 200, seed: int = 0, config_hash: str = "",
                   workers: int = 1) -> list[MetricsReport]:
    """Manual-calibration curve; ``m = 0`` is the plain population-statistics model."""
    if model.config.norm != "bn":
        raise ValueError("sweep_manual_m needs an unconverted BatchNorm model")
    out = []
    for m in m_values:
        conv = convert_model(model, ConvertMode.manual(m))
        reports = evaluate(conv, domains, n_images, seed, f"manual-{m:g}", config_hash, workers)
        for r in reports:
            r.extra["m"] = float(m)
        out += reports
    return out


DEFAULT_BATCH_SIZES = (1, 2, 4, 8, 16)


def mixed_stream(domains: Sequence[DomainSpec], n_images: int, seed: int):
    """Interleave the domains' evaluation sets: image i comes from domain i mod D."""
    sets = [eval_set(d, n_images, seed) for d in domains]
    images, masks = [], []
    for i in range(n_images):
        imgs, msks = sets[i % len(domains)]
        images.append(imgs[i])
        masks.append(msks[i])
    return np.stack(images), np.stack(masks)


def batch_stats_experiment(model: SegNet, domains: Sequence[DomainSpec] | DomainSpec,
                           batch_sizes=DEFAULT_BATCH_SIZES, n_images: int = 200, seed: int = 0,
                           config_hash: str = "") -> list[MetricsReport]:
    """Replace instance statistics by statistics shared over each test batch.

    With several domains the stream interleaves them, so larger batches mix
    statistics from different target domains.  Batch size 1 is the usual
    instance-specific evaluation.
    """
    if isinstance(domains, DomainSpec):
        domains = [domains]
    if model.config.norm == "bn":
        raise ValueError("batch_stats_experiment needs a calibrated model")
    images, masks = mixed_stream(domains, n_images, seed)
    label = "+".join(d.label for d in domains)
    stream = DomainSpec("identity", seed, {"stream": label}) if len(domains) > 1 else domains[0]
    out = []
    work = copy.deepcopy(model)
    for bs in batch_sizes:
        work.set_stats_scope("instance" if bs == 1 else "batch")
        results = []
        for start in range(0, n_images, bs):
            labels, conf = predict(work, images[start:start + bs])
            results += list(zip(labels, conf))
        cm, bins = _accumulate(results, masks, model.config.n_classes)
        out.append(_report(method_name(model), stream, cm, bins, n_images, config_hash,
                           batch_size=int(bs)))
    return out


def prediction_entropy(logits: ad.Tensor) -> ad.Tensor:
    """Mean per-pixel Shannon entropy of the softmax over classes."""
    logp = ad.log_softmax(logits, axis=1)
    p = ad.exp(logp)
    return -(p * logp).sum(axis=1).mean()


def entropy_minimize(model: SegNet, image: np.ndarray, steps: int = 1, lr: float = 1e-3,
                     return_entropy: bool = False):
    """Instance-wise entropy minimization over the norm layers' gamma and beta.

    The model is deep-copied, so every image starts from the original
    parameters.  Returns ``(labels, max_prob)`` for the single image (and the
    entropy before/after each step if ``return_entropy``).
    """
    work = copy.deepcopy(model)
    work.freeze()
    params = {}
    for name, layer in work.named_norm_layers():
        for key in ("gamma", "beta"):
            t = getattr(layer.state, key)
            t.requires_grad = True
            params[f"{name}.{key}"] = t
    opt = SGD(params, momentum=0.0, weight_decay=0.0)
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    history = []
    for _ in range(steps):
        ent = prediction_entropy(work.forward(image, EVAL))
        history.append(ent.item())
        opt.zero_grad()
        ent.backward()
        opt.step(lr)
    labels, conf = predict(work, image)
    if return_entropy:
        with ad.no_grad():
            history.append(prediction_entropy(work.forward(image, EVAL)).item())
        return labels[0], conf[0], history
    return labels[0], conf[0]


def evaluate_entropy_min(model: SegNet, domains: Sequence[DomainSpec], steps: int = 1,
                         lr: float = 1e-3, n_images: int = 200, seed: int = 0,
                         config_hash: str = "", workers: int = 1) -> list[MetricsReport]:
    fn = functools.partial(_entropy_one, steps=steps, lr=lr)
    reports = []
    for d in domains:
        images, masks = eval_set(d, n_images, seed)
        results = _predict_all(model, images, workers, fn)
        cm, bins = _accumulate(results, masks, model.config.n_classes)
        reports.append(_report(f"{method_name(model)}+entmin", d, cm, bins, n_images, config_hash,
                               steps=steps, lr=lr))
    return reports


def _entropy_one(model, image, steps, lr):
    return entropy_minimize(model, image, steps, lr)


# ---------------------------------------------------------------------------
# hashing helpers


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _json_default(o):
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


# ---------------------------------------------------------------------------
# helpers for multi-model experiments


def backbone(model: SegNet) -> SegNet:
    """The plain BatchNorm model underlying a converted one.

    Conversion copies every backbone tensor verbatim, so the original
    pretrained network can be rebuilt from a calibrated checkpoint.
    """
    if model.config.norm == "bn":
        return copy.deepcopy(model)
    cfg = dataclasses.replace(model.config, norm="bn")
    out = SegNet(cfg)
    cal = set(model.calibration_names())
    arrays = {k: v for k, v in model.state_dict().items() if k not in cal}
    out.load_state_dict(arrays)
    out.freeze()
    return out


def convert_for(model: SegNet, variant: str, k: int = 8, seed: int = 0) -> SegNet:
    variant = variant.lower()
    if variant in ("u", "instcal_u"):
        mode = ConvertMode.instcal_u()
    elif variant in ("c", "instcal_c"):
        mode = ConvertMode.instcal_c(k)
    else:
        raise ValueError(f"variant must be 'u' or 'c', not {variant!r}")
    return convert_model(model, mode, seed)


def augmentation_grid(base: SegNet, domains: Sequence[DomainSpec], pretrain_cfg: TrainConfig,
                      calib_cfg: TrainConfig, strategies: Sequence[str] = AUGMENTATIONS,
                      variant: str = "u", n_images: int = 200, seed: int = 0,
                      config_hash: str = "", workers: int = 1,
                      net: SegNetConfig | None = None) -> list[MetricsReport]:
    """Strategy x {pretrain-only, instcal-training} comparison.

    ``pretrain-only`` trains the whole network with the strategy as its
    augmentation (``base`` is reused for the ``default`` strategy, which is
    how it was trained); ``instcal-training`` trains calibration parameters
    on top of ``base`` with the strategy.
    """
    out = []
    net = net or dataclasses.replace(base.config, norm="bn")
    for strat in strategies:
        if strat not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {strat!r}")
        if strat == "default":
            pre = base
        else:
            pre = pretrain(dataclasses.replace(pretrain_cfg, augmentation=strat), net).model
        for r in evaluate(pre, domains, n_images, seed, "pretrain-only", config_hash, workers):
            r.extra["augmentation"] = strat
            out.append(r)
        cal = train_instcal(convert_for(base, variant, seed=seed),
                            dataclasses.replace(calib_cfg, augmentation=strat)).model
        for r in evaluate(cal, domains, n_images, seed, "instcal-training", config_hash, workers):
            r.extra["augmentation"] = strat
            out.append(r)
    return out
