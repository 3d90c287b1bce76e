"""Pseudo-domain augmentations and target-domain corruptions.

Images are ``3 x H x W`` float arrays in ``[0, 1]``.  Every randomised
transform is split into a *plan* (the random draws, made from a seed) and an
*apply* step that is a pure function of the image and the plan; tests can
build plans by hand.

Magnitude ranges and corruption constants are listed in ``docs/domains.md``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import conv2d_numpy

TABLE_VERSION = 1
IGNORE_INDEX = 255


# ---------------------------------------------------------------------------
# colour operations (image -> image, magnitude in op-specific units)


def _gray(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def identity(img, _=None):
    return img


def autocontrast(img, _=None):
    lo = img.min(axis=(1, 2), keepdims=True)
    hi = img.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    return np.where(span > 0, (img - lo) / np.where(span > 0, span, 1.0), img)


def invert(img, _=None):
    return 1.0 - img


def equalize(img, _=None):
    q = np.clip(np.round(img * 255), 0, 255).astype(np.int64)
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        hist = np.bincount(q[c].ravel(), minlength=256)
        cdf = np.cumsum(hist)
        nz = cdf[hist > 0]
        cmin = nz[0]
        if cdf[-1] == cmin:  # single grey level
            out[c] = img[c]
            continue
        lut = (cdf - cmin) / (cdf[-1] - cmin)
        out[c] = lut[q[c]]
    return out


def solarize(img, threshold: float):
    return np.where(img >= threshold, 1.0 - img, img)


def posterize(img, bits: float):
    bits = int(round(bits))
    q = np.clip(np.floor(img * 255), 0, 255).astype(np.int64)
    shift = 8 - bits
    return ((q >> shift) << shift) / 255.0


def color(img, factor: float):
    g = _gray(img)[None]
    return g + factor * (img - g)


def brightness(img, factor: float):
    return img * factor


_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0


def sharpness(img, factor: float):
    blur = img.copy()
    kernel = np.zeros((3, 3, 3, 3))
    for c in range(3):
        kernel[c, c] = _SMOOTH
    blur[:, 1:-1, 1:-1] = conv2d_numpy(img[None], kernel)[0]
    return blur + factor * (img - blur)


# name -> (fn, low, high); ops without magnitude use (0, 0)
COLOR_OPS: dict[str, tuple[Callable, float, float]] = {
    "identity": (identity, 0.0, 0.0),
    "autocontrast": (autocontrast, 0.0, 0.0),
    "invert": (invert, 0.0, 0.0),
    "equalize": (equalize, 0.0, 0.0),
    "solarize": (solarize, 0.3, 1.0),
    "posterize": (posterize, 2.0, 6.0),
    "color": (color, 0.1, 1.9),
    "brightness": (brightness, 0.1, 1.9),
    "sharpness": (sharpness, 0.1, 1.9),
}
N_RANDCOLOR_OPS = 2


def apply_color_op(img: np.ndarray, name: str, magnitude: float = 0.0) -> np.ndarray:
    fn = COLOR_OPS[name][0]
    return np.clip(fn(img, magnitude), 0.0, 1.0)


def rand_color_plan(rng: np.random.Generator, n_ops: int = N_RANDCOLOR_OPS) -> list[tuple[str, float]]:
    names = list(COLOR_OPS)
    plan = []
    for _ in range(n_ops):
        name = names[int(rng.integers(len(names)))]
        _, lo, hi = COLOR_OPS[name]
        plan.append((name, float(rng.uniform(lo, hi)) if hi > lo else 0.0))
    return plan


def apply_color_plan(img: np.ndarray, plan) -> np.ndarray:
    out = img
    for name, mag in plan:
        out = apply_color_op(out, name, mag)
    return np.clip(out, 0.0, 1.0)


def rand_color_augment(image: np.ndarray, seed) -> np.ndarray:
    """Two colour ops drawn uniformly (with replacement) at random magnitudes."""
    rng = np.random.default_rng(seed)
    return apply_color_plan(np.asarray(image, dtype=np.float64), rand_color_plan(rng))


# ---------------------------------------------------------------------------
# geometric operations (AugMix pool only), shared by image and mask

GEOMETRIC_OPS = {
    "translate_x": (-0.1, 0.1),  # fraction of width
    "translate_y": (-0.1, 0.1),
    "rotate": (-15.0, 15.0),  # degrees
}


def _geometric_coords(h: int, w: int, ops) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-map output pixel centres to source coordinates."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    rows, cols = yy, xx
    cy, cx = h / 2, w / 2
    # ops applied in order; invert by walking them backwards
    for name, mag in reversed(ops):
        if name == "translate_x":
            cols = cols - mag * w
        elif name == "translate_y":
            rows = rows - mag * h
        elif name == "rotate":
            t = np.deg2rad(mag)
            dy, dx = rows - cy, cols - cx
            rows = cy + np.cos(t) * dy + np.sin(t) * dx
            cols = cx - np.sin(t) * dy + np.cos(t) * dx
        else:
            raise ValueError(f"unknown geometric op {name!r}")
    return rows, cols


def apply_geometric(image: np.ndarray, mask: np.ndarray | None, ops):
    if not ops:
        return image, mask
    h, w = image.shape[1:]
    rows, cols = _geometric_coords(h, w, ops)
    ri, ci = np.floor(rows).astype(np.int64), np.floor(cols).astype(np.int64)
    inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
    ri, ci = np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)
    img = np.where(inside, image[:, ri, ci], 0.5)
    msk = None if mask is None else np.where(inside, mask[ri, ci], IGNORE_INDEX).astype(mask.dtype)
    return img, msk


# ---------------------------------------------------------------------------
# AugMix-style mixing


@dataclass
class AugMixPlan:
    chains: list  # three lists of (op, magnitude)
    weights: np.ndarray  # Dirichlet mixing weights of the chains
    blend: float  # weight of the mixture against the original image
    geometric: list = field(default_factory=list)


AUGMIX_POOL = list(COLOR_OPS) + list(GEOMETRIC_OPS)


def augmix_plan(rng: np.random.Generator, width: int = 3, depth: int = 3,
                dirichlet_alpha: float = 1.0, beta_alpha: float = 1.0) -> AugMixPlan:
    chains, geometric = [], []
    for i in range(width):
        chain = []
        for _ in range(min(i + 1, depth)):
            name = AUGMIX_POOL[int(rng.integers(len(AUGMIX_POOL)))]
            if name in GEOMETRIC_OPS:
                geometric.append((name, float(rng.uniform(*GEOMETRIC_OPS[name]))))
                continue
            _, lo, hi = COLOR_OPS[name]
            chain.append((name, float(rng.uniform(lo, hi)) if hi > lo else 0.0))
        chains.append(chain)
    weights = rng.dirichlet([dirichlet_alpha] * width)
    blend = float(rng.beta(beta_alpha, beta_alpha))
    return AugMixPlan(chains, weights, blend, geometric)


def apply_augmix(image: np.ndarray, mask: np.ndarray | None, plan: AugMixPlan):
    mixed = np.zeros_like(image)
    for w, chain in zip(plan.weights, plan.chains):
        mixed = mixed + w * apply_color_plan(image, chain)
    out = (1.0 - plan.blend) * image + plan.blend * mixed
    # geometric draws act once on the blended result so image and mask stay aligned
    out, mask = apply_geometric(out, mask, plan.geometric)
    return np.clip(out, 0.0, 1.0), mask


def augmix_style(image, mask, seed, width: int = 3, depth: int = 3,
                 dirichlet_alpha: float = 1.0, beta_alpha: float = 1.0):
    """Three colour chains of depth 1, 2, 3 mixed and blended with the input."""
    rng = np.random.default_rng(seed)
    plan = augmix_plan(rng, width, depth, dirichlet_alpha, beta_alpha)
    return apply_augmix(np.asarray(image, dtype=np.float64), mask, plan)


# ---------------------------------------------------------------------------
# random-network perturbation (DeepAugment analogue)

NET_WIDTHS = (3, 8, 8, 3)


@dataclass
class NetPerturbPlan:
    weights: list  # conv kernels, OutC x InC x 3 x 3
    scales: list  # per hidden layer, per-channel multipliers
    blend: float = 0.5


def _identity_kernel(out_c: int, in_c: int) -> np.ndarray:
    k = np.zeros((out_c, in_c, 3, 3))
    for i in range(min(out_c, in_c)):
        k[i, i, 1, 1] = 1.0
    return k


def net_perturb_plan(rng: np.random.Generator, noise: float = 0.5, scale_range=(0.5, 2.0),
                     flip_p: float = 0.1, drop_p: float = 0.1) -> NetPerturbPlan:
    weights, scales = [], []
    for i in range(len(NET_WIDTHS) - 1):
        c_in, c_out = NET_WIDTHS[i], NET_WIDTHS[i + 1]
        std = noise / np.sqrt(c_in * 9)
        weights.append(_identity_kernel(c_out, c_in) + rng.normal(0.0, std, (c_out, c_in, 3, 3)))
    for c in NET_WIDTHS[1:-1]:
        lo, hi = np.log(scale_range[0]), np.log(scale_range[1])
        s = np.exp(rng.uniform(lo, hi, c))
        s = np.where(rng.random(c) < flip_p, -s, s)
        s = np.where(rng.random(c) < drop_p, 0.0, s)
        scales.append(s)
    return NetPerturbPlan(weights, scales)


def neutral_net_perturb_plan() -> NetPerturbPlan:
    weights = [_identity_kernel(NET_WIDTHS[i + 1], NET_WIDTHS[i]) for i in range(len(NET_WIDTHS) - 1)]
    scales = [np.ones(c) for c in NET_WIDTHS[1:-1]]
    return NetPerturbPlan(weights, scales)


def apply_net_perturb(image: np.ndarray, plan: NetPerturbPlan) -> np.ndarray:
    h = image[None]
    n = len(plan.weights)
    for i, w in enumerate(plan.weights):
        h = conv2d_numpy(h, w, padding=1)
        if i < n - 1:
            h = np.maximum(h, 0.0) * plan.scales[i][None, :, None, None]
    out = h[0]
    lo, hi = out.min(), out.max()
    out = (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)
    return np.clip((1.0 - plan.blend) * image + plan.blend * out, 0.0, 1.0)


def net_perturb_augment(image, seed) -> np.ndarray:
    """Random shallow conv encoder-decoder with perturbed hidden activations."""
    rng = np.random.default_rng(seed)
    return apply_net_perturb(np.asarray(image, dtype=np.float64), net_perturb_plan(rng))


# ---------------------------------------------------------------------------
# target-domain corruptions (versioned constants)

CORRUPTIONS = {
    "fog": {1: 0.3, 2: 0.5, 3: 0.7},  # blend weight toward white
    "hue_rotate": {1: 45.0, 2: 90.0, 3: 135.0},  # degrees in YIQ chroma plane
    "contrast": {1: 0.5, 2: 0.35, 3: 0.2},  # factor around the mean grey
    "gauss_noise": {1: 0.05, 2: 0.10, 3: 0.15},  # noise std
    "channel_swap": {1: (1, 0, 2), 2: (0, 2, 1), 3: (2, 1, 0)},  # RGB permutation
}

_RGB2YIQ = np.array([[0.299, 0.587, 0.114],
                     [0.596, -0.274, -0.322],
                     [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def fog(img, weight: float):
    return (1.0 - weight) * img + weight * 1.0


def hue_rotate(img, degrees: float):
    t = np.deg2rad(degrees)
    rot = np.array([[1, 0, 0], [0, np.cos(t), -np.sin(t)], [0, np.sin(t), np.cos(t)]])
    m = _YIQ2RGB @ rot @ _RGB2YIQ
    return np.einsum("ij,jhw->ihw", m, img)


def contrast(img, factor: float):
    g = _gray(img).mean()
    return g + factor * (img - g)


def gauss_noise(img, std: float, rng: np.random.Generator):
    return img + rng.normal(0.0, std, img.shape)


def channel_swap(img, perm):
    return img[list(perm)]


def corrupt(image, name: str, severity: int, seed=0) -> np.ndarray:
    if name not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {name!r}; choose from {sorted(CORRUPTIONS)}")
    if severity not in CORRUPTIONS[name]:
        raise ValueError(f"severity must be one of {sorted(CORRUPTIONS[name])}")
    img = np.asarray(image, dtype=np.float64)
    level = CORRUPTIONS[name][severity]
    if name == "gauss_noise":
        out = gauss_noise(img, level, np.random.default_rng(seed))
    else:
        out = {"fog": fog, "hue_rotate": hue_rotate, "contrast": contrast,
               "channel_swap": channel_swap}[name](img, level)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# declarative domain description

KINDS = ("identity", "default", "randcolor", "augmix", "netperturb", "corruption")
COLOR_ONLY = ("identity", "randcolor", "netperturb", "corruption")


@dataclass(frozen=True)
class DomainSpec:
    """A pseudo-domain or target-domain pipeline.

    ``kind`` is one of :data:`KINDS`; ``corruption`` takes ``params``
    ``{"name": ..., "severity": ...}``.  ``default`` is the weak geometric
    augmentation used in pretraining and does not touch colours.
    """

    kind: str = "identity"
    seed: int = 0
    params: dict = field(default_factory=dict, hash=False, compare=True)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.kind == "corruption":
            name = self.params.get("name")
            if name not in CORRUPTIONS:
                raise ValueError(f"unknown corruption {name!r}")
            if self.params.get("severity") not in CORRUPTIONS[name]:
                raise ValueError(f"bad severity for {name}: {self.params.get('severity')!r}")

    @classmethod
    def identity(cls) -> "DomainSpec":
        return cls("identity")

    @classmethod
    def corruption(cls, name: str, severity: int, seed: int = 0) -> "DomainSpec":
        return cls("corruption", seed, {"name": name, "severity": int(severity)})

    @property
    def label(self) -> str:
        if self.kind == "corruption":
            return self.params["name"]
        return "source" if self.kind == "identity" else self.kind

    @property
    def severity(self) -> int:
        return int(self.params.get("severity", 0))

    def to_json(self) -> dict:
        return {"kind": self.kind, "seed": int(self.seed), "params": dict(self.params)}

    @classmethod
    def from_json(cls, obj) -> "DomainSpec":
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(obj["kind"], int(obj.get("seed", 0)), dict(obj.get("params", {})))

    def sample_seed(self, index: int) -> int:
        ss = np.random.SeedSequence([int(self.seed), KINDS.index(self.kind), int(index)])
        return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)

    def apply(self, image: np.ndarray, mask: np.ndarray | None = None, index: int = 0):
        """Transform one (image, mask) pair; ``index`` selects the per-image draw."""
        seed = self.sample_seed(index)
        if self.kind in ("identity", "default"):
            return np.asarray(image, dtype=np.float64), mask
        if self.kind == "randcolor":
            return rand_color_augment(image, seed), mask
        if self.kind == "augmix":
            return augmix_style(image, mask, seed, **self.params)
        if self.kind == "netperturb":
            return net_perturb_augment(image, seed), mask
        return corrupt(image, self.params["name"], self.params["severity"], seed), mask
