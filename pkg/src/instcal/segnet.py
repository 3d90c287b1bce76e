"""Small fully-convolutional segmentation network with pluggable normalization."""

from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .norm import (EVAL, TRAIN, BatchNorm2d, CalibrationC, CalibrationU, InstCalC, InstCalU,
                   ManualCalibratedBN, MLP, NormLayer, NormLayerState, _Row)

NORM_KINDS = ("bn", "manual", "instcal_u", "instcal_c")


@dataclass
class SegNetConfig:
    widths: tuple = (16, 32, 32, 16)
    n_classes: int = 5
    in_channels: int = 3
    kernel: int = 3
    norm: str = "bn"
    m: float = 0.1  # manual variant only
    k: int = 8  # instcal_c only
    mlp_hidden: int = 64

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 4:
            raise ValueError("widths must list four stage widths")
        if self.norm not in NORM_KINDS:
            raise ValueError(f"norm must be one of {NORM_KINDS}")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SegNetConfig":
        return cls(**d)


class Conv2d:
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator,
                 gain: float = np.sqrt(2.0)):
        fan_in = c_in * kernel * kernel
        # uniform with variance gain^2 / fan_in; sqrt(2) suits a following ReLU
        bound = gain * np.sqrt(3.0 / fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (c_out, c_in, kernel, kernel)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def tensors(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}


# (name, stride, upsample-before)
_STAGES = (("stage1", 1, False), ("stage2", 2, False), ("stage3", 2, False), ("stage4", 1, True))


class SegNet:
    """conv-norm-relu x 4 (two stride-2 stages, two nearest upsamplings) + classifier."""

    def __init__(self, config: SegNetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.convs: "OrderedDict[str, Conv2d]" = OrderedDict()
        self.norms: "OrderedDict[str, NormLayer]" = OrderedDict()
        c_in = config.in_channels
        for (name, stride, _), width in zip(_STAGES, config.widths):
            self.convs[name] = Conv2d(c_in, width, config.kernel, stride, rng)
            self.norms[f"{name}.bn"] = BatchNorm2d(NormLayerState.fresh(width))
            c_in = width
        # logits are not rectified; a small gain keeps the initial softmax near uniform
        self.classifier = Conv2d(c_in, config.n_classes, config.kernel, 1, rng, gain=0.1)
        if config.norm != "bn":
            # build calibrated layers directly (used when loading checkpoints)
            crng = np.random.default_rng(seed + 1)
            for name, layer in list(self.norms.items()):
                self.norms[name] = _make_calibrated(config, layer.state, crng)

    # -- structure -----------------------------------------------------
    def named_norm_layers(self):
        return list(self.norms.items())

    def set_norm_layer(self, name: str, layer: NormLayer) -> None:
        if name not in self.norms:
            raise KeyError(name)
        self.norms[name] = layer
        kinds = {l.kind for l in self.norms.values()}
        if len(kinds) == 1:
            kind = kinds.pop()
            upd = {"norm": kind}
            if kind == "manual":
                upd["m"] = layer.m
            if kind == "instcal_c":
                upd["k"] = layer.cal.K
            self.config = dataclasses.replace(self.config, **upd)

    def named_tensors(self) -> "OrderedDict[str, object]":
        out = OrderedDict()
        for name, conv in self.convs.items():
            for k, t in conv.tensors().items():
                out[f"{name}.conv.{k}"] = t
            norm_name = f"{name}.bn"
            for k, t in self.norms[norm_name].tensors().items():
                out[f"{norm_name}.{k}"] = t
        for k, t in self.classifier.tensors().items():
            out[f"classifier.{k}"] = t
        return out

    def parameters(self) -> "OrderedDict[str, Tensor]":
        """Trainable tensors keyed by name (basis matrices appear once, un-split)."""
        out = OrderedDict()
        for name, t in self.named_tensors().items():
            if isinstance(t, _Row):
                base = name.rsplit(".", 1)[0]
                t = t.parent
                name = base
            if t.requires_grad and name not in out:
                out[name] = t
        return out

    def calibration_names(self) -> list[str]:
        names = []
        for lname, layer in self.norms.items():
            names += [f"{lname}.{k}" for k in layer.calibration_names()]
        return names

    def freeze(self) -> None:
        for t in self.named_tensors().values():
            t.requires_grad = False

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, np.array(t.data, copy=True)) for k, t in self.named_tensors().items())

    def trainable(self) -> dict[str, bool]:
        return {k: bool(t.requires_grad) for k, t in self.named_tensors().items()}

    def load_state_dict(self, arrays: dict, trainable: dict | None = None) -> None:
        tensors = self.named_tensors()
        missing = set(tensors) - set(arrays)
        extra = set(arrays) - set(tensors)
        if missing or extra:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in tensors.items():
            arr = np.asarray(arrays[k])
            if arr.shape != t.shape:
                raise ad.DimensionError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(ad.get_default_dtype()).copy()
            if trainable is not None:
                t.requires_grad = bool(trainable[k])

    def parameter_count(self) -> int:
        """Number of learnable scalars (population statistics excluded)."""
        return int(sum(np.size(t.data) for k, t in self.named_tensors().items()
                       if not k.endswith((".mu_pop", ".var_pop"))))

    # -- compute -------------------------------------------------------
    def forward(self, images, mode: str = EVAL) -> Tensor:
        if mode not in (TRAIN, EVAL):
            raise ValueError(f"mode must be '{TRAIN}' or '{EVAL}'")
        x = ad.as_tensor(images)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        for idx, (name, _, upsample) in enumerate(_STAGES):
            try:
                if upsample:
                    x = ad.upsample_nearest(x, 2)
                x = self.convs[name](x)
                x = self.norms[f"{name}.bn"](x, mode)
                x = ad.relu(x)
            except ad.NonFiniteError as exc:
                raise ad.NonFiniteError(f"layer {idx} ({name}): {exc}") from exc
        try:
            x = ad.upsample_nearest(x, 2)
            return self.classifier(x)
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(f"layer {len(_STAGES)} (classifier): {exc}") from exc

    __call__ = forward

    def set_stats_scope(self, scope: str) -> None:
        for layer in self.norms.values():
            layer.stats_scope = scope


def _make_calibrated(config: SegNetConfig, state: NormLayerState, rng) -> NormLayer:
    state = dataclasses.replace(state, mode=EVAL)
    if config.norm == "manual":
        return ManualCalibratedBN(state, config.m)
    if config.norm == "instcal_u":
        return InstCalU(state, CalibrationU.init(state.channels))
    return InstCalC(state, CalibrationC.init(state.channels, config.k, config.mlp_hidden, rng))


def build(config: SegNetConfig | None = None, seed: int = 0) -> SegNet:
    return SegNet(config or SegNetConfig(), seed)


def forward(model: SegNet, images, mode: str = EVAL) -> Tensor:
    return model.forward(images, mode)


def predict(model: SegNet, images) -> tuple[np.ndarray, np.ndarray]:
    """Arg-max labels and max softmax probability per pixel (no graph)."""
    with ad.no_grad():
        logits = model.forward(images, EVAL).data
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return logits.argmax(axis=1), p.max(axis=1)
