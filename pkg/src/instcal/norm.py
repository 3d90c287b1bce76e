"""BatchNorm and its test-time calibrated variants.

Four normalization flavours share one set of frozen statistics
(:class:`NormLayerState`):

* ``BatchNorm2d`` - batch statistics + moving average in training,
  population statistics in evaluation.
* ``ManualCalibratedBN`` - population and per-instance statistics mixed by a
  single hand-set scalar ``m``.
* ``InstCalU`` - the same mixing with learned per-channel strengths, one
  vector for the mean and one for the variance.
* ``InstCalC`` - per-instance strengths formed as a softmax-weighted sum of
  ``K`` learned basis vectors; the weights come from two small MLPs fed with
  the concatenated population and instance statistics.

The calibrated layers always use instance statistics (computed over H, W of
each sample) regardless of the train/eval flag.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1
DEFAULT_BASIS = 8
MLP_HIDDEN = 64
CALIBRATION_INIT = 0.1

TRAIN = "train"
EVAL = "eval"


class ConversionError(ValueError):
    """Raised when a model cannot be converted to a calibrated variant."""


@dataclass
class NormLayerState:
    """Frozen BatchNorm quantities of one layer."""

    mu_pop: Tensor
    var_pop: Tensor
    gamma: Tensor
    beta: Tensor
    momentum: float = DEFAULT_MOMENTUM
    epsilon: float = DEFAULT_EPS
    mode: str = TRAIN

    def __post_init__(self):
        c = self.mu_pop.shape
        for name in ("var_pop", "gamma", "beta"):
            if getattr(self, name).shape != c:
                raise ad.DimensionError(
                    f"NormLayerState.{name} has shape {getattr(self, name).shape}, expected {c}")
        if (self.var_pop.data < 0).any():
            raise ValueError("var_pop must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if self.mode not in (TRAIN, EVAL):
            raise ValueError(f"mode must be '{TRAIN}' or '{EVAL}'")

    @classmethod
    def fresh(cls, channels: int, **kw) -> "NormLayerState":
        return cls(
            mu_pop=Tensor(np.zeros(channels)),
            var_pop=Tensor(np.ones(channels)),
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.mu_pop.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta,
                "mu_pop": self.mu_pop, "var_pop": self.var_pop}


@dataclass
class BatchStats:
    mu_b: np.ndarray
    var_b: np.ndarray


@dataclass
class InstanceStats:
    mu_ins: np.ndarray  # B x C
    var_ins: np.ndarray  # B x C


def _chan(v) -> Tensor:
    """Per-channel vector -> broadcastable 1 x C x 1 x 1 tensor."""
    v = ad.as_tensor(v)
    return v.reshape((1, -1, 1, 1))


def _check_input(x: Tensor, state: NormLayerState) -> None:
    if x.ndim != 4:
        raise ad.DimensionError(f"expected NCHW input, got shape {x.shape}")
    if x.shape[1] != state.channels:
        raise ad.DimensionError(
            f"input has {x.shape[1]} channels (axis 1), layer has {state.channels}")
    if x.shape[2] * x.shape[3] == 0:
        raise ad.DimensionError("input has zero spatial extent (axes 2, 3)")


def _normalize(x: Tensor, mu: Tensor, var: Tensor, state: NormLayerState) -> Tensor:
    return (x - mu) / ad.sqrt(var + state.epsilon) * _chan(state.gamma) + _chan(state.beta)


def mix(a, b, m):
    """``(1 - m) * a + m * b``; ``m`` is not clamped."""
    if isinstance(a, Tensor) or isinstance(b, Tensor) or isinstance(m, Tensor):
        m = ad.as_tensor(m)
        return (1.0 - m) * a + m * b
    a, b, m = np.asarray(a, float), np.asarray(b, float), np.asarray(m, float)
    try:
        np.broadcast_shapes(a.shape, b.shape, m.shape)
    except ValueError:
        raise ad.DimensionError(
            f"mix: shapes {a.shape}, {b.shape}, {m.shape} are not compatible") from None
    return (1.0 - m) * a + m * b


def batch_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Statistics over (B, H, W), shaped 1 x C x 1 x 1."""
    return ad.reduce_stats(x, (0, 2, 3))


def instance_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Statistics over (H, W) of each sample, shaped B x C x 1 x 1."""
    return ad.reduce_stats(x, (2, 3))


def bn_forward_train(x, state: NormLayerState) -> tuple[Tensor, NormLayerState]:
    """Normalize with batch statistics and return the EMA-updated state."""
    x = ad.as_tensor(x)
    if state.mode != TRAIN:
        raise ValueError("bn_forward_train needs a state in train mode")
    _check_input(x, state)
    mu_b, var_b = batch_stats(x)
    y = _normalize(x, mu_b, var_b, state)
    a = state.momentum
    new_state = dataclasses.replace(
        state,
        mu_pop=Tensor((1 - a) * state.mu_pop.data + a * mu_b.data.reshape(-1)),
        var_pop=Tensor((1 - a) * state.var_pop.data + a * var_b.data.reshape(-1)),
    )
    return y, new_state


def bn_forward_eval(x, state: NormLayerState) -> Tensor:
    x = ad.as_tensor(x)
    _check_input(x, state)
    return _normalize(x, _chan(state.mu_pop.data), _chan(state.var_pop.data), state)


def _calibrated(x: Tensor, state: NormLayerState, m_mu, m_sigma, scope: str) -> Tensor:
    mu_s, var_s = instance_stats(x) if scope == "instance" else batch_stats(x)
    mu_pop = _chan(state.mu_pop.data)
    var_pop = _chan(state.var_pop.data)
    mu = mix(mu_pop, mu_s, m_mu)
    # extrapolated strengths can push the mixed variance below zero
    var = ad.clamp_min(mix(var_pop, var_s, m_sigma), 0.0)
    return _normalize(x, mu, var, state)


def manual_calibrated_forward(x, state: NormLayerState, m: float, scope: str = "instance") -> Tensor:
    x = ad.as_tensor(x)
    _check_input(x, state)
    m = Tensor(float(m))
    return _calibrated(x, state, m, m, scope)


@dataclass
class CalibrationU:
    m_mu: Tensor
    m_sigma: Tensor

    @classmethod
    def init(cls, channels: int, value: float = CALIBRATION_INIT) -> "CalibrationU":
        return cls(Tensor(np.full(channels, value), requires_grad=True),
                   Tensor(np.full(channels, value), requires_grad=True))

    def tensors(self) -> dict[str, Tensor]:
        return {"m_mu": self.m_mu, "m_sigma": self.m_sigma}


def instcal_u_forward(x, state: NormLayerState, cal: CalibrationU, scope: str = "instance") -> Tensor:
    x = ad.as_tensor(x)
    _check_input(x, state)
    if cal.m_mu.shape != (state.channels,) or cal.m_sigma.shape != (state.channels,):
        raise ad.DimensionError("calibration vectors must have one entry per channel")
    return _calibrated(x, state, _chan(cal.m_mu), _chan(cal.m_sigma), scope)


@dataclass
class MLP:
    """Two-layer perceptron ``relu(z @ w1 + b1) @ w2 + b2``."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator) -> "MLP":
        bound = 1.0 / np.sqrt(n_in)
        return cls(
            Tensor(rng.uniform(-bound, bound, (n_in, n_hidden)), requires_grad=True),
            Tensor(np.zeros(n_hidden), requires_grad=True),
            # zero output layer -> uniform softmax at initialization
            Tensor(np.zeros((n_hidden, n_out)), requires_grad=True),
            Tensor(np.zeros(n_out), requires_grad=True),
        )

    @property
    def n_in(self) -> int:
        return self.w1.shape[0]

    @property
    def n_out(self) -> int:
        return self.w2.shape[1]

    def __call__(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.n_in:
            raise ad.DimensionError(
                f"MLP input width {z.shape[-1]} does not match expected {self.n_in}")
        h = ad.relu(z @ self.w1 + self.b1)
        return h @ self.w2 + self.b2

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class CalibrationC:
    basis_mu: Tensor  # K x C
    basis_sigma: Tensor  # K x C
    mlp_mu: MLP
    mlp_sigma: MLP

    def __post_init__(self):
        k = self.basis_mu.shape[0]
        if k < 1 or self.basis_sigma.shape[0] != k:
            raise ValueError("basis count K must be >= 1 and equal for mean and variance")
        if self.mlp_mu.n_out != k or self.mlp_sigma.n_out != k:
            raise ad.DimensionError("both MLPs must output exactly K logits")

    @property
    def K(self) -> int:  # noqa: N802
        return self.basis_mu.shape[0]

    @classmethod
    def init(cls, channels: int, k: int = DEFAULT_BASIS, hidden: int = MLP_HIDDEN,
             rng: np.random.Generator | None = None,
             value: float = CALIBRATION_INIT) -> "CalibrationC":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(
            Tensor(np.full((k, channels), value), requires_grad=True),
            Tensor(np.full((k, channels), value), requires_grad=True),
            MLP.init(2 * channels, hidden, k, rng),
            MLP.init(2 * channels, hidden, k, rng),
        )

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i in range(self.K):
            out[f"basis_mu.{i}"] = _Row(self.basis_mu, i)
        for i in range(self.K):
            out[f"basis_sigma.{i}"] = _Row(self.basis_sigma, i)
        for prefix, mlp in (("mlp_mu", self.mlp_mu), ("mlp_sigma", self.mlp_sigma)):
            for k, t in mlp.tensors().items():
                out[f"{prefix}.{k}"] = t
        return out


class _Row:
    """Named view on one basis row, so checkpoints store each basis separately."""

    def __init__(self, parent: Tensor, index: int):
        self.parent = parent
        self.index = index

    @property
    def data(self) -> np.ndarray:
        return self.parent.data[self.index]

    @data.setter
    def data(self, value) -> None:
        arr = self.parent.data.copy()
        arr[self.index] = value
        self.parent.data = arr

    @property
    def requires_grad(self) -> bool:
        return self.parent.requires_grad

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        self.parent.requires_grad = flag

    @property
    def shape(self) -> tuple:
        return self.data.shape


def instcal_c_coefficients(pop, ins, mlp: MLP) -> Tensor:
    """Softmax over K of ``mlp(concat(pop, ins))``; one row per sample.

    ``pop`` is a length-C vector, ``ins`` is B x C (or length C for one sample).
    """
    ins = ad.as_tensor(ins)
    if ins.ndim == 1:
        ins = ins.reshape((1, -1))
    pop = ad.as_tensor(pop).reshape((1, -1))
    # one row at a time: a BLAS call over B rows may round differently from B calls
    rows = [ad.softmax(mlp(ad.concat([pop, ins[i:i + 1]], axis=1)), axis=1)
            for i in range(ins.shape[0])]
    return rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)


def _rowwise_matmul(a: Tensor, b: Tensor) -> Tensor:
    rows = [a[i:i + 1] @ b for i in range(a.shape[0])]
    return rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)


def instcal_c_strengths(x: Tensor, state: NormLayerState, cal: CalibrationC,
                        scope: str = "instance") -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Effective (m_mu, m_sigma) per sample, shaped B x C, plus the coefficients."""
    mu_s, var_s = instance_stats(x) if scope == "instance" else batch_stats(x)
    b, c = x.shape[0], x.shape[1]
    mu_rows = mu_s.reshape((mu_s.shape[0], c))
    var_rows = var_s.reshape((var_s.shape[0], c))
    c_mu = instcal_c_coefficients(state.mu_pop.data, mu_rows, cal.mlp_mu)
    c_sigma = instcal_c_coefficients(state.var_pop.data, var_rows, cal.mlp_sigma)
    m_mu = _rowwise_matmul(c_mu, cal.basis_mu)
    m_sigma = _rowwise_matmul(c_sigma, cal.basis_sigma)
    if m_mu.shape[0] != b:  # batch-scoped statistics: one row shared by the batch
        ones = Tensor(np.ones((b, 1)))
        m_mu = ones @ m_mu
        m_sigma = ones @ m_sigma
    return m_mu, m_sigma, c_mu, c_sigma


def instcal_c_forward(x, state: NormLayerState, cal: CalibrationC, scope: str = "instance") -> Tensor:
    x = ad.as_tensor(x)
    _check_input(x, state)
    if cal.basis_mu.shape[1] != state.channels:
        raise ad.DimensionError("basis vectors must have one entry per channel")
    m_mu, m_sigma, _, _ = instcal_c_strengths(x, state, cal, scope)
    b, c = x.shape[0], x.shape[1]
    return _calibrated(x, state, m_mu.reshape((b, c, 1, 1)), m_sigma.reshape((b, c, 1, 1)), scope)


# ---------------------------------------------------------------------------
# layer objects


class NormLayer:
    """Common interface: ``forward(x, mode)`` and a flat ``tensors()`` map."""

    kind = "base"
    calibrated = False

    def __init__(self, state: NormLayerState):
        self.state = state
        # "instance" or "batch"; the latter exists for the batch-statistics study
        self.stats_scope = "instance"

    def forward(self, x, mode: str = EVAL) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, mode: str = EVAL) -> Tensor:
        return self.forward(x, mode)

    def tensors(self) -> dict:
        return self.state.tensors()

    def calibration_names(self) -> list[str]:
        return []


class BatchNorm2d(NormLayer):
    kind = "bn"

    def forward(self, x, mode: str = EVAL) -> Tensor:
        if mode == TRAIN:
            state = dataclasses.replace(self.state, mode=TRAIN)
            y, new = bn_forward_train(x, state)
            self.state.mu_pop, self.state.var_pop = new.mu_pop, new.var_pop
            return y
        return bn_forward_eval(x, self.state)


class ManualCalibratedBN(NormLayer):
    kind = "manual"
    calibrated = True

    def __init__(self, state: NormLayerState, m: float = CALIBRATION_INIT):
        super().__init__(state)
        self.m = float(m)

    def forward(self, x, mode: str = EVAL) -> Tensor:
        return manual_calibrated_forward(x, self.state, self.m, self.stats_scope)


class InstCalU(NormLayer):
    kind = "instcal_u"
    calibrated = True

    def __init__(self, state: NormLayerState, cal: CalibrationU | None = None):
        super().__init__(state)
        self.cal = cal if cal is not None else CalibrationU.init(state.channels)

    def forward(self, x, mode: str = EVAL) -> Tensor:
        return instcal_u_forward(x, self.state, self.cal, self.stats_scope)

    def tensors(self) -> dict:
        return {**self.state.tensors(), **self.cal.tensors()}

    def calibration_names(self) -> list[str]:
        return list(self.cal.tensors())


class InstCalC(NormLayer):
    kind = "instcal_c"
    calibrated = True

    def __init__(self, state: NormLayerState, cal: CalibrationC | None = None,
                 k: int = DEFAULT_BASIS, rng: np.random.Generator | None = None):
        super().__init__(state)
        self.cal = cal if cal is not None else CalibrationC.init(state.channels, k, rng=rng)

    def forward(self, x, mode: str = EVAL) -> Tensor:
        return instcal_c_forward(x, self.state, self.cal, self.stats_scope)

    def tensors(self) -> dict:
        return {**self.state.tensors(), **self.cal.tensors()}

    def calibration_names(self) -> list[str]:
        return list(self.cal.tensors())


# ---------------------------------------------------------------------------
# conversion


@dataclass(frozen=True)
class ConvertMode:
    """Target of :func:`convert_model`: ``manual`` (with ``m``), ``instcal_u`` or ``instcal_c`` (with ``k``)."""

    kind: str
    m: float = CALIBRATION_INIT
    k: int = DEFAULT_BASIS

    def __post_init__(self):
        if self.kind not in ("manual", "instcal_u", "instcal_c"):
            raise ValueError(f"unknown conversion kind {self.kind!r}")
        if self.k < 1:
            raise ValueError("basis count must be >= 1")

    @classmethod
    def manual(cls, m: float) -> "ConvertMode":
        return cls("manual", m=float(m))

    @classmethod
    def instcal_u(cls) -> "ConvertMode":
        return cls("instcal_u")

    @classmethod
    def instcal_c(cls, k: int = DEFAULT_BASIS) -> "ConvertMode":
        return cls("instcal_c", k=int(k))


def _frozen_copy(state: NormLayerState) -> NormLayerState:
    return NormLayerState(
        mu_pop=Tensor(state.mu_pop.data.copy()),
        var_pop=Tensor(state.var_pop.data.copy()),
        gamma=Tensor(state.gamma.data.copy()),
        beta=Tensor(state.beta.data.copy()),
        momentum=state.momentum, epsilon=state.epsilon, mode=EVAL,
    )


def convert_layer(layer: NormLayer, mode: ConvertMode, rng: np.random.Generator) -> NormLayer:
    state = _frozen_copy(layer.state)
    if mode.kind == "manual":
        return ManualCalibratedBN(state, mode.m)
    if mode.kind == "instcal_u":
        return InstCalU(state)
    return InstCalC(state, k=mode.k, rng=rng)


def convert_model(model, mode: ConvertMode, seed: int = 0):
    """Return a copy of ``model`` whose BatchNorm layers are calibrated.

    ``model`` must expose ``named_norm_layers()``, ``set_norm_layer(name, layer)``
    and ``freeze()``.  All copied tensors are frozen; only the new
    calibration parameters require grad.
    """
    layers = list(model.named_norm_layers())
    if not layers:
        raise ConversionError("model contains no BatchNorm layer")
    if any(layer.kind != "bn" for _, layer in layers):
        raise ConversionError("model is already converted")
    rng = np.random.default_rng(seed)
    out = copy.deepcopy(model)
    out.freeze()
    for name, layer in layers:
        out.set_norm_layer(name, convert_layer(layer, mode, rng))
    return out


def iter_calibration_tensors(model) -> Iterator[tuple[str, object]]:
    for name, layer in model.named_norm_layers():
        tensors = layer.tensors()
        for key in layer.calibration_names():
            yield f"{name}.{key}", tensors[key]
