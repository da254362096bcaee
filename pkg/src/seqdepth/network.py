"""Convolutional-GRU encoder/decoder for per-frame depth prediction.

The layer table below is the full-size architecture; :class:`NetworkConfig`
scales every channel count (except the 3-channel output head) by
``width_scale`` so the same design can be trained at desk scale.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatchError, InvalidConfigError
from .tensor import DTYPE, LRELU_VARIANTS, ConvSpec

RESHAPE_BLOCK = 2
INITS = ("he", "glorot", "zero")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv_lrelu" | "conv_gru" | "conv_tanh"
    filter: tuple[int, int]
    stride: int
    out_channels: int
    preceded_by_reshape: bool = False


TABLE1 = (
    LayerSpec("E0", "conv_lrelu", (3, 3), 2, 64),
    LayerSpec("E1", "conv_gru", (3, 3), 2, 256),
    LayerSpec("E2", "conv_gru", (3, 3), 2, 512),
    LayerSpec("E3", "conv_gru", (3, 3), 2, 512),
    LayerSpec("D0", "conv_lrelu", (1, 1), 1, 512),
    LayerSpec("D1", "conv_gru", (3, 3), 1, 512, preceded_by_reshape=True),
    LayerSpec("D2", "conv_gru", (3, 3), 1, 256, preceded_by_reshape=True),
    LayerSpec("D3", "conv_gru", (3, 3), 1, 256, preceded_by_reshape=True),
    LayerSpec("D4", "conv_gru", (3, 3), 1, 128, preceded_by_reshape=True),
    LayerSpec("D5", "conv_tanh", (1, 1), 1, 3),
)

DOWNSAMPLE = 2 ** sum(1 for s in TABLE1 if s.stride == 2)


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    return Fraction(str(x)).limit_denominator(4096)


@dataclass
class NetworkConfig:
    width_scale: float = 0.125
    height: int = 32
    width: int = 32
    lrelu_variant: str = "standard"
    alpha: float = 0.1
    seed: int = 0
    init: str = "he"
    update_gate_bias: float = 3.0  # starts every GRU close to feed-forward

    def validate(self):
        if self.height % DOWNSAMPLE or self.width % DOWNSAMPLE or self.height < 1 or self.width < 1:
            raise InvalidConfigError(
                f"input {self.height}x{self.width} must be a positive multiple of {DOWNSAMPLE}"
            )
        if self.lrelu_variant not in LRELU_VARIANTS:
            raise InvalidConfigError(f"unknown lrelu variant {self.lrelu_variant!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidConfigError("alpha must lie in [0, 1]")
        if self.init not in INITS:
            raise InvalidConfigError(f"unknown init {self.init!r}; expected one of {INITS}")
        self.layer_specs()  # raises on bad width_scale
        return self

    def layer_specs(self) -> list[LayerSpec]:
        scale = _as_fraction(self.width_scale)
        if scale <= 0:
            raise InvalidConfigError("width_scale must be positive")
        specs = []
        for s in TABLE1:
            if s.kind == "conv_tanh":
                specs.append(s)
                continue
            c = s.out_channels * scale
            if c.denominator != 1 or c < 1:
                raise InvalidConfigError(
                    f"width_scale {self.width_scale} gives non-integer channels for {s.name}"
                )
            specs.append(replace(s, out_channels=int(c)))
        for prev, nxt in zip(specs, specs[1:]):
            if nxt.preceded_by_reshape and prev.out_channels % (RESHAPE_BLOCK ** 2):
                raise InvalidConfigError(
                    f"{prev.name} has {prev.out_channels} channels, not divisible by "
                    f"{RESHAPE_BLOCK ** 2} for the reshape before {nxt.name}"
                )
        return specs

    def to_dict(self):
        return asdict(self)


class ConvGRUCell:
    """Convolutional GRU with fused gate weights.

    The three input convolutions share one weight tensor ``wx`` laid out as
    [z; r; candidate], and the two gate state convolutions share ``uzr``.
    The per-gate views (``Wz``, ``Ur``, ...) are exposed for inspection.
    """

    def __init__(self, name, in_channels, out_channels, kernel, stride, params):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        k = kernel[0]
        self.x_spec = ConvSpec.same(k, stride)
        self.h_spec = ConvSpec.same(k, 1)
        self.params = params  # shared name -> array mapping owned by the network

    def _p(self, key, tape):
        arr = self.params[f"{self.name}.{key}"]
        return tape.param(f"{self.name}.{key}", arr) if tape is not None else arr

    def _views(self, key, parts):
        arr = self.params[f"{self.name}.{key}"]
        o = self.out_channels
        return [arr[i * o:(i + 1) * o] for i in range(parts)]

    Wz = property(lambda self: self._views("wx", 3)[0])
    Wr = property(lambda self: self._views("wx", 3)[1])
    Wh = property(lambda self: self._views("wx", 3)[2])
    bz = property(lambda self: self._views("bx", 3)[0])
    br = property(lambda self: self._views("bx", 3)[1])
    bh = property(lambda self: self._views("bx", 3)[2])
    Uz = property(lambda self: self._views("uzr", 2)[0])
    Ur = property(lambda self: self._views("uzr", 2)[1])
    Uh = property(lambda self: self.params[f"{self.name}.uh"])

    def state_shape(self, x_shape):
        ho, wo = self.x_spec.output_extent(x_shape[1], x_shape[2])
        return (self.out_channels, ho, wo)

    def param_shapes(self):
        k = self.x_spec.kernel
        c, o = self.in_channels, self.out_channels
        return {
            "wx": (3 * o, c, *k),
            "bx": (3 * o,),
            "uzr": (2 * o, o, *k),
            "uh": (o, o, *k),
        }


def conv_gru_step(cell: ConvGRUCell, x, h_prev=None, tape=None, return_gates=False):
    """One GRU update; returns the new hidden state (which is also the layer output).

    z = sigmoid(Wz*x + Uz*h + bz), r = sigmoid(Wr*x + Ur*h + br),
    cand = tanh(Wh*x + Uh*(r.h) + bh), h_new = (1 - z).h + z.cand
    A missing ``h_prev`` is the zero state.
    """
    xv = ad.value(x)
    if xv.shape[0] != cell.in_channels:
        raise DimensionMismatchError(
            f"{cell.name}: input has {xv.shape[0]} channels, cell expects {cell.in_channels}",
            "channels",
        )
    o = cell.out_channels
    xg = ad.conv2d(x, cell._p("wx", tape), cell._p("bx", tape), cell.x_spec)
    xz, xr, xh = ad.channels(xg, 0, o), ad.channels(xg, o, 2 * o), ad.channels(xg, 2 * o, 3 * o)
    if h_prev is None:
        z = ad.sigmoid(xz)
        r = ad.sigmoid(xr) if return_gates else None  # r cannot affect a zero state
        cand = ad.tanh(xh)
        h_new = ad.mul(z, cand)
    else:
        hv = ad.value(h_prev)
        if hv.shape != ad.value(xz).shape:
            raise DimensionMismatchError(
                f"{cell.name}: state shape {hv.shape} does not match gate shape "
                f"{ad.value(xz).shape}", "state",
            )
        hg = ad.conv2d(h_prev, cell._p("uzr", tape), None, cell.h_spec)
        z = ad.sigmoid(ad.add(xz, ad.channels(hg, 0, o)))
        r = ad.sigmoid(ad.add(xr, ad.channels(hg, o, 2 * o)))
        rh = ad.conv2d(ad.mul(r, h_prev), cell._p("uh", tape), None, cell.h_spec)
        cand = ad.tanh(ad.add(xh, rh))
        # h + z.(cand - h) == (1 - z).h + z.cand, one op shorter
        h_new = ad.add(h_prev, ad.mul(z, ad.sub(cand, h_prev)))
    if return_gates:
        return h_new, {"z": z, "r": r, "candidate": cand}
    return h_new


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _he(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


_INIT_FNS = {"glorot": _glorot, "he": _he}


class DepthNet:
    """Stateful recurrent depth network.

    ``params`` maps parameter names to arrays; ``states`` maps each GRU layer
    name to its hidden state (``None`` before the first frame).
    """

    def __init__(self, config: NetworkConfig, params=None, dtype=DTYPE):
        self.config = config.validate()
        self.layers = config.layer_specs()
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.cells: dict[str, ConvGRUCell] = {}
        self.convs: dict[str, ConvSpec] = {}
        self._shapes = OrderedDict()
        in_c = 3
        for spec in self.layers:
            if spec.preceded_by_reshape:
                in_c //= RESHAPE_BLOCK ** 2
            if spec.kind == "conv_gru":
                cell = ConvGRUCell(spec.name, in_c, spec.out_channels, spec.filter,
                                   spec.stride, self.params)
                self.cells[spec.name] = cell
                for key, shape in cell.param_shapes().items():
                    self._shapes[f"{spec.name}.{key}"] = shape
            else:
                self.convs[spec.name] = ConvSpec.same(spec.filter[0], spec.stride)
                self._shapes[f"{spec.name}.w"] = (spec.out_channels, in_c, *spec.filter)
                self._shapes[f"{spec.name}.b"] = (spec.out_channels,)
            in_c = spec.out_channels
        if params is not None:
            for name, shape in self._shapes.items():
                arr = np.ascontiguousarray(params[name], dtype=self.dtype)
                if arr.shape != shape:
                    raise DimensionMismatchError(f"{name}: expected {shape}, got {arr.shape}", name)
                self.params[name] = arr
        self.states: dict[str, object] = {name: None for name in self.cells}

    # -- construction helpers --------------------------------------------------

    def init_params(self, rng, init=None):
        """Fill parameters. ``init`` is "he" (uniform, fan-in scaled), "glorot" or "zero";
        defaults to the config's choice. GRU update-gate biases get ``update_gate_bias``."""
        init = init or self.config.init
        if init not in INITS:
            raise InvalidConfigError(f"unknown init {init!r}")
        for name, shape in self._shapes.items():
            if init == "zero" or len(shape) == 1:
                self.params[name] = np.zeros(shape, dtype=self.dtype)
                if init != "zero" and name.endswith(".bx"):
                    self.params[name][: shape[0] // 3] = self.config.update_gate_bias
                continue
            fn = _INIT_FNS[init]
            o, c, kh, kw = shape
            if name.endswith(".wx") or name.endswith(".uzr"):
                parts = 3 if name.endswith(".wx") else 2
                o //= parts
                blocks = [fn(rng, (o, c, kh, kw), c * kh * kw, o * kh * kw, self.dtype)
                          for _ in range(parts)]
                self.params[name] = np.ascontiguousarray(np.concatenate(blocks))
            else:
                self.params[name] = fn(rng, shape, c * kh * kw, o * kh * kw, self.dtype)
        return self

    def parameter_shapes(self):
        return OrderedDict(self._shapes)

    @property
    def n_params(self):
        return int(sum(np.prod(s) for s in self._shapes.values()))

    def astype(self, dtype):
        """Copy of the network with parameters cast to ``dtype`` and states cleared."""
        return DepthNet(self.config, {k: v.astype(dtype) for k, v in self.params.items()}, dtype)

    def copy(self):
        return self.astype(self.dtype)

    # -- inference ----------------------------------------------------------------

    def reset_state(self):
        for name in self.states:
            self.states[name] = None

    def _check_frame(self, frame):
        shape = ad.value(frame).shape
        expected = (3, self.config.height, self.config.width)
        if shape != expected:
            raise DimensionMismatchError(f"frame shape {shape}, network expects {expected}", "frame")

    def forward_frame(self, frame, tape=None):
        """Run one frame through every layer, advancing the GRU states."""
        self._check_frame(frame)
        cfg = self.config
        x = frame

        def p(key):
            arr = self.params[key]
            return tape.param(key, arr) if tape is not None else arr

        for spec in self.layers:
            if spec.preceded_by_reshape:
                x = ad.depth_to_space(x, RESHAPE_BLOCK)
            if spec.kind == "conv_gru":
                x = conv_gru_step(self.cells[spec.name], x, self.states[spec.name], tape)
                self.states[spec.name] = x
                continue
            y = ad.conv2d(x, p(f"{spec.name}.w"), p(f"{spec.name}.b"), self.convs[spec.name])
            if spec.kind == "conv_lrelu":
                x = ad.lrelu(y, cfg.alpha, cfg.lrelu_variant)
            else:
                x = ad.tanh(y)
        return x

    def forward_sequence(self, frames, tape=None):
        """Sequential forward over ``frames`` carrying state; pass a tape to record."""
        if len(frames) == 0:
            raise InvalidConfigError("forward_sequence needs at least one frame")
        return [self.forward_frame(f, tape) for f in frames]

    def predict_sequence(self, frames, reset_every_frame=False):
        """Untaped inference from a fresh state. Returns a list of 3 x H x W arrays."""
        self.reset_state()
        outs = []
        for f in frames:
            if reset_every_frame:
                self.reset_state()
            outs.append(self.forward_frame(f))
        return outs


def build_network(config: NetworkConfig, rng=None, init=None, dtype=DTYPE) -> DepthNet:
    """Instantiate the scaled architecture with fresh parameters and empty states."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    return DepthNet(config, dtype=dtype).init_params(rng, init)


def forward_frame(net: DepthNet, frame, tape=None):
    return net.forward_frame(frame, tape)


def forward_sequence(net: DepthNet, frames, record=False, tape=None):
    """Forward a sequence; with ``record=True`` a tape is created (or ``tape`` used)."""
    if record and tape is None:
        tape = ad.Tape()
    outs = net.forward_sequence(frames, tape if record else None)
    return (outs, tape) if record else outs


def reset_state(net: DepthNet):
    net.reset_state()


def frame_to_input(rgb8: np.ndarray, dtype=DTYPE) -> np.ndarray:
    """8-bit 3 x H x W image -> network input in [-1, 1]."""
    dt = np.dtype(dtype).type
    return np.asarray(rgb8, dtype=dt) / dt(127.5) - dt(1)


def depth_to_target(depth8: np.ndarray, dtype=DTYPE) -> np.ndarray:
    """8-bit depth map (H x W or C x H x W) -> 3-channel target in [-1, 1]."""
    d = np.asarray(depth8)
    if d.ndim == 2:
        d = np.broadcast_to(d, (3, *d.shape))
    dt = np.dtype(dtype).type
    return np.ascontiguousarray(d, dtype=dt) / dt(127.5) - dt(1)


def output_to_depth8(out: np.ndarray) -> np.ndarray:
    """Network output in [-1, 1] -> 8-bit map via (o + 1)*127.5 rounded half up."""
    px = np.floor((np.asarray(out, dtype=np.float64) + 1.0) * 127.5 + 0.5)
    return np.clip(px, 0, 255).astype(np.uint8)
