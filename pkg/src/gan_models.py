#!/usr/bin/env python3
# -----------------------------------------------------------
"""
Generator/discriminator MLPs on top of the autodiff graph, the GAN losses
(vanilla minimax in saturating and non-saturating form, WGAN-GP), the
Adam/RMSprop optimizers and the FGS1 parameter checkpoint format.

Loss graphs are compiled once per (loss config, network structure, batch
size) and cached per thread; each call only rebinds inputs.
"""

import json
import struct
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from autodiff import Graph, Tensor, forward, grad, gradient_nodes
from errors import DivergenceError, ShapeError
from logger_setup import LoggerSetup

# ---------------------------------------------------------------------------
# 1) Logger Setup
# ---------------------------------------------------------------------------
logger = LoggerSetup.setup_logger("GanModels")

# Sigmoid outputs are clamped into this band before the log
PROB_MIN = 1e-7
PROB_MAX = 1.0 - 1e-7
# The nonsaturating generator loss keeps its gradient while D rejects the fakes
NONSAT_PROB_MIN = float(np.finfo(np.float64).tiny)
STANDARDIZE_EPS = 1e-5

ArrayLike = Union[Tensor, np.ndarray]


def _as_array(x: ArrayLike) -> np.ndarray:
    return x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# 2) Network specs and parameter vectors
# ---------------------------------------------------------------------------
class Activation(str, Enum):
    IDENTITY = "identity"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    SOFTPLUS = "softplus"


HIDDEN_ACTIVATIONS = (Activation.TANH, Activation.SIGMOID, Activation.SOFTPLUS)
OUTPUT_ACTIVATIONS = (Activation.IDENTITY, Activation.SIGMOID, Activation.TANH)


class LayerSlot(NamedTuple):
    rows: int       # output width
    cols: int       # input width
    w_offset: int
    b_offset: int


@dataclass(frozen=True)
class MlpSpec:
    """
    Fully connected network: ``layer_sizes[0]`` inputs, ``layer_sizes[-1]`` outputs.

    ``standardize`` inserts a per-sample activation standardization before each
    hidden nonlinearity (off by default).
    """

    layer_sizes: Tuple[int, ...]
    activation: Activation = Activation.TANH
    output_activation: Activation = Activation.IDENTITY
    init_seed: int = 0
    standardize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "output_activation", Activation(self.output_activation))
        if len(self.layer_sizes) < 2:
            raise ValueError(f"MlpSpec needs at least 2 layer sizes, got {self.layer_sizes}")
        if any(s <= 0 for s in self.layer_sizes):
            raise ValueError(f"Layer sizes must be positive, got {self.layer_sizes}")
        if self.activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"Hidden activation must be smooth (tanh/sigmoid/softplus), got {self.activation.value}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"Unsupported output activation {self.output_activation.value}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def layout(self) -> List[LayerSlot]:
        slots, offset = [], 0
        for cols, rows in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            slots.append(LayerSlot(rows, cols, offset, offset + rows * cols))
            offset += rows * cols + rows
        return slots

    @property
    def n_params(self) -> int:
        return sum(s.rows * s.cols + s.rows for s in self.layout())

    def structure(self) -> Tuple[Any, ...]:
        """Everything that shapes the compiled graph (the init seed does not)."""
        return (self.layer_sizes, self.activation, self.output_activation, self.standardize)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation.value,
            "output_activation": self.output_activation.value,
            "init_seed": self.init_seed,
            "standardize": self.standardize,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MlpSpec":
        return cls(
            layer_sizes=tuple(data["layer_sizes"]),
            activation=Activation(data["activation"]),
            output_activation=Activation(data["output_activation"]),
            init_seed=int(data["init_seed"]),
            standardize=bool(data.get("standardize", False)),
        )


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 parameters of one MLP; per layer the (rows, cols) weight block then the bias."""

    spec: MlpSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True).reshape(-1)
        if data.size != self.spec.n_params:
            raise ShapeError(f"ParamVector length {data.size} != {self.spec.n_params} required by {self.spec.layer_sizes}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, spec: MlpSpec) -> "ParamVector":
        return cls(spec, np.zeros(spec.n_params))

    @classmethod
    def init(cls, spec: MlpSpec) -> "ParamVector":
        """Glorot-uniform weights, zero biases, drawn from ``spec.init_seed``."""
        rng = np.random.default_rng(spec.init_seed)
        data = np.zeros(spec.n_params)
        for slot in spec.layout():
            limit = np.sqrt(6.0 / (slot.rows + slot.cols))
            data[slot.w_offset:slot.b_offset] = rng.uniform(-limit, limit, size=slot.rows * slot.cols)
        return cls(spec, data)

    @property
    def layout(self) -> List[LayerSlot]:
        return self.spec.layout()

    def weight(self, layer: int) -> np.ndarray:
        slot = self.layout[layer]
        return self.data[slot.w_offset:slot.b_offset].reshape(slot.rows, slot.cols)

    def bias(self, layer: int) -> np.ndarray:
        slot = self.layout[layer]
        return self.data[slot.b_offset:slot.b_offset + slot.rows]

    def replace(self, data: np.ndarray) -> "ParamVector":
        return ParamVector(self.spec, data)

    def bindings(self, prefix: str) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for i in range(len(self.layout)):
            out[f"{prefix}.W{i}"] = self.weight(i)
            out[f"{prefix}.b{i}"] = self.bias(i)
        return out


# ---------------------------------------------------------------------------
# 3) Loss configuration and optimizer state
# ---------------------------------------------------------------------------
class LossKind(str, Enum):
    VANILLA_SATURATING = "vanilla_saturating"
    VANILLA_NONSATURATING = "vanilla_nonsaturating"
    WGAN_GP = "wgan_gp"


@dataclass(frozen=True)
class GanLossConfig:
    kind: LossKind = LossKind.VANILLA_NONSATURATING
    gp_lambda: float = 10.0
    gp_interpolation_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.gp_lambda < 0:
            raise ValueError(f"gp_lambda must be nonnegative, got {self.gp_lambda}")

    @property
    def is_wgan(self) -> bool:
        return self.kind is LossKind.WGAN_GP


class OptimKind(str, Enum):
    ADAM = "adam"
    RMSPROP = "rmsprop"


@dataclass
class OptimState:
    """Moment buffers and hyperparameters of one optimizer; owned by exactly one client."""

    kind: OptimKind
    learning_rate: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    rho: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        self.kind = OptimKind(self.kind)
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")

    @classmethod
    def adam(cls, size: int, learning_rate: float = 2e-4, beta1: float = 0.5,
             beta2: float = 0.999, eps: float = 1e-8) -> "OptimState":
        return cls(OptimKind.ADAM, learning_rate, np.zeros(size), np.zeros(size),
                   beta1=beta1, beta2=beta2, eps=eps)

    @classmethod
    def rmsprop(cls, size: int, learning_rate: float = 5e-5, rho: float = 0.99,
                eps: float = 1e-8) -> "OptimState":
        return cls(OptimKind.RMSPROP, learning_rate, np.zeros(size), np.zeros(size), rho=rho, eps=eps)


def optimizer_step(state: OptimState, params: ParamVector, grads: ParamVector) -> ParamVector:
    """One Adam (bias-corrected) or RMSprop update; returns new parameters and advances ``state``."""
    g = grads.data
    if g.shape != params.data.shape or state.v.shape != params.data.shape:
        raise ShapeError(
            f"optimizer shapes differ: params {params.data.shape}, grads {g.shape}, state {state.v.shape}"
        )
    if not np.all(np.isfinite(g)):
        raise DivergenceError("Non-finite gradient; local step aborted")

    state.step += 1
    if state.kind is OptimKind.ADAM:
        state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
        state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
        m_hat = state.m / (1.0 - state.beta1 ** state.step)
        v_hat = state.v / (1.0 - state.beta2 ** state.step)
        update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    else:
        state.v = state.rho * state.v + (1.0 - state.rho) * g * g
        update = state.learning_rate * g / (np.sqrt(state.v) + state.eps)
    return params.replace(params.data - update)


# ---------------------------------------------------------------------------
# 4) Graph construction
# ---------------------------------------------------------------------------
class _Layer(NamedTuple):
    weight: int
    weight_t: int
    bias: int


def _declare_params(graph: Graph, spec: MlpSpec, prefix: str) -> List[_Layer]:
    layers = []
    for i, slot in enumerate(spec.layout()):
        w = graph.input(f"{prefix}.W{i}", (slot.rows, slot.cols))
        b = graph.input(f"{prefix}.b{i}", (slot.rows,))
        layers.append(_Layer(w, graph.transpose(w), b))
    return layers


def _activate(graph: Graph, h: int, activation: Activation) -> int:
    if activation is Activation.TANH:
        return graph.tanh(h)
    if activation is Activation.SIGMOID:
        return graph.sigmoid(h)
    if activation is Activation.SOFTPLUS:
        return graph.softplus(h)
    return h


def _standardize(graph: Graph, h: int, width: int) -> int:
    # row means via a constant averaging matrix keeps everything matrix-vector
    averaging = graph.constant(np.full((width, width), 1.0 / width))
    centered = graph.sub(h, graph.matmul(h, averaging))
    variance = graph.matmul(graph.square(centered), averaging)
    return graph.div(centered, graph.sqrt(graph.shift(variance, STANDARDIZE_EPS)))


def _apply_mlp(graph: Graph, spec: MlpSpec, layers: List[_Layer], x: int) -> int:
    h = x
    last = len(layers) - 1
    for i, (layer, slot) in enumerate(zip(layers, spec.layout())):
        h = graph.add(graph.matmul(h, layer.weight_t), layer.bias)
        if i == last:
            h = _activate(graph, h, spec.output_activation)
        else:
            if spec.standardize:
                h = _standardize(graph, h, slot.rows)
            h = _activate(graph, h, spec.activation)
    return h


def _log_prob(graph: Graph, p: int, complement: bool = False, low: float = PROB_MIN) -> int:
    p = graph.clip(p, low, PROB_MAX)
    if complement:
        p = graph.shift(graph.scale(p, -1.0), 1.0)
    return graph.mean(graph.log(p))


@dataclass
class _Program:
    graph: Graph
    output: int
    layers: List[_Layer] = field(default_factory=list)
    grads: Dict[int, int] = field(default_factory=dict)


def _with_gradients(graph: Graph, loss: int, layers: List[_Layer]) -> _Program:
    graph.output = loss
    wrt = [node for layer in layers for node in (layer.weight, layer.bias)]
    return _Program(graph, loss, layers, gradient_nodes(graph, loss, wrt))


def _compile_d_program(cfg: GanLossConfig, d_spec: MlpSpec, batch: int) -> _Program:
    graph = Graph(checked=False)
    dim = d_spec.input_dim
    real = graph.input("real", (batch, dim))
    fake = graph.input("fake", (batch, dim))
    d = _declare_params(graph, d_spec, "d")
    s_real = _apply_mlp(graph, d_spec, d, real)
    s_fake = _apply_mlp(graph, d_spec, d, fake)

    if cfg.is_wgan:
        loss = graph.sub(graph.mean(s_fake), graph.mean(s_real))
        if cfg.gp_lambda > 0:
            eps = graph.input("eps", (batch, dim))
            x_hat = graph.add(graph.mul(eps, real), graph.mul(graph.shift(graph.scale(eps, -1.0), 1.0), fake))
            s_hat = _apply_mlp(graph, d_spec, d, x_hat)
            grad_x = gradient_nodes(graph, graph.sum(s_hat), [x_hat])[x_hat]
            norms = graph.l2norm(grad_x, axis=1)
            penalty = graph.mean(graph.square(graph.shift(norms, -1.0)))
            loss = graph.add(loss, graph.scale(penalty, cfg.gp_lambda))
    else:
        loss = graph.scale(graph.add(_log_prob(graph, s_real), _log_prob(graph, s_fake, complement=True)), -1.0)
    return _with_gradients(graph, loss, d)


def _compile_g_program(cfg: GanLossConfig, g_spec: MlpSpec, d_spec: MlpSpec, batch: int) -> _Program:
    graph = Graph(checked=False)
    z = graph.input("z", (batch, g_spec.input_dim))
    g = _declare_params(graph, g_spec, "g")
    d = _declare_params(graph, d_spec, "d")
    score = _apply_mlp(graph, d_spec, d, _apply_mlp(graph, g_spec, g, z))

    if cfg.kind is LossKind.WGAN_GP:
        loss = graph.scale(graph.mean(score), -1.0)
    elif cfg.kind is LossKind.VANILLA_SATURATING:
        loss = _log_prob(graph, score, complement=True)
    else:
        loss = graph.scale(_log_prob(graph, score, low=NONSAT_PROB_MIN), -1.0)
    return _with_gradients(graph, loss, g)


def _compile_forward(spec: MlpSpec, batch: int) -> _Program:
    graph = Graph(checked=False)
    x = graph.input("x", (batch, spec.input_dim))
    out = _apply_mlp(graph, spec, _declare_params(graph, spec, "p"), x)
    graph.output = out
    return _Program(graph, out)


_local = threading.local()


def _cached(key: Tuple[Any, ...], build: Callable[[], _Program]) -> _Program:
    cache = getattr(_local, "programs", None)
    if cache is None:
        cache = _local.programs = {}
    program = cache.get(key)
    if program is None:
        program = cache[key] = build()
        logger.debug("Compiled %s graph with %d nodes", key[0], len(program.graph))
    return program


def _flat_grads(program: _Program, spec: MlpSpec) -> ParamVector:
    result = grad(program.graph, program.output, program.grads.keys())
    parts = []
    for layer in program.layers:
        parts.append(result[layer.weight].data)
        parts.append(result[layer.bias].data)
    return ParamVector(spec, np.concatenate(parts))


# ---------------------------------------------------------------------------
# 5) Forward passes and losses
# ---------------------------------------------------------------------------
class LossResult(NamedTuple):
    loss: float
    grad: ParamVector


def _check_batch(x: np.ndarray, width: int, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what} must have shape (batch, {width}), got {x.shape}")
    if x.shape[0] == 0:
        raise ShapeError(f"{what} batch is empty")


def _check_head(cfg: GanLossConfig, d_spec: MlpSpec) -> None:
    if d_spec.output_dim != 1:
        raise ShapeError(f"Discriminator must output 1 value per sample, spec outputs {d_spec.output_dim}")
    if cfg.is_wgan and d_spec.output_activation is Activation.SIGMOID:
        raise ValueError("wgan_gp needs an unbounded critic; the discriminator has a sigmoid head")
    if not cfg.is_wgan and d_spec.output_activation is not Activation.SIGMOID:
        raise ValueError(f"{cfg.kind.value} needs a sigmoid discriminator head")


def _mlp_forward(params: ParamVector, spec: MlpSpec, x: ArrayLike, what: str) -> Tensor:
    if params.spec != spec:
        raise ShapeError(f"{what} parameters were built for {params.spec.layer_sizes}, not {spec.layer_sizes}")
    x = _as_array(x)
    _check_batch(x, spec.input_dim, what)
    program = _cached(("forward", spec.structure(), x.shape[0]), lambda: _compile_forward(spec, x.shape[0]))
    return forward(program.graph, {"x": x, **params.bindings("p")})


def gen_forward(g: ParamVector, spec: MlpSpec, z: ArrayLike) -> Tensor:
    """Synthetic samples G(z), shape (batch, data_dim)."""
    return _mlp_forward(g, spec, z, "generator input z")


def disc_forward(d: ParamVector, spec: MlpSpec, x: ArrayLike) -> Tensor:
    """Per-sample probability (sigmoid head) or critic score (identity head), shape (batch, 1)."""
    if spec.output_dim != 1:
        raise ShapeError(f"Discriminator must output 1 value per sample, spec outputs {spec.output_dim}")
    return _mlp_forward(d, spec, x, "discriminator input x")


def interpolation_weights(rng: np.random.Generator, batch: int, dim: int) -> np.ndarray:
    """One U[0,1] coefficient per (real, fake) pair, repeated across the sample's coordinates."""
    return np.repeat(rng.uniform(0.0, 1.0, size=(batch, 1)), dim, axis=1)


def d_loss(cfg: GanLossConfig, d: ParamVector, g: ParamVector, real_batch: ArrayLike,
           z_batch: ArrayLike, rng: Optional[np.random.Generator] = None) -> LossResult:
    """
    Discriminator loss and its exact gradient w.r.t. ``d``.

    vanilla: -mean log D(x) - mean log(1 - D(G(z)))
    wgan_gp: mean D(G(z)) - mean D(x) + lambda * mean (|grad_xhat D(xhat)| - 1)^2

    ``rng`` supplies the interpolation coefficients; it defaults to a fresh
    stream seeded with ``cfg.gp_interpolation_seed``.
    """
    _check_head(cfg, d.spec)
    real = _as_array(real_batch)
    z = _as_array(z_batch)
    _check_batch(real, d.spec.input_dim, "real batch")
    _check_batch(z, g.spec.input_dim, "z batch")
    if real.shape[0] != z.shape[0]:
        raise ShapeError(f"real batch has {real.shape[0]} rows but z batch has {z.shape[0]}")
    if g.spec.output_dim != d.spec.input_dim:
        raise ShapeError(f"generator emits {g.spec.output_dim} dims, discriminator reads {d.spec.input_dim}")

    batch = real.shape[0]
    fake = gen_forward(g, g.spec, z).array
    program = _cached(
        ("d_loss", cfg.kind, cfg.gp_lambda, d.spec.structure(), batch),
        lambda: _compile_d_program(cfg, d.spec, batch),
    )
    bindings: Dict[str, Any] = {"real": real, "fake": fake, **d.bindings("d")}
    if cfg.is_wgan and cfg.gp_lambda > 0:
        rng = rng if rng is not None else np.random.default_rng(cfg.gp_interpolation_seed)
        bindings["eps"] = interpolation_weights(rng, batch, d.spec.input_dim)
    loss = forward(program.graph, bindings, program.output).item()
    return LossResult(loss, _flat_grads(program, d.spec))


def g_loss(cfg: GanLossConfig, d: ParamVector, g: ParamVector, z_batch: ArrayLike) -> LossResult:
    """
    Generator loss and its exact gradient w.r.t. ``g`` only.

    saturating: mean log(1 - D(G(z)));  nonsaturating: -mean log D(G(z));  wgan_gp: -mean D(G(z))
    """
    _check_head(cfg, d.spec)
    z = _as_array(z_batch)
    _check_batch(z, g.spec.input_dim, "z batch")
    if g.spec.output_dim != d.spec.input_dim:
        raise ShapeError(f"generator emits {g.spec.output_dim} dims, discriminator reads {d.spec.input_dim}")

    batch = z.shape[0]
    program = _cached(
        ("g_loss", cfg.kind, g.spec.structure(), d.spec.structure(), batch),
        lambda: _compile_g_program(cfg, g.spec, d.spec, batch),
    )
    bindings = {"z": z, **g.bindings("g"), **d.bindings("d")}
    loss = forward(program.graph, bindings, program.output).item()
    return LossResult(loss, _flat_grads(program, g.spec))


# ---------------------------------------------------------------------------
# 6) FGS1 float files (checkpoints, datasets, sample dumps)
# ---------------------------------------------------------------------------
FGS_MAGIC = b"FGS1"
FGS_VERSION = 1


def write_fgs(path: Union[str, Path], header: Dict[str, Any], array: np.ndarray) -> Path:
    """
    Layout: b"FGS1" | uint32 LE header length | UTF-8 JSON header | float64 LE payload.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(array, dtype="<f8")
    meta = {**header, "version": FGS_VERSION, "shape": list(array.shape)}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(FGS_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(array.tobytes())
    return path


def read_fgs(path: Union[str, Path]) -> Tuple[Dict[str, Any], np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != FGS_MAGIC:
        raise ValueError(f"{path} is not an FGS1 file (magic {raw[:4]!r})")
    (length,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + length].decode("utf-8"))
    if header.get("version") != FGS_VERSION:
        raise ValueError(f"{path}: unsupported FGS version {header.get('version')}")
    shape = tuple(header["shape"])
    payload = np.frombuffer(raw[8 + length:], dtype="<f8")
    if payload.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload holds {payload.size} floats, header shape {shape}")
    return header, payload.reshape(shape).astype(np.float64)


def save_checkpoint(path: Union[str, Path], params: ParamVector, step: int = 0) -> Path:
    header = {"kind": "params", "spec": params.spec.to_dict(), "seed": params.spec.init_seed, "step": int(step)}
    return write_fgs(path, header, params.data)


def load_checkpoint(path: Union[str, Path]) -> Tuple[ParamVector, Dict[str, Any]]:
    header, data = read_fgs(path)
    if header.get("kind") != "params":
        raise ValueError(f"{path} holds '{header.get('kind')}', not parameters")
    return ParamVector(MlpSpec.from_dict(header["spec"]), data), header
