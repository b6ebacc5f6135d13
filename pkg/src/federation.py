#!/usr/bin/env python3
# -----------------------------------------------------------
"""
Federated GAN training.

Every client keeps a local discriminator and generator. Each round:

1) the server broadcasts G_server, every client overwrites its generator with it,
2) each client runs K alternating D/G steps on its own data (clients run in parallel),
3) clients upload only (G_i, l_G_i); discriminators never leave the client,
4) after warmup the server flags outlying losses and decays their weights,
5) G_server <- sum_i (w_i / sum w) G_i, reduced in client id order.

Usage:
    result = run_training(cfg, sink=writer.write, evaluator=evaluate)
"""

import concurrent.futures
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from config import RunConfig
from detection import DetectionState, detect_outliers, normalized_weights, update_weights
from errors import DivergenceError, NonFiniteError, ShapeError
from gan_models import (GanLossConfig, OptimState, ParamVector, d_loss, disc_forward, g_loss, gen_forward,
                        optimizer_step)
from logger_setup import LoggerSetup
from poisoning import (Dataset, DatasetKind, TriggerSpec, make_gaussian_ring, make_tiny_images,
                       poison_dataset)

# ---------------------------------------------------------------------------
# 1) Logger Setup
# ---------------------------------------------------------------------------
logger = LoggerSetup.setup_logger("Federation")

DIVERGED_LOSS = 1e9

# independent random streams per client
STREAMS = {"batches": 0, "z": 1, "gp": 2, "data": 3, "poison": 4}


def derive_rng(seed: int, client_id: int, stream: str) -> np.random.Generator:
    """Dedicated generator for one (client, purpose) pair; independent of execution order."""
    return np.random.default_rng([seed, client_id, STREAMS[stream]])


# ---------------------------------------------------------------------------
# 2) Domain types
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class ClientState:
    """
    One participant. Mutated only by client_update running on its own worker.
    ``is_malicious`` is ground truth for evaluation; the server path never reads it.
    """

    id: int
    dataset: Dataset
    d_params: ParamVector
    g_params: ParamVector
    d_optim: OptimState
    g_optim: OptimState
    loss_cfg: GanLossConfig
    seed: int
    batch_size: int
    is_malicious: bool = False
    report_loss: str = "mean"
    d_steps: int = 1
    anchor_wgan_loss: bool = True
    batch_rng: np.random.Generator = field(init=False, repr=False)
    z_rng: np.random.Generator = field(init=False, repr=False)
    gp_rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.report_loss not in ("mean", "last"):
            raise ValueError(f"report_loss must be 'mean' or 'last', got {self.report_loss!r}")
        if self.d_steps < 1:
            raise ValueError(f"d_steps must be >= 1, got {self.d_steps}")
        self.batch_rng = derive_rng(self.seed, self.id, "batches")
        self.z_rng = derive_rng(self.seed, self.id, "z")
        self.gp_rng = derive_rng(self.seed, self.id, "gp")


@dataclass(frozen=True, eq=False)
class ClientUpload:
    """What crosses the client/server boundary: generator parameters and scalar losses."""

    client_id: int
    g_params: ParamVector
    loss: float
    d_loss: float
    diverged: bool = False


@dataclass
class ServerState:
    g_server: ParamVector
    detection: DetectionState
    t: int = 0


@dataclass
class RoundRecord:
    t: int
    losses: List[Optional[float]]
    detected: List[int]
    weights_raw: List[float]
    weights_norm: List[float]
    diverged: List[int]
    d_losses: List[Optional[float]]
    counters: List[int]
    wall_time: float = 0.0
    metrics: Optional[Dict[str, Any]] = None

    def to_json(self) -> Dict[str, Any]:
        """Key order is fixed; wall time stays out so replays are byte-identical."""
        out: Dict[str, Any] = {
            "t": self.t,
            "losses": self.losses,
            "detected": self.detected,
            "weights_raw": self.weights_raw,
            "weights_norm": self.weights_norm,
            "diverged": self.diverged,
            "d_losses": self.d_losses,
            "counters": self.counters,
        }
        if self.metrics is not None:
            out["metrics"] = self.metrics
        return out


@dataclass
class TrainingResult:
    records: List[RoundRecord]
    server: ServerState
    clients: List[ClientState]


def _finite_or_none(x: float) -> Optional[float]:
    return float(x) if math.isfinite(x) else None


# ---------------------------------------------------------------------------
# 3) Procedure A: local update
# ---------------------------------------------------------------------------
def _batch_indices(perm: np.ndarray, step: int, batch_size: int) -> np.ndarray:
    return perm.take(np.arange(step * batch_size, (step + 1) * batch_size), mode="wrap")


class LocalRound(NamedTuple):
    """Per-step losses of one client_update call; nothing is kept across rounds."""

    g_losses: List[float]
    d_losses: List[float]


def local_steps(client: ClientState, k_steps: int) -> LocalRound:
    """
    ``k_steps`` alternating updates, ``client.d_steps`` D steps before each G
    step, with a fresh minibatch and fresh z for every D step. The batch order
    is one permutation per call.

    On WGAN-GP the critic's scores carry an arbitrary per-client offset, so with
    ``anchor_wgan_loss`` the recorded generator loss is mean D(x) - mean D(G(z)),
    measured on the last real batch. Gradients are unaffected.
    """
    samples = client.dataset.samples
    z_dim = client.g_params.spec.input_dim
    perm = client.batch_rng.permutation(samples.shape[0])
    anchored = client.anchor_wgan_loss and client.loss_cfg.is_wgan
    out = LocalRound([], [])
    for k in range(k_steps):
        for j in range(client.d_steps):
            real = samples[_batch_indices(perm, k * client.d_steps + j, client.batch_size)]
            z_d = client.z_rng.standard_normal((client.batch_size, z_dim))
            d_res = d_loss(client.loss_cfg, client.d_params, client.g_params, real, z_d, rng=client.gp_rng)
            client.d_params = optimizer_step(client.d_optim, client.d_params, d_res.grad)

        z_g = client.z_rng.standard_normal((client.batch_size, z_dim))
        g_res = g_loss(client.loss_cfg, client.d_params, client.g_params, z_g)
        client.g_params = optimizer_step(client.g_optim, client.g_params, g_res.grad)

        g_value = g_res.loss
        if anchored:
            g_value += float(np.mean(disc_forward(client.d_params, client.d_params.spec, real).array))
        out.d_losses.append(d_res.loss)
        out.g_losses.append(g_value)
    return out


def client_update(client: ClientState, g_server: ParamVector, k_steps: int) -> ClientUpload:
    """
    Overwrite the local generator with ``g_server`` and run ``k_steps`` local steps.

    The reported loss is the mean (or last, per ``client.report_loss``) generator
    loss of this round. Non-finite values mark the upload as diverged instead of raising.
    """
    if k_steps < 1:
        raise ValueError(f"client_update needs K >= 1 local steps, got {k_steps}")
    if g_server.spec.structure() != client.g_params.spec.structure():
        raise ShapeError(f"client {client.id} generator layout differs from the server's")

    client.g_params = g_server
    try:
        g_round, d_round = local_steps(client, k_steps)
    except (DivergenceError, NonFiniteError) as e:
        logger.warning("Client %d diverged: %s", client.id, e)
        return ClientUpload(client.id, client.g_params, math.nan, math.nan, diverged=True)

    if client.report_loss == "last":
        loss, d_value = g_round[-1], d_round[-1]
    else:
        loss, d_value = math.fsum(g_round) / len(g_round), math.fsum(d_round) / len(d_round)
    diverged = not (math.isfinite(loss) and np.all(np.isfinite(client.g_params.data)))
    if diverged:
        logger.warning("Client %d produced a non-finite generator loss", client.id)
    return ClientUpload(client.id, client.g_params, loss, d_value, diverged)


# ---------------------------------------------------------------------------
# 4) Procedure B: server aggregation
# ---------------------------------------------------------------------------
def aggregate(params: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Normalized weighted average, summed in the given (client id) order."""
    if not params:
        raise ValueError("aggregate needs at least one parameter vector")
    if len(params) != len(weights):
        raise ValueError(f"{len(params)} parameter vectors but {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise ValueError(f"aggregation weights must be nonnegative, got {list(weights)}")
    reference = params[0].spec.structure()
    for i, p in enumerate(params):
        if p.spec.structure() != reference:
            raise ShapeError(f"parameter vector {i} has layout {p.spec.layer_sizes}, expected {params[0].spec.layer_sizes}")
    norm = normalized_weights(weights)
    acc = np.zeros_like(params[0].data)
    for p, w in zip(params, norm):
        acc = acc + w * p.data
    return params[0].replace(acc)


# ---------------------------------------------------------------------------
# 5) Setup: datasets, clients, server
# ---------------------------------------------------------------------------
def make_trigger(cfg: RunConfig) -> TriggerSpec:
    size = cfg.trigger.size
    if cfg.data.kind is DatasetKind.TINY_IMAGES:
        return TriggerSpec.image_patch(size, (cfg.data.image_size, cfg.data.image_size), cfg.trigger.seed)
    return TriggerSpec.marker(2, size, cfg.trigger.seed, cfg.trigger.marker_value)


def make_dataset(cfg: RunConfig, n: int, seed: int) -> Dataset:
    if cfg.data.kind is DatasetKind.TINY_IMAGES:
        return make_tiny_images(cfg.data.image_size, n, seed)
    return make_gaussian_ring(cfg.data.n_modes, cfg.data.radius, cfg.data.sigma, n, seed, cfg.data.marker_dims)


def _data_seed(cfg: RunConfig, client_id: int) -> int:
    return int(derive_rng(cfg.data.seed, client_id, "data").integers(2**31))


def reference_dataset(cfg: RunConfig) -> Dataset:
    """Clean held-out samples from the shared distribution, used as the metrics' real set."""
    seed = int(np.random.default_rng([cfg.data.seed, 2**16]).integers(2**31))
    return make_dataset(cfg, cfg.data.reference_size, seed)


def build_clients(cfg: RunConfig, g_init: ParamVector) -> List[ClientState]:
    trigger = make_trigger(cfg) if cfg.training.malicious_ids else None
    clients = []
    for i in range(cfg.training.n_clients):
        dataset = make_dataset(cfg, cfg.data.n_per_client, _data_seed(cfg, i))
        malicious = i in cfg.training.malicious_ids
        if malicious:
            poison_seed = int(derive_rng(cfg.data.seed, i, "poison").integers(2**31))
            dataset = poison_dataset(dataset, trigger, cfg.trigger.poison_fraction, poison_seed)
            logger.info("Client %d is malicious (%.0f%% of samples triggered)", i, 100 * dataset.poisoned_fraction)
        d_init = ParamVector.init(cfg.discriminator_spec(i))
        clients.append(ClientState(
            id=i,
            dataset=dataset,
            d_params=d_init,
            g_params=g_init,
            d_optim=cfg.optimizer(d_init.spec.n_params, cfg.training.d_lr),
            g_optim=cfg.optimizer(g_init.spec.n_params, cfg.training.g_lr),
            loss_cfg=cfg.loss_config,
            seed=cfg.training.seed,
            batch_size=cfg.training.batch_size,
            is_malicious=malicious,
            report_loss=cfg.training.report_loss,
            d_steps=cfg.training.d_steps,
            anchor_wgan_loss=cfg.training.anchor_wgan_loss,
        ))
    return clients


def sample_generator(g: ParamVector, n: int, seed: Union[int, Sequence[int]]) -> np.ndarray:
    z = np.random.default_rng(seed).standard_normal((n, g.spec.input_dim))
    return gen_forward(g, g.spec, z).array


# ---------------------------------------------------------------------------
# 6) Training loop
# ---------------------------------------------------------------------------
class FederatedTrainer:
    """
    Runs the round loop for one configuration. Client updates fan out over a
    thread pool; the aggregation is the barrier.
    """

    def __init__(self, cfg: RunConfig,
                 sink: Optional[Callable[[RoundRecord], None]] = None,
                 evaluator: Optional[Callable[[int, ParamVector], Optional[Dict[str, Any]]]] = None):
        self.cfg = cfg
        self.sink = sink
        self.evaluator = evaluator
        self.logger = LoggerSetup.setup_logger(self.__class__.__name__)
        g_init = ParamVector.init(cfg.generator_spec())
        self.clients = build_clients(cfg, g_init)
        det = cfg.detection
        self.server = ServerState(
            g_init,
            DetectionState.initial(cfg.training.n_clients, det.warmup, det.decay, det.decay_mode),
        )

    def _collect(self, executor: Optional[concurrent.futures.Executor]) -> List[ClientUpload]:
        k = self.cfg.training.local_steps
        g_server = self.server.g_server
        if executor is None:
            return [client_update(c, g_server, k) for c in self.clients]
        uploads: Dict[int, ClientUpload] = {}
        future_map: Dict[concurrent.futures.Future, int] = {
            executor.submit(client_update, c, g_server, k): c.id for c in self.clients
        }
        for fut in concurrent.futures.as_completed(future_map):
            client_id = future_map[fut]
            uploads[client_id] = fut.result()
            self.logger.debug("Client %d finished round %d", client_id, self.server.t)
        return [uploads[i] for i in sorted(uploads)]

    def _detect(self, t: int, uploads: List[ClientUpload]) -> List[int]:
        state = self.server.detection
        if not self.cfg.detection.enabled or not state.active(t):
            return []
        losses = [DIVERGED_LOSS if u.diverged else u.loss for u in uploads]
        flagged = detect_outliers(losses, self.cfg.detection.forest(t), state.n_clients)
        self.server.detection = update_weights(state, flagged)
        if flagged:
            self.logger.info("Round %d: flagged clients %s", t, sorted(flagged))
        return sorted(flagged)

    def step(self, t: int, executor: Optional[concurrent.futures.Executor] = None) -> RoundRecord:
        started = time.perf_counter()
        self.server.t = t
        uploads = self._collect(executor)
        detected = self._detect(t, uploads)

        raw = list(self.server.detection.w)
        effective = [0.0 if u.diverged else w for u, w in zip(uploads, raw)]
        diverged = [u.client_id for u in uploads if u.diverged]
        if math.fsum(effective) > 0:
            self.server.g_server = aggregate([u.g_params for u in uploads], effective)
            norm = normalized_weights(effective)
        else:
            self.logger.warning("Round %d: every client diverged, keeping the previous global generator", t)
            norm = normalized_weights(raw)

        record = RoundRecord(
            t=t,
            losses=[_finite_or_none(u.loss) for u in uploads],
            detected=detected,
            weights_raw=raw,
            weights_norm=norm,
            diverged=diverged,
            d_losses=[_finite_or_none(u.d_loss) for u in uploads],
            counters=list(self.server.detection.c),
        )
        if self.evaluator is not None and self._is_eval_round(t):
            record.metrics = self.evaluator(t, self.server.g_server)
        record.wall_time = time.perf_counter() - started
        self.logger.info(
            "Round %d/%d: losses=%s weights=%s (%.2fs)",
            t + 1, self.cfg.training.rounds,
            ["-" if x is None else "%.4f" % x for x in record.losses],
            ["%.3f" % w for w in norm], record.wall_time,
        )
        return record

    def _is_eval_round(self, t: int) -> bool:
        every = self.cfg.training.eval_every
        return (t + 1) % every == 0 or t == self.cfg.training.rounds - 1

    def run(self) -> TrainingResult:
        records: List[RoundRecord] = []
        workers = self.cfg.training.workers
        executor = concurrent.futures.ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        try:
            for t in range(self.cfg.training.rounds):
                record = self.step(t, executor)
                records.append(record)
                if self.sink is not None:
                    self.sink(record)
        finally:
            if executor is not None:
                executor.shutdown(wait=True)
        return TrainingResult(records, self.server, self.clients)


def run_training(cfg: RunConfig,
                 sink: Optional[Callable[[RoundRecord], None]] = None,
                 evaluator: Optional[Callable[[int, ParamVector], Optional[Dict[str, Any]]]] = None) -> TrainingResult:
    """Train for ``cfg.training.rounds`` rounds, streaming each RoundRecord to ``sink``."""
    return FederatedTrainer(cfg, sink, evaluator).run()
