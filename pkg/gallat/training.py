"""Multi-task training: Demand-task pretraining, then joint OD + Demand training with Adam."""
import copy
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from gallat.autodiff import Node, add, backward, scale, smooth_l1
from gallat.config import TrainConfig
from gallat.ddw_graph import GridSpec, SnapshotGraph
from gallat.errors import DimensionError, InsufficientHistoryError
from gallat.evaluation import split
from gallat.features import FeatureConfig, FeatureScaler
from gallat.model import LAYERS, GallatModel, SnapshotSeries, param_shapes
from gallat.spatial_attention import SEGMENTS
from gallat.transfer_attention import TransferOutput

logger = logging.getLogger(__name__)

PRETRAIN = "pretrain"
JOINT = "train"


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, params: Dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise DimensionError(f"adam:{name}", g.shape, p.shape)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


class ModelState(BaseModel):
    """Everything a checkpoint holds."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: TrainConfig
    features: FeatureConfig
    grid: GridSpec
    scaler: FeatureScaler
    D_max: float
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray]
    adam_v: Dict[str, np.ndarray]
    adam_t: int = 0
    epoch: int = 0
    phase: str = PRETRAIN
    rng_state: Dict[str, Any]

    def model(self) -> GallatModel:
        return GallatModel(self.config, self.features, self.grid, self.scaler, self.D_max, self.params)


class HistoryRow(BaseModel):
    epoch: int
    phase: str
    train_loss: float
    val_loss: float
    seconds: float


class TrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    state: ModelState
    history: List[HistoryRow]
    best_val_loss: float


def loss(pred: TransferOutput, truth_d: np.ndarray, truth_G: np.ndarray,
         eta_d: float, eta_o: float, D_max: float) -> Node:
    """eta_d * SmoothL1(d_norm, d / D_max) + eta_o * SmoothL1(G_hat / D_max, G / D_max)."""
    n = pred.Q.shape[0]
    truth_d = np.asarray(truth_d, dtype=np.float64).reshape(-1, 1)
    truth_G = np.asarray(truth_G, dtype=np.float64)
    if truth_d.shape != (n, 1) or truth_G.shape != (n, n):
        raise DimensionError("loss", truth_d.shape, truth_G.shape, (n, n))
    demand = smooth_l1(pred.d_hat_norm, truth_d / D_max)
    od = smooth_l1(scale(pred.G_hat, 1.0 / D_max), truth_G / D_max)
    return add(scale(demand, eta_d), scale(od, eta_o))


def target_loss(model: GallatModel, series: SnapshotSeries, target: int, eta_d: float, eta_o: float) -> Node:
    g = series[target]
    return loss(model.forward(series, target), g.out_degree(), g.counts, eta_d, eta_o, model.D_max)


def target_gradient(model: GallatModel, series: SnapshotSeries, target: int,
                    eta_d: float, eta_o: float) -> Tuple[float, Dict[str, np.ndarray]]:
    root = target_loss(model, series, target, eta_d, eta_o)
    return root.item(), backward(root, model.params)


def _map(pool: Optional[ThreadPoolExecutor], fn, items):
    return list(pool.map(fn, items)) if pool is not None else [fn(x) for x in items]


def batch_gradient(model: GallatModel, series: SnapshotSeries, targets: Sequence[int], eta_d: float,
                   eta_o: float, pool: Optional[ThreadPoolExecutor] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean loss and mean gradient over ``targets``, reduced in target order."""
    results = _map(pool, lambda t: target_gradient(model, series, t, eta_d, eta_o), targets)
    grads = {name: np.zeros_like(p) for name, p in model.params.items()}
    for _, g in results:
        for name, value in g.items():
            grads[name] += value
    count = float(len(targets))
    return sum(r[0] for r in results) / count, {k: v / count for k, v in grads.items()}


def mean_loss(model: GallatModel, series: SnapshotSeries, targets: Sequence[int], eta_d: float,
              eta_o: float, pool: Optional[ThreadPoolExecutor] = None) -> float:
    if not targets:
        return float("nan")
    values = _map(pool, lambda t: target_loss(model, series, t, eta_d, eta_o).item(), targets)
    return float(sum(values) / len(values))


def compute_d_max(snapshots: Sequence[SnapshotGraph]) -> float:
    """Largest nodal out-demand over ``snapshots`` (1.0 when there is none)."""
    peak = max((int(g.out_degree().max()) for g in snapshots), default=0)
    return float(peak) if peak > 0 else 1.0


def _snapshot_state(model: GallatModel, adam: Adam, epoch: int, phase: str,
                    rng: np.random.Generator) -> ModelState:
    return ModelState(
        config=model.cfg,
        features=model.fcfg,
        grid=model.grid,
        scaler=model.scaler,
        D_max=model.D_max,
        params={k: v.copy() for k, v in model.params.items()},
        adam_m={k: v.copy() for k, v in adam.m.items()},
        adam_v={k: v.copy() for k, v in adam.v.items()},
        adam_t=adam.t,
        epoch=epoch,
        phase=phase,
        rng_state=copy.deepcopy(rng.bit_generator.state),
    )


def train(
    data: Sequence[SnapshotGraph],
    cfg: TrainConfig,
    grid: GridSpec,
    l: int,
    start_dow: int = 0,
) -> TrainResult:
    """Pretrain on the Demand task, then train jointly; keep the best-validation state."""
    fcfg = FeatureConfig(
        node_embed_dim=cfg.node_embed_dim, slot_embed_dim=cfg.slot_embed_dim,
        dow_embed_dim=cfg.dow_embed_dim, l=l, start_dow=start_dow,
    )
    spec = split(len(data), l, cfg.test_days, cfg.val_fraction)
    train_snapshots = data[spec.train.start:spec.train.stop]
    rng = np.random.default_rng(cfg.seed)
    model = GallatModel.initialize(
        cfg, fcfg, grid,
        FeatureScaler.fit(grid.n_rows, grid.n_cols, train_snapshots),
        compute_d_max(train_snapshots),
        rng,
    )
    series = model.series(data)
    train_targets = model.valid_targets(spec.train.start, spec.train.stop)
    val_targets = model.valid_targets(spec.validation.start, spec.validation.stop)
    if not train_targets:
        raise InsufficientHistoryError(
            f"no training target has {model.history_needed} slots of history "
            f"(training span is {len(spec.train)} slots)"
        )
    logger.info(
        f"[Trainer] {len(train_targets)} training and {len(val_targets)} validation targets, "
        f"n={grid.n}, d={fcfg.d}, d_v={fcfg.d_v}, d_e={cfg.d_e}, D_max={model.D_max:g}"
    )
    adam = Adam(model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history: List[HistoryRow] = []
    phases = [(PRETRAIN, cfg.pretrain_epochs, 1.0, 0.0), (JOINT, cfg.epochs, cfg.eta_d, cfg.eta_o)]
    tracked = JOINT if cfg.epochs > 0 else PRETRAIN
    best: Optional[ModelState] = None
    best_val = float("inf")
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for phase, epochs, eta_d, eta_o in phases:
            if epochs == 0:
                continue
            started = time.perf_counter()
            history.append(HistoryRow(
                epoch=0, phase=phase,
                train_loss=mean_loss(model, series, train_targets, eta_d, eta_o, pool),
                val_loss=mean_loss(model, series, val_targets, eta_d, eta_o, pool),
                seconds=time.perf_counter() - started,
            ))
            for epoch in range(1, epochs + 1):
                started = time.perf_counter()
                order = rng.permutation(train_targets)
                total = 0.0
                for k in range(0, len(order), cfg.batch_size):
                    batch = [int(t) for t in order[k:k + cfg.batch_size]]
                    batch_loss, grads = batch_gradient(model, series, batch, eta_d, eta_o, pool)
                    adam.step(grads)
                    total += batch_loss * len(batch)
                val_loss = mean_loss(model, series, val_targets, eta_d, eta_o, pool)
                row = HistoryRow(
                    epoch=epoch, phase=phase, train_loss=total / len(order), val_loss=val_loss,
                    seconds=time.perf_counter() - started,
                )
                history.append(row)
                logger.info(
                    f"[Trainer] {phase} epoch {epoch}/{epochs} train={row.train_loss:.6f} "
                    f"val={row.val_loss:.6f} ({row.seconds:.1f}s)"
                )
                if phase == tracked:
                    score = val_loss if val_targets else row.train_loss
                    if score < best_val or best is None:
                        best_val = score
                        best = _snapshot_state(model, adam, epoch, phase, rng)
    finally:
        if pool is not None:
            pool.shutdown()
    if best is None:
        best = _snapshot_state(model, adam, 0, tracked, rng)
        best_val = mean_loss(model, series, val_targets or train_targets, cfg.eta_d, cfg.eta_o)
    return TrainResult(state=best, history=history, best_val_loss=best_val)


def attention_param_formula(
    d_e: int, d_v: int, d: int, n: int, segments: int = 4, transfer_layer: str = "attention"
) -> int:
    """Closed-form size of the three attention layers.

    With the full four-segment layout and attention transfer this is
    176 d_e^2 + 20 d_e d_v + 2 d d_e + 14 d_e + n.
    """
    w = segments * d_e
    spatial = 2 * d * d_e + 2 * d_e
    temporal = 5 * d_v * w + 10 * w * w
    head = w + n
    transfer = head + (w * w + 2 * w if transfer_layer == "attention" else w * n + n)
    return spatial + temporal + transfer


def quadratic_param_term(d_e: int, segments: int = 4, transfer_layer: str = "attention") -> int:
    """The part of :func:`attention_param_formula` quadratic in d_e."""
    w = segments * d_e
    return 10 * w * w + (w * w if transfer_layer == "attention" else 0)


def count_params(state: ModelState) -> Dict[str, int]:
    """Element counts per layer; embedding tables are reported apart from the attention layers."""
    shapes = param_shapes(state.config, state.features, state.grid.n)
    breakdown = {layer: 0 for layer in ("features",) + LAYERS}
    for name, shape in shapes.items():
        breakdown[name.partition(".")[0]] += int(np.prod(shape))
    counts = {f"{layer}": breakdown[layer] for layer in LAYERS}
    counts["attention_total"] = sum(breakdown[layer] for layer in LAYERS)
    counts["embeddings"] = breakdown["features"]
    counts["total"] = counts["attention_total"] + counts["embeddings"]
    cfg = state.config
    segments = SEGMENTS[cfg.spatial_layer]
    counts["attention_formula"] = attention_param_formula(
        cfg.d_e, state.features.d_v, state.features.d, state.grid.n, segments, cfg.transfer_layer
    )
    counts["quadratic_term"] = quadratic_param_term(cfg.d_e, segments, cfg.transfer_layer)
    return counts


HISTORY_COLUMNS = ["epoch", "phase", "train_loss", "val_loss", "seconds"]
LOSS_COLUMNS = HISTORY_COLUMNS[:-1]


def write_history_csv(path, history: Sequence[HistoryRow]) -> None:
    """Training log; every column except ``seconds`` is reproducible under a fixed seed."""
    rows = [row.model_dump() for row in history]
    pd.DataFrame(rows, columns=HISTORY_COLUMNS).to_csv(path, index=False)


def write_loss_csv(path, history: Sequence[HistoryRow]) -> None:
    """The training log without wall-clock timings; byte-identical across runs with one seed."""
    rows = [row.model_dump(exclude={"seconds"}) for row in history]
    pd.DataFrame(rows, columns=LOSS_COLUMNS).to_csv(path, index=False)
