import logging
import time
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mdsgnn.config import (
    HeadAggregation,
    Method,
    PredictionStream,
    PropagationSource,
    RecAblation,
    TrainConfig,
)
from mdsgnn.dualstream import (
    ClassifierParams,
    StreamOutputs,
    classify,
    cross_entropy,
    init_classifier,
    ntxent,
    project,
    total_loss,
)
from mdsgnn.graphdata import IncompleteGraph, StreamTag, seeded_rng
from mdsgnn.numerics import (
    NumericalError,
    SparseMatrix,
    Tape,
    Tensor,
    add,
    dropout,
    glorot_uniform,
    load_arrays,
    matmul,
    relu,
    save_arrays,
    self_loop_normalize,
    softmax_rows,
    spmm,
)
from mdsgnn.propagation import AugmentedGraph, knn_graph, ppr_propagate
from mdsgnn.reconstruction import (
    GAEParams,
    GATLayerParams,
    gat_layer,
    init_gae,
    reconstruct,
    reconstruction_loss,
)

logger = logging.getLogger(__name__)


class Adam:
    """
    Adam with decoupled weight decay.

    :param params: Named parameters to update in place.
    :type params: Mapping[str, Tensor]
    :param lr: Learning rate.
    :type lr: float
    :param weight_decay: Decay factor applied as ``p -= lr * weight_decay * p``
        before the Adam update.
    :type weight_decay: float
    :param undecayed: Names excluded from weight decay.
    :type undecayed: set[str]
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float,
        weight_decay: float = 0.0,
        undecayed: set[str] | None = None,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.undecayed = undecayed or set()
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps = 0
        self.first = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.second = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, grads: Mapping[Tensor, np.ndarray]):
        self.steps += 1
        first_correction = 1.0 - self.beta1**self.steps
        second_correction = 1.0 - self.beta2**self.steps
        for name, param in self.params.items():
            grad = grads.get(param)
            if grad is None:
                grad = np.zeros_like(param.data)
            self.first[name] = self.beta1 * self.first[name] + (1.0 - self.beta1) * grad
            self.second[name] = self.beta2 * self.second[name] + (1.0 - self.beta2) * grad**2
            if self.weight_decay and name not in self.undecayed:
                param.data -= self.lr * self.weight_decay * param.data
            first_hat = self.first[name] / first_correction
            second_hat = self.second[name] / second_correction
            param.data -= self.lr * first_hat / (np.sqrt(second_hat) + self.eps)


@dataclass
class EpochLosses:
    l_ce: float
    l_ce_prime: float
    l_rec: float
    l_cl: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass
class RunMetrics:
    """
    Outcome of one training run.

    :ivar losses: One entry per training epoch.
    :ivar val_accs: Validation accuracy after every epoch.
    :ivar test_accs: Test accuracy after every epoch.
    :ivar best_epoch: Number of epochs taken when validation accuracy peaked
        (0 for the untrained model).
    :ivar best_val_acc: Validation accuracy at ``best_epoch``.
    :ivar test_acc: Test accuracy at ``best_epoch``, never at the last epoch
        unless the two coincide.
    :ivar seconds: Wall-clock duration.
    """

    dataset: str
    seed: int
    method: Method
    losses: list[EpochLosses] = field(default_factory=list)
    val_accs: list[float] = field(default_factory=list)
    test_accs: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = -1.0
    test_acc: float = 0.0
    seconds: float = 0.0


@dataclass
class TrainState:
    """
    Everything that changes while MDS-GNN trains.

    ``augmented`` and ``propagated`` are the kNN graph and propagated features
    cached at the last rebuild epoch.
    """

    gae: GAEParams
    classifier: ClassifierParams
    optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0
    augmented: AugmentedGraph | None = None
    propagated: np.ndarray | None = None

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.gae.named_parameters(), **self.classifier.named_parameters()}


def init_params(
    cfg: TrainConfig, f: int, c: int, rng: np.random.Generator
) -> tuple[GAEParams, ClassifierParams]:
    gae = init_gae(f, cfg.recon(), rng)
    classifier = init_classifier(f, cfg.hidden, c, cfg.proj_dim, rng, use_bias=cfg.use_bias)
    return gae, classifier


def new_state(g: IncompleteGraph, cfg: TrainConfig) -> TrainState:
    gae, classifier = init_params(
        cfg, g.graph.f, g.graph.c, seeded_rng(cfg.seed, StreamTag.PARAM_INIT)
    )
    named = {**gae.named_parameters(), **classifier.named_parameters()}
    optimizer = Adam(
        named,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        undecayed=gae.undecayed() | classifier.undecayed(),
    )
    return TrainState(
        gae=gae,
        classifier=classifier,
        optimizer=optimizer,
        rng=seeded_rng(cfg.seed, StreamTag.TRAINING),
    )


def _bypasses_reconstruction(cfg: TrainConfig) -> bool:
    return cfg.rec_ablation == RecAblation.BYPASS and cfg.mu == 0


def _original_features(
    state: TrainState, g: IncompleteGraph, cfg: TrainConfig, train: bool
) -> tuple[Tensor, Tensor]:
    """
    Input of the original stream and the reconstruction loss that goes with it.
    """
    if _bypasses_reconstruction(cfg):
        return Tensor(g.graph.features), Tensor(0.0)
    x_tilde = reconstruct(g, state.gae, cfg.recon(), state.rng, train)
    if not train:
        return x_tilde, Tensor(0.0)
    return x_tilde, reconstruction_loss(x_tilde, g.graph.features, g.mask, cfg.recon_loss)


def refresh_augmented(state: TrainState, g: IncompleteGraph, cfg: TrainConfig, x_tilde: np.ndarray):
    """
    Rebuild the kNN graph from detached reconstructed features and re-propagate.
    """
    state.augmented = knn_graph(x_tilde, cfg.knn_k)
    reconstructed = cfg.propagation_source == PropagationSource.RECONSTRUCTED
    source = x_tilde if reconstructed else g.graph.features
    state.propagated = ppr_propagate(state.augmented, source, cfg.teleport, cfg.ppr_steps)
    logger.debug(
        "epoch %s: rebuilt augmented graph with %s edges",
        state.epoch,
        state.augmented.knn_adjacency.nnz // 2,
    )


def forward_losses(
    state: TrainState,
    g: IncompleteGraph,
    cfg: TrainConfig,
    train: bool = True,
    refresh: bool = False,
) -> tuple[Tensor, EpochLosses, StreamOutputs]:
    """
    Run both streams and return the combined loss with its components.

    :param refresh: Rebuild the augmented graph from this pass's reconstruction
        before running the augmented stream. It is always rebuilt when no cache exists.
    """
    x_tilde, l_rec = _original_features(state, g, cfg, train)
    if refresh or state.propagated is None:
        refresh_augmented(state, g, cfg, x_tilde.data.copy())

    labels, train_idx = g.graph.labels, g.graph.train_idx
    hidden, probs = classify(x_tilde, state.classifier, state.rng, cfg.classifier_dropout, train)
    hidden_aug, probs_aug = classify(
        Tensor(state.propagated), state.classifier, state.rng, cfg.classifier_dropout, train
    )
    z, z_aug = project(hidden, state.classifier), project(hidden_aug, state.classifier)

    l_ce = cross_entropy(probs, labels, train_idx)
    l_ce_prime = cross_entropy(probs_aug, labels, train_idx)
    l_cl = ntxent(z, z_aug, cfg.temperature, cfg.contrastive_variant)
    loss = total_loss(l_ce, l_ce_prime, l_rec, l_cl, cfg.lam, cfg.mu, cfg.gamma, epoch=state.epoch)

    terms = EpochLosses(
        l_ce=l_ce.item(),
        l_ce_prime=l_ce_prime.item(),
        l_rec=l_rec.item(),
        l_cl=l_cl.item(),
        total=loss.item(),
    )
    outputs = StreamOutputs(
        hidden=hidden, hidden_aug=hidden_aug, probs=probs, probs_aug=probs_aug, z=z, z_aug=z_aug
    )
    return loss, terms, outputs


def train_step(
    state: TrainState, g: IncompleteGraph, cfg: TrainConfig
) -> tuple[TrainState, EpochLosses]:
    """
    One full-graph epoch: forward both streams, backpropagate the combined loss and
    take one Adam step. The augmented graph is rebuilt when the epoch counter is a
    multiple of ``cfg.knn_period``.
    """
    refresh = state.epoch % cfg.knn_period == 0
    with Tape() as tape:
        loss, terms, _ = forward_losses(state, g, cfg, train=True, refresh=refresh)
    grads = tape.backward(loss, state.optimizer.params.values())
    state.optimizer.step(grads)
    state.epoch += 1
    logger.debug("epoch %s: %s", state.epoch, terms)
    return state, terms


def predict_proba(state: TrainState, g: IncompleteGraph, cfg: TrainConfig) -> np.ndarray:
    x_tilde, _ = _original_features(state, g, cfg, train=False)
    if cfg.prediction_stream == PredictionStream.ORIGINAL:
        return classify(x_tilde, state.classifier)[1].data

    if state.propagated is None:
        refresh_augmented(state, g, cfg, x_tilde.data.copy())
    probs_aug = classify(Tensor(state.propagated), state.classifier)[1].data
    if cfg.prediction_stream == PredictionStream.AUGMENTED:
        return probs_aug
    return (classify(x_tilde, state.classifier)[1].data + probs_aug) / 2.0


def predict(state: TrainState, g: IncompleteGraph, cfg: TrainConfig) -> np.ndarray:
    """
    Class of every node, ties going to the smallest class index.
    """
    return np.argmax(predict_proba(state, g, cfg), axis=1)


def accuracy(predictions: np.ndarray, labels: np.ndarray, idx: np.ndarray) -> float:
    if len(idx) == 0:
        return 0.0
    return float(np.mean(predictions[idx] == labels[idx]))


def snapshot_parameters(params: Mapping[str, Tensor]) -> Callable[[], None]:
    """
    Copy the values of ``params`` and return a callable writing them back in place.
    """
    saved = {name: p.data.copy() for name, p in params.items()}

    def restore():
        for name, p in params.items():
            p.data[...] = saved[name]

    return restore


def snapshot_state(state: TrainState) -> Callable[[], None]:
    restore = snapshot_parameters(state.named_parameters())
    epoch, augmented, propagated = state.epoch, state.augmented, state.propagated

    def restore_state():
        restore()
        state.epoch, state.augmented, state.propagated = epoch, augmented, propagated

    return restore_state


def _train_loop(
    g: IncompleteGraph,
    cfg: TrainConfig,
    method: Method,
    step: Callable[[], EpochLosses],
    predictor: Callable[[], np.ndarray],
    snapshot: Callable[[], Callable[[], None]],
) -> RunMetrics:
    """
    Train for ``cfg.epochs`` epochs and leave the model as it was at the epoch of
    best validation accuracy.

    :param snapshot: Captures the current model and returns a callable that puts
        it back.
    """
    metrics = RunMetrics(dataset=g.graph.name, seed=cfg.seed, method=method)
    restore_best: Callable[[], None] | None = None
    labels = g.graph.labels
    started = time.perf_counter()

    def evaluate() -> tuple[float, float]:
        predictions = predictor()
        return accuracy(predictions, labels, g.graph.val_idx), accuracy(
            predictions, labels, g.graph.test_idx
        )

    if cfg.epochs == 0:
        metrics.best_val_acc, metrics.test_acc = evaluate()

    for epoch in range(1, cfg.epochs + 1):
        try:
            losses = step()
        except NumericalError as exc:
            exc.epoch = epoch
            logger.exception("%s run aborted at epoch %s (%s)", method, epoch, exc.component)
            raise
        val_acc, test_acc = evaluate()
        metrics.losses.append(losses)
        metrics.val_accs.append(val_acc)
        metrics.test_accs.append(test_acc)
        if val_acc > metrics.best_val_acc:
            metrics.best_epoch = epoch
            metrics.best_val_acc = val_acc
            metrics.test_acc = test_acc
            restore_best = snapshot()

    if restore_best is not None:
        restore_best()
    metrics.seconds = time.perf_counter() - started
    logger.info(
        "%s on %s (seed %s): best val %.4f at epoch %s, test %.4f",
        method,
        metrics.dataset,
        metrics.seed,
        metrics.best_val_acc,
        metrics.best_epoch,
        metrics.test_acc,
    )
    return metrics


def fit(g: IncompleteGraph, cfg: TrainConfig) -> tuple[TrainState, RunMetrics]:
    """
    Train MDS-GNN for ``cfg.epochs`` epochs, selecting the reported test accuracy
    at the epoch of best validation accuracy. The returned state holds the
    parameters and propagated features of that epoch.
    """
    state = new_state(g, cfg)

    def step() -> EpochLosses:
        return train_step(state, g, cfg)[1]

    metrics = _train_loop(
        g, cfg, Method.MDSGNN, step, lambda: predict(state, g, cfg), lambda: snapshot_state(state)
    )
    return state, metrics


@dataclass
class GCNParams:
    hidden: Tensor
    out: Tensor
    hidden_bias: Tensor | None = None
    out_bias: Tensor | None = None

    def named_parameters(self) -> dict[str, Tensor]:
        named = {"gcn.hidden": self.hidden, "gcn.out": self.out}
        if self.hidden_bias is not None:
            named["gcn.hidden_bias"] = self.hidden_bias
        if self.out_bias is not None:
            named["gcn.out_bias"] = self.out_bias
        return named


@dataclass
class GATClassifierParams:
    hidden: GATLayerParams
    out: GATLayerParams

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            **self.hidden.named_parameters("gat.hidden"),
            **self.out.named_parameters("gat.out"),
        }


BaselineParams = GCNParams | GATClassifierParams


def init_gcn(f: int, hidden: int, c: int, rng: np.random.Generator, use_bias: bool) -> GCNParams:
    return GCNParams(
        hidden=Tensor.parameter(glorot_uniform(rng, f, hidden)),
        out=Tensor.parameter(glorot_uniform(rng, hidden, c)),
        hidden_bias=Tensor.parameter(np.zeros((1, hidden))) if use_bias else None,
        out_bias=Tensor.parameter(np.zeros((1, c))) if use_bias else None,
    )


def init_gat_classifier(
    f: int, hidden: int, c: int, heads: int, rng: np.random.Generator
) -> GATClassifierParams:
    return GATClassifierParams(
        hidden=GATLayerParams(
            weights=[Tensor.parameter(glorot_uniform(rng, f, hidden)) for _ in range(heads)],
            attention=[Tensor.parameter(glorot_uniform(rng, 2 * hidden, 1)) for _ in range(heads)],
            aggregation=HeadAggregation.CONCAT,
        ),
        out=GATLayerParams(
            weights=[Tensor.parameter(glorot_uniform(rng, hidden * heads, c))],
            attention=[Tensor.parameter(glorot_uniform(rng, 2 * c, 1))],
            aggregation=HeadAggregation.AVERAGE,
        ),
    )


def gcn_forward(
    p: GCNParams,
    x: Tensor,
    propagator: SparseMatrix,
    cfg: TrainConfig,
    rng: np.random.Generator,
    train: bool,
) -> Tensor:
    """
    ``softmax(P relu(P X U0) U1)`` with ``P`` the normalised adjacency plus self-loops.
    """
    hidden = spmm(propagator, matmul(dropout(x, cfg.classifier_dropout, rng, train), p.hidden))
    if p.hidden_bias is not None:
        hidden = add(hidden, p.hidden_bias)
    hidden = dropout(relu(hidden), cfg.classifier_dropout, rng, train)
    logits = spmm(propagator, matmul(hidden, p.out))
    if p.out_bias is not None:
        logits = add(logits, p.out_bias)
    return softmax_rows(logits)


def gat_forward(
    p: GATClassifierParams,
    x: Tensor,
    adj: SparseMatrix,
    cfg: TrainConfig,
    rng: np.random.Generator,
    train: bool,
) -> Tensor:
    recon_cfg = cfg.recon()
    hidden = gat_layer(x, adj, p.hidden, recon_cfg, rng, train)
    return softmax_rows(gat_layer(hidden, adj, p.out, recon_cfg, rng, train))


@dataclass
class BaselineState:
    method: Method
    params: BaselineParams
    optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0


def _baseline_probs(
    state: BaselineState,
    g: IncompleteGraph,
    cfg: TrainConfig,
    propagator: SparseMatrix,
    train: bool,
) -> Tensor:
    x = Tensor(g.graph.features)
    if isinstance(state.params, GCNParams):
        return gcn_forward(state.params, x, propagator, cfg, state.rng, train)
    return gat_forward(state.params, x, g.graph.adjacency, cfg, state.rng, train)


def fit_baseline(
    g: IncompleteGraph, cfg: TrainConfig, method: Method
) -> tuple[BaselineState, RunMetrics]:
    """
    Train a classic GNN on the incomplete graph with missing rows left at zero,
    using the optimizer, splits and seed streams of MDS-GNN.
    """
    init_rng = seeded_rng(cfg.seed, StreamTag.PARAM_INIT)
    if method == Method.GCN:
        params: BaselineParams = init_gcn(g.graph.f, cfg.hidden, g.graph.c, init_rng, cfg.use_bias)
    elif method == Method.GAT:
        params = init_gat_classifier(g.graph.f, cfg.hidden, g.graph.c, cfg.heads, init_rng)
    else:
        raise ValueError(f"{method} is not a baseline")

    named = params.named_parameters()
    state = BaselineState(
        method=method,
        params=params,
        optimizer=Adam(
            named,
            lr=cfg.lr,
            weight_decay=cfg.weight_decay,
            undecayed={name for name in named if name.endswith("bias")},
        ),
        rng=seeded_rng(cfg.seed, StreamTag.TRAINING),
    )
    propagator = self_loop_normalize(g.graph.adjacency)
    labels, train_idx = g.graph.labels, g.graph.train_idx

    def step() -> EpochLosses:
        with Tape() as tape:
            probs = _baseline_probs(state, g, cfg, propagator, True)
            l_ce = cross_entropy(probs, labels, train_idx)
        if not np.isfinite(l_ce.item()):
            raise NumericalError("l_ce is not finite", component="l_ce", epoch=state.epoch)
        state.optimizer.step(tape.backward(l_ce, state.optimizer.params.values()))
        state.epoch += 1
        value = l_ce.item()
        return EpochLosses(l_ce=value, l_ce_prime=0.0, l_rec=0.0, l_cl=0.0, total=value)

    def predictor() -> np.ndarray:
        return np.argmax(_baseline_probs(state, g, cfg, propagator, False).data, axis=1)

    def snapshot() -> Callable[[], None]:
        restore = snapshot_parameters(named)
        epoch = state.epoch

        def restore_state():
            restore()
            state.epoch = epoch

        return restore_state

    return state, _train_loop(g, cfg, method, step, predictor, snapshot)


def gcn_baseline(g: IncompleteGraph, cfg: TrainConfig) -> RunMetrics:
    return fit_baseline(g, cfg, Method.GCN)[1]


def gat_baseline(g: IncompleteGraph, cfg: TrainConfig) -> RunMetrics:
    return fit_baseline(g, cfg, Method.GAT)[1]


PROPAGATED_KEY = "cache.propagated"
EPOCH_KEY = "state.epoch"


def save_checkpoint(state: TrainState, path: str | Path):
    arrays = {name: p.data for name, p in state.named_parameters().items()}
    arrays[EPOCH_KEY] = np.array([float(state.epoch)])
    if state.propagated is not None:
        arrays[PROPAGATED_KEY] = state.propagated
    save_arrays(path, arrays)


def load_checkpoint(path: str | Path, g: IncompleteGraph, cfg: TrainConfig) -> TrainState:
    """
    Rebuild a TrainState for ``g`` and ``cfg`` and overwrite its parameters with the
    saved ones. Optimizer moments start from zero.

    :raises ValueError: If a parameter is missing or has the wrong shape.
    """
    arrays = load_arrays(path)
    state = new_state(g, cfg)
    for name, param in state.named_parameters().items():
        if name not in arrays:
            raise ValueError(f"checkpoint {path} has no entry {name!r}")
        if arrays[name].shape != param.shape:
            raise ValueError(
                f"checkpoint entry {name!r} has shape {arrays[name].shape}, expected {param.shape}"
            )
        param.data[...] = arrays[name]
    state.epoch = int(arrays[EPOCH_KEY][0]) if EPOCH_KEY in arrays else 0
    state.propagated = arrays.get(PROPAGATED_KEY)
    return state
