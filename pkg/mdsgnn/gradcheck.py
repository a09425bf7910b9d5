import logging
import time
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from mdsgnn.config import (
    ContrastiveVariant,
    GradCheckSettings,
    HeadAggregation,
    ReconConfig,
    TrainConfig,
)
from mdsgnn.dualstream import classify, cross_entropy, init_classifier, ntxent, project
from mdsgnn.graphdata import IncompleteGraph, corrupt, make_sbm_graph
from mdsgnn.numerics import (
    GradCheckReport,
    NumericalError,
    SparseMatrix,
    Tensor,
    glorot_uniform,
    grad_check,
    mul,
    self_loop_normalize,
    sum_all,
)
from mdsgnn.propagation import knn_graph, ppr_propagate
from mdsgnn.reconstruction import (
    GATLayerParams,
    gat_layer,
    init_gae,
    reconstruct,
    reconstruction_loss,
)
from mdsgnn.training import forward_losses, gcn_forward, init_gcn, new_state

logger = logging.getLogger(__name__)

# Small widths keep every finite-difference check cheap; no dropout or replacement so each
# evaluation is deterministic.
SUITE_CONFIG = TrainConfig(
    hidden=4,
    proj_dim=3,
    heads=2,
    gat_layers=2,
    knn_k=3,
    ppr_steps=3,
    gat_dropout=0.0,
    attention_dropout=0.0,
    replace_rate=0.0,
    classifier_dropout=0.0,
    epochs=1,
)

Check = Callable[[GradCheckSettings], GradCheckReport]


@dataclass
class SuiteResult:
    """
    Largest relative error per component of the gradient suite.

    :ivar errors: Component name to max relative error, in run order.
    :ivar tolerance: Errors at or above it fail.
    :ivar seconds: Wall-clock duration of the whole suite.
    """

    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def failed(self) -> list[str]:
        return [name for name, error in self.errors.items() if not error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed


def _named(params: dict[str, Tensor]) -> list[Tensor]:
    for name, param in params.items():
        param.name = name
    return list(params.values())


def _weighted_sum(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.normal(size=out.shape))
    return lambda value: sum_all(mul(value, weights))


def _suite_graph(settings: GradCheckSettings) -> IncompleteGraph:
    clean = make_sbm_graph(
        n=settings.nodes,
        num_classes=3,
        p_in=0.6,
        p_out=0.15,
        f=6,
        seed=settings.seed,
        on_prob=0.6,
        off_prob=0.1,
        train_per_class=2,
        val_per_class=1,
    )
    return corrupt(clean, feature_missing=0.25, edge_missing=0.25, seed=settings.seed)


def check_gat_layer(settings: GradCheckSettings) -> GradCheckReport:
    """
    Weighted sum of a two-head concatenating attention layer on a 3-node path.
    """
    rng = np.random.default_rng(settings.seed)
    adj = SparseMatrix.from_edges(3, np.array([[0, 1], [1, 2]]))
    h = Tensor.parameter(rng.normal(size=(3, 4)))
    layer = GATLayerParams(
        weights=[Tensor.parameter(glorot_uniform(rng, 4, 3)) for _ in range(2)],
        attention=[Tensor.parameter(glorot_uniform(rng, 6, 1)) for _ in range(2)],
        aggregation=HeadAggregation.CONCAT,
    )
    cfg = ReconConfig(input_dropout=0.0, attention_dropout=0.0, hidden=3, heads=2)
    objective = _weighted_sum(Tensor(np.zeros((3, 6))), rng)
    params = _named({"h": h, **layer.named_parameters("gat")})

    def fn() -> Tensor:
        return objective(gat_layer(h, adj, layer, cfg, rng, train=False))

    return grad_check(fn, params, settings.eps, settings.samples, rng)


def check_gae(settings: GradCheckSettings) -> GradCheckReport:
    """
    Reconstruction loss through fill vector, encoder and decoder.
    """
    g = _suite_graph(settings)
    cfg = SUITE_CONFIG.recon()
    rng = np.random.default_rng(settings.seed)
    p = init_gae(g.graph.f, cfg, rng)
    p.fill.data[:] = rng.normal(scale=0.1, size=p.fill.shape)

    def fn() -> Tensor:
        x_tilde = reconstruct(g, p, cfg, rng, train=True)
        return reconstruction_loss(x_tilde, g.graph.features, g.mask, cfg.loss)

    return grad_check(fn, _named(p.named_parameters()), settings.eps, settings.samples, rng)


def check_classifier(settings: GradCheckSettings) -> GradCheckReport:
    g = _suite_graph(settings)
    rng = np.random.default_rng(settings.seed)
    p = init_classifier(g.graph.f, 4, g.graph.c, 3, rng, use_bias=True)
    p.hidden_bias.data[:] = 0.1
    x = Tensor(g.graph.features)

    def fn() -> Tensor:
        return cross_entropy(classify(x, p)[1], g.graph.labels, g.graph.train_idx)

    named = p.named_parameters()
    named.pop("classifier.projection")
    params = _named(named)
    return grad_check(fn, params, settings.eps, settings.samples, rng)


def check_projection(settings: GradCheckSettings) -> GradCheckReport:
    """
    Contrastive loss of both streams with respect to the projection only.
    """
    g = _suite_graph(settings)
    rng = np.random.default_rng(settings.seed)
    p = init_classifier(g.graph.f, 4, g.graph.c, 3, rng)
    x = Tensor(g.graph.features)
    x_aug = Tensor(g.graph.features + rng.normal(scale=0.2, size=g.graph.features.shape))

    def fn() -> Tensor:
        hidden = classify(x, p)[0]
        hidden_aug = classify(x_aug, p)[0]
        return ntxent(project(hidden, p), project(hidden_aug, p), SUITE_CONFIG.temperature)

    return grad_check(fn, _named({"projection": p.projection}), settings.eps, None, rng)


def check_ntxent(settings: GradCheckSettings) -> GradCheckReport:
    """
    Both contrastive variants on random 4×3 embeddings.
    """
    rng = np.random.default_rng(settings.seed)
    z = Tensor.parameter(rng.normal(size=(4, 3)), name="z")
    z_aug = Tensor.parameter(rng.normal(size=(4, 3)), name="z_aug")
    worst = GradCheckReport(max_error=0.0, coordinates=0)
    for variant in ContrastiveVariant:
        report = grad_check(
            lambda variant=variant: ntxent(z, z_aug, SUITE_CONFIG.temperature, variant),
            [z, z_aug],
            settings.eps,
        )
        worst.coordinates += report.coordinates
        worst.max_error = max(worst.max_error, report.max_error)
        worst.worst.update({f"{variant}.{name}": error for name, error in report.worst.items()})
    return worst


def check_combined(settings: GradCheckSettings) -> GradCheckReport:
    """
    Full training objective of one step with the augmented graph cached.
    """
    g = _suite_graph(settings)
    cfg = SUITE_CONFIG.replace(seed=settings.seed)
    state = new_state(g, cfg)
    state.gae.fill.data[:] = state.rng.normal(scale=0.1, size=state.gae.fill.shape)
    state.augmented = knn_graph(g.graph.features, cfg.knn_k)
    state.propagated = ppr_propagate(state.augmented, g.graph.features, cfg.teleport, cfg.ppr_steps)

    def fn() -> Tensor:
        return forward_losses(state, g, cfg, train=True, refresh=False)[0]

    rng = np.random.default_rng(settings.seed)
    return grad_check(fn, _named(state.named_parameters()), settings.eps, settings.samples, rng)


def check_gcn_baseline(settings: GradCheckSettings) -> GradCheckReport:
    g = _suite_graph(settings)
    cfg = SUITE_CONFIG.replace(use_bias=True)
    rng = np.random.default_rng(settings.seed)
    p = init_gcn(g.graph.f, cfg.hidden, g.graph.c, rng, use_bias=True)
    p.hidden_bias.data[:] = 0.1
    propagator = self_loop_normalize(g.graph.adjacency)
    x = Tensor(g.graph.features)

    def fn() -> Tensor:
        probs = gcn_forward(p, x, propagator, cfg, rng, train=False)
        return cross_entropy(probs, g.graph.labels, g.graph.train_idx)

    return grad_check(fn, _named(p.named_parameters()), settings.eps, settings.samples, rng)


CHECKS: dict[str, Check] = {
    "gat_layer": check_gat_layer,
    "gae": check_gae,
    "classifier": check_classifier,
    "projection": check_projection,
    "ntxent": check_ntxent,
    "combined": check_combined,
    "gcn_baseline": check_gcn_baseline,
}


def run_suite(
    settings: GradCheckSettings | None = None, components: list[str] | None = None
) -> SuiteResult:
    """
    Run the finite-difference checks and collect the max relative error of each.

    :param components: Subset of :data:`CHECKS` to run; all when omitted.
    :raises ValueError: If a requested component does not exist.
    :raises NumericalError: If a check evaluates to a non-finite value.
    """
    settings = settings or GradCheckSettings()
    names = components or list(CHECKS)
    unknown = [name for name in names if name not in CHECKS]
    if unknown:
        raise ValueError(f"unknown gradient check components: {', '.join(unknown)}")

    result = SuiteResult(tolerance=settings.tolerance)
    started = time.perf_counter()
    for name in names:
        report = CHECKS[name](settings)
        result.errors[name] = report.max_error
        logger.info(
            "%s: max relative error %.3e over %s coordinates",
            name,
            report.max_error,
            report.coordinates,
        )
    result.seconds = time.perf_counter() - started

    if result.failed:
        logger.error("gradient check failed for %s", ", ".join(result.failed))
    return result


def require_passing(result: SuiteResult):
    """
    :raises NumericalError: Naming the first failing component.
    """
    if result.failed:
        name = result.failed[0]
        raise NumericalError(
            f"{name} gradient error {result.errors[name]:.3e} >= {result.tolerance:g}",
            component=name,
        )
