import logging
import math
from dataclasses import dataclass

import numpy as np

from mdsgnn.config import ContrastiveVariant
from mdsgnn.numerics import (
    NumericalError,
    ShapeError,
    Tensor,
    add,
    cosine_similarity_matrix,
    dropout,
    exp,
    glorot_uniform,
    log,
    matmul,
    mul,
    pick,
    relu,
    row_sum,
    scale,
    softmax_rows,
    sub,
    sum_all,
    take_rows,
    transpose,
)

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12


@dataclass
class ClassifierParams:
    """
    Classifier and projection weights shared by both streams.

    :param hidden: W0, f×d1.
    :param out: W1, d1×c.
    :param projection: W2, d1×d2.
    :param hidden_bias: Optional 1×d1 bias.
    :param out_bias: Optional 1×c bias.
    """

    hidden: Tensor
    out: Tensor
    projection: Tensor
    hidden_bias: Tensor | None = None
    out_bias: Tensor | None = None

    def __post_init__(self):
        if self.out.rows != self.hidden.cols or self.projection.rows != self.hidden.cols:
            raise ValueError("classifier and projection should both read the d1-wide hidden layer")

    def named_parameters(self) -> dict[str, Tensor]:
        named = {
            "classifier.hidden": self.hidden,
            "classifier.out": self.out,
            "classifier.projection": self.projection,
        }
        if self.hidden_bias is not None:
            named["classifier.hidden_bias"] = self.hidden_bias
        if self.out_bias is not None:
            named["classifier.out_bias"] = self.out_bias
        return named

    def undecayed(self) -> set[str]:
        return {name for name in self.named_parameters() if name.endswith("bias")}


def init_classifier(
    f: int,
    hidden: int,
    classes: int,
    proj_dim: int,
    rng: np.random.Generator,
    use_bias: bool = False,
) -> ClassifierParams:
    return ClassifierParams(
        hidden=Tensor.parameter(glorot_uniform(rng, f, hidden)),
        out=Tensor.parameter(glorot_uniform(rng, hidden, classes)),
        projection=Tensor.parameter(glorot_uniform(rng, hidden, proj_dim)),
        hidden_bias=Tensor.parameter(np.zeros((1, hidden))) if use_bias else None,
        out_bias=Tensor.parameter(np.zeros((1, classes))) if use_bias else None,
    )


@dataclass
class StreamOutputs:
    """
    Hidden representations, predictions and projections of both streams.
    """

    hidden: Tensor
    hidden_aug: Tensor
    probs: Tensor
    probs_aug: Tensor
    z: Tensor
    z_aug: Tensor


def classify(
    x_repr: Tensor,
    p: ClassifierParams,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
    train: bool = False,
) -> tuple[Tensor, Tensor]:
    """
    ``H = ReLU(X W0)`` and ``Y = softmax(H W1)``, row-wise.
    """
    if x_repr.cols != p.hidden.rows:
        raise ShapeError(f"classifier expects width {p.hidden.rows}, got {x_repr.cols}")
    x = dropout(x_repr, dropout_rate, rng, train) if rng is not None else x_repr
    pre = matmul(x, p.hidden)
    if p.hidden_bias is not None:
        pre = add(pre, p.hidden_bias)
    hidden = relu(pre)
    logits = matmul(hidden, p.out)
    if p.out_bias is not None:
        logits = add(logits, p.out_bias)
    return hidden, softmax_rows(logits)


def cross_entropy(probs: Tensor, labels: np.ndarray, idx: np.ndarray) -> Tensor:
    """
    Mean negative log-probability of the true class over ``idx``.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) == 0:
        raise ValueError("cross entropy needs at least one labelled node")
    chosen = pick(take_rows(probs, idx), np.asarray(labels)[idx])
    return scale(sum_all(log(chosen, floor=PROBABILITY_FLOOR)), -1.0 / len(idx))


def project(hidden: Tensor, p: ClassifierParams) -> Tensor:
    if hidden.cols != p.projection.rows:
        raise ShapeError(f"projection expects width {p.projection.rows}, got {hidden.cols}")
    return matmul(hidden, p.projection)


def ntxent(
    z: Tensor,
    z_aug: Tensor,
    tau: float,
    variant: ContrastiveVariant = ContrastiveVariant.LITERAL,
) -> Tensor:
    """
    Node-level contrastive loss between matching rows of two views.

    With ``phi(a, b) = exp(cos(a, b) / tau)`` the literal form averages, over
    nodes and both directions,
    ``-log(phi(z_i, z'_i) / sum_{k != i} phi(z_i, z'_k))``: denominators hold
    cross-view negatives only. The canonical form adds the positive and the
    intra-view negatives to each denominator.

    :raises ValueError: If fewer than two rows are given or ``tau <= 0``.
    """
    n = z.rows
    if z.shape != z_aug.shape:
        raise ShapeError(f"views have shapes {z.shape} and {z_aug.shape}")
    if n < 2:
        raise ValueError("contrastive loss needs at least two nodes")
    if tau <= 0:
        raise ValueError(f"temperature should be positive, got {tau}")

    identity = Tensor(np.eye(n))
    off_diagonal = Tensor(1.0 - np.eye(n))

    cross = scale(cosine_similarity_matrix(z, z_aug), 1.0 / tau)
    positives = row_sum(mul(cross, identity))
    cross_phi = mul(exp(cross), off_diagonal)
    anchor_den = row_sum(cross_phi)
    target_den = row_sum(transpose(cross_phi))

    if variant == ContrastiveVariant.CANONICAL:
        positive_phi = exp(positives)
        intra = mul(exp(scale(cosine_similarity_matrix(z), 1.0 / tau)), off_diagonal)
        intra_aug = mul(exp(scale(cosine_similarity_matrix(z_aug), 1.0 / tau)), off_diagonal)
        anchor_den = add(add(anchor_den, positive_phi), row_sum(intra))
        target_den = add(add(target_den, positive_phi), row_sum(intra_aug))

    terms = sub(scale(positives, 2.0), add(log(anchor_den), log(target_den)))
    return scale(sum_all(terms), -1.0 / (2 * n))


def total_loss(
    l_ce: Tensor,
    l_ce_prime: Tensor,
    l_rec: Tensor,
    l_cl: Tensor,
    lam: float,
    mu: float,
    gamma: float,
    epoch: int | None = None,
) -> Tensor:
    """
    ``L = L_ce + lam * L'_ce + mu * L_rec + gamma * L_cl``.

    :raises NumericalError: Naming the first non-finite component.
    """
    components = {"l_ce": l_ce, "l_ce_prime": l_ce_prime, "l_rec": l_rec, "l_cl": l_cl}
    for name, value in components.items():
        if not math.isfinite(value.item()):
            raise NumericalError(f"{name} is not finite", component=name, epoch=epoch)
    total = l_ce
    for value, weight in ((l_ce_prime, lam), (l_rec, mu), (l_cl, gamma)):
        total = add(total, scale(value, weight))
    return total
