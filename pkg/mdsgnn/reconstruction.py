import logging
from dataclasses import dataclass

import numpy as np

from mdsgnn.config import (
    EncoderBackbone,
    HeadAggregation,
    InferenceFill,
    ReconConfig,
    ReconLossKind,
)
from mdsgnn.graphdata import IncompleteGraph, MaskMatrix
from mdsgnn.numerics import (
    ShapeError,
    SparseMatrix,
    Tensor,
    add,
    bce_with_logits,
    concat_cols,
    dropout,
    elu,
    glorot_uniform,
    leaky_relu,
    matmul,
    mul,
    relu,
    scale,
    segment_softmax,
    segment_sum,
    self_loop_normalize,
    spmm,
    sub,
    sum_all,
    take_rows,
)

logger = logging.getLogger(__name__)

ATTENTION_SLOPE = 0.2


@dataclass
class GATLayerParams:
    """
    One multi-head graph attention layer.

    :param weights: Per-head linear maps, stored input-major (d_in×d_out) so that
        ``h @ W`` transforms every row.
    :type weights: list[Tensor]
    :param attention: Per-head attention vectors of length 2·d_out; the first half
        scores the receiving node, the second half the neighbour.
    :type attention: list[Tensor]
    :param aggregation: Concatenate heads (with ELU) or average them (without).
    :type aggregation: HeadAggregation
    """

    weights: list[Tensor]
    attention: list[Tensor]
    aggregation: HeadAggregation = HeadAggregation.CONCAT

    def __post_init__(self):
        if not self.weights:
            raise ValueError("GAT layer needs at least one head")
        if len(self.weights) != len(self.attention):
            raise ValueError("every head needs one weight matrix and one attention vector")
        for weight, vector in zip(self.weights, self.attention):
            if vector.shape != (2 * weight.cols, 1):
                raise ValueError(
                    f"attention vector should have shape {(2 * weight.cols, 1)}, got {vector.shape}"
                )

    @property
    def heads(self) -> int:
        return len(self.weights)

    @property
    def out_width(self) -> int:
        width = self.weights[0].cols
        return width * self.heads if self.aggregation == HeadAggregation.CONCAT else width

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        named = {}
        for head, (weight, vector) in enumerate(zip(self.weights, self.attention)):
            named[f"{prefix}.head{head}.weight"] = weight
            named[f"{prefix}.head{head}.attention"] = vector
        return named


@dataclass
class GCNLayerParams:
    """
    One graph convolution layer used as an alternative encoder backbone.

    :param weight: Linear map, d_in×d_out.
    :type weight: Tensor
    :param activate: Apply ReLU to the output (all but the last layer).
    :type activate: bool
    """

    weight: Tensor
    activate: bool = True

    @property
    def out_width(self) -> int:
        return self.weight.cols

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight}


EncoderLayer = GATLayerParams | GCNLayerParams


@dataclass
class GAEParams:
    """
    Parameters of the feature reconstruction autoencoder.

    :param encoder: Ordered encoder layers.
    :param decoder_hidden: First decoder map, latent×d1.
    :param decoder_out: Second decoder map, d1×f.
    :param fill: Learnable fill vector x_omega, stored as a 1×f row.
    :param decoder_hidden_bias: Optional 1×d1 bias.
    :param decoder_out_bias: Optional 1×f bias.
    """

    encoder: list[EncoderLayer]
    decoder_hidden: Tensor
    decoder_out: Tensor
    fill: Tensor
    decoder_hidden_bias: Tensor | None = None
    decoder_out_bias: Tensor | None = None

    def __post_init__(self):
        if self.decoder_out.cols != self.fill.cols:
            raise ValueError(
                f"decoder output width {self.decoder_out.cols} should equal "
                f"feature width {self.fill.cols}"
            )

    def named_parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for position, layer in enumerate(self.encoder):
            named.update(layer.named_parameters(f"gae.encoder{position}"))
        named["gae.decoder_hidden"] = self.decoder_hidden
        named["gae.decoder_out"] = self.decoder_out
        if self.decoder_hidden_bias is not None:
            named["gae.decoder_hidden_bias"] = self.decoder_hidden_bias
        if self.decoder_out_bias is not None:
            named["gae.decoder_out_bias"] = self.decoder_out_bias
        named["gae.fill"] = self.fill
        return named

    def undecayed(self) -> set[str]:
        return {name for name in self.named_parameters() if name.endswith(("fill", "bias"))}


def init_gae(f: int, cfg: ReconConfig, rng: np.random.Generator) -> GAEParams:
    """
    Glorot-uniform encoder and decoder weights; zero fill vector and biases.
    """
    encoder: list[EncoderLayer] = []
    width = f
    for position in range(cfg.layers):
        last = position == cfg.layers - 1
        if cfg.backbone == EncoderBackbone.GAT:
            heads = cfg.heads
            layer = GATLayerParams(
                weights=[
                    Tensor.parameter(glorot_uniform(rng, width, cfg.hidden)) for _ in range(heads)
                ],
                attention=[
                    Tensor.parameter(glorot_uniform(rng, 2 * cfg.hidden, 1)) for _ in range(heads)
                ],
                aggregation=HeadAggregation.AVERAGE if last else HeadAggregation.CONCAT,
            )
        else:
            layer = GCNLayerParams(
                weight=Tensor.parameter(glorot_uniform(rng, width, cfg.hidden)),
                activate=not last,
            )
        encoder.append(layer)
        width = layer.out_width

    return GAEParams(
        encoder=encoder,
        decoder_hidden=Tensor.parameter(glorot_uniform(rng, width, cfg.hidden)),
        decoder_out=Tensor.parameter(glorot_uniform(rng, cfg.hidden, f)),
        fill=Tensor.parameter(np.zeros((1, f))),
        decoder_hidden_bias=Tensor.parameter(np.zeros((1, cfg.hidden))) if cfg.use_bias else None,
        decoder_out_bias=Tensor.parameter(np.zeros((1, f))) if cfg.use_bias else None,
    )


def fill_missing(
    x_masked: np.ndarray,
    mask: MaskMatrix,
    fill: Tensor,
    replace_rate: float,
    rng: np.random.Generator,
    train: bool,
    inference_fill: InferenceFill = InferenceFill.ZERO,
) -> Tensor:
    """
    Give every node with missing features an input row.

    At train time each missing row independently becomes, with probability
    ``replace_rate``, a copy of a uniformly drawn known row (a constant), and
    otherwise the learnable ``fill`` vector. At inference missing rows stay zero,
    or take ``fill`` when ``inference_fill`` is ``learned``. Known rows are never
    touched.

    :raises ValueError: If replacement is enabled, some node is missing and no
        node is known.
    """
    x_masked = np.asarray(x_masked, dtype=np.float64)
    if fill.cols != x_masked.shape[1]:
        raise ShapeError(f"fill vector width {fill.cols} != feature width {x_masked.shape[1]}")
    missing = mask.missing_idx
    if len(missing) == 0:
        return Tensor(x_masked)

    if train:
        known = mask.known_idx
        if replace_rate > 0 and len(known) == 0:
            raise ValueError("cannot replace missing rows: no node has known features")
        replaced = rng.random(len(missing)) < replace_rate
        base = x_masked.copy()
        if replaced.any():
            donors = rng.choice(known, size=int(replaced.sum()))
            base[missing[replaced]] = x_masked[donors]
        filled = missing[~replaced]
    elif inference_fill == InferenceFill.LEARNED:
        base = x_masked
        filled = missing
    else:
        return Tensor(x_masked)

    selector = np.zeros((x_masked.shape[0], 1))
    selector[filled] = 1.0
    return add(Tensor(base), matmul(Tensor(selector), fill))


def _attention_edges(adj: SparseMatrix) -> tuple[np.ndarray, np.ndarray]:
    return adj.with_self_loops().edge_index()


def gat_layer(
    h: Tensor,
    adj: SparseMatrix,
    p: GATLayerParams,
    cfg: ReconConfig,
    rng: np.random.Generator,
    train: bool,
) -> Tensor:
    """
    Multi-head graph attention over ``N(i) + {i}``.

    Per head, ``e_ij = LeakyReLU(a . [W h_i || W h_j])`` is softmax-normalised over
    the neighbourhood of ``i`` and used to weight ``W h_j``. Concatenating layers
    apply ELU per head; averaging layers return the plain head mean.
    """
    if h.cols != p.weights[0].rows:
        raise ShapeError(f"GAT layer expects width {p.weights[0].rows}, got {h.cols}")
    n = h.rows
    targets, sources = _attention_edges(adj)
    x = dropout(h, cfg.input_dropout, rng, train)

    outputs = []
    for weight, vector in zip(p.weights, p.attention):
        width = weight.cols
        wh = matmul(x, weight)
        receiver = matmul(wh, take_rows(vector, np.arange(width)))
        sender = matmul(wh, take_rows(vector, np.arange(width, 2 * width)))
        logits = leaky_relu(
            add(take_rows(receiver, targets), take_rows(sender, sources)), ATTENTION_SLOPE
        )
        coefficients = dropout(
            segment_softmax(logits, targets, n), cfg.attention_dropout, rng, train
        )
        head = segment_sum(mul(take_rows(wh, sources), coefficients), targets, n)
        outputs.append(head)

    if p.aggregation == HeadAggregation.CONCAT:
        return concat_cols([elu(head) for head in outputs])

    total = outputs[0]
    for head in outputs[1:]:
        total = add(total, head)
    return scale(total, 1.0 / len(outputs))


def gcn_encoder_layer(
    h: Tensor,
    propagator: SparseMatrix,
    p: GCNLayerParams,
    cfg: ReconConfig,
    rng: np.random.Generator,
    train: bool,
) -> Tensor:
    if h.cols != p.weight.rows:
        raise ShapeError(f"GCN layer expects width {p.weight.rows}, got {h.cols}")
    out = spmm(propagator, matmul(dropout(h, cfg.input_dropout, rng, train), p.weight))
    return relu(out) if p.activate else out


def encode(
    x: Tensor,
    adj: SparseMatrix,
    p: GAEParams,
    cfg: ReconConfig,
    rng: np.random.Generator,
    train: bool,
) -> Tensor:
    h = x
    propagator = None
    for layer in p.encoder:
        if isinstance(layer, GATLayerParams):
            h = gat_layer(h, adj, layer, cfg, rng, train)
        else:
            if propagator is None:
                propagator = self_loop_normalize(adj)
            h = gcn_encoder_layer(h, propagator, layer, cfg, rng, train)
    return h


def decode(latent: Tensor, p: GAEParams) -> Tensor:
    hidden = matmul(latent, p.decoder_hidden)
    if p.decoder_hidden_bias is not None:
        hidden = add(hidden, p.decoder_hidden_bias)
    out = matmul(relu(hidden), p.decoder_out)
    if p.decoder_out_bias is not None:
        out = add(out, p.decoder_out_bias)
    return out


def reconstruct(
    g: IncompleteGraph,
    p: GAEParams,
    cfg: ReconConfig,
    rng: np.random.Generator,
    train: bool,
) -> Tensor:
    """
    Fill, encode and decode the observed graph into reconstruction logits, n×f.
    """
    x = fill_missing(
        g.graph.features,
        g.mask,
        p.fill,
        cfg.replace_rate,
        rng,
        train,
        inference_fill=cfg.inference_fill,
    )
    return decode(encode(x, g.graph.adjacency, p, cfg, rng, train), p)


def reconstruction_loss(
    x_tilde: Tensor,
    x_prime: np.ndarray,
    mask: MaskMatrix,
    kind: ReconLossKind = ReconLossKind.BCE,
) -> Tensor:
    """
    Reconstruction error averaged over nodes with known features only.

    ``bce`` treats ``x_tilde`` as logits and ``x_prime`` as targets and sums the
    binary cross-entropy over feature columns; ``mse`` sums squared differences.
    """
    x_prime = np.asarray(x_prime, dtype=np.float64)
    if x_tilde.shape != x_prime.shape:
        raise ShapeError(f"reconstruction {x_tilde.shape} vs target {x_prime.shape}")
    known = mask.known_idx
    if len(known) == 0:
        raise ValueError("reconstruction loss needs at least one node with known features")

    rows = take_rows(x_tilde, known)
    if kind == ReconLossKind.BCE:
        per_entry = bce_with_logits(rows, x_prime[known])
    else:
        diff = sub(rows, Tensor(x_prime[known]))
        per_entry = mul(diff, diff)
    return scale(sum_all(per_entry), 1.0 / len(known))

