import dataclasses
import enum
from dataclasses import dataclass, fields
from enum import StrEnum
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """
    Raised when a configuration file cannot be turned into a valid TrainConfig.

    :param message: Description of the problem.
    :type message: str
    :param keys: Offending keys, in file order.
    :type keys: list[str]
    """

    def __init__(self, message: str, keys: list[str] | None = None):
        super().__init__(message)
        self.keys = keys or []


class ReconLossKind(StrEnum):
    BCE = "bce"
    MSE = "mse"


class EncoderBackbone(StrEnum):
    GAT = "gat"
    GCN = "gcn"


class HeadAggregation(StrEnum):
    CONCAT = "concat"
    AVERAGE = "average"


class PredictionStream(StrEnum):
    # Y from the reconstructed features
    ORIGINAL = "original"
    # Y' from the propagated features
    AUGMENTED = "augmented"
    # elementwise mean of both
    MEAN = "mean"


class InferenceFill(StrEnum):
    ZERO = "zero"
    LEARNED = "learned"


class PropagationSource(StrEnum):
    RAW = "raw"
    RECONSTRUCTED = "reconstructed"


class ContrastiveVariant(StrEnum):
    # cross-view negatives only, positives excluded from the denominators
    LITERAL = "literal"
    # positives plus intra- and cross-view negatives in the denominators
    CANONICAL = "canonical"


class RecAblation(StrEnum):
    ZERO_WEIGHT = "zero_weight"
    BYPASS = "bypass"


class Method(StrEnum):
    MDSGNN = "mdsgnn"
    GCN = "gcn"
    GAT = "gat"


class DroppedLoss(StrEnum):
    REC = "rec"
    CL = "cl"
    BOTH = "both"

    @property
    def tag(self) -> str:
        return f"w/o {self.value}"


class SweepAxis(StrEnum):
    FEATURE_MISSING = "feature_missing"
    EDGE_MISSING = "edge_missing"
    MISSING_RATE = "missing_rate"
    K = "k"
    L = "L"
    BACKBONE = "backbone"


def _check_fraction(name: str, value: float, upper_open: bool = False):
    if value < 0 or value > 1 or (upper_open and value >= 1):
        bound = "[0, 1)" if upper_open else "[0, 1]"
        raise ValueError(f"{name} should be in {bound}, got {value}")


def _check_positive(name: str, value: float):
    if value <= 0:
        raise ValueError(f"{name} should be positive, got {value}")


@dataclass(frozen=True)
class ReconConfig:
    """
    Settings of the feature reconstruction module.

    :param replace_rate: Probability p_r that a missing row is replaced by a random
        known row at train time instead of the learnable fill vector.
    :type replace_rate: float
    :param input_dropout: Dropout applied to the input of every encoder layer.
    :type input_dropout: float
    :param attention_dropout: Dropout applied to attention coefficients.
    :type attention_dropout: float
    :param hidden: Per-head width of the encoder and width of the decoder hidden layer.
    :type hidden: int
    :param layers: Number of encoder layers.
    :type layers: int
    :param heads: Attention heads per GAT layer.
    :type heads: int
    :param loss: Reconstruction loss kind.
    :type loss: ReconLossKind
    :param backbone: Encoder layer type.
    :type backbone: EncoderBackbone
    :param inference_fill: What missing rows hold when ``train`` is false.
    :type inference_fill: InferenceFill
    :param use_bias: Whether the decoder carries bias vectors.
    :type use_bias: bool
    """

    replace_rate: float = 0.05
    input_dropout: float = 0.3
    attention_dropout: float = 0.3
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    loss: ReconLossKind = ReconLossKind.BCE
    backbone: EncoderBackbone = EncoderBackbone.GAT
    inference_fill: InferenceFill = InferenceFill.ZERO
    use_bias: bool = False

    def __post_init__(self):
        _check_fraction("replace_rate", self.replace_rate)
        _check_fraction("input_dropout", self.input_dropout, upper_open=True)
        _check_fraction("attention_dropout", self.attention_dropout, upper_open=True)
        for name in ("hidden", "layers", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} should be at least 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class TrainConfig:
    """
    Every hyperparameter of a training run.

    Defaults sit inside the usual search grids. Temperature and teleport
    probability are normally left at 0.2 and 0.01.

    :param lr: Adam learning rate.
    :param weight_decay: Decoupled weight decay applied to weight matrices.
    :param epochs: Number of full-graph training steps.
    :param hidden: Hidden width d1 of the encoder, decoder and classifier.
    :param proj_dim: Projection width d2.
    :param replace_rate: Replacement probability p_r.
    :param gat_dropout: Input feature dropout inside GAT layers.
    :param attention_dropout: Dropout on attention coefficients.
    :param heads: Attention heads per GAT layer.
    :param gat_layers: Number of encoder layers.
    :param knn_k: Neighbour count k of the augmented graph.
    :param ppr_steps: Power iteration steps L.
    :param teleport: Teleport probability alpha.
    :param temperature: Temperature tau of the contrastive loss.
    :param lam: Weight of the augmented-stream cross-entropy.
    :param mu: Weight of the reconstruction loss.
    :param gamma: Weight of the contrastive loss.
    :param recon_loss: Reconstruction loss kind.
    :param knn_period: Rebuild the augmented graph every this many epochs.
    :param prediction_stream: Stream whose output is used for predictions.
    :param seed: Master seed of the run.
    :param backbone: Encoder layer type.
    :param inference_fill: Fill used for missing rows at inference.
    :param propagation_source: Which features are propagated over the kNN graph.
    :param contrastive_variant: Denominator layout of the contrastive loss.
    :param use_bias: Add bias vectors to decoder, classifier and baselines.
    :param rec_ablation: How dropping the reconstruction loss is realised.
    :param classifier_dropout: Dropout on the classifier input and in baselines.
    """

    lr: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 500
    hidden: int = 64
    proj_dim: int = 64
    replace_rate: float = 0.05
    gat_dropout: float = 0.3
    attention_dropout: float = 0.3
    heads: int = 4
    gat_layers: int = 2
    knn_k: int = 10
    ppr_steps: int = 10
    teleport: float = 0.01
    temperature: float = 0.2
    lam: float = 0.5
    mu: float = 0.5
    gamma: float = 1.0
    recon_loss: ReconLossKind = ReconLossKind.BCE
    knn_period: int = 5
    prediction_stream: PredictionStream = PredictionStream.ORIGINAL
    seed: int = 0
    backbone: EncoderBackbone = EncoderBackbone.GAT
    inference_fill: InferenceFill = InferenceFill.ZERO
    propagation_source: PropagationSource = PropagationSource.RAW
    contrastive_variant: ContrastiveVariant = ContrastiveVariant.LITERAL
    use_bias: bool = False
    rec_ablation: RecAblation = RecAblation.ZERO_WEIGHT
    classifier_dropout: float = 0.0

    def __post_init__(self):
        _check_positive("lr", self.lr)
        _check_positive("temperature", self.temperature)
        if not 0 < self.teleport <= 1:
            raise ValueError(f"teleport should be in (0, 1], got {self.teleport}")
        for name in ("weight_decay", "lam", "mu", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} should not be negative, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError(f"epochs should not be negative, got {self.epochs}")
        positive = ("hidden", "proj_dim", "heads", "gat_layers", "knn_k", "ppr_steps", "knn_period")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} should be at least 1, got {getattr(self, name)}")
        _check_fraction("replace_rate", self.replace_rate)
        _check_fraction("gat_dropout", self.gat_dropout, upper_open=True)
        _check_fraction("attention_dropout", self.attention_dropout, upper_open=True)
        _check_fraction("classifier_dropout", self.classifier_dropout, upper_open=True)

    def recon(self) -> ReconConfig:
        return ReconConfig(
            replace_rate=self.replace_rate,
            input_dropout=self.gat_dropout,
            attention_dropout=self.attention_dropout,
            hidden=self.hidden,
            layers=self.gat_layers,
            heads=self.heads,
            loss=self.recon_loss,
            backbone=self.backbone,
            inference_fill=self.inference_fill,
            use_bias=self.use_bias,
        )

    def replace(self, **changes: Any) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Corruption:
    """
    Missing rates applied to a clean graph before training.

    :param feature_missing: Fraction of nodes whose whole feature row is removed.
    :type feature_missing: float
    :param edge_missing: Fraction of undirected edges removed.
    :type edge_missing: float
    """

    feature_missing: float = 0.5
    edge_missing: float = 0.5

    def __post_init__(self):
        _check_fraction("feature_missing", self.feature_missing)
        _check_fraction("edge_missing", self.edge_missing)


def _render_value(value: Any) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(kind: type, raw: str) -> Any:
    if kind is bool:
        lowered = raw.lower()
        if lowered not in ("true", "false"):
            raise ValueError(f"expected true or false, got {raw!r}")
        return lowered == "true"
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if isinstance(kind, type) and issubclass(kind, enum.Enum):
        return kind(raw)
    return raw


_FIELD_TYPES: dict[str, type] = {f.name: f.type for f in fields(TrainConfig)}


def config_items(cfg: TrainConfig) -> dict[str, str]:
    return {item.name: _render_value(getattr(cfg, item.name)) for item in fields(cfg)}


def render_config(cfg: TrainConfig) -> str:
    lines = ["# mdsgnn training configuration"]
    lines.extend(f"{key}={value}" for key, value in config_items(cfg).items())
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """
    Parse flat ``key=value`` text into a TrainConfig.

    Keys absent from the text keep their value from ``base`` (the defaults when
    ``base`` is omitted).

    :raises ConfigError: Listing every unknown key, malformed line and
        unparsable value, or the validation failure of the resulting config.
    """
    values: dict[str, Any] = {}
    problems: list[str] = []
    bad_keys: list[str] = []
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            problems.append(f"line {number}: expected key=value")
            bad_keys.append(key)
            continue
        if key not in _FIELD_TYPES:
            problems.append(f"line {number}: unknown key {key!r}")
            bad_keys.append(key)
            continue
        try:
            values[key] = _parse_value(_FIELD_TYPES[key], raw)
        except ValueError as exc:
            problems.append(f"line {number}: bad value for {key!r}: {exc}")
            bad_keys.append(key)

    if problems:
        raise ConfigError("; ".join(problems), keys=bad_keys)

    try:
        return dataclasses.replace(base or TrainConfig(), **values)
    except ValueError as exc:
        raise ConfigError(str(exc), keys=list(values)) from exc


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base=base)


@dataclass(frozen=True)
class GradCheckSettings:
    """
    Tolerances of the finite-difference suite.
    """

    eps: float = 1e-5
    tolerance: float = 1e-4
    samples: int = 25
    nodes: int = 12
    seed: int = 0
