"""Dense layers, MLPs with (MC) dropout, gradient reversal and checkpoints."""

from __future__ import annotations

import enum
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Mode(enum.Enum):
    DETERMINISTIC = "deterministic"
    STOCHASTIC = "stochastic"


class LinearLayer:
    """``y = x @ weight.T + bias`` with weight of shape (out, in)."""

    def __init__(self, in_dim: int, out_dim: int):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(np.zeros((out_dim, in_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, ad.transpose(self.weight)), self.bias)


_OUTPUT_ACTIVATIONS = ("linear", "relu", "sigmoid")


class Mlp:
    """Stack of linear layers with relu between them.

    ``dropout_positions`` index the layer outputs (after activation) that get
    a dropout mask in stochastic mode.  The last layer's output is passed
    through ``output_activation``.
    """

    def __init__(
        self,
        dims: list[int],
        dropout_rate: float = 0.0,
        dropout_positions: tuple[int, ...] = (),
        output_activation: str = "linear",
        name: str = "mlp",
    ):
        if len(dims) < 2:
            raise ValueError(f"{name}: need at least input and output dims, got {dims}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"{name}: dropout_rate must be in [0, 1), got {dropout_rate}")
        if output_activation not in _OUTPUT_ACTIVATIONS:
            raise ValueError(f"{name}: unknown output activation {output_activation!r}")
        n_layers = len(dims) - 1
        for pos in dropout_positions:
            if not 0 <= pos < n_layers:
                raise ValueError(f"{name}: dropout position {pos} outside 0..{n_layers - 1}")
        self.name = name
        self.dims = list(dims)
        self.layers = [LinearLayer(a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.dropout_rate = float(dropout_rate)
        self.dropout_positions = tuple(dropout_positions)
        self.output_activation = output_activation

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"{self.name}.{i}.weight", layer.weight))
            out.append((f"{self.name}.{i}.bias", layer.bias))
        return out

    def __call__(self, x, mode: Mode = Mode.DETERMINISTIC, rng: np.random.Generator | None = None):
        return mlp_forward(self, x, mode, rng)


def dropout_mask(shape: tuple, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: Bernoulli(1 - rate) / (1 - rate)."""
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def mlp_forward(
    m: Mlp, x, mode: Mode = Mode.DETERMINISTIC, rng: np.random.Generator | None = None
) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != m.input_dim:
        raise ValueError(f"{m.name}: expected input (n, {m.input_dim}), got {x.shape}")
    stochastic = mode is Mode.STOCHASTIC and m.dropout_rate > 0.0
    if stochastic and rng is None:
        raise ValueError(f"{m.name}: stochastic mode needs an rng")
    last = len(m.layers) - 1
    h = x
    for i, layer in enumerate(m.layers):
        h = layer(h)
        if i < last or m.output_activation == "relu":
            h = ad.relu(h)
        elif m.output_activation == "sigmoid":
            h = ad.sigmoid(h)
        if stochastic and i in m.dropout_positions:
            h = ad.dropout_apply(h, dropout_mask(h.shape, m.dropout_rate, rng))
    return h


def init_params(m: Mlp, seed) -> None:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    for layer in m.layers:
        bound = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        layer.weight.data[...] = rng.uniform(-bound, bound, size=(layer.out_dim, layer.in_dim))
        layer.bias.data[...] = 0.0


@dataclass
class GradReverse:
    """Identity forward; multiplies the backward gradient by ``-lambda_``."""

    lambda_: float = 1.0

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError(f"GradReverse lambda must be nonnegative, got {self.lambda_}")

    def __call__(self, x: Tensor) -> Tensor:
        return grl_apply(self, x)


def grl_apply(g: GradReverse, x: Tensor) -> Tensor:
    return ad.grad_reverse(x, g.lambda_)


# ---------------------------------------------------------------------------
# architecture
# ---------------------------------------------------------------------------

FEATURE_DIM = 64


@dataclass
class Models:
    """The six networks of the triple-matching setup."""

    extractor: Mlp
    classifier: Mlp
    disc_feature: Mlp
    disc_prob: Mlp
    disc_cmap: Mlp
    generator: Mlp
    meta: dict = field(default_factory=dict)

    def networks(self) -> list[Mlp]:
        return [
            self.extractor,
            self.classifier,
            self.disc_feature,
            self.disc_prob,
            self.disc_cmap,
            self.generator,
        ]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [p for net in self.networks() for p in net.parameters()]


def build_models(input_dim: int, num_classes: int, dropout_rate: float, seed: int) -> Models:
    """Toy-scale networks: F, C, D_f, D_p, D_c and the map generator G."""
    d = FEATURE_DIM
    models = Models(
        extractor=Mlp([input_dim, 64, d], dropout_rate, (0, 1), "relu", name="F"),
        classifier=Mlp([d, 32, num_classes], dropout_rate, (0,), name="C"),
        disc_feature=Mlp([d, 32, 1], output_activation="sigmoid", name="Df"),
        disc_prob=Mlp([num_classes, 32, 1], output_activation="sigmoid", name="Dp"),
        disc_cmap=Mlp([2 * d, 32, 1], output_activation="sigmoid", name="Dc"),
        generator=Mlp([num_classes + d, 64, d], name="G"),
    )
    seeds = np.random.SeedSequence(seed).spawn(len(models.networks()))
    for net, s in zip(models.networks(), seeds):
        init_params(net, s)
    models.meta = {"input_dim": input_dim, "num_classes": num_classes, "dropout_rate": dropout_rate}
    return models


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "tdmda-checkpoint/1"


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_dict(models: Models, extra: dict | None = None) -> dict:
    params = [
        {"name": name, "shape": list(t.shape), "values": t.data.ravel().tolist()}
        for name, t in models.parameters()
    ]
    return {"format": CHECKPOINT_FORMAT, "meta": models.meta, "extra": extra or {}, "params": params}


def save_checkpoint(path: str, models: Models, extra: dict | None = None) -> None:
    atomic_write_text(path, json.dumps(checkpoint_dict(models, extra), indent=1) + "\n")


def load_checkpoint(path: str) -> tuple[Models, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    meta = doc["meta"]
    models = build_models(meta["input_dim"], meta["num_classes"], meta["dropout_rate"], seed=0)
    models.meta = meta
    named = dict(models.parameters())
    for entry in doc["params"]:
        t = named.pop(entry["name"], None)
        if t is None:
            raise ValueError(f"{path}: unexpected parameter {entry['name']!r}")
        values = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if values.shape != t.shape:
            raise ValueError(f"{path}: {entry['name']} has shape {values.shape}, expected {t.shape}")
        t.data[...] = values
    if named:
        raise ValueError(f"{path}: missing parameters {sorted(named)}")
    return models, doc.get("extra", {})
