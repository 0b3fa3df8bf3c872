"""The 1D-CNN and 2D-CNN, their specs, and trained-model persistence.

Both variants stack three Conv -> BatchNorm -> ReLU -> Dropout blocks with 64
filters, flatten, then FC 512 -> ReLU -> Dropout -> FC 128 -> ReLU -> Dropout
and a linear head (2 logits for sex, 1 output in years for age). The 1D
convolutions are valid with kernel 5 (1516 -> 1512 -> 1508 -> 1504); the 2D
convolutions are 3x3 with padding 1, so the 3 x 800 grid keeps its shape.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .features import AtlasLayout, MeasureId
from .nn.layers import (
    BatchNorm,
    Conv1D,
    Conv2D,
    Dropout,
    Flatten,
    Linear,
    ReLU,
    Sequential,
    make_rng,
)
from .nn.losses import softmax
from .nn.serialize import read_tensors, write_tensors
from .preprocess import NormParams, apply_minmax


class Variant(enum.Enum):
    CNN1D = "cnn1d"
    CNN2D = "cnn2d"


class Task(enum.Enum):
    SEX = "sex"
    AGE = "age"


@dataclass(frozen=True)
class ModelSpec:
    variant: Variant
    task: Task
    input_shape: tuple[int, ...]
    conv_blocks: int = 3
    filters: int = 64
    kernel: tuple[int, ...] = ()
    fc_sizes: tuple[int, ...] = (512, 128)
    conv_dropout: float = 0.5
    fc_dropout: float = 0.5

    def __post_init__(self):
        if not self.kernel:
            object.__setattr__(self, "kernel", (5,) if self.variant is Variant.CNN1D else (3, 3))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "kernel", tuple(int(v) for v in self.kernel))
        object.__setattr__(self, "fc_sizes", tuple(int(v) for v in self.fc_sizes))
        self.validate()

    def validate(self) -> None:
        want_dims = 1 if self.variant is Variant.CNN1D else 2
        if len(self.input_shape) != want_dims or len(self.kernel) != want_dims:
            raise ValueError(f"{self.variant.value} needs {want_dims}-D input shape and kernel")
        if self.conv_blocks != 3:
            raise ValueError("conv_blocks must be 3")
        if self.filters < 1 or any(s < 1 for s in self.fc_sizes):
            raise ValueError("filters and fc sizes must be positive")
        for rate in (self.conv_dropout, self.fc_dropout):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rate {rate} outside [0, 1)")
        if self.variant is Variant.CNN1D:
            k = self.kernel[0]
            if self.input_shape[0] - self.conv_blocks * (k - 1) < 1:
                raise ValueError(f"input length {self.input_shape[0]} too short for {self.conv_blocks} valid convs of kernel {k}")
        elif any(k % 2 == 0 for k in self.kernel):
            raise ValueError("2D kernel sizes must be odd")

    @property
    def head_size(self) -> int:
        return 2 if self.task is Task.SEX else 1

    @property
    def flat_width(self) -> int:
        if self.variant is Variant.CNN1D:
            return self.filters * (self.input_shape[0] - self.conv_blocks * (self.kernel[0] - 1))
        return self.filters * self.input_shape[0] * self.input_shape[1]

    @classmethod
    def for_layout(cls, variant: Variant, task: Task, layout: AtlasLayout, **kwargs) -> "ModelSpec":
        shape = (len(layout),) if variant is Variant.CNN1D else (3, layout.width)
        return cls(variant, task, shape, **kwargs)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        kv = _parse_kv(text)
        return cls(
            variant=Variant(kv["variant"]),
            task=Task(kv["task"]),
            input_shape=_ints(kv["input_shape"]),
            conv_blocks=int(kv.get("conv_blocks", 3)),
            filters=int(kv.get("filters", 64)),
            kernel=_ints(kv.get("kernel", "")),
            fc_sizes=_ints(kv.get("fc_sizes", "512,128")),
            conv_dropout=float(kv.get("conv_dropout", 0.5)),
            fc_dropout=float(kv.get("fc_dropout", 0.5)),
        )


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def build(spec: ModelSpec, rng: np.random.Generator) -> Sequential:
    """Fresh network for ``spec``; ``rng`` draws the initial weights and seeds dropout."""
    spec.validate()
    dropout_rng = make_rng(int(rng.integers(2**63)))
    layers = []
    in_ch = 1
    for i in range(1, spec.conv_blocks + 1):
        if spec.variant is Variant.CNN1D:
            conv = Conv1D(in_ch, spec.filters, spec.kernel[0], rng=rng)
        else:
            conv = Conv2D(in_ch, spec.filters, spec.kernel, padding=spec.kernel[0] // 2, rng=rng)
        layers += [
            (f"conv{i}", conv),
            (f"bn{i}", BatchNorm(spec.filters)),
            (f"relu{i}", ReLU()),
            (f"drop{i}", Dropout(spec.conv_dropout, dropout_rng)),
        ]
        in_ch = spec.filters
    layers.append(("flatten", Flatten()))
    width = spec.flat_width
    for i, size in enumerate(spec.fc_sizes, start=1):
        layers += [
            (f"fc{i}", Linear(width, size, rng=rng)),
            (f"fc_relu{i}", ReLU()),
            (f"fc_drop{i}", Dropout(spec.fc_dropout, dropout_rng)),
        ]
        width = size
    layers.append(("head", Linear(width, spec.head_size, rng=rng)))
    return Sequential(layers, dropout_rng)


def closed_form_param_count(spec: ModelSpec) -> int:
    """Trainable parameter count implied by the architecture description."""
    k = int(np.prod(spec.kernel))
    f = spec.filters
    n = (1 * f * k + f) + (f * f * k + f) * (spec.conv_blocks - 1) + 2 * f * spec.conv_blocks
    width = spec.flat_width
    for size in (*spec.fc_sizes, spec.head_size):
        n += width * size + size
        width = size
    return n


@dataclass
class TrainedModel:
    spec: ModelSpec
    network: Sequential
    norm_params: NormParams
    measure: MeasureId
    training_seed: int
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.norm_params.shape != self.spec.input_shape:
            raise ValueError(f"norm params shape {self.norm_params.shape} != input shape {self.spec.input_shape}")

    def save(self, stem: str | Path) -> list[Path]:
        """Write ``<stem>.cnwt``, ``<stem>.meta.txt`` and ``<stem>.norm.csv``."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        paths = [stem.with_suffix(".cnwt"), stem.with_suffix(".meta.txt"), stem.with_suffix(".norm.csv")]
        with open(paths[0], "wb") as fh:
            write_tensors(self.network.state(), fh)
        meta = [f"measure = {self.measure.name}", f"training_seed = {self.training_seed}"]
        meta += [f"{k} = {v}" for k, v in sorted(self.extra.items())]
        paths[1].write_text(self.spec.to_text() + "\n".join(meta) + "\n", encoding="utf-8")
        with open(paths[2], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["position", "min", "max"])
            for i, (lo, hi) in enumerate(zip(self.norm_params.minimum.ravel(), self.norm_params.maximum.ravel())):
                w.writerow([i, repr(float(lo)), repr(float(hi))])
        return paths

    @classmethod
    def load(cls, stem: str | Path) -> "TrainedModel":
        stem = Path(stem)
        text = stem.with_suffix(".meta.txt").read_text(encoding="utf-8")
        kv = _parse_kv(text)
        spec = ModelSpec.from_text(text)
        network = build(spec, make_rng(0))
        with open(stem.with_suffix(".cnwt"), "rb") as fh:
            network.load_state(read_tensors(fh))
        network.eval()
        lo, hi = [], []
        with open(stem.with_suffix(".norm.csv"), newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for _, a, b in reader:
                lo.append(float(a))
                hi.append(float(b))
        norm = NormParams(np.array(lo).reshape(spec.input_shape), np.array(hi).reshape(spec.input_shape))
        known = {f.name for f in fields(ModelSpec)} | {"measure", "training_seed"}
        extra = {k: v for k, v in kv.items() if k not in known}
        return cls(spec, network, norm, MeasureId.parse(kv["measure"]), int(kv["training_seed"]), extra)


def predict(model: TrainedModel, raw_features, batch_size: int = 64) -> np.ndarray:
    """Normalize raw features with the model's own params and run an eval-mode forward.

    ``raw_features`` is one sample of ``spec.input_shape`` or a batch of them.
    Returns class probabilities ``(n, 2)`` for sex (columns F, M) or ages ``(n,)``.
    A single sample gives a single row.
    """
    x = np.asarray(raw_features, dtype=np.float64)
    shape = model.spec.input_shape
    single = x.shape == shape
    if single:
        x = x[None]
    if x.shape[1:] != shape:
        raise ValueError(f"feature shape {x.shape[1:]} != model input shape {shape}")
    if not len(x):
        raise ValueError("no samples to predict")
    x = apply_minmax(x, model.norm_params)[:, None]
    net = model.network
    was_training = net.training
    net.eval()
    try:
        out = np.concatenate([net.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    finally:
        if was_training:
            net.train()
    out = softmax(out) if model.spec.task is Task.SEX else out[:, 0]
    return out[0] if single else out
