"""Classifier networks built from a declarative descriptor, plus a binary checkpoint format."""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from ntl.errors import CheckpointError, GeometryMismatch, SpecError

CHECKPOINT_MAGIC = b"NTLCKPT\x00"
CHECKPOINT_VERSION = 1
DEFAULT_BATCH_SIZE = 32


@dataclass
class ArchitectureSpec:
    """Extractor layer descriptors, classifier widths and representation size.

    Extractor descriptors are dicts with a ``type`` key, one of ``conv``,
    ``relu``, ``leakyrelu``, ``maxpool``, ``avgpool``, ``batchnorm``,
    ``dropout``, ``normalize`` (fixed affine input scaling) and ``residual``
    (a two-conv basic block). ``split_index``
    separates the two extractor stages.
    """

    extractor_layers: list
    classifier_layers: list
    repr_dim: int
    input_shape: tuple = (3, 32, 32)
    dropout: float = 0.5
    split_index: Optional[int] = None

    @property
    def num_classes(self) -> int:
        return int(self.classifier_layers[-1])

    def to_text(self) -> str:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureSpec":
        d = json.loads(text)
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)

    def extractor_output_shape(self) -> tuple[int, int, int]:
        c, h, w = self.input_shape
        for i, layer in enumerate(self.extractor_layers):
            kind = layer.get("type")
            if kind == "conv":
                k, s, p = layer.get("kernel", 3), layer.get("stride", 1), layer.get("padding", 1)
                c = int(layer["out"])
                h, w = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            elif kind in ("maxpool", "avgpool"):
                k = layer.get("kernel", 2)
                s = layer.get("stride", k)
                h, w = (h - k) // s + 1, (w - k) // s + 1
            elif kind == "residual":
                s = layer.get("stride", 1)
                c = int(layer["out"])
                h, w = (h - 1) // s + 1, (w - 1) // s + 1
            elif kind not in ("relu", "leakyrelu", "batchnorm", "dropout", "normalize"):
                raise SpecError(f"layer {i}: unknown type {kind!r}")
            if h < 1 or w < 1:
                raise SpecError(f"layer {i} ({kind}) collapses spatial size to {h}x{w}")
        return c, h, w

    def validate(self) -> None:
        if not self.classifier_layers:
            raise SpecError("classifier needs at least the output layer")
        if any(int(width) < 1 for width in self.classifier_layers):
            raise SpecError("classifier widths must be positive")
        c, h, w = self.extractor_output_shape()
        if c * h * w != self.repr_dim:
            raise SpecError(f"extractor produces {c}x{h}x{w}={c * h * w} features, repr_dim is {self.repr_dim}")
        if self.split_index is not None and not 0 <= self.split_index <= len(self.extractor_layers):
            raise SpecError("split_index outside the extractor")


def tiny_spec(num_classes: int = 10, image_size: int = 32, widths=(32, 64, 64, 128), hidden: int = 256) -> ArchitectureSpec:
    """Four conv-relu-maxpool blocks, then Linear(repr, 256)-Linear(256, 256)-Linear(256, K)."""
    layers = []
    for width in widths:
        layers += [
            {"type": "conv", "out": width, "kernel": 3, "stride": 1, "padding": 1},
            {"type": "relu"},
            {"type": "maxpool", "kernel": 2},
        ]
    side = image_size // 2 ** len(widths)
    if side < 1:
        raise SpecError(f"image_size {image_size} too small for {len(widths)} pooling blocks")
    return ArchitectureSpec(
        extractor_layers=layers,
        classifier_layers=[hidden, hidden, num_classes],
        repr_dim=widths[-1] * side * side,
        input_shape=(3, image_size, image_size),
        split_index=6,
    )


_VGG_CFGS = {
    "vgg11": [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    "vgg13": [64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    "vgg19": [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
              512, 512, 512, 512, "M", 512, 512, 512, 512, "M"],
}


def vgg_spec(name: str, num_classes: int, image_size: int = 32) -> ArchitectureSpec:
    """Full-size VGG extractor with the 3-layer 256-wide classifier head."""
    layers = []
    for item in _VGG_CFGS[name]:
        if item == "M":
            layers.append({"type": "maxpool", "kernel": 2})
        else:
            layers += [{"type": "conv", "out": item, "kernel": 3, "padding": 1}, {"type": "relu"}]
    side = image_size // 32
    return ArchitectureSpec(layers, [256, 256, num_classes], 512 * side * side,
                            (3, image_size, image_size), split_index=10)


class _Normalize(nn.Module):
    def __init__(self, mean: float, std: float):
        super().__init__()
        self.mean, self.std = mean, std

    def forward(self, x):
        return (x - self.mean) / self.std


class _Residual(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(),
            nn.Conv2d(cout, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout),
        )
        self.skip = nn.Identity()
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        return torch.relu(self.body(x) + self.skip(x))


def _build_layers(spec: ArchitectureSpec) -> list[nn.Module]:
    modules = []
    c = spec.input_shape[0]
    for layer in spec.extractor_layers:
        kind = layer["type"]
        if kind == "conv":
            modules.append(nn.Conv2d(c, layer["out"], layer.get("kernel", 3), layer.get("stride", 1),
                                     layer.get("padding", 1)))
            c = layer["out"]
        elif kind == "relu":
            modules.append(nn.ReLU())
        elif kind == "leakyrelu":
            modules.append(nn.LeakyReLU(layer.get("slope", 0.2)))
        elif kind == "maxpool":
            modules.append(nn.MaxPool2d(layer.get("kernel", 2), layer.get("stride")))
        elif kind == "avgpool":
            modules.append(nn.AvgPool2d(layer.get("kernel", 2), layer.get("stride")))
        elif kind == "batchnorm":
            modules.append(nn.BatchNorm2d(c))
        elif kind == "dropout":
            modules.append(nn.Dropout(layer.get("p", 0.5)))
        elif kind == "normalize":
            modules.append(_Normalize(layer.get("mean", 0.5), layer.get("std", 0.5)))
        elif kind == "residual":
            modules.append(_Residual(c, layer["out"], layer.get("stride", 1)))
            c = layer["out"]
    return modules


def _build_classifier(spec: ArchitectureSpec) -> nn.Sequential:
    modules = []
    width = spec.repr_dim
    for i, out in enumerate(spec.classifier_layers):
        modules.append(nn.Linear(width, int(out)))
        if i < len(spec.classifier_layers) - 1:
            modules += [nn.ReLU(), nn.Dropout(spec.dropout)]
        width = int(out)
    return nn.Sequential(*modules)


class ModelBundle(nn.Module):
    """Feature extractor plus classifier; ``forward`` returns ``(z, probs)``."""

    def __init__(self, spec: ArchitectureSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.seed = seed
        self.train_step_count = 0
        layers = _build_layers(spec)
        split = len(layers) if spec.split_index is None else spec.split_index
        # split_index counts descriptors, which map 1:1 onto modules
        self.extractor = nn.Sequential(
            nn.Sequential(*layers[:split]),
            nn.Sequential(*layers[split:]),
            nn.Flatten(),
        )
        self.classifier = _build_classifier(spec)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise GeometryMismatch(f"expected (*, {self.spec.input_shape}), got {tuple(x.shape)}")
        return self.extractor(x)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x))

    def forward(self, x: torch.Tensor):
        z = self.features(x)
        return z, torch.softmax(self.classifier(z), dim=1)


def build_model(spec: ArchitectureSpec, seed: int) -> ModelBundle:
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ModelBundle(spec, seed)


def forward(model: ModelBundle, batch: torch.Tensor):
    return model(batch)


def reinit_classifier(model: ModelBundle, seed: int) -> ModelBundle:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model.classifier = _build_classifier(model.spec).to(next(model.parameters()).dtype)
    return model


def freeze(model: ModelBundle, part: str) -> ModelBundle:
    """Disable gradients for ``extractor``, ``classifier`` or nothing (``none``)."""
    if part not in ("extractor", "classifier", "none"):
        raise ValueError(f"unknown part {part!r}")
    for p in model.parameters():
        p.requires_grad_(True)
    if part != "none":
        for p in getattr(model, part).parameters():
            p.requires_grad_(False)
    return model


def clone(model: ModelBundle) -> ModelBundle:
    return copy.deepcopy(model)


@torch.no_grad()
def predict_probs(model: ModelBundle, images: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        out = [model(images[i:i + batch_size])[1] for i in range(0, images.shape[0], batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(out) if out else torch.empty(0, model.spec.num_classes)


@torch.no_grad()
def extract_features(model: ModelBundle, images: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        out = [model.features(images[i:i + batch_size]) for i in range(0, images.shape[0], batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(out)


def accuracy(model: ModelBundle, dataset) -> float:
    """Argmax accuracy; ``torch.argmax`` breaks ties toward the lowest index."""
    if len(dataset) == 0:
        return float("nan")
    probs = predict_probs(model, dataset.to_tensor().to(next(model.parameters()).dtype))
    pred = probs.argmax(dim=1)
    return float((pred == dataset.label_tensor()).double().mean())


# ---------------------------------------------------------------------------
# checkpoint container:
#   magic (8 bytes) | version (u32) | header length (u64) | JSON header | raw tensors

def save_checkpoint(model: ModelBundle, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "spec": model.spec.to_text(),
        "seed": model.seed,
        "train_step_count": model.train_step_count,
        "tensors": tensors,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)
    return path


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f)


def _read_header(f) -> dict:
    if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, hlen = struct.unpack("<IQ", f.read(12))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    return json.loads(f.read(hlen))


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    with open(path, "rb") as f:
        header = _read_header(f)
        blob = f.read()
    spec = ArchitectureSpec.from_text(header["spec"])
    model = build_model(spec, header["seed"])
    if any(np.dtype(e["dtype"]) == np.float64 for e in header["tensors"]):
        model = model.double()
    state = {}
    for entry in header["tensors"]:
        raw = blob[entry["offset"]: entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"truncated tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.train_step_count = header["train_step_count"]
    return model.eval()
