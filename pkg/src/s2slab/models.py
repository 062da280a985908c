"""Fixed-architecture conv nets: specs, deterministic builds, checkpoints.

Everything external speaks raw [0, 255] pixels; the nets scale by 1/255 on
the way in, and the autoencoder scales back and clips on the way out. The
desk zoo covers three classifiers of graded capacity plus a pooling/unpooling
autoencoder whose decoder restores spatial detail from saved argmax indices.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    clip,
    conv2d,
    dense,
    he_uniform,
    make_rng,
    maxpool2d,
    maxunpool2d,
    relu,
    reshape,
    scale,
)


class SpecError(ValueError):
    """Invalid model spec, or a model used against its kind."""


class CheckpointError(RuntimeError):
    """Unreadable or inconsistent checkpoint file."""


CHECKPOINT_MAGIC = b"S2SL"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2


@dataclass(frozen=True)
class MaxUnpool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_features: int


Layer = Conv | Relu | MaxPool | MaxUnpool | Flatten | Dense


@dataclass(frozen=True)
class ModelSpec:
    kind: str  # "classifier" | "autoencoder"
    input_shape: tuple[int, int, int]  # C, H, W
    num_classes: int
    layers: tuple[Layer, ...]
    decoder_from: int | None = None  # first decoder layer index, autoencoders only


def _plan(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """Walk the layer chain; returns (param name, shape, fan_in) triples.

    Raises SpecError with the offending layer index on any inconsistency.
    """
    if spec.kind not in ("classifier", "autoencoder"):
        raise SpecError(f"unknown model kind {spec.kind!r}")
    if spec.kind == "autoencoder":
        if spec.decoder_from is None or not 0 < spec.decoder_from < len(spec.layers):
            raise SpecError("autoencoder spec needs a decoder_from index inside the layer list")
    elif spec.decoder_from is not None:
        raise SpecError("decoder_from is only meaningful for autoencoders")

    c, h, w = spec.input_shape
    flat: int | None = None
    pool_stack: list[tuple[int, int]] = []
    plan: list[tuple[str, tuple[int, ...], int]] = []
    conv_n = dense_n = 0
    segment = "encoder" if spec.kind == "autoencoder" else ""

    for i, layer in enumerate(spec.layers):
        if spec.kind == "autoencoder" and i == spec.decoder_from:
            segment = "decoder"
            conv_n = dense_n = 0

        def err(msg: str):
            return SpecError(f"layer {i} ({type(layer).__name__.lower()}): {msg}")

        if isinstance(layer, (Conv, MaxPool, MaxUnpool)) and flat is not None:
            raise err("cannot follow a flatten")

        if isinstance(layer, Conv):
            if layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
                raise err("kernel/stride must be >= 1 and padding >= 0")
            oh = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            ow = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if h + 2 * layer.padding < layer.kernel or oh < 1 or ow < 1:
                raise err(f"kernel {layer.kernel} does not fit {h}x{w} with padding {layer.padding}")
            conv_n += 1
            prefix = f"{segment}.conv{conv_n}" if segment else f"conv{conv_n}"
            fan_in = c * layer.kernel * layer.kernel
            plan.append((f"{prefix}.weight", (layer.out_channels, c, layer.kernel, layer.kernel), fan_in))
            plan.append((f"{prefix}.bias", (layer.out_channels,), fan_in))
            c, h, w = layer.out_channels, oh, ow
        elif isinstance(layer, Relu):
            pass
        elif isinstance(layer, MaxPool):
            if h // layer.kernel < 1 or w // layer.kernel < 1:
                raise err(f"window {layer.kernel} does not fit {h}x{w}")
            pool_stack.append((h, w))
            h, w = h // layer.kernel, w // layer.kernel
        elif isinstance(layer, MaxUnpool):
            if spec.kind != "autoencoder" or segment != "decoder":
                raise err("unpooling only belongs in an autoencoder decoder")
            if not pool_stack:
                raise err("no unmatched maxpool left to unpool")
            h, w = pool_stack.pop()
        elif isinstance(layer, Flatten):
            flat = c * h * w
        elif isinstance(layer, Dense):
            if flat is None:
                raise err("dense expects flattened 2-d activations; add a flatten first")
            dense_n += 1
            prefix = f"{segment}.dense{dense_n}" if segment else f"dense{dense_n}"
            plan.append((f"{prefix}.weight", (flat, layer.out_features), flat))
            plan.append((f"{prefix}.bias", (layer.out_features,), flat))
            flat = layer.out_features
        else:
            raise err("unsupported layer type")

    if spec.kind == "classifier":
        if flat != spec.num_classes:
            raise SpecError(
                f"classifier head produces {flat} features but spec names {spec.num_classes} classes"
            )
    else:
        if pool_stack:
            raise SpecError(f"{len(pool_stack)} maxpool(s) left without a paired unpool")
        if (c, h, w) != spec.input_shape:
            raise SpecError(
                f"autoencoder output {c}x{h}x{w} does not reconstruct input shape "
                f"{spec.input_shape[0]}x{spec.input_shape[1]}x{spec.input_shape[2]}"
            )
    return plan


def validate(spec: ModelSpec) -> None:
    _plan(spec)


@dataclass
class ModelInstance:
    spec: ModelSpec
    params: dict[str, Parameter]
    rng_seed: int

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def kind(self) -> str:
        return self.spec.kind

    def astype(self, dtype) -> "ModelInstance":
        cast = {
            name: Parameter(name, p.data.astype(dtype), frozen=p.frozen)
            for name, p in self.params.items()
        }
        return ModelInstance(self.spec, cast, self.rng_seed)

    def forward(self, x: Tensor) -> Tensor:
        spec = self.spec
        n = x.shape[0]
        if x.shape[1:] != spec.input_shape:
            raise SpecError(f"input shape {x.shape[1:]} != spec {spec.input_shape}")
        h = scale(x, 1.0 / 255.0)
        conv_n = dense_n = 0
        segment = "encoder" if spec.kind == "autoencoder" else ""
        pool_stack: list[tuple[np.ndarray, tuple[int, int]]] = []
        for i, layer in enumerate(spec.layers):
            if spec.kind == "autoencoder" and i == spec.decoder_from:
                segment = "decoder"
                conv_n = dense_n = 0
            if isinstance(layer, Conv):
                conv_n += 1
                prefix = f"{segment}.conv{conv_n}" if segment else f"conv{conv_n}"
                h = conv2d(
                    h,
                    self.params[f"{prefix}.weight"],
                    self.params[f"{prefix}.bias"],
                    stride=layer.stride,
                    padding=layer.padding,
                )
            elif isinstance(layer, Relu):
                h = relu(h)
            elif isinstance(layer, MaxPool):
                pre_hw = h.shape[2:]
                h, idx = maxpool2d(h, layer.kernel)
                pool_stack.append((idx, pre_hw))
            elif isinstance(layer, MaxUnpool):
                idx, hw = pool_stack.pop()
                h = maxunpool2d(h, idx, hw)
            elif isinstance(layer, Flatten):
                h = reshape(h, (n, -1))
            elif isinstance(layer, Dense):
                dense_n += 1
                prefix = f"{segment}.dense{dense_n}" if segment else f"dense{dense_n}"
                h = dense(h, self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"])
        if spec.kind == "autoencoder":
            h = clip(scale(h, 255.0), 0.0, 255.0)
        return h


def build(spec: ModelSpec, seed: int, dtype=np.float32) -> ModelInstance:
    """He-uniform weights, zero biases, drawn in layer order from Philox(seed)."""
    plan = _plan(spec)
    rng = make_rng(seed)
    params: dict[str, Parameter] = {}
    for name, shape, fan_in in plan:
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = he_uniform(rng, shape, fan_in).astype(dtype)
        params[name] = Parameter(name, data)
    return ModelInstance(spec, params, int(seed))


def forward_logits(model: ModelInstance, x: Tensor) -> Tensor:
    if model.kind != "classifier":
        raise SpecError(f"forward_logits needs a classifier, got {model.kind!r}")
    return model.forward(x)


def reconstruct(model: ModelInstance, x: Tensor) -> Tensor:
    if model.kind != "autoencoder":
        raise SpecError(f"reconstruct needs an autoencoder, got {model.kind!r}")
    return model.forward(x)


@dataclass
class Composite:
    """Defended pipeline: classify the defense's reconstruction."""

    defense: ModelInstance
    classifier: ModelInstance

    def __post_init__(self):
        if self.defense.kind != "autoencoder":
            raise SpecError(f"composite defense must be an autoencoder, got {self.defense.kind!r}")
        if self.classifier.kind != "classifier":
            raise SpecError(
                f"composite classifier must be a classifier, got {self.classifier.kind!r}"
            )
        if self.defense.spec.input_shape != self.classifier.spec.input_shape:
            raise SpecError("defense and classifier disagree on input shape")

    @property
    def kind(self) -> str:
        return "composite"

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier.forward(self.defense.forward(x))

    def parameters(self) -> list[Parameter]:
        return self.defense.parameters() + self.classifier.parameters()


def freeze(model, prefix: str = "") -> None:
    for p in model.parameters():
        if p.name.startswith(prefix):
            p.frozen = True


def unfreeze(model, prefix: str = "") -> None:
    for p in model.parameters():
        if p.name.startswith(prefix):
            p.frozen = False


# ---------------------------------------------------------------------------
# desk zoo
# ---------------------------------------------------------------------------


def desk_spec(
    name: str, input_shape: tuple[int, int, int] = (1, 28, 28), num_classes: int = 10
) -> ModelSpec:
    """Reference architectures: three graded classifiers and the autoencoder."""
    c = input_shape[0]
    if name == "c-a":
        layers = (
            Conv(16, 5, 1, 2), Relu(), MaxPool(2),
            Conv(32, 5, 1, 2), Relu(), MaxPool(2),
            Flatten(), Dense(num_classes),
        )
        return ModelSpec("classifier", input_shape, num_classes, layers)
    if name == "c-b":
        layers = (
            Conv(16, 3, 1, 1), Relu(), MaxPool(2),
            Conv(32, 3, 1, 1), Relu(), MaxPool(2),
            Conv(64, 3, 1, 1), Relu(),
            Flatten(), Dense(32), Relu(), Dense(num_classes),
        )
        return ModelSpec("classifier", input_shape, num_classes, layers)
    if name == "c-c":
        layers = (
            Conv(32, 3, 1, 1), Relu(),
            Conv(32, 3, 1, 1), Relu(), MaxPool(2),
            Conv(64, 3, 1, 1), Relu(), MaxPool(2),
            Conv(96, 3, 1, 1), Relu(),
            Flatten(), Dense(64), Relu(), Dense(num_classes),
        )
        return ModelSpec("classifier", input_shape, num_classes, layers)
    if name == "ae":
        layers = (
            Conv(16, 3, 1, 1), Relu(), MaxPool(2),
            Conv(32, 3, 1, 1), Relu(), MaxPool(2),
            Conv(64, 3, 1, 1), Relu(), MaxPool(2),
            MaxUnpool(), Conv(32, 3, 1, 1), Relu(),
            MaxUnpool(), Conv(16, 3, 1, 1), Relu(),
            MaxUnpool(), Conv(c, 3, 1, 1),
        )
        return ModelSpec("autoencoder", input_shape, 0, layers, decoder_from=9)
    raise KeyError(f"unknown desk model {name!r}; choose from c-a, c-b, c-c, ae")


# ---------------------------------------------------------------------------
# canonical spec text
# ---------------------------------------------------------------------------


def spec_to_text(spec: ModelSpec) -> str:
    lines = [
        f"kind {spec.kind}",
        f"input {spec.input_shape[0]} {spec.input_shape[1]} {spec.input_shape[2]}",
        f"classes {spec.num_classes}",
    ]
    if spec.decoder_from is not None:
        lines.append(f"decoder {spec.decoder_from}")
    for layer in spec.layers:
        if isinstance(layer, Conv):
            lines.append(
                f"layer conv out={layer.out_channels} kernel={layer.kernel} "
                f"stride={layer.stride} padding={layer.padding}"
            )
        elif isinstance(layer, Relu):
            lines.append("layer relu")
        elif isinstance(layer, MaxPool):
            lines.append(f"layer maxpool kernel={layer.kernel}")
        elif isinstance(layer, MaxUnpool):
            lines.append("layer maxunpool")
        elif isinstance(layer, Flatten):
            lines.append("layer flatten")
        elif isinstance(layer, Dense):
            lines.append(f"layer dense out={layer.out_features}")
    return "\n".join(lines) + "\n"


def parse_spec_text(text: str) -> tuple[ModelSpec, int | None]:
    """Inverse of spec_to_text; tolerates one trailing `seed N` line."""
    kind = None
    input_shape = None
    num_classes = None
    decoder_from = None
    seed = None
    layers: list[Layer] = []

    def kv(parts: list[str]) -> dict[str, int]:
        out = {}
        for part in parts:
            k, _, v = part.partition("=")
            if not v:
                raise SpecError(f"malformed layer attribute {part!r}")
            out[k] = int(v)
        return out

    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        head, *rest = line.split()
        if head == "kind":
            kind = rest[0]
        elif head == "input":
            input_shape = tuple(int(v) for v in rest)
        elif head == "classes":
            num_classes = int(rest[0])
        elif head == "decoder":
            decoder_from = int(rest[0])
        elif head == "seed":
            seed = int(rest[0])
        elif head == "layer":
            what, attrs = rest[0], kv(rest[1:])
            if what == "conv":
                layers.append(
                    Conv(attrs["out"], attrs["kernel"], attrs.get("stride", 1), attrs.get("padding", 0))
                )
            elif what == "relu":
                layers.append(Relu())
            elif what == "maxpool":
                layers.append(MaxPool(attrs.get("kernel", 2)))
            elif what == "maxunpool":
                layers.append(MaxUnpool())
            elif what == "flatten":
                layers.append(Flatten())
            elif what == "dense":
                layers.append(Dense(attrs["out"]))
            else:
                raise SpecError(f"unknown layer {what!r} in spec text")
        else:
            raise SpecError(f"unknown spec line {line!r}")
    if kind is None or input_shape is None or num_classes is None:
        raise SpecError("spec text missing kind/input/classes header")
    spec = ModelSpec(kind, input_shape, num_classes, tuple(layers), decoder_from)
    validate(spec)
    return spec, seed


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 version, spec text blob, named parameter records
# ---------------------------------------------------------------------------


def save_checkpoint(model: ModelInstance, path) -> None:
    blob = (spec_to_text(model.spec) + f"seed {model.rng_seed}\n").encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(model.params)))
        for p in model.parameters():
            name = p.name.encode()
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<I", p.data.ndim))
            for extent in p.data.shape:
                f.write(struct.pack("<I", extent))
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def _read(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def _read_u32(f) -> int:
    return struct.unpack("<I", _read(f, 4))[0]


def load_checkpoint(path, kind: str | None = None) -> ModelInstance:
    with open(path, "rb") as f:
        if _read(f, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic in {path}")
        version = _read_u32(f)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        blob = _read(f, _read_u32(f)).decode()
        try:
            spec, seed = parse_spec_text(blob)
        except SpecError as e:
            raise CheckpointError(f"invalid spec text in checkpoint: {e}") from e
        if kind is not None and spec.kind != kind:
            raise CheckpointError(f"checkpoint holds a {spec.kind}, expected kind {kind!r}")

        expected = _plan(spec)
        n_params = _read_u32(f)
        if n_params != len(expected):
            raise CheckpointError(
                f"checkpoint stores {n_params} parameters, spec expects {len(expected)}"
            )
        params: dict[str, Parameter] = {}
        for want_name, want_shape, _ in expected:
            name = _read(f, _read_u32(f)).decode()
            rank = _read_u32(f)
            shape = tuple(_read_u32(f) for _ in range(rank))
            if name != want_name or shape != want_shape:
                raise CheckpointError(
                    f"parameter record {name!r} {shape} does not match spec "
                    f"expectation {want_name!r} {want_shape}"
                )
            payload = _read(f, 4 * int(np.prod(shape, dtype=np.int64)))
            data = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
            params[name] = Parameter(name, data)
        if f.read(1):
            raise CheckpointError("trailing bytes after final parameter record")
    return ModelInstance(spec, params, seed if seed is not None else 0)
