"""Encoder/decoder lesion segmentation network with a dilated context block.

Layout (``w`` = base width, 32 at full size)::

    init      3x3 conv(w) + BN + ReLU                       H
    enc1..4   residual blocks of w, 2w, 4w, 8w filters      H/2 .. H/16
    cpb       1x1 projection + 3x3 dilations 1/2/4/8, summed (optional)
    dec1..4   upsample, concat skip, 3x3 conv + BN + ReLU   16w, 8w, 4w, 2w
    head      1x1 conv to one channel + sigmoid

Decoder skips are taken by resolution: dec1<-enc3, dec2<-enc2, dec3<-enc1,
dec4<-init.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data_io
from .tensor import (
    RunningStats,
    ShapeError,
    ParameterError,
    Tensor,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    relu,
    sigmoid,
    sum_of_squares,
    upsample2x,
)

CPB_DILATIONS = (1, 2, 4, 8)
WEIGHTS_MAGIC = b"LSWT"
WEIGHTS_FORMAT = "lesionseg-weights/1"
DOWNSAMPLE_FACTOR = 16


@dataclass(frozen=True)
class ModelConfig:
    base_width: int = 32
    cpb_enabled: bool = True
    seed: int = 0

    @property
    def encoder_widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in (1, 2, 4, 8))

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in (16, 8, 4, 2))


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    stats: "OrderedDict[str, RunningStats]" = field(default_factory=OrderedDict)

    @property
    def cpb_enabled(self) -> bool:
        return self.config.cpb_enabled

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> list[Tensor]:
        return list(self.tensors.values())

    def snapshot(self) -> "ModelParams":
        return ModelParams(
            self.config,
            OrderedDict((k, Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k))
                        for k, v in self.tensors.items()),
            OrderedDict((k, RunningStats(s.mean.copy(), s.var.copy())) for k, s in self.stats.items()),
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
        for name, s in self.stats.items():
            h.update(name.encode())
            h.update(s.mean.tobytes())
            h.update(s.var.tobytes())
        return h.hexdigest()


class _Builder:
    def __init__(self, config: ModelConfig):
        self.params = ModelParams(config)
        self.rng = np.random.default_rng(config.seed)

    def conv(self, name: str, cin: int, cout: int, k: int) -> None:
        fan_in = cin * k * k
        w = self.rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
        self.params.tensors[f"{name}.weight"] = Tensor(w.astype(np.float32), requires_grad=True, name=f"{name}.weight")
        self.params.tensors[f"{name}.bias"] = Tensor(np.zeros(cout, np.float32), requires_grad=True, name=f"{name}.bias")

    def bn(self, name: str, c: int) -> None:
        self.params.tensors[f"{name}.scale"] = Tensor(np.ones(c, np.float32), requires_grad=True, name=f"{name}.scale")
        self.params.tensors[f"{name}.shift"] = Tensor(np.zeros(c, np.float32), requires_grad=True, name=f"{name}.shift")
        self.params.stats[name] = RunningStats.fresh(c)


def build_model(input_channels: int = 1, base_width: int = 32, cpb_enabled: bool = True,
                seed: int = 0) -> ModelParams:
    """Create freshly initialised parameters (He-normal kernels, zero biases)."""
    if base_width < 4:
        raise ParameterError(f"base_width must be >= 4, got {base_width}")
    config = ModelConfig(base_width, cpb_enabled, seed)
    b = _Builder(config)
    w = base_width
    b.conv("init.conv", input_channels, w, 3)
    b.bn("init.bn", w)

    cin = w
    for i, f in enumerate(config.encoder_widths, start=1):
        for u in (1, 2):
            prefix = f"enc{i}.unit{u}"
            b.conv(f"{prefix}.conv1", cin if u == 1 else f, f, 3)
            b.bn(f"{prefix}.bn1", f)
            b.conv(f"{prefix}.conv2", f, f, 3)
            b.bn(f"{prefix}.bn2", f)
            if u == 1:
                # stride 2 always changes the spatial size, so unit 1 needs a projection
                b.conv(f"{prefix}.proj", cin, f, 1)
        cin = f

    if cpb_enabled:
        b.conv("cpb.proj", cin, cin, 1)
        for d in CPB_DILATIONS:
            b.conv(f"cpb.dil{d}", cin, cin, 3)

    skips = (config.encoder_widths[2], config.encoder_widths[1], config.encoder_widths[0], w)
    for i, (f, s) in enumerate(zip(config.decoder_widths, skips), start=1):
        b.conv(f"dec{i}.conv", cin + s, f, 3)
        b.bn(f"dec{i}.bn", f)
        cin = f
    b.conv("head.conv", cin, 1, 1)
    return b.params


# ---------------------------------------------------------------------------
# parameter accounting


@dataclass
class ParamLedger:
    layers: list[tuple[str, int]]

    @property
    def total(self) -> int:
        return sum(n for _, n in self.layers)

    def subtotal(self, prefix: str) -> int:
        return sum(n for name, n in self.layers if name == prefix or name.startswith(prefix + "."))

    def to_text(self) -> str:
        lines = ["layer\tparams"]
        lines += [f"{name}\t{n}" for name, n in self.layers]
        lines.append(f"TOTAL\t{self.total}")
        return "\n".join(lines) + "\n"


def count_params(params: ModelParams | None) -> ParamLedger:
    """Trainable counts per layer; BN running statistics are excluded."""
    if params is None:
        return ParamLedger([])
    per_layer: "OrderedDict[str, int]" = OrderedDict()
    for name, t in params.tensors.items():
        layer = name.rsplit(".", 1)[0]
        per_layer[layer] = per_layer.get(layer, 0) + t.size
    return ParamLedger(list(per_layer.items()))


# ---------------------------------------------------------------------------
# forward pass


def _conv(p: ModelParams, name: str, x: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    return conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, dilation=dilation)


def _bn(p: ModelParams, name: str, x: Tensor, mode: str) -> Tensor:
    return batch_norm(x, p[f"{name}.scale"], p[f"{name}.shift"], p.stats[name], mode=mode)


def _conv_bn_relu(p, conv_name, bn_name, x, mode, stride=1) -> Tensor:
    return relu(_bn(p, bn_name, _conv(p, conv_name, x, stride=stride), mode))


def _encoding_block(p: ModelParams, prefix: str, x: Tensor, mode: str) -> Tensor:
    for u in (1, 2):
        unit = f"{prefix}.unit{u}"
        stride = 2 if u == 1 else 1
        y = _conv_bn_relu(p, f"{unit}.conv1", f"{unit}.bn1", x, mode, stride=stride)
        y = _conv_bn_relu(p, f"{unit}.conv2", f"{unit}.bn2", y, mode)
        skip = _conv(p, f"{unit}.proj", x, stride=2) if u == 1 else x
        x = add(y, skip)
    return x


def cpb_forward(params: ModelParams, x: Tensor, paths: tuple[str, ...] | None = None) -> Tensor:
    """Sum of the 1x1 projection and the dilated 3x3 paths.

    ``paths`` restricts the sum to a subset of ``("proj", "dil1", "dil2",
    "dil4", "dil8")``; by default all five contribute.
    """
    if not params.cpb_enabled:
        raise ShapeError("model was built without the context block")
    expected = params["cpb.proj.weight"].shape[1]
    if x.data.ndim != 4 or x.shape[1] != expected:
        raise ShapeError(f"context block expects {expected} channels, got input {x.shape}")
    if paths is None:
        paths = ("proj",) + tuple(f"dil{d}" for d in CPB_DILATIONS)
    out = None
    for path in paths:
        dilation = 1 if path == "proj" else int(path[3:])
        y = _conv(params, f"cpb.{path}", x, dilation=dilation)
        out = y if out is None else add(out, y)
    return out


def _decoding_block(p: ModelParams, prefix: str, x: Tensor, skip: Tensor, mode: str) -> Tensor:
    y = concat_channels(upsample2x(x), skip)
    return _conv_bn_relu(p, f"{prefix}.conv", f"{prefix}.bn", y, mode)


def forward(params: ModelParams, batch: Tensor, mode: str = "eval", features: dict | None = None) -> Tensor:
    """Per-pixel lesion probabilities for an (N, 1, H, W) batch.

    ``features``, when given, receives the intermediate stage outputs keyed by
    stage name (useful for inspecting the resolution ladder).
    """
    if batch.data.ndim != 4:
        raise ShapeError(f"expected an (N, C, H, W) batch, got {batch.shape}")
    h, w = batch.shape[2:]
    if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
        raise ShapeError(f"spatial size {h}x{w} must be a multiple of {DOWNSAMPLE_FACTOR}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be train or eval, got {mode!r}")

    x0 = _conv_bn_relu(params, "init.conv", "init.bn", batch, mode)
    stages = [x0]
    x = x0
    for i in range(1, 5):
        x = _encoding_block(params, f"enc{i}", x, mode)
        stages.append(x)
    if params.cpb_enabled:
        x = cpb_forward(params, x)
    skips = (stages[3], stages[2], stages[1], stages[0])
    decoded = []
    for i, skip in enumerate(skips, start=1):
        x = _decoding_block(params, f"dec{i}", x, skip, mode)
        decoded.append(x)
    out = sigmoid(_conv(params, "head.conv", x))
    if features is not None:
        features.update({"init": x0})
        features.update({f"enc{i}": s for i, s in enumerate(stages[1:], start=1)})
        features.update({f"dec{i}": d for i, d in enumerate(decoded, start=1)})
    return out


def cpb_kernels(params: ModelParams) -> list[Tensor]:
    if not params.cpb_enabled:
        return []
    return [params[f"cpb.{p}.weight"] for p in ("proj",) + tuple(f"dil{d}" for d in CPB_DILATIONS)]


def cpb_penalty(params: ModelParams, coefficient: float) -> Tensor:
    """``coefficient * sum(kernel**2)`` over the five context-block kernels."""
    return sum_of_squares(cpb_kernels(params), coefficient)


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Eval-mode probabilities for an (N, H, W) or (N, 1, H, W) array."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[:, None]
    out = []
    for start in range(0, len(arr), batch_size):
        out.append(forward(params, Tensor(arr[start:start + batch_size]), mode="eval").data[:, 0])
    return np.concatenate(out, axis=0) if out else np.zeros((0,) + arr.shape[2:], np.float32)


# ---------------------------------------------------------------------------
# weight files


def save_weights(path, params: ModelParams) -> None:
    entries = []
    blobs = []
    for name, t in params.tensors.items():
        blob = data_io.encode_tensor(t.data)
        entries.append({"name": name, "kind": "param", "nbytes": len(blob)})
        blobs.append(blob)
    for name, s in params.stats.items():
        for field_name, arr in (("running_mean", s.mean), ("running_var", s.var)):
            blob = data_io.encode_tensor(arr)
            entries.append({"name": f"{name}.{field_name}", "kind": "stat", "nbytes": len(blob)})
            blobs.append(blob)
    header = json.dumps({"format": WEIGHTS_FORMAT, "config": asdict(params.config), "entries": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_weights(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHTS_MAGIC:
        raise data_io.FormatError("bad weights magic", 0)
    if len(raw) < 8:
        raise data_io.FormatError("truncated weights header", len(raw))
    (hlen,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise data_io.FormatError(f"unreadable weights header: {exc}", 8) from exc
    if header.get("format") != WEIGHTS_FORMAT:
        raise data_io.FormatError(f"unsupported weights format {header.get('format')!r}", 8)
    params = ModelParams(ModelConfig(**header["config"]))
    offset = 8 + hlen
    pending_stats: dict[str, dict[str, np.ndarray]] = OrderedDict()
    for entry in header["entries"]:
        blob = raw[offset:offset + entry["nbytes"]]
        arr = data_io.decode_tensor(blob, base_offset=offset)
        offset += entry["nbytes"]
        if entry["kind"] == "param":
            params.tensors[entry["name"]] = Tensor(arr, requires_grad=True, name=entry["name"])
        else:
            layer, stat = entry["name"].rsplit(".", 1)
            pending_stats.setdefault(layer, {})[stat] = arr
    if offset != len(raw):
        raise data_io.FormatError(f"{len(raw) - offset} bytes after the last tensor", offset)
    for layer, d in pending_stats.items():
        params.stats[layer] = RunningStats(d["running_mean"].copy(), d["running_var"].copy())
    _check_architecture(params, path)
    return params


def _check_architecture(params: ModelParams, path) -> None:
    cin = params["init.conv.weight"].shape[1] if "init.conv.weight" in params.tensors else 1
    c = params.config
    ref = build_model(cin, c.base_width, c.cpb_enabled, c.seed)
    got = {k: v.shape for k, v in params.tensors.items()}
    want = {k: v.shape for k, v in ref.tensors.items()}
    if got != want or set(params.stats) != set(ref.stats):
        bad = sorted(set(got) ^ set(want)) or sorted(k for k in want if got.get(k) != want[k])
        raise ShapeError(f"{path}: weights do not match the architecture ({', '.join(bad[:3])} ...)")
