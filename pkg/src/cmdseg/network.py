"""Configurable segmentation networks with per-layer parameter sharing.

A network is an ordered list of layer specs; each layer carries a
sharing annotation ('shared' or 'per-modality') derived from the
experiment setting. Parameters live in a ParameterStore keyed by
(layer index, scope tag) with scope tags 'shared', 'A', 'B'.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .norm import NormSpec, NormScope, make_scope, norm_forward
from .tensor import Tensor

SETTINGS = ("individual", "joint", "joint_kd", "y_shaped", "x_shaped", "chilopod", "ours")
# settings where the distillation weight is active by default
KD_SETTINGS = ("joint_kd", "ours")

MODALITIES = ("A", "B")

# fixed zip entry timestamp so identical runs produce byte-identical checkpoints
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class LayerSpec:
    kind: str                      # conv | norm | relu | resize_concat | logits_conv
    out_channels: int | None = None
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    padding: str = "same"
    bias: bool = True
    norm: NormSpec | None = None
    source: int | None = None      # resize_concat: index of the skip layer
    sharing: str = "shared"


@dataclass
class ArchConfig:
    name: str
    input_channels: int
    num_classes: int
    layers: list[LayerSpec]
    setting: str = "ours"
    # split points for the y/x sharing topologies (layer counts)
    split_prefix: int = 0
    split_suffix: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")


class ParameterStore:
    """Named parameters partitioned by (layer index, scope tag).

    Convolution layers hold {'kernel', 'bias'} tensors, normalization
    layers hold a NormScope. Shared layers have exactly one 'shared'
    entry; per-modality layers have 'A' and 'B' entries of equal shape.
    """

    def __init__(self):
        self.conv: dict[tuple[int, str], dict[str, Tensor]] = {}
        self.norms: dict[tuple[int, str], NormScope] = {}

    def scopes_for(self, layer_idx: int) -> list[str]:
        tags = [tag for (i, tag) in list(self.conv) + list(self.norms) if i == layer_idx]
        return sorted(set(tags))

    def pick(self, layer_idx: int, sharing: str, modality: str) -> str:
        tag = "shared" if sharing == "shared" else modality
        if (layer_idx, tag) not in self.conv and (layer_idx, tag) not in self.norms:
            raise KeyError(f"no scope entry for layer {layer_idx} tag {tag!r}")
        return tag

    def trainables(self):
        """Yield (layer_idx, scope_tag, name, Tensor) for every trainable parameter."""
        for (i, tag) in sorted(self.conv):
            for name, t in self.conv[(i, tag)].items():
                yield i, tag, name, t
        for (i, tag) in sorted(self.norms):
            scope = self.norms[(i, tag)]
            yield i, tag, "gamma", scope.gamma
            yield i, tag, "beta", scope.beta

    def zero_grad(self):
        for *_n, t in self.trainables():
            t.zero_grad()


def count_parameters(store: ParameterStore) -> tuple[int, dict[str, int]]:
    """Exact trainable-parameter counts, total and per scope tag."""
    breakdown = {"shared": 0, "A": 0, "B": 0}
    for _i, tag, _name, t in store.trainables():
        breakdown[tag] += t.size
    return sum(breakdown.values()), breakdown


# -- architecture builders --------------------------------------------

def _conv_block(out_channels, norm_kind, groups=2, stride=1, dilation=1):
    return [
        LayerSpec("conv", out_channels=out_channels, stride=stride, dilation=dilation),
        LayerSpec("norm", norm=NormSpec(norm_kind, out_channels, groups=groups)),
        LayerSpec("relu"),
    ]


def dilated_mini(num_classes: int, norm_kind: str = "batch", input_channels: int = 1,
                 setting: str = "ours") -> ArchConfig:
    """Small dilated 2D net: channels 8,8,16,16,16 -> C, dilations 1,1,2,2,1,1.

    Every conv is followed by norm+relu except the final logits layer,
    which feeds softmax/distillation directly.
    """
    layers: list[LayerSpec] = []
    for ch, dil in ((8, 1), (8, 1), (16, 2), (16, 2), (16, 1)):
        layers += _conv_block(ch, norm_kind, dilation=dil)
    layers.append(LayerSpec("logits_conv", out_channels=num_classes))
    cfg = ArchConfig("dilated-mini", input_channels, num_classes, layers, setting,
                     split_prefix=3, split_suffix=4)
    return apply_setting(cfg)


def unet_mini(num_classes: int, norm_kind: str = "batch", input_channels: int = 1,
              setting: str = "ours") -> ArchConfig:
    """Two-level encoder/decoder with a single skip connection."""
    layers: list[LayerSpec] = []
    layers += _conv_block(8, norm_kind)                       # 0..2, skip source = 2
    layers += _conv_block(8, norm_kind, stride=2)             # 3..5 downsample
    layers += _conv_block(16, norm_kind)                      # 6..8 bottleneck
    layers.append(LayerSpec("resize_concat", source=2))       # 9: up to full res, C=16+8
    layers += _conv_block(8, norm_kind)                       # 10..12
    layers.append(LayerSpec("logits_conv", out_channels=num_classes))
    cfg = ArchConfig("unet-mini", input_channels, num_classes, layers, setting,
                     split_prefix=3, split_suffix=4)
    return apply_setting(cfg)


def build_arch(name: str, num_classes: int, norm_kind: str = "batch",
               input_channels: int = 1, setting: str = "ours") -> ArchConfig:
    if name == "dilated-mini":
        return dilated_mini(num_classes, norm_kind, input_channels, setting)
    if name == "unet-mini":
        return unet_mini(num_classes, norm_kind, input_channels, setting)
    raise ValueError(f"unknown architecture {name!r}")


def apply_setting(cfg: ArchConfig) -> ArchConfig:
    """Derive per-layer sharing annotations from the experiment setting."""
    n = len(cfg.layers)
    if cfg.setting in ("y_shaped", "x_shaped"):
        if not (0 < cfg.split_prefix < n):
            raise ValueError("y/x split prefix out of range")
        if cfg.setting == "x_shaped" and not (0 < cfg.split_suffix < n - cfg.split_prefix):
            raise ValueError("x split suffix out of range")
    for i, layer in enumerate(cfg.layers):
        if cfg.setting == "individual":
            layer.sharing = "per-modality"
        elif cfg.setting in ("joint", "joint_kd"):
            layer.sharing = "shared"
        elif cfg.setting in ("chilopod", "ours"):
            layer.sharing = "per-modality" if layer.kind == "norm" else "shared"
        elif cfg.setting == "y_shaped":
            layer.sharing = "per-modality" if i < cfg.split_prefix else "shared"
        else:  # x_shaped
            private = i < cfg.split_prefix or i >= n - cfg.split_suffix
            layer.sharing = "per-modality" if private else "shared"
    return cfg


def _channel_chain(cfg: ArchConfig) -> list[int]:
    """Per-layer output channel counts; validates the chain and skip sources."""
    chans: list[int] = []
    cur = cfg.input_channels
    logits_seen = 0
    for i, layer in enumerate(cfg.layers):
        if layer.kind in ("conv", "logits_conv"):
            if layer.out_channels is None or layer.out_channels < 1:
                raise ValueError(f"layer {i}: conv needs positive out_channels")
            cur = layer.out_channels
            if layer.kind == "logits_conv":
                logits_seen += 1
                if layer.out_channels != cfg.num_classes:
                    raise ValueError(f"layer {i}: logits_conv channels must equal num_classes")
        elif layer.kind == "norm":
            if layer.norm is None or layer.norm.channels != cur:
                raise ValueError(f"layer {i}: norm channels do not chain ({cur} expected)")
        elif layer.kind == "relu":
            pass
        elif layer.kind == "resize_concat":
            if layer.source is None or not (0 <= layer.source < i):
                raise ValueError(f"layer {i}: resize_concat source must be an earlier layer")
            cur = cur + chans[layer.source]
        else:
            raise ValueError(f"layer {i}: unknown kind {layer.kind!r}")
        chans.append(cur)
    if logits_seen != 1 or cfg.layers[-1].kind != "logits_conv":
        raise ValueError("architecture needs exactly one terminal logits_conv")
    return chans


def build_network(cfg: ArchConfig, seed: int) -> ParameterStore:
    """Initialize all parameters: He-style kernels, gamma=1, beta=0, zero biases."""
    chans = _channel_chain(cfg)
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    cur = cfg.input_channels
    for i, layer in enumerate(cfg.layers):
        tags = ("shared",) if layer.sharing == "shared" else MODALITIES
        if layer.kind in ("conv", "logits_conv"):
            cin, cout, k = cur, layer.out_channels, layer.kernel
            fan_in = cin * k * k
            sigma = float(np.sqrt(2.0 / fan_in))
            for tag in tags:
                params = {"kernel": T.rand_normal((cout, cin, k, k), 0.0, sigma,
                                                  rng=rng, requires_grad=True)}
                if layer.bias:
                    params["bias"] = T.zeros((cout,), requires_grad=True)
                store.conv[(i, tag)] = params
        elif layer.kind == "norm":
            for tag in tags:
                store.norms[(i, tag)] = make_scope(layer.norm, modality=tag)
        cur = chans[i]
    return store


def forward_modality(cfg: ArchConfig, store: ParameterStore, batch: Tensor,
                     modality: str, mode: str = "train") -> Tensor:
    """Run one modality's batch through the network, routing each layer to
    its shared or modality-specific scope. Returns N x C x H x W logits."""
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}")
    if batch.shape[1] != cfg.input_channels:
        raise ValueError(f"batch has {batch.shape[1]} channels, arch expects {cfg.input_channels}")
    outputs: list[Tensor] = []
    x = batch
    for i, layer in enumerate(cfg.layers):
        tag = "shared" if layer.sharing == "shared" else modality
        if layer.kind in ("conv", "logits_conv"):
            params = store.conv[(i, tag)]
            x = T.conv2d(x, params["kernel"], params.get("bias"),
                         stride=layer.stride, dilation=layer.dilation, padding=layer.padding)
        elif layer.kind == "norm":
            x = norm_forward(x, layer.norm, store.norms[(i, tag)], mode=mode)
        elif layer.kind == "relu":
            x = x.relu()
        elif layer.kind == "resize_concat":
            x = T.resize_concat(x, outputs[layer.source])
        outputs.append(x)
    return x


# -- checkpoint format ------------------------------------------------

def _arch_to_json(cfg: ArchConfig) -> str:
    doc = asdict(cfg)
    return json.dumps(doc, indent=1, sort_keys=True)


def _arch_from_json(text: str) -> ArchConfig:
    doc = json.loads(text)
    layers = []
    for ld in doc["layers"]:
        norm = ld.pop("norm")
        spec = LayerSpec(**ld)
        if norm is not None:
            spec.norm = NormSpec(**norm)
        layers.append(spec)
    doc["layers"] = layers
    return ArchConfig(**doc)


def save_checkpoint(path, cfg: ArchConfig, store: ParameterStore) -> None:
    """Archive of CMDT tensor files keyed 'layer{i}.{scope}.{name}' plus a manifest."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        def put(name, payload):
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, payload)

        put("manifest.json", _arch_to_json(cfg))
        for (i, tag), params in sorted(store.conv.items()):
            for name, t in sorted(params.items()):
                put(f"layer{i}.{tag}.{name}", T.tensor_to_bytes(t.data))
        for (i, tag), scope in sorted(store.norms.items()):
            put(f"layer{i}.{tag}.gamma", T.tensor_to_bytes(scope.gamma.data))
            put(f"layer{i}.{tag}.beta", T.tensor_to_bytes(scope.beta.data))
            if scope.running_mean is not None:
                put(f"layer{i}.{tag}.running_mean", T.tensor_to_bytes(scope.running_mean))
                put(f"layer{i}.{tag}.running_var", T.tensor_to_bytes(scope.running_var))


def load_checkpoint(path) -> tuple[ArchConfig, ParameterStore]:
    with zipfile.ZipFile(path, "r") as zf:
        cfg = _arch_from_json(zf.read("manifest.json").decode())
        store = build_network(cfg, seed=0)
        for (i, tag), params in store.conv.items():
            for name, t in params.items():
                t.data = T.tensor_from_bytes(zf.read(f"layer{i}.{tag}.{name}"))
        for (i, tag), scope in store.norms.items():
            scope.gamma.data = T.tensor_from_bytes(zf.read(f"layer{i}.{tag}.gamma"))
            scope.beta.data = T.tensor_from_bytes(zf.read(f"layer{i}.{tag}.beta"))
            if scope.running_mean is not None:
                scope.running_mean = T.tensor_from_bytes(zf.read(f"layer{i}.{tag}.running_mean"))
                scope.running_var = T.tensor_from_bytes(zf.read(f"layer{i}.{tag}.running_var"))
    return cfg, store
