"""PEPE backbone construction, severity head, and inference."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConstructionError, ShapeError
from .layers import LayerSpec, apply_layer, count_flops, count_params, fan_in, output_dims, param_shapes
from .tensor import Tensor

DEFAULT_RATIOS = (0.5, 0.75, 0.5)


@dataclass(frozen=True)
class PEPEBlockSpec:
    """Projection-expansion-projection-expansion block.

    Stages: 1x1 project -> 1x1 expand -> 3x3 depthwise (strided) ->
    1x1 project -> 1x1 expand to ``out_channels``, relu after each.
    ``ratios`` give the first three internal widths as fractions of
    ``out_channels``.
    """

    in_channels: int
    out_channels: int
    stride: int = 1
    ratios: tuple[float, float, float] = DEFAULT_RATIOS

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConstructionError(f"PEPE block stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConstructionError("PEPE block channel counts must be positive")
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ConstructionError(f"PEPE ratios must be three positive fractions, got {self.ratios}")

    def widths(self) -> tuple[int, int, int]:
        return tuple(max(1, math.floor(r * self.out_channels)) for r in self.ratios)


@dataclass(frozen=True)
class NetworkSpec:
    stem: LayerSpec
    stages: tuple[tuple[PEPEBlockSpec, ...], ...]
    skips: tuple[tuple[int, int], ...] = ()
    dense_units: int = 16
    num_classes: int = 2

    @property
    def blocks(self) -> list[PEPEBlockSpec]:
        return [b for stage in self.stages for b in stage]


@dataclass
class LayerNode:
    name: str
    spec: LayerSpec
    inputs: tuple[str, ...]
    group: str = "backbone"


@dataclass
class NetworkGraph:
    spec: NetworkSpec
    input_dims: tuple[int, int, int]
    layers: list[LayerNode]
    params: dict[str, np.ndarray]
    frozen: set[str] = field(default_factory=set)

    @property
    def output_name(self) -> str:
        return self.layers[-1].name

    def layer_dims(self) -> dict[str, tuple[int, ...]]:
        dims = {"input": tuple(self.input_dims)}
        for node in self.layers:
            dims[node.name] = output_dims(node.spec, dims[node.inputs[0]])
        return dims

    def layer_table(self) -> list[tuple[str, str, tuple, int, int]]:
        """Rows of (name, kind, output dims, params, flops) in topological order."""
        dims = {"input": tuple(self.input_dims)}
        rows = []
        for node in self.layers:
            in_dims = dims[node.inputs[0]]
            dims[node.name] = output_dims(node.spec, in_dims)
            rows.append((node.name, node.spec.kind, dims[node.name],
                         count_params(node.spec), count_flops(node.spec, in_dims)))
        return rows

    @property
    def total_params(self) -> int:
        return sum(count_params(n.spec) for n in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(row[4] for row in self.layer_table())

    def param_names(self, group: str | None = None) -> list[str]:
        names = []
        for node in self.layers:
            if group is None or node.group == group:
                names.extend(f"{node.name}.{k}" for k in param_shapes(node.spec))
        return names

    def astype(self, dtype) -> NetworkGraph:
        g = copy.copy(self)
        g.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return g

    def forward(self, x, params=None, probs: bool = False) -> Tensor:
        """Logits (or softmax probabilities) for a (C,H,W) or (N,C,H,W) input.

        ``params`` overrides the stored parameters, e.g. with tape-watched tensors.
        """
        if params is None:
            params = {k: Tensor._wrap(v) for k, v in self.params.items()}
        values = {"input": T.as_tensor(x)}
        last = None
        for node in self.layers:
            if node.spec.kind == "softmax" and not probs:
                break
            ins = [values[n] for n in node.inputs]
            layer_params = {k: params[f"{node.name}.{k}"] for k in param_shapes(node.spec)}
            values[node.name] = apply_layer(node.spec, ins[0] if len(ins) == 1 else ins,
                                            layer_params)
            last = node.name
        return values[last]

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        return predict_proba(self, batch)


# --------------------------------------------------------------------------
# construction


def _block_layers(idx: int, block: PEPEBlockSpec, src: str) -> list[LayerNode]:
    p1, e1, p2 = block.widths()
    name = f"block{idx}"
    stages = [
        ("p1", LayerSpec("pointwise1x1", block.in_channels, p1)),
        ("e1", LayerSpec("pointwise1x1", p1, e1)),
        ("dw", LayerSpec("depthwise2d", e1, e1, (3, 3), block.stride, 1)),
        ("p2", LayerSpec("pointwise1x1", e1, p2)),
        ("e2", LayerSpec("pointwise1x1", p2, block.out_channels)),
    ]
    nodes = []
    for tag, spec in stages:
        nodes.append(LayerNode(f"{name}.{tag}", spec, (src,)))
        nodes.append(LayerNode(f"{name}.{tag}.relu",
                               LayerSpec("relu", spec.out_channels, spec.out_channels),
                               (f"{name}.{tag}",)))
        src = f"{name}.{tag}.relu"
    return nodes


def _head_layers(channels: int, dense_units: int, num_classes: int) -> list[LayerNode]:
    return [
        LayerNode("head.pool", LayerSpec("global_avg_pool", channels, channels), ("__backbone__",),
                  "head"),
        LayerNode("head.dense", LayerSpec("dense", channels, dense_units), ("head.pool",), "head"),
        LayerNode("head.relu", LayerSpec("relu", dense_units, dense_units), ("head.dense",), "head"),
        LayerNode("head.out", LayerSpec("dense", dense_units, num_classes), ("head.relu",), "head"),
        LayerNode("head.softmax", LayerSpec("softmax", num_classes, num_classes), ("head.out",),
                  "head"),
    ]


def _init_params(nodes: list[LayerNode], rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for node in nodes:
        for key, shape in param_shapes(node.spec).items():
            if key == "bias":
                params[f"{node.name}.bias"] = np.zeros(shape, dtype=np.float32)
            else:
                bound = math.sqrt(6.0 / fan_in(node.spec))
                params[f"{node.name}.weight"] = rng.uniform(-bound, bound, shape).astype(np.float32)
    return params


def _validate_skips(spec: NetworkSpec, block_dims: list[tuple[int, ...]]):
    n = len(block_dims)
    seen = set()
    for src, dst in spec.skips:
        if not (0 <= src < n and 0 <= dst < n):
            raise ConstructionError(f"skip block{src} -> block{dst} references a missing block")
        if src >= dst:
            raise ConstructionError(f"skip block{src} -> block{dst} must point forward (acyclic)")
        if (src, dst) in seen:
            raise ConstructionError(f"duplicate skip block{src} -> block{dst}")
        seen.add((src, dst))
        if block_dims[src] != block_dims[dst]:
            raise ConstructionError(
                f"skip block{src} -> block{dst}: shape mismatch "
                f"{list(block_dims[src])} vs {list(block_dims[dst])}")


def build_backbone(spec: NetworkSpec, input_dims) -> list[LayerNode]:
    input_dims = tuple(int(d) for d in input_dims)
    if spec.stem.kind != "conv2d":
        raise ConstructionError(f"stem must be conv2d, got {spec.stem.kind}")
    if input_dims[0] != spec.stem.in_channels:
        raise ConstructionError(
            f"stem expects {spec.stem.in_channels} input channels, got {input_dims[0]}")
    nodes = [LayerNode("stem", spec.stem, ("input",)),
             LayerNode("stem.relu", LayerSpec("relu", spec.stem.out_channels, spec.stem.out_channels),
                       ("stem",))]
    try:
        dims = output_dims(spec.stem, input_dims)
    except ShapeError as exc:
        raise ConstructionError(f"stem: {exc}") from exc
    src = "stem.relu"
    block_dims, block_out = [], []
    incoming: dict[int, list[int]] = {}
    for s, d in spec.skips:
        incoming.setdefault(d, []).append(s)
    # shapes first so skip errors name blocks rather than layers
    for i, block in enumerate(spec.blocks):
        if block.in_channels != dims[0]:
            raise ConstructionError(
                f"block{i} expects {block.in_channels} input channels, got {dims[0]}")
        h, w = dims[1], dims[2]
        dims = (block.out_channels, (h + 2 - 3) // block.stride + 1, (w + 2 - 3) // block.stride + 1)
        if dims[1] < 1 or dims[2] < 1:
            raise ConstructionError(f"block{i}: spatial dims collapse to {dims}")
        block_dims.append(dims)
    _validate_skips(spec, block_dims)
    for i, block in enumerate(spec.blocks):
        layers = _block_layers(i, block, src)
        nodes.extend(layers)
        src = layers[-1].name
        for s in sorted(incoming.get(i, [])):
            name = f"block{i}.skip{s}"
            c = block.out_channels
            nodes.append(LayerNode(name, LayerSpec("add_skip", c, c), (src, block_out[s])))
            src = name
        block_out.append(src)
    return nodes


def _assemble(spec, input_dims, backbone, head, params, frozen=()):
    out = backbone[-1].name
    head = [LayerNode(n.name, n.spec, tuple(out if i == "__backbone__" else i for i in n.inputs),
                      n.group) for n in head]
    return NetworkGraph(spec, tuple(input_dims), backbone + head, params, set(frozen))


def build_network(spec: NetworkSpec, input_dims, rng_seed: int = 0) -> NetworkGraph:
    """Instantiate ``spec`` for ``input_dims`` (C,H,W) with seeded fan-in uniform init."""
    rng = np.random.default_rng(rng_seed)
    backbone = build_backbone(spec, input_dims)
    channels = spec.blocks[-1].out_channels if spec.blocks else spec.stem.out_channels
    head = _head_layers(channels, spec.dense_units, spec.num_classes)
    params = _init_params(backbone, rng)
    params.update(_init_params(head, rng))
    graph = _assemble(spec, input_dims, backbone, head, params)
    graph.layer_dims()
    return graph


def attach_severity_head(backbone: NetworkGraph, dense_units: int, freeze_backbone: bool = False,
                         rng_seed: int = 0) -> NetworkGraph:
    """Replace any existing head with pool -> dense -> relu -> dense(2) -> softmax."""
    body = [n for n in backbone.layers if n.group == "backbone"]
    dims = {"input": backbone.input_dims}
    for node in body:
        dims[node.name] = output_dims(node.spec, dims[node.inputs[0]])
    channels = dims[body[-1].name][0]
    head = _head_layers(channels, dense_units, 2)
    body_names = set(backbone.param_names("backbone"))
    params = {k: v.copy() for k, v in backbone.params.items() if k in body_names}
    params.update(_init_params(head, np.random.default_rng(rng_seed)))
    spec = NetworkSpec(backbone.spec.stem, backbone.spec.stages, backbone.spec.skips,
                       dense_units, 2)
    frozen = body_names if freeze_backbone else ()
    return _assemble(spec, backbone.input_dims, body, head, params, frozen)


# --------------------------------------------------------------------------
# inference


def predict_proba(graph: NetworkGraph, batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=next(iter(graph.params.values())).dtype)
    single = batch.ndim == 3
    if single:
        batch = batch[None]
    probs = graph.forward(Tensor._wrap(batch), probs=True).data
    return probs[0] if single else probs


def level_from_probs(probs) -> int:
    # ties go to Level 2
    return 2 if probs[1] >= probs[0] else 1


def predict_severity(graph: NetworkGraph, image) -> tuple[np.ndarray, int]:
    image = T.as_tensor(image)
    if tuple(image.dims) != tuple(graph.input_dims):
        raise ShapeError(f"predict_severity: expected image dims {list(graph.input_dims)}, "
                         f"got {list(image.dims)}", module="model")
    probs = predict_proba(graph, image.data)
    return probs, level_from_probs(probs)


# --------------------------------------------------------------------------
# reference specs


def toy_spec() -> NetworkSpec:
    """Stem 3x3/2 to 8 channels, one PEPE block 8->8, head dense 16 -> 2."""
    return NetworkSpec(
        stem=LayerSpec("conv2d", 1, 8, (3, 3), 2, 1),
        stages=((PEPEBlockSpec(8, 8),),),
        dense_units=16,
    )


def desk_spec() -> NetworkSpec:
    """Stem 7x7/2 to 16 channels; 3 stages of 2 PEPE blocks at 16/32/64 channels."""
    stages, c_in = [], 16
    for c in (16, 32, 64):
        stages.append((PEPEBlockSpec(c_in, c, 2), PEPEBlockSpec(c, c, 1)))
        c_in = c
    return NetworkSpec(
        stem=LayerSpec("conv2d", 1, 16, (7, 7), 2, 3),
        stages=tuple(stages),
        skips=((0, 1), (2, 3), (4, 5)),
        dense_units=64,
    )
