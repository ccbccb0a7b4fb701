"""Builders for the three desk-scale network variants and the layer graph
that hosts them.

The residual-inception variant follows the structural rules of its full-size
namesake: multi-branch blocks, a linear 1x1 projection, residual scaling, and
batch normalization after branch convolutions but never after the residual
summation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import Layer, ShapeMismatch, seeded_rng


class InvalidSpec(ValueError):
    pass


VARIANTS = ("mini_inception_resnet_v2", "mini_inception_v3", "mini_resnet")

_SPEC_FIELDS = ("variant", "input_h", "input_w", "in_channels", "width_mult",
                "blocks_per_stage", "residual_scale", "dropout", "n_classes")


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


@dataclass(frozen=True)
class ArchSpec:
    variant: str
    input_h: int = 64
    input_w: int = 64
    in_channels: int = 1
    width_mult: float = 1.0
    blocks_per_stage: tuple[int, int, int] = (2, 2, 2)
    residual_scale: float = 0.2
    dropout: float = 0.2
    n_classes: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidSpec(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if min(self.input_h, self.input_w, self.in_channels) < 1:
            raise InvalidSpec("input dimensions must be positive")
        if not 0.0 <= self.residual_scale <= 1.0:
            raise InvalidSpec("residual_scale must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidSpec("dropout must lie in [0, 1)")
        if self.n_classes < 2:
            raise InvalidSpec("n_classes must be >= 2")
        if self.width_mult <= 0:
            raise InvalidSpec("width_mult must be positive")
        if len(self.blocks_per_stage) != 3 or min(self.blocks_per_stage) < 1:
            raise InvalidSpec("blocks_per_stage must be three counts >= 1")

    def canonical_text(self) -> str:
        """Fixed-order key=value lines; hashed to guard checkpoint loading."""
        return "".join(f"{k}={_fmt(getattr(self, k))}\n" for k in _SPEC_FIELDS)

    def with_classes(self, n_classes: int) -> "ArchSpec":
        return ArchSpec(**{**{k: getattr(self, k) for k in _SPEC_FIELDS},
                           "n_classes": n_classes})


def parse_spec_text(text: str) -> ArchSpec:
    kv = {}
    for line in text.strip().splitlines():
        k, _, v = line.partition("=")
        kv[k] = v
    return ArchSpec(
        variant=kv["variant"],
        input_h=int(kv["input_h"]),
        input_w=int(kv["input_w"]),
        in_channels=int(kv["in_channels"]),
        width_mult=float(kv["width_mult"]),
        blocks_per_stage=tuple(int(x) for x in kv["blocks_per_stage"].split(",")),
        residual_scale=float(kv["residual_scale"]),
        dropout=float(kv["dropout"]),
        n_classes=int(kv["n_classes"]),
    )


@dataclass
class Node:
    name: str
    layer: Layer
    inputs: tuple[str, ...]  # producer node names; "input" is the graph input


@dataclass
class ShapeTrace:
    entries: list[tuple[str, tuple[int, ...]]]
    error: str | None = None
    message: str = ""


class Model:
    """Acyclic layer graph in topological order, parameters keyed by node name."""

    def __init__(self, spec: ArchSpec, nodes: list[Node], head: str):
        self.spec = spec
        self.nodes = nodes
        self.by_name = {n.name: n for n in nodes}
        if len(self.by_name) != len(nodes):
            raise InvalidSpec("duplicate node names")
        self.head = head
        self._outputs: dict[str, np.ndarray] = {}

    # -- execution ---------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "eval",
                trace: bool = False) -> np.ndarray:
        outputs: dict[str, np.ndarray] = {"input": x}
        for node in self.nodes:
            xs = [outputs[i] for i in node.inputs]
            outputs[node.name] = node.layer.forward(xs, mode)
        self._outputs = outputs
        if trace:
            return outputs[self.nodes[-1].name], outputs
        return outputs[self.nodes[-1].name]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        acc: dict[str, np.ndarray] = {self.nodes[-1].name: dout}
        for node in reversed(self.nodes):
            grad = acc.pop(node.name, None)
            if grad is None:
                continue
            dins = node.layer.backward(grad)
            for src, din in zip(node.inputs, dins):
                if src in acc:
                    acc[src] = acc[src] + din
                else:
                    acc[src] = din
        return acc.get("input")

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return nn.softmax(self.forward(x, "eval"))

    # -- parameters --------------------------------------------------------

    def named_params(self):
        for node in self.nodes:
            for key, arr in node.layer.params.items():
                yield f"{node.name}/{key}", node.layer, key, arr

    def named_buffers(self):
        for node in self.nodes:
            for key, arr in node.layer.buffers.items():
                yield f"{node.name}/{key}", node.layer, key, arr

    def named_grads(self):
        return {name: layer.grads[key]
                for name, layer, key, _ in self.named_params()
                if key in layer.grads}

    def trainable_params(self):
        """(params, grads) dicts restricted to trainable layers."""
        params, grads = {}, {}
        for name, layer, key, arr in self.named_params():
            if layer.trainable:
                params[name] = arr
                grads[name] = layer.grads.get(key)
        return params, grads

    def param_count(self) -> int:
        return sum(arr.size for _, _, _, arr in self.named_params())

    def set_step(self, step: int) -> None:
        for node in self.nodes:
            if isinstance(node.layer, nn.Dropout):
                node.layer.step = step

    def copy_param_state(self) -> dict[str, np.ndarray]:
        state = {name: arr.copy() for name, _, _, arr in self.named_params()}
        state.update({name: arr.copy() for name, _, _, arr in self.named_buffers()})
        return state

    def load_param_state(self, state: dict[str, np.ndarray]) -> None:
        for name, layer, key, arr in list(self.named_params()) + list(self.named_buffers()):
            src = state[name]
            if src.shape != arr.shape:
                raise ShapeMismatch(f"{name}: stored {src.shape} vs model {arr.shape}")
            arr[:] = src


def shape_check(model: Model, input_shape: tuple[int, ...]) -> ShapeTrace:
    """Propagate shapes through the graph; report the first inconsistency by
    layer name instead of raising."""
    shapes: dict[str, tuple[int, ...]] = {"input": tuple(input_shape)}
    entries: list[tuple[str, tuple[int, ...]]] = []
    for node in model.nodes:
        try:
            out = node.layer.out_shape([shapes[i] for i in node.inputs])
        except ShapeMismatch as e:
            return ShapeTrace(entries=entries, error=node.name, message=str(e))
        shapes[node.name] = out
        entries.append((node.name, out))
    return ShapeTrace(entries=entries)


def residual_block_forward(x: np.ndarray, branch, alpha: float) -> np.ndarray:
    """out = ReLU(x + alpha * branch(x)); the summation is never normalized."""
    out = x + alpha * branch(x)
    return np.where(out > 0, out, 0)


# --- builders ---------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


class _Graph:
    def __init__(self, spec: ArchSpec, seed: int, dtype):
        self.spec, self.seed, self.dtype = spec, seed, dtype
        self.nodes: list[Node] = []

    def rng(self, name: str):
        return seeded_rng(self.seed, self.spec.variant, name)

    def add(self, name: str, layer: Layer, *inputs: str) -> str:
        self.nodes.append(Node(name=name, layer=layer, inputs=tuple(inputs)))
        return name

    def conv_bn_relu(self, prefix, src, in_ch, out_ch, kernel, stride=1, pad=0):
        c = self.add(f"{prefix}.conv",
                     nn.Conv2d(in_ch, out_ch, kernel, stride=stride, pad=pad,
                               bias=False, rng=self.rng(f"{prefix}.conv"),
                               dtype=self.dtype), src)
        b = self.add(f"{prefix}.bn", nn.BatchNorm(out_ch, dtype=self.dtype), c)
        return self.add(f"{prefix}.relu", nn.ReLU(), b)

    def head(self, src, in_ch):
        g = self.add("gap", nn.GlobalAvgPool(), src)
        d = self.add("drop", nn.Dropout(self.spec.dropout,
                                        seed=self.seed & 0xFFFFFFFF), g)
        return self.add("head", nn.Dense(in_ch, self.spec.n_classes,
                                         rng=self.rng("head"),
                                         dtype=self.dtype), d)


def _width(base: int, mult: float) -> int:
    return max(1, _round_half_up(base * mult))


def _inception_branches(g: _Graph, prefix: str, src: str, in_ch: int, c: int):
    """1x1 / 1x1-3x3 / 1x1-3x3-3x3 branches, each conv BN'd and ReLU'd."""
    b0 = g.conv_bn_relu(f"{prefix}.br0", src, in_ch, c, 1)
    b1 = g.conv_bn_relu(f"{prefix}.br1a", src, in_ch, c, 1)
    b1 = g.conv_bn_relu(f"{prefix}.br1b", b1, c, c, 3, pad=1)
    b2 = g.conv_bn_relu(f"{prefix}.br2a", src, in_ch, c, 1)
    b2 = g.conv_bn_relu(f"{prefix}.br2b", b2, c, c, 3, pad=1)
    b2 = g.conv_bn_relu(f"{prefix}.br2c", b2, c, c, 3, pad=1)
    return [b0, b1, b2]


def _build_mini_inception_resnet_v2(g: _Graph) -> str:
    spec = g.spec
    w = [_width(b, spec.width_mult) for b in (16, 32, 64, 128)]
    x = g.conv_bn_relu("stem1", "input", spec.in_channels, w[0], 3, stride=2, pad=1)
    x = g.conv_bn_relu("stem2", x, w[0], w[1], 3, pad=1)
    stage_ch = w[1:]
    for s, (ch, n_blocks) in enumerate(zip(stage_ch, spec.blocks_per_stage), start=1):
        for b in range(1, n_blocks + 1):
            prefix = f"s{s}.b{b}"
            c = _width(ch, 0.25)
            branches = _inception_branches(g, prefix, x, ch, c)
            cat = g.add(f"{prefix}.concat", nn.Concat(axis=1), *branches)
            proj = g.add(f"{prefix}.proj",
                         nn.Conv2d(3 * c, ch, 1, bias=False,
                                   rng=g.rng(f"{prefix}.proj"), dtype=g.dtype), cat)
            add = g.add(f"{prefix}.add",
                        nn.ResidualScaleAdd(spec.residual_scale), x, proj)
            x = g.add(f"{prefix}.relu", nn.ReLU(), add)
        if s < 3:
            pool = g.add(f"red{s}.pool", nn.MaxPool(2), x)
            x = g.conv_bn_relu(f"red{s}.widen", pool, ch, stage_ch[s], 1)
    return g.head(x, stage_ch[-1])


def _build_mini_inception_v3(g: _Graph) -> str:
    spec = g.spec
    w = [_width(b, spec.width_mult) for b in (16, 32, 64, 128)]
    x = g.conv_bn_relu("stem1", "input", spec.in_channels, w[0], 3, stride=2, pad=1)
    x = g.conv_bn_relu("stem2", x, w[0], w[1], 3, pad=1)
    stage_ch = w[1:]
    in_ch = w[1]
    for s, (ch, n_blocks) in enumerate(zip(stage_ch, spec.blocks_per_stage), start=1):
        for b in range(1, n_blocks + 1):
            prefix = f"s{s}.b{b}"
            c = _width(ch, 0.25)
            branches = _inception_branches(g, prefix, x, in_ch, c)
            bp = g.add(f"{prefix}.brp.pool", nn.AvgPool(3, stride=1, pad=1), x)
            branches.append(g.conv_bn_relu(f"{prefix}.brp", bp, in_ch, c, 1))
            x = g.add(f"{prefix}.concat", nn.Concat(axis=1), *branches)
            in_ch = 4 * c
        if s < 3:
            pool_layer = nn.MaxPool(2) if s == 1 else nn.AvgPool(2)
            pool = g.add(f"red{s}.pool", pool_layer, x)
            x = g.conv_bn_relu(f"red{s}.widen", pool, in_ch, stage_ch[s], 1)
            in_ch = stage_ch[s]
    return g.head(x, in_ch)


def _build_mini_resnet(g: _Graph) -> str:
    spec = g.spec
    w = [_width(b, spec.width_mult) for b in (16, 32, 64)]
    x = g.conv_bn_relu("stem1", "input", spec.in_channels, w[0], 3, stride=2, pad=1)
    for s, (ch, n_blocks) in enumerate(zip(w, spec.blocks_per_stage), start=1):
        for b in range(1, n_blocks + 1):
            prefix = f"s{s}.b{b}"
            y = g.conv_bn_relu(f"{prefix}.conv1", x, ch, ch, 3, pad=1)
            c2 = g.add(f"{prefix}.conv2.conv",
                       nn.Conv2d(ch, ch, 3, pad=1, bias=False,
                                 rng=g.rng(f"{prefix}.conv2.conv"), dtype=g.dtype), y)
            b2 = g.add(f"{prefix}.conv2.bn", nn.BatchNorm(ch, dtype=g.dtype), c2)
            # identity shortcut, unscaled
            add = g.add(f"{prefix}.add", nn.ResidualScaleAdd(1.0), x, b2)
            x = g.add(f"{prefix}.relu", nn.ReLU(), add)
        if s < 3:
            pool = g.add(f"red{s}.pool", nn.MaxPool(2), x)
            x = g.conv_bn_relu(f"red{s}.widen", pool, ch, w[s], 1)
    return g.head(x, w[-1])


_BUILDERS = {
    "mini_inception_resnet_v2": _build_mini_inception_resnet_v2,
    "mini_inception_v3": _build_mini_inception_v3,
    "mini_resnet": _build_mini_resnet,
}


def build_model(spec: ArchSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Construct a variant with deterministic layer naming and seeded init."""
    g = _Graph(spec, seed, dtype)
    _BUILDERS[spec.variant](g)
    model = Model(spec, g.nodes, head="head")
    trace = shape_check(model, (1, spec.in_channels, spec.input_h, spec.input_w))
    if trace.error is not None:
        raise InvalidSpec(
            f"spec does not fit its input: {trace.error}: {trace.message}")
    return model


def build_block_fragment(channels: int, alpha: float, seed: int = 0,
                         dtype=np.float64) -> Model:
    """One residual inception block as a standalone graph, for verification.

    Input and output are both [N, channels, H, W]; no stem, no head.
    """
    spec = ArchSpec(variant="mini_inception_resnet_v2", residual_scale=alpha)
    g = _Graph(spec, seed, dtype)
    c = _width(channels, 0.25)
    branches = _inception_branches(g, "frag", "input", channels, c)
    cat = g.add("frag.concat", nn.Concat(axis=1), *branches)
    proj = g.add("frag.proj",
                 nn.Conv2d(3 * c, channels, 1, bias=False,
                           rng=g.rng("frag.proj"), dtype=dtype), cat)
    add = g.add("frag.add", nn.ResidualScaleAdd(alpha), "input", proj)
    g.add("frag.relu", nn.ReLU(), add)
    return Model(spec, g.nodes, head="frag.relu")
