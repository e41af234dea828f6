"""Declarative description of the recursive harmonic-dense enhancement network.

Everything here is framework-free: the layer graph, the Table-1 style row
listing, parameter/FLOP counts and the activation-liveness model are derived
from a :class:`NetworkSpec` alone. :mod:`hbenhance.network` turns the same
graph into torch modules.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

BLOCK_OUT_CHANNELS = 32
BYTES_PER_ELEMENT = 4
CONV_KINDS = ("comb", "dense")

VARIANTS = {
    "layers71": dict(block_depths=(8, 16, 16, 16, 4), growth_widths=(14, 16, 20, 20, 40)),
    "layers33": dict(block_depths=(8, 16, 4), growth_widths=(14, 16, 40)),
}


class ArchitectureError(ValueError):
    pass


def _round_even(x: float) -> int:
    # nearest even integer, ties toward +inf
    return int(math.floor(x / 2.0 + 0.5)) * 2


def _two_adic_order(l: int) -> int:
    n = 0
    while l % (2 ** (n + 1)) == 0:
        n += 1
    return n


def channel_width(k: int, l: int) -> int:
    """Output width of harmonic layer ``l`` for base growth ``k``.

    ``n`` is the exponent of the largest power of two dividing ``l``; the
    raw width ``k * 1.6**n`` is rounded to the nearest even integer.
    """
    if l < 1:
        raise ArchitectureError(f"layer index must be >= 1, got {l}")
    if k < 1:
        raise ArchitectureError(f"growth width must be >= 1, got {k}")
    return max(2, _round_even(k * 1.6 ** _two_adic_order(l)))


def harmonic_inputs(l: int) -> List[int]:
    """Source layers of layer ``l``: ``{l - 2**j : 2**j divides l}``, descending (0 is the block input)."""
    if l < 1:
        raise ArchitectureError(f"layer index must be >= 1, got {l}")
    out = []
    j = 0
    while l % (2 ** j) == 0 and l - 2 ** j >= 0:
        out.append(l - 2 ** j)
        j += 1
    return out


def bottleneck_channels(c_in: int, c_out: int) -> int:
    """Geometric-mean bottleneck width, rounded to an even integer (min 2)."""
    if c_in < 1 or c_out < 1:
        raise ArchitectureError("channel counts must be >= 1")
    return max(2, _round_even(math.sqrt(c_in * c_out)))


@dataclass(frozen=True)
class ConvSpec:
    name: str
    c_in: int
    c_out: int
    kernel: int
    stride: int = 1
    groups: int = 1
    norm: bool = True
    act: bool = True

    @property
    def weight_count(self) -> int:
        return self.kernel * self.kernel * (self.c_in // self.groups) * self.c_out

    @property
    def param_count(self) -> int:
        return self.weight_count + self.c_out + (2 * self.c_out if self.norm else 0)


@dataclass(frozen=True)
class LayerNode:
    index: int
    input_indices: Tuple[int, ...]
    in_channels: int
    out_channels: int
    is_bottlenecked: bool
    convs: Tuple[ConvSpec, ...]


@dataclass(frozen=True)
class HBlockSpec:
    depth_L: int
    growth_k: int
    in_channels: int = BLOCK_OUT_CHANNELS
    output_channels: int = BLOCK_OUT_CHANNELS
    conv: str = "comb"
    norm: bool = True

    def validate(self) -> None:
        if self.depth_L < 1:
            raise ArchitectureError(f"block depth must be >= 1, got {self.depth_L}")
        if self.growth_k < 1:
            raise ArchitectureError(f"growth width must be >= 1, got {self.growth_k}")
        if self.conv not in CONV_KINDS:
            raise ArchitectureError(f"unknown conv kind {self.conv!r}")
        if self.in_channels < 1 or self.output_channels < 1:
            raise ArchitectureError("channel counts must be >= 1")


@dataclass(frozen=True)
class HBlockGraph:
    spec: HBlockSpec
    layers: Tuple[LayerNode, ...]
    concat_sources: Tuple[int, ...]
    transition: ConvSpec

    def channels(self, index: int) -> int:
        return self.spec.in_channels if index == 0 else self.layers[index - 1].out_channels

    @property
    def convs(self) -> List[ConvSpec]:
        out = [c for layer in self.layers for c in layer.convs]
        out.append(self.transition)
        return out


def _layer_convs(prefix: str, c_in: int, c_out: int, kind: str, norm: bool) -> List[ConvSpec]:
    if kind == "dense":
        return [ConvSpec(f"{prefix}.conv", c_in, c_out, 3, norm=norm)]
    # pointwise projection followed by a depthwise 3x3
    return [
        ConvSpec(f"{prefix}.pw", c_in, c_out, 1, norm=False, act=False),
        ConvSpec(f"{prefix}.dw", c_out, c_out, 3, groups=c_out, norm=norm),
    ]


def _weights(convs: Sequence[ConvSpec]) -> int:
    return sum(c.param_count for c in convs)


def build_hblock(spec: HBlockSpec, prefix: str = "hblock") -> HBlockGraph:
    """Wire one harmonic dense block.

    Layer ``l`` reads the concatenation of ``harmonic_inputs(l)``. A 1x1
    bottleneck is placed in front of every 4th layer whenever it lowers that
    layer's parameter count. The block output is a 1x1 transition over the
    odd layers plus the last layer, producing ``spec.output_channels``.
    """
    spec.validate()
    widths: Dict[int, int] = {0: spec.in_channels}
    layers = []
    for l in range(1, spec.depth_L + 1):
        sources = tuple(harmonic_inputs(l))
        c_in = sum(widths[s] for s in sources)
        c_out = spec.output_channels if l == spec.depth_L else channel_width(spec.growth_k, l)
        name = f"{prefix}.layer{l}"
        convs = _layer_convs(name, c_in, c_out, spec.conv, spec.norm)
        bottlenecked = False
        if l % 4 == 0:
            b = bottleneck_channels(c_in, c_out)
            squeezed = [ConvSpec(f"{name}.bottleneck", c_in, b, 1, norm=spec.norm)]
            squeezed += _layer_convs(name, b, c_out, spec.conv, spec.norm)
            if _weights(squeezed) < _weights(convs):
                convs, bottlenecked = squeezed, True
        widths[l] = c_out
        layers.append(LayerNode(l, sources, c_in, c_out, bottlenecked, tuple(convs)))
    concat = tuple(l for l in range(1, spec.depth_L + 1) if l % 2 == 1 or l == spec.depth_L)
    cat_ch = sum(widths[l] for l in concat)
    transition = ConvSpec(f"{prefix}.transition", cat_ch, spec.output_channels, 1, norm=False, act=False)
    return HBlockGraph(spec, tuple(layers), concat, transition)


@dataclass
class NetworkSpec:
    variant: str
    block_depths: Tuple[int, ...]
    growth_widths: Tuple[int, ...]
    recursion_T: int = 3
    conv: str = "comb"
    norm: bool = True
    image_channels: int = 3
    base_channels: int = BLOCK_OUT_CHANNELS

    def __post_init__(self):
        self.block_depths = tuple(int(d) for d in self.block_depths)
        self.growth_widths = tuple(int(k) for k in self.growth_widths)
        if len(self.block_depths) != len(self.growth_widths):
            raise ArchitectureError("block_depths and growth_widths differ in length")
        if not self.block_depths:
            raise ArchitectureError("network needs at least one block")
        if self.recursion_T < 1:
            raise ArchitectureError("recursion_T must be >= 1")
        if self.conv not in CONV_KINDS:
            raise ArchitectureError(f"unknown conv kind {self.conv!r}")

    def blocks(self) -> List[HBlockGraph]:
        return [
            build_hblock(
                HBlockSpec(d, k, self.base_channels, self.base_channels, self.conv, self.norm),
                prefix=f"block{i + 1}",
            )
            for i, (d, k) in enumerate(zip(self.block_depths, self.growth_widths))
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_depths"] = list(self.block_depths)
        d["growth_widths"] = list(self.growth_widths)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)

    @classmethod
    def from_json(cls, s: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(s))


def build_network(variant: str, recursion_T: int = 3, **overrides) -> NetworkSpec:
    if variant not in VARIANTS:
        raise ArchitectureError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return NetworkSpec(variant=variant, recursion_T=recursion_T, **VARIANTS[variant], **overrides)


@dataclass(frozen=True)
class TableRow:
    id: str
    layer: str
    info: Optional[Tuple[int, int]]  # (kernel, stride)
    out_channels: int


def stem_conv(net: NetworkSpec) -> ConvSpec:
    return ConvSpec("conv1", 2 * net.image_channels, net.base_channels, 3, norm=net.norm)


def stage_convs(net: NetworkSpec) -> List[Tuple[str, object]]:
    """Ordered (row id, ConvSpec | HBlockGraph) items of one recursion stage."""
    c = net.base_channels
    items: List[Tuple[str, object]] = [("Conv1", stem_conv(net))]
    conv_id = 1
    blocks = net.blocks()
    for i, block in enumerate(blocks):
        last = i == len(blocks) - 1
        items.append((f"HBlock{i + 1}", block))
        conv_id += 1
        items.append((f"Conv{conv_id}", ConvSpec(f"conv{conv_id}", 2 * c, c, 1, norm=net.norm)))
        conv_id += 1
        if last:
            # stage output: no norm, no activation
            tail = ConvSpec(f"conv{conv_id}", c, net.image_channels, 3, norm=False, act=False)
        else:
            tail = ConvSpec(f"conv{conv_id}", c, c, 3, norm=net.norm)
        items.append((f"Conv{conv_id}", tail))
    return items


def table_rows(net: NetworkSpec) -> List[TableRow]:
    """Row-by-row listing of one stage in the layout of the architecture table."""
    c = net.base_channels
    rows = [TableRow("Concat1", "Concat(Input_bad, Input_x^{t-1})", None, 2 * net.image_channels)]
    items = stage_convs(net)
    rows.append(TableRow("Conv1", "Conv(Concat1)", (3, 1), c))
    prev_conv = "Conv1"
    pos = 1
    for b in range(len(net.block_depths)):
        _, block = items[pos]
        id_1x1, conv_1x1 = items[pos + 1]
        id_tail, tail = items[pos + 2]
        pos += 3
        rows.append(TableRow(f"HBlock{b + 1}", f"HBlock({prev_conv}) : {block.spec.depth_L} layers", (3, 1), c))
        rows.append(TableRow(f"Concat{b + 2}", f"Concat({prev_conv}, HBlock{b + 1})", None, 2 * c))
        rows.append(TableRow(id_1x1, f"Conv(Concat{b + 2})", (1, 1), conv_1x1.c_out))
        rows.append(TableRow(f"Add{b + 1}", f"Add({prev_conv}, {id_1x1})", None, c))
        rows.append(TableRow(id_tail, f"Conv(Add{b + 1})", (3, 1), tail.c_out))
        prev_conv = id_tail
    rows.append(TableRow("Output", "Recursive Output: Input_x^t", None, net.image_channels))
    return rows


def all_convs(net: NetworkSpec) -> List[ConvSpec]:
    """Every convolution of one stage (weights are shared across stages)."""
    out: List[ConvSpec] = []
    for _, item in stage_convs(net):
        out.extend(item.convs if isinstance(item, HBlockGraph) else [item])
    return out


def conv_layer_count(net: NetworkSpec) -> int:
    """Nominal depth: stage convs plus harmonic layers (bottlenecks and transitions excluded)."""
    return 1 + 2 * len(net.block_depths) + sum(net.block_depths)


def count_params(net: NetworkSpec) -> int:
    return sum(c.param_count for c in all_convs(net))


def count_macs(net: NetworkSpec, height: int, width: int) -> int:
    """Multiply-accumulates of a single stage; every conv runs at full resolution."""
    return sum(c.weight_count for c in all_convs(net)) * height * width


def count_flops(net: NetworkSpec, height: int, width: int, stages: Optional[int] = None,
                flops_per_mac: int = 2) -> int:
    """FLOPs over ``stages`` recursion stages (default ``net.recursion_T``)."""
    T = net.recursion_T if stages is None else stages
    return flops_per_mac * T * count_macs(net, height, width)


def reference_cost(net: NetworkSpec, height: int = 1024, width: int = 512) -> Dict[str, float]:
    """Cost in the convention of the published cost table: GMACs of one stage and millions of params."""
    return {
        "flops_g": count_macs(net, height, width) / 1e9,
        "params_m": count_params(net) / 1e6,
    }


# ---------------------------------------------------------------------------
# activation liveness


@dataclass(frozen=True)
class TensorNode:
    name: str
    channels: int
    inputs: Tuple[str, ...]
    block: Optional[str] = None
    layer: Optional[int] = None


@dataclass
class LedgerEntry:
    name: str
    bytes: int
    produced_at: int
    released_at: Optional[int]  # None: still alive at the end of the pass
    block: Optional[str] = None
    layer: Optional[int] = None
    released_by_block_end: bool = False


@dataclass
class ActivationLedger:
    entries: List[LedgerEntry] = field(default_factory=list)
    block_end: Dict[str, int] = field(default_factory=dict)
    peak_bytes: int = 0
    peak_step: int = 0

    def entry(self, name: str) -> LedgerEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def layer_entry(self, block: str, layer: int) -> LedgerEntry:
        for e in self.entries:
            if e.block == block and e.layer == layer:
                return e
        raise KeyError((block, layer))


def _block_nodes(graph: HBlockGraph, name: str, src: str, wiring: str) -> List[TensorNode]:
    nodes: List[TensorNode] = []
    spec = graph.spec
    out_of = {0: src}
    widths = {0: spec.in_channels}
    for layer in graph.layers:
        l = layer.index
        sources = layer.input_indices if wiring == "harmonic" else tuple(range(l - 1, -1, -1))
        feed = [out_of[s] for s in sources]
        if len(feed) > 1:
            cat = f"{name}.cat{l}"
            nodes.append(TensorNode(cat, sum(widths[s] for s in sources), tuple(feed), name))
            feed = [cat]
        prev = feed
        for j, conv in enumerate(layer.convs[:-1]):
            # conv names repeat across stages, so tensors get block-scoped names
            mid = f"{name}.layer{l}.mid{j}"
            nodes.append(TensorNode(mid, conv.c_out, tuple(prev), name))
            prev = [mid]
        out = f"{name}.layer{l}"
        nodes.append(TensorNode(out, layer.out_channels, tuple(prev), name, l))
        out_of[l] = out
        widths[l] = layer.out_channels
    concat = graph.concat_sources if wiring == "harmonic" else tuple(range(1, spec.depth_L + 1))
    cat = f"{name}.cat_out"
    nodes.append(TensorNode(cat, sum(widths[l] for l in concat), tuple(out_of[l] for l in concat), name))
    nodes.append(TensorNode(f"{name}.out", spec.output_channels, (cat,), name))
    return nodes


def activation_graph(net: NetworkSpec, wiring: str = "harmonic", stages: Optional[int] = None) -> List[TensorNode]:
    """Tensors produced by an inference pass, in execution order.

    ``wiring="dense"`` keeps the same depths and widths but feeds every
    layer all of its predecessors and concatenates every layer at the end.
    """
    if wiring not in ("harmonic", "dense"):
        raise ArchitectureError(f"unknown wiring {wiring!r}")
    T = net.recursion_T if stages is None else stages
    c = net.base_channels
    blocks = net.blocks()
    nodes = [TensorNode("input_bad", net.image_channels, ())]
    prev_out = "input_bad"
    for t in range(1, T + 1):
        s = f"s{t}"
        nodes.append(TensorNode(f"{s}.concat1", 2 * net.image_channels, ("input_bad", prev_out)))
        nodes.append(TensorNode(f"{s}.conv1", c, (f"{s}.concat1",)))
        trunk = f"{s}.conv1"
        for i, graph in enumerate(blocks):
            bname = f"{s}.block{i + 1}"
            nodes.extend(_block_nodes(graph, bname, trunk, wiring))
            nodes.append(TensorNode(f"{s}.concat{i + 2}", 2 * c, (trunk, f"{bname}.out")))
            nodes.append(TensorNode(f"{s}.fuse{i + 1}", c, (f"{s}.concat{i + 2}",)))
            nodes.append(TensorNode(f"{s}.add{i + 1}", c, (trunk, f"{s}.fuse{i + 1}")))
            last = i == len(blocks) - 1
            nxt = f"{s}.out" if last else f"{s}.tail{i + 1}"
            nodes.append(TensorNode(nxt, net.image_channels if last else c, (f"{s}.add{i + 1}",)))
            trunk = nxt
        prev_out = f"{s}.out"
    return nodes


def simulate_liveness(nodes: Sequence[TensorNode], height: int, width: int,
                      keep: Sequence[str] = ()) -> ActivationLedger:
    """Sweep the nodes in order, freeing each tensor right after its last consumer.

    Tensors named in ``keep`` (and the final node) are never freed.
    """
    remaining = {n.name: 0 for n in nodes}
    for n in nodes:
        for src in n.inputs:
            remaining[src] += 1
    pinned = set(keep) | {nodes[-1].name}
    ledger = ActivationLedger()
    entries = {}
    live = 0
    for step, n in enumerate(nodes):
        size = n.channels * height * width * BYTES_PER_ELEMENT
        live += size
        e = LedgerEntry(n.name, size, step, None, n.block, n.layer)
        entries[n.name] = e
        ledger.entries.append(e)
        if live > ledger.peak_bytes:
            ledger.peak_bytes, ledger.peak_step = live, step
        for src in n.inputs:
            remaining[src] -= 1
            if remaining[src] == 0 and src not in pinned:
                entries[src].released_at = step
                live -= entries[src].bytes
        if n.name.endswith(".out") and n.block is not None:
            ledger.block_end[n.block] = step
        if remaining[n.name] == 0 and n.name not in pinned:
            entries[n.name].released_at = step
            live -= size
    for e in ledger.entries:
        if e.block is not None and e.released_at is not None:
            e.released_by_block_end = e.released_at <= ledger.block_end.get(e.block, -1)
    return ledger


def peak_activation_memory(net: NetworkSpec, height: int, width: int, wiring: str = "harmonic",
                           stages: Optional[int] = None) -> Tuple[int, ActivationLedger]:
    """Peak simultaneously-retained activation bytes (4-byte elements) of an inference pass."""
    nodes = activation_graph(net, wiring, stages)
    ledger = simulate_liveness(nodes, height, width, keep=("input_bad",))
    return ledger.peak_bytes, ledger


def block_peak_memory(spec: HBlockSpec, height: int, width: int, wiring: str = "harmonic",
                      retain_all: bool = False) -> Tuple[int, ActivationLedger]:
    """Peak bytes of a single block run on its own input."""
    graph = build_hblock(spec, prefix="block")
    nodes = [TensorNode("block.in", spec.in_channels, ())] + _block_nodes(graph, "block", "block.in", wiring)
    keep = [n.name for n in nodes] if retain_all else ("block.in",)
    ledger = simulate_liveness(nodes, height, width, keep=keep)
    return ledger.peak_bytes, ledger
