"""Random DNN generation and dataset writing."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graph import (
    INPUT,
    MAX_TOKENS,
    ComputationGraph,
    LayerWord,
    conv2d,
    encode_sequence,
    fc,
    pool,
    unary,
    validate_graph,
)

MAX_RETRIES = 16


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    conv_count_range: tuple[int, int] = (4, 12)
    fc_count_range: tuple[int, int] = (1, 4)
    conv_channel_choices: tuple[int, ...] = (16, 32, 64, 128, 256, 512, 1024)
    fc_dim_choices: tuple[int, ...] = (16, 32, 64, 128, 256, 512)
    block_substitution_prob: float = 0.16
    pool_prob: float = 0.25
    min_spatial: int = 2
    kernel: int = 3
    input_shape: tuple[int, int, int] = (3, 32, 32)
    classes: int = 10
    max_tokens: int = MAX_TOKENS

    def __post_init__(self):
        for lo, hi in (self.conv_count_range, self.fc_count_range):
            if lo > hi or lo < 0:
                raise ValueError(f"empty range ({lo}, {hi})")
        if not self.conv_channel_choices or not self.fc_dim_choices:
            raise ValueError("channel choices must be non-empty")
        for p in (self.block_substitution_prob, self.pool_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if self.kernel % 2 == 0:
            raise ValueError("conv kernel must be odd")


@dataclass
class Layout:
    """The random draws behind one graph, before it is built."""

    conv_count: int
    fc_count: int
    slots: list[tuple[str, int]] = field(default_factory=list)  # (conv|residual|dsep|maxpool|avgpool, ch)
    fc_dims: list[int] = field(default_factory=list)

    @property
    def blocks(self) -> int:
        return sum(1 for kind, _ in self.slots if kind in ("residual", "dsep"))


def sample_layout(config: GeneratorConfig, rng: np.random.Generator, max_pools: int | None = None) -> Layout:
    n_conv = int(rng.integers(config.conv_count_range[0], config.conv_count_range[1] + 1))
    n_fc = int(rng.integers(config.fc_count_range[0], config.fc_count_range[1] + 1))
    layout = Layout(n_conv, n_fc)
    spatial = config.input_shape[1]
    pools = 0
    for _ in range(n_conv):
        ch = int(rng.choice(config.conv_channel_choices))
        if rng.random() < config.block_substitution_prob:
            layout.slots.append(("residual" if rng.random() < 0.5 else "dsep", ch))
            continue
        if rng.random() < config.pool_prob:
            kind = "maxpool" if rng.random() < 0.5 else "avgpool"
            room = spatial // 2 >= config.min_spatial
            if room and (max_pools is None or pools < max_pools):
                layout.slots.append((kind, ch))
                spatial //= 2
                pools += 1
                continue
        layout.slots.append(("conv", ch))
    layout.fc_dims = [int(rng.choice(config.fc_dim_choices)) for _ in range(n_fc)]
    return layout


class _Builder:
    def __init__(self, input_shape):
        self.nodes: list[tuple[int, LayerWord]] = []
        self.edges: list[tuple[int, int]] = []
        self.last = INPUT
        self.shape = tuple(input_shape)

    def add(self, word: LayerWord, producers=None) -> int:
        nid = len(self.nodes)
        self.nodes.append((nid, word))
        for p in producers if producers is not None else [self.last]:
            self.edges.append((p, nid))
        self.last = nid
        return nid

    def conv_block(self, out_ch, kernel=3, stride=1, order=("relu", "bn")):
        c, h, w = self.shape
        self.add(conv2d(c, out_ch, kernel, stride, kernel // 2))
        for k in order:
            self.add(unary(k, out_ch))
        p = kernel // 2
        self.shape = (out_ch, (h + 2 * p - kernel) // stride + 1, (w + 2 * p - kernel) // stride + 1)

    def residual(self, out_ch, kernel=3):
        c, h, w = self.shape
        entry = self.last
        self.add(conv2d(c, out_ch, kernel))
        self.add(unary("bn", out_ch))
        self.add(unary("relu", out_ch))
        self.add(conv2d(out_ch, out_ch, kernel))
        body = self.add(unary("bn", out_ch))
        skip = entry
        if c != out_ch:
            skip = self.add(conv2d(c, out_ch, 1, 1, 0), [entry])
        self.add(unary("add", out_ch), [body, skip])
        self.shape = (out_ch, h, w)

    def dsep(self, out_ch, kernel=3):
        self.conv_block(out_ch, kernel, order=("bn", "relu"))
        self.conv_block(out_ch, 1, order=("bn", "relu"))

    def pool(self, kind, kernel=2, stride=2):
        c, h, w = self.shape
        self.add(pool(kind, c, kernel, stride, 0))
        self.shape = (c, (h - kernel) // stride + 1, (w - kernel) // stride + 1)

    def dense(self, out, act=True, bn=True):
        flat = int(np.prod(self.shape))
        self.add(fc(flat, out))
        if act:
            self.add(unary("relu", out))
        if bn:
            self.add(unary("bn", out))
        self.shape = (out,)


def build_graph(layout: Layout, config: GeneratorConfig) -> ComputationGraph:
    b = _Builder(config.input_shape)
    for kind, ch in layout.slots:
        if kind == "conv":
            b.conv_block(ch, config.kernel)
        elif kind == "residual":
            b.residual(ch, config.kernel)
        elif kind == "dsep":
            b.dsep(ch, config.kernel)
        else:
            b.pool(kind)
    for d in layout.fc_dims:
        b.dense(d)
    b.dense(config.classes, act=False, bn=False)
    b.add(unary("softmax", config.classes))
    return ComputationGraph(tuple(b.nodes), tuple(b.edges), config.input_shape, config.classes)


def generate_with_layout(config: GeneratorConfig | None = None, seed: int = 0) -> tuple[ComputationGraph, Layout]:
    """Draw a random graph and return it with the accepted layout.

    A draw whose pooling collapses the feature map is retried with one pool
    fewer; a draw over the token budget is redrawn.
    """
    config = config or GeneratorConfig()
    rng = np.random.default_rng(seed)
    max_pools = None
    for _ in range(MAX_RETRIES + 1):
        layout = sample_layout(config, rng, max_pools)
        graph = build_graph(layout, config)
        if not validate_graph(graph).ok:
            pools = sum(1 for k, _ in layout.slots if k in ("maxpool", "avgpool"))
            max_pools = max(pools - 1, 0)
            continue
        if encode_sequence(graph).token_count() <= config.max_tokens:
            return graph, layout
    raise GenerationError(f"no valid graph after {MAX_RETRIES} retries (seed {seed})")


def generate_random_dnn(config: GeneratorConfig | None = None, seed: int = 0) -> ComputationGraph:
    return generate_with_layout(config, seed)[0]


# ---------------------------------------------------------------------------
# Fixed benchmark chains (dataset C)

VGG11 = (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M")
VGG13 = (64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M")


def vgg_chain(cfg, hidden=(512, 512), input_shape=(3, 32, 32), classes=10) -> ComputationGraph:
    b = _Builder(input_shape)
    for item in cfg:
        if item == "M":
            b.pool("maxpool")
        else:
            b.conv_block(item)
    for d in hidden:
        b.dense(d)
    b.dense(classes, act=False, bn=False)
    b.add(unary("softmax", classes))
    return ComputationGraph(tuple(b.nodes), tuple(b.edges), input_shape, classes)


def resnet_chain(blocks_per_stage, widths=(16, 32, 64), input_shape=(3, 32, 32), classes=10) -> ComputationGraph:
    b = _Builder(input_shape)
    b.conv_block(widths[0])
    for i, w in enumerate(widths):
        if i:
            b.pool("maxpool")
        for _ in range(blocks_per_stage):
            b.residual(w)
    b.pool("avgpool", kernel=b.shape[1], stride=b.shape[1])
    b.dense(classes, act=False, bn=False)
    b.add(unary("softmax", classes))
    return ComputationGraph(tuple(b.nodes), tuple(b.edges), input_shape, classes)


def benchmark_graphs() -> dict[str, ComputationGraph]:
    """Desk-scale stand-ins: VGG-11/13 exactly, ResNet-20/32 with fewer blocks per stage."""
    return {
        "vgg11": vgg_chain(VGG11),
        "vgg13": vgg_chain(VGG13),
        "resnet20_desk": resnet_chain(2),
        "resnet32_desk": resnet_chain(3),
    }


# ---------------------------------------------------------------------------
# Datasets

MANIFEST_FIELDS = ("id", "seed", "role", "graph_path", "n_words", "stand_in")


@dataclass(frozen=True)
class ManifestRow:
    id: str
    seed: int
    role: str
    graph_path: str
    n_words: int
    stand_in: int = 0


def dataset_seeds(n: int, seed: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64) >> np.uint64(1)]


def generate_dataset(
    role: str,
    n: int,
    seed: int,
    out_dir,
    config: GeneratorConfig | None = None,
    seeds: list[int] | None = None,
) -> list[ManifestRow]:
    """Write graph JSON files and ``manifest.csv`` under ``out_dir``."""
    role = role.upper()
    if role not in ("A", "B", "C"):
        raise ValueError(f"unknown dataset role {role!r}")
    out = Path(out_dir)
    (out / "graphs").mkdir(parents=True, exist_ok=True)
    rows = []
    if role == "C":
        for name, g in benchmark_graphs().items():
            rel = f"graphs/{name}.json"
            g.save(out / rel)
            stand_in = int(name.startswith("resnet"))
            rows.append(ManifestRow(name, 0, role, rel, len(encode_sequence(g)), stand_in))
    else:
        if n < 1:
            raise ValueError("n must be >= 1")
        config = config or GeneratorConfig()
        seeds = list(seeds) if seeds is not None else dataset_seeds(n, seed)
        if len(set(seeds)) != len(seeds):
            raise ValueError("duplicate seeds in dataset")
        for i, s in enumerate(seeds):
            g, layout = generate_with_layout(config, s)
            name = f"{role.lower()}{i:05d}"
            rel = f"graphs/{name}.json"
            g.save(out / rel)
            rows.append(ManifestRow(name, s, role, rel, len(encode_sequence(g)), int(layout.blocks > 0)))
    write_manifest(out / "manifest.csv", rows)
    return rows


def write_manifest(path, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.id, r.seed, r.role, r.graph_path, r.n_words, r.stand_in])


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="") as fh:
        return [
            ManifestRow(d["id"], int(d["seed"]), d["role"], d["graph_path"], int(d["n_words"]), int(d.get("stand_in", 0)))
            for d in csv.DictReader(fh)
        ]


def small_config(**overrides) -> GeneratorConfig:
    """A reduced configuration cheap enough for the float64 interpreter."""
    base = GeneratorConfig(
        conv_channel_choices=(4, 6, 8),
        fc_dim_choices=(4, 8, 16),
        input_shape=(3, 8, 8),
    )
    return replace(base, **overrides)
