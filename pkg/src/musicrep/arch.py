"""Representation network variants built from a strategy and a source set.

The base chain is seven convolution blocks feeding global average pooling
and a feature layer. Multi-source variants share a prefix of that chain and
branch into per-source continuations plus per-source output heads:

  ss-r      single source, one full chain
  mss-cr    independent full chains, features concatenated
  ms-cr@2   shared through block 1, branch before the 2nd convolution
  ms-cr@4   shared through block 3, branch before the 4th convolution
  ms-cr@6   shared through block 5, branch before the 6th convolution
  ms-sr@fc  fully shared trunk, per-source output layers only

The `self` source trains a pair-matching head on two feature vectors
(concat -> FC -> ReLU -> FC(2) -> softmax) instead of a k-way output layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn

SOURCES = ("self", "year", "bpm", "taste", "tag", "lyrics", "cdr_tag", "artist")

SSR = "ss-r"
MSSCR = "mss-cr"
MSCR2 = "ms-cr@2"
MSCR4 = "ms-cr@4"
MSCR6 = "ms-cr@6"
MSSRFC = "ms-sr@fc"

# Ordered by network size (amount of duplicated depth).
STRATEGIES = (SSR, MSSRFC, MSCR6, MSCR4, MSCR2, MSSCR)

BASE_FEATURE_WIDTH = 256
BASE_CONV_WIDTHS = (16, 32, 64, 64, 128, 256, 256)
DEFAULT_FACTOR_DIM = 50

# Block index where each strategy stops sharing (blocks 0..6; 7 = share all).
_BRANCH_BLOCK = {SSR: 0, MSSCR: 0, MSCR2: 1, MSCR4: 3, MSCR6: 5, MSSRFC: 7}


class ArchError(ValueError):
    pass


@dataclass(frozen=True)
class StrategySpec:
    kind: str
    sources: tuple
    feature_width: int = BASE_FEATURE_WIDTH
    factor_dim: int = DEFAULT_FACTOR_DIM
    in_channels: int = 2

    def __post_init__(self) -> None:
        if self.kind not in STRATEGIES:
            raise ArchError(f"unknown strategy {self.kind!r}")
        object.__setattr__(self, "sources", tuple(self.sources))
        if len(set(self.sources)) != len(self.sources):
            raise ArchError("duplicate sources")
        unknown = [s for s in self.sources if s not in SOURCES]
        if unknown:
            raise ArchError(f"unknown sources {unknown}")
        if self.kind == SSR and len(self.sources) != 1:
            raise ArchError("ss-r uses exactly one source")
        if self.kind != SSR and len(self.sources) < 2:
            raise ArchError(f"{self.kind} needs at least two sources")
        if self.feature_width < 1 or self.factor_dim < 1 or self.in_channels < 1:
            raise ArchError("widths and dims must be positive")

    @property
    def representation_dim(self) -> int:
        if self.kind in (SSR, MSSRFC):
            return self.feature_width
        return self.feature_width * len(self.sources)


def conv_widths(feature_width: int) -> tuple:
    scale = feature_width / BASE_FEATURE_WIDTH
    return tuple(max(1, int(round(w * scale))) for w in BASE_CONV_WIDTHS)


def _blocks(feature_width: int) -> list:
    w = conv_widths(feature_width)
    return [
        [nn.conv2d(w[0], (5, 5), (2, 1)), nn.batchnorm(), nn.relu(), nn.maxpool2d((2, 2))],
        [nn.conv2d(w[1], (3, 3)), nn.batchnorm(), nn.relu(), nn.maxpool2d((2, 2))],
        [nn.conv2d(w[2], (3, 3)), nn.batchnorm(), nn.relu(), nn.maxpool2d((2, 2))],
        [nn.conv2d(w[3], (3, 3)), nn.batchnorm(), nn.relu(), nn.maxpool2d((2, 2))],
        [nn.conv2d(w[4], (3, 3)), nn.batchnorm(), nn.relu(), nn.maxpool2d((2, 2))],
        [nn.conv2d(w[5], (3, 3)), nn.batchnorm(), nn.relu(), nn.conv2d(w[6], (1, 1)), nn.batchnorm(), nn.relu()],
        [nn.gap(), nn.fullyconnected(feature_width), nn.batchnorm(), nn.relu(), nn.dropout(0.5)],
    ]


def base_chain(feature_width: int = BASE_FEATURE_WIDTH) -> list:
    """The full representation chain, input tensor to feature activations."""
    return [spec for block in _blocks(feature_width) for spec in block]


def output_head(feature_width: int, factor_dim: int) -> list:
    return [nn.fullyconnected(factor_dim), nn.softmax()]


def pair_head(feature_width: int) -> list:
    """Same/different-track comparison head over two concatenated features."""
    return [nn.fullyconnected(feature_width), nn.relu(), nn.fullyconnected(2), nn.softmax()]


@dataclass
class BranchedNetwork:
    spec: StrategySpec
    shared_layers: list
    shared_params: nn.ParamSet
    branch_layers: dict
    branch_params: dict
    head_layers: dict
    head_params: dict
    init_seed: int = 0
    dtype: object = np.float32

    @property
    def sources(self) -> tuple:
        return self.spec.sources

    def chains(self):
        """All (name, layers, params) trainable chains, shared chain first."""
        yield "shared", self.shared_layers, self.shared_params
        for source in self.spec.sources:
            yield f"branch:{source}", self.branch_layers[source], self.branch_params[source]
        for source in self.spec.sources:
            yield f"head:{source}", self.head_layers[source], self.head_params[source]

    def feature_forward(self, x, source, mode="eval", rng=None):
        """Input tensor to the source's feature vector; returns caches too."""
        caches = []
        out = x
        if self.shared_layers:
            out, cache = nn.forward(self.shared_layers, self.shared_params, out, mode=mode, rng=rng)
            caches.append(cache)
        if self.branch_layers[source]:
            out, cache = nn.forward(self.branch_layers[source], self.branch_params[source], out, mode=mode, rng=rng)
            caches.append(cache)
        return out, caches

    def representation(self, x) -> np.ndarray:
        """Eval-mode representation: concatenated per-source features for the
        concatenating strategies, a single feature vector otherwise."""
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.ndim != 4:
            raise ArchError(f"expected (batch, c, t, f) input, got shape {x.shape}")
        if self.spec.kind in (SSR, MSSRFC):
            if self.spec.kind == SSR:
                out, _ = self.feature_forward(x, self.spec.sources[0], mode="eval")
            else:
                out, _ = nn.forward(self.shared_layers, self.shared_params, x, mode="eval")
            return out[0] if squeeze else out
        parts = []
        shared_out = x
        if self.shared_layers:
            shared_out, _ = nn.forward(self.shared_layers, self.shared_params, x, mode="eval")
        for source in self.spec.sources:
            out, _ = nn.forward(self.branch_layers[source], self.branch_params[source], shared_out, mode="eval")
            parts.append(out)
        stacked = np.concatenate(parts, axis=1)
        return stacked[0] if squeeze else stacked


def build(spec: StrategySpec, seed: int = 0, dtype=np.float32) -> BranchedNetwork:
    """Instantiate layer chains and seeded parameters for a strategy."""
    blocks = _blocks(spec.feature_width)
    split = _BRANCH_BLOCK[spec.kind]
    shared_blocks = blocks[:split] if spec.kind not in (SSR, MSSCR) else []
    branch_blocks = blocks[split:] if spec.kind not in (SSR, MSSCR) else blocks
    shared_layers = [l for b in shared_blocks for l in b]
    branch_layers = [l for b in branch_blocks for l in b]

    # Any spatial size that survives the six time halvings works for init.
    init_shape = (spec.in_channels, 64, 32)
    shapes = nn.infer_shapes(shared_layers + branch_layers, init_shape) if (shared_layers or branch_layers) else []
    branch_input_shape = shapes[len(shared_layers) - 1] if shared_layers else init_shape

    seeds = np.random.SeedSequence(seed).spawn(1 + 2 * len(spec.sources))
    shared_params = nn.init_params(shared_layers, init_shape, np.random.default_rng(seeds[0]), dtype=dtype)

    branches, branch_params = {}, {}
    heads, head_params = {}, {}
    for i, source in enumerate(spec.sources):
        branches[source] = list(branch_layers)
        branch_params[source] = nn.init_params(
            branch_layers, branch_input_shape, np.random.default_rng(seeds[1 + i]), dtype=dtype
        )
        if source == "self":
            heads[source] = pair_head(spec.feature_width)
            head_input = (2 * spec.feature_width,)
        else:
            heads[source] = output_head(spec.feature_width, spec.factor_dim)
            head_input = (spec.feature_width,)
        head_params[source] = nn.init_params(
            heads[source], head_input, np.random.default_rng(seeds[1 + len(spec.sources) + i]), dtype=dtype
        )
    return BranchedNetwork(
        spec=spec,
        shared_layers=shared_layers,
        shared_params=shared_params,
        branch_layers=branches,
        branch_params=branch_params,
        head_layers=heads,
        head_params=head_params,
        init_seed=seed,
        dtype=dtype,
    )


def _chain_param_count(layers, in_channels: int) -> int:
    """Analytic trainable-parameter count (batchnorm scale/shift included,
    running statistics excluded)."""
    total = 0
    channels = in_channels
    for spec in layers:
        if spec.kind == "conv2d":
            total += spec.out_channels * channels * spec.kernel[0] * spec.kernel[1] + spec.out_channels
            channels = spec.out_channels
        elif spec.kind == "batchnorm":
            total += 2 * channels
        elif spec.kind == "fullyconnected":
            total += spec.units * channels + spec.units
            channels = spec.units
    return total


def count_parameters(spec: StrategySpec, include_pair_head: bool = False) -> int:
    """Trainable parameters of the strategy's network.

    By default every source is accounted a k-unit output layer, so
    concatenated-copy counts are exact multiples of the single-source count.
    The pair-matching head used when `self` trains is scaffolding on top of
    the representation network; pass `include_pair_head=True` to count the
    as-built network instead.
    """
    blocks = _blocks(spec.feature_width)
    split = _BRANCH_BLOCK[spec.kind]
    shared_blocks = blocks[:split] if spec.kind not in (SSR, MSSCR) else []
    branch_blocks = blocks[split:] if spec.kind not in (SSR, MSSCR) else blocks

    shared_layers = [l for b in shared_blocks for l in b]
    branch_layers = [l for b in branch_blocks for l in b]
    shapes = nn.infer_shapes(shared_layers + branch_layers, (spec.in_channels, 64, 32))
    branch_in = shapes[len(shared_layers) - 1][0] if shared_layers else spec.in_channels

    total = _chain_param_count(shared_layers, spec.in_channels)
    for source in spec.sources:
        total += _chain_param_count(branch_layers, branch_in)
        if include_pair_head and source == "self":
            total += _chain_param_count(pair_head(spec.feature_width), 2 * spec.feature_width)
        else:
            total += _chain_param_count(output_head(spec.feature_width, spec.factor_dim), spec.feature_width)
    return total


def extract_representation(net: BranchedNetwork, x) -> np.ndarray:
    values = x.values if hasattr(x, "values") else x
    return net.representation(values)


def full_chain_with_head(spec: StrategySpec, source: str) -> list:
    """The complete per-source layer chain including its output head."""
    blocks = _blocks(spec.feature_width)
    chain = [l for b in blocks for l in b]
    if source == "self":
        raise ArchError("the pair head does not compose into a single chain")
    return chain + output_head(spec.feature_width, spec.factor_dim)
