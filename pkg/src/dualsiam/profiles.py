"""Architecture profiles: every dimension both networks depend on.

Two profiles ship with the package.  The "paper" profile is the
full-scale configuration (127x127 targets inside 255x255 search
patches, stride 8, 17x17 response maps).  The "desk" profile keeps
every structural relationship -- stride 8, two pools, a 6x6 target
feature footprint, semantic taps on the last two conv layers -- while
shrinking channel counts so the whole pipeline trains on a CPU in
minutes.

Layer chains are validated at construction by running the output-extent
recurrence for both input sizes and comparing against the declared
feature/response dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ContractViolationError


@dataclass(frozen=True)
class ConvLayerSpec:
    name: str
    kernel: int
    stride: int
    out_channels: int
    relu: bool = True


@dataclass(frozen=True)
class PoolLayerSpec:
    name: str
    window: int
    stride: int


LayerSpec = ConvLayerSpec | PoolLayerSpec


def layer_output_extent(extent: int, layer: LayerSpec) -> int:
    if isinstance(layer, ConvLayerSpec):
        k, s = layer.kernel, layer.stride
    else:
        k, s = layer.window, layer.stride
    if extent < k:
        raise ContractViolationError(
            f"layer {layer.name}: input extent {extent} smaller than kernel {k}"
        )
    return (extent - k) // s + 1


def run_shape_chain(extent: int, layers: tuple) -> dict:
    """Map layer name -> output extent, walking the chain in order."""
    shapes = {}
    for layer in layers:
        extent = layer_output_extent(extent, layer)
        shapes[layer.name] = extent
    return shapes


@dataclass(frozen=True)
class NetworkProfile:
    name: str
    target_size: int           # W_t == H_t, square patches
    search_size: int           # W_s == H_s
    anet_layers: tuple
    snet_layers: tuple
    snet_taps: tuple            # names of the tapped conv layers, shallow to deep
    total_stride: int
    response_size: int
    target_feat_extent: int     # spatial extent of target features at the deepest layer
    fusion_out_channels: int
    attention_grid: int = 3     # grid is attention_grid x attention_grid cells
    scale_count: int = 3

    def __post_init__(self):
        if not self.target_size < self.search_size:
            raise ContractViolationError(
                f"target size {self.target_size} must be smaller than search size {self.search_size}"
            )
        # Shape recurrence for the appearance network.
        z_chain = run_shape_chain(self.target_size, self.anet_layers)
        x_chain = run_shape_chain(self.search_size, self.anet_layers)
        z_feat = z_chain[self.anet_layers[-1].name]
        x_feat = x_chain[self.anet_layers[-1].name]
        if z_feat != self.target_feat_extent:
            raise ContractViolationError(
                f"profile {self.name}: appearance target features are {z_feat}, "
                f"declared {self.target_feat_extent}"
            )
        if z_feat + self.response_size - 1 != x_feat:
            raise ContractViolationError(
                f"profile {self.name}: correlation geometry broken -- "
                f"{z_feat} + {self.response_size} - 1 != {x_feat}"
            )
        # Semantic taps must exist, and the deepest tap must share the
        # appearance geometry so both branches produce the same response grid.
        s_chain = run_shape_chain(self.search_size, self.snet_layers)
        for tap in self.snet_taps:
            if tap not in s_chain:
                raise ContractViolationError(f"profile {self.name}: unknown semantic tap {tap!r}")
        if s_chain[self.snet_taps[-1]] != x_feat:
            raise ContractViolationError(
                f"profile {self.name}: deepest semantic tap extent {s_chain[self.snet_taps[-1]]} "
                f"differs from appearance search features {x_feat}"
            )
        # Each tap must admit the attention grid split around the footprint.
        for tap in self.snet_taps:
            extent = s_chain[tap]
            side = extent - self.target_feat_extent
            if side < 0 or side % 2:
                raise ContractViolationError(
                    f"profile {self.name}: tap {tap} extent {extent} cannot tile a "
                    f"{self.attention_grid}x{self.attention_grid} grid around a "
                    f"{self.target_feat_extent} center"
                )

    # -- derived geometry ---------------------------------------------------

    def anet_feature_extent(self, input_size: int) -> int:
        return run_shape_chain(input_size, self.anet_layers)[self.anet_layers[-1].name]

    def snet_tap_shapes(self, input_size: int) -> dict:
        """Map tap name -> (extent, channels) for a square input."""
        chain = run_shape_chain(input_size, self.snet_layers)
        channels = {l.name: l.out_channels for l in self.snet_layers if isinstance(l, ConvLayerSpec)}
        return {tap: (chain[tap], channels[tap]) for tap in self.snet_taps}

    @property
    def anet_feature_channels(self) -> int:
        return self.anet_layers[-1].out_channels

    @property
    def search_feat_extent(self) -> int:
        return self.target_feat_extent + self.response_size - 1

    def grid_cells(self, extent: int) -> list:
        """Row-major (row_slice, col_slice) cells of the attention grid.

        The center cell is the target footprint; the remainder tiles
        symmetrically with no gaps or overlaps.
        """
        if extent < self.attention_grid:
            raise ContractViolationError(
                f"extent {extent} cannot be split into a {self.attention_grid}-cell grid"
            )
        side = (extent - self.target_feat_extent) // 2
        if side < 1 or 2 * side + self.target_feat_extent != extent:
            raise ContractViolationError(
                f"extent {extent} does not tile around a {self.target_feat_extent} center"
            )
        bounds = [0, side, side + self.target_feat_extent, extent]
        cells = []
        for i in range(3):
            for j in range(3):
                cells.append((slice(bounds[i], bounds[i + 1]), slice(bounds[j], bounds[j + 1])))
        return cells


PAPER = NetworkProfile(
    name="paper",
    target_size=127,
    search_size=255,
    anet_layers=(
        ConvLayerSpec("conv1", kernel=11, stride=2, out_channels=96),
        PoolLayerSpec("pool1", window=3, stride=2),
        ConvLayerSpec("conv2", kernel=5, stride=1, out_channels=256),
        PoolLayerSpec("pool2", window=3, stride=2),
        ConvLayerSpec("conv3", kernel=3, stride=1, out_channels=384),
        ConvLayerSpec("conv4", kernel=3, stride=1, out_channels=384),
        ConvLayerSpec("conv5", kernel=3, stride=1, out_channels=256, relu=False),
    ),
    snet_layers=(
        ConvLayerSpec("conv1", kernel=11, stride=2, out_channels=96),
        PoolLayerSpec("pool1", window=3, stride=2),
        ConvLayerSpec("conv2", kernel=5, stride=1, out_channels=256),
        PoolLayerSpec("pool2", window=3, stride=2),
        ConvLayerSpec("conv3", kernel=3, stride=1, out_channels=384),
        ConvLayerSpec("conv4", kernel=3, stride=1, out_channels=384),
        ConvLayerSpec("conv5", kernel=3, stride=1, out_channels=256),
    ),
    snet_taps=("conv4", "conv5"),
    total_stride=8,
    response_size=17,
    target_feat_extent=6,
    fusion_out_channels=128,
)

DESK = NetworkProfile(
    name="desk",
    target_size=97,
    search_size=161,
    anet_layers=(
        ConvLayerSpec("conv1", kernel=5, stride=2, out_channels=16),
        PoolLayerSpec("pool1", window=3, stride=2),
        ConvLayerSpec("conv2", kernel=3, stride=1, out_channels=32),
        PoolLayerSpec("pool2", window=3, stride=2),
        ConvLayerSpec("conv3", kernel=3, stride=1, out_channels=48),
        ConvLayerSpec("conv4", kernel=3, stride=1, out_channels=64, relu=False),
    ),
    snet_layers=(
        ConvLayerSpec("conv1", kernel=5, stride=2, out_channels=16),
        PoolLayerSpec("pool1", window=3, stride=2),
        ConvLayerSpec("conv2", kernel=3, stride=1, out_channels=32),
        PoolLayerSpec("pool2", window=3, stride=2),
        ConvLayerSpec("conv3", kernel=3, stride=1, out_channels=48),
        ConvLayerSpec("conv4", kernel=3, stride=1, out_channels=64),
    ),
    snet_taps=("conv3", "conv4"),
    total_stride=8,
    response_size=9,
    target_feat_extent=6,
    fusion_out_channels=64,
)

PROFILES = {"paper": PAPER, "desk": DESK}


def get_profile(name: str) -> NetworkProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ContractViolationError(
            f"unknown profile {name!r}; available: {sorted(PROFILES)}"
        ) from None
