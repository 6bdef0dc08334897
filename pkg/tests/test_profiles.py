"""Shape-recurrence checks for both architecture profiles."""
import pytest

from dualsiam.errors import ContractViolationError
from dualsiam.profiles import (
    DESK,
    PAPER,
    ConvLayerSpec,
    NetworkProfile,
    PoolLayerSpec,
    get_profile,
    run_shape_chain,
)


class TestPaperProfile:
    def test_appearance_extents(self):
        assert PAPER.anet_feature_extent(127) == 6
        assert PAPER.anet_feature_extent(255) == 22

    def test_response_geometry(self):
        assert PAPER.response_size == 17
        assert PAPER.target_feat_extent + PAPER.response_size - 1 == PAPER.anet_feature_extent(255)

    def test_semantic_tap_shapes(self):
        taps = PAPER.snet_tap_shapes(255)
        assert taps["conv4"] == (24, 384)
        assert taps["conv5"] == (22, 256)

    def test_feature_channels(self):
        assert PAPER.anet_feature_channels == 256
        assert PAPER.fusion_out_channels == 128

    def test_total_stride_consistency(self):
        # the extent difference between search and target features must
        # equal the pixel difference divided by the stride
        diff = PAPER.anet_feature_extent(255) - PAPER.anet_feature_extent(127)
        assert diff == (255 - 127) // PAPER.total_stride


class TestDeskProfile:
    def test_appearance_extents(self):
        assert DESK.anet_feature_extent(DESK.target_size) == 6
        assert DESK.anet_feature_extent(DESK.search_size) == 14

    def test_response_geometry(self):
        assert DESK.response_size == 9
        assert DESK.target_feat_extent + DESK.response_size - 1 == DESK.anet_feature_extent(DESK.search_size)

    def test_semantic_taps_are_last_two_convs(self):
        conv_names = [l.name for l in DESK.snet_layers if isinstance(l, ConvLayerSpec)]
        assert list(DESK.snet_taps) == conv_names[-2:]

    def test_channel_progression(self):
        channels = [l.out_channels for l in DESK.anet_layers if isinstance(l, ConvLayerSpec)]
        assert channels == [16, 32, 48, 64]

    def test_stride(self):
        diff = DESK.anet_feature_extent(DESK.search_size) - DESK.anet_feature_extent(DESK.target_size)
        assert diff == (DESK.search_size - DESK.target_size) // DESK.total_stride


class TestGridCells:
    @pytest.mark.parametrize(
        "profile,extent,side",
        [(PAPER, 22, 8), (PAPER, 24, 9), (DESK, 14, 4), (DESK, 16, 5)],
    )
    def test_cells_tile_exactly(self, profile, extent, side):
        cells = profile.grid_cells(extent)
        assert len(cells) == 9
        center = cells[4]
        assert center[0] == slice(side, side + profile.target_feat_extent)
        # cells cover every position exactly once
        covered = set()
        for r, c in cells:
            for i in range(r.start, r.stop):
                for j in range(c.start, c.stop):
                    assert (i, j) not in covered
                    covered.add((i, j))
        assert len(covered) == extent * extent

    def test_too_small_extent_rejected(self):
        with pytest.raises(ContractViolationError):
            PAPER.grid_cells(2)


class TestProfileValidation:
    def test_broken_response_declaration_rejected(self):
        with pytest.raises(ContractViolationError):
            NetworkProfile(
                name="broken",
                target_size=97,
                search_size=161,
                anet_layers=DESK.anet_layers,
                snet_layers=DESK.snet_layers,
                snet_taps=DESK.snet_taps,
                total_stride=8,
                response_size=7,  # wrong: geometry says 9
                target_feat_extent=6,
                fusion_out_channels=32,
            )

    def test_target_not_smaller_rejected(self):
        with pytest.raises(ContractViolationError):
            NetworkProfile(
                name="broken",
                target_size=161,
                search_size=161,
                anet_layers=DESK.anet_layers,
                snet_layers=DESK.snet_layers,
                snet_taps=DESK.snet_taps,
                total_stride=8,
                response_size=9,
                target_feat_extent=6,
                fusion_out_channels=32,
            )

    def test_unknown_profile_name(self):
        with pytest.raises(ContractViolationError):
            get_profile("huge")

    def test_chain_errors_on_tiny_input(self):
        with pytest.raises(ContractViolationError):
            run_shape_chain(3, PAPER.anet_layers)


def test_layer_specs_are_hashable_and_frozen():
    spec = ConvLayerSpec("c", 3, 1, 8)
    with pytest.raises(Exception):
        spec.kernel = 5
    assert hash(spec)
    assert hash(PoolLayerSpec("p", 2, 2))
