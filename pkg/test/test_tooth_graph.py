import numpy as np
import pytest
import torch

from src.errors import DimensionError
from src.patching import PatchGrid, PatchSequence
from src.tooth_graph import (
    FDI_CODES,
    NUM_NODES,
    NodeProjection,
    TOOTH_BY_FDI,
    build_tooth_adjacency,
    fdi_code,
    graph_from_adjacency,
    nodes_to_tokens,
    occluding_tooth,
    to_dot,
    tokens_to_nodes,
)


@pytest.fixture(scope="module")
def graph():
    return build_tooth_adjacency()


def test_shape_symmetry_and_self_loops(graph):
    a = graph.adjacency
    assert a.shape == (NUM_NODES, NUM_NODES)
    assert np.array_equal(a, a.T)
    assert np.all(np.diag(a) == 1)


def test_neighbors_of_central_incisor(graph):
    nbrs = set(graph.neighbors(8))
    assert {7, 9} <= nbrs
    assert occluding_tooth(8) in nbrs
    assert 0 in nbrs


def test_connected(graph):
    assert graph.is_connected()


def test_edge_count(graph):
    # 사분면 내 28 + 정중선 2 + 교합 16 + 배경 허브 32
    assert len(graph.edge_list) == 28 + 2 + 16 + 32


def test_fdi_map():
    assert fdi_code(1) == 18 and fdi_code(8) == 11
    assert fdi_code(9) == 21 and fdi_code(16) == 28
    assert fdi_code(17) == 38 and fdi_code(24) == 31
    assert fdi_code(25) == 41 and fdi_code(32) == 48
    assert len(set(FDI_CODES.values())) == 32
    assert all(TOOTH_BY_FDI[FDI_CODES[t]] == t for t in FDI_CODES)
    with pytest.raises(ValueError):
        fdi_code(0)


def test_occluding_pairs_share_position():
    for t in range(1, 17):
        assert fdi_code(t) % 10 == fdi_code(occluding_tooth(t)) % 10


def test_dot_export(graph):
    dot = to_dot(graph)
    assert dot.startswith("graph tooth_adjacency {")
    assert 'n8 [label="11"];' in dot
    assert "n8 -- n9;" in dot
    assert dot.count(" -- ") == len(graph.edge_list)


def test_graph_from_adjacency_symmetrizes():
    g = graph_from_adjacency([[0, 1, 0], [0, 0, 0], [0, 0, 0]])
    assert g.neighbors(1) == [0]
    assert g.edge_list == frozenset({(0, 1)})
    with pytest.raises(DimensionError):
        graph_from_adjacency(np.zeros((2, 3)))


def test_projection_matches_einsum_oracle():
    grid = PatchGrid((1, 1, 1), (2, 2, 2), 3)
    proj = NodeProjection(grid.num_tokens)
    tokens = torch.randn(2, grid.num_tokens, 3)
    nodes = tokens_to_nodes(PatchSequence(tokens, grid), proj)
    assert nodes.shape == (2, NUM_NODES, 3)
    expected = np.einsum("vn,bnc->bvc", proj.to_nodes.detach().numpy(), tokens.numpy())
    assert np.allclose(nodes.detach().numpy(), expected, atol=1e-5)
    back = nodes_to_tokens(nodes, proj, grid)
    assert back.tokens.shape == (2, grid.num_tokens, 3)


def test_projection_dimension_errors():
    grid = PatchGrid((1, 1, 1), (2, 2, 2), 3)
    proj = NodeProjection(4)
    with pytest.raises(DimensionError):
        tokens_to_nodes(PatchSequence(torch.zeros(1, 8, 3), grid), proj)
    with pytest.raises(DimensionError):
        nodes_to_tokens(torch.zeros(1, 10, 3), proj, grid)
