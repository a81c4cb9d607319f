import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from archsearch import tensor as T
from archsearch.latency import one_hot_masks
from archsearch.network import Network, build_supernet, count_params
from archsearch.primitives import CELL_OPS, FUSION_OPS, UP_OPS, Op, apply_primitive, is_parametric
from archsearch.relax import ArchParams
from archsearch.searchspace import CellTemplate, FusionTemplate, GenotypeError, NetworkTopology, \
    decode, genotype_parse, genotype_serialize, random_genotype, uniform_genotype

SMALL = NetworkTopology(cells=4, reduction_indices=(1, 2), initial_channels=4,
                        fusion_taps=(0, 1, 2))


def test_cell_template_shape():
    tpl = CellTemplate()
    assert tpl.edges == ((0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
    assert (tpl.p, tpl.q) == (5, 8)
    assert [tpl.edge_stride(e) for e in range(5)] == [1] * 5
    red = CellTemplate(is_reduction=True)
    assert [red.edge_stride(e) for e in range(5)] == [2, 2, 2, 2, 1]
    assert tpl.edge_name(4) == "x1->x2"


def test_fusion_template_is_consistent():
    ft = FusionTemplate()
    ft.check()
    assert ft.E == 13 and ft.num_nodes == 9 and ft.q == len(FUSION_OPS)
    assert [e for e, ed in enumerate(ft.edges) if ed.up] == [1, 2, 6]
    mask = ft.valid_mask()
    assert mask[1].sum() == len(UP_OPS) and mask[0].all()


def test_default_topology():
    t = NetworkTopology()
    assert [t.cell_stride(k) for k in t.fusion_taps] == [4, 8, 16]
    assert t.cell_channels(0) == 8 and t.cell_channels(13) == 32
    with pytest.raises(ValueError):
        NetworkTopology(fusion_taps=(1, 7, 13))
    with pytest.raises(ValueError):
        NetworkTopology(cells=3, reduction_indices=(5,), fusion_taps=None)


def test_roundtrip_and_canonical_text():
    rng = np.random.default_rng(0)
    for topo in (NetworkTopology(), SMALL):
        for _ in range(50):
            g = random_genotype(topo, rng)
            text = genotype_serialize(g)
            assert text.endswith("\n") and "\r" not in text
            g2 = genotype_parse(text)
            assert g2 == g and genotype_serialize(g2) == text


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_roundtrip_property(seed):
    g = random_genotype(NetworkTopology(), np.random.default_rng(seed))
    assert genotype_parse(genotype_serialize(g)) == g


def test_parse_errors_name_the_problem():
    g = uniform_genotype(SMALL, "conv3x3")
    obj = g.to_dict()
    bad = json.loads(json.dumps(obj))
    bad["cells"][2][3] = "conv7x7"
    with pytest.raises(GenotypeError, match="cell 2 edge 3"):
        genotype_parse(json.dumps(bad))
    bad = json.loads(json.dumps(obj))
    bad["cells"][0] = bad["cells"][0][:4]
    with pytest.raises(GenotypeError, match="missing edge x1->x2"):
        genotype_parse(json.dumps(bad))
    bad = json.loads(json.dumps(obj))
    bad["fusion"][1] = "conv1x1"
    with pytest.raises(GenotypeError, match="fusion edge 1"):
        genotype_parse(json.dumps(bad))
    with pytest.raises(GenotypeError):
        genotype_parse("{not json")
    with pytest.raises(GenotypeError, match="version"):
        genotype_parse(json.dumps({**obj, "version": 99}))


def test_decode_argmax_with_lowest_index_ties():
    arch = ArchParams(SMALL)
    g = decode(arch)
    assert all(op == "max_pool3x3" for c in g.cells for op in c)
    assert g.fusion == tuple("transposed_conv_x2" if ed.up else "conv1x1"
                             for ed in FusionTemplate().edges)
    arch.cells()[1].data[2, CELL_OPS.index("conv3x3")] = 1.0
    arch.fusion_logits.data[0, 4] = 2.0
    g = decode(arch)
    assert g.cells[1][2] == "conv3x3" and g.fusion[0] == "dil_sep_conv3x3_d4"


def test_decode_never_disconnects_a_cell():
    arch = ArchParams(SMALL)
    zero = CELL_OPS.index("zero")
    arch.cells()[0].data[:, zero] = 5.0
    arch.cells()[0].data[1, zero] = 6.0
    g = decode(arch)
    assert g.cells[0] == ("zero", "skip", "zero", "zero", "zero")


def test_fusion_decode_ignores_masked_columns():
    arch = ArchParams(SMALL)
    arch.fusion_logits.data[1, 5] = 100.0   # not a candidate of an up-edge
    assert decode(arch).fusion[1] == "transposed_conv_x2"


@pytest.mark.parametrize("kind", [k for k in CELL_OPS])
@pytest.mark.parametrize("stride", [1, 2])
def test_cell_primitive_shapes(kind, stride):
    rng = np.random.default_rng(0)
    op = Op(kind, 4, 4, stride, rng)
    y = op(T.Tensor(rng.normal(size=(2, 4, 8, 8))))
    assert y.shape == (2, 4, 8 // stride, 8 // stride)
    assert (op.weights is not None) == is_parametric(kind, stride)


def test_primitive_argument_errors():
    x = T.Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        apply_primitive("conv3x3", x)
    with pytest.raises(ValueError, match="1x1"):
        apply_primitive("skip", x, stride=2)
    with pytest.raises(ValueError):
        apply_primitive("max_pool3x3", x, stride=3)


def test_count_params_matches_hand_count():
    topo = NetworkTopology(cells=1, reduction_indices=(), initial_channels=4, fusion_taps=None,
                           num_classes=3)
    c = 4
    stem = (3 * 9 * c + 2 * c) + 2 * (c * 9 * c + 2 * c)
    pre = 2 * (c * c + 2 * c)
    head = 3 * 2 * c + 3
    skip = uniform_genotype(topo, "skip")
    assert count_params(skip, topo) == stem + pre + head
    conv = uniform_genotype(topo, "conv3x3")
    assert count_params(conv, topo) == stem + pre + head + 5 * (9 * c * c + 2 * c)
    sep = uniform_genotype(topo, "sep_conv3x3")
    assert count_params(sep, topo) == stem + pre + head + 5 * (9 * c + c * c + 2 * c)


def test_pruned_input_drops_preprocessing():
    topo = NetworkTopology(cells=1, reduction_indices=(), initial_channels=4, fusion_taps=None)
    g = uniform_genotype(topo, "skip")
    g2 = type(g)(cells=(("zero", "skip", "zero", "skip", "skip"),), fusion=None,
                 topology=g.topology)
    assert count_params(g2, topo) == count_params(g, topo) - (16 + 8)
    assert g2.pruned_edges() == [(0, 0), (0, 2)]


def _collapse_pair(seed):
    rng = np.random.default_rng(seed)
    sup = build_supernet(SMALL, np.random.default_rng(seed))
    g = random_genotype(SMALL, rng)
    net = sup.derive(g)
    zs, zf = one_hot_masks(g)
    x = rng.uniform(size=(2, 3, 32, 32))
    return sup, net, zs, zf, x


@pytest.mark.parametrize("seed", range(3))
def test_one_hot_supernet_equals_discrete_network(seed):
    sup, net, zs, zf, x = _collapse_pair(seed)
    with T.no_grad():
        a = sup(x, [T.Tensor(z) for z in zs], T.Tensor(zf), training=False).data
        b = net(x, training=False).data
    assert np.array_equal(a, b)


def test_supernet_requires_masks_and_input_multiple_of_16():
    sup = build_supernet(SMALL)
    with pytest.raises(ValueError):
        sup(np.zeros((1, 3, 32, 32)))
    net = Network(SMALL, uniform_genotype(SMALL, "skip"))
    with pytest.raises(ValueError):
        net(np.zeros((1, 3, 30, 32)))
    with pytest.raises(ValueError):
        Network(NetworkTopology(), uniform_genotype(SMALL, "skip"))


def test_network_output_shape_and_backward():
    net = Network(SMALL, uniform_genotype(SMALL, "sep_conv3x3", "dil_sep_conv3x3_d2"),
                  np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(size=(2, 3, 32, 64))
    out = net(x)
    assert out.shape == (2, 4, 32, 64)
    T.backward(T.cross_entropy(out, np.zeros((2, 32, 64), dtype=int)))
    assert all(np.isfinite(p.grad).all() for p in net.parameters())
