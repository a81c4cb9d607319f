import json

import numpy as np
import pytest

from archsearch import tensor as T
from archsearch.latency import EdgeShape, LatencyTable, LatencyTableError, LossTerms, TimerPolicy, \
    analytic_cost, build_lut, cell_edge_shapes, expected_cell_latency, expected_total_latency, \
    fusion_edge_shapes, genotype_latency, one_hot_masks, op_macs, total_loss
from archsearch.primitives import CELL_OPS
from archsearch.searchspace import NetworkTopology, random_genotype, uniform_genotype
from archsearch.tensor import Tensor

SMALL = NetworkTopology(cells=4, reduction_indices=(1, 2), initial_channels=4, fusion_taps=(0, 1, 2))
TOY = NetworkTopology(cells=2, reduction_indices=(1,), initial_channels=4, fusion_taps=None)


@pytest.fixture(scope="module")
def lut():
    return build_lut(NetworkTopology())


def toy_lut():
    rng = np.random.default_rng(0)
    cells = [np.round(rng.uniform(1, 50, (5, 8)), 2) for _ in range(2)]
    return LatencyTable(cells, None, 7.0, {"topology": TOY.echo(), "mode": "analytic"})


def test_hand_costs():
    sh = EdgeShape(8, 8, 16, 32, 1)
    assert op_macs("conv3x3", sh) == 9 * 8 * 8 * 16 * 32
    assert op_macs("sep_conv3x3", sh) == 9 * 8 * 512 + 8 * 8 * 512
    assert op_macs("skip", sh) == 0
    assert op_macs("skip", EdgeShape(8, 8, 16, 32, 2)) == 8 * 8 * 128
    assert analytic_cost("zero", sh) == 5.0
    assert analytic_cost("conv3x3", sh) == pytest.approx(1e-4 * 294912 + 1e-4 * 4096 + 5.0)
    assert op_macs("bilinear_upsample_x2", EdgeShape(48, 48, 4, 8, 1, up=True)) == 4 * 48 * 128


def test_edge_shapes_follow_topology():
    t = NetworkTopology()
    s = cell_edge_shapes(t, 1)
    assert s[0] == EdgeShape(16, 16, 16, 32, 2) and s[4] == EdgeShape(16, 16, 8, 16, 1)
    f = fusion_edge_shapes()
    assert f[0] == EdgeShape(48, 48, 4, 8, 1) and f[1].up and f[8].c_in == 48
    assert f[10].c_in == 144 and f[12].c_in == 96


def test_analytic_table_is_deterministic_and_ordered(lut):
    again = build_lut(NetworkTopology())
    assert lut.dumps() == again.dumps()
    conv = CELL_OPS.index("conv3x3")
    sep = CELL_OPS.index("sep_conv3x3")
    zero = CELL_OPS.index("zero")
    for c in lut.cells:
        assert (c[:, conv] > c[:, sep]).all() and (c[:, zero] == c.min(1)).all()
    t = NetworkTopology()
    assert genotype_latency(uniform_genotype(t, "zero"), lut) < \
        genotype_latency(uniform_genotype(t, "sep_conv3x3"), lut) < \
        genotype_latency(uniform_genotype(t, "conv3x3"), lut)


def test_json_roundtrip(lut, tmp_path):
    p = tmp_path / "lut.json"
    lut.save(p)
    back = LatencyTable.load(p)
    assert back.dumps() == lut.dumps()
    obj = json.loads(lut.dumps())
    assert obj["metadata"]["topology"] == NetworkTopology().echo()
    assert set(obj["entries"]["fusion"]["01"]) == {"transposed_conv_x2", "bilinear_upsample_x2"}


def test_missing_or_invalid_entries_are_named(lut):
    obj = json.loads(lut.dumps())
    del obj["entries"]["03"]["02"]["conv3x3"]
    with pytest.raises(LatencyTableError, match="cell 3 edge 2 op conv3x3"):
        LatencyTable.loads(json.dumps(obj))
    obj = json.loads(lut.dumps())
    obj["entries"]["00"]["00"]["skip"] = -1.0
    with pytest.raises(LatencyTableError):
        LatencyTable.loads(json.dumps(obj))
    with pytest.raises(LatencyTableError):
        LatencyTable.loads("{}")
    with pytest.raises(LatencyTableError):
        lut.entry("fusion", 1, "conv1x1")


def test_one_hot_masks_reproduce_genotype_latency(lut):
    rng = np.random.default_rng(0)
    for _ in range(25):
        g = random_genotype(NetworkTopology(), rng)
        zs, zf = one_hot_masks(g)
        est = expected_total_latency([Tensor(z) for z in zs], Tensor(zf), lut).item()
        assert est == pytest.approx(genotype_latency(g, lut), rel=1e-12)


def test_expected_latency_is_linear_in_masks():
    lut = toy_lut()
    rng = np.random.default_rng(1)
    z1, z2 = rng.uniform(size=(5, 8)), rng.uniform(size=(5, 8))
    a, b = 0.3, 1.7
    lhs = expected_cell_latency(a * z1 + b * z2, lut, 0).item()
    rhs = a * expected_cell_latency(z1, lut, 0).item() + b * expected_cell_latency(z2, lut, 0).item()
    assert lhs == pytest.approx(rhs, rel=1e-13)


def test_uniform_mask_is_mean_sum():
    lut = toy_lut()
    z = np.full((5, 8), 1 / 8)
    total = expected_total_latency([Tensor(z), Tensor(z)], None, lut).item()
    by_hand = 7.0
    for k in range(2):
        for e in range(5):
            by_hand += sum(lut.cells[k][e]) / 8
    assert total == pytest.approx(by_hand, rel=1e-12)


def test_latency_gradient_is_the_table(lut):
    z = Tensor(np.full((5, 8), 1 / 8), requires_grad=True)
    T.backward(expected_cell_latency(z, lut, 3))
    np.testing.assert_array_equal(z.grad, lut.cells[3])


def test_topology_mismatch_rejected(lut):
    with pytest.raises(LatencyTableError):
        genotype_latency(uniform_genotype(SMALL, "skip"), lut)
    with pytest.raises(LatencyTableError):
        expected_total_latency([np.zeros((5, 8))] * 3, None, lut)


def test_total_loss():
    assert total_loss(2.0, 100.0, 0.0).item() == 2.0
    assert total_loss(2.0, 100.0, 0.5).item() == pytest.approx(2.0 + 0.5 * np.log(100.0))
    with pytest.raises(ValueError):
        total_loss(1.0, 0.0, 0.1)
    t = LossTerms.of(1.0, np.e, 2.0)
    assert t.total == pytest.approx(3.0)


def test_measured_table_smoke():
    topo = NetworkTopology(cells=3, reduction_indices=(1,), initial_channels=2, fusion_taps=None)
    lut = build_lut(topo, "measured", TimerPolicy(warmup=1, runs=3), resolution=(16, 16))
    assert lut.metadata["mode"] == "measured" and "host" in lut.metadata
    assert lut.metadata["timing_policy"]["runs"] == 3
    assert all((c > 0).all() for c in lut.cells)
    assert LatencyTable.loads(lut.dumps()).dumps() == lut.dumps()
