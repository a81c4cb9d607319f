from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from archsearch import engine
from archsearch.data import SyntheticSpec, generate_synthetic
from archsearch.engine import SGD, Adam, FinetuneConfig, RunLog, SearchConfig, cosine_lr, poly_lr
from archsearch.latency import build_lut, genotype_latency
from archsearch.primitives import CELL_OPS
from archsearch.searchspace import NetworkTopology, random_genotype
from archsearch.tensor import Tensor

SMALL = NetworkTopology(cells=4, reduction_indices=(1, 2), initial_channels=4, fusion_taps=(0, 1, 2))
RES = (32, 64)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SyntheticSpec(n_train=8, n_val=4, height=RES[0], width=RES[1]), 0)


@pytest.fixture(scope="module")
def lut():
    return build_lut(SMALL, resolution=RES)


def small_cfg(**kw):
    return SearchConfig(seed=kw.pop("seed", 0), steps=kw.pop("steps", 3), topology=SMALL, **kw)


def test_adam_matches_hand_computation():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1, betas=(0.5, 0.999), eps=1e-8, weight_decay=0.01)
    g = np.array([0.4, -0.2])
    p.grad = g.copy()
    opt.step()
    x = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01)
    m, v = 0.5 * g, 0.001 * g * g
    x -= 0.1 * (m / 0.5) / (np.sqrt(v / 0.001) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=1e-15)
    p.grad = None
    before = p.data.copy()
    opt.step()
    np.testing.assert_allclose(p.data, before * (1 - 0.1 * 0.01))


def test_sgd_momentum_with_coupled_decay():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.1)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(1 - 0.1 * 1.1)
    p.grad = np.array([1.0])
    x1 = p.data[0]
    opt.step()
    assert p.data[0] == pytest.approx(x1 - 0.1 * (0.9 * 1.1 + 1 + 0.1 * x1))


def test_schedules():
    assert cosine_lr(0, 100) == 0.025
    assert cosine_lr(100, 100) == pytest.approx(0.001)
    assert cosine_lr(50, 100) == pytest.approx(0.013)
    assert poly_lr(0, 10, 0.01) == 0.01 and poly_lr(10, 10, 0.01) == 0.0
    assert poly_lr(5, 10, 0.01, 0.9) == pytest.approx(0.01 * 0.5 ** 0.9)


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(seed=None)
    with pytest.raises(ValueError):
        SearchConfig(seed=0, ggm_mode="attention")
    with pytest.raises(ValueError):
        SearchConfig(seed=0, beta=-1)
    c = SearchConfig(seed=0)
    assert c.for_strategy("shared").shared_cells
    assert c.for_strategy("independent").ggm_mode == "none"
    assert c.for_strategy("fc").ggm_mode == "fc"
    assert c.for_strategy("gcn").ggm_mode == "edge_similarity"


def test_zero_step_search_decodes_first_column(data, lut):
    g, log, _ = engine.search(small_cfg(steps=0), data, lut)
    assert len(log) == 0
    assert all(op == "max_pool3x3" for c in g.cells for op in c)


def test_search_logs_and_is_deterministic(data, lut):
    g1, log1, _ = engine.search(small_cfg(), data, lut)
    g2, log2, _ = engine.search(small_cfg(), data, lut)
    assert g1 == g2 and log1.to_jsonl() == log2.to_jsonl()
    rec = log1.records[0]
    assert tuple(rec) == engine.LOG_FIELDS and rec["lambda"] == 1.0 and rec["lat_us"] > 0
    assert RunLog.from_jsonl(log1.to_jsonl()).records == log1.records
    assert log1.genotype == engine.genotype_hash(g1)


def test_gamma_zero_gcn_equals_independent(data, lut):
    a = engine.search(small_cfg(ggm_gamma=0.0), data, lut)
    b = engine.search(small_cfg().for_strategy("independent"), data, lut)
    assert a[0] == b[0] and a[1].to_jsonl() == b[1].to_jsonl()


def test_search_moves_architecture_and_ggm(data, lut):
    _, _, st = engine.search(small_cfg(steps=2), data, lut)
    assert any(np.abs(m.data).max() > 0 for m in st.arch.parameters())
    assert any(np.abs(w.phi2_w.data).max() > 0 for w in st.ggm)


def test_latency_term_steers_architecture(data, lut):
    _, _, st = engine.search(small_cfg(steps=4, beta=100.0, lr_a=0.05), data, lut)
    conv = CELL_OPS.index("conv3x3")
    zero = CELL_OPS.index("zero")
    for m in st.arch.cells():
        assert (m.data[:, zero] > m.data[:, conv]).all()


def test_mismatched_lut_rejected(data):
    with pytest.raises(ValueError):
        engine.search(small_cfg(), data, build_lut(NetworkTopology()))


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_divergence_reports_step(data, lut):
    with pytest.raises(engine.SearchDiverged) as info:
        engine.search(small_cfg(steps=20, lr_w_max=1e12, lr_w_min=1e11), data, lut)
    assert 0 < info.value.step < 20
    assert len(info.value.log) == info.value.step


@pytest.mark.slow
def test_two_class_training_reduces_loss():
    d = generate_synthetic(SyntheticSpec(n_train=8, n_val=2, height=32, width=32, num_classes=2), 0)
    topo = replace(SMALL, num_classes=2)
    # constant temperature: a 200-step anneal would reach near one-hot masks at once
    cfg = SearchConfig(seed=0, steps=200, topology=topo, beta=0.0, lambda_min=1.0)
    _, log, _ = engine.search(cfg, d, build_lut(topo, resolution=(32, 32)))
    ce = np.array([r["ce"] for r in log.records])
    assert ce[-40:].mean() < 0.85 * ce[:20].mean()


def test_random_genotype_ops_are_uniform():
    rng = np.random.default_rng(0)
    counts = np.zeros(len(CELL_OPS))
    for _ in range(400):
        g = random_genotype(SMALL, rng)
        for c in g.cells:
            for op in c:
                counts[[o.value for o in CELL_OPS].index(op)] += 1
    assert stats.chisquare(counts).pvalue > 0.001


def test_finetune_and_evaluate(data):
    g = random_genotype(SMALL, np.random.default_rng(3))
    cfg = FinetuneConfig(seed=0, steps=4, batch=2, eval_every=2)
    net, score = engine.finetune(g, data, cfg, SMALL)
    assert 0.0 <= score <= 1.0
    cm = engine.evaluate(net, data.val)
    assert cm.sum() == data.val.labels.size
    _, again = engine.finetune(g, data, cfg, SMALL)
    assert again == score


def test_random_baseline_respects_band(data, lut):
    rng = np.random.default_rng(0)
    lats = [genotype_latency(random_genotype(SMALL, rng), lut) for _ in range(200)]
    band = (float(np.percentile(lats, 40)), float(np.percentile(lats, 60)))
    rows = engine.random_search_baseline(2, data, lut, FinetuneConfig(seed=0, steps=1, batch=2),
                                         SMALL, band=band, seed=1)
    assert len(rows) == 2 and [r["hash"] for r in rows] == sorted(r["hash"] for r in rows)
    assert all(band[0] <= r["latency_us"] <= band[1] for r in rows)
    with pytest.raises(RuntimeError):
        engine.sample_in_band(SMALL, lut, (0.0, 1.0), rng, max_tries=10)


def test_ablation_report_schema(data, lut):
    ft = FinetuneConfig(seed=0, steps=1, batch=2)
    report, results = engine.ablate(small_cfg(steps=1), data, lut, ft, seeds=[0, 1],
                                    strategies=("shared", "gcn"))
    assert [r["strategy"] for r in report["rows"]] == ["shared", "gcn"]
    row = report["rows"][1]
    assert row["label"] == "independent cell + GCN"
    assert row["miou_var"] == pytest.approx(np.var(row["miou"]))
    assert set(row) >= {"miou_mean", "miou_var", "params_mean", "latency_us_mean"}
    again, _ = engine.ablate(small_cfg(steps=1), data, lut, ft, seeds=[0, 1],
                             strategies=("shared", "gcn"), results=results)
    assert again == report


def test_beta_sweep_rows(data, lut):
    rows = engine.beta_sweep(small_cfg(steps=1), data, lut, betas=(0.0, 0.1))
    assert [r["beta"] for r in rows] == [0.0, 0.1]
    assert all(r["latency_us"] > 0 for r in rows)
