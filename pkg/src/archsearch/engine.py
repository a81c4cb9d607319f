"""Search loop, optimizers, finetuning and the comparison protocols."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import DatasetSplit, SegDataset, augment, confusion_matrix, miou
from .ggm import MODES, build_ggm, updated_cell_logits
from .latency import LatencyTable, expected_total_latency, genotype_latency, total_loss
from .network import Network, build_supernet
from .relax import ArchParams, TemperatureSchedule, gumbel_softmax_logits, sample_gumbel, \
    temperature_at
from .searchspace import Genotype, NetworkTopology, decode, genotype_serialize, random_genotype

STRATEGIES = ("shared", "independent", "fc", "gcn")
STRATEGY_LABELS = {"shared": "shared cell", "independent": "independent cell",
                   "fc": "independent cell + FC", "gcn": "independent cell + GCN"}
LOG_FIELDS = ("step", "ce", "lat_us", "loss", "lambda", "lr_w", "lr_a")


class SearchDiverged(RuntimeError):
    def __init__(self, step, log, reason):
        super().__init__(f"non-finite loss at step {step}: {reason}")
        self.step = step
        self.log = log


# ---------------------------------------------------------------- schedules

def cosine_lr(t, total, lr_max=0.025, lr_min=0.001):
    if total <= 0:
        return lr_max
    t = min(max(t, 0), total)
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t / total))


def poly_lr(t, total, base=0.01, power=0.9):
    if total <= 0:
        return base
    return base * (1 - min(max(t, 0), total) / total) ** power


# --------------------------------------------------------------- optimizers

class Adam:
    """Adam with decoupled weight decay (applied to the parameter, not the moments)."""

    def __init__(self, params, lr=0.001, betas=(0.5, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr=0.025, momentum=0.9, weight_decay=1e-3):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p, b in zip(self.params, self.buf):
            g = p.grad
            if g is None:
                if not self.weight_decay:
                    continue
                g = np.zeros_like(p.data)
            d = g + self.weight_decay * p.data
            b *= self.momentum
            b += d
            p.data -= lr * b


def zero_grad(params):
    for p in params:
        p.grad = None


# ------------------------------------------------------------------ configs

@dataclass(frozen=True)
class SearchConfig:
    seed: int
    steps: int = 2000
    batch: int = 2
    lr_w_max: float = 0.025
    lr_w_min: float = 0.001
    momentum: float = 0.9
    weight_decay_w: float = 1e-3
    lr_a: float = 0.001
    adam_betas: tuple = (0.5, 0.999)
    weight_decay_a: float = 1e-4
    beta: float = 0.005
    lambda_init: float = 1.0
    lambda_min: float = 0.03
    ggm_mode: str = "edge_similarity"
    ggm_gamma: float = 0.5
    ggm_dim: int = 64
    ggm_cascade: bool = False
    shared_cells: bool = False
    topology: NetworkTopology = field(default_factory=NetworkTopology)

    def __post_init__(self):
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool):
            raise ValueError("seed must be an explicit integer")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps >= 0 and batch >= 1 required")
        for name in ("lr_w_max", "lr_w_min", "lr_a", "lambda_init", "lambda_min"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.beta < 0 or self.ggm_gamma < 0:
            raise ValueError("beta and ggm_gamma must be non-negative")
        if self.ggm_mode not in MODES:
            raise ValueError(f"unknown ggm mode {self.ggm_mode!r}")

    @property
    def schedule(self):
        return TemperatureSchedule(self.steps, self.lambda_init, self.lambda_min)

    def for_strategy(self, strategy):
        """Copy configured for one ablation strategy."""
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        mode = {"shared": "none", "independent": "none", "fc": "fc",
                "gcn": self.ggm_mode if self.ggm_mode not in ("none", "fc") else "edge_similarity"}
        return replace(self, ggm_mode=mode[strategy], shared_cells=strategy == "shared")


@dataclass(frozen=True)
class FinetuneConfig:
    seed: int
    steps: int = 300
    batch: int = 8
    lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eval_every: int = 50
    scale_range: tuple = (0.5, 2.0)


# ------------------------------------------------------------------- run log

class RunLog:
    """Append-only per-step records, serialised as one JSON object per line."""

    def __init__(self):
        self.records = []
        self.genotype = None

    def append(self, **rec):
        self.records.append({k: rec[k] for k in LOG_FIELDS})

    def __len__(self):
        return len(self.records)

    def to_jsonl(self):
        return "".join(json.dumps(r) + "\n" for r in self.records)

    @staticmethod
    def from_jsonl(text):
        log = RunLog()
        for line in text.splitlines():
            if line.strip():
                log.records.append(json.loads(line))
        return log


# -------------------------------------------------------------------- search

@dataclass
class SearchState:
    net: Network
    arch: ArchParams
    ggm: list


def _streams(seed):
    net_s, ggm_s, noise_s, data_s = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(net_s), np.random.default_rng(ggm_s),
            np.random.default_rng(noise_s), np.random.default_rng(data_s))


def _batches(n, batch, rng):
    """Endless stream of index batches, reshuffled every pass."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch + 1 if n >= batch else 1, batch):
            idx = perm[i:i + batch]
            if len(idx) < batch:
                idx = np.concatenate([idx, rng.integers(0, n, batch - len(idx))])
            yield idx


def init_search(cfg: SearchConfig):
    net_rng, ggm_rng, _, _ = _streams(cfg.seed)
    topo = cfg.topology
    net = build_supernet(topo, net_rng)
    arch = ArchParams(topo, shared=cfg.shared_cells)
    ggm = []
    if not cfg.shared_cells and cfg.ggm_mode != "none":
        ggm = build_ggm(topo, cfg.ggm_mode, d=cfg.ggm_dim, gamma=cfg.ggm_gamma, rng=ggm_rng)
    return SearchState(net, arch, ggm)


def sample_masks(state: SearchState, cfg: SearchConfig, lam, rng):
    """Gumbel-softmax masks for every cell (from GGM-updated logits) and the fusion cell."""
    mats = updated_cell_logits(state.arch, state.ggm, mode=cfg.ggm_mode, cascade=cfg.ggm_cascade)
    zs = [gumbel_softmax_logits(m, sample_gumbel(m.shape, rng), lam) for m in mats]
    zf = None
    if state.arch.fusion_logits is not None:
        f = state.arch.fusion_logits
        zf = gumbel_softmax_logits(f, sample_gumbel(f.shape, rng), lam, state.arch.fusion_mask)
    return zs, zf


def search_step(state, cfg, lut, x, y, lam, noise_rng):
    """Forward + single backward pass; returns (ce, lat, loss) tensors."""
    zs, zf = sample_masks(state, cfg, lam, noise_rng)
    logits = state.net(x, zs, zf, training=True)
    ce = T.cross_entropy(logits, y)
    lat = expected_total_latency(zs, zf, lut)
    loss = total_loss(ce, lat, cfg.beta)
    T.backward(loss)
    return ce, lat, loss


def arch_parameters(state):
    out = state.arch.parameters()
    for w in state.ggm:
        out += w.parameters()
    return out


def search(cfg: SearchConfig, data: DatasetSplit | SegDataset, lut: LatencyTable,
           progress=None):
    """Single-level joint search; returns ``(genotype, run_log, state)``.

    Every step draws fresh Gumbel noise, builds the masks from the GGM-updated
    logits, and updates architecture + GGM weights (Adam) and network weights
    (SGD, cosine schedule) from the same backward pass.
    """
    train = data.train if isinstance(data, DatasetSplit) else data
    if lut.topology_echo != cfg.topology.echo():
        raise ValueError("latency table was built for a different topology")
    if train.num_classes != cfg.topology.num_classes:
        raise ValueError("dataset class count differs from the topology")
    _, _, noise_rng, data_rng = _streams(cfg.seed)
    state = init_search(cfg)
    a_params = arch_parameters(state)
    w_params = state.net.parameters()
    adam = Adam(a_params, cfg.lr_a, cfg.adam_betas, weight_decay=cfg.weight_decay_a)
    sgd = SGD(w_params, cfg.lr_w_max, cfg.momentum, cfg.weight_decay_w)
    log = RunLog()
    batches = _batches(len(train), cfg.batch, data_rng)
    sched = cfg.schedule
    for t in range(cfg.steps):
        lam = temperature_at(t, sched)
        lr_w = cosine_lr(t, cfg.steps, cfg.lr_w_max, cfg.lr_w_min)
        idx = next(batches)
        x, y = train.images[idx], train.labels[idx]
        try:
            ce, lat, loss = search_step(state, cfg, lut, x, y, lam, noise_rng)
        except FloatingPointError as exc:
            T.current_tape().clear()
            raise SearchDiverged(t, log, str(exc)) from None
        if not np.isfinite(loss.item()):
            raise SearchDiverged(t, log, f"loss = {loss.item()}")
        adam.step()
        sgd.step(lr_w)
        zero_grad(a_params)
        zero_grad(w_params)
        log.append(step=t, ce=ce.item(), lat_us=lat.item(), loss=loss.item(), **{"lambda": lam},
                   lr_w=lr_w, lr_a=cfg.lr_a)
        if progress is not None:
            progress(log.records[-1])
    g = decode(state.arch, state.ggm, mode=cfg.ggm_mode, cascade=cfg.ggm_cascade)
    log.genotype = genotype_hash(g)
    return g, log, state


def genotype_hash(g: Genotype) -> str:
    return hashlib.sha256(genotype_serialize(g).encode()).hexdigest()[:16]


# ------------------------------------------------------------------ finetune

def evaluate(net: Network, ds: SegDataset, batch=8):
    """Confusion matrix of argmax predictions (inference-mode batch norm)."""
    k = net.topology.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    with T.no_grad():
        for i in range(0, len(ds), batch):
            out = net(ds.images[i:i + batch], training=False)
            pred = out.data.argmax(axis=1)
            cm += confusion_matrix(pred, ds.labels[i:i + batch], k)
    return cm


def finetune(g: Genotype, data: DatasetSplit, cfg: FinetuneConfig, topology=None):
    """Train the discrete network from scratch; returns ``(net, best val mIoU)``.

    Poly schedule from ``cfg.lr`` to 0 with flip / rescale / crop augmentation.
    """
    topology = NetworkTopology.from_echo(g.topology, data.num_classes) if topology is None \
        else topology
    seq = np.random.SeedSequence([cfg.seed, int(genotype_hash(g), 16) % (2 ** 32)])
    init_rng, data_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    net = Network(topology, g, rng=init_rng)
    params = net.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    train = data.train
    batches = _batches(len(train), cfg.batch, data_rng)
    best = -1.0
    best_state = None
    h, w = train.size
    for t in range(cfg.steps):
        idx = next(batches)
        xs, ys = zip(*(augment(train.images[i], train.labels[i], data_rng, (h, w),
                               cfg.scale_range) for i in idx))
        x, y = np.stack(xs), np.stack(ys)
        try:
            out = net(x, training=True)
            loss = T.cross_entropy(out, y)
            T.backward(loss)
        except FloatingPointError as exc:
            T.current_tape().clear()
            raise SearchDiverged(t, None, str(exc)) from None
        opt.step(poly_lr(t, cfg.steps, cfg.lr, cfg.power))
        zero_grad(params)
        if (t + 1) % cfg.eval_every == 0 or t + 1 == cfg.steps:
            score = miou(evaluate(net, data.val))
            if score > best:
                best, best_state = score, net.state()
    if best_state is None:
        best = miou(evaluate(net, data.val))
    else:
        net.load_state(best_state)
    return net, best


# ---------------------------------------------------------- random baseline

def sample_in_band(topology, lut, band, rng, max_tries=100_000):
    lo, hi = (0.0, math.inf) if band is None else band
    for _ in range(max_tries):
        g = random_genotype(topology, rng)
        lat = genotype_latency(g, lut)
        if lo <= lat <= hi:
            return g, lat
    raise RuntimeError(f"no genotype in latency band {band} after {max_tries} draws")


def random_search_baseline(n, data: DatasetSplit, lut: LatencyTable, ft_cfg: FinetuneConfig,
                           topology: NetworkTopology, band=None, seed=0, max_tries=100_000):
    """``n`` uniformly sampled genotypes (optionally rejected into ``band``), each finetuned.

    Returns dicts sorted by genotype hash so the report does not depend on the
    order candidates were trained in.
    """
    rng = np.random.default_rng(seed)
    picks = [sample_in_band(topology, lut, band, rng, max_tries) for _ in range(n)]
    rows = []
    for g, lat in picks:
        _, score = finetune(g, data, ft_cfg, topology)
        rows.append({"hash": genotype_hash(g), "genotype": g, "miou": score, "latency_us": lat})
    return sorted(rows, key=lambda r: r["hash"])


# ----------------------------------------------------------------- ablation

def ablate(cfg: SearchConfig, data: DatasetSplit, lut: LatencyTable, ft_cfg: FinetuneConfig,
           seeds, strategies=STRATEGIES, results=None):
    """Search + finetune under each strategy and seed; mean and variance of mIoU.

    ``results`` may pre-fill ``{(strategy, seed): row}`` entries already computed.
    """
    from .network import count_params

    results = {} if results is None else dict(results)
    for s in strategies:
        for seed in seeds:
            if (s, seed) in results:
                continue
            scfg = replace(cfg.for_strategy(s), seed=seed)
            g, _, _ = search(scfg, data, lut)
            _, score = finetune(g, data, replace(ft_cfg, seed=seed), scfg.topology)
            results[(s, seed)] = {"genotype": g, "miou": score,
                                  "params": count_params(g, scfg.topology),
                                  "latency_us": genotype_latency(g, lut)}
    return ablation_report(results, strategies, seeds), results


def ablation_report(results, strategies, seeds):
    rows = []
    for s in strategies:
        vals = np.array([results[(s, seed)]["miou"] for seed in seeds])
        params = np.array([results[(s, seed)]["params"] for seed in seeds], dtype=float)
        lats = np.array([results[(s, seed)]["latency_us"] for seed in seeds])
        rows.append({"strategy": s, "label": STRATEGY_LABELS[s],
                     "miou_mean": float(vals.mean()), "miou_var": float(vals.var()),
                     "miou": [float(v) for v in vals],
                     "params_mean": float(params.mean()), "latency_us_mean": float(lats.mean())})
    return {"seeds": list(seeds), "rows": rows}


# --------------------------------------------------------------- beta sweep

def beta_sweep(cfg: SearchConfig, data: DatasetSplit, lut: LatencyTable,
               betas=(0.0005, 0.005, 0.05)):
    rows = []
    for b in betas:
        g, log, _ = search(replace(cfg, beta=b), data, lut)
        rows.append({"beta": b, "genotype": g, "latency_us": genotype_latency(g, lut),
                     "final_ce": log.records[-1]["ce"] if len(log) else None})
    return rows


def config_dict(cfg):
    d = asdict(cfg)
    if "topology" in d:
        d["topology"] = asdict(cfg.topology)
    return d
