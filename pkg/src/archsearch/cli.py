"""Command-line entry point: ``archsearch <command> --config PATH [...]``.

Exit codes: 0 success, 1 configuration error, 2 latency-table error,
3 search divergence, 4 artifact mismatch (genotype vs topology/table).
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import engine
from .config import ConfigError, RunConfig, load_config_file
from .data import DatasetSplit, generate_synthetic, load_dataset
from .latency import LatencyTable, LatencyTableError, TimerPolicy, build_lut, genotype_latency
from .network import count_params
from .searchspace import GenotypeError, genotype_parse, genotype_serialize
from .viz import genotype_to_dot

EXIT_OK, EXIT_CONFIG, EXIT_LUT, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _dump(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _out_dir(args, cfg: RunConfig):
    return args.out or cfg.output_dir


def _lut_path(args, cfg, out):
    return args.lut or cfg.raw["lut"]["path"] or os.path.join(out, "lut.json")


def _dataset(cfg: RunConfig) -> DatasetSplit:
    d = cfg.raw["data"]
    if d["source"] == "synthetic":
        return generate_synthetic(cfg.synthetic_spec(), d["seed"])
    label_map = d["label_map"]
    split = DatasetSplit(load_dataset(d["train_dir"], label_map), load_dataset(d["val_dir"], label_map))
    if split.num_classes != d["num_classes"]:
        raise CliError(EXIT_CONFIG, "data.num_classes disagrees with the dataset manifest")
    return split


def _load_lut(path, topology):
    if not os.path.exists(path):
        raise CliError(EXIT_LUT, f"latency table not found: {path} (run the lut command first)")
    try:
        lut = LatencyTable.load(path)
    except LatencyTableError as exc:
        raise CliError(EXIT_LUT, str(exc)) from None
    if lut.topology_echo != topology.echo():
        raise CliError(EXIT_MISMATCH, "latency table topology differs from the configured topology")
    return lut


def _load_genotype(path, topology):
    if not path:
        raise CliError(EXIT_CONFIG, "--genotype is required for this command")
    try:
        with open(path, encoding="utf-8") as f:
            g = genotype_parse(f.read())
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read genotype: {exc}") from None
    except (GenotypeError, ValueError) as exc:
        raise CliError(EXIT_MISMATCH, f"invalid genotype: {exc}") from None
    if topology is not None and not g.matches(topology):
        raise CliError(EXIT_MISMATCH, "genotype topology differs from the configured topology")
    return g


# ------------------------------------------------------------------ commands

def cmd_lut(args, cfg):
    out = _out_dir(args, cfg)
    mode = args.lut_mode or cfg.raw["lut"]["mode"]
    lc = cfg.raw["lut"]
    try:
        lut = build_lut(cfg.topology(), mode, TimerPolicy(lc["warmup"], lc["runs"]),
                        tuple(lc["resolution"]))
    except LatencyTableError as exc:
        raise CliError(EXIT_LUT, str(exc)) from None
    path = _lut_path(args, cfg, out)
    lut.save(path)
    print(f"wrote {path}")


def cmd_search(args, cfg):
    out = _out_dir(args, cfg)
    scfg = cfg.search_config()
    lut = _load_lut(_lut_path(args, cfg, out), scfg.topology)
    data = _dataset(cfg)
    try:
        g, log, _ = engine.search(scfg, data, lut)
    except engine.SearchDiverged as exc:
        _write(os.path.join(out, "runlog.jsonl"), exc.log.to_jsonl())
        last = exc.step - 1
        raise CliError(EXIT_DIVERGED, f"{exc}; last valid step {last}") from None
    _write(os.path.join(out, "genotype.json"), genotype_serialize(g))
    _write(os.path.join(out, "runlog.jsonl"), log.to_jsonl())
    print(f"wrote {os.path.join(out, 'genotype.json')} ({len(log)} steps)")


def cmd_eval(args, cfg):
    out = _out_dir(args, cfg)
    topo = cfg.topology()
    g = _load_genotype(args.genotype, topo)
    lut = _load_lut(_lut_path(args, cfg, out), topo)
    data = _dataset(cfg)
    _, score = engine.finetune(g, data, cfg.finetune_config(), topo)
    report = {"genotype": engine.genotype_hash(g), "miou": score,
              "params": count_params(g, topo), "latency_us": genotype_latency(g, lut)}
    _write(os.path.join(out, "eval_report.json"), _dump(report))
    print(_dump(report), end="")


def cmd_random(args, cfg):
    out = _out_dir(args, cfg)
    topo = cfg.topology()
    lut = _load_lut(_lut_path(args, cfg, out), topo)
    rc = cfg.raw["random"]
    band = None if rc["band"] is None else tuple(float(b) for b in rc["band"])
    try:
        rows = engine.random_search_baseline(rc["n"], _dataset(cfg), lut, cfg.finetune_config(),
                                             topo, band=band, seed=rc["seed"])
    except RuntimeError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    report = {"band": rc["band"], "rows": [
        {"hash": r["hash"], "miou": r["miou"], "latency_us": r["latency_us"],
         "genotype": r["genotype"].to_dict()} for r in rows]}
    report["miou_mean"] = sum(r["miou"] for r in rows) / max(len(rows), 1)
    _write(os.path.join(out, "random_report.json"), _dump(report))
    print(f"{len(rows)} random genotypes, mean mIoU {report['miou_mean']:.4f}")


def cmd_ablate(args, cfg):
    out = _out_dir(args, cfg)
    scfg = cfg.search_config()
    lut = _load_lut(_lut_path(args, cfg, out), scfg.topology)
    ac = cfg.raw["ablate"]
    report, _ = engine.ablate(scfg, _dataset(cfg), lut, cfg.finetune_config(), ac["seeds"],
                              tuple(ac["strategies"]))
    _write(os.path.join(out, "ablation_report.json"), _dump(report))
    for row in report["rows"]:
        print(f"{row['label']:<26} mIoU {row['miou_mean']:.4f} ± {row['miou_var']:.2e} "
              f"params {row['params_mean']:.0f} latency {row['latency_us_mean']:.1f} µs")


def cmd_beta_sweep(args, cfg):
    out = _out_dir(args, cfg)
    scfg = cfg.search_config()
    lut = _load_lut(_lut_path(args, cfg, out), scfg.topology)
    rows = engine.beta_sweep(scfg, _dataset(cfg), lut, tuple(cfg.raw["beta_sweep"]["betas"]))
    report = {"rows": [{"beta": r["beta"], "latency_us": r["latency_us"],
                        "genotype": r["genotype"].to_dict()} for r in rows]}
    _write(os.path.join(out, "beta_sweep_report.json"), _dump(report))
    for r in rows:
        print(f"beta {r['beta']:<8g} latency {r['latency_us']:.1f} µs")


def cmd_dot(args, cfg):
    g = _load_genotype(args.genotype, None)
    text = genotype_to_dot(g)
    if args.out:
        _write(os.path.join(args.out, "genotype.dot"), text)
    else:
        sys.stdout.write(text)


COMMANDS = {"lut": cmd_lut, "search": cmd_search, "eval": cmd_eval, "random": cmd_random,
            "ablate": cmd_ablate, "beta-sweep": cmd_beta_sweep, "dot": cmd_dot}


def build_parser():
    p = argparse.ArgumentParser(prog="archsearch",
                                description="Latency-constrained differentiable architecture search.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--lut", help="latency table path")
    p.add_argument("--genotype", help="genotype file (eval, dot)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--lut-mode", choices=("measured", "analytic"))
    p.add_argument("--seed", type=int, help="overrides search.seed")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config_file(args.config, seed=args.seed)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
