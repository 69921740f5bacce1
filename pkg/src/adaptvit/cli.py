"""Command-line entry point.

Every subcommand reads one JSON config (``--config``), applies the global
overrides, validates everything before computing, writes its artifacts under
``--out`` and finishes with a ``manifest_<command>.json`` describing the run.
Errors go to stderr as a single ``adaptvit: error: <kind>: <message>`` line.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .container import (FormatError, load_dataset, load_selector, load_weights, save_dataset,
                        save_weights)
from .elastic import (ElasticConfig, block_formula, block_macs, closed_form_uniform,
                      count_flops, max_arch)
from .harness import (STRATEGY_ALIASES, Dataset, EvalReport, TrainConfig, evaluate,
                      finetune_backbone, generate_synthetic, load_or_generate, pretrain_meta,
                      train_selector)

COMMANDS = ("gen-data", "pretrain", "train-selector", "finetune", "eval", "flops", "sweep", "trace")
SWEEP_SHORTCUTS = {"a_f": "selector.reward.a_f", "a_t": "selector.reward.a_t",
                   "entropy_coef": "selector.ppo.entropy_coef"}


class UsageError(Exception):
    """Bad invocation or config; reported with exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ config

def canonical_json(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode()).hexdigest()


def load_config(path: Optional[str], seed: Optional[int], strategy: Optional[str]) -> TrainConfig:
    d: dict = {}
    if path:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config not found: {path}")
        except json.JSONDecodeError as e:
            raise UsageError(f"malformed config {path}: {e}")
        if not isinstance(d, dict):
            raise UsageError(f"malformed config {path}: top level must be an object")
    if seed is not None:
        d["seed"] = seed
    if strategy is not None:
        d["strategy"] = strategy
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}")


def set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise UsageError(f"unknown config path {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise UsageError(f"unknown config path {dotted!r}")
    node[keys[-1]] = value


# ------------------------------------------------------------------ files

def _write_csv(path: Path, rows: List[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def emit_curves(reports: Sequence[Tuple[str, EvalReport]], out_dir, stem: str = "curves") -> List[dict]:
    """Write accuracy-vs-GMACs points as ``<stem>.csv`` and ``<stem>.json``.

    ``reports`` holds (label, report) pairs; rows come out sorted ascending by
    GMACs (ties keep input order).
    """
    rows = [{"label": label, "gmacs": r.mean_gmacs, "accuracy": r.accuracy,
             "flops_ratio": r.mean_flops_ratio, "keep_rate": r.keep_rate}
            for label, r in reports]
    rows.sort(key=lambda r: r["gmacs"])
    out = Path(out_dir)
    _write_csv(out / f"{stem}.csv", rows)
    (out / f"{stem}.json").write_text(json.dumps(rows, indent=1))
    return rows


def read_curves(path) -> List[dict]:
    """Parse a file written by :func:`emit_curves` (CSV or JSON)."""
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    with open(path, newline="") as f:
        return [{"label": r["label"], **{k: float(r[k]) for k in
                                        ("gmacs", "accuracy", "flops_ratio", "keep_rate")}}
                for r in csv.DictReader(f)]


def write_manifest(out: Path, command: str, cfg: TrainConfig, started: float,
                   artifacts: Dict[str, str]) -> Path:
    m = {"command": command, "config_hash": config_hash(cfg), "config": cfg.to_dict(),
         "seed": cfg.seed, "started": started, "finished": time.time(),
         "artifacts": {k: str(v) for k, v in sorted(artifacts.items())}}
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(m, indent=1, sort_keys=True))
    return path


def _datasets(cfg: TrainConfig, data_dir: Optional[str]) -> Tuple[Dataset, Dataset]:
    """Train/test split from ``gen-data`` output if given, else from the config."""
    if data_dir is None:
        return load_or_generate(cfg.data, cfg.seed)
    out = []
    for name in ("train", "test"):
        p = Path(data_dir) / f"{name}.prds"
        if not p.exists():
            raise UsageError(f"missing dataset file {p}")
        x, y = load_dataset(p)
        if y.ndim == 2:
            out.append(Dataset(x, y[:, 0], np.where(y[:, 1] > 0, cfg.data.hard_complexity,
                                                    cfg.data.easy_complexity)))
        else:
            out.append(Dataset(x, y))
    return out[0], out[1]


def _need(path: Optional[str], what: str) -> str:
    if not path or not Path(path).exists():
        raise UsageError(f"missing {what} checkpoint" + (f": {path}" if path else ""))
    return path


def _weights(args, cfg: TrainConfig):
    ws, sel, meta = load_weights(_need(args.weights, "weights"))
    if ws.config != cfg.model:
        raise UsageError("weights checkpoint was trained with a different model config")
    return ws, sel


def _selector(args, fallback):
    if args.selector:
        nets, _ = load_selector(_need(args.selector, "selector"))
        return nets
    if fallback is not None:
        return fallback
    raise UsageError("missing selector checkpoint")


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, cfg, out):
    rng = np.random.default_rng(cfg.seed)
    arts = {}
    for name, n in (("train", cfg.data.n_train), ("test", cfg.data.n_test)):
        d = generate_synthetic(cfg.data, n, rng)
        hard = (d.complexity > cfg.data.easy_complexity).astype(np.int64)
        p = out / f"{name}.prds"
        save_dataset(p, d.images, np.stack([d.labels, hard], axis=1))
        arts[name] = p
    print(f"wrote {cfg.data.n_train} train / {cfg.data.n_test} test samples")
    return arts


def cmd_pretrain(args, cfg, out):
    train, test = _datasets(cfg, args.data)
    rows = []
    weights, hist = pretrain_meta(cfg, train)
    rows = [{"step": i, "loss": float(v)} for i, v in enumerate(hist)]
    p = out / "meta.prnc"
    save_weights(p, weights, meta={"stage": "pretrain", "config_hash": config_hash(cfg)})
    _write_csv(out / "pretrain_loss.csv", rows)
    r = evaluate(test, weights, None, cfg.strategy, batch_size=cfg.eval_batch)
    print(f"pretrain: final loss {hist[-1]:.4f}, full-width test accuracy {r.accuracy:.4f}")
    return {"weights": p, "loss": out / "pretrain_loss.csv"}


def cmd_train_selector(args, cfg, out):
    train, _ = _datasets(cfg, args.data)
    weights, _ = _weights(args, cfg)
    nets, curve = train_selector(cfg, train, weights)
    p = out / "selector.prnc"
    from .container import save_selector
    save_selector(p, nets, cfg.model, meta={"strategy": cfg.strategy,
                                            "config_hash": config_hash(cfg)})
    _write_csv(out / "selector_stats.csv", curve)
    last = curve[-1] if curve else {}
    print(f"selector: {len(curve)} updates, mean reward {last.get('mean_reward', float('nan')):.4f}")
    return {"selector": p, "stats": out / "selector_stats.csv"}


def cmd_finetune(args, cfg, out):
    train, test = _datasets(cfg, args.data)
    weights, embedded = _weights(args, cfg)
    nets = _selector(args, embedded)
    tuned, hist = finetune_backbone(cfg, train, weights, nets)
    p = out / "finetuned.prnc"
    save_weights(p, tuned, nets, meta={"stage": "finetune", "strategy": cfg.strategy,
                                       "config_hash": config_hash(cfg)})
    _write_csv(out / "finetune_loss.csv", [{"step": i, "loss": float(v)} for i, v in enumerate(hist)])
    r = evaluate(test, tuned, nets, cfg.strategy, args.mode, cfg.eval_batch)
    print(f"finetune: test accuracy {r.accuracy:.4f} at flops ratio {r.mean_flops_ratio:.4f}")
    return {"weights": p, "loss": out / "finetune_loss.csv"}


def _eval_pair(args, cfg, out, trace: bool):
    if not args.selector and not (args.weights and Path(args.weights).exists()):
        raise UsageError("missing selector checkpoint")
    _, test = _datasets(cfg, args.data)
    weights, embedded = _weights(args, cfg)
    nets = _selector(args, embedded)
    base = evaluate(test, weights, None, cfg.strategy, batch_size=cfg.eval_batch)
    rep = evaluate(test, weights, nets, cfg.strategy, args.mode, cfg.eval_batch, trace=trace)
    return base, rep


def cmd_eval(args, cfg, out):
    base, rep = _eval_pair(args, cfg, out, trace=False)
    summary = {"selector": rep.summary(), "baseline": base.summary(), "mode": args.mode,
               "strategy": cfg.strategy,
               "mac_reduction": 1.0 - rep.mean_gmacs / base.mean_gmacs,
               "accuracy_drop": base.accuracy - rep.accuracy}
    (out / "eval.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    _write_csv(out / "eval_metrics.csv", [
        {"label": lab, "accuracy": r.accuracy, "gmacs": r.mean_gmacs,
         "flops_ratio": r.mean_flops_ratio, "keep_rate": r.keep_rate}
        for lab, r in (("baseline", base), (f"{cfg.strategy}/{args.mode}", rep))])
    emit_curves([("baseline", base), (f"{cfg.strategy}/{args.mode}", rep)], out)
    print(f"eval: accuracy {rep.accuracy:.4f} (baseline {base.accuracy:.4f}), "
          f"MAC reduction {summary['mac_reduction']:.3f}, keep rate {rep.keep_rate:.3f}")
    return {"eval": out / "eval.json", "metrics": out / "eval_metrics.csv",
            "curves": out / "curves.csv"}


def cmd_trace(args, cfg, out):
    _, rep = _eval_pair(args, cfg, out, trace=True)
    p = out / "decisions.jsonl"
    with open(p, "w") as f:
        for row in rep.traces:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"trace: {len(rep.traces)} decision records")
    return {"trace": p}


def flops_table(model: ElasticConfig) -> List[dict]:
    """Per-block closed-form vs counted MACs at full width and all tokens."""
    a = max_arch(model)
    n = model.tokens
    rep = count_flops(model, [a] * model.depth, [n] * model.depth)
    rows = []
    for i, measured in enumerate(rep.per_block):
        rows.append({"block": i, "tokens": n, "phi": a.phi, "hidden": a.hidden(model.c_max),
                     "formula": block_formula(n, a.phi, a.hidden(model.c_max), model.c_max),
                     "measured": int(measured)})
    return rows


def cmd_flops(args, cfg, out):
    model = cfg.model
    rows = flops_table(model)
    print(f"{'block':>5} {'tokens':>6} {'phi':>5} {'hidden':>6} {'formula':>14} {'measured':>14}")
    for r in rows:
        print(f"{r['block']:>5} {r['tokens']:>6} {r['phi']:>5} {r['hidden']:>6} "
              f"{r['formula']:>14} {r['measured']:>14}")
    tot_f = sum(r["formula"] for r in rows)
    tot_m = sum(r["measured"] for r in rows)
    closed = closed_form_uniform(model.tokens, model.c_max, model.depth) \
        if model.mlp_ratio_choices[-1] == 4 else tot_f
    print(f"total formula {tot_f}  measured {tot_m}  uniform closed form {closed}")
    _write_csv(out / "flops.csv", rows)
    if tot_f != tot_m:
        raise RuntimeError(f"MAC mismatch: formula {tot_f} vs measured {tot_m}")
    return {"flops": out / "flops.csv"}


def _parse_values(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {text!r}")


def cmd_sweep(args, cfg, out):
    if not args.param or args.values is None:
        raise UsageError("sweep needs --param and --values")
    path = SWEEP_SHORTCUTS.get(args.param, args.param)
    values = _parse_values(args.values)
    if not values:
        raise UsageError("--values is empty")
    base_d = cfg.to_dict()
    cfgs = []
    for v in values:
        d = json.loads(json.dumps(base_d))
        set_path(d, path, v)
        try:
            cfgs.append(TrainConfig.from_dict(d))
        except (TypeError, ValueError) as e:
            raise UsageError(f"invalid value {v} for {path}: {e}")
    train, test = _datasets(cfg, args.data)
    weights, _ = _weights(args, cfg)
    rows, reports = [], []
    for v, c in zip(values, cfgs):
        nets, _ = train_selector(c, train, weights)
        r = evaluate(test, weights, nets, c.strategy, args.mode, c.eval_batch)
        rows.append({"param": path, "value": v, "accuracy": r.accuracy, "gmacs": r.mean_gmacs,
                     "flops_ratio": r.mean_flops_ratio, "keep_rate": r.keep_rate})
        reports.append((f"{args.param}={v}", r))
        print(f"sweep {path}={v}: accuracy {r.accuracy:.4f}, flops ratio "
              f"{r.mean_flops_ratio:.4f}, keep rate {r.keep_rate:.4f}")
    _write_csv(out / "sweep.csv", rows)
    emit_curves(reports, out, "sweep_curves")
    return {"sweep": out / "sweep.csv", "curves": out / "sweep_curves.csv"}


HANDLERS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain,
            "train-selector": cmd_train_selector, "finetune": cmd_finetune, "eval": cmd_eval,
            "flops": cmd_flops, "sweep": cmd_sweep, "trace": cmd_trace}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--strategy", choices=sorted(STRATEGY_ALIASES))
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--mode", choices=("per-sample", "batch-avg"), default="per-sample")
    common.add_argument("--data", help="directory holding train.prds/test.prds from gen-data")
    common.add_argument("--weights", help="backbone checkpoint (default <out>/meta.prnc)")
    common.add_argument("--selector", help="selector checkpoint (default <out>/selector.prnc)")
    p = _Parser(prog="adaptvit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name, parents=[common])
        if name == "sweep":
            s.add_argument("--param", help="config path or one of " + ", ".join(SWEEP_SHORTCUTS))
            s.add_argument("--values", help="comma-separated values")
    return p


def _defaults(args, out: Path) -> None:
    if args.weights is None:
        args.weights = str(out / ("finetuned.prnc" if args.command in ("eval", "trace", "sweep")
                                  and (out / "finetuned.prnc").exists() else "meta.prnc"))
    if args.selector is None and (out / "selector.prnc").exists():
        args.selector = str(out / "selector.prnc")


def run(argv: Optional[Sequence[str]] = None) -> int:
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"expected a subcommand: {', '.join(COMMANDS)}")
        cfg = load_config(args.config, args.seed, args.strategy)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _defaults(args, out)
        arts = HANDLERS[args.command](args, cfg, out)
        write_manifest(out, args.command, cfg, started, arts)
        return 0
    except UsageError as e:
        print(f"adaptvit: error: usage: {e}", file=sys.stderr)
        return 2
    except FormatError as e:
        print(f"adaptvit: error: format: {e}", file=sys.stderr)
        return 1
    except (FloatingPointError, RuntimeError, ValueError) as e:
        print(f"adaptvit: error: runtime: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
