"""
``ral`` command line: gradcheck, train, eval, ablate, generate.

Configuration is a JSON document with sections ``model``, ``synth``, ``optim``,
``data`` and ``ablation`` plus top-level ``seed`` and ``out``. Values come from
built-in defaults, then ``--config``, then ``--set section.key=value``, then
the explicit ``--seed`` / ``--out`` flags. The resolved document is written to
the output directory before any work starts.

Exit codes: 0 ok, 1 check failure or bad input, 2 numeric abort, 3 I/O.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

from threadpoolctl import threadpool_limits

from .data import ClipDataset, SynthSpec, generate, ingest_lrw_layout, write_layout
from .errors import ContractError, DimensionError, FormatError, LabelError, ManifestError, NumericError
from .gradcheck import run_suite
from .model import RalConfig, RalModel, load_checkpoint
from .train import AdamConfig, evaluate, fit

EXIT_OK, EXIT_CHECK, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

ABLATION_ROWS = [
    ("baseline", {"enable_dlsv": False, "enable_rao": False, "enable_acvi": False}),
    ("DLSV", {"enable_dlsv": True, "enable_rao": False, "enable_acvi": False}),
    ("DLSV+RAO", {"enable_dlsv": True, "enable_rao": True, "enable_acvi": False}),
    ("ACVI", {"enable_dlsv": False, "enable_rao": False, "enable_acvi": True}),
    ("DLSV+RAO+ACVI", {"enable_dlsv": True, "enable_rao": True, "enable_acvi": True}),
]


def default_config() -> dict:
    """Desk-scale defaults: 4-class 32x32 synthetic task and a small model."""
    model = RalConfig(num_classes=4, frontend_channels=8, stage_channels=[8, 16],
                      blocks_per_stage=[1, 1], acvi_after_stage=[True, True],
                      decoder_channels=24)
    return {
        "seed": 0,
        "out": "runs/latest",
        "model": model.to_dict(),
        "synth": SynthSpec().to_dict(),
        "optim": {**AdamConfig().__dict__, "batch_size": 8},
        "data": {"n_train": 512, "n_val": 128, "root": None, "manifest": "manifest.jsonl",
                 "crop": None},
        "ablation": {"seeds": [0, 1, 2], "workers": None},
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            raise ContractError(f"unknown config key '{where}'")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, where + ".")
        else:
            base[k] = v
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_set(items) -> dict:
    """``["optim.epochs=5", "model.enable_rao=false"]`` -> nested dict."""
    out: dict = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ContractError(f"--set expects key=value, got '{item}'")
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_value(value)
    return out


def resolve_config(args) -> dict:
    cfg = default_config()
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
        loaded.pop("command", None)  # present in a run's recorded config.json
        _merge(cfg, loaded)
    _merge(cfg, parse_set(args.set))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if cfg["data"]["root"] is None:
        cfg["model"]["num_classes"] = cfg["synth"]["num_classes"]
    # validate every section up front
    RalConfig.from_dict(cfg["model"])
    SynthSpec.from_dict(cfg["synth"])
    AdamConfig.from_dict(cfg["optim"])
    return cfg


def write_resolved(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=2))
    return out


def load_datasets(cfg: dict) -> tuple[ClipDataset, Optional[ClipDataset]]:
    data = cfg["data"]
    ncls = cfg["model"]["num_classes"]
    if data["root"]:
        layout = ingest_lrw_layout(data["root"], data["manifest"])
        train_s = layout.split("train").samples()
        val_s = layout.split("val").samples()
        if not train_s:
            raise ContractError(f"no training entries in {data['root']}")
        train = ClipDataset.from_samples(train_s, ncls, crop=data["crop"])
        val = ClipDataset.from_samples(val_s, ncls, crop=data["crop"]) if val_s else None
        return train, val
    spec = SynthSpec.from_dict(cfg["synth"])
    n_train, n_val = int(data["n_train"]), int(data["n_val"])
    samples = generate(spec, n_train + n_val)
    train = ClipDataset.from_samples(samples[:n_train], ncls)
    val = ClipDataset.from_samples(samples[n_train:], ncls) if n_val > 0 else None
    return train, val


# -- commands ---------------------------------------------------------------------

def cmd_gradcheck(cfg: dict, args) -> int:
    out = write_resolved(cfg, "gradcheck")
    start = time.perf_counter()
    results = run_suite(tol=args.tol, seed=cfg["seed"], report=print)
    elapsed = time.perf_counter() - start
    failed = [r for r in results if not r.passed]
    report = {"seconds": elapsed,
              "results": [{"name": r.name, "max_rel_err": r.max_rel_err, "worst": r.worst,
                           "tol": r.tol, "passed": r.passed} for r in results]}
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2))
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {elapsed:.1f}s")
    if failed:
        for r in failed:
            print(f"failed: {r.name} (max rel err {r.max_rel_err:.2e}, worst element {r.worst})")
        return EXIT_CHECK
    return EXIT_OK


def cmd_train(cfg: dict, args) -> int:
    out = write_resolved(cfg, "train")
    train, val = load_datasets(cfg)
    model = RalModel(RalConfig.from_dict(cfg["model"]), seed=cfg["seed"])
    optim = AdamConfig.from_dict(cfg["optim"])

    def log(stats):
        val_txt = "-" if stats.val_acc is None else f"{stats.val_acc:.4f}"
        print(f"epoch {stats.epoch:3d}  loss {stats.loss:.4f}  train {stats.train_acc:.4f}  "
              f"val {val_txt}  lr {stats.lr:.2e}", flush=True)

    fit(model, train, val, optim, seed=cfg["seed"], out_dir=out, resume=args.resume,
        on_epoch=log, stop_after=args.stop_after)
    return EXIT_OK


def cmd_eval(cfg: dict, args) -> int:
    out = write_resolved(cfg, "eval")
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint"
    model = load_checkpoint(ckpt)
    cfg = copy.deepcopy(cfg)
    cfg["model"]["num_classes"] = model.config.num_classes
    train, val = load_datasets(cfg)
    dataset = val if val is not None else train
    acc = evaluate(model, dataset)
    (out / "eval.json").write_text(json.dumps({"checkpoint": str(ckpt), "accuracy": acc,
                                               "n": len(dataset)}, indent=2))
    print(f"accuracy {acc:.4f} on {len(dataset)} clips")
    return EXIT_OK


def _ablation_job(job: tuple) -> dict:
    row, switches, seed, cfg, run_dir = job
    with threadpool_limits(1):
        train, val = load_datasets(cfg)
        mcfg = RalConfig.from_dict({**cfg["model"], **switches})
        model = RalModel(mcfg, seed=seed)
        params = model.num_parameters()
        start = time.perf_counter()
        _, history = fit(model, train, val, AdamConfig.from_dict(cfg["optim"]), seed=seed,
                         out_dir=run_dir)
        return {"row": row, "seed": seed, "val_acc": history[-1].val_acc, "params": params,
                "seconds": time.perf_counter() - start}


def worker_count(jobs: int, requested: Optional[int] = None) -> int:
    cap = requested or int(os.environ.get("RAL_THREADS", 0)) or os.cpu_count() or 1
    return max(1, min(jobs, cap))


def run_ablation(cfg: dict, out: Path, log=print) -> dict:
    seeds = list(cfg["ablation"]["seeds"])
    jobs = [(row, switches, seed, cfg, str(out / row / f"seed{seed}"))
            for row, switches in ABLATION_ROWS for seed in seeds]
    workers = worker_count(len(jobs), cfg["ablation"]["workers"])
    start = time.perf_counter()
    results = []
    if workers == 1:
        for job in jobs:
            results.append(_ablation_job(job))
            log(f"  {results[-1]['row']:<14} seed {results[-1]['seed']}  "
                f"val {results[-1]['val_acc']:.4f}  ({results[-1]['seconds']:.0f}s)")
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(_ablation_job, jobs):
                results.append(res)
                log(f"  {res['row']:<14} seed {res['seed']}  val {res['val_acc']:.4f}  ({res['seconds']:.0f}s)")
    elapsed = time.perf_counter() - start
    rows = []
    for row, switches in ABLATION_ROWS:
        accs = [r["val_acc"] for r in results if r["row"] == row]
        params = next(r["params"] for r in results if r["row"] == row)
        rows.append({"row": row, "switches": switches, "params": params, "val_acc": accs,
                     "mean_val_acc": sum(accs) / len(accs)})
    return {"rows": rows, "seeds": seeds, "workers": workers, "seconds": elapsed, "jobs": results}


def format_table(summary: dict) -> str:
    lines = ["| row | DLSV | RAO | ACVI | params | val acc (mean) | per seed |",
             "|---|---|---|---|---|---|---|"]
    mark = {True: "x", False: ""}
    for r in summary["rows"]:
        s = r["switches"]
        per_seed = ", ".join(f"{a:.3f}" for a in r["val_acc"])
        lines.append(f"| {r['row']} | {mark[s['enable_dlsv']]} | {mark[s['enable_rao']]} | "
                     f"{mark[s['enable_acvi']]} | {r['params']} | {r['mean_val_acc']:.4f} | {per_seed} |")
    lines.append("")
    lines.append(f"{len(summary['seeds'])} seeds, {summary['workers']} worker(s), "
                 f"{summary['seconds']:.0f}s wall time")
    return "\n".join(lines)


def cmd_ablate(cfg: dict, args) -> int:
    out = write_resolved(cfg, "ablate")
    summary = run_ablation(cfg, out)
    table = format_table(summary)
    (out / "ablation.json").write_text(json.dumps(summary, indent=2))
    (out / "ablation.md").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_generate(cfg: dict, args) -> int:
    n_train = int(cfg["data"]["n_train"]) if args.n is None else args.n
    n_val = 0 if args.n is not None else int(cfg["data"]["n_val"])
    if n_train + n_val <= 0:
        raise ContractError(f"need a positive sample count, got {n_train + n_val}")
    out = write_resolved(cfg, "generate")
    samples = generate(SynthSpec.from_dict(cfg["synth"]), n_train + n_val)
    manifest = write_layout(out, samples, lambda i: "train" if i < n_train else "val")
    print(f"wrote {len(samples)} clips and {manifest}")
    return EXIT_OK


COMMANDS = {"gradcheck": cmd_gradcheck, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "generate": cmd_generate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. optim.epochs=5 (repeatable)")
    parser = argparse.ArgumentParser(prog="ral", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--tol", type=float, help="override every tolerance")
    p = sub.add_parser("train", parents=[common], help="train on synthetic or ingested data")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.add_argument("--stop-after", type=int, help="stop after this many epochs in total")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint path without extension (default <out>/checkpoint)")
    sub.add_parser("ablate", parents=[common], help="five-row component ablation sweep")
    p = sub.add_parser("generate", parents=[common], help="write a synthetic RALT dataset")
    p.add_argument("--n", type=int, help="number of clips (all in the train split)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = int(os.environ.get("RAL_THREADS", 0)) or None
    try:
        cfg = resolve_config(args)
        with threadpool_limits(threads):
            return COMMANDS[args.command](cfg, args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, DimensionError, LabelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
