"""``phototune`` command line: generate-data, train, tune, eval, bench.

Each command reads an optional JSON config (``--config``) and lets flags
override it.  Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from .image import DecodeError, read_image, resize_bilinear
from .pipeline import N_PARAMS, CountingPipeline, apply_pipeline
from .stats import psnr, ssim

log = logging.getLogger("phototune")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

RESOLUTIONS = {"720p": (720, 1280), "1k": (1080, 1920), "2k": (1440, 2560), "4k": (2160, 3840)}

DEFAULTS = {
    "generate-data": {"count": 100, "seed": 0, "split": [0.9, 0.1], "size": 64, "param_low": None, "param_high": None},
    "train": {
        "episodes": 1000,
        "seed": 0,
        "task": "finishing",
        "split": "train",
        "eval_split": "eval",
        "td3": {},
    },
    "tune": {"method": "cmaes", "budget": 200, "seed": 0, "objective": "psnr"},
    "eval": {"methods": ["cmaes@200"], "split": "eval", "seed": 0, "objective": "psnr"},
    "bench": {"resolutions": ["720p"], "methods": ["rl@10", "cmaes@200"], "runs": 3, "seed": 0},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _resolve(command: str, args) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        cfg.update(loaded.get(command, loaded))
    for key, value in vars(args).items():
        if key in ("config", "command", "func", "verbose") or value is None:
            continue
        cfg[key] = value
    print(f"config {command}: {json.dumps(cfg, sort_keys=True, default=str)}", file=sys.stderr)
    return cfg


def _write_json(path, obj) -> None:
    data_mod.atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _method_list(specs) -> list:
    """``["cmaes@200", "rl"]`` -> ``[("cmaes", 200), ("rl", 10)]``."""
    if isinstance(specs, str):
        specs = specs.split(",")
    out = []
    for spec in specs:
        name, _, budget = str(spec).strip().partition("@")
        if name not in ("cmaes", "random", "greedy", "rl", "oracle"):
            raise UsageError(f"unknown method {name!r}")
        try:
            out.append((name, int(budget) if budget else (10 if name == "rl" else 200)))
        except ValueError:
            raise UsageError(f"bad budget in {spec!r}") from None
    return out


def _run_tuner(name: str, budget: int, inp, goal, cfg: dict, agent=None, pipeline=apply_pipeline, goal_params=None, seed=0):
    from . import tuners

    objective = cfg.get("objective", "psnr")
    if name == "cmaes":
        kw = {k: cfg[k] for k in ("popsize", "sigma0") if k in cfg}
        return tuners.tune_cmaes(inp, goal, objective, budget, seed=seed, pipeline=pipeline, **kw)
    if name == "random":
        return tuners.tune_random(inp, goal, objective, budget, rng=seed, pipeline=pipeline)
    if name == "greedy":
        return tuners.tune_greedy(inp, goal, objective, budget, pipeline=pipeline)
    if name == "rl":
        if agent is None:
            raise UsageError("method rl needs --checkpoint")
        return tuners.tune_rl(inp, goal, agent, budget, objective, pipeline=pipeline)
    if name == "oracle":
        if goal_params is None:
            raise ValueError("oracle method needs pairs with goal_params")
        sess = tuners._Session(inp, tuners._objective(objective, goal, None), pipeline, 1)
        sess.query(goal_params)
        return sess.result("oracle")
    raise UsageError(f"unknown method {name!r}")


def _load_agent(path):
    if not path:
        return None
    from .rl import TD3Agent, bundled_checkpoint

    if path == "bundled":
        path = bundled_checkpoint()
    agent, _ = TD3Agent.load(path, with_optimizers=False)
    return agent


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(cfg: dict) -> dict:
    if not cfg.get("out"):
        raise UsageError("generate-data needs --out")
    spec_kw = {k: cfg[k] for k in ("count", "seed", "split", "size") if cfg.get(k) is not None}
    for key in ("param_low", "param_high"):
        if cfg.get(key) is not None:
            v = cfg[key]
            spec_kw[key] = [float(v)] * N_PARAMS if np.isscalar(v) else v
    try:
        spec = data_mod.DatasetSpec(**spec_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    manifest = data_mod.write_dataset(spec, cfg["out"])
    print(json.dumps({"out": str(cfg["out"]), "pairs": len(manifest["pairs"])}))
    return manifest


def cmd_train(cfg: dict):
    from .rl import TD3Config, train

    if not cfg.get("manifest") or not cfg.get("out"):
        raise UsageError("train needs --manifest and --out")
    td3 = dict(cfg.get("td3") or {})
    for key in ("encoder_mode", "dtype", "warmup_random_steps", "eval_every", "eval_episodes"):
        if cfg.get(key) is not None:
            td3[key] = cfg[key]
    if cfg.get("active_params") is not None:
        td3["active_params"] = [int(i) for i in str(cfg["active_params"]).split(",")] if isinstance(cfg["active_params"], str) else cfg["active_params"]
    try:
        td3_cfg = TD3Config.from_dict(td3)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad td3 settings: {exc}") from exc
    train_pairs = data_mod.load_manifest(cfg["manifest"], cfg.get("split"))
    eval_pairs = data_mod.load_manifest(cfg["manifest"], cfg.get("eval_split")) if cfg.get("eval_split") else []
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out.with_suffix(".config.json"), cfg)
    log_path = cfg.get("log") or str(out.with_suffix(".jsonl"))

    def progress(rec):
        if "eval_psnr_db" in rec:
            print(json.dumps({"episode": rec["episode"], "eval_psnr_db": rec["eval_psnr_db"]}), flush=True)

    _, records = train(
        train_pairs,
        td3_cfg,
        int(cfg["episodes"]),
        reward_kind=cfg.get("task", "finishing"),
        seed=int(cfg["seed"]),
        eval_pairs=eval_pairs,
        log_path=log_path,
        checkpoint_path=out,
        resume_from=cfg.get("resume"),
        dump_dir=out.parent,
        progress=progress,
    )
    print(json.dumps({"checkpoint": str(out), "log": log_path, "episodes": len(records)}))
    return records


def cmd_tune(cfg: dict):
    from .tuners import dump_trajectory

    for key in ("input", "goal"):
        if not cfg.get(key):
            raise UsageError(f"tune needs --{key}")
    (name, default_budget), = _method_list([cfg["method"]])
    budget = int(cfg.get("budget") or default_budget)
    if name == "rl" and not cfg.get("checkpoint"):
        raise UsageError("method rl needs --checkpoint")
    inp, goal = read_image(cfg["input"]), read_image(cfg["goal"])
    if inp.shape != goal.shape:
        raise UsageError(f"input {inp.shape} and goal {goal.shape} differ in size")
    agent = _load_agent(cfg.get("checkpoint")) if name == "rl" else None
    res = _run_tuner(name, budget, inp, goal, cfg, agent, seed=int(cfg.get("seed", 0)))
    if cfg.get("dump_dir"):
        dump_trajectory(res, inp, cfg["dump_dir"], goal)
    text = res.to_json(indent=1)
    if cfg.get("output"):
        data_mod.atomic_write_text(cfg["output"], text + "\n")
    print(text)
    return res


EVAL_FIELDS = ["id", "method", "budget", "status", "psnr_db", "ssim", "queries", "wall_time", "error"]


def cmd_eval(cfg: dict):
    if not cfg.get("manifest"):
        raise UsageError("eval needs --manifest")
    methods = _method_list(cfg["methods"])
    agent = _load_agent(cfg.get("checkpoint")) if any(m == "rl" for m, _ in methods) else None
    if any(m == "rl" for m, _ in methods) and agent is None:
        raise UsageError("method rl needs --checkpoint")
    path = Path(cfg["manifest"])
    mpath = path / data_mod.MANIFEST_NAME if path.is_dir() else path
    manifest = json.loads(mpath.read_text())
    entries = [e for e in manifest["pairs"] if cfg.get("split") in (None, "all") or e.get("split") == cfg["split"]]
    rows = []
    for entry in entries:
        try:
            inp = read_image(mpath.parent / entry["input"])
            goal = read_image(mpath.parent / entry["goal"])
        except (OSError, DecodeError, ValueError) as exc:
            for name, budget in methods:
                rows.append({"id": entry["id"], "method": name, "budget": budget, "status": "failed", "error": str(exc)})
            continue
        gp = entry.get("goal_params")
        for name, budget in methods:
            counter = CountingPipeline(apply_pipeline)
            try:
                res = _run_tuner(name, budget, inp, goal, cfg, agent, counter, None if gp is None else np.asarray(gp), int(cfg.get("seed", 0)))
            except UsageError:
                raise
            except Exception as exc:  # one bad pair must not end the run
                rows.append({"id": entry["id"], "method": name, "budget": budget, "status": "failed", "error": repr(exc)})
                continue
            best = apply_pipeline(inp, res.best_params)
            rows.append(
                {
                    "id": entry["id"],
                    "method": name,
                    "budget": budget,
                    "status": "ok",
                    "psnr_db": psnr(best, goal),
                    "ssim": ssim(best, goal) if min(goal.shape[:2]) >= 11 else None,
                    "queries": res.query_count,
                    "wall_time": res.wall_time,
                    "error": "",
                }
            )
            if counter.calls != res.query_count:
                raise RuntimeError(f"query accounting mismatch on {entry['id']}: {counter.calls} != {res.query_count}")
    summary = _aggregate(rows, methods)
    out = {"rows": rows, "summary": summary}
    if cfg.get("out"):
        prefix = Path(cfg["out"])
        prefix.parent.mkdir(parents=True, exist_ok=True)
        _write_json(prefix.with_suffix(".json"), out)
        data_mod.atomic_write_text(prefix.with_suffix(".csv"), _csv(rows, EVAL_FIELDS))
    print(json.dumps(summary, indent=1, default=_json_default))
    return out


def _aggregate(rows, methods) -> list:
    table = []
    for name, budget in methods:
        ok = [r for r in rows if r["method"] == name and r["budget"] == budget and r["status"] == "ok"]
        failed = sum(1 for r in rows if r["method"] == name and r["budget"] == budget and r["status"] != "ok")
        ssims = [r["ssim"] for r in ok if r["ssim"] is not None]
        table.append(
            {
                "method": f"{name}@{budget}",
                "pairs": len(ok),
                "failed": failed,
                "mean_psnr_db": float(np.mean([r["psnr_db"] for r in ok])) if ok else None,
                "mean_ssim": float(np.mean(ssims)) if ssims else None,
                "mean_queries": float(np.mean([r["queries"] for r in ok])) if ok else None,
                "mean_wall_time": float(np.mean([r["wall_time"] for r in ok])) if ok else None,
            }
        )
    return table


def _csv(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def bench_image(h: int, w: int, seed: int = 0):
    """Deterministic ``(input, goal)`` pair at ``h x w``."""
    base = data_mod.generate_scene(seed, 256)
    inp = np.clip(resize_bilinear(base, h, w), 0.0, 1.0)
    params = np.random.default_rng(seed).uniform(-0.5, 0.5, N_PARAMS)
    return inp, apply_pipeline(inp, params)


def cmd_bench(cfg: dict):
    methods = _method_list(cfg["methods"])
    res_names = cfg["resolutions"].split(",") if isinstance(cfg["resolutions"], str) else list(cfg["resolutions"])
    for r in res_names:
        if r.lower() not in RESOLUTIONS:
            raise UsageError(f"unknown resolution {r!r}; choose from {', '.join(RESOLUTIONS)}")
    agent = _load_agent(cfg.get("checkpoint")) if any(m == "rl" for m, _ in methods) else None
    if any(m == "rl" for m, _ in methods) and agent is None:
        raise UsageError("method rl needs --checkpoint")
    runs = int(cfg.get("runs", 3))
    table = []
    for name, budget in methods:
        row = {"method": f"{name}@{budget}"}
        for r in res_names:
            h, w = RESOLUTIONS[r.lower()]
            try:
                inp, goal = bench_image(h, w, int(cfg.get("seed", 0)))
                times = []
                for _ in range(runs):
                    t0 = time.perf_counter()
                    _run_tuner(name, budget, inp, goal, cfg, agent, seed=int(cfg.get("seed", 0)))
                    times.append(time.perf_counter() - t0)
                row[r] = statistics.median(times)
            except MemoryError:
                row[r] = "OOM"
            finally:
                inp = goal = None
        table.append(row)
    if cfg.get("out"):
        prefix = Path(cfg["out"])
        prefix.parent.mkdir(parents=True, exist_ok=True)
        _write_json(prefix.with_suffix(".json"), table)
        data_mod.atomic_write_text(prefix.with_suffix(".csv"), _csv(table, ["method", *res_names]))
    print(json.dumps(table, indent=1))
    return table


# ---------------------------------------------------------------------------
# entry point


def _split_arg(text: str):
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split {text!r}") from None
    return parts


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phototune", description="Photo-finishing parameter tuning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate-data", help="render synthetic input/goal pairs")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--split", type=_split_arg, help="train,eval fractions, e.g. 0.9,0.1")
    g.add_argument("--param-low", dest="param_low", type=float)
    g.add_argument("--param-high", dest="param_high", type=float)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train the RL tuner")
    t.add_argument("--config")
    t.add_argument("--manifest")
    t.add_argument("--out", help="checkpoint path (.npz)")
    t.add_argument("--log", help="JSON-lines log path")
    t.add_argument("--episodes", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--task", choices=["finishing", "stylization"])
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--encoder-mode", dest="encoder_mode", choices=["trained", "frozen"])
    t.add_argument("--dtype", choices=["float64", "float32"])
    t.add_argument("--active-params", dest="active_params", help="comma-separated slider indices")
    t.add_argument("--warmup-steps", dest="warmup_random_steps", type=int)
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("tune", help="tune one input towards one goal")
    u.add_argument("--config")
    u.add_argument("--input")
    u.add_argument("--goal")
    u.add_argument("--method", choices=["cmaes", "random", "greedy", "rl"])
    u.add_argument("--budget", type=int)
    u.add_argument("--checkpoint", help="agent .npz, or \"bundled\" for the packaged policy")
    u.add_argument("--seed", type=int)
    u.add_argument("--objective", choices=["psnr", "style"])
    u.add_argument("--dump-dir", dest="dump_dir")
    u.add_argument("--output")
    u.set_defaults(func=cmd_tune)

    e = sub.add_parser("eval", help="evaluate tuners over a manifest")
    e.add_argument("--config")
    e.add_argument("--manifest")
    e.add_argument("--methods", help="comma list like rl@10,cmaes@10,cmaes@200")
    e.add_argument("--checkpoint", help="agent .npz, or \"bundled\" for the packaged policy")
    e.add_argument("--split", help="train, eval or all")
    e.add_argument("--seed", type=int)
    e.add_argument("--objective", choices=["psnr", "style"])
    e.add_argument("--out", help="output prefix for .json and .csv")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time tuners across resolutions")
    b.add_argument("--config")
    b.add_argument("--resolutions", help="comma list from 720p,1k,2k,4k")
    b.add_argument("--methods")
    b.add_argument("--checkpoint", help="agent .npz, or \"bundled\" for the packaged policy")
    b.add_argument("--runs", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", help="output prefix for .json and .csv")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(_resolve(args.command, args))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
