"""Command-line entry point: gen-data, train, sample, evaluate, baseline-er.

Every run is fully determined by a flat TOML config (plus flag overrides) and
writes its resolved config next to its artifacts.  Exit codes: 0 success,
1 usage or config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .autodiff import AdamState, load_arrays, save_arrays
from .graph import (Graph, GraphDataset, erdos_renyi, er_dataset, er_mle_fit, grid_dataset,
                    load_dataset, lobster_dataset, save_dataset, split_dataset)
from .metrics import EvalConfig, evaluate
from .model import GranConfig, GranParams, sample_graph, sample_size
from .orderings import parse_kinds
from .training import TrainSettings, TrainingDiverged, train

log = logging.getLogger("gran")

CONFIG_NAME = "config.toml"


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


# Base defaults; every key a config file may set.  Paths are empty when unset.
DEFAULTS = {
    "profile": "desk",
    "seed": 0,
    # dataset
    "kind": "grid",
    "count": 60,
    "min_nodes": 9,
    "max_nodes": 64,
    "er_p": 0.2,
    "lobster_backbone": 80,
    "lobster_p1": 0.7,
    "lobster_p2": 0.7,
    # model
    "block_size": 1,
    "hidden_dim": 32,
    "num_rounds": 3,
    "num_mixtures": 20,
    "tie_rounds": False,
    "count_all_block_rows": False,
    # training
    "epochs": 400,
    "batch_size": 8,
    "lr": 1e-3,
    "val_interval": 50,
    "grad_clip": 1.0,
    "orderings": ["dfs"],
    "record_wall_time": False,
    # sampling
    "stride": 1,
    "sample_count": 0,  # 0: as many as the test split
    "threshold": False,
    "largest_component": False,
    # evaluation
    "sigma": 1.0,
    "lobster": False,
    # paths
    "data_dir": "",
    "checkpoint": "",
    "resume": "",
    "generated_dir": "",
    "reference_dir": "",
}

PROFILES = {
    "desk": {},
    "full-grid": {
        "count": 100, "min_nodes": 100, "max_nodes": 400,
        "hidden_dim": 128, "num_rounds": 7, "num_mixtures": 20,
        "lr": 1e-4, "grad_clip": 0.0, "epochs": 3000, "val_interval": 100,
    },
    "desk-lobster": {
        "kind": "lobster", "min_nodes": 10, "max_nodes": 64, "lobster_backbone": 4,
        "lobster": True,
    },
}


# ---------------------------------------------------------------------------
# config resolution


def _coerce(key: str, value):
    """Convert ``value`` to the type of ``DEFAULTS[key]``; strings are parsed."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    ref = DEFAULTS[key]
    try:
        if isinstance(ref, bool):
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes", "false", "0", "no"):
                return value.lower() in ("true", "1", "yes")
            raise ValueError(value)
        if isinstance(ref, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if isinstance(ref, float):
            if isinstance(value, bool):
                raise ValueError(value)
            out = float(value)
            if not math.isfinite(out):
                raise ValueError(value)
            return out
        if isinstance(ref, list):
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
                raise ValueError(value)
            return list(value)
        if not isinstance(value, str):
            raise ValueError(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r} (expected {type(ref).__name__})") from None


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ConfigError(f"{path}: config must be flat, found table {key!r}")
    return raw


def resolve_config(file_values: dict, overrides: dict, command: str | None = None) -> dict:
    """defaults < profile < config file < overrides.

    For ``sample`` the block size comes from the checkpoint, so it is read from
    the checkpoint header before validation.
    """
    profile = overrides.get("profile", file_values.get("profile", DEFAULTS["profile"]))
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = dict(DEFAULTS)
    cfg.update(PROFILES[profile])
    for layer in (file_values, overrides):
        for key, value in layer.items():
            cfg[key] = _coerce(key, value)
    cfg["profile"] = profile
    if command == "sample" and cfg["checkpoint"]:
        try:
            _, meta = load_arrays(cfg["checkpoint"])
            cfg["block_size"] = int(meta["model"]["block_size"])
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read checkpoint {cfg['checkpoint']}: {exc}") from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["kind"] not in ("grid", "lobster", "er"):
        raise ConfigError(f"kind must be grid, lobster or er, got {cfg['kind']!r}")
    for key in ("count", "min_nodes", "block_size", "hidden_dim", "num_rounds",
                "num_mixtures", "batch_size", "val_interval", "stride"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be >= 1, got {cfg[key]}")
    if cfg["max_nodes"] < cfg["min_nodes"]:
        raise ConfigError("max_nodes must be >= min_nodes")
    if cfg["stride"] > cfg["block_size"]:
        raise ConfigError(f"stride {cfg['stride']} exceeds block size {cfg['block_size']}")
    if cfg["lr"] < 0:
        raise ConfigError(f"learning rate must be >= 0, got {cfg['lr']}")
    for key in ("epochs", "sample_count", "seed"):
        if cfg[key] < 0:
            raise ConfigError(f"{key} must be >= 0, got {cfg[key]}")
    if cfg["grad_clip"] < 0:
        raise ConfigError("grad_clip must be >= 0")
    if not 0.0 <= cfg["er_p"] <= 1.0:
        raise ConfigError("er_p must lie in [0, 1]")
    for key in ("lobster_p1", "lobster_p2"):
        if not 0.0 <= cfg[key] < 1.0:
            raise ConfigError(f"{key} must lie in [0, 1)")
    if cfg["lobster_backbone"] < 1:
        raise ConfigError("lobster_backbone must be >= 1")
    if not cfg["sigma"] > 0:
        raise ConfigError("sigma must be positive")
    try:
        parse_kinds(cfg["orderings"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not cfg["orderings"]:
        raise ConfigError("orderings must name at least one ordering")


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(v)  # a JSON string is a valid TOML basic string


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {_toml_value(cfg[k])}\n" for k in sorted(cfg))


# ---------------------------------------------------------------------------
# helpers


def _prepare_out(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fresh_dataset_dir(path: Path) -> Path:
    # stale graph files from an earlier run would break byte-reproducibility
    if path.exists():
        shutil.rmtree(path)
    return path


def _require_path(value: str, what: str) -> Path:
    if not value:
        raise ConfigError(f"{what} not given")
    return Path(value)


def _model_config(cfg: dict, n_max: int) -> GranConfig:
    return GranConfig(n_max=n_max, block_size=cfg["block_size"], hidden_dim=cfg["hidden_dim"],
                      num_rounds=cfg["num_rounds"], num_mixtures=cfg["num_mixtures"],
                      tie_rounds=cfg["tie_rounds"],
                      count_all_block_rows=cfg["count_all_block_rows"])


def _train_settings(cfg: dict) -> TrainSettings:
    return TrainSettings(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                         val_interval=cfg["val_interval"], seed=cfg["seed"],
                         orderings=tuple(cfg["orderings"]),
                         record_wall_time=cfg["record_wall_time"], grad_clip=cfg["grad_clip"])


def largest_component(graph: Graph) -> Graph:
    adj = graph.adjacency()
    seen = [False] * graph.num_nodes
    best: list = []
    for s in range(graph.num_nodes):
        if seen[s]:
            continue
        comp = [s]
        seen[s] = True
        for v in comp:
            for u in adj[v]:
                if not seen[u]:
                    seen[u] = True
                    comp.append(u)
        if len(comp) > len(best):
            best = comp
    keep = sorted(best)
    index = {v: i for i, v in enumerate(keep)}
    edges = [(index[u], index[v]) for u, v in graph.sorted_edges() if u in index and v in index]
    return Graph.from_edges(len(keep), edges)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict, out: Path) -> int:
    rng = np.random.default_rng(cfg["seed"])
    kind = cfg["kind"]
    if kind == "grid":
        ds = grid_dataset(cfg["count"], cfg["min_nodes"], cfg["max_nodes"], rng)
    elif kind == "lobster":
        ds = lobster_dataset(cfg["count"], cfg["min_nodes"], cfg["max_nodes"], rng,
                             expected_backbone=cfg["lobster_backbone"],
                             p1=cfg["lobster_p1"], p2=cfg["lobster_p2"])
    else:
        ds = er_dataset(cfg["count"], cfg["min_nodes"], cfg["max_nodes"], cfg["er_p"], rng)
    save_dataset(ds, _fresh_dataset_dir(out / "graphs"))
    sizes = [g.num_nodes for g in ds.graphs]
    edges = [g.num_edges for g in ds.graphs]
    print(f"count={len(ds)} n_min={min(sizes)} n_max={max(sizes)} "
          f"edges_min={min(edges)} edges_mean={np.mean(edges):.2f} edges_max={max(edges)}")
    return 0


def _checkpoint_arrays(params: GranParams, prefix: str) -> dict:
    return {f"{prefix}/{k}": v for k, v in params.arrays().items()}


def _strip(arrays: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}


def cmd_train(cfg: dict, out: Path) -> int:
    data_dir = _require_path(cfg["data_dir"], "training data directory (--data)")
    ds = load_dataset(data_dir)
    split = split_dataset(ds, cfg["seed"])
    parts = {name: ds.subset(idx, name) for name, idx in
             (("train", split.train), ("val", split.validation), ("test", split.test))}
    for name, part in parts.items():
        save_dataset(part, _fresh_dataset_dir(out / "data" / name))
    config = _model_config(cfg, ds.n_max)
    settings = _train_settings(cfg)

    params = adam = None
    start_step = 0
    best = None
    log_path = out / "train_log.jsonl"
    if cfg["resume"]:
        arrays, meta = load_arrays(cfg["resume"])
        if GranConfig.from_dict(meta["model"]) != config:
            raise ConfigError("resumed checkpoint was trained with a different model config")
        params = GranParams.init(config, np.random.default_rng(0)).load(_strip(arrays, "param"))
        adam = AdamState(lr=settings.lr, t=meta["adam_t"],
                         m=_strip(arrays, "adam.m"), v=_strip(arrays, "adam.v"))
        start_step = meta["step"]
        best_arrays = _strip(arrays, "best") or None
        best = (meta.get("best_val"), meta.get("best_step"), best_arrays)
        # keep records up to the resume point, drop anything logged after it
        kept = []
        if log_path.exists():
            for line in log_path.read_text().splitlines():
                if line.strip() and json.loads(line)["step"] <= start_step:
                    kept.append(line + "\n")
        _write_text(log_path, "".join(kept))
    else:
        _write_text(log_path, "")

    with open(log_path, "a", newline="\n") as log_fh:
        def on_record(rec):
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()

        try:
            result = train(list(parts["train"].graphs), list(parts["val"].graphs), config, settings,
                           params=params, adam=adam, start_step=start_step, best=best,
                           on_record=on_record)
        except TrainingDiverged as exc:
            _write_json(out / "failure.json", {"step": exc.step, "loss": repr(exc.loss),
                                               "message": str(exc)})
            raise

    meta = {
        "model": config.to_dict(),
        "train_sizes": [g.num_nodes for g in parts["train"].graphs],
        "test_count": len(parts["test"]),
        "step": result.step,
        "adam_t": result.adam.t,
        "best_val": result.best_val,
        "best_step": result.best_step,
    }
    last = _checkpoint_arrays(result.last_params, "param")
    last.update({f"adam.m/{k}": v for k, v in sorted(result.adam.m.items())})
    last.update({f"adam.v/{k}": v for k, v in sorted(result.adam.v.items())})
    if result.best_val is not None:
        last.update(_checkpoint_arrays(result.params, "best"))
    save_arrays(out / "last.ckpt", last, meta)
    save_arrays(out / "best.ckpt", _checkpoint_arrays(result.params, "param"), meta)
    first = result.log[0]["train_loss"] if result.log else float("nan")
    final = result.log[-1]["train_loss"] if result.log else float("nan")
    print(f"steps={result.step} first_loss={first:.4f} final_loss={final:.4f} "
          f"best_val={result.best_val} best_step={result.best_step}")
    return 0


def load_model(path):
    arrays, meta = load_arrays(path)
    config = GranConfig.from_dict(meta["model"])
    params = GranParams.init(config, np.random.default_rng(0)).load(_strip(arrays, "param"))
    return params, config, meta


def cmd_sample(cfg: dict, out: Path) -> int:
    ckpt = _require_path(cfg["checkpoint"], "checkpoint (--checkpoint)")
    params, config, meta = load_model(ckpt)
    stride = cfg["stride"]
    if stride > config.block_size:
        raise ConfigError(f"stride {stride} exceeds the checkpoint's block size {config.block_size}")
    count = cfg["sample_count"] or meta["test_count"]
    rng = np.random.default_rng(cfg["seed"])
    graphs, calls = [], []
    for _ in range(count):
        n = sample_size(meta["train_sizes"], rng)
        g, c = sample_graph(params, config, stride, n, rng, threshold=cfg["threshold"])
        if cfg["largest_component"]:
            g = largest_component(g)
        graphs.append(g)
        calls.append(c)
    save_dataset(GraphDataset(graphs, "generated"), _fresh_dataset_dir(out / "graphs"))
    report = {
        "count": count,
        "stride": stride,
        "block_size": config.block_size,
        "sizes": [g.num_nodes for g in graphs],
        "invocations": calls,
        "total_invocations": int(sum(calls)),
    }
    _write_json(out / "sample_report.json", report)
    print(f"count={count} stride={stride} total_invocations={report['total_invocations']} "
          f"mean_invocations={np.mean(calls):.2f}")
    return 0


def cmd_evaluate(cfg: dict, out: Path) -> int:
    gen_dir = _require_path(cfg["generated_dir"], "generated directory (--generated)")
    ref_dir = _require_path(cfg["reference_dir"], "reference directory (--reference)")
    for p in (gen_dir, ref_dir):
        if not p.is_dir():
            raise FileNotFoundError(f"directory not found: {p}")
    report = evaluate(load_dataset(gen_dir), load_dataset(ref_dir),
                      EvalConfig(sigma=cfg["sigma"], lobster=cfg["lobster"]))
    text = report.to_text()
    _write_text(out / "report.txt", text)
    print(text, end="")
    return 0


def cmd_baseline_er(cfg: dict, out: Path) -> int:
    data_dir = _require_path(cfg["data_dir"], "training data directory (--data)")
    ds = load_dataset(data_dir)
    p = er_mle_fit(ds)
    count = cfg["sample_count"] or len(ds)
    rng = np.random.default_rng(cfg["seed"])
    sizes = [g.num_nodes for g in ds.graphs]
    graphs = [erdos_renyi(sample_size(sizes, rng), p, rng) for _ in range(count)]
    save_dataset(GraphDataset(graphs, "er-baseline"), _fresh_dataset_dir(out / "graphs"))
    _write_json(out / "baseline_report.json", {"count": count, "edge_probability": p})
    print(f"count={count} edge_probability={p!r}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "baseline-er": cmd_baseline_er,
}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flag dest -> config key
_FLAG_KEYS = {
    "profile": "profile", "seed": "seed",
    "kind": "kind", "count": "count", "min_nodes": "min_nodes", "max_nodes": "max_nodes",
    "block_size": "block_size", "hidden_dim": "hidden_dim", "num_rounds": "num_rounds",
    "num_mixtures": "num_mixtures", "epochs": "epochs", "batch_size": "batch_size", "lr": "lr",
    "orderings": "orderings", "stride": "stride", "sample_count": "sample_count",
    "sigma": "sigma", "data": "data_dir", "checkpoint": "checkpoint", "resume": "resume",
    "generated": "generated_dir", "reference": "reference_dir",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gran", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="flat TOML config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--profile", choices=sorted(PROFILES))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--kind", choices=["grid", "lobster", "er"])
    p.add_argument("--count", type=int)
    p.add_argument("--min-nodes", type=int)
    p.add_argument("--max-nodes", type=int)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    common(p)
    p.add_argument("--data")
    p.add_argument("--resume", help="last.ckpt to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--block-size", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--num-rounds", type=int)
    p.add_argument("--num-mixtures", type=int)
    p.add_argument("--orderings", help="comma-separated ordering kinds")
    p.add_argument("--stride", type=int)

    p = sub.add_parser("sample", help="generate graphs from a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--stride", type=int)
    p.add_argument("--count", dest="sample_count", type=int)

    p = sub.add_parser("evaluate", help="MMD report of generated vs reference graphs")
    common(p)
    p.add_argument("--generated")
    p.add_argument("--reference")
    p.add_argument("--sigma", type=float)
    p.add_argument("--lobster", action="store_true", default=None)

    p = sub.add_parser("baseline-er", help="Erdos-Renyi baseline fitted by maximum likelihood")
    common(p)
    p.add_argument("--data")
    p.add_argument("--count", dest="sample_count", type=int)
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    for dest, key in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[key] = value
    if getattr(args, "lobster", None):
        out["lobster"] = True
    return out


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(file_values, _overrides(args), args.command)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = _prepare_out(args.out)
        _write_text(out / CONFIG_NAME, dump_config(cfg))
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
