"""Command-line front end: config files, experiment runs, ablation sweeps.

Configs are line-oriented `key = value` files with dotted paths into the
train config, `#` comments, no duplicate keys; unknown keys are rejected with
a nearest-key suggestion. Outputs (per-seed metrics CSVs, checkpoints,
summary and ablation tables) all land under the chosen out-dir and summary
files are written atomically (write then rename).
"""
from __future__ import annotations

import argparse
import difflib
import itertools
import os
import sys
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, is_dataclass, replace

import numpy as np

from . import verify
from .data import save_snapshot
from .trainer import (
    TrainConfig,
    build_dataset,
    derive_seeds,
    run_experiment,
    save_run_state,
    write_metrics_csv,
)

SUMMARY_METRICS = [
    "loss_sup", "loss_pl", "loss_ctr", "kept_frac", "top1",
    "pl_acc", "proto_acc", "overlap", "intra_sim", "pos_sel_acc",
]


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    train: TrainConfig = field(default_factory=TrainConfig)
    variants: list[tuple[str, list]] = field(default_factory=list)
    repeats: int = 1


@dataclass
class ResultRow:
    variant: str
    per_seed_top1: list[float]
    mean: float
    std: float


@dataclass
class ResultTable:
    seeds: list[int]
    rows: list[ResultRow]

    def to_csv(self) -> str:
        header = "variant," + ",".join(f"top1_seed{s}" for s in self.seeds) + ",mean,std"
        lines = [header]
        for r in self.rows:
            per_seed = ",".join(f"{v:.6f}" for v in r.per_seed_top1)
            lines.append(f"{r.variant},{per_seed},{r.mean:.6f},{r.std:.6f}")
        return "\n".join(lines) + "\n"


def _field_map(obj) -> dict[str, typing.Any]:
    hints = typing.get_type_hints(type(obj))
    return {f.name: hints[f.name] for f in fields(obj)}


def _resolve(obj, path: str):
    """Walk a dotted path to (owner object, field name, field type)."""
    parts = path.split(".")
    cur = obj
    for i, part in enumerate(parts):
        fmap = _field_map(cur)
        if part not in fmap:
            candidates = list(fmap)
            hint = difflib.get_close_matches(part, candidates, n=1)
            extra = f" (did you mean {hint[0]!r}?)" if hint else ""
            raise KeyError(f"unknown key {path!r}{extra}")
        if i == len(parts) - 1:
            return cur, part, fmap[part]
        cur = getattr(cur, part)
    raise KeyError(f"unknown key {path!r}")


def _parse_value(raw: str, typ):
    origin = typing.get_origin(typ)
    if origin is tuple:
        args = typing.get_args(typ)
        elem = args[0]
        items = [v.strip() for v in raw.split(",") if v.strip()]
        return tuple(_parse_value(v, elem) for v in items)
    if typ is bool:
        low = raw.strip().lower()
        if low in ("true", "false"):
            return low == "true"
        raise ValueError(f"expected true/false, got {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return raw.strip()
    raise ValueError(f"unsupported config field type {typ}")


def _set_path(cfg: TrainConfig, path: str, value) -> TrainConfig:
    """Return a copy of cfg with the dotted field replaced."""
    parts = path.split(".")
    if len(parts) == 1:
        return replace(cfg, **{parts[0]: value})
    head, rest = parts[0], ".".join(parts[1:])
    sub = getattr(cfg, head)
    return replace(cfg, **{head: _set_path(sub, rest, value)})


def parse_config(path: str) -> ExperimentSpec:
    """Parse a key=value experiment file; missing keys take the defaults."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    spec = ExperimentSpec()
    train = spec.train
    seen: dict[str, int] = {}
    variants: list[tuple[str, list]] = []
    for ln, rawline in enumerate(lines, start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ValueError(f"{path}:{ln}: duplicate key {key!r} (first at line {seen[key]})")
        seen[key] = ln
        try:
            if key == "name":
                spec.name = raw
            elif key == "repeats":
                spec.repeats = int(raw)
                if spec.repeats < 1:
                    raise ValueError("repeats must be >= 1")
            elif key.startswith("train."):
                fpath = key[len("train."):]
                _, _, ftyp = _resolve(train, fpath)
                train = _set_path(train, fpath, _parse_value(raw, ftyp))
            elif key.startswith("variant."):
                fpath = key[len("variant."):]
                _, _, ftyp = _resolve(train, fpath)
                if typing.get_origin(ftyp) is tuple:
                    raise ValueError(f"tuple field {fpath!r} cannot be swept")
                values = [_parse_value(v, ftyp) for v in raw.split(",")]
                variants.append((fpath, values))
            else:
                top = ["name", "repeats", "train.<field>", "variant.<field>"]
                hint = difflib.get_close_matches(key.split(".")[0], ["name", "repeats", "train", "variant"], n=1)
                extra = f" (did you mean {hint[0]!r}?)" if hint else ""
                raise KeyError(f"unknown key {key!r}{extra}; top-level keys: {top}")
        except (KeyError, ValueError) as e:
            msg = e.args[0] if e.args else str(e)
            raise ValueError(f"{path}:{ln}: {msg}") from None
    spec.train = train
    spec.variants = variants
    return spec


def _dump_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_dump_value(x) for x in v)
    return str(v)


def _flatten_fields(obj, prefix: str) -> list[tuple[str, str]]:
    out = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        if is_dataclass(v):
            out.extend(_flatten_fields(v, f"{prefix}{f.name}."))
        else:
            out.append((f"{prefix}{f.name}", _dump_value(v)))
    return out


def dump_config(spec: ExperimentSpec) -> str:
    """Canonical text form; parse(dump(spec)) is a fixed point."""
    lines = [f"name = {spec.name}", f"repeats = {spec.repeats}"]
    lines += [f"train.{k} = {v}" for k, v in _flatten_fields(spec.train, "")]
    lines += [
        f"variant.{path} = " + ",".join(_dump_value(v) for v in values)
        for path, values in spec.variants
    ]
    return "\n".join(lines) + "\n"


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _run_worker(task) -> list[float]:
    """Run one seed; write its CSV and checkpoint; return the final row."""
    cfg, csv_path, ckpt_path = task
    history, state = run_experiment(cfg)
    write_metrics_csv(history, csv_path)
    if ckpt_path:
        save_run_state(ckpt_path, state)
    return history[-1].as_row() if history else [0.0] * 11


def _map_tasks(worker, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, tasks))


def _summary_text(rows: list[list[float]]) -> str:
    arr = np.array(rows)
    lines = ["metric,mean,std"]
    for i, name in enumerate(SUMMARY_METRICS, start=1):
        col = arr[:, i]
        std = float(np.std(col, ddof=1)) if col.size > 1 else 0.0
        lines.append(f"{name},{np.mean(col):.6f},{std:.6f}")
    return "\n".join(lines) + "\n"


def cmd_run(spec: ExperimentSpec, out_dir: str, jobs: int = 1) -> int:
    os.makedirs(out_dir, exist_ok=True)
    tasks = []
    for r in range(spec.repeats):
        cfg = replace(spec.train, seed=spec.train.seed + r)
        base = os.path.join(out_dir, f"{spec.name}-seed{cfg.seed}")
        tasks.append((cfg, base + ".csv", base + ".ckpt.npz"))
    finals = _map_tasks(_run_worker, tasks, jobs)
    _atomic_write(os.path.join(out_dir, "summary.csv"), _summary_text(finals))
    top1 = np.array(finals)[:, 5]
    std = float(np.std(top1, ddof=1)) if top1.size > 1 else 0.0
    print(
        f"{spec.name}: {spec.repeats} seed(s), final top-1 "
        f"{np.mean(top1):.4f} +/- {std:.4f} -> {out_dir}"
    )
    return 0


def _ablate_worker(task) -> list[float]:
    cfg = task
    history, _ = run_experiment(cfg)
    return history[-1].as_row() if history else [0.0] * 11


def build_result_table(spec: ExperimentSpec, jobs: int = 1) -> ResultTable:
    """Cartesian sweep over the variant lines, repeats seeds per combo."""
    combos = list(itertools.product(*[
        [(path, v) for v in values] for path, values in spec.variants
    ]))
    variants = []
    for combo in combos:
        desc = ",".join(f"{p}={_dump_value(v)}" for p, v in combo)
        cfg = spec.train
        for p, v in combo:
            cfg = _set_path(cfg, p, v)
        variants.append((desc, cfg))
    variants.sort(key=lambda r: r[0])

    tasks = []
    for _, cfg in variants:
        for r in range(spec.repeats):
            tasks.append(replace(cfg, seed=cfg.seed + r))
    finals = _map_tasks(_ablate_worker, tasks, jobs)

    seeds = [spec.train.seed + r for r in range(spec.repeats)]
    rows = []
    for i, (desc, _) in enumerate(variants):
        vals = [finals[i * spec.repeats + r][5] for r in range(spec.repeats)]
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        rows.append(ResultRow(variant=desc, per_seed_top1=vals,
                              mean=float(np.mean(vals)), std=std))
    return ResultTable(seeds=seeds, rows=rows)


def cmd_ablate(spec: ExperimentSpec, out_dir: str, jobs: int = 1) -> int:
    if not spec.variants:
        print("ablate: config declares no variant lines", file=sys.stderr)
        return 2
    os.makedirs(out_dir, exist_ok=True)
    table = build_result_table(spec, jobs)
    print(f"{'variant':<40} {'mean':>8} {'std':>8}")
    for r in table.rows:
        print(f"{r.variant:<40} {r.mean:>8.4f} {r.std:>8.4f}")
    _atomic_write(os.path.join(out_dir, f"{spec.name}-ablation.csv"), table.to_csv())
    return 0


def cmd_verify() -> int:
    return verify.run_all()


def cmd_data_gen(spec: ExperimentSpec, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    seeds = derive_seeds(spec.train.seed)
    ds = build_dataset(spec.train.data, seeds["data"], seeds["split"])
    path = os.path.join(out_dir, f"{spec.name}.data")
    save_snapshot(ds, path)
    print(
        f"{spec.name}: {len(ds.labeled)} labeled / {len(ds.unlabeled)} unlabeled / "
        f"{len(ds.test)} test -> {path}"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="sscl",
        description="Semi-supervised contrastive learning with similarity co-calibration",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("config", help="path to a key=value experiment config")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out-dir", default=None, help="output directory (or $SSCL_OUT_DIR)")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    add_common(sub.add_parser("run", help="run the experiment, one run per seed"))
    add_common(sub.add_parser("ablate", help="Cartesian sweep over variant lines"))
    sub.add_parser("verify", help="run the invariant/oracle property suites")
    data_p = sub.add_parser("data", help="dataset utilities")
    data_sub = data_p.add_subparsers(dest="data_command", required=True)
    add_common(data_sub.add_parser("gen", help="generate and snapshot the dataset"))

    args = parser.parse_args(argv)
    if args.command == "verify":
        return cmd_verify()

    out_dir = args.out_dir or os.environ.get("SSCL_OUT_DIR", "sscl-out")
    try:
        spec = parse_config(args.config)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if args.seed is not None:
        spec.train = replace(spec.train, seed=args.seed)

    try:
        if args.command == "run":
            return cmd_run(spec, out_dir, args.jobs)
        if args.command == "ablate":
            return cmd_ablate(spec, out_dir, args.jobs)
        if args.command == "data":
            return cmd_data_gen(spec, out_dir)
    except Exception as e:  # surface context, keep exit nonzero
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
