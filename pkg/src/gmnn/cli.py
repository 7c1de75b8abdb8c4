"""Command-line entry point.

`gmnn run` binds a dataset to a task driver and writes a JSON report plus
one history CSV per seed; `gmnn table` renders reports side by side.
Report bytes depend only on the resolved configuration and seeds, never on
timing or worker count.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from dataclasses import fields
from pathlib import Path

from .baselines import LPConfig
from .em import EMConfig
from .graphdata import load_dataset
from .tasks import (LINK_METHODS, OBJECT_METHODS, UNSUP_METHODS, LinkTaskSpec,
                    ProbeConfig, default_link_config, default_unsup_config,
                    load_weighted_edges, render_mean_std, run_link_classification,
                    run_object_classification, run_unsupervised)

OUT_DIR_ENV = "GMNN_OUT_DIR"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); route through our codes
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="gmnn", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    run = sub.add_parser("run", help="run a task driver and write reports")
    run.add_argument("--task", required=True, choices=("object", "link", "unsup"))
    run.add_argument("--method", required=True)
    run.add_argument("--dataset", required=True, help="portable dataset JSON")
    run.add_argument("--edge-weights", default=None,
                     help="weighted-edge sidecar for the link task "
                          "(default: <dataset stem>.weights.json)")
    run.add_argument("--seeds", type=int, default=10,
                     help="run seeds 0..N-1 (default 10)")
    run.add_argument("--seed-list", default=None,
                     help="comma-separated explicit seeds; overrides --seeds")
    run.add_argument("--out", default=None,
                     help=f"output directory (default ${OUT_DIR_ENV} or ./runs)")
    run.add_argument("--parallel", type=int, default=1,
                     help="run seeds on up to N worker processes")
    run.add_argument("--topk", type=int, default=0,
                     help="unsup only: truncate soft label rows to k entries")

    table = sub.add_parser("table", help="render reports as a comparison table")
    table.add_argument("reports", nargs="+")
    return parser


_OVERRIDE_TARGETS = {"em": EMConfig, "lp": LPConfig, "probe": ProbeConfig,
                     "link": LinkTaskSpec}
_LINK_FIELDS = ("pos_threshold", "neg_threshold", "train_size", "val_size")


def _parse_overrides(extra: list[str]) -> dict[str, dict]:
    """Consume dotted flags like `--em.tau 0.1` into per-prefix dicts."""
    out: dict[str, dict] = {k: {} for k in _OVERRIDE_TARGETS}
    i = 0
    while i < len(extra):
        flag = extra[i]
        if not flag.startswith("--") or "." not in flag:
            raise UsageError(f"unknown flag: {flag}")
        prefix, _, name = flag[2:].partition(".")
        if prefix not in _OVERRIDE_TARGETS:
            raise UsageError(f"unknown override group: {flag}")
        if i + 1 >= len(extra):
            raise UsageError(f"flag {flag} needs a value")
        value = extra[i + 1]
        cls = _OVERRIDE_TARGETS[prefix]
        valid = {f.name: f for f in fields(cls)}
        if prefix == "link":
            valid = {k: v for k, v in valid.items() if k in _LINK_FIELDS}
        if name not in valid:
            raise UsageError(f"unknown field {name!r} for --{prefix}.*")
        out[prefix][name] = _cast(value, valid[name].type, flag)
        i += 2
    return out


def _cast(value: str, annotation, flag: str):
    text = str(annotation)
    try:
        if "bool" in text:
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ValueError(value)
        if "int" in text:
            return int(value)
        if "float" in text:
            return float(value)
        return value
    except ValueError:
        raise UsageError(f"bad value {value!r} for {flag}") from None


def _seed_values(args) -> list[int]:
    if args.seed_list:
        try:
            return [int(s) for s in args.seed_list.split(",") if s.strip() != ""]
        except ValueError:
            raise UsageError(f"bad --seed-list: {args.seed_list!r}") from None
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    return list(range(args.seeds))


def _default_config(task: str) -> EMConfig:
    if task == "link":
        return default_link_config()
    if task == "unsup":
        return default_unsup_config()
    return EMConfig()


def _write_result(result, out_dir: Path, stem: str) -> Path:
    base = f"{result.task}_{result.method}_{stem}"
    report_path = out_dir / f"{base}.json"
    with open(report_path, "w") as fh:
        fh.write(result.to_json())
    for seed, history in zip(result.seeds, result.histories):
        history.write_csv(out_dir / f"{base}_seed{seed}_history.csv")
    return report_path


def _run(args, extra: list[str]) -> int:
    overrides = _parse_overrides(extra)
    cfg = _default_config(args.task)
    try:
        cfg = cfg.replace(**overrides["em"])
        lp_cfg = LPConfig(**overrides["lp"])
        probe_cfg = ProbeConfig(**overrides["probe"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    seeds = _seed_values(args)
    if args.parallel < 1:
        raise UsageError("--parallel must be at least 1")

    method = args.method
    allowed = {"object": OBJECT_METHODS, "link": LINK_METHODS, "unsup": UNSUP_METHODS}[args.task]
    if method not in allowed:
        raise UsageError(f"unknown method {method!r} for task {args.task!r} "
                         f"(choose from {', '.join(allowed)})")

    dataset_path = Path(args.dataset)
    stem = dataset_path.stem
    try:
        g = load_dataset(dataset_path)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load dataset {dataset_path}: {exc}") from None

    out_dir = Path(args.out or os.environ.get(OUT_DIR_ENV) or "runs")
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        if args.task == "object":
            result = run_object_classification(g, method, cfg, seeds, lp_cfg=lp_cfg,
                                               parallel=args.parallel, dataset=stem)
            results = [result]
        elif args.task == "link":
            sidecar = Path(args.edge_weights or dataset_path.with_suffix(".weights.json"))
            try:
                spec = load_weighted_edges(sidecar, **overrides["link"])
            except (OSError, ValueError, json.JSONDecodeError) as exc:
                raise DataError(f"cannot load edge weights {sidecar}: {exc}") from None
            result = run_link_classification(spec, method, cfg, seeds, lp_cfg=lp_cfg,
                                             parallel=args.parallel, dataset=stem)
            results = [result]
        else:
            pair = run_unsupervised(g, cfg, seeds, probe_cfg=probe_cfg,
                                    topk=args.topk or None,
                                    parallel=args.parallel, dataset=stem)
            # the requested method is primary; its pretraining companion rides along
            results = [pair[method]] + [r for k, r in sorted(pair.items()) if k != method]
    except ValueError as exc:
        # drivers flag unusable data or splits this way; not an internal failure
        raise DataError(str(exc)) from None

    for result in results:
        path = _write_result(result, out_dir, stem)
        print(f"{result.task}/{result.method} on {stem}: "
              f"{render_mean_std(result.mean, result.std)}  -> {path}")
    return 0


def print_table(reports: list[dict]) -> str:
    """One row per method, one column per dataset, means in percent to one
    decimal. Missing combinations stay blank."""
    methods: list[str] = []
    datasets: list[str] = []
    cells: dict[tuple[str, str], str] = {}
    for rep in reports:
        method = rep["method"]
        dataset = rep.get("config", {}).get("dataset", "") or "?"
        if method not in methods:
            methods.append(method)
        if dataset not in datasets:
            datasets.append(dataset)
        cells[(method, dataset)] = f"{rep['mean'] * 100:.1f}"
    width0 = max([len("method")] + [len(m) for m in methods]) + 2
    widths = [max(len(d), 6) + 2 for d in datasets]
    lines = ["method".ljust(width0) + "".join(d.rjust(w) for d, w in zip(datasets, widths))]
    for m in methods:
        row = m.ljust(width0)
        row += "".join(cells.get((m, d), "").rjust(w) for d, w in zip(datasets, widths))
        lines.append(row.rstrip())
    return "\n".join(lines) + "\n"


def _table(args) -> int:
    reports = []
    for path in args.reports:
        try:
            with open(path) as fh:
                reports.append(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read report {path}: {exc}") from None
    sys.stdout.write(print_table(reports))
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command == "run":
            return _run(args, extra)
        if args.command == "table":
            if extra:
                raise UsageError(f"unknown flag: {extra[0]}")
            return _table(args)
        raise UsageError("choose a command: run or table")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
