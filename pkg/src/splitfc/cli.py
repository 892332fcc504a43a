"""Command-line front end: train / codec / allocate.

Exit codes: 0 success, 2 configuration error, 3 infeasible bit budget.
A flat ``key = value`` config file can seed any train flag; explicit flags
win.  SPLITFC_THREADS caps the worker pool for budget sweeps.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import allocator, quantizer, sim, wire
from .allocator import AllocationProblem, BudgetInfeasibleError

__all__ = ["main"]


class ConfigError(Exception):
    pass


def _parse_scalar(text):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip("\"'")


def _load_config_file(path):
    values = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, _, raw = line.partition("=")
                values[key.strip().replace("-", "_")] = _parse_scalar(raw)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    return values


def _parse_dataset(spec, seed, test_fraction):
    """'blobs:CxDxN' or 'idx:images,labels[,test_images,test_labels]'."""
    kind, _, rest = spec.partition(":")
    if kind == "blobs":
        try:
            classes, dims, samples = (int(v) for v in rest.split("x"))
        except ValueError as exc:
            raise ConfigError(f"bad blobs spec {spec!r}; want blobs:<classes>x<dims>x<samples>") from exc
        full = sim.synthesize_blobs(classes, dims, samples, seed=seed)
        cut = samples - int(round(samples * test_fraction))
        if not 0 < cut <= samples:
            raise ConfigError("test fraction leaves no training data")
        train = sim.Dataset(full.inputs[:cut], full.labels[:cut], classes)
        test = sim.Dataset(full.inputs[cut:], full.labels[cut:], classes) if cut < samples else None
        return train, test
    if kind == "idx":
        paths = rest.split(",")
        if len(paths) not in (2, 4):
            raise ConfigError("idx spec wants images,labels[,test_images,test_labels]")
        try:
            train = sim.load_idx(paths[0], paths[1])
            test = sim.load_idx(paths[2], paths[3]) if len(paths) == 4 else None
        except (OSError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return train, test
    raise ConfigError(f"unknown dataset kind {kind!r}; want blobs: or idx:")


def _build_parser():
    parser = argparse.ArgumentParser(prog="splitfc")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="run a split-training simulation")
    tr.add_argument("--config", help="flat key=value file seeding the flags below")
    tr.add_argument("--dataset", help="blobs:<C>x<D>x<N> or idx:<images>,<labels>[,...]")
    tr.add_argument("--compressor", choices=sim.COMPRESSORS, default="splitfc")
    tr.add_argument("--R", type=float, default=16.0, dest="reduction_ratio",
                    help="feature-width reduction ratio (1 disables dropout)")
    tr.add_argument("--ce-d", type=float, default=0.4, help="uplink bits per entry")
    tr.add_argument("--ce-s", type=float, default=0.4, help="downlink bits per entry")
    tr.add_argument("--sweep-ce-d", help="comma list of uplink budgets; one trace per point")
    tr.add_argument("--qep", type=int, default=200, help="endpoint grid levels")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--devices", type=int, default=5)
    tr.add_argument("--iters", type=int, default=50, help="round-robin rounds")
    tr.add_argument("--batch", type=int, default=64)
    tr.add_argument("--lr", type=float, default=0.1)
    tr.add_argument("--feature-dim", type=int, default=128)
    tr.add_argument("--hidden-dim", type=int, default=64)
    tr.add_argument("--partition", choices=("iid", "label-shard", "dirichlet"),
                    default="label-shard")
    tr.add_argument("--beta", type=float, default=0.5, help="dirichlet concentration")
    tr.add_argument("--test-fraction", type=float, default=0.25)
    tr.add_argument("--eval-every", type=int, default=1)
    tr.add_argument("--out", default=".", help="output directory")

    co = sub.add_parser("codec", help="compress one matrix through the codec")
    co.add_argument("--in", dest="matrix", required=True, help=".npy matrix (batch x kept)")
    co.add_argument("--mask", help=".npy keep/drop bits (uplink only)")
    co.add_argument("--ce", type=float, default=0.4, help="bits per entry")
    co.add_argument("--direction", choices=("uplink", "downlink"), default="downlink")
    co.add_argument("--total-cols", type=int, help="full width before dropout (defaults to kept)")
    co.add_argument("--qep", type=int, default=200)
    co.add_argument("--ablate-M", type=int, dest="ablate_m",
                    help="force the two-stage column count")
    co.add_argument("--verify", action="store_true",
                    help="re-decode and check level regeneration")
    co.add_argument("--out", required=True, help="output payload path (.sfc)")
    co.add_argument("--stats", help="stats JSON path (default: <out>.json)")

    al = sub.add_parser("allocate", help="solve one bit-allocation instance")
    al.add_argument("--problem", required=True,
                    help="JSON: spans, batch_size, kept_cols, two_stage_count, bit_budget[, endpoint_levels]")
    al.add_argument("--oracle-cap", type=int,
                    help="also brute-force with this level cap (tiny instances)")
    al.add_argument("--out", help="write the solution JSON here instead of stdout")
    return parser


def _run_single_train(args, ce_d, out_dir, tag=""):
    train_set, test_set = _parse_dataset(args.dataset, args.seed, args.test_fraction)
    config = sim.TrainingConfig(
        dataset=train_set,
        test_set=test_set,
        compressor=args.compressor,
        num_devices=args.devices,
        rounds=args.iters,
        batch_size=args.batch,
        lr=args.lr,
        reduction_ratio=args.reduction_ratio,
        uplink_bits_per_entry=ce_d,
        downlink_bits_per_entry=args.ce_s,
        endpoint_levels=args.qep,
        feature_dim=args.feature_dim,
        hidden_dim=args.hidden_dim,
        partition_mode=args.partition,
        dirichlet_beta=args.beta,
        seed=args.seed,
        eval_every=args.eval_every,
    )
    trace = sim.train(config)
    os.makedirs(out_dir, exist_ok=True)
    trace.to_csv(os.path.join(out_dir, f"trace{tag}.csv"))
    summary = {
        "compressor": args.compressor,
        "seed": args.seed,
        "devices": args.devices,
        "rounds": args.iters,
        "batch_size": args.batch,
        "reduction_ratio": args.reduction_ratio,
        "uplink_bits_per_entry": ce_d,
        "downlink_bits_per_entry": args.ce_s,
        "final_accuracy": trace.final_accuracy,
        "uplink_nominal_bits": sum(r.nominal_bits for r in trace.reports if r.direction == "uplink"),
        "downlink_nominal_bits": sum(r.nominal_bits for r in trace.reports if r.direction == "downlink"),
        "uplink_packed_bits": sum(r.packed_bits for r in trace.reports if r.direction == "uplink"),
        "downlink_packed_bits": sum(r.packed_bits for r in trace.reports if r.direction == "downlink"),
        "param_transfer_bits": trace.param_transfer_bits,
    }
    with open(os.path.join(out_dir, f"summary{tag}.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return summary


def _cmd_train(args):
    if not args.dataset:
        raise ConfigError("train needs --dataset (or a config file providing it)")
    if args.sweep_ce_d:
        try:
            points = [float(v) for v in str(args.sweep_ce_d).split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError("bad --sweep-ce-d list") from exc
        if not points:
            raise ConfigError("empty --sweep-ce-d list")
        env_cap = os.environ.get("SPLITFC_THREADS")
        workers = min(len(points), int(env_cap) if env_cap else (os.cpu_count() or 1))
        if workers < 1:
            raise ConfigError("SPLITFC_THREADS must be positive")
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_single_train, args, ce, args.out, f"-ced{ce:g}")
                for ce in points
            ]
            for fut in futures:
                fut.result()
        print(f"swept {len(points)} uplink budgets into {args.out}")
        return 0
    summary = _run_single_train(args, getattr(args, "ce_d"), args.out)
    acc = summary["final_accuracy"]
    shown = "n/a" if acc is None else f"{acc:.4f}"
    print(f"final accuracy: {shown}  (trace in {args.out})")
    return 0


def _cmd_codec(args):
    try:
        matrix = np.load(args.matrix)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load matrix: {exc}") from exc
    if matrix.ndim != 2:
        raise ConfigError("codec expects a 2-D matrix")
    batch, kept = matrix.shape
    total = args.total_cols or kept
    config = quantizer.CodecConfig(batch, total, args.ce, args.direction, args.qep)
    mask = None
    if args.direction == "uplink":
        if args.mask:
            try:
                mask = np.load(args.mask).astype(np.uint8)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot load mask: {exc}") from exc
        else:
            mask = np.ones(total, dtype=np.uint8)
    elif args.mask:
        raise ConfigError("--mask applies to the uplink direction only")

    payload = quantizer.fwq_encode(matrix, config, mask=mask, two_stage_override=args.ablate_m)
    blob = wire.pack(payload, config)
    with open(args.out, "wb") as fh:
        fh.write(blob)

    decoded = quantizer.reconstruct_columns(payload, config)
    measured = float(((matrix - decoded) ** 2).sum())
    bound = quantizer.error_bound(matrix, payload, config)
    stats = {
        "batch_size": batch,
        "kept_cols": kept,
        "total_cols": total,
        "direction": args.direction,
        "bits_per_entry": args.ce,
        "bit_budget": config.bit_budget,
        "two_stage_count": payload.two_stage_count,
        "levels": [int(v) for v in payload.levels],
        "multiplier": payload.multiplier,
        "nominal_bits": quantizer.nominal_bits(payload, config),
        "packed_bits": len(blob) * 8,
        "measured_sq_error": measured,
        "error_bound": bound,
    }
    if args.verify:
        echoed = wire.unpack(blob, config)
        regen = quantizer.regenerate_levels(echoed, config)
        if not np.array_equal(regen, payload.levels):
            raise wire.WireFormatError("decoder regenerated different levels")
        if not np.array_equal(quantizer.reconstruct_columns(echoed, config), decoded):
            raise wire.WireFormatError("round-trip reconstruction mismatch")
        stats["verified"] = True
    stats_path = args.stats or args.out + ".json"
    with open(stats_path, "w") as fh:
        json.dump(stats, fh, indent=2)
        fh.write("\n")
    print(f"wrote {args.out} ({len(blob)} bytes); stats in {stats_path}")
    return 0


def _cmd_allocate(args):
    try:
        with open(args.problem) as fh:
            spec = json.load(fh)
        problem = AllocationProblem(
            spans=np.asarray(spec["spans"], dtype=np.float64),
            batch_size=int(spec["batch_size"]),
            kept_cols=int(spec["kept_cols"]),
            two_stage_count=int(spec["two_stage_count"]),
            bit_budget=float(spec["bit_budget"]),
            endpoint_levels=int(spec.get("endpoint_levels", 200)),
        )
    except (OSError, KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad problem spec: {exc}") from exc

    solution = allocator.solve(problem)
    result = {
        "levels_real": [float(v) for v in solution.levels_real],
        "levels_int": [int(v) for v in solution.levels_int],
        "multiplier": solution.multiplier,
        "objective_real": solution.objective_real,
        "objective_int": solution.objective_int,
        "bits_int": allocator.allocation_bits(problem, solution.levels_int),
        "bit_budget": problem.bit_budget,
    }
    if args.oracle_cap:
        levels, obj = allocator.brute_force_oracle(problem, args.oracle_cap)
        result["oracle_levels"] = [int(v) for v in levels]
        result["oracle_objective"] = obj
    text = json.dumps(result, indent=2) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)

    # Let a config file seed the train defaults, then reparse so explicit
    # flags override it.
    try:
        if argv and argv[0] == "train":
            probe, _ = parser.parse_known_args(argv)
            if getattr(probe, "config", None):
                overrides = _load_config_file(probe.config)
                train_parser = parser._subparsers._group_actions[0].choices["train"]
                aliases = {}
                for action in train_parser._actions:
                    aliases[action.dest] = action.dest
                    for opt in action.option_strings:
                        aliases[opt.lstrip("-").replace("-", "_")] = action.dest
                unknown = set(overrides) - set(aliases)
                if unknown:
                    raise ConfigError(f"unknown config keys: {sorted(unknown)}")
                train_parser.set_defaults(**{aliases[k]: v for k, v in overrides.items()})
        args = parser.parse_args(argv)
        handler = {"train": _cmd_train, "codec": _cmd_codec, "allocate": _cmd_allocate}[args.command]
        return handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BudgetInfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
