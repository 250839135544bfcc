"""Command-line interface.

Subcommands: run, validate, profile, sweep, lrn-table.  Exit codes: 0 on
success, 1 on validation/tolerance failure, 2 on usage errors, 3 on I/O
errors.  Worker count comes from PIPECNN_THREADS (0 = single-threaded
deterministic mode) unless overridden per call site.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace

import numpy as np

from . import lrn as lrnmod
from . import netio, perf, reference
from .errors import NetworkValidationError, ParseError, PipeCnnError
from .model import FeatureMap
from .runtime import execute_network, worker_count

CONV_TOL = 1e-5
POOL_AVG_TOL = 1e-6
LRN_TOL = 5e-3

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _add_common(p, net_required=True):
    p.add_argument("--net", required=net_required,
                   help="bundled network name (alexnet, vgg16) or JSON path")
    p.add_argument("--vec", type=int, default=None, help="vec_size override")
    p.add_argument("--cu", type=int, default=None, help="cu_num override")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--channel-depth", type=int, default=None)
    p.add_argument("--lrn-n", type=int, default=None)
    p.add_argument("--out", default=None, help="output file path")
    p.add_argument("--format", choices=("json", "text", "csv"), default="text")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pipecnn",
        description="Emulator and performance model of a pipelined CNN FPGA accelerator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a network and write the output tensor")
    _add_common(p)
    p.add_argument("--input", default=None, help="input tensor file (default: seeded random)")
    p.add_argument("--device", default="stratixv_a7")

    p = sub.add_parser("validate", help="check every layer against the brute-force oracles")
    _add_common(p)

    p = sub.add_parser("profile", help="run a network and emit the kernel timeline")
    _add_common(p)
    p.add_argument("--input", default=None)
    p.add_argument("--device", default="stratixv_a7")

    p = sub.add_parser("sweep", help="design-space sweep over (vec_size, cu_num)")
    _add_common(p)
    p.add_argument("--device", default="stratixv_a7")
    p.add_argument("--vec-set", default="4,8,16")
    p.add_argument("--cu-set", default="2,4,8,16")

    p = sub.add_parser("lrn-table", help="build and dump a normalization table")
    p.add_argument("--lrn-n", type=int, default=2)
    p.add_argument("--k", type=float, default=2.0)
    p.add_argument("--alpha", type=float, default=1e-4)
    p.add_argument("--beta", type=float, default=0.75)
    p.add_argument("--x-min", type=float, default=2.0 ** -16)
    p.add_argument("--x-max", type=float, default=2.0 ** 16)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("json", "text", "csv"), default="text")
    return ap


def _network_and_config(args):
    net = netio.load_network(args.net)
    cfg = net.accelerator_config(vec_size=args.vec, cu_num=args.cu,
                                 channel_depth=args.channel_depth,
                                 lrn_n=args.lrn_n)
    return net, cfg


def _load_inputs(args, net, cfg):
    if getattr(args, "input", None):
        dense = netio.load_tensor(args.input)
        if dense.ndim != 3:
            raise ParseError(f"{args.input}: input tensor must be rank 3 (H, W, C)")
        fms = [FeatureMap.from_dense(dense, cfg.vec_size)] * args.batch
    else:
        fms = [FeatureMap.from_dense(netio.generate_input(net.input_shape, args.seed, i),
                                     cfg.vec_size) for i in range(args.batch)]
    return fms


def _emit(args, payload_rows, header, title):
    fmt = args.format
    if fmt == "json":
        text = json.dumps(payload_rows, indent=2) + "\n"
    elif fmt == "csv":
        lines = [",".join(header)]
        lines += [",".join(str(r[h]) for h in header) for r in payload_rows]
        text = "\n".join(lines) + "\n"
    else:
        widths = [max(len(h), max((len(str(r[h])) for r in payload_rows), default=0))
                  for h in header]
        lines = [title,
                 "  ".join(h.ljust(w) for h, w in zip(header, widths))]
        lines += ["  ".join(str(r[h]).ljust(w) for h, w in zip(header, widths))
                  for r in payload_rows]
        text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    net, cfg = _network_and_config(args)
    device = netio.device_profile(args.device)
    banks, biases = netio.generate_weights(net.layers, args.seed, cfg.vec_size)
    inputs = _load_inputs(args, net, cfg)
    t0 = time.perf_counter()
    outputs, profile = execute_network(net.layers, banks, biases, inputs, cfg,
                                       batch=args.batch)
    wall = time.perf_counter() - t0
    _, modeled_time, gops = perf.network_cost(net.layers, cfg, device, args.batch)
    ops = perf.network_ops(net.layers) * args.batch
    if args.out:
        netio.save_tensor(args.out, np.asarray(outputs, np.float32))
    summary = {"net": net.name, "batch": args.batch, "seed": args.seed,
               "vec_size": cfg.vec_size, "cu_num": cfg.cu_num,
               "threads": worker_count(None),
               "total_ops": ops,
               "modeled_time_s": round(modeled_time, 6),
               "modeled_gops": round(gops, 3),
               "emulator_wall_s": round(wall, 3),
               "output": args.out}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_validate(args) -> int:
    net, cfg = _network_and_config(args)
    banks, biases = netio.generate_weights(net.layers, args.seed, cfg.vec_size)
    rng = np.random.default_rng([args.seed, 17])
    failures = 0
    table_cache = {}
    from .conv import run_conv_layer, run_fc_layer
    from .pooling import pool_plane

    print(f"validating {net.name} per layer against reference oracles "
          f"(seed {args.seed}, vec {cfg.vec_size}, cu {cfg.cu_num})")
    for i, layer in enumerate(net.layers):
        shape = layer.input_shape
        dense_in = (rng.random((shape.h, shape.w, shape.c), dtype=np.float32)
                    - np.float32(0.5))
        fm = FeatureMap.from_dense(dense_in, cfg.vec_size)
        dense_w = banks[i].to_dense()
        checks = []
        if layer.layer_type == "fc":
            got = run_fc_layer(layer, fm, banks[i], biases[i], cfg).to_dense().reshape(-1)
            ref = reference.fc_layer_ref(dense_in.reshape(-1),
                                         dense_w.reshape(layer.output_maps, -1),
                                         biases[i], layer.relu)
            checks.append(("fc", reference.max_rel_error(got, ref), CONV_TOL))
        else:
            got_fm = run_conv_layer(layer, fm, banks[i], biases[i], cfg)
            ref = reference.conv_layer_ref(layer, dense_in, dense_w, biases[i])
            checks.append(("conv", reference.max_rel_error(got_fm.to_dense(), ref), CONV_TOL))
            if layer.pool is not None:
                got_dense = got_fm.to_dense()
                pooled = np.stack([pool_plane(got_dense[:, :, c], layer.pool)
                                   for c in range(got_dense.shape[2])], axis=2)
                pref = reference.pool_ref(got_dense, layer.pool)
                tol = 0.0 if layer.pool.mode == "max" else POOL_AVG_TOL
                checks.append(("pool", reference.max_rel_error(pooled, pref), tol))
                got_fm = FeatureMap.from_dense(pooled, cfg.vec_size)
            if layer.lrn is not None:
                key = (layer.lrn, cfg.lrn_n)
                if key not in table_cache:
                    table_cache[key] = lrnmod.lrn_build_table(
                        cfg.lrn_n, layer.lrn.k, layer.lrn.alpha, layer.lrn.beta)
                got = lrnmod.lrn_apply(got_fm, layer.lrn, table_cache[key]).to_dense()
                lref = reference.lrn_ref(got_fm.to_dense(), layer.lrn)
                checks.append(("lrn", reference.max_rel_error(got, lref), LRN_TOL))
        for kind, err, tol in checks:
            ok = err <= tol
            failures += 0 if ok else 1
            print(f"  layer {i:2d} {layer.name:10s} {kind:5s} "
                  f"max_rel_err={err:.3e} tol={tol:.1e} {'ok' if ok else 'FAIL'}")
    if failures:
        print(f"{failures} check(s) breached tolerance")
        return EXIT_VALIDATION
    print("all layers within tolerance")
    return EXIT_OK


def cmd_profile(args) -> int:
    net, cfg = _network_and_config(args)
    device = netio.device_profile(args.device)
    banks, biases = netio.generate_weights(net.layers, args.seed, cfg.vec_size)
    inputs = _load_inputs(args, net, cfg)
    _, profile = execute_network(net.layers, banks, biases, inputs, cfg,
                                 batch=args.batch)
    costs, total, gops = perf.network_cost(net.layers, cfg, device, args.batch)
    records = profile.timeline_records()
    if args.out:
        with open(args.out, "w") as fh:
            profile.export_timeline(fh)
        print(f"wrote {len(records)} timeline records to {args.out}")
    else:
        profile.export_timeline(sys.stdout)
    print(f"modeled: {total * 1e3:.2f} ms, {gops:.1f} GOPS; "
          f"measured stall time {profile.total_stall_s():.3f} s", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args) -> int:
    net, cfg = _network_and_config(args)
    device = netio.device_profile(args.device)
    vecs = [int(v) for v in args.vec_set.split(",") if v]
    cus = [int(v) for v in args.cu_set.split(",") if v]
    points = perf.sweep(net.layers, device, vecs, cus, batch=args.batch,
                        base_cfg=cfg)
    rows = [{"vec": p.cfg.vec_size, "cu": p.cfg.cu_num,
             "dsp": p.resources.dsp, "logic": p.resources.logic,
             "ram": p.resources.ram,
             "time_ms": round(p.total_time * 1e3, 3),
             "gops": round(p.gops, 2),
             "density": round(p.density, 3),
             "feasible": p.feasible} for p in points]
    header = ["vec", "cu", "dsp", "logic", "ram", "time_ms", "gops", "density", "feasible"]
    _emit(args, rows, header,
          f"design points for {net.name} on {args.device} (batch {args.batch})")
    return EXIT_OK


def cmd_lrn_table(args) -> int:
    table = lrnmod.lrn_build_table(args.lrn_n, args.k, args.alpha, args.beta,
                                   args.x_min, args.x_max)
    err = lrnmod.table_max_rel_error(table, args.samples)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table.to_text())
        print(f"wrote {table.segments} segments to {args.out}")
    else:
        sys.stdout.write(table.to_text())
    print(f"n={table.n} shift_bit={table.shift_bit} segments={table.segments} "
          f"max_rel_error={err:.4%}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "profile": cmd_profile,
            "sweep": cmd_sweep, "lrn-table": cmd_lrn_table}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, OSError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except NetworkValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except PipeCnnError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
