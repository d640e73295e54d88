"""Command-line interface: keygen, serve, submit, match, workload, bench."""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import crypto, kernels, sim
from .client import ServiceClient, SocketTransport
from .direct import OfferSpec, RequestSpec
from .service import RideService, ServiceConfig, SocketServer
from .sim import (
    ExperimentConfig,
    GridCity,
    ServicePool,
    ccrs_size_model,
    generate_workload,
    identifier_permutation,
    load_workload,
    run_experiment,
    save_workload,
    sweep_cell_count,
    sweep_matrix,
    sweep_request_prefixes,
    sweep_time_bits,
    write_metrics_csv,
)


def _add_crypto_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--filter-bits", type=int, default=2048)
    p.add_argument("--n-hashes", type=int, default=24)
    p.add_argument("--id-bits", type=int, default=11)
    p.add_argument("--time-bits", type=int, default=25)
    p.add_argument("--time-slots", type=int, default=48)
    p.add_argument("--max-items", type=int, default=60)


def _service_config(args) -> ServiceConfig:
    if getattr(args, "config", None):
        return ServiceConfig.from_file(args.config)
    return ServiceConfig(
        filter_bits=args.filter_bits,
        n_hashes=args.n_hashes,
        id_bits=args.id_bits,
        time_bits=args.time_bits,
        time_slots=args.time_slots,
        max_items=args.max_items,
    )


def cmd_keygen(args) -> int:
    rng = np.random.default_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    dims = {
        "direct": args.filter_bits,
        "transfer": 2 * args.id_bits + args.time_bits,
    }
    for name, dim in dims.items():
        master = crypto.generate_master_key(dim, rng)
        secrets = crypto.generate_tos_secrets(dim, rng)
        crypto.save_key_material(os.path.join(args.out, f"master-{name}.key"), master)
        crypto.save_key_material(os.path.join(args.out, f"secrets-{name}.key"), secrets)
        deriver = crypto.KeyDeriver(master, secrets)
        for i in range(args.drivers):
            keys = deriver.derive("driver", rng)
            crypto.save_key_material(os.path.join(args.out, f"driver-{i}-{name}.key"), keys)
        for i in range(args.riders):
            keys = deriver.derive("rider", rng)
            crypto.save_key_material(os.path.join(args.out, f"rider-{i}-{name}.key"), keys)
        print(f"{name}: dim {dim}, master + secrets"
              f" + {args.drivers} driver / {args.riders} rider key sets -> {args.out}")
    return 0


def cmd_serve(args) -> int:
    config = _service_config(args)
    service = RideService(config, seed=args.seed)
    server = SocketServer(service, host=args.host, port=args.port)
    host, port = server.server_address
    print(f"listening on {host}:{port} (epoch {service.server.epoch})")
    if config.match_threshold:
        print(f"matching runs automatically at {config.match_threshold} pending requests")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        print("shutting down")
    finally:
        server.server_close()
    return 0


def _submit_workload(wl, scheme: str, driver: ServiceClient, rider: ServiceClient,
                     time_bits: int) -> tuple[list[str], list[str]]:
    reg = driver.registration
    perm = identifier_permutation(wl.city.cell_count, reg.epoch, reg.salt)
    offer_ids: list[str] = []
    if scheme == "direct":
        specs = [
            OfferSpec(
                o.offer_id,
                tuple(int(perm[c]) for c in o.pickup_cells),
                tuple(int(perm[c]) for c in o.dropoff_cells),
                tuple(int(perm[c]) for c in o.route),
                o.depart_seconds, o.capacity, o.cases,
            )
            for o in wl.offers
        ]
        offer_ids = driver.submit_direct_offers(specs)
        request_ids = rider.submit_direct_requests(
            [
                RequestSpec(
                    r.request_id,
                    int(perm[r.pickup]),
                    int(perm[r.dropoff]),
                    tuple(int(perm[c]) for c in r.route),
                    r.pickup_seconds,
                )
                for r in wl.requests
            ]
        )
    else:
        from .bloom import slot_index

        for o in wl.offers:
            cells = [
                (int(perm[cell]), slot_index(o.time_at(pos), time_bits))
                for pos, cell in enumerate(o.route)
            ]
            offer_ids.append(driver.submit_transfer_offer(cells, o.capacity))
        request_ids = [
            rider.submit_transfer_request(
                (int(perm[r.pickup]), slot_index(r.pickup_seconds, time_bits)),
                (int(perm[r.dropoff]), slot_index(r.dropoff_seconds, time_bits)),
                r.preference,
            )
            for r in wl.requests
        ]
    return offer_ids, request_ids


def cmd_submit(args) -> int:
    wl = load_workload(args.workload)
    with SocketTransport(args.host, args.port) as dt, SocketTransport(args.host, args.port) as rt:
        driver = ServiceClient(dt, rng=args.seed)
        rider = ServiceClient(rt, rng=args.seed + 1)
        driver.register("driver")
        rider.register("rider")
        time_bits = driver.registration.bundle.time_bits
        offer_ids, request_ids = _submit_workload(wl, args.scheme, driver, rider, time_bits)
        print(f"submitted {len(offer_ids)} offers, {len(request_ids)} requests")
        if args.poll:
            notes = rider.poll(request_ids) + driver.poll(offer_ids)
            for note in notes:
                print(note)
    return 0


def cmd_match(args) -> int:
    """One-shot local pipeline: load workload, submit in process, match, report."""
    wl = load_workload(args.workload)
    config = ExperimentConfig(
        scheme=args.scheme, rows=wl.city.rows, cols=wl.city.cols,
        n_offers=len(wl.offers), n_requests=len(wl.requests), seed=args.seed,
        filter_bits=args.filter_bits, n_hashes=args.n_hashes,
        id_bits=args.id_bits, time_bits=args.time_bits,
        time_slots=args.time_slots, max_items=args.max_items,
    )
    report = run_experiment(config, workload=wl)
    stream = open(args.csv, "w", newline="", encoding="utf-8") if args.csv else sys.stdout
    try:
        write_metrics_csv(stream, [report])
    finally:
        if args.csv:
            stream.close()
    return 0


def cmd_workload(args) -> int:
    city = GridCity(args.rows, args.cols)
    wl = generate_workload(
        city, args.offers, args.requests, args.seed,
        (args.min_route, args.max_route), args.time_slots,
        hit_rate=args.hit_rate, transfer_rate=args.transfer_rate,
        capacity=args.capacity, preference=args.preference,
    )
    save_workload(args.out, wl)
    print(f"wrote {len(wl.offers)} offers / {len(wl.requests)} requests to {args.out}")
    return 0


def _emit(reports, path: str | None) -> None:
    stream = open(path, "w", newline="", encoding="utf-8") if path else sys.stdout
    try:
        write_metrics_csv(stream, reports)
    finally:
        if path:
            stream.close()


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(","))


def cmd_bench(args) -> int:
    if args.sweep == "kernels":
        return _bench_kernels(args)
    base = ExperimentConfig(
        rows=args.rows, cols=args.cols,
        n_offers=args.offers, n_requests=args.requests,
        hit_rate=args.hit_rate, transfer_rate=args.transfer_rate,
        filter_bits=args.filter_bits, n_hashes=args.n_hashes,
        id_bits=args.id_bits, time_bits=args.time_bits,
        time_slots=args.time_slots, max_items=args.max_items,
    )
    seeds = _parse_ints(args.seeds)
    pool = ServicePool()
    if args.sweep == "requests":
        reports = sweep_request_prefixes(
            replace(base, scheme=args.scheme), _parse_ints(args.values), seeds, pool
        )
    elif args.sweep == "offers":
        reports = sweep_matrix(
            base, _parse_ints(args.values), (args.requests,), seeds, pool=pool
        )
    elif args.sweep == "cells":
        reports = sweep_cell_count(base, _parse_ints(args.values), seeds, pool)
        for count in _parse_ints(args.values):
            print(f"# ccrs_size_model({count}) = {ccrs_size_model(count)} bytes", file=sys.stderr)
    elif args.sweep == "time-bits":
        reports = sweep_time_bits(base, _parse_ints(args.values), seeds, pool)
    elif args.sweep == "fpp":
        from .bloom import sizing

        reports = []
        for fpp in (float(v) for v in args.values.split(",")):
            bits, hashes = sizing(args.max_items, fpp)
            cfg = replace(base, scheme="direct", filter_bits=bits, n_hashes=hashes)
            for seed in seeds:
                reports.append(run_experiment(replace(cfg, seed=seed), pool=pool))
    else:
        raise ValueError(f"unknown sweep {args.sweep!r}")
    _emit(reports, args.csv)
    return 0


def _bench_kernels(args) -> int:
    """Compare the compiled and pure-Python kernel backends."""
    from .kernels import reference

    backends = {"python": (reference.paired_dots, reference.cross_dots)}
    try:
        from .kernels import _simcore

        backends["compiled"] = (_simcore.paired_dots, _simcore.cross_dots)
    except ImportError:
        print("compiled backend not built; benchmarking python only", file=sys.stderr)
    rng = np.random.default_rng(args.seed)
    pairs = rng.standard_normal((4096, 512)), rng.standard_normal((4096, 512))
    cross = rng.standard_normal((256, 4096)), rng.standard_normal((64, 4096))
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'backend':<10} {'paired_dots ms':>15} {'cross_dots ms':>15}")
    for name, (paired, crossf) in backends.items():
        paired(*pairs)
        crossf(*cross)
        t0 = time.perf_counter()
        for _ in range(args.repeat):
            paired(*pairs)
        t1 = time.perf_counter()
        for _ in range(args.repeat):
            crossf(*cross)
        t2 = time.perf_counter()
        print(f"{name:<10} {1000 * (t1 - t0) / args.repeat:>15.3f} {1000 * (t2 - t1) / args.repeat:>15.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ridecloak", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate master keys, server secrets, user key sets")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--drivers", type=int, default=0)
    p.add_argument("--riders", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    _add_crypto_args(p)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("serve", help="run the matching server over TCP")
    p.add_argument("--config", help="key=value service config file")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7370)
    p.add_argument("--seed", type=int, default=None)
    _add_crypto_args(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("submit", help="submit a workload file to a running server")
    p.add_argument("--workload", required=True)
    p.add_argument("--scheme", choices=("direct", "transfer"), default="direct")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7370)
    p.add_argument("--poll", action="store_true", help="poll for notifications after submitting")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("match", help="run a workload through a local in-process service")
    p.add_argument("--workload", required=True)
    p.add_argument("--scheme", choices=("direct", "transfer"), default="direct")
    p.add_argument("--csv", help="write the metrics row here instead of stdout")
    p.add_argument("--seed", type=int, default=0)
    _add_crypto_args(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("workload", help="generate a synthetic workload file")
    p.add_argument("--out", required=True)
    p.add_argument("--rows", type=int, default=40)
    p.add_argument("--cols", type=int, default=40)
    p.add_argument("--offers", type=int, default=30)
    p.add_argument("--requests", type=int, default=50)
    p.add_argument("--min-route", type=int, default=6)
    p.add_argument("--max-route", type=int, default=12)
    p.add_argument("--hit-rate", type=float, default=0.85)
    p.add_argument("--transfer-rate", type=float, default=0.5)
    p.add_argument("--capacity", type=int, default=5)
    p.add_argument("--preference", default="min-cells")
    p.add_argument("--time-slots", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_workload)

    p = sub.add_parser("bench", help="run a metric sweep and emit CSV")
    p.add_argument("sweep", choices=("requests", "offers", "cells", "time-bits", "fpp", "kernels"))
    p.add_argument("--values", default="10,30,50",
                   help="comma-separated sweep values (counts, cell counts, bits, or fpp)")
    p.add_argument("--scheme", choices=("direct", "transfer"), default="transfer")
    p.add_argument("--rows", type=int, default=40)
    p.add_argument("--cols", type=int, default=40)
    p.add_argument("--offers", type=int, default=30)
    p.add_argument("--requests", type=int, default=50)
    p.add_argument("--hit-rate", type=float, default=0.85)
    p.add_argument("--transfer-rate", type=float, default=0.5)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeat", type=int, default=5, help="kernel benchmark repetitions")
    p.add_argument("--csv", help="write CSV here instead of stdout")
    _add_crypto_args(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
