"""Command-line entry point: simulate, keyrate, relay and kms-serve."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from qkdnet.config import ConfigError, LinkConfig, NetworkConfig, load_config, preset_path
from qkdnet.core import binary_entropy
from qkdnet.keyrate import BoundsVacuous, analytic_breakdown, decoy_bounds, expected_counts
from qkdnet.kms import InsufficientMaterial, KeyStore, RelayError, encode_block
from qkdnet.netstack import OK, audit_leak, run_block_session
from qkdnet.quantum_sim import observed_qbers, sample_detections, sifted_z_rate

log = logging.getLogger("qkdnet")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2, 3
CSV_FIELDS = ("block", "n_z", "qber_z", "qber_x", "leak_bits", "f_ec", "l_secret", "block_time_s", "skr_bps", "status")


class InvariantViolation(RuntimeError):
    pass


def block_seed(seed: int, block: int) -> int:
    return int(np.random.SeedSequence([seed, block]).generate_state(1, dtype=np.uint64)[0] >> 1)


def simulate_block(lk: LinkConfig, n_z: int, seed: int, qber_est: float, epoch: int = 0, link_params=None,
                   seed_registry: set | None = None):
    """Simulate enough slots for ``n_z`` sifted Z bits and run one session."""
    link = link_params or lk.link_params
    proto, src = lk.protocol_params, lk.source_params
    rate = sifted_z_rate(link, proto, src, lk.qber_z_intrinsic)
    if rate <= 0:
        raise ConfigError(f"link {lk.id}: no detections expected")
    n_slots = math.ceil(1.05 * n_z / rate * src.qubit_rate_hz) + 100_000
    for attempt in range(8):
        states, records = sample_detections(n_slots, link, proto, src, seed, lk.qber_z_intrinsic)
        res = run_block_session(
            states, records.public(), proto,
            source=src, n_z_target=n_z, qber_est=qber_est,
            filter_width_s=link.filter_width_s, seed=seed, link_id=lk.id, epoch=epoch,
            seed_registry=seed_registry,
        )
        if res.sifted is not None and res.sifted.n_z >= n_z:
            return res
        n_slots = int(n_slots * 1.5)
    raise RuntimeError(f"could not accumulate {n_z} sifted bits")


def _row(i, res) -> dict:
    b, bd = res.sifted, res.breakdown
    n_z = b.n_z if b is not None else 0
    qz = b.qber_z_observed if b is not None else float("nan")
    leak = res.ledger.ec_disclosed_bits
    f = leak / (n_z * binary_entropy(qz)) if n_z and 0 < qz < 0.5 else float("nan")
    return {
        "block": i, "n_z": n_z, "qber_z": qz,
        "qber_x": b.qber_x_observed if b is not None else float("nan"),
        "leak_bits": leak, "f_ec": f,
        "l_secret": bd.l_secret if bd else 0,
        "block_time_s": bd.block_time_s if bd else float("nan"),
        "skr_bps": bd.skr_bps if bd else 0.0,
        "status": res.status,
    }


def _check(res) -> None:
    if not audit_leak(res.transcript, res.ledger):
        raise InvariantViolation("leak ledger does not match the transcript")
    if res.status == OK and not res.key_alice.same_bits(res.key_bob):
        raise InvariantViolation("final keys differ after a successful session")


def _drifted(lk: LinkConfig, i: int, drift: dict | None):
    if not drift:
        return lk.link_params
    amp, period = drift.get("vis_amplitude", 0.0), drift.get("period_blocks", 100)
    vis = lk.link_params.visibility_x + amp * math.sin(2 * math.pi * i / period)
    return replace(lk.link_params, visibility_x=min(1.0, vis))


def _one_block(args, registry=None):
    lk, n_z, seed, i, qber_est, drift = args
    res = simulate_block(lk, n_z, block_seed(seed, i), qber_est, epoch=i, link_params=_drifted(lk, i, drift),
                         seed_registry=registry)
    _check(res)
    return _row(i, res)


def run_simulate(config: NetworkConfig, link_id: str, blocks: int, seed: int, n_z: int | None = None,
                 drift: dict | None = None, workers: int = 1, progress=None) -> list[dict]:
    """One report row per block, ordered by block index.

    Cascade's initial block size comes from the link's expected QBER_Z
    (the value a running system would carry over from previous blocks).
    """
    lk = config.link(link_id)
    if blocks < 0:
        raise ValueError("blocks must be >= 0")
    n_z = n_z or lk.n_z_block
    qber_est = observed_qbers(lk.link_params, lk.protocol_params, lk.source_params, lk.qber_z_intrinsic)[0]
    jobs = [(lk, n_z, seed, i, qber_est, drift) for i in range(blocks)]
    if workers > 1 and blocks > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_one_block, jobs))
    else:
        rows, registry = [], set()
        for j in jobs:
            rows.append(_one_block(j, registry))
            if progress:
                progress(rows[-1])
    return rows


def run_longrun(config: NetworkConfig, seed: int | None = None, blocks: int | None = None,
                n_z: int | None = None, workers: int = 1, progress=None) -> list[dict]:
    lr = dict(config.scenario.get("longrun", {}))
    if not lr:
        raise ConfigError("scenario.longrun: missing")
    drift = {k: lr[k] for k in ("vis_amplitude", "period_blocks") if k in lr}
    return run_simulate(
        config, lr["link"], blocks if blocks is not None else lr.get("blocks", 200),
        seed if seed is not None else config.scenario.get("seed", 0),
        n_z=n_z or lr.get("n_z_block"), drift=drift, workers=workers, progress=progress,
    )


def skr_cv(rows) -> float:
    s = np.array([r["skr_bps"] for r in rows], dtype=float)
    return float(s.std() / s.mean()) if s.size and s.mean() > 0 else float("inf")


def run_keyrate(config: NetworkConfig, link_id: str | None = None, n_z: int | None = None) -> list[dict]:
    """Analytic key length and SKR per link at the configured full block size."""
    out = []
    for lk in config.links:
        if link_id is not None and lk.id != link_id:
            continue
        nz = n_z or lk.n_z_full or lk.n_z_block
        counts, _ = expected_counts(lk.link_params, lk.protocol_params, lk.source_params, nz, lk.qber_z_intrinsic)
        vacuous = counts is None
        if not vacuous:
            try:
                decoy_bounds(counts, lk.protocol_params)
            except BoundsVacuous:
                vacuous = True
        if vacuous:
            log.warning("link %s: decoy bounds vacuous, no key", lk.id)
        bd = analytic_breakdown(lk.link_params, lk.protocol_params, lk.source_params, nz, lk.qber_z_intrinsic, lk.f_ec)
        qz, qx = observed_qbers(lk.link_params, lk.protocol_params, lk.source_params, lk.qber_z_intrinsic)
        out.append({"link": lk.id, "n_z": nz, "qber_z": qz, "qber_x": qx, "breakdown": bd,
                    "vacuous": vacuous, "target_skr_bps": lk.targets.get("skr_bps")})
    if link_id is not None and not out:
        raise ConfigError(f"unknown link {link_id!r}")
    return out


def format_keyrate(rows) -> str:
    head = ["", *[r["link"] for r in rows]]
    lines = [
        ("n_Z", [f"{r['n_z']:.3g}" for r in rows]),
        ("QBER_Z %", [f"{100 * r['qber_z']:.2f}" for r in rows]),
        ("QBER_X %", [f"{100 * r['qber_x']:.2f}" for r in rows]),
        ("s_Z,1 lower", [f"{r['breakdown'].s_z1_lower:.4g}" for r in rows]),
        ("phi_Z upper", [f"{r['breakdown'].phi_z_upper:.4f}" for r in rows]),
        ("lambda_EC", [str(r["breakdown"].lambda_ec) for r in rows]),
        ("l", [str(r["breakdown"].l_secret) for r in rows]),
        ("block time s", [f"{r['breakdown'].block_time_s:.1f}" for r in rows]),
        ("SKR bps", [f"{r['breakdown'].skr_bps:.0f}" for r in rows]),
        ("target SKR bps", [f"{r['target_skr_bps']:.0f}" if r["target_skr_bps"] else "-" for r in rows]),
    ]
    w = 14
    txt = ["".join(h.rjust(w) if i else h.ljust(w) for i, h in enumerate(head))]
    for name, vals in lines:
        txt.append(name.ljust(w) + "".join(v.rjust(w) for v in vals))
    return "\n".join(txt)


def n_z_for_key(lk: LinkConfig, bits: int) -> int:
    """Smallest block size (on a doubling grid) whose expected key covers ``bits`` twice."""
    nz = lk.n_z_block
    while nz <= 64 * (lk.n_z_full or lk.n_z_block):
        bd = analytic_breakdown(lk.link_params, lk.protocol_params, lk.source_params, nz, lk.qber_z_intrinsic, lk.f_ec)
        if bd.l_secret >= 2 * bits:
            return nz
        nz *= 2
    raise ConfigError(f"link {lk.id}: no block size yields {bits} secret bits")


def generate_link_key(store: KeyStore, lk: LinkConfig, bits: int, seed: int, epoch: int, exact: bool = False) -> None:
    """Run sessions on ``lk`` until one yields ``bits`` of key, and deposit it.

    With ``exact`` only the first ``bits`` are deposited and the rest of the
    block is dropped.
    """
    nz = n_z_for_key(lk, bits)
    qest = observed_qbers(lk.link_params, lk.protocol_params, lk.source_params, lk.qber_z_intrinsic)[0]
    for attempt in range(4):
        res = simulate_block(lk, nz, block_seed(seed, epoch * 16 + attempt), qest, epoch=epoch)
        _check(res)
        if res.status == OK and res.key_alice.length_bits >= bits:
            a, b = lk.endpoints
            ka, kb = res.key_alice, res.key_bob
            if exact and ka.length_bits > bits:
                ka, kb = ka.split(bits)[0], kb.split(bits)[0]
            store.deposit_pair(a, b, ka, kb)
            log.info("link %s: deposited %d bits (epoch %d)", lk.id, res.key_alice.length_bits, epoch)
            return
        nz *= 2
    raise InsufficientMaterial(f"link {lk.id}: key generation failed")


def run_relay(config: NetworkConfig, path: list[str], size_bits: int, out_dir, seed: int = 0,
              generate: bool | None = None) -> dict:
    """Relay a key along ``path`` using the persistent store in ``out_dir``.

    Hop keys are generated on the first run (empty store) or with
    ``generate=True``; later runs only load the store.
    """
    if len(path) < 2:
        raise RelayError("a relay path needs at least two nodes")
    for node in path:
        if node not in config.nodes:
            raise ConfigError(f"path: undeclared node {node!r}")
    hops = [config.link_between(a, b) for a, b in zip(path, path[1:])]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store_file = out / "kms-store.jsonl"
    if generate is None:
        generate = not store_file.exists()
    store = KeyStore(store_file)
    if generate:
        # store file length is monotone, so every generation round gets a new epoch
        epoch = sum(1 for _ in store_file.open()) if store_file.exists() else 0
        for lk in hops:
            generate_link_key(store, lk, size_bits, seed, epoch, exact=True)
    res = store.relay_key(path, size_bits)
    files = {}
    for node, km in ((path[0], res.key_initiator), (path[-1], res.key_responder)):
        f = out / f"{node}-{path[0]}~{path[-1]}.qkdk"
        f.write_bytes(encode_block(km))
        files[node] = str(f)
    identical = Path(files[path[0]]).read_bytes() == Path(files[path[-1]]).read_bytes()
    audit = store.audit_no_reuse()
    report = {
        "path": path, "bits": size_bits, "identical": identical, "no_reuse": audit,
        "files": files, "hop_keys": list(res.hop_keys),
        "consumed": [r.__dict__ for r in store.consumed_ranges()],
    }
    if not identical or not audit:
        raise InvariantViolation(json.dumps(report))
    return report


def _write_rows(rows, out: Path | None) -> None:
    if out is None:
        w = csv.DictWriter(sys.stdout, CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.DictWriter(fh, CSV_FIELDS)
        w.writeheader()
        w.writerows(rows)
    out.with_suffix(".json").write_text(json.dumps(rows, indent=1))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qkdnet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)
    default_cfg = str(preset_path())

    s = sub.add_parser("simulate", help="per-block Monte Carlo with full post-processing")
    s.add_argument("--config", default=default_cfg)
    s.add_argument("--link")
    s.add_argument("--blocks", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", type=Path)
    s.add_argument("--n-z", type=int, help="sifted Z bits per block (default: config n_z_block)")
    s.add_argument("--full-scale", action="store_true", help="use the link's full block size")
    s.add_argument("--longrun", action="store_true", help="run the configured drift scenario")
    s.add_argument("--workers", type=int, default=1)

    k = sub.add_parser("keyrate", help="analytic key rate per link")
    k.add_argument("--config", default=default_cfg)
    k.add_argument("--link")
    k.add_argument("--n-z", type=int)
    k.add_argument("--json", action="store_true")

    r = sub.add_parser("relay", help="trusted-node key relay along a path")
    r.add_argument("--config", default=default_cfg)
    r.add_argument("--path", required=True)
    r.add_argument("--bits", type=int, default=2048)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--generate", action="store_true", help="generate fresh hop keys even if a store exists")

    m = sub.add_parser("kms-serve", help="REST key delivery demo for one node")
    m.add_argument("--config", default=default_cfg)
    m.add_argument("--node", required=True)
    m.add_argument("--port", type=int, default=8080)
    m.add_argument("--host", default="127.0.0.1")
    m.add_argument("--store", type=Path)
    m.add_argument("--provision", type=int, default=0, metavar="BITS",
                   help="generate this many key bits per adjacent link at startup")
    return p


def _cmd_simulate(a, cfg):
    if a.longrun:
        lr = cfg.scenario.get("longrun", {})
        if a.link and a.link != lr.get("link"):
            raise ConfigError("--longrun uses scenario.longrun.link")
        rows = run_longrun(cfg, a.seed, a.blocks, a.n_z, a.workers)
        _write_rows(rows, a.out)
        failed = sum(r["status"] != OK for r in rows)
        print(f"blocks={len(rows)} failed={failed} skr_cv={skr_cv(rows):.4f}", file=sys.stderr)
        return EXIT_OK
    if not a.link:
        raise ConfigError("--link is required")
    lk = cfg.link(a.link)
    n_z = a.n_z or (lk.n_z_full if a.full_scale and lk.n_z_full else None)
    blocks = a.blocks if a.blocks is not None else cfg.scenario.get("blocks", 1)
    seed = a.seed if a.seed is not None else cfg.scenario.get("seed", 0)
    rows = run_simulate(cfg, a.link, blocks, seed, n_z=n_z, workers=a.workers)
    _write_rows(rows, a.out)
    return EXIT_OK


def _cmd_keyrate(a, cfg):
    rows = run_keyrate(cfg, a.link, a.n_z)
    if a.json:
        print(json.dumps([{**{k: v for k, v in r.items() if k != "breakdown"}, **r["breakdown"].__dict__} for r in rows], indent=1))
    else:
        print(format_keyrate(rows))
    return EXIT_OK


def _cmd_relay(a, cfg):
    path = [p for p in a.path.split(",") if p]
    if len(path) < 2:
        print("relay: --path needs at least two nodes", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rep = run_relay(cfg, path, a.bits, a.out, a.seed, generate=True if a.generate else None)
    except (InsufficientMaterial, RelayError) as e:
        print(f"relay: {e}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps({k: v for k, v in rep.items() if k != "consumed"}, indent=1))
    return EXIT_OK


def _cmd_kms_serve(a, cfg):
    from qkdnet.kms import make_rest_server

    if a.node not in cfg.nodes:
        raise ConfigError(f"--node: undeclared node {a.node!r}")
    store = KeyStore(a.store or Path(f"kms-{a.node}.jsonl"))
    if a.provision:
        for i, lk in enumerate(l for l in cfg.links if a.node in l.endpoints):
            generate_link_key(store, lk, a.provision, cfg.scenario.get("seed", 0), i)
    srv = make_rest_server(store, a.node, a.host, a.port)
    print(f"kms for {a.node} on http://{a.host}:{srv.server_address[1]}/api/v1/keys/<peer>?size=2048", file=sys.stderr)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        cmd = {"simulate": _cmd_simulate, "keyrate": _cmd_keyrate, "relay": _cmd_relay, "kms-serve": _cmd_kms_serve}
        return cmd[args.cmd](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
