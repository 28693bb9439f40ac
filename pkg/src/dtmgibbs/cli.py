"""Command-line front end: train, evaluate, export trends, generate
synthetic corpora, and run distributed workers from one entry point.

Configuration is a flat ``key = value`` text file (UTF-8, ``#``
comments); every key has a flag equivalent and flags win.  The resolved
configuration, master seed and build id are recorded in a manifest in
the output directory before any compute starts.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
abort (diagnostic names the parameter block), 4 peer/topology failure.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_PEER = 4


class ConfigError(ValueError):
    pass


def parse_config_file(path) -> dict:
    """Flat `key = value` pairs; later keys override earlier ones."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def parse_schedule(text: str):
    from .kernels import SgldSchedule
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"schedule must be 'a,b,c', got {text!r}")
    return SgldSchedule(float(parts[0]), float(parts[1]), float(parts[2]))


_DEFAULTS = {
    "seed": "0",
    "topics": "50",
    "iterations": "60",
    "minibatch": "60",
    "eta_schedule": "0.5,100,0.8",
    "phi_schedule": "0.5,100,0.8",
    "sigma2": "0.1",
    "beta2": "0.1",
    "psi2": "0.1",
    "threads": "3",
    "checkpoint_every": "0",
    "test_fraction": "0.1",
    "heldout_fraction": "0.5",
    "split_seed": "0",
    "inner_steps": "50",
    "format": "slice-per-line",
}

_FLAG_KEYS = ("corpus", "out", "seed", "topics", "iterations", "minibatch",
              "eta_schedule", "phi_schedule", "sigma2", "beta2", "psi2",
              "threads", "checkpoint_every", "test_fraction",
              "heldout_fraction", "split_seed", "inner_steps", "format",
              "topology", "worker_id", "checkpoint")


def resolve_settings(args) -> dict:
    """defaults < config file < explicit flags, all as strings."""
    settings = dict(_DEFAULTS)
    if getattr(args, "config", None):
        settings.update(parse_config_file(args.config))
        settings["config_path"] = args.config
    for key in _FLAG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = str(val)
    return settings


def build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        if rev.returncode == 0 and rev.stdout.strip():
            return rev.stdout.strip()
    except OSError:
        pass
    try:
        from importlib.metadata import version
        return "v" + version("dtmgibbs")
    except Exception:
        return "unknown"


def write_manifest(out_dir: Path, settings: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_path": settings.get("config_path", ""),
        "config": {k: v for k, v in sorted(settings.items()) if k != "config_path"},
        "master_seed": int(settings.get("seed", "0")),
        "start_time": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "build_id": build_id(),
        "output_dir": str(out_dir),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _hyper_and_config(settings):
    from .engine import TrainConfig
    from .model import Hyperparams
    hyper = Hyperparams(K=int(settings["topics"]),
                        sigma2=float(settings["sigma2"]),
                        beta2=float(settings["beta2"]),
                        psi2=float(settings["psi2"]))
    cfg = TrainConfig(iterations=int(settings["iterations"]),
                      minibatch_size=int(settings["minibatch"]),
                      schedule_eta=parse_schedule(settings["eta_schedule"]),
                      schedule_phi=parse_schedule(settings["phi_schedule"]),
                      threads_per_slice=int(settings["threads"]),
                      seed=int(settings["seed"]),
                      checkpoint_every=int(settings["checkpoint_every"]))
    return hyper, cfg


def _load_split(settings):
    from .corpus import load_corpus, split_holdout
    path = settings.get("corpus")
    if not path:
        raise ConfigError("no corpus path given (flag --corpus or config key)")
    if not Path(path).exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    corpus = load_corpus(path, settings["format"])
    frac = float(settings["test_fraction"])
    if frac > 0:
        split = split_holdout(corpus, frac, float(settings["heldout_fraction"]),
                              int(settings["split_seed"]))
        return corpus, split
    return corpus, None


def cmd_train(args) -> int:
    from dataclasses import replace

    from .engine import train
    settings = resolve_settings(args)
    out = Path(settings.get("out", "."))
    hyper, cfg = _hyper_and_config(settings)
    write_manifest(out, settings)
    corpus, split = _load_split(settings)
    train_corpus = split.train if split is not None else corpus
    cfg = replace(cfg, checkpoint_dir=str(out / "checkpoints"),
                  metrics_path=str(out / "metrics.csv"))
    result = train(train_corpus, hyper, cfg)
    print(f"trained {result.iterations_done} iterations over "
          f"{train_corpus.n_slices} slices; checkpoints in {out / 'checkpoints'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import EvalConfig, perplexity
    from .model import load_checkpoint
    settings = resolve_settings(args)
    out = Path(settings.get("out", "."))
    hyper, _ = _hyper_and_config(settings)
    write_manifest(out, settings)
    corpus, split = _load_split(settings)
    if split is None:
        raise ConfigError("eval needs test_fraction > 0")
    ckpt = settings.get("checkpoint") or str(out / "checkpoints")
    model, _, _ = load_checkpoint(ckpt, split.train, hyper)
    report = perplexity(split, model,
                        EvalConfig(inner_steps=int(settings["inner_steps"]),
                                   seed=int(settings["seed"])))
    print(report)
    report.to_csv(out / "perplexity.csv")
    return EXIT_OK


def cmd_trends(args) -> int:
    from .evaluation import export_trends
    from .model import load_checkpoint
    settings = resolve_settings(args)
    out = Path(settings.get("out", "."))
    hyper, _ = _hyper_and_config(settings)
    write_manifest(out, settings)
    corpus, split = _load_split(settings)
    train_corpus = split.train if split is not None else corpus
    ckpt = settings.get("checkpoint") or str(out / "checkpoints")
    model, _, _ = load_checkpoint(ckpt, train_corpus, hyper)
    topics = ([int(x) for x in args.topic_ids.split(",")]
              if args.topic_ids else list(range(hyper.K)))
    dest = out / "trends.csv"
    export_trends(model, corpus.vocabulary, topics, args.top_n, dest)
    print(f"wrote {dest}")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    from .corpus import save_corpus
    from .model import Hyperparams
    from .synthetic import generate_synthetic
    settings = resolve_settings(args)
    out = Path(settings.get("out", "."))
    write_manifest(out, settings)
    hyper = Hyperparams(K=int(settings["topics"]),
                        sigma2=float(settings["sigma2"]),
                        beta2=float(settings["beta2"]),
                        psi2=float(settings["psi2"]))
    corpus, params = generate_synthetic(hyper, v=args.vocab, n_slices=args.slices,
                                        docs_per_slice=args.docs_per_slice,
                                        doc_len=args.doc_len,
                                        seed=int(settings["seed"]),
                                        alpha0_scale=args.alpha0_scale,
                                        phi0_scale=args.phi0_scale)
    dest = out / "synthetic.txt"
    save_corpus(corpus, dest)
    np.savez(out / "true_params.npz", alpha=params.alpha, phi=params.phi)
    print(f"wrote {dest} ({corpus.n_docs} docs, {corpus.n_tokens} tokens, "
          f"{corpus.n_slices} slices, V={corpus.vocabulary.size})")
    return EXIT_OK


def cmd_worker(args) -> int:
    import socket as socketlib

    from .cluster import (KIND_DONE, KIND_HELLO, KIND_HELLO_OK, KIND_METRICS,
                          ProtocolError, SocketTransport, _adjacency,
                          encode_frame, parse_topology, recv_frame, send_frame,
                          worker_loop)
    from .model import write_slice_checkpoint

    settings = resolve_settings(args)
    out = Path(settings.get("out", "."))
    hyper, cfg = _hyper_and_config(settings)
    if not settings.get("topology") or settings.get("worker_id") is None:
        raise ConfigError("worker needs --topology and --worker-id")
    topo = parse_topology(settings["topology"])
    worker_id = int(settings["worker_id"])
    if worker_id not in topo.workers:
        raise ProtocolError(f"worker {worker_id} not present in topology")
    write_manifest(out, settings)
    corpus, split = _load_split(settings)
    train_corpus = split.train if split is not None else corpus
    assignment = topo.assignment()
    owned = assignment[worker_id]
    covered = sorted(t for ts in assignment.values() for t in ts)
    if covered != list(range(1, train_corpus.n_slices + 1)):
        raise ConfigError(f"topology covers slices {covered}, corpus has "
                          f"{train_corpus.n_slices}")

    coord = None
    if topo.coordinator is not None:
        last = None
        for _ in range(100):  # the coordinator may still be starting up
            try:
                coord = socketlib.create_connection(topo.coordinator, timeout=60)
                break
            except OSError as exc:
                last = exc
                time.sleep(0.1)
        else:
            print(f"worker {worker_id}: coordinator unreachable: {last}",
                  file=sys.stderr)
            return EXIT_PEER
        send_frame(coord, encode_frame(KIND_HELLO, 0, worker_id,
                                       str(topo.checksum()).encode()))
        reply = recv_frame(coord)
        if reply.kind != KIND_HELLO_OK:
            print(f"worker {worker_id}: topology checksum rejected by coordinator",
                  file=sys.stderr)
            return EXIT_PEER

    left, right = _adjacency(assignment)[worker_id]
    peers = {p: topo.workers[p] for p in (left, right) if p is not None}
    transport = SocketTransport(worker_id, topo.workers[worker_id], peers)

    def metrics_sink(row):
        if coord is not None:
            send_frame(coord, encode_frame(KIND_METRICS, row["iteration"], worker_id,
                                           json.dumps(row).encode()))

    try:
        res = worker_loop(worker_id, owned, train_corpus, hyper, cfg, transport,
                          train_corpus.n_slices, left, right,
                          metrics_sink=metrics_sink)
    finally:
        transport.close()
    ckpt_dir = Path(settings.get("checkpoint") or (out / "checkpoints"))
    for t, sl in res.slices.items():
        write_slice_checkpoint(ckpt_dir, sl, cfg.seed, cfg.iterations,
                               train_corpus.n_slices)
    if coord is not None:
        # hold until the coordinator acknowledges the final checkpoint
        send_frame(coord, encode_frame(KIND_DONE, cfg.iterations, worker_id))
        ack = recv_frame(coord)
        if ack.kind != KIND_DONE:
            print(f"worker {worker_id}: unexpected shutdown frame {ack.kind}",
                  file=sys.stderr)
            return EXIT_PEER
        coord.close()
    print(f"worker {worker_id}: finished {cfg.iterations} iterations for slices {owned}")
    return EXIT_OK


def cmd_coordinator(args) -> int:
    import socket as socketlib

    from .cluster import (KIND_DONE, KIND_HELLO, KIND_HELLO_MISMATCH,
                          KIND_HELLO_OK, KIND_METRICS, encode_frame,
                          parse_topology, recv_frame, send_frame)
    from .engine import metrics_to_csv

    settings = resolve_settings(args)
    out = Path(settings.get("out", "."))
    if not settings.get("topology"):
        raise ConfigError("coordinator needs --topology")
    topo = parse_topology(settings["topology"])
    if topo.coordinator is None:
        raise ConfigError("topology has no coordinator address")
    write_manifest(out, settings)
    expected = str(topo.checksum())

    server = socketlib.create_server(topo.coordinator)
    server.settimeout(120)
    conns = []
    try:
        while len(conns) < len(topo.workers):
            conn, _ = server.accept()
            conn.settimeout(120)
            hello = recv_frame(conn)
            if hello.kind != KIND_HELLO:
                conn.close()
                continue
            if hello.text() != expected:
                send_frame(conn, encode_frame(KIND_HELLO_MISMATCH, 0, 0))
                print(f"coordinator: worker {hello.sender} has a different topology",
                      file=sys.stderr)
                conn.close()
                return EXIT_PEER
            send_frame(conn, encode_frame(KIND_HELLO_OK, 0, 0))
            conns.append((hello.sender, conn))

        rows = []
        done = set()
        while len(done) < len(conns):
            for wid, conn in conns:
                if wid in done:
                    continue
                frame = recv_frame(conn)
                if frame.kind == KIND_METRICS:
                    rows.append(json.loads(frame.text()))
                elif frame.kind == KIND_DONE:
                    send_frame(conn, encode_frame(KIND_DONE, frame.iteration, 0))
                    done.add(wid)
        metrics_to_csv(rows, out / "metrics.csv")
        print(f"coordinator: collected {len(rows)} metric rows from "
              f"{len(conns)} workers")
        return EXIT_OK
    finally:
        for _, conn in conns:
            conn.close()
        server.close()


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtmgibbs",
                                description="Dynamic topic model trainer")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--corpus")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--topics", type=int)
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--minibatch", type=int)
        sp.add_argument("--eta-schedule", dest="eta_schedule",
                        help="a,b,c step-size triple")
        sp.add_argument("--phi-schedule", dest="phi_schedule")
        sp.add_argument("--sigma2", type=float)
        sp.add_argument("--beta2", type=float)
        sp.add_argument("--psi2", type=float)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
        sp.add_argument("--test-fraction", dest="test_fraction", type=float)
        sp.add_argument("--heldout-fraction", dest="heldout_fraction", type=float)
        sp.add_argument("--split-seed", dest="split_seed", type=int)
        sp.add_argument("--inner-steps", dest="inner_steps", type=int)
        sp.add_argument("--format", choices=["slice-per-line", "bag-of-words-dir"])
        sp.add_argument("--topology")
        sp.add_argument("--worker-id", dest="worker_id", type=int)
        sp.add_argument("--checkpoint", help="checkpoint directory to read")
        return sp

    common(sub.add_parser("train", help="train in-process")).set_defaults(fn=cmd_train)
    common(sub.add_parser("eval", help="held-out perplexity")).set_defaults(fn=cmd_eval)
    tr = common(sub.add_parser("trends", help="export topic trends"))
    tr.add_argument("--topic-ids", help="comma-separated topic ids (default: all)")
    tr.add_argument("--top-n", type=int, default=10)
    tr.set_defaults(fn=cmd_trends)
    gs = common(sub.add_parser("gen-synthetic",
                               help="corpus drawn from the generative process"))
    gs.add_argument("--vocab", type=int, default=100)
    gs.add_argument("--slices", type=int, default=4)
    gs.add_argument("--docs-per-slice", type=int, default=200)
    gs.add_argument("--doc-len", type=int, default=100)
    gs.add_argument("--alpha0-scale", type=float, default=1.0)
    gs.add_argument("--phi0-scale", type=float, default=2.0)
    gs.set_defaults(fn=cmd_gen_synthetic)
    common(sub.add_parser("worker", help="run one distributed worker")
           ).set_defaults(fn=cmd_worker)
    common(sub.add_parser("coordinator", help="collect worker metrics")
           ).set_defaults(fn=cmd_coordinator)
    return p


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        from .cluster import ProtocolError
        from .engine import NumericError
        if isinstance(exc, NumericError):
            print(f"numeric abort: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc, ProtocolError):
            print(f"peer error: {exc}", file=sys.stderr)
            return EXIT_PEER
        raise


if __name__ == "__main__":
    sys.exit(main())
