"""Per-time-slice worker protocol.

Each worker owns one slice (or a contiguous run of slices).  At the
start of every iteration adjacent workers swap their current slice mean
and topic-term parameters, then compute independently; that handshake
is the only cross-worker communication, so the run is almost
embarrassingly parallel.

Neighbor values consumed by the samplers are always the peer's
previous-iteration values, which makes a distributed run numerically
identical to the sequential engine.

Wire format (also used verbatim over the in-process channel transport)::

    magic    4s   "DTMB"
    version  u8   1
    kind     u8   0 alpha, 1 phi, 2 ack, 3 nack, 4 hello, 5 hello-ok,
                  6 hello-mismatch, 7 metrics, 8 done
    iter     u32
    from     i32  sending slice/worker id
    ndim     u8
    dims     u32 * ndim
    nbytes   u32
    payload  nbytes bytes (f8 little-endian for alpha/phi, utf-8 otherwise)
    crc      u32  CRC-32 of payload

Socket framing adds a u32 length prefix per frame.
"""

from __future__ import annotations

import os
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from queue import Empty, SimpleQueue

import numpy as np

from .corpus import Corpus
from .engine import TrainConfig, TrainResult, run_iteration
from .model import Hyperparams, ModelState, accumulate_counts, init_state
from .samplers import NeighborContext

MAGIC = b"DTMB"
VERSION = 1

KIND_ALPHA = 0
KIND_PHI = 1
KIND_ACK = 2
KIND_NACK = 3
KIND_HELLO = 4
KIND_HELLO_OK = 5
KIND_HELLO_MISMATCH = 6
KIND_METRICS = 7
KIND_DONE = 8

_HEAD = struct.Struct("<4sBBIiB")
DEFAULT_TIMEOUT = 120.0


class ProtocolError(RuntimeError):
    pass


class PeerDisconnected(ProtocolError):
    pass


@dataclass(frozen=True)
class BoundaryMessage:
    """One parameter payload exchanged between adjacent workers."""

    iteration: int
    slice_from: int
    kind: int                 # KIND_ALPHA or KIND_PHI
    payload: np.ndarray       # (K,) or (K, V) float64

    def encode(self) -> bytes:
        return encode_frame(self.kind, self.iteration, self.slice_from,
                            np.ascontiguousarray(self.payload, dtype="<f8").tobytes(),
                            dims=self.payload.shape)


def encode_frame(kind: int, iteration: int, sender: int, payload: bytes = b"",
                 dims=()) -> bytes:
    head = _HEAD.pack(MAGIC, VERSION, kind, iteration, sender, len(dims))
    dim_bytes = struct.pack(f"<{len(dims)}I", *dims) if dims else b""
    return (head + dim_bytes + struct.pack("<I", len(payload)) + payload
            + struct.pack("<I", zlib.crc32(payload)))


@dataclass
class Frame:
    kind: int
    iteration: int
    sender: int
    dims: tuple
    payload: bytes
    crc_ok: bool

    def array(self) -> np.ndarray:
        arr = np.frombuffer(self.payload, dtype="<f8").astype(np.float64)
        return arr.reshape(self.dims) if self.dims else arr

    def text(self) -> str:
        return self.payload.decode("utf-8")


def decode_frame(data: bytes) -> Frame:
    magic, version, kind, iteration, sender, ndim = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise ProtocolError("bad magic bytes in frame")
    if version != VERSION:
        raise ProtocolError(f"unsupported frame version {version}")
    off = _HEAD.size
    dims = struct.unpack_from(f"<{ndim}I", data, off) if ndim else ()
    off += 4 * ndim
    (nbytes,) = struct.unpack_from("<I", data, off)
    off += 4
    payload = data[off:off + nbytes]
    off += nbytes
    (crc,) = struct.unpack_from("<I", data, off)
    return Frame(kind, iteration, sender, dims, payload,
                 crc_ok=(zlib.crc32(payload) == crc))


# ---------------------------------------------------------------------------
# Transports: in-process channels and length-prefixed sockets, interchangeable.
# ---------------------------------------------------------------------------

class ChannelHub:
    """Registry of in-process FIFO channels, one per (sender, receiver)."""

    def __init__(self):
        self._queues: dict[tuple[int, int], SimpleQueue] = {}
        self._lock = threading.Lock()

    def queue(self, src: int, dst: int) -> SimpleQueue:
        with self._lock:
            q = self._queues.get((src, dst))
            if q is None:
                q = self._queues[(src, dst)] = SimpleQueue()
            return q

    def endpoint(self, worker_id: int) -> "InProcessTransport":
        return InProcessTransport(self, worker_id)


class InProcessTransport:
    """Queue-backed transport; frames cross as the same bytes a socket carries."""

    def __init__(self, hub: ChannelHub, worker_id: int):
        self.hub = hub
        self.worker_id = worker_id

    def send(self, to_id: int, data: bytes) -> None:
        self.hub.queue(self.worker_id, to_id).put(data)

    def recv(self, from_id: int, timeout: float = DEFAULT_TIMEOUT) -> bytes:
        try:
            return self.hub.queue(from_id, self.worker_id).get(timeout=timeout)
        except Empty:
            raise PeerDisconnected(f"worker {self.worker_id}: no frame from {from_id}")

    def close(self) -> None:
        pass


def _read_exact(conn: socket.socket, n: int, who: str) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = conn.recv(n - len(buf))
        if not chunk:
            raise PeerDisconnected(f"{who}: peer closed the connection")
        buf += chunk
    return buf


class SocketTransport:
    """Length-prefixed frames over TCP, one connection per adjacent pair.

    The worker with the smaller id dials; the larger id accepts.  A
    hello frame on connect identifies the dialing worker.
    """

    def __init__(self, worker_id: int, address, peers: dict,
                 timeout: float = DEFAULT_TIMEOUT, connect_retries: int = 50):
        self.worker_id = worker_id
        self.timeout = timeout
        self.connect_retries = connect_retries
        self._conns: dict[int, socket.socket] = {}
        self._listener = None
        need_accept = [p for p in peers if p > worker_id]
        if need_accept:
            self._listener = socket.create_server(address, reuse_port=False)
            self._listener.settimeout(timeout)
        for peer_id, addr in sorted(peers.items()):
            if peer_id < worker_id:
                self._conns[peer_id] = self._dial(peer_id, addr)
        for _ in need_accept:
            conn, _ = self._listener.accept()
            conn.settimeout(timeout)
            hello = decode_frame(_read_exact(conn, self._next_len(conn), f"worker {worker_id}"))
            if hello.kind != KIND_HELLO:
                raise ProtocolError("expected hello frame on accept")
            self._conns[hello.sender] = conn

    def _dial(self, peer_id: int, addr) -> socket.socket:
        last = None
        for _ in range(self.connect_retries):
            try:
                conn = socket.create_connection(addr, timeout=self.timeout)
                conn.settimeout(self.timeout)
                frame = encode_frame(KIND_HELLO, 0, self.worker_id)
                conn.sendall(struct.pack("<I", len(frame)) + frame)
                return conn
            except OSError as exc:
                last = exc
                time.sleep(0.1)
        raise PeerDisconnected(f"worker {self.worker_id}: cannot reach {peer_id} at {addr}: {last}")

    @staticmethod
    def _next_len(conn: socket.socket) -> int:
        (n,) = struct.unpack("<I", _read_exact(conn, 4, "frame length"))
        return n

    def send(self, to_id: int, data: bytes) -> None:
        conn = self._conns[to_id]
        conn.sendall(struct.pack("<I", len(data)) + data)

    def recv(self, from_id: int, timeout: float | None = None) -> bytes:
        conn = self._conns[from_id]
        who = f"worker {self.worker_id} <- {from_id}"
        return _read_exact(conn, self._next_len(conn), who)

    def close(self) -> None:
        for conn in self._conns.values():
            try:
                conn.close()
            except OSError:
                pass
        if self._listener is not None:
            self._listener.close()


# ---------------------------------------------------------------------------
# Boundary exchange
# ---------------------------------------------------------------------------

def _send_with_ack(transport, to_id: int, msg: BoundaryMessage) -> None:
    data = msg.encode()
    for attempt in range(2):
        transport.send(to_id, data)
        reply = decode_frame(transport.recv(to_id))
        if reply.kind == KIND_ACK:
            return
        if reply.kind != KIND_NACK:
            raise ProtocolError(f"expected ack/nack, got kind {reply.kind}")
    raise ProtocolError(f"peer {to_id} rejected frame twice (checksum)")


def _recv_with_retry(transport, from_id: int, expect_kind: int, iteration: int,
                     my_id: int) -> Frame:
    for attempt in range(2):
        frame = decode_frame(transport.recv(from_id))
        if not frame.crc_ok:
            transport.send(from_id, encode_frame(KIND_NACK, iteration, my_id))
            continue
        transport.send(from_id, encode_frame(KIND_ACK, iteration, my_id))
        if frame.kind != expect_kind:
            raise ProtocolError(f"expected frame kind {expect_kind}, got {frame.kind}")
        if frame.iteration != iteration:
            raise ProtocolError(f"iteration mismatch: header {frame.iteration}, local {iteration}")
        return frame
    raise ProtocolError(f"checksum failure from {from_id} after one retransmit")


def exchange_boundaries(transport, worker_id: int, iteration: int,
                        send_left=None, send_right=None,
                        left_peer: int | None = None,
                        right_peer: int | None = None) -> dict:
    """Swap (alpha, phi) payloads with the adjacent workers.

    ``send_left``/``send_right`` are (slice_index, alpha, phi) tuples
    destined for the respective peer.  Even-indexed workers send first
    then receive; odd-indexed do the reverse, which keeps any chain
    deadlock-free.  Returns {'left': (alpha, phi) | None, 'right': ...}
    holding the peers' previous-iteration values.

    A corrupted frame is re-requested once (nack) and then fatal; an
    iteration mismatch in a header is immediately fatal.
    """
    received = {"left": None, "right": None}

    def do_send():
        for peer, load in ((left_peer, send_left), (right_peer, send_right)):
            if peer is None:
                continue
            slice_index, alpha, phi = load
            _send_with_ack(transport, peer,
                           BoundaryMessage(iteration, slice_index, KIND_ALPHA, alpha))
            _send_with_ack(transport, peer,
                           BoundaryMessage(iteration, slice_index, KIND_PHI, phi))

    def do_recv():
        for side, peer in (("left", left_peer), ("right", right_peer)):
            if peer is None:
                continue
            a = _recv_with_retry(transport, peer, KIND_ALPHA, iteration, worker_id)
            p = _recv_with_retry(transport, peer, KIND_PHI, iteration, worker_id)
            received[side] = (a.array(), p.array())

    if worker_id % 2 == 0:
        do_send()
        do_recv()
    else:
        do_recv()
        do_send()
    return received


# ---------------------------------------------------------------------------
# Worker loop and distributed runners
# ---------------------------------------------------------------------------

@dataclass
class WorkerResult:
    worker_id: int
    slices: dict          # slice_index -> SliceState
    counts: dict          # slice_index -> CountSet
    metrics: list


def worker_loop(worker_id: int, owned_slices, corpus: Corpus, hyper: Hyperparams,
                cfg: TrainConfig, transport, n_slices_total: int,
                left_peer: int | None, right_peer: int | None,
                initial: dict | None = None, start_iteration: int = 0,
                metrics_sink=None) -> WorkerResult:
    """Run cfg.iterations for a contiguous run of owned slices.

    Only the lowest/highest owned slices are exchanged with peers;
    interior neighbors are read from the worker's own previous-iteration
    values, same as the sequential engine.
    """
    owned = sorted(owned_slices)
    lo, hi = owned[0], owned[-1]
    if initial is None:
        full = init_state(corpus, hyper, cfg.seed)
        states = {t: full.slices[t - 1] for t in owned}
    else:
        states = dict(initial)
    counts = {t: accumulate_counts(states[t], range(states[t].n_docs)) for t in owned}
    metrics = []

    k, v = hyper.K, corpus.vocabulary.size
    for i in range(start_iteration, start_iteration + cfg.iterations):
        prev_alpha = {t: states[t].alpha for t in owned}
        prev_phi = {t: states[t].phi for t in owned}
        got = exchange_boundaries(
            transport, worker_id, i,
            send_left=(lo, prev_alpha[lo], prev_phi[lo]) if left_peer is not None else None,
            send_right=(hi, prev_alpha[hi], prev_phi[hi]) if right_peer is not None else None,
            left_peer=left_peer, right_peer=right_peer)

        next_states = {}
        for t in owned:
            if t == 1:
                a_left, p_left = np.zeros(k), np.zeros((k, v))
            elif t - 1 in states:
                a_left, p_left = prev_alpha[t - 1], prev_phi[t - 1]
            else:
                a_left, p_left = got["left"]
            if t == n_slices_total:
                a_right, p_right = None, None
            elif t + 1 in states:
                a_right, p_right = prev_alpha[t + 1], prev_phi[t + 1]
            else:
                a_right, p_right = got["right"]
            nxt, cs, row = run_iteration(states[t],
                                         NeighborContext(left=a_left, right=a_right),
                                         NeighborContext(left=p_left, right=p_right),
                                         hyper, cfg, i)
            next_states[t] = nxt
            counts[t] = cs
            metrics.append(row)
            if metrics_sink is not None:
                metrics_sink(row)
        states.update(next_states)
    return WorkerResult(worker_id, states, counts, metrics)


def default_topology(n_slices: int, workers: int | None = None) -> dict:
    """worker id -> owned slice list; 1:1 by default, contiguous packing
    when there are fewer workers than slices."""
    if workers is None or workers >= n_slices:
        return {t: [t] for t in range(1, n_slices + 1)}
    splits = np.array_split(np.arange(1, n_slices + 1), workers)
    return {w + 1: [int(t) for t in part] for w, part in enumerate(splits) if len(part)}


def _adjacency(assignment: dict) -> dict:
    """worker -> (left_peer, right_peer) under contiguous slice ownership."""
    by_low = sorted(assignment.items(), key=lambda kv: min(kv[1]))
    ordered = [w for w, _ in by_low]
    out = {}
    for pos, w in enumerate(ordered):
        out[w] = (ordered[pos - 1] if pos > 0 else None,
                  ordered[pos + 1] if pos + 1 < len(ordered) else None)
    return out


def run_distributed(corpus: Corpus, hyper: Hyperparams, cfg: TrainConfig,
                    assignment: dict | None = None, *,
                    state: ModelState | None = None,
                    start_iteration: int = 0) -> TrainResult:
    """In-process distributed run: one thread per worker, channel transport.

    Produces the same final state as engine.train for any worker layout,
    because every sampler consumes previous-iteration neighbor values in
    both modes.
    """
    n = corpus.n_slices
    if assignment is None:
        assignment = default_topology(n)
    adjacency = _adjacency(assignment)
    hub = ChannelHub()
    if state is not None:
        initial = {w: {t: state.slices[t - 1] for t in owned}
                   for w, owned in assignment.items()}
    else:
        initial = {w: None for w in assignment}

    results: dict[int, WorkerResult] = {}
    errors: list = []

    def run_worker(w):
        try:
            left, right = adjacency[w]
            results[w] = worker_loop(w, assignment[w], corpus, hyper, cfg,
                                     hub.endpoint(w), n, left, right,
                                     initial=initial[w],
                                     start_iteration=start_iteration)
        except BaseException as exc:  # noqa: BLE001 - worker failure fails the run
            errors.append((w, exc))

    threads = [threading.Thread(target=run_worker, args=(w,), name=f"worker-{w}")
               for w in assignment]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        w, exc = errors[0]
        raise RuntimeError(f"worker {w} failed") from exc

    slices = [None] * n
    counts = [None] * n
    metrics = []
    for res in results.values():
        for t, sl in res.slices.items():
            slices[t - 1] = sl
            counts[t - 1] = res.counts[t]
        metrics.extend(res.metrics)
    metrics.sort(key=lambda r: (r["iteration"], r["slice"]))
    final = ModelState(hyper=hyper, slices=slices, counts=counts,
                       vocabulary_size=corpus.vocabulary.size)
    return TrainResult(state=final, metrics=metrics,
                       iterations_done=start_iteration + cfg.iterations)


# ---------------------------------------------------------------------------
# Static topology files: `worker <id> = host:port`, `slices <id> = a,b`,
# optional `coordinator = host:port`.  The checksum fingerprints the
# worker/slice layout so every participant can verify it runs the same file.
# ---------------------------------------------------------------------------

@dataclass
class Topology:
    coordinator: tuple | None
    workers: dict                      # id -> (host, port)
    slices: dict = field(default_factory=dict)  # id -> [slice indices]

    def checksum(self) -> int:
        parts = []
        for w in sorted(self.workers):
            host, port = self.workers[w]
            owned = ",".join(str(t) for t in self.slices.get(w, [w]))
            parts.append(f"{w}@{host}:{port}#{owned}")
        return zlib.crc32("|".join(parts).encode())

    def assignment(self) -> dict:
        return {w: list(self.slices.get(w, [w])) for w in self.workers}


def send_frame(conn: socket.socket, data: bytes) -> None:
    conn.sendall(struct.pack("<I", len(data)) + data)


def recv_frame(conn: socket.socket) -> Frame:
    (n,) = struct.unpack("<I", _read_exact(conn, 4, "frame length"))
    return decode_frame(_read_exact(conn, n, "frame body"))


def _socket_worker_main(worker_id: int, assignment: dict, addresses: dict,
                        corpus: Corpus, hyper: Hyperparams, cfg: TrainConfig,
                        out_dir, start_iteration: int, initial):
    adjacency = _adjacency(assignment)
    left, right = adjacency[worker_id]
    peers = {p: addresses[p] for p in (left, right) if p is not None}
    transport = SocketTransport(worker_id, addresses[worker_id], peers)
    try:
        res = worker_loop(worker_id, assignment[worker_id], corpus, hyper, cfg,
                          transport, corpus.n_slices, left, right,
                          initial=initial, start_iteration=start_iteration)
    finally:
        transport.close()
    from .model import write_slice_checkpoint
    for t, sl in res.slices.items():
        write_slice_checkpoint(out_dir, sl, cfg.seed,
                               start_iteration + cfg.iterations, corpus.n_slices)


def free_ports(n: int) -> list:
    socks = [socket.create_server(("127.0.0.1", 0)) for _ in range(n)]
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def run_distributed_sockets(corpus: Corpus, hyper: Hyperparams, cfg: TrainConfig,
                            out_dir, assignment: dict | None = None, *,
                            state: ModelState | None = None,
                            start_iteration: int = 0) -> ModelState:
    """Loopback-socket distributed run: one OS process per worker.

    Workers write per-slice checkpoints into ``out_dir``; the assembled
    final state is loaded back from them.  Numerically identical to the
    in-process and sequential runners.
    """
    import multiprocessing as mp

    from .model import load_checkpoint

    n = corpus.n_slices
    if assignment is None:
        assignment = default_topology(n)
    addresses = {w: ("127.0.0.1", p)
                 for w, p in zip(sorted(assignment), free_ports(len(assignment)))}
    initial = {w: None for w in assignment}
    if state is not None:
        initial = {w: {t: state.slices[t - 1] for t in owned}
                   for w, owned in assignment.items()}

    ctx = mp.get_context("fork")
    procs = [ctx.Process(target=_socket_worker_main,
                         args=(w, assignment, addresses, corpus, hyper, cfg,
                               out_dir, start_iteration, initial[w]),
                         name=f"worker-{w}")
             for w in sorted(assignment)]
    for p in procs:
        p.start()
    for p in procs:
        p.join()
    failed = [p.name for p in procs if p.exitcode != 0]
    if failed:
        raise RuntimeError(f"socket workers failed: {', '.join(failed)}")
    final, _, _ = load_checkpoint(out_dir, corpus, hyper)
    return final


def _parse_addr(text: str) -> tuple:
    host, _, port = text.rpartition(":")
    return host, int(port)


def parse_topology(path) -> Topology:
    coordinator = None
    workers = {}
    slices = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "coordinator":
                coordinator = _parse_addr(value)
            elif key.startswith("worker"):
                workers[int(key.split()[1])] = _parse_addr(value)
            elif key.startswith("slices"):
                slices[int(key.split()[1])] = [int(x) for x in value.split(",") if x]
            else:
                raise ValueError(f"{path}: unknown topology key {key!r}")
    if not workers:
        raise ValueError(f"{path}: no workers defined")
    env = os.environ.get("DTMGIBBS_COORDINATOR")
    if env:
        coordinator = _parse_addr(env)
    return Topology(coordinator=coordinator, workers=workers, slices=slices)
