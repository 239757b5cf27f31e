"""Partitioned MinIO caching across logical servers over TCP.

Wire format (all integers big-endian)::

    request   magic "CDL1" | op u8 (1 = GET) | item_id u64
    response  status u8 (0 OK, 1 NOT_CACHED, 2 ERROR) | length u32
              | payload[length] | fingerprint u64

Owners never read storage on behalf of a peer: a NOT_CACHED answer sends the
requester to its own storage.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .cache import Cache, MinIOCache
from .core import Dataset, ShardAssignment, fingerprint_bytes, ownership_from_first_epoch, plan_epoch
from .errors import FetchError, IntegrityError
from .pipeline import PipelineConfig, StallReport, run_epoch
from .storage import make_devices

log = logging.getLogger(__name__)

MAGIC = b"CDL1"
OP_GET = 1
OK, NOT_CACHED, ERROR = 0, 1, 2

_REQ = struct.Struct(">4sBQ")
_RESP_HEAD = struct.Struct(">BI")
_FP = struct.Struct(">Q")
REQUEST_SIZE = _REQ.size


class ProtocolError(Exception):
    pass


@dataclass(frozen=True)
class Request:
    item_id: int
    op: int = OP_GET
    magic: bytes = MAGIC

    def encode(self) -> bytes:
        return _REQ.pack(self.magic, self.op, self.item_id)

    @classmethod
    def decode(cls, frame: bytes) -> "Request":
        if len(frame) != _REQ.size:
            raise ProtocolError(f"request frame must be {_REQ.size} bytes, got {len(frame)}")
        magic, op, item_id = _REQ.unpack(frame)
        return cls(item_id, op, magic)

    @property
    def valid(self) -> bool:
        return self.magic == MAGIC and self.op == OP_GET


@dataclass(frozen=True)
class Response:
    status: int
    payload: bytes = b""
    fingerprint: int = 0

    def encode(self) -> bytes:
        return _RESP_HEAD.pack(self.status, len(self.payload)) + self.payload + _FP.pack(self.fingerprint)

    @classmethod
    def decode(cls, frame: bytes) -> "Response":
        if len(frame) < _RESP_HEAD.size + _FP.size:
            raise ProtocolError("response frame too short")
        status, length = _RESP_HEAD.unpack_from(frame)
        if len(frame) != _RESP_HEAD.size + length + _FP.size:
            raise ProtocolError(f"declared payload length {length} does not match frame")
        payload = frame[_RESP_HEAD.size:_RESP_HEAD.size + length]
        (fp,) = _FP.unpack_from(frame, _RESP_HEAD.size + length)
        return cls(status, payload, fp)


def _recv_exactly(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf += chunk
    return bytes(buf)


def read_response(sock: socket.socket) -> Response:
    head = _recv_exactly(sock, _RESP_HEAD.size)
    _, length = _RESP_HEAD.unpack(head)
    rest = _recv_exactly(sock, length + _FP.size)
    return Response.decode(head + rest)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server: CacheServer = self.server.owner  # type: ignore[attr-defined]
        sock = self.request
        while True:
            try:
                frame = _recv_exactly(sock, REQUEST_SIZE)
            except (ConnectionError, OSError):
                return
            sock.sendall(server.answer(frame).encode())


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class CacheServer:
    """Answers GETs for one server's local MinIO cache."""

    def __init__(self, cache: Cache, dataset: Dataset, endpoint: tuple[str, int] = ("127.0.0.1", 0)):
        self.cache = cache
        self.dataset = dataset
        self.requests = 0
        self._count_lock = threading.Lock()
        self._srv = _TCPServer(endpoint, _Handler)
        self._srv.owner = self
        # short poll so shutdown() returns quickly
        self._thread = threading.Thread(target=self._srv.serve_forever, kwargs={"poll_interval": 0.02},
                                        daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._srv.server_address[:2]

    def answer(self, frame: bytes) -> Response:
        with self._count_lock:
            self.requests += 1
        req = Request.decode(frame)
        if not req.valid:
            return Response(ERROR)
        if req.item_id not in self.cache:
            return Response(NOT_CACHED)
        payload = self.cache.get(req.item_id)
        if payload is None:
            payload = self.dataset[req.item_id].payload()
        return Response(OK, payload, fingerprint_bytes(payload))

    def start(self) -> "CacheServer":
        if not self._thread.is_alive():
            self._thread.start()
        return self

    def stop(self) -> None:
        self._srv.shutdown()
        self._srv.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve_cache(cache: Cache, dataset: Dataset, endpoint: tuple[str, int] = ("127.0.0.1", 0)) -> CacheServer:
    return CacheServer(cache, dataset, endpoint).start()


class CacheClient:
    """One kept-alive connection to a peer's cache server."""

    def __init__(self, address: tuple[str, int], timeout: float = 5.0):
        self.address = address
        self._lock = threading.Lock()
        self._sock = socket.create_connection(address, timeout=timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.messages = 0

    def get(self, item_id: int) -> Response:
        with self._lock:
            self._sock.sendall(Request(item_id).encode())
            self.messages += 1
            return read_response(self._sock)

    def send_raw(self, frame: bytes) -> Response:
        with self._lock:
            self._sock.sendall(frame)
            return read_response(self._sock)

    def close(self) -> None:
        self._sock.close()


@dataclass
class OwnershipTable:
    """Frozen first-epoch item->server map plus which owners actually cached what."""

    shards: ShardAssignment
    endpoints: dict[int, tuple[str, int]] = field(default_factory=dict)
    cached: dict[int, frozenset[int]] = field(default_factory=dict)

    def owner_of(self, item_id: int) -> int:
        return self.shards.owner_of(item_id)

    def expected_holder(self, item_id: int) -> int | None:
        owner = self.shards.owner_of(item_id)
        return owner if item_id in self.cached.get(owner, ()) else None

    def publish(self, server_id: int, ids) -> None:
        self.cached[server_id] = frozenset(int(i) for i in ids)


@dataclass(frozen=True)
class FetchResult:
    payload: bytes
    source: str


def _verify(dataset: Dataset, item_id: int, payload: bytes, claimed: int | None = None) -> None:
    expected = dataset[item_id].fingerprint
    actual = fingerprint_bytes(payload)
    if actual != expected or (claimed is not None and claimed != expected):
        raise IntegrityError(f"fingerprint mismatch for item {item_id}")


def coordinated_fetch(item_id: int, self_id: int, local_cache: Cache, ownership: OwnershipTable,
                      clients: Mapping[int, CacheClient], dataset: Dataset, epoch: int = 0,
                      read_storage: Callable[[int], bytes] | None = None) -> FetchResult:
    """Resolve one item: local cache, then the owner's cache, then local storage."""
    if local_cache.lookup(item_id, epoch):
        payload = local_cache.get(item_id)
        if payload is None:
            payload = dataset[item_id].payload()
        _verify(dataset, item_id, payload)
        return FetchResult(payload, "local_cache")

    holder = ownership.expected_holder(item_id)
    remote_error = None
    if holder is not None and holder != self_id and holder in clients:
        try:
            resp = clients[holder].get(item_id)
        except (OSError, ConnectionError, ProtocolError) as e:
            remote_error = e
            log.warning("server %d: remote fetch of %d from %d failed: %s", self_id, item_id, holder, e)
        else:
            if resp.status == OK:
                _verify(dataset, item_id, resp.payload, resp.fingerprint)
                return FetchResult(resp.payload, "remote_cache")

    try:
        payload = read_storage(item_id) if read_storage else dataset[item_id].payload()
    except (FetchError, KeyError, OSError) as e:
        raise FetchError(f"item {item_id}: storage failed ({e}); remote: {remote_error}") from e
    _verify(dataset, item_id, payload)
    size = len(payload)
    local_cache.record_storage_fetch(size, epoch)
    local_cache.admit(item_id, size, epoch, value=payload)
    return FetchResult(payload, "local_storage")


class Node:
    """One logical training server: a MinIO cache, its server and peer clients."""

    def __init__(self, server_id: int, dataset: Dataset, capacity_bytes: int):
        self.server_id = server_id
        self.dataset = dataset
        self.cache = MinIOCache(capacity_bytes)
        self.server = CacheServer(self.cache, dataset)
        self.clients: dict[int, CacheClient] = {}
        self.remote_verified = 0

    def fetcher(self, ownership: OwnershipTable, partitioned: bool):
        clients = self.clients if partitioned else {}

        def fetch(item_id: int, epoch: int) -> str:
            res = coordinated_fetch(item_id, self.server_id, self.cache, ownership, clients,
                                    self.dataset, epoch)
            if res.source == "remote_cache":
                self.remote_verified += 1
            return res.source

        return fetch


@dataclass
class ClusterEpoch:
    epoch_index: int
    reports: list[StallReport]

    @property
    def epoch_seconds(self) -> float:
        # data-parallel servers synchronize, so the slowest one sets the pace
        return max(r.epoch_seconds for r in self.reports)

    @property
    def storage_reads(self) -> int:
        return sum(r.storage_reads for r in self.reports)

    @property
    def remote_reads(self) -> int:
        return sum(r.remote_reads for r in self.reports)


class PartitionedCluster:
    """K logical servers in one process talking over loopback TCP.

    The first epoch processes the frozen ownership shards, so each server fills
    its cache with items it owns; afterwards the cached sets are published as
    routing metadata and every epoch processes a fresh random shard.
    """

    def __init__(self, dataset: Dataset, n_servers: int, capacity_bytes_per_server: int,
                 cfg: PipelineConfig, seed: int, partitioned: bool = True, clock: str = "virtual"):
        if n_servers < 1:
            raise ValueError("n_servers must be >= 1")
        self.dataset = dataset
        self.n_servers = n_servers
        self.cfg = cfg
        self.seed = seed
        self.partitioned = partitioned
        self.clock = clock
        self.ownership = OwnershipTable(ownership_from_first_epoch(dataset, n_servers, seed))
        self.nodes = [Node(k, dataset, capacity_bytes_per_server) for k in range(n_servers)]
        self.devices = [make_devices(cfg.rates.S, cfg.rates.C, cfg.rates.network_rate,
                                     n_items=dataset.n_items, clock=clock) for _ in self.nodes]
        self.history: list[ClusterEpoch] = []
        self._started = False

    def start(self) -> "PartitionedCluster":
        for node in self.nodes:
            node.server.start()
            self.ownership.endpoints[node.server_id] = node.server.address
        if self.partitioned:
            # connections are opened once and kept for the whole run
            for node in self.nodes:
                for peer in self.nodes:
                    if peer is not node:
                        node.clients[peer.server_id] = CacheClient(peer.server.address)
        self._started = True
        return self

    def stop(self) -> None:
        for node in self.nodes:
            for c in node.clients.values():
                c.close()
            node.server.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def processing_plan(self, epoch: int, server_id: int):
        # epoch 0's processing shards are, by construction, the ownership shards
        plan = plan_epoch(self.dataset, epoch, self.cfg.batch_size, self.n_servers, self.seed)
        return plan.for_server(server_id)

    def run_epoch(self, epoch: int) -> ClusterEpoch:
        if not self._started:
            raise RuntimeError("cluster not started")
        reports: list[StallReport | None] = [None] * self.n_servers

        def one(k):
            node = self.nodes[k]
            plan = self.processing_plan(epoch, k)
            reports[k] = run_epoch(plan, self.cfg, node.cache, self.devices[k], self.dataset,
                                   fetcher=node.fetcher(self.ownership, self.partitioned),
                                   clock=self.clock)

        if self.clock == "wall":
            threads = [threading.Thread(target=one, args=(k,)) for k in range(self.n_servers)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        else:
            for k in range(self.n_servers):
                one(k)
        if epoch == 0:
            for node in self.nodes:
                self.ownership.publish(node.server_id, node.cache.contents())
        result = ClusterEpoch(epoch, reports)
        self.history.append(result)
        return result

    def run(self, n_epochs: int) -> list[ClusterEpoch]:
        return [self.run_epoch(e) for e in range(n_epochs)]
