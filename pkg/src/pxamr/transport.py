"""TCP parcel port.

One listener per locality, one reader thread per connection.  Connections
are bidirectional: a peer that connected to us can be answered on the same
socket, which is how a standalone address server replies.
"""

from __future__ import annotations

import errno
import logging
import socket
import threading
from typing import Callable, Optional

from .parcel import FrameDecoder, Parcel, ParcelError, encode
from .serialization import register_error_type

log = logging.getLogger(__name__)


@register_error_type
class TransportError(ConnectionError):
    pass


@register_error_type
class AddressInUse(TransportError):
    pass


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


class Connection:
    def __init__(self, sock: socket.socket, port: "ParcelPort", peer: str):
        self.sock = sock
        self.peer = peer
        self._port = port
        self._send_lock = threading.Lock()
        self._closed = False
        self.sent = 0
        self.received = 0
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._reader = threading.Thread(target=self._read_loop, daemon=True,
                                        name=f"px-recv-{peer}")
        self._reader.start()

    def send_frame(self, frame: bytes) -> None:
        if self._closed:
            raise TransportError(f"connection to {self.peer} is closed")
        try:
            with self._send_lock:
                self.sock.sendall(frame)
                self.sent += 1
        except OSError as exc:
            self.close()
            raise TransportError(f"send to {self.peer} failed: {exc}") from exc

    def _read_loop(self) -> None:
        decoder = FrameDecoder()
        try:
            while True:
                data = self.sock.recv(1 << 18)
                if not data:
                    break
                for parcel in decoder.feed(data):
                    self.received += 1
                    self._port._deliver(parcel, self)
        except (OSError, ParcelError) as exc:
            if not self._closed:
                log.warning("connection %s dropped: %s", self.peer, exc)
        finally:
            self.close()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self._port._forget(self)

    @property
    def closed(self) -> bool:
        return self._closed


class ParcelPort:
    """Listener plus outgoing connection cache, keyed by endpoint."""

    def __init__(self, on_parcel: Callable[[Parcel, Optional[Connection]], None]):
        self._on_parcel = on_parcel
        self._listener: Optional[socket.socket] = None
        self._conns: dict[str, Connection] = {}
        self._routes: dict[int, Connection] = {}
        self._all: set[Connection] = set()
        self._lock = threading.Lock()
        self.endpoint = ""
        self.received = 0
        self.sent = 0
        self.loopback = 0

    def listen(self, host: str = "127.0.0.1", port: int = 0) -> str:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        try:
            sock.bind((host, port))
        except OSError as exc:
            sock.close()
            if exc.errno == errno.EADDRINUSE:
                raise AddressInUse(f"{host}:{port} already in use") from exc
            raise TransportError(str(exc)) from exc
        sock.listen(128)
        self._listener = sock
        self.endpoint = f"{host}:{sock.getsockname()[1]}"
        threading.Thread(target=self._accept_loop, daemon=True,
                         name=f"px-accept-{self.endpoint}").start()
        return self.endpoint

    def _accept_loop(self) -> None:
        sock = self._listener
        while True:
            try:
                conn_sock, addr = sock.accept()
            except OSError:
                break
            conn = Connection(conn_sock, self, f"{addr[0]}:{addr[1]}")
            with self._lock:
                self._all.add(conn)

    def _deliver(self, parcel: Parcel, conn: Connection) -> None:
        self.received += 1
        route = self._routes.get(parcel.source_locality)
        if route is None or route.closed:
            self._routes[parcel.source_locality] = conn
        self._on_parcel(parcel, conn)

    def _forget(self, conn: Connection) -> None:
        with self._lock:
            self._all.discard(conn)
            for key, c in list(self._conns.items()):
                if c is conn:
                    del self._conns[key]
            for key, c in list(self._routes.items()):
                if c is conn:
                    del self._routes[key]

    def connect(self, endpoint: str, timeout: float = 5.0) -> Connection:
        conn = self._conns.get(endpoint)
        if conn is not None and not conn.closed:
            return conn
        with self._lock:
            conn = self._conns.get(endpoint)
            if conn is not None and not conn.closed:
                return conn
            host, port = parse_endpoint(endpoint)
            try:
                sock = socket.create_connection((host, port), timeout=timeout)
            except OSError as exc:
                raise TransportError(f"cannot connect to {endpoint}: {exc}") from exc
            sock.settimeout(None)
            conn = Connection(sock, self, endpoint)
            self._conns[endpoint] = conn
            self._all.add(conn)
            return conn

    def route(self, locality: int) -> Optional[Connection]:
        conn = self._routes.get(locality)
        return conn if conn is not None and not conn.closed else None

    def send(self, parcel: Parcel, endpoint: Optional[str] = None,
             conn: Optional[Connection] = None) -> None:
        if conn is None:
            if endpoint is None:
                raise TransportError("no route for parcel")
            conn = self.connect(endpoint)
        conn.send_frame(encode(parcel))
        self.sent += 1

    def close(self) -> None:
        if self._listener is not None:
            try:
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._listener.close()
            except OSError:
                pass
            self._listener = None
        with self._lock:
            conns = list(self._all)
        for c in conns:
            c.close()
