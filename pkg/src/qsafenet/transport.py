"""Message transport between services.

Every service (QuSeC, KMS, vKMS) is a :class:`Service` exposing named
endpoints that take and return JSON objects. Two transports deliver the
calls:

* :class:`InProcTransport` dispatches directly but still round-trips the
  bodies through JSON so the wire format is exercised.
* :class:`HttpTransport` runs one loopback HTTP server per service and
  POSTs ``/<endpoint>``.

Both keep a message log (``(src, dst, endpoint)`` counts) and support
marking services as down and tampering with bodies in flight, which the
fault-injection tests rely on.
"""

from __future__ import annotations

import collections
import http.client
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable

from .errors import BadRequest, QsafeError, Unreachable, UnknownRoute, from_wire

log = logging.getLogger(__name__)

Body = dict[str, Any]
Tamper = Callable[[str, str, Body], Body]


class Service:
    """Base class: subclasses fill ``self.routes`` with endpoint -> handler."""

    def __init__(self, service_id: str):
        self.service_id = service_id
        self.routes: dict[str, Callable[[Body], Body]] = {}

    def handle(self, endpoint: str, body: Body) -> Body:
        try:
            handler = self.routes[endpoint]
        except KeyError:
            raise UnknownRoute(f"{self.service_id} has no endpoint {endpoint!r}") from None
        try:
            return handler(body)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, QsafeError):
                raise
            raise BadRequest(f"{endpoint}: {exc!r}") from exc


class Transport:
    def __init__(self) -> None:
        self.services: dict[str, Service] = {}
        self.down: set[str] = set()
        self.tamper: Tamper | None = None
        self._lock = threading.Lock()
        self.messages: collections.Counter[tuple[str, str, str]] = collections.Counter()

    def register(self, service: Service) -> None:
        self.services[service.service_id] = service

    def set_down(self, service_id: str, down: bool = True) -> None:
        if down:
            self.down.add(service_id)
        else:
            self.down.discard(service_id)

    def count(self, src: str | None = None, dst: str | None = None, endpoint: str | None = None) -> int:
        with self._lock:
            return sum(
                n
                for (s, d, e), n in self.messages.items()
                if (src is None or s == src) and (dst is None or d == dst) and (endpoint is None or e == endpoint)
            )

    def reset_counts(self) -> None:
        with self._lock:
            self.messages.clear()

    def call(self, dst: str, endpoint: str, body: Body, src: str = "?") -> Body:
        with self._lock:
            self.messages[(src, dst, endpoint)] += 1
        if dst in self.down:
            raise Unreachable(f"{dst} is down")
        if dst not in self.services:
            raise Unreachable(f"no route to {dst}")
        if self.tamper is not None:
            body = self.tamper(dst, endpoint, body)
        return self._deliver(dst, endpoint, body)

    def _deliver(self, dst: str, endpoint: str, body: Body) -> Body:
        raise NotImplementedError

    def start(self) -> None:
        pass

    def close(self) -> None:
        pass


class InProcTransport(Transport):
    def _deliver(self, dst: str, endpoint: str, body: Body) -> Body:
        payload = json.loads(json.dumps(body))
        try:
            result = self.services[dst].handle(endpoint, payload)
        except QsafeError as exc:
            raise from_wire(json.loads(json.dumps(exc.to_wire()))) from None
        return json.loads(json.dumps(result))


class _Handler(BaseHTTPRequestHandler):
    service: Service  # set on the per-server subclass
    protocol_version = "HTTP/1.1"
    disable_nagle_algorithm = True  # headers and body go out in separate writes

    def do_POST(self) -> None:  # noqa: N802
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b"{}"
        try:
            body = json.loads(raw or b"{}")
            result = self.service.handle(self.path.lstrip("/"), body)
            status, out = 200, result
        except QsafeError as exc:
            status, out = 400, exc.to_wire()
        except Exception as exc:  # pragma: no cover - surfaced to the caller as a typed error
            log.exception("unhandled error in %s", self.service.service_id)
            status, out = 500, {"error": "QsafeError", "message": repr(exc)}
        data = json.dumps(out).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, format: str, *args: Any) -> None:
        log.debug("%s " + format, self.service.service_id, *args)


class HttpTransport(Transport):
    """Loopback HTTP/JSON transport; one threaded server per service."""

    def __init__(self, host: str = "127.0.0.1", timeout: float = 10.0) -> None:
        super().__init__()
        self.host = host
        self.timeout = timeout
        self.ports: dict[str, int] = {}
        self._servers: dict[str, ThreadingHTTPServer] = {}
        self._local = threading.local()

    def start(self) -> None:
        for sid, service in self.services.items():
            if sid in self._servers:
                continue
            handler = type(f"Handler_{sid}", (_Handler,), {"service": service})
            server = ThreadingHTTPServer((self.host, 0), handler)
            server.daemon_threads = True
            threading.Thread(target=server.serve_forever, name=f"http-{sid}", daemon=True).start()
            self._servers[sid] = server
            self.ports[sid] = server.server_address[1]

    def register(self, service: Service) -> None:
        super().register(service)
        if self._servers:
            self.start()

    def url(self, service_id: str) -> str:
        return f"http://{self.host}:{self.ports[service_id]}"

    def _conn(self, dst: str) -> http.client.HTTPConnection:
        pool = getattr(self._local, "pool", None)
        if pool is None:
            pool = self._local.pool = {}
        conn = pool.get(dst)
        if conn is None:
            conn = pool[dst] = http.client.HTTPConnection(self.host, self.ports[dst], timeout=self.timeout)
        return conn

    def _deliver(self, dst: str, endpoint: str, body: Body) -> Body:
        if dst not in self.ports:
            raise Unreachable(f"{dst} has no listening server")
        data = json.dumps(body).encode()
        for attempt in (0, 1):
            conn = self._conn(dst)
            try:
                conn.request("POST", "/" + endpoint, body=data, headers={"Content-Type": "application/json"})
                resp = conn.getresponse()
                raw = resp.read()
                break
            except (ConnectionError, http.client.HTTPException, OSError) as exc:
                conn.close()
                self._local.pool.pop(dst, None)
                # only a dropped keep-alive connection is retried; anything else may have been processed
                stale = isinstance(exc, (http.client.RemoteDisconnected, BrokenPipeError, ConnectionResetError))
                if attempt or not stale:
                    raise Unreachable(f"{dst}: {exc}") from None
        out = json.loads(raw)
        if resp.status != 200:
            raise from_wire(out)
        return out

    def close(self) -> None:
        for server in self._servers.values():
            server.shutdown()
            server.server_close()
        self._servers.clear()
        self.ports.clear()


def make_transport(mode: str) -> Transport:
    if mode == "inproc":
        return InProcTransport()
    if mode == "net":
        return HttpTransport()
    raise ValueError(f"unknown mode {mode!r} (expected 'inproc' or 'net')")
