"""Deterministic stand-in for the quantum plane.

Each registered link produces a seeded pseudorandom key stream and pushes
every key, under the same id, into the KMS stores at both of its
endpoints.
"""

from __future__ import annotations

import hashlib
import struct
import threading
import time
import uuid
from dataclasses import dataclass

from .core_crypto import KeyMaterial
from .errors import UnknownLink, ValidationError
from .transport import Transport

_KEY_ID_NAMESPACE = uuid.UUID("6f1c3d7e-51a2-4c7e-9a55-0c2b8f1e9d40")


@dataclass(frozen=True)
class QkdLink:
    link_id: str
    endpoint_a: str
    endpoint_b: str
    key_size_bits: int = 256
    rate_keys_per_sec: float = 1000.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.endpoint_a == self.endpoint_b:
            raise ValidationError(f"link {self.link_id}: endpoints must differ")
        if self.key_size_bits <= 0 or self.key_size_bits % 8:
            raise ValidationError(f"link {self.link_id}: key size must be a positive multiple of 8")
        if self.rate_keys_per_sec <= 0:
            raise ValidationError(f"link {self.link_id}: rate must be positive")

    def other(self, node_id: str) -> str:
        return self.endpoint_b if node_id == self.endpoint_a else self.endpoint_a

    def to_dict(self) -> dict:
        return {
            "link_id": self.link_id,
            "a": self.endpoint_a,
            "b": self.endpoint_b,
            "key_size_bits": self.key_size_bits,
            "rate": self.rate_keys_per_sec,
            "seed": self.seed,
        }


def stream_key(link: QkdLink, index: int) -> tuple[str, KeyMaterial]:
    """The ``index``-th (key_id, key) of a link's stream. Pure function of (seed, link_id, index)."""
    material = hashlib.shake_256(
        b"qkd-sim" + struct.pack(">Q", link.seed & (2**64 - 1)) + link.link_id.encode() + b"/" + struct.pack(">Q", index)
    ).digest(link.key_size_bits // 8)
    key_id = str(uuid.uuid5(_KEY_ID_NAMESPACE, f"{link.link_id}/{index}"))
    return key_id, KeyMaterial(material)


class QkdSimulator:
    """Owns per-link counters and delivers keys to both endpoint KMSs through the transport.

    With ``pace=True`` key generation sleeps ``1/rate`` per key; otherwise
    stock depth alone limits consumption.
    """

    def __init__(self, transport: Transport, pace: bool = False):
        self.transport = transport
        self.pace = pace
        self.links: dict[str, QkdLink] = {}
        self.kms_ids: dict[str, tuple[str, str]] = {}
        self.counters: dict[str, int] = {}
        self._locks: dict[str, threading.Lock] = {}

    def register_link(self, link: QkdLink, kms_a: str, kms_b: str) -> None:
        if link.link_id in self.links:
            raise ValidationError(f"link {link.link_id} already registered")
        self.links[link.link_id] = link
        self.kms_ids[link.link_id] = (kms_a, kms_b)
        self.counters[link.link_id] = 0
        self._locks[link.link_id] = threading.Lock()

    def unregister_link(self, link_id: str) -> None:
        for table in (self.links, self.kms_ids, self.counters, self._locks):
            table.pop(link_id, None)

    def _link(self, link: "QkdLink | str") -> QkdLink:
        link_id = link.link_id if isinstance(link, QkdLink) else link
        try:
            return self.links[link_id]
        except KeyError:
            raise UnknownLink(f"link {link_id!r} not registered") from None

    def _deliver(self, link: QkdLink, count: int) -> list[tuple[str, KeyMaterial]]:
        with self._locks[link.link_id]:
            start = self.counters[link.link_id]
            batch = [stream_key(link, start + i) for i in range(count)]
            if self.pace:
                time.sleep(count / link.rate_keys_per_sec)
            body = {
                "link_id": link.link_id,
                "keys": [{"key_ID": kid, "key": k.b64(), "index": start + i} for i, (kid, k) in enumerate(batch)],
            }
            kms_a, kms_b = self.kms_ids[link.link_id]
            self.transport.call(kms_a, "qkd_push", body, src="qkd_sim")
            try:
                self.transport.call(kms_b, "qkd_push", body, src="qkd_sim")
            except Exception:
                # both stores get the batch or neither does
                self.transport.call(
                    kms_a, "qkd_retract", {"link_id": link.link_id, "key_IDs": [k for k, _ in batch]}, src="qkd_sim"
                )
                raise
            self.counters[link.link_id] = start + count
            return batch

    def generate_next_key(self, link: "QkdLink | str") -> tuple[str, KeyMaterial]:
        (item,) = self._deliver(self._link(link), 1)
        return item

    def fill_stores(self, link: "QkdLink | str", count: int) -> int:
        resolved = self._link(link)
        if count < 0:
            raise ValueError("count must be non-negative")
        if count == 0:
            return 0
        return len(self._deliver(resolved, count))
