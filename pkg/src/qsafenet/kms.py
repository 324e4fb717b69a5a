"""Per-node key management service.

A :class:`Kms` holds one :class:`LinkStore` per QKD link terminating at its
node, serves ETSI GS QKD 014 shaped delivery calls (``enc_keys``,
``dec_keys``, ``status``) and performs hop-by-hop OTP relay under rules
installed by the controller.

Both ends of a link receive the same key stream. To stop the two ends from
handing the same key out twice through ``enc_keys``, each side is master
for half of the stream: endpoint A serves even stream indices, endpoint B
odd ones. Either side may fetch any key by id.
"""

from __future__ import annotations

import threading
from collections import OrderedDict, deque
from dataclasses import dataclass
from typing import Any

from .core_crypto import KeyMaterial, otp_transform
from .errors import (
    AlreadyConsumed,
    DuplicateSession,
    KeysExhausted,
    LinkKeysExhausted,
    NoRule,
    SizeUnavailable,
    UnknownKeyId,
    UnknownLink,
    ValidationError,
)
from .transport import Body, Service, Transport

QKD = "QKD"
RELAYED = "RELAYED"


@dataclass
class KeyBlock:
    key_id: str
    key: KeyMaterial
    link_id: str
    index: int = -1
    consumed: bool = False
    source: str = QKD


@dataclass(frozen=True)
class RelayRule:
    session_id: str
    upstream: str | None = None
    downstream: str | None = None
    link_in: str | None = None
    link_out: str | None = None

    def __post_init__(self) -> None:
        if self.upstream is None and self.downstream is None:
            raise ValidationError("relay rule needs an upstream or a downstream node")

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "upstream": self.upstream,
            "downstream": self.downstream,
            "link_in": self.link_in,
            "link_out": self.link_out,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RelayRule":
        return cls(d["session_id"], d.get("upstream"), d.get("downstream"), d.get("link_in"), d.get("link_out"))


class LinkStore:
    def __init__(self, link_id: str, peer_node: str, peer_kms: str, key_size_bits: int, master_parity: int):
        self.link_id = link_id
        self.peer_node = peer_node
        self.peer_kms = peer_kms
        self.key_size_bits = key_size_bits
        self.master_parity = master_parity
        self.blocks: OrderedDict[str, KeyBlock] = OrderedDict()
        self.lock = threading.Lock()
        self.consumed_count = 0
        self.fresh: deque[str] = deque()  # ids this side may hand out via enc_keys, in stream order

    def add(self, block: KeyBlock) -> None:
        self.blocks[block.key_id] = block
        if block.index % 2 == self.master_parity:
            self.fresh.append(block.key_id)

    def available(self) -> int:
        return len(self.blocks) - self.consumed_count

    def fresh_count(self) -> int:
        """Keys this side can still hand out through ``enc_keys``."""
        return sum(1 for k in self.fresh if k in self.blocks and not self.blocks[k].consumed)

    def take_fresh(self, number: int, exc: type[KeysExhausted] = KeysExhausted) -> list[tuple[str, KeyMaterial]]:
        with self.lock:
            while self.fresh and (self.fresh[0] not in self.blocks or self.blocks[self.fresh[0]].consumed):
                self.fresh.popleft()
            picked = []
            for key_id in self.fresh:
                block = self.blocks.get(key_id)
                if block is not None and not block.consumed:
                    picked.append(block)
                    if len(picked) == number:
                        break
            if len(picked) < number:
                raise exc(f"link {self.link_id}: {len(picked)} keys available, {number} requested")
            return [(block.key_id, self.consume(block)) for block in picked]

    def consume(self, block: KeyBlock) -> KeyMaterial:
        """Mark consumed and hand back the bytes; the store forgets them. Caller holds ``lock``."""
        key = block.key
        block.consumed = True
        block.key = None  # type: ignore[assignment]
        self.consumed_count += 1
        return key


class Kms(Service):
    def __init__(self, kms_id: str, node_id: str, transport: Transport):
        super().__init__(kms_id)
        self.kms_id = kms_id
        self.node_id = node_id
        self.transport = transport
        self.stores: dict[str, LinkStore] = {}
        self.relayed: dict[str, KeyBlock] = {}
        self.rules: dict[str, RelayRule] = {}
        self._lock = threading.Lock()
        self.routes.update(
            {
                "enc_keys": self._h_enc_keys,
                "dec_keys": self._h_dec_keys,
                "status": self._h_status,
                "health": lambda body: {"kms_id": self.kms_id, "node_id": self.node_id, "ok": True},
                "qkd_push": self._h_push,
                "qkd_retract": self._h_retract,
                "relay_rules/install": self._h_install_rule,
                "relay_rules/remove": self._h_remove_rule,
                "relay_forward": self._h_forward,
            }
        )

    # ------------------------------------------------------------ links

    def add_link(self, link_id: str, peer_node: str, peer_kms: str, key_size_bits: int, is_endpoint_a: bool) -> None:
        self.stores[link_id] = LinkStore(link_id, peer_node, peer_kms, key_size_bits, 0 if is_endpoint_a else 1)

    def remove_link(self, link_id: str) -> None:
        self.stores.pop(link_id, None)

    def _store(self, ref: str) -> LinkStore:
        """Resolve a link id, peer node id or peer KMS id to a store."""
        if ref in self.stores:
            return self.stores[ref]
        for store in self.stores.values():
            if ref in (store.peer_node, store.peer_kms):
                return store
        raise UnknownLink(f"{self.kms_id}: no link to {ref!r}")

    def push_keys(self, link_id: str, blocks: list[tuple[str, bytes, int]]) -> int:
        store = self._store(link_id)
        with store.lock:
            for key_id, key, index in blocks:
                store.add(KeyBlock(key_id, KeyMaterial(key), link_id, index))
        return len(blocks)

    def retract_keys(self, link_id: str, key_ids: list[str]) -> None:
        store = self._store(link_id)
        with store.lock:
            for key_id in key_ids:
                block = store.blocks.get(key_id)
                if block is not None and not block.consumed:
                    del store.blocks[key_id]

    # ------------------------------------------------------------ ETSI 014 shaped calls

    def get_key(self, caller: str, peer: str, number: int = 1, size_bits: int | None = None) -> list[tuple[str, KeyMaterial]]:
        if number <= 0:
            raise ValueError("number must be positive")
        store = self._store(peer)
        if size_bits is not None and size_bits != store.key_size_bits:
            raise SizeUnavailable(f"link {store.link_id} holds {store.key_size_bits}-bit keys, {size_bits} requested")
        return store.take_fresh(number)

    def get_key_with_id(self, caller: str, key_ids: list[str]) -> list[tuple[str, KeyMaterial]]:
        located: list[tuple[KeyBlock, threading.Lock, LinkStore | None]] = []
        for key_id in key_ids:
            located.append(self._locate(key_id))
        # all-or-nothing: verify every id before consuming any
        for block, _, _ in located:
            if block.consumed:
                raise AlreadyConsumed(f"key {block.key_id} already consumed at {self.kms_id}")
        out = []
        for block, lock, store in located:
            with lock:
                if block.consumed:
                    raise AlreadyConsumed(f"key {block.key_id} already consumed at {self.kms_id}")
                if store is not None:
                    key = store.consume(block)
                else:
                    key, block.key = block.key, None  # type: ignore[assignment]
                    block.consumed = True
            out.append((block.key_id, key))
        return out

    def _locate(self, key_id: str) -> tuple[KeyBlock, threading.Lock, LinkStore | None]:
        with self._lock:
            if key_id in self.relayed:
                return self.relayed[key_id], self._lock, None
        for store in self.stores.values():
            block = store.blocks.get(key_id)
            if block is not None:
                return block, store.lock, store
        raise UnknownKeyId(f"{self.kms_id}: unknown key id {key_id}")

    def status(self, peer: str) -> dict[str, Any]:
        store = self._store(peer)
        with store.lock:
            count = store.available()
        return {
            "source_KME_ID": self.kms_id,
            "target_KME_ID": store.peer_kms,
            "link_id": store.link_id,
            "key_size": store.key_size_bits,
            "stored_key_count": count,
            "consumed_key_count": store.consumed_count,
            "link_health": "up",
        }

    # ------------------------------------------------------------ relay

    def install_relay_rule(self, rule: RelayRule) -> dict[str, Any]:
        for link in (rule.link_in, rule.link_out):
            if link is not None and link not in self.stores:
                raise UnknownLink(f"{self.kms_id}: relay rule references unknown link {link!r}")
        if rule.downstream is not None and rule.link_out is None:
            raise UnknownLink("downstream hop without link_out")
        if rule.upstream is not None and rule.link_in is None:
            raise UnknownLink("upstream hop without link_in")
        with self._lock:
            if rule.session_id in self.rules:
                raise DuplicateSession(f"{self.kms_id}: session {rule.session_id} already has a rule")
            self.rules[rule.session_id] = rule
        return {"ack": True, "kms_id": self.kms_id, "session_id": rule.session_id}

    def remove_relay_rule(self, session_id: str) -> bool:
        with self._lock:
            return self.rules.pop(session_id, None) is not None

    def forward_relayed_key(
        self, session_id: str, key_id: str, payload: KeyMaterial, pad_key_id: str | None = None
    ) -> dict[str, Any]:
        """Process one relay hop.

        Entry node (no upstream): ``payload`` is the plain key to transport.
        Other nodes: ``payload`` is OTP-encrypted with the link_in key named by
        ``pad_key_id``. Non-terminal nodes re-encrypt with a fresh link_out key
        and call the next hop; the terminal node keeps the key as a RELAYED
        block under ``key_id``.
        """
        with self._lock:
            rule = self.rules.get(session_id)
        if rule is None:
            raise NoRule(f"{self.kms_id}: no relay rule for session {session_id}")

        if rule.upstream is None:
            plain = payload
        else:
            if pad_key_id is None:
                raise UnknownKeyId("relayed payload without pad key id")
            in_store = self.stores[rule.link_in]  # type: ignore[index]
            if pad_key_id not in in_store.blocks:
                raise UnknownKeyId(f"{self.kms_id}: pad key {pad_key_id} not on link {rule.link_in}")
            (_, pad), = self.get_key_with_id(self.kms_id, [pad_key_id])
            plain = otp_transform(payload, pad)

        if rule.downstream is None:
            with self._lock:
                if key_id in self.relayed:
                    raise DuplicateSession(f"{self.kms_id}: relayed key {key_id} already stored")
                self.relayed[key_id] = KeyBlock(key_id, plain, rule.link_in or "", source=RELAYED)
                self.rules.pop(session_id, None)
            return {"ack": True, "terminal": self.node_id, "hops": 0}

        out_store = self.stores[rule.link_out]  # type: ignore[index]
        if out_store.key_size_bits != plain.length_bits:
            raise SizeUnavailable(f"link {out_store.link_id} pads are {out_store.key_size_bits} bits")
        ((pad_out_id, pad_out),) = out_store.take_fresh(1, LinkKeysExhausted)
        cipher = otp_transform(plain, pad_out)
        result = self.transport.call(
            out_store.peer_kms,
            "relay_forward",
            {"session_id": session_id, "key_id": key_id, "payload_b64": cipher.b64(), "pad_key_id": pad_out_id},
            src=self.kms_id,
        )
        with self._lock:
            self.rules.pop(session_id, None)
        result["hops"] = result.get("hops", 0) + 1
        return result

    # ------------------------------------------------------------ wire handlers

    @staticmethod
    def _keys_body(keys: list[tuple[str, KeyMaterial]]) -> Body:
        return {"keys": [{"key_ID": kid, "key": k.b64()} for kid, k in keys]}

    def _h_enc_keys(self, body: Body) -> Body:
        keys = self.get_key(body.get("caller", "?"), body["peer"], int(body.get("number", 1)), body.get("size"))
        return self._keys_body(keys)

    def _h_dec_keys(self, body: Body) -> Body:
        ids = [k["key_ID"] if isinstance(k, dict) else k for k in body["key_IDs"]]
        return self._keys_body(self.get_key_with_id(body.get("caller", "?"), ids))

    def _h_status(self, body: Body) -> Body:
        return self.status(body["peer"])

    def _h_push(self, body: Body) -> Body:
        blocks = [(k["key_ID"], KeyMaterial.from_b64(k["key"]).data, int(k["index"])) for k in body["keys"]]
        return {"delivered": self.push_keys(body["link_id"], blocks)}

    def _h_retract(self, body: Body) -> Body:
        self.retract_keys(body["link_id"], body["key_IDs"])
        return {"ack": True}

    def _h_install_rule(self, body: Body) -> Body:
        return self.install_relay_rule(RelayRule.from_dict(body))

    def _h_remove_rule(self, body: Body) -> Body:
        return {"removed": self.remove_relay_rule(body["session_id"])}

    def _h_forward(self, body: Body) -> Body:
        return self.forward_relayed_key(
            body["session_id"], body["key_id"], KeyMaterial.from_b64(body["payload_b64"]), body.get("pad_key_id")
        )
