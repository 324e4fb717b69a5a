"""Quantum Security Controller (QuSeC).

Keeps the topology, assigns a security level to each application pair,
computes relay paths, builds the per-participant policy for a session and
pushes it to the vKMS / KMS services involved. It only handles identifiers
and counters; no key bytes ever reach it.
"""

from __future__ import annotations

import enum
import heapq
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import (
    AlreadyDelivered,
    DuplicateId,
    DuplicateSession,
    InfeasibleLevel,
    NoQuantumPath,
    NotYetDerived,
    ParticipantUnreachable,
    QsafeError,
    SameNodeSession,
    UnknownApplication,
    UnknownEndpoint,
    UnknownLink,
    UnknownSession,
    Unreachable,
    ValidationError,
    WrongCaller,
)
from .levels import SecurityLevel
from .qkd_sim import QkdLink
from .transport import Body, Service, Transport

log = logging.getLogger(__name__)

POLICY_SCHEMA_VERSION = 1


class NodeKind(str, enum.Enum):
    QN = "QN"
    CN = "CN"


class Role(str, enum.Enum):
    RECEIVER = "RECEIVER"
    PASSIVE = "PASSIVE"
    RELAY = "RELAY"
    ENDPOINT = "ENDPOINT"
    L1_ENDPOINT = "L1_ENDPOINT"
    L2_ENDPOINT = "L2_ENDPOINT"


class SessionState(str, enum.Enum):
    CONFIGURED = "CONFIGURED"
    DERIVED = "DERIVED"
    DELIVERED_BOTH = "DELIVERED_BOTH"


@dataclass(frozen=True)
class NodeDescriptor:
    node_id: str
    kind: NodeKind
    kms_ids: tuple[str, ...] = ()
    vkms_endpoint: str = ""
    hosted_apps: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", NodeKind(self.kind))
        object.__setattr__(self, "kms_ids", tuple(self.kms_ids))
        object.__setattr__(self, "hosted_apps", tuple(self.hosted_apps))
        if not self.vkms_endpoint:
            object.__setattr__(self, "vkms_endpoint", f"vKMS_{self.node_id}")
        if self.kind is NodeKind.CN and self.kms_ids:
            raise ValidationError(f"classical node {self.node_id} cannot host a KMS")
        if self.kind is NodeKind.QN and not self.kms_ids:
            raise ValidationError(f"QKD node {self.node_id} needs at least one KMS")

    @property
    def is_qn(self) -> bool:
        return self.kind is NodeKind.QN

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "kind": self.kind.value,
            "kms_ids": list(self.kms_ids),
            "vkms_endpoint": self.vkms_endpoint,
            "hosted_apps": list(self.hosted_apps),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NodeDescriptor":
        return cls(d["node_id"], NodeKind(d["kind"]), tuple(d.get("kms_ids", ())), d.get("vkms_endpoint", ""),
                   tuple(d.get("hosted_apps", ())))


class Topology:
    """Nodes plus QKD links; every link endpoint must be a registered QN."""

    def __init__(self) -> None:
        self.nodes: dict[str, NodeDescriptor] = {}
        self.links: dict[str, QkdLink] = {}
        self.apps: dict[str, str] = {}
        self.adjacency: dict[str, dict[str, str]] = {}  # node -> {neighbor: link_id}

    def add_node(self, desc: NodeDescriptor) -> None:
        if desc.node_id in self.nodes:
            raise DuplicateId(f"node {desc.node_id} already registered")
        for app in desc.hosted_apps:
            if app in self.apps:
                raise DuplicateId(f"application {app} already hosted on {self.apps[app]}")
        self.nodes[desc.node_id] = desc
        self.adjacency[desc.node_id] = {}
        for app in desc.hosted_apps:
            self.apps[app] = desc.node_id

    def add_link(self, link: QkdLink) -> None:
        if link.link_id in self.links:
            raise DuplicateId(f"link {link.link_id} already registered")
        for end in (link.endpoint_a, link.endpoint_b):
            node = self.nodes.get(end)
            if node is None or not node.is_qn:
                raise UnknownEndpoint(f"link {link.link_id}: {end!r} is not a registered QKD node")
        if link.endpoint_b in self.adjacency[link.endpoint_a]:
            raise DuplicateId(f"nodes {link.endpoint_a} and {link.endpoint_b} are already linked")
        self.links[link.link_id] = link
        self.adjacency[link.endpoint_a][link.endpoint_b] = link.link_id
        self.adjacency[link.endpoint_b][link.endpoint_a] = link.link_id

    def remove_link(self, link_id: str) -> QkdLink:
        link = self.links.pop(link_id, None)
        if link is None:
            raise UnknownLink(f"link {link_id!r} not registered")
        self.adjacency[link.endpoint_a].pop(link.endpoint_b, None)
        self.adjacency[link.endpoint_b].pop(link.endpoint_a, None)
        return link

    def node_of_app(self, app: str) -> NodeDescriptor:
        try:
            return self.nodes[self.apps[app]]
        except KeyError:
            raise UnknownApplication(f"application {app!r} is not hosted on any registered node") from None

    def link_between(self, a: str, b: str) -> QkdLink | None:
        link_id = self.adjacency.get(a, {}).get(b)
        return self.links[link_id] if link_id else None

    def neighbors(self, node_id: str) -> list[str]:
        return sorted(self.adjacency.get(node_id, {}))

    def kms_of(self, node_id: str) -> str:
        return self.nodes[node_id].kms_ids[0]

    def hop_distances(self, target: str) -> dict[str, int]:
        dist = {target: 0}
        queue = deque([target])
        while queue:
            u = queue.popleft()
            for v in self.adjacency[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist


@dataclass(frozen=True)
class ParticipantBlock:
    node_id: str
    role: Role
    vkms_endpoint: str
    app: str | None = None
    kem_suites: tuple[str, ...] = ()
    kdf_recipe: tuple[str, ...] = ()
    peers: dict[str, str] = field(default_factory=dict)
    kms_id: str | None = None
    peer_kms_id: str | None = None
    link_id: str | None = None
    relay_path: tuple[str, ...] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "role": self.role.value,
            "vkms_endpoint": self.vkms_endpoint,
            "app": self.app,
            "kem_suites": list(self.kem_suites),
            "kdf_recipe": list(self.kdf_recipe),
            "peers": dict(self.peers),
            "kms_id": self.kms_id,
            "peer_kms_id": self.peer_kms_id,
            "link_id": self.link_id,
            "relay_path": list(self.relay_path) if self.relay_path is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ParticipantBlock":
        path = d.get("relay_path")
        return cls(
            node_id=d["node_id"],
            role=Role(d["role"]),
            vkms_endpoint=d["vkms_endpoint"],
            app=d.get("app"),
            kem_suites=tuple(d.get("kem_suites", ())),
            kdf_recipe=tuple(d.get("kdf_recipe", ())),
            peers=dict(d.get("peers", {})),
            kms_id=d.get("kms_id"),
            peer_kms_id=d.get("peer_kms_id"),
            link_id=d.get("link_id"),
            relay_path=tuple(path) if path is not None else None,
        )


@dataclass(frozen=True)
class RelayInstruction:
    kms_id: str
    session_id: str
    upstream: str | None
    downstream: str | None
    link_in: str | None
    link_out: str | None

    def rule_body(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "upstream": self.upstream,
            "downstream": self.downstream,
            "link_in": self.link_in,
            "link_out": self.link_out,
        }


@dataclass(frozen=True)
class SessionPolicy:
    session_id: str
    level: SecurityLevel
    initiator_app: str
    target_app: str
    key_id: str
    out_len_bits: int
    participants: tuple[ParticipantBlock, ...]
    relay_rules: tuple[RelayInstruction, ...] = ()
    pad_expansion: bool = True
    requirements: dict[str, Any] | None = None  # reserved for minimum-requirement matching; unused

    def blocks_by_role(self, role: Role) -> list[ParticipantBlock]:
        return [p for p in self.participants if p.role is role]

    def block_for(self, node_id: str) -> ParticipantBlock:
        for p in self.participants:
            if p.node_id == node_id:
                return p
        raise KeyError(node_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": POLICY_SCHEMA_VERSION,
            "session_id": self.session_id,
            "level": self.level.name,
            "initiator_app": self.initiator_app,
            "target_app": self.target_app,
            "key_id": self.key_id,
            "out_len_bits": self.out_len_bits,
            "participants": [p.to_dict() for p in self.participants],
            "relay_rules": [dict(r.rule_body(), kms_id=r.kms_id) for r in self.relay_rules],
            "pad_expansion": self.pad_expansion,
            "requirements": self.requirements,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SessionPolicy":
        if d.get("schema_version") != POLICY_SCHEMA_VERSION:
            raise ValidationError(f"unsupported policy schema version {d.get('schema_version')!r}")
        return cls(
            session_id=d["session_id"],
            level=SecurityLevel.parse(d["level"]),
            initiator_app=d["initiator_app"],
            target_app=d["target_app"],
            key_id=d["key_id"],
            out_len_bits=int(d["out_len_bits"]),
            participants=tuple(ParticipantBlock.from_dict(p) for p in d["participants"]),
            relay_rules=tuple(
                RelayInstruction(r["kms_id"], r["session_id"], r.get("upstream"), r.get("downstream"),
                                 r.get("link_in"), r.get("link_out"))
                for r in d.get("relay_rules", ())
            ),
            pad_expansion=bool(d.get("pad_expansion", True)),
            requirements=d.get("requirements"),
        )


@dataclass
class SessionRecord:
    session_id: str
    initiator_app: str
    target_app: str
    level: SecurityLevel
    derived_key_id: str
    state: SessionState = SessionState.CONFIGURED
    kms_key_id: str | None = None
    policy: SessionPolicy | None = None
    updated_at: float = field(default_factory=time.monotonic)

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "initiator_app": self.initiator_app,
            "target_app": self.target_app,
            "level": self.level.name,
            "derived_key_id": self.derived_key_id,
            "state": self.state.value,
            "kms_key_id": self.kms_key_id,
        }


@dataclass
class ControllerConfig:
    kem_suite: str = "ML_KEM_768"
    dual_kem: bool = False
    dual_kem_suites: tuple[str, str] | None = None
    kdf_out_bits: int = 256
    path_metric: str = "hops"  # or "key_rate"
    relay_selection: str = "stock"  # or "lexicographic"
    pad_expansion: bool = True
    session_ttl_s: float = 600.0


class QuSeC(Service):
    def __init__(
        self,
        transport: Transport,
        config: ControllerConfig | None = None,
        service_id: str = "qusec",
        clock: Callable[[], float] = time.monotonic,
    ):
        super().__init__(service_id)
        self.transport = transport
        self.config = config or ControllerConfig()
        self.topology = Topology()
        self.sessions: dict[str, SessionRecord] = {}
        self._by_key_id: dict[str, str] = {}
        self.clock = clock
        self._topo_lock = threading.RLock()
        self._session_lock = threading.RLock()
        self.routes.update(
            {
                "security_level_request": self._h_level,
                "configuration_request": self._h_configure,
                "session_lookup": self._h_lookup,
                "session_update": self._h_update,
                "session_abort": self._h_abort,
                "topology/nodes": self._h_node,
                "topology/links": self._h_link,
                "topology/links/remove": self._h_remove_link,
                "path_request": self._h_path,
            }
        )

    # ------------------------------------------------------------ topology

    def register_node(self, desc: NodeDescriptor) -> dict[str, Any]:
        with self._topo_lock:
            self.topology.add_node(desc)
        return {"ack": True, "node_id": desc.node_id}

    def register_link(self, link: QkdLink) -> dict[str, Any]:
        with self._topo_lock:
            self.topology.add_link(link)
        return {"ack": True, "link_id": link.link_id}

    def remove_link(self, link_id: str) -> dict[str, Any]:
        with self._topo_lock:
            self.topology.remove_link(link_id)
        return {"ack": True, "link_id": link_id}

    # ------------------------------------------------------------ assignment

    def _endpoints(self, src_app: str, dst_app: str) -> tuple[NodeDescriptor, NodeDescriptor]:
        a = self.topology.node_of_app(src_app)
        b = self.topology.node_of_app(dst_app)
        if a.node_id == b.node_id:
            raise SameNodeSession(f"{src_app} and {dst_app} are both hosted on {a.node_id}")
        return a, b

    def assign_security_level(self, src_app: str, dst_app: str) -> SecurityLevel:
        with self._topo_lock:
            a, b = self._endpoints(src_app, dst_app)
            return self._highest_level(a, b)

    def _highest_level(self, a: NodeDescriptor, b: NodeDescriptor) -> SecurityLevel:
        topo = self.topology
        if a.is_qn and b.is_qn:
            if topo.link_between(a.node_id, b.node_id) is not None:
                return SecurityLevel.L1
            if b.node_id in topo.hop_distances(a.node_id):
                return SecurityLevel.L2
            return SecurityLevel.L4
        if a.is_qn != b.is_qn:
            qn = a if a.is_qn else b
            return SecurityLevel.L3 if topo.neighbors(qn.node_id) else SecurityLevel.L4
        return SecurityLevel.L4

    def is_feasible(self, level: SecurityLevel, a: NodeDescriptor, b: NodeDescriptor) -> bool:
        topo = self.topology
        if level is SecurityLevel.L1:
            return a.is_qn and b.is_qn and topo.link_between(a.node_id, b.node_id) is not None
        if level is SecurityLevel.L2:
            return a.is_qn and b.is_qn and b.node_id in topo.hop_distances(a.node_id)
        if level is SecurityLevel.L3:
            if a.is_qn == b.is_qn:
                return False
            qn = a if a.is_qn else b
            return bool(topo.neighbors(qn.node_id))
        return True

    # ------------------------------------------------------------ paths

    def compute_relay_path(self, src: str, dst: str) -> list[str]:
        """Shortest quantum path from ``src`` to ``dst``.

        Hop count by default, ties broken by the lexicographically smallest
        node-id sequence. With ``path_metric="key_rate"`` each link costs
        ``1/rate`` instead.
        """
        with self._topo_lock:
            topo = self.topology
            for n in (src, dst):
                node = topo.nodes.get(n)
                if node is None or not node.is_qn:
                    raise NoQuantumPath(f"{n!r} is not a registered QKD node")
            if self.config.path_metric == "key_rate":
                return self._cheapest_path(src, dst)
            dist = topo.hop_distances(dst)
            if src not in dist:
                raise NoQuantumPath(f"no quantum path {src} -> {dst}")
            path = [src]
            while path[-1] != dst:
                here = path[-1]
                path.append(min(v for v in topo.neighbors(here) if dist.get(v) == dist[here] - 1))
            return path

    def _cheapest_path(self, src: str, dst: str) -> list[str]:
        topo = self.topology
        heap: list[tuple[float, list[str]]] = [(0.0, [src])]
        done: set[str] = set()
        while heap:
            cost, path = heapq.heappop(heap)
            node = path[-1]
            if node in done:
                continue
            if node == dst:
                return path
            done.add(node)
            for v in topo.neighbors(node):
                if v not in done:
                    link = topo.link_between(node, v)
                    heapq.heappush(heap, (cost + 1.0 / link.rate_keys_per_sec, path + [v]))  # type: ignore[union-attr]
        raise NoQuantumPath(f"no quantum path {src} -> {dst}")

    def _pick_relay(self, passive: str) -> str:
        candidates = self.topology.neighbors(passive)
        if not candidates:
            raise InfeasibleLevel(f"{passive} has no QKD neighbour to act as relay")
        if self.config.relay_selection != "stock" or len(candidates) == 1:
            return candidates[0]
        stock: dict[str, int] = {}
        kms = self.topology.kms_of(passive)
        for c in candidates:
            try:
                status = self.transport.call(kms, "status", {"peer": c}, src=self.service_id)
                stock[c] = int(status["stored_key_count"])
            except QsafeError:
                stock[c] = -1
        return min(candidates, key=lambda c: (-stock[c], c))

    # ------------------------------------------------------------ policy

    def compute_policy(
        self,
        session_id: str,
        src_app: str,
        dst_app: str,
        level: SecurityLevel,
        key_id: str | None = None,
        out_len_bits: int | None = None,
    ) -> SessionPolicy:
        level = SecurityLevel.parse(level)
        with self._topo_lock:
            a, b = self._endpoints(src_app, dst_app)
            if not self.is_feasible(level, a, b):
                raise InfeasibleLevel(f"{level.name} is no longer feasible for {src_app} -> {dst_app}")
            topo = self.topology
            cfg = self.config
            out_bits = out_len_bits or cfg.kdf_out_bits
            blocks: list[ParticipantBlock] = []
            rules: list[RelayInstruction] = []
            apps = {a.node_id: src_app, b.node_id: dst_app}

            if level is SecurityLevel.L1:
                link = topo.link_between(a.node_id, b.node_id)
                assert link is not None
                for me, other in ((a, b), (b, a)):
                    blocks.append(ParticipantBlock(
                        me.node_id, Role.L1_ENDPOINT, me.vkms_endpoint, app=apps[me.node_id],
                        peers={"peer": other.vkms_endpoint}, kms_id=topo.kms_of(me.node_id),
                        peer_kms_id=topo.kms_of(other.node_id), link_id=link.link_id,
                    ))
            elif level is SecurityLevel.L2:
                path = tuple(self.compute_relay_path(a.node_id, b.node_id))
                for me, other in ((a, b), (b, a)):
                    neighbor = path[1] if me is a else path[-2]
                    blocks.append(ParticipantBlock(
                        me.node_id, Role.L2_ENDPOINT, me.vkms_endpoint, app=apps[me.node_id],
                        peers={"peer": other.vkms_endpoint}, kms_id=topo.kms_of(me.node_id),
                        peer_kms_id=topo.kms_of(neighbor),
                        link_id=topo.adjacency[me.node_id][neighbor], relay_path=path,
                    ))
                for i, node in enumerate(path):
                    up = path[i - 1] if i > 0 else None
                    down = path[i + 1] if i + 1 < len(path) else None
                    rules.append(RelayInstruction(
                        topo.kms_of(node), session_id, up, down,
                        topo.adjacency[node][up] if up else None,
                        topo.adjacency[node][down] if down else None,
                    ))
            elif level is SecurityLevel.L3:
                passive, receiver = (a, b) if a.is_qn else (b, a)
                relay_id = self._pick_relay(passive.node_id)
                relay = topo.nodes[relay_id]
                link_id = topo.adjacency[passive.node_id][relay_id]
                peers = {
                    "receiver": receiver.vkms_endpoint,
                    "passive": passive.vkms_endpoint,
                    "relay": relay.vkms_endpoint,
                }
                suites = (cfg.kem_suite,)
                recipe = ("kem1", "qkd")
                blocks.append(ParticipantBlock(receiver.node_id, Role.RECEIVER, receiver.vkms_endpoint,
                                               app=apps[receiver.node_id], kem_suites=suites, kdf_recipe=recipe,
                                               peers=peers))
                blocks.append(ParticipantBlock(passive.node_id, Role.PASSIVE, passive.vkms_endpoint,
                                               app=apps[passive.node_id], kem_suites=suites, kdf_recipe=recipe,
                                               peers=peers, kms_id=topo.kms_of(passive.node_id),
                                               peer_kms_id=topo.kms_of(relay_id), link_id=link_id))
                blocks.append(ParticipantBlock(relay_id, Role.RELAY, relay.vkms_endpoint, kem_suites=suites,
                                               peers=peers, kms_id=topo.kms_of(relay_id),
                                               peer_kms_id=topo.kms_of(passive.node_id), link_id=link_id))
            else:
                if cfg.dual_kem:
                    suites = tuple(cfg.dual_kem_suites or (cfg.kem_suite, cfg.kem_suite))
                    recipe = ("kem1", "kem2")
                else:
                    suites, recipe = (cfg.kem_suite,), ("kem1",)
                for me, other in ((a, b), (b, a)):
                    blocks.append(ParticipantBlock(me.node_id, Role.ENDPOINT, me.vkms_endpoint, app=apps[me.node_id],
                                                   kem_suites=suites, kdf_recipe=recipe,
                                                   peers={"peer": other.vkms_endpoint}))

        return SessionPolicy(
            session_id=session_id,
            level=level,
            initiator_app=src_app,
            target_app=dst_app,
            key_id=key_id or session_id,
            out_len_bits=out_bits,
            participants=tuple(blocks),
            relay_rules=tuple(rules),
            pad_expansion=self.config.pad_expansion,
        )

    def distribute_policy(self, policy: SessionPolicy) -> list[dict[str, Any]]:
        """Install every participant block and relay rule; all-or-nothing.

        On any failure the already-installed parts are removed and the error
        is raised (transport failures as ``ParticipantUnreachable``).
        """
        doc = policy.to_dict()
        acks: list[dict[str, Any]] = []
        installed: list[tuple[str, str]] = []  # (service, kind)
        try:
            for block in policy.participants:
                ack = self.transport.call(
                    block.vkms_endpoint, "install_role", {"policy": doc, "node_id": block.node_id}, src=self.service_id
                )
                installed.append((block.vkms_endpoint, "role"))
                acks.append(ack)
            for rule in policy.relay_rules:
                ack = self.transport.call(rule.kms_id, "relay_rules/install", rule.rule_body(), src=self.service_id)
                installed.append((rule.kms_id, "rule"))
                acks.append(ack)
        except QsafeError as exc:
            self._rollback(policy.session_id, installed)
            with self._session_lock:
                self._drop_session(policy.session_id)
            if isinstance(exc, Unreachable):
                raise ParticipantUnreachable(f"session {policy.session_id}: {exc}") from None
            raise
        with self._session_lock:
            record = self.sessions.get(policy.session_id)
            if record is not None:
                record.state = SessionState.CONFIGURED
                record.updated_at = self.clock()
        return acks

    def _rollback(self, session_id: str, installed: list[tuple[str, str]]) -> None:
        for service, kind in reversed(installed):
            endpoint = "uninstall_role" if kind == "role" else "relay_rules/remove"
            try:
                self.transport.call(service, endpoint, {"session_id": session_id}, src=self.service_id)
            except QsafeError:
                log.warning("rollback of %s on %s failed", kind, service)

    def configure_session(
        self,
        session_id: str,
        src_app: str,
        dst_app: str,
        level: SecurityLevel,
        key_id: str,
        out_len_bits: int | None = None,
    ) -> SessionPolicy:
        self.expire_sessions()
        with self._session_lock:
            if session_id in self.sessions:
                raise DuplicateSession(f"session {session_id} already exists")
            if key_id in self._by_key_id:
                raise DuplicateSession(f"key id {key_id} already bound to a session")
        policy = self.compute_policy(session_id, src_app, dst_app, level, key_id=key_id, out_len_bits=out_len_bits)
        with self._session_lock:
            self.sessions[session_id] = SessionRecord(
                session_id, src_app, dst_app, policy.level, key_id, policy=policy, updated_at=self.clock()
            )
            self._by_key_id[key_id] = session_id
        self.distribute_policy(policy)
        return policy

    # ------------------------------------------------------------ session state

    def mark_derived(self, session_id: str, kms_key_id: str | None = None) -> SessionRecord:
        with self._session_lock:
            record = self.sessions.get(session_id)
            if record is None:
                raise UnknownSession(f"unknown session {session_id}")
            record.state = SessionState.DERIVED
            record.kms_key_id = kms_key_id
            record.updated_at = self.clock()
            return record

    def lookup_session_for_target(self, target_app: str, key_id: str) -> SessionRecord:
        with self._session_lock:
            session_id = self._by_key_id.get(key_id)
            record = self.sessions.get(session_id) if session_id else None
            if record is None:
                raise UnknownSession(f"no session for key id {key_id}")
            if record.target_app != target_app:
                raise WrongCaller(f"{target_app} is not the target of session {record.session_id}")
            if record.state is SessionState.CONFIGURED:
                raise NotYetDerived(f"session {record.session_id} has not finished derivation")
            if record.state is SessionState.DELIVERED_BOTH:
                raise AlreadyDelivered(f"session {record.session_id} key already delivered to the target")
            record.state = SessionState.DELIVERED_BOTH
            record.updated_at = self.clock()
            return record

    def abort_session(self, session_id: str) -> bool:
        with self._session_lock:
            record = self.sessions.get(session_id)
            if record is None:
                return False
            self._drop_session(session_id)
        if record.policy is not None:
            installed = [(b.vkms_endpoint, "role") for b in record.policy.participants]
            installed += [(r.kms_id, "rule") for r in record.policy.relay_rules]
            self._rollback(session_id, installed)
        return True

    def _drop_session(self, session_id: str) -> None:
        record = self.sessions.pop(session_id, None)
        if record is not None:
            self._by_key_id.pop(record.derived_key_id, None)

    def expire_sessions(self, now: float | None = None) -> int:
        now = self.clock() if now is None else now
        with self._session_lock:
            stale = [s for s, r in self.sessions.items() if now - r.updated_at > self.config.session_ttl_s]
            for s in stale:
                self._drop_session(s)
        return len(stale)

    # ------------------------------------------------------------ wire handlers

    def _h_level(self, body: Body) -> Body:
        level = self.assign_security_level(body["src_app"], body["dst_app"])
        return {"level": level.name}

    def _h_configure(self, body: Body) -> Body:
        policy = self.configure_session(
            body["session_id"], body["src_app"], body["dst_app"], SecurityLevel.parse(body["level"]),
            body.get("key_id") or body["session_id"], body.get("size"),
        )
        return policy.to_dict()

    def _h_lookup(self, body: Body) -> Body:
        record = self.lookup_session_for_target(body["target_app"], body["key_id"])
        return record.to_dict()

    def _h_update(self, body: Body) -> Body:
        record = self.mark_derived(body["session_id"], body.get("kms_key_id"))
        return record.to_dict()

    def _h_abort(self, body: Body) -> Body:
        return {"aborted": self.abort_session(body["session_id"])}

    def _h_node(self, body: Body) -> Body:
        return self.register_node(NodeDescriptor.from_dict(body))

    def _h_link(self, body: Body) -> Body:
        return self.register_link(QkdLink(body["link_id"], body["a"], body["b"], int(body.get("key_size_bits", 256)),
                                          float(body.get("rate", 1000.0)), int(body.get("seed", 0))))

    def _h_remove_link(self, body: Body) -> Body:
        return self.remove_link(body["link_id"])

    def _h_path(self, body: Body) -> Body:
        return {"path": self.compute_relay_path(body["src"], body["dst"])}
