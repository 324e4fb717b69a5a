"""Topology loading, test-case runner and latency report.

A topology file is JSON::

    {"nodes": [{"id": "D", "kind": "QN", "apps": ["APP_D"]}, ...],
     "links": [{"id": "D-E", "a": "D", "b": "E", "key_size_bits": 256, "rate": 1000, "seed": 11}],
     "defaults": {"kem_suite": "ML_KEM_768", "kdf_out_bits": 256, "dual_kem": false, "prefill": 512}}

:func:`load_topology` turns it into a running :class:`Testbed` (all
services in this process, talking either in-process or over loopback
HTTP). :func:`run_case` replays one of the reference cases and
:func:`emit_report` writes raw samples and summary statistics.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .core_crypto import KeyMaterial, seeded_randbytes
from .errors import AssignmentMismatch, KeyMismatch, NoSamples, ParseError, QsafeError, ValidationError
from .kms import Kms
from .levels import SecurityLevel
from .qkd_sim import QkdLink, QkdSimulator
from .qusec import ControllerConfig, NodeDescriptor, NodeKind, QuSeC
from .transport import Transport, make_transport
from .vkms import VKms

log = logging.getLogger(__name__)

PHASES = ("t_assignment", "t_configuration", "t_derivation", "t_delivery", "t_e2e")
STATS = ("median", "mean", "p25", "p75", "p1", "p99")

# reference cases on the bundled topology: source app, target app, expected level
REFERENCE_CASES: dict[str, tuple[str, str, SecurityLevel]] = {
    "T1": ("APP_E", "APP_F", SecurityLevel.L1),
    "T2": ("APP_D", "APP_F", SecurityLevel.L2),
    "T3": ("APP_C", "APP_D", SecurityLevel.L3),
    "T4": ("APP_A", "APP_B", SecurityLevel.L4),
}


@dataclass(frozen=True)
class NodeConfig:
    id: str
    kind: str
    apps: tuple[str, ...] = ()


@dataclass(frozen=True)
class LinkConfig:
    id: str
    a: str
    b: str
    key_size_bits: int = 256
    rate: float = 1000.0
    seed: int = 0


@dataclass
class TopologyConfig:
    nodes: list[NodeConfig]
    links: list[LinkConfig]
    defaults: dict[str, Any] = field(default_factory=dict)
    name: str = "topology"

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TopologyConfig":
        if not isinstance(data, dict):
            raise ParseError("topology must be a JSON object")
        try:
            nodes = [NodeConfig(str(n["id"]), str(n["kind"]).upper(), tuple(n.get("apps", ()))) for n in data["nodes"]]
            links = [
                LinkConfig(str(l.get("id") or f"{l['a']}-{l['b']}"), str(l["a"]), str(l["b"]),
                           int(l.get("key_size_bits", 256)), float(l.get("rate", 1000.0)), int(l.get("seed", 0)))
                for l in data.get("links", [])
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed topology: {exc!r}") from None
        cfg = cls(nodes, links, dict(data.get("defaults", {})), str(data.get("name", "topology")))
        cfg.validate()
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "nodes": [{"id": n.id, "kind": n.kind, "apps": list(n.apps)} for n in self.nodes],
            "links": [asdict(l) for l in self.links],
            "defaults": dict(self.defaults),
        }

    def validate(self) -> None:
        kinds: dict[str, str] = {}
        apps: set[str] = set()
        for n in self.nodes:
            if n.kind not in ("QN", "CN"):
                raise ValidationError(f"node {n.id}: kind must be QN or CN")
            if n.id in kinds:
                raise ValidationError(f"duplicate node id {n.id}")
            kinds[n.id] = n.kind
            for app in n.apps:
                if app in apps:
                    raise ValidationError(f"application {app} declared twice")
                apps.add(app)
        seen_links: set[str] = set()
        pairs: set[frozenset[str]] = set()
        for l in self.links:
            if l.id in seen_links:
                raise ValidationError(f"duplicate link id {l.id}")
            seen_links.add(l.id)
            for end in (l.a, l.b):
                if end not in kinds:
                    raise ValidationError(f"link {l.id}: unknown node {end}")
                if kinds[end] != "QN":
                    raise ValidationError(f"link {l.id}: classical node {end} cannot terminate a QKD link")
            if l.a == l.b:
                raise ValidationError(f"link {l.id}: endpoints must differ")
            pair = frozenset((l.a, l.b))
            if pair in pairs:
                raise ValidationError(f"link {l.id}: {l.a} and {l.b} already linked")
            pairs.add(pair)
            if l.key_size_bits <= 0 or l.key_size_bits % 8 or l.rate <= 0:
                raise ValidationError(f"link {l.id}: invalid key size or rate")


def parse_topology(text: str) -> TopologyConfig:
    if not text.strip():
        raise ParseError("empty topology file")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from None
    return TopologyConfig.from_dict(data)


def read_topology(path: str | os.PathLike[str]) -> TopologyConfig:
    """Read a topology file; a bare name such as ``fig2.json`` falls back to the bundled copy."""
    p = Path(path)
    if p.exists():
        return parse_topology(p.read_text())
    bundled = resources.files("qsafenet") / "data" / p.name
    if bundled.is_file():
        return parse_topology(bundled.read_text())
    raise ParseError(f"topology file {path} not found")


@dataclass
class PhaseTimings:
    session_id: str
    level: str
    side: str  # INITIATOR | TARGET
    t_assignment: float
    t_configuration: float
    t_derivation: float
    t_delivery: float
    t_e2e: float
    test_id: str = ""
    iteration: int = 0
    mode: str = ""

    @property
    def component_sum(self) -> float:
        return self.t_assignment + self.t_configuration + self.t_derivation + self.t_delivery


class Testbed:
    """All services for one topology, wired to a single transport."""

    def __init__(self, config: TopologyConfig, mode: str = "inproc", seed: int | None = None):
        self.config = config
        self.mode = mode
        self.transport: Transport = make_transport(mode)
        d = config.defaults
        ctrl_cfg = ControllerConfig(
            kem_suite=d.get("kem_suite", "ML_KEM_768"),
            dual_kem=bool(d.get("dual_kem", False)),
            kdf_out_bits=int(d.get("kdf_out_bits", 256)),
            path_metric=d.get("path_metric", "hops"),
            relay_selection=d.get("relay_selection", "stock"),
            pad_expansion=bool(d.get("pad_expansion", True)),
            session_ttl_s=float(d.get("session_ttl_s", 600.0)),
        )
        self.prefill = int(d.get("prefill", 512))
        self.key_bits = int(d.get("kdf_out_bits", 256))
        self.seed = d.get("seed") if seed is None else seed
        self.qusec = QuSeC(self.transport, ctrl_cfg)
        self.transport.register(self.qusec)
        self.kms: dict[str, Kms] = {}
        self.vkms: dict[str, VKms] = {}
        self.sim = QkdSimulator(self.transport)
        self.app_nodes: dict[str, str] = {}
        self.links: dict[str, QkdLink] = {}

        for i, n in enumerate(config.nodes):
            kms_id = f"KMS_{n.id}" if n.kind == "QN" else None
            if kms_id:
                self.kms[n.id] = Kms(kms_id, n.id, self.transport)
                self.transport.register(self.kms[n.id])
            rand = seeded_randbytes(int(self.seed) * 1009 + i) if self.seed is not None else None
            self.vkms[n.id] = VKms(n.id, n.kind, self.transport, kms_id=kms_id, hosted_apps=n.apps, randbytes=rand)
            self.transport.register(self.vkms[n.id])
            for app in n.apps:
                self.app_nodes[app] = n.id
        self.transport.start()

        for n in config.nodes:
            self.qusec.register_node(NodeDescriptor(n.id, NodeKind(n.kind), (f"KMS_{n.id}",) if n.kind == "QN" else (),
                                                    f"vKMS_{n.id}", n.apps))
        for l in config.links:
            self.add_link(QkdLink(l.id, l.a, l.b, l.key_size_bits, l.rate, l.seed))

    # ------------------------------------------------------------ topology changes

    def add_link(self, link: QkdLink) -> None:
        self.qusec.register_link(link)
        self.kms[link.endpoint_a].add_link(link.link_id, link.endpoint_b, f"KMS_{link.endpoint_b}", link.key_size_bits, True)
        self.kms[link.endpoint_b].add_link(link.link_id, link.endpoint_a, f"KMS_{link.endpoint_a}", link.key_size_bits, False)
        self.sim.register_link(link, f"KMS_{link.endpoint_a}", f"KMS_{link.endpoint_b}")
        self.links[link.link_id] = link
        if self.prefill:
            self.sim.fill_stores(link, self.prefill)

    def remove_link(self, link_id: str) -> None:
        link = self.links.pop(link_id)
        self.qusec.remove_link(link_id)
        self.sim.unregister_link(link_id)
        self.kms[link.endpoint_a].remove_link(link_id)
        self.kms[link.endpoint_b].remove_link(link_id)

    def top_up(self, minimum: int = 32) -> None:
        """Keep every link stocked; stands in for continuous key generation between sessions."""
        for link in self.links.values():
            have = min(self.kms[n].stores[link.link_id].fresh_count() for n in (link.endpoint_a, link.endpoint_b))
            if have < minimum:
                self.sim.fill_stores(link, self.prefill)

    # ------------------------------------------------------------ application side

    def vkms_of(self, app: str) -> VKms:
        return self.vkms[self.app_nodes[app]]

    def initiator_get_key(self, src_app: str, dst_app: str, size_bits: int | None = None) -> tuple[str, KeyMaterial, dict]:
        body = {"master_app": src_app, "slave_app": dst_app, "size": size_bits or self.key_bits}
        out = self.transport.call(self.vkms_of(src_app).service_id, "enc_keys", body, src=f"app:{src_app}")
        (entry,) = out["keys"]
        return entry["key_ID"], KeyMaterial.from_b64(entry["key"]), out["timings"]

    def target_get_key(self, dst_app: str, key_id: str) -> tuple[KeyMaterial, dict]:
        body = {"slave_app": dst_app, "key_IDs": [{"key_ID": key_id}]}
        out = self.transport.call(self.vkms_of(dst_app).service_id, "dec_keys", body, src=f"app:{dst_app}")
        (entry,) = out["keys"]
        return KeyMaterial.from_b64(entry["key"]), out["timings"]

    def establish(self, src_app: str, dst_app: str, size_bits: int | None = None) -> tuple[KeyMaterial, KeyMaterial, dict, dict]:
        """Initiator request followed immediately by the target fetch (key-id hand-off takes no time)."""
        key_id, k_init, t_init = self.initiator_get_key(src_app, dst_app, size_bits)
        k_target, t_target = self.target_get_key(dst_app, key_id)
        return k_init, k_target, t_init, t_target

    def close(self) -> None:
        self.transport.close()

    def __enter__(self) -> "Testbed":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def load_topology(path: "str | os.PathLike[str] | TopologyConfig", mode: str = "inproc", seed: int | None = None) -> Testbed:
    config = path if isinstance(path, TopologyConfig) else read_topology(path)
    return Testbed(config, mode=mode, seed=seed)


@dataclass
class CaseResult:
    test_id: str
    expected: SecurityLevel
    samples: list[PhaseTimings]
    passes: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def run_case(
    testbed: Testbed,
    test_id: str,
    iterations: int = 100,
    size_bits: int | None = None,
    strict: bool = True,
) -> CaseResult:
    """Run one reference case ``iterations`` times.

    Each iteration checks the assigned level and key agreement and records
    initiator and target timings. With ``strict`` the first failure raises
    ``AssignmentMismatch`` / ``KeyMismatch``; otherwise failures are collected.
    """
    src, dst, expected = REFERENCE_CASES[test_id]
    result = CaseResult(test_id, expected, [])
    for i in range(iterations):
        testbed.top_up()
        try:
            assigned = testbed.qusec.assign_security_level(src, dst)
            if assigned is not expected:
                raise AssignmentMismatch(f"{test_id}: expected {expected.name}, assigned {assigned.name}")
            k_init, k_target, t_init, t_target = testbed.establish(src, dst, size_bits)
            if t_init["level"] != expected.name:
                raise AssignmentMismatch(f"{test_id}: session ran at {t_init['level']}, expected {expected.name}")
            want_bits = size_bits or testbed.key_bits
            if k_init != k_target or k_init.length_bits != want_bits:
                raise KeyMismatch(f"{test_id} iteration {i}: initiator and target keys differ")
        except QsafeError as exc:
            if strict:
                raise
            result.failures.append(f"{i}: {type(exc).__name__}: {exc}")
            continue
        result.passes += 1
        for side, t in (("INITIATOR", t_init), ("TARGET", t_target)):
            result.samples.append(PhaseTimings(
                session_id=f"{test_id}-{i}", level=t["level"], side=side,
                t_assignment=t["t_assignment"], t_configuration=t["t_configuration"],
                t_derivation=t["t_derivation"], t_delivery=t["t_delivery"], t_e2e=t["t_e2e"],
                test_id=test_id, iteration=i, mode=testbed.mode,
            ))
    return result


def _stats(values: Iterable[float]) -> dict[str, float]:
    arr = np.asarray(list(values), dtype=float)
    p1, p25, p50, p75, p99 = np.percentile(arr, [1, 25, 50, 75, 99])
    return {"median": float(p50), "mean": float(arr.mean()), "p25": float(p25), "p75": float(p75),
            "p1": float(p1), "p99": float(p99), "n": int(arr.size)}


def summarize(samples: list[PhaseTimings]) -> dict[str, Any]:
    if not samples:
        raise NoSamples("no samples to summarize")
    groups: dict[tuple[str, str, str], list[PhaseTimings]] = {}
    for s in samples:
        groups.setdefault((s.mode or "inproc", s.level, s.side), []).append(s)
    summary: dict[str, Any] = {}
    for (mode, level, side), group in sorted(groups.items()):
        summary.setdefault(mode, {}).setdefault(level, {})[side] = {
            phase: _stats(getattr(s, phase) for s in group) for phase in PHASES
        }
    return summary


def emit_report(samples: list[PhaseTimings], out_dir: str | os.PathLike[str]) -> dict[str, Path]:
    """Write ``samples.csv`` (one row per sample) and ``summary.json``."""
    summary = summarize(samples)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "samples.csv"
    fields = list(asdict(samples[0]).keys())
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for s in samples:
            writer.writerow(asdict(s))
    json_path = out / "summary.json"
    json_path.write_text(json.dumps({"units": "ms", "statistics": list(STATS), "summary": summary}, indent=2))
    return {"csv": csv_path, "json": json_path}
