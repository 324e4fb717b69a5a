"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected in ``conftest.ACCEPTANCE`` and repeated in the
terminal summary.
"""

import contextlib
import itertools
import random
import time

import pytest
from conftest import ACCEPTANCE, line_config
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import kdf_oracle, xor

from qsafenet import core_crypto as cc
from qsafenet.core_crypto import KeyMaterial, SecretInput
from qsafenet.errors import AlreadyConsumed, KeysExhausted, QsafeError, UnknownKeyId
from qsafenet.harness import (
    PHASES,
    REFERENCE_CASES,
    LinkConfig,
    NodeConfig,
    TopologyConfig,
    emit_report,
    load_topology,
    read_topology,
    run_case,
    summarize,
)
from qsafenet.kms import Kms, RelayRule
from qsafenet.levels import SecurityLevel as L
from qsafenet.qkd_sim import QkdLink, QkdSimulator, stream_key
from qsafenet.qusec import ControllerConfig, NodeDescriptor, NodeKind, QuSeC
from qsafenet.transport import InProcTransport


@contextlib.contextmanager
def criterion(n, name):
    detail = [name]
    try:
        yield detail
    except BaseException as exc:
        line = f"{' '.join(detail)} | {type(exc).__name__}: {exc}"
        ACCEPTANCE[n] = (False, line)
        print(f"criterion {n}: FAIL - {line}")
        raise
    ACCEPTANCE[n] = (True, " ".join(detail))
    print(f"criterion {n}: PASS - {' '.join(detail)}")


# ---------------------------------------------------------------- 1


def test_criterion_1_reference_cases():
    with criterion(1, "reference cases T1..T4 at 100 iterations each") as d:
        t0 = time.perf_counter()
        with load_topology("fig2.json") as tb:
            for case, (_, _, level) in REFERENCE_CASES.items():
                result = run_case(tb, case, iterations=100)
                assert result.passes == 100, result.failures[:3]
                assert all(s.level == level.name for s in result.samples)
        elapsed = time.perf_counter() - t0
        assert elapsed < 120
        d.append(f"(400/400 correct, {elapsed:.1f}s)")


# ---------------------------------------------------------------- 2


def random_topology(rng, idx):
    n = rng.randint(2, 8)
    kinds = [rng.choice("QC") for _ in range(n)]
    names = [f"N{i}" for i in range(n)]
    nodes = [NodeConfig(names[i], "QN" if kinds[i] == "Q" else "CN", (f"APP_{i}",)) for i in range(n)]
    qns = [names[i] for i in range(n) if kinds[i] == "Q"]
    links = []
    for a, b in itertools.combinations(qns, 2):
        if rng.random() < 0.4:
            links.append(LinkConfig(f"{a}-{b}", a, b, 0, 1000.0, rng.randrange(1 << 30)))
    bits = rng.choice([128, 256, 512])
    links = [LinkConfig(l.id, l.a, l.b, bits, l.rate, l.seed) for l in links]
    return TopologyConfig(nodes, links, {"prefill": 128, "kdf_out_bits": bits, "dual_kem": rng.random() < 0.5,
                                         "kem_suite": rng.choice(["ML_KEM_768", "TOY_KEM"])}, f"rand{idx}")


def test_criterion_2_key_agreement():
    with criterion(2, "key agreement") as d:
        mismatches = 0
        with load_topology("fig2.json") as tb:
            for case, (src, dst, level) in REFERENCE_CASES.items():
                for _ in range(100):
                    tb.top_up()
                    k_i, k_t, t_i, _ = tb.establish(src, dst)
                    assert t_i["level"] == level.name
                    mismatches += (k_i != k_t) or k_i.length_bits != 256
        d.append("fig2 400 sessions,")
        rng = random.Random(2024)
        sessions, levels = 0, set()
        for idx in range(50):
            cfg = random_topology(rng, idx)
            bits = cfg.defaults["kdf_out_bits"]
            with load_topology(cfg, seed=idx) as tb:
                apps = [a for n in cfg.nodes for a in n.apps]
                for src, dst in itertools.permutations(apps, 2):
                    tb.top_up()
                    k_i, k_t, t_i, _ = tb.establish(src, dst)
                    levels.add(t_i["level"])
                    mismatches += (k_i != k_t) or k_i.length_bits != bits
                    sessions += 1
        assert levels == {"L1", "L2", "L3", "L4"}
        assert mismatches == 0
        d.append(f"50 random topologies {sessions} sessions, 0 mismatches")


# ---------------------------------------------------------------- 3


def _reachable(n, edges):
    # boolean transitive closure (Warshall), independent of the controller's BFS
    r = [[i == j for j in range(n)] for i in range(n)]
    for a, b in edges:
        r[a][b] = r[b][a] = True
    for k in range(n):
        for i in range(n):
            if r[i][k]:
                for j in range(n):
                    if r[k][j]:
                        r[i][j] = True
    return r


def brute_force_level(i, j, qn, edges, reach):
    adjacent = {frozenset(e) for e in edges}
    feasible = [L.L4]
    if qn[i] and qn[j] and frozenset((i, j)) in adjacent:
        feasible.append(L.L1)
    if qn[i] and qn[j] and reach[i][j]:
        feasible.append(L.L2)
    if qn[i] != qn[j]:
        q = i if qn[i] else j
        if any(q in e for e in adjacent):
            feasible.append(L.L3)
    return min(feasible)  # L1 is the smallest enum value and the most preferred


def link_patterns(qns):
    """Fixed family over the QN set: all graphs up to 4 QNs, else none/line/star/ring/complete/split."""
    pairs = list(itertools.combinations(qns, 2))
    if len(qns) <= 4:
        for mask in range(1 << len(pairs)):
            yield [p for k, p in enumerate(pairs) if mask >> k & 1]
        return
    yield []
    yield list(zip(qns, qns[1:]))
    yield [(qns[0], q) for q in qns[1:]]
    yield list(zip(qns, qns[1:])) + [(qns[-1], qns[0])]
    yield pairs
    half = len(qns) // 2
    yield list(zip(qns[:half], qns[1:half])) + list(zip(qns[half:], qns[half + 1:]))


def test_criterion_3_assignment_maximality():
    with criterion(3, "assignment maximality") as d:
        topologies = deviations = checked = 0
        for n in range(2, 7):
            for kinds in itertools.product([True, False], repeat=n):
                qns = [i for i in range(n) if kinds[i]]
                for edges in link_patterns(qns):
                    q = QuSeC(InProcTransport(), ControllerConfig())
                    for i in range(n):
                        kind = NodeKind.QN if kinds[i] else NodeKind.CN
                        q.register_node(NodeDescriptor(f"N{i}", kind, (f"KMS_{i}",) if kinds[i] else (), "",
                                                       (f"APP_{i}",)))
                    for a, b in edges:
                        q.register_link(QkdLink(f"{a}-{b}", f"N{a}", f"N{b}"))
                    reach = _reachable(n, edges)
                    for i, j in itertools.permutations(range(n), 2):
                        got = q.assign_security_level(f"APP_{i}", f"APP_{j}")
                        deviations += got is not brute_force_level(i, j, kinds, edges, reach)
                        checked += 1
                    topologies += 1
        assert deviations == 0
        d.append(f"({topologies} topologies, {checked} pairs, 0 deviations)")


# ---------------------------------------------------------------- 4


def _kms_line(k, prefill=16):
    t = InProcTransport()
    names = [f"R{i}" for i in range(k)]
    kms = {n: Kms(f"KMS_{n}", n, t) for n in names}
    for x in kms.values():
        t.register(x)
    sim = QkdSimulator(t)
    links = []
    for i, (a, b) in enumerate(zip(names, names[1:])):
        link = QkdLink(f"{a}-{b}", a, b, 256, 1000.0, 900 + i)
        kms[a].add_link(link.link_id, b, f"KMS_{b}", 256, True)
        kms[b].add_link(link.link_id, a, f"KMS_{a}", 256, False)
        sim.register_link(link, f"KMS_{a}", f"KMS_{b}")
        sim.fill_stores(link, prefill)
        links.append(link)
    return t, names, kms, links


def test_criterion_4_relay_chain():
    with criterion(4, "relay XOR chain on 2-6 QN lines") as d:
        runs = 0
        for k in range(2, 7):
            t, names, kms, links = _kms_line(k, prefill=32)
            stream = {l.link_id: dict(stream_key(l, i) for i in range(32)) for l in links}
            for trial in range(10):
                sid = f"s{trial}"
                for i, n in enumerate(names):
                    up = names[i - 1] if i else None
                    down = names[i + 1] if i + 1 < k else None
                    kms[n].install_relay_rule(RelayRule(sid, up, down, f"{up}-{n}" if up else None,
                                                        f"{n}-{down}" if down else None))
                wire = []

                def spy(dst, endpoint, body, wire=wire):
                    wire.append((dst, body["payload_b64"], body["pad_key_id"]))
                    return body

                t.tamper = spy
                before = {l.link_id: (kms[l.endpoint_a].stores[l.link_id].consumed_count,
                                      kms[l.endpoint_b].stores[l.link_id].consumed_count) for l in links}
                secret = random.Random(k * 100 + trial).randbytes(32)
                kms[names[0]].forward_relayed_key(sid, f"key-{sid}", KeyMaterial(secret))
                # recompute: decrypt each hop's wire payload with the pad named on the wire
                assert len(wire) == k - 1
                chain = secret
                for link, (dst, payload, pad_id) in zip(links, wire):
                    pad = stream[link.link_id][pad_id].data
                    cipher = KeyMaterial.from_b64(payload).data
                    assert cipher == xor(chain, pad)
                    chain = xor(cipher, pad)
                assert kms[names[-1]].relayed[f"key-{sid}"].key.data == chain == secret
                for l in links:
                    a0, b0 = before[l.link_id]
                    assert kms[l.endpoint_a].stores[l.link_id].consumed_count - a0 == 1
                    assert kms[l.endpoint_b].stores[l.link_id].consumed_count - b0 == 1
                runs += 1
        # and end to end through the vKMS level-2 path
        for k in range(3, 7):
            with load_topology(line_config(k, prefill=16), seed=k) as tb:
                key_id, key, t_i = tb.initiator_get_key("APP_Q0", f"APP_Q{k - 1}")
                assert t_i["level"] == "L2"
                for i in range(k - 1):
                    link_id = f"Q{i}-Q{i + 1}"
                    # downstream side fetched exactly one pad by id; upstream side used one pad,
                    # plus on the first hop the QKD key that is being transported
                    assert tb.kms[f"Q{i + 1}"].stores[link_id].consumed_count == 1
                    assert tb.kms[f"Q{i}"].stores[link_id].consumed_count == (2 if i == 0 else 1)
                assert tb.target_get_key(f"APP_Q{k - 1}", key_id)[0] == key
        d.append(f"({runs} KMS relays + 4 end-to-end, 0 deviations)")


# ---------------------------------------------------------------- 5

_ops = st.lists(st.tuples(st.sampled_from(["A", "B"]), st.sampled_from(["get_key", "get_key_with_id"]),
                          st.integers(0, 15)), max_size=60)


@settings(max_examples=150, deadline=None)
@given(_ops)
def _one_time_use(ops):
    t, names, kms, links = _kms_line(2, prefill=16)
    a, b = kms["R0"], kms["R1"]
    side = {"A": a, "B": b}
    ids = list(a.stores["R0-R1"].blocks)
    got: dict[str, list[bytes]] = {"A": [], "B": []}
    fetched: dict[str, set[str]] = {"A": set(), "B": set()}
    for s, op, idx in ops:
        if op == "get_key":
            try:
                ((kid, key),) = side[s].get_key("app", "R0-R1")
            except KeysExhausted:
                continue
        else:
            kid = ids[idx]
            if kid in fetched[s]:
                with pytest.raises(AlreadyConsumed):
                    side[s].get_key_with_id("app", [kid])
                continue
            ((kid, key),) = side[s].get_key_with_id("app", [kid])
        fetched[s].add(kid)
        got[s].append(key.data)
    for s in "AB":
        assert len(got[s]) == len(set(got[s]))


def test_criterion_5_one_time_use():
    with criterion(5, "one-time use over random interleavings") as d:
        _one_time_use()
        _, _, kms, _ = _kms_line(2)
        ((kid, _),) = kms["R0"].get_key("app", "R1")
        kms["R1"].get_key_with_id("app", [kid])
        with pytest.raises(AlreadyConsumed):
            kms["R1"].get_key_with_id("app", [kid])
        with pytest.raises(UnknownKeyId):
            kms["R1"].get_key_with_id("app", ["nope"])
        d.append("(150 hypothesis examples, second fetch rejected)")


# ---------------------------------------------------------------- 6


def _flip_trials(inputs, ctx, key):
    changed = total = 0
    for pos, (label, material) in enumerate(inputs):
        for bit in range(material.length_bits):
            raw = bytearray(material.data)
            raw[bit // 8] ^= 1 << (bit % 8)
            trial = list(inputs)
            trial[pos] = (label, KeyMaterial(bytes(raw)))
            out = cc.kdf_combine([SecretInput(lb, m) for lb, m in trial], ctx)
            changed += out != key
            total += 1
    return changed, total


def _captured(tb):
    seen = {}
    for v in tb.vkms.values():
        v.hooks["capture"] = lambda sid, name, key: seen.setdefault(sid, {}).setdefault(name, key)
    return seen


def test_criterion_6_hybrid_sensitivity():
    with criterion(6, "hybridization sensitivity") as d:
        with load_topology("fig2.json") as tb:
            seen = _captured(tb)
            _, key, _ = tb.initiator_get_key("APP_C", "APP_D")
            (sid,) = seen
            inputs = [("kem1", seen[sid]["kem1"]), ("qkd", seen[sid]["qkd"])]
            ctx = cc.DerivationContext(sid, "APP_C", "APP_D", L.L3, 256)
            assert cc.kdf_combine([SecretInput(lb, m) for lb, m in inputs], ctx) == key
            assert key.data == kdf_oracle([(b"kem1", inputs[0][1].data), (b"qkd", inputs[1][1].data)],
                                          sid, "APP_C", "APP_D", "L3")
            c3, n3 = _flip_trials(inputs, ctx, key)
        cfg = read_topology("fig2.json")
        cfg.defaults["dual_kem"] = True
        with load_topology(cfg) as tb:
            seen = _captured(tb)
            _, key, _ = tb.initiator_get_key("APP_A", "APP_B")
            (sid,) = seen
            inputs = [("kem1", seen[sid]["kem1"]), ("kem2", seen[sid]["kem2"])]
            ctx = cc.DerivationContext(sid, "APP_A", "APP_B", L.L4, 256)
            assert cc.kdf_combine([SecretInput(lb, m) for lb, m in inputs], ctx) == key
            c4, n4 = _flip_trials(inputs, ctx, key)
        assert n3 >= 512 and c3 == n3
        assert n4 >= 512 and c4 == n4
        fixed = cc.kdf_combine([SecretInput("qkd", KeyMaterial(bytes(32))), SecretInput("kem1", KeyMaterial(b"\xff" * 32))],
                               cc.DerivationContext("s1", "APP_C", "APP_D", L.L3, 256))
        assert fixed.data == kdf_oracle([(b"qkd", bytes(32)), (b"kem1", b"\xff" * 32)])
        assert fixed.data.hex() == "b14c0c39c09efe8dc789e91475064c1b7a1c8bd83563ae53759ba48004732e11"
        d.append(f"(L3 {c3}/{n3}, dual L4 {c4}/{n4} flips changed the key; fixed vector matches)")


# ---------------------------------------------------------------- 7


def test_criterion_7_bypass():
    with criterion(7, "target-side bypass") as d:
        with load_topology("fig2.json") as tb:
            for case, (src, dst, _) in REFERENCE_CASES.items():
                key_id, k_i, _ = tb.initiator_get_key(src, dst)
                tb.transport.reset_counts()
                k_t, _ = tb.target_get_key(dst, key_id)
                assert k_t == k_i
                target = tb.vkms_of(dst).service_id
                assert tb.transport.count(src=target, dst="qusec", endpoint="configuration_request") == 0
                assert tb.transport.count(src=target, dst="qusec", endpoint="security_level_request") == 0
                assert tb.transport.count(src=target, dst="qusec", endpoint="session_lookup") == 1
                assert tb.transport.count(dst="qusec") == 1
        d.append("(T1-T4: 0 configuration requests, 1 lookup each)")


# ---------------------------------------------------------------- 8


def test_criterion_8_latency_reporting(tmp_path):
    with criterion(8, "latency reporting") as d:
        samples = []
        slowest = 0.0
        for mode in ("inproc", "net"):
            with load_topology("fig2.json", mode=mode) as tb:
                for case in REFERENCE_CASES:
                    for _ in range(25):
                        tb.top_up()
                        result = run_case(tb, case, iterations=1)
                        samples.extend(result.samples)
        for s in samples:
            for phase in PHASES[:-1]:
                assert s.t_e2e >= getattr(s, phase)
            assert s.component_sum <= s.t_e2e + 5.0
            if s.mode == "net":
                assert s.t_e2e < 1000.0
                slowest = max(slowest, s.t_e2e)
        paths = emit_report(samples, tmp_path)
        summary = summarize(samples)
        for mode in ("inproc", "net"):
            for level in ("L1", "L2", "L3", "L4"):
                for side in ("INITIATOR", "TARGET"):
                    stats = summary[mode][level][side]["t_e2e"]
                    assert stats["n"] == 25
                    assert stats["p1"] <= stats["p25"] <= stats["median"] <= stats["p75"] <= stats["p99"]
        assert paths["csv"].exists() and paths["json"].exists()
        net_med = {lv: summary["net"][lv]["INITIATOR"]["t_e2e"]["median"] for lv in ("L1", "L2", "L3", "L4")}
        d.append("(net median E2E ms: " + ", ".join(f"{k} {v:.1f}" for k, v in net_med.items())
                 + f"; slowest {slowest:.1f})")


# ---------------------------------------------------------------- 9


def _scenario(kind, level, rng):
    """Return (src, dst, setup) where setup(testbed) arms the fault."""

    def dead_relay_l2(tb):
        def hook(dst, endpoint, body):
            if endpoint == "relay_forward" and dst == "KMS_D":
                tb.transport.set_down("KMS_E")
            return body
        tb.transport.tamper = hook

    def dead_relay_l3(tb):
        def hook(dst, endpoint, body):
            if endpoint == "session/l3/passive_decapsulate":
                tb.transport.set_down("vKMS_E")
            return body
        tb.transport.tamper = hook

    def dead_relay_early(tb):
        tb.transport.set_down("vKMS_E" if level == "L3" else "KMS_E")

    def exhaust(link_id, node, peer):
        def setup(tb):
            store = tb.kms[node].stores[link_id]
            tb.kms[node].get_key("drain", peer, len(store.fresh))
            other = tb.kms[peer].stores[link_id]
            tb.kms[peer].get_key("drain", node, len(other.fresh))
        return setup

    def corrupt(endpoint, field):
        def setup(tb):
            def hook(dst, ep, body):
                if ep == endpoint:
                    value = body[field]
                    if isinstance(value, list):
                        pos = rng.randrange(len(value))
                        raw = bytearray(KeyMaterial.from_b64(value[pos]).data)
                        raw[rng.randrange(len(raw))] ^= 1 << rng.randrange(8)
                        value = list(value)
                        value[pos] = KeyMaterial(bytes(raw)).b64()
                    else:
                        raw = bytearray(KeyMaterial.from_b64(value).data)
                        raw[rng.randrange(len(raw))] ^= 1 << rng.randrange(8)
                        value = KeyMaterial(bytes(raw)).b64()
                    body = dict(body, **{field: value})
                return body
            tb.transport.tamper = hook
        return setup

    table = {
        ("dead_relay", "L2"): ("APP_D", "APP_F", rng.choice([dead_relay_l2, dead_relay_early])),
        ("dead_relay", "L3"): ("APP_C", "APP_D", rng.choice([dead_relay_l3, dead_relay_early])),
        ("exhausted", "L1"): ("APP_E", "APP_F", exhaust("E-F", "E", "F")),
        ("exhausted", "L2"): ("APP_D", "APP_F", exhaust(*rng.choice([("D-E", "E", "D"), ("E-F", "E", "F")]))),
        ("exhausted", "L3"): ("APP_C", "APP_D", exhaust("D-E", "D", "E")),
        ("corrupt", "L3"): ("APP_C", "APP_D", corrupt(*rng.choice([
            ("session/l3/passive_decapsulate", "kem_ciphertext"),
            ("session/l3/receiver_payload", "ciphertext_b64"),
            ("session/l3/receiver_payload", "encrypted_key_b64"),
        ]))),
        ("corrupt", "L4"): ("APP_A", "APP_B", corrupt("session/l4/decapsulate", "kem_ciphertexts")),
    }
    return table[(kind, level)]


FAULTS = [("dead_relay", "L2"), ("dead_relay", "L3"), ("exhausted", "L1"), ("exhausted", "L2"),
          ("exhausted", "L3"), ("corrupt", "L3"), ("corrupt", "L4")]


def test_criterion_9_fail_closed():
    with criterion(9, "fail-closed under faults") as d:
        rng = random.Random(99)
        typed = 0
        errors: dict[str, int] = {}
        for n in range(50):
            kind, level = FAULTS[n % len(FAULTS)]
            cfg = read_topology("fig2.json")
            cfg.defaults["prefill"] = 16
            cfg.defaults["dual_kem"] = level == "L4" and n % 2 == 0
            with load_topology(cfg, seed=n) as tb:
                src, dst, setup = _scenario(kind, level, rng)
                setup(tb)
                delivered = None
                try:
                    delivered = tb.initiator_get_key(src, dst)
                except QsafeError as exc:
                    typed += 1
                    errors[type(exc).__name__] = errors.get(type(exc).__name__, 0) + 1
                assert delivered is None, f"scenario {n} {kind}/{level} delivered a key"
                tb.transport.tamper = None
                tb.transport.down.clear()
                # nothing derived is left anywhere for an application to pick up
                for v in tb.vkms.values():
                    assert not v.keys, f"scenario {n}: {v.node_id} still holds a derived key"
                for k in tb.kms.values():
                    assert not any(b.key is not None for b in k.relayed.values()), f"scenario {n}: relayed key"
                assert not tb.qusec.sessions
        assert typed == 50
        d.append(f"({typed}/50 typed errors: " + ", ".join(f"{k} {v}" for k, v in sorted(errors.items())) + ")")
