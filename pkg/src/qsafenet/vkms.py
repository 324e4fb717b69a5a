"""Per-node virtual KMS.

Applications talk to their node's :class:`VKms` through ETSI GS QKD 014
shaped calls: ``enc_keys`` opens a session as initiator, ``dec_keys``
fetches the target's copy by key id. For an initiator request the vKMS
asks the controller for a security level and a configuration, runs the
level's derivation procedure with the other participants over the session
channel, reports completion, and only then releases the key.

Session-channel endpoints (``session/...``) are called by peer vKMSs. The
controller calls ``install_role`` / ``uninstall_role``.
"""

from __future__ import annotations

import base64
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import core_crypto as cc
from .core_crypto import DerivationContext, KeyMaterial, SecretInput
from .errors import (
    ControllerUnreachable,
    DerivationFailed,
    DuplicateSession,
    IntegrityError,
    KemFailure,
    KeyConfirmationFailed,
    LocalKmsUnavailable,
    MalformedCiphertext,
    MalformedPublicKey,
    MalformedSecretKey,
    OtpLengthMismatch,
    QsafeError,
    RoleKindMismatch,
    UnknownApplication,
    UnknownSession,
    Unreachable,
    UnsupportedSuite,
)
from .levels import SecurityLevel
from .qusec import NodeKind, ParticipantBlock, Role, SessionPolicy
from .transport import Body, Service, Transport

log = logging.getLogger(__name__)

_QN_ONLY = {Role.PASSIVE, Role.RELAY, Role.L1_ENDPOINT, Role.L2_ENDPOINT}
_KEM_ERRORS = (MalformedPublicKey, MalformedCiphertext, MalformedSecretKey, UnsupportedSuite)

Hook = Callable[..., Any]


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text)


@dataclass(frozen=True)
class RoleAssignment:
    session_id: str
    role: Role
    policy: SessionPolicy
    block: ParticipantBlock

    @property
    def level(self) -> SecurityLevel:
        return self.policy.level

    def context(self, purpose: str = "session-key", out_len_bits: int | None = None) -> DerivationContext:
        p = self.policy
        return DerivationContext(p.session_id, p.initiator_app, p.target_app, p.level,
                                 out_len_bits or p.out_len_bits, purpose)


@dataclass
class SessionKeyRecord:
    session_id: str
    key_id: str
    key: KeyMaterial = field(repr=False)
    level: SecurityLevel
    delivered: bool = False
    kms_key_id: str | None = None


@dataclass
class _Scratch:
    """Per-session intermediate state; dropped once the session key exists."""

    secret_keys: list[bytearray] = field(default_factory=list)
    receiver_sk: bytearray | None = None
    kem1: KeyMaterial | None = None

    def wipe(self) -> None:
        for sk in self.secret_keys:
            cc.zeroize(sk)
        if self.receiver_sk is not None:
            cc.zeroize(self.receiver_sk)
        self.secret_keys.clear()
        self.receiver_sk = None
        self.kem1 = None


class VKms(Service):
    def __init__(
        self,
        node_id: str,
        kind: NodeKind | str,
        transport: Transport,
        kms_id: str | None = None,
        hosted_apps: tuple[str, ...] = (),
        controller: str = "qusec",
        service_id: str | None = None,
        randbytes: cc.RandBytes | None = None,
    ):
        super().__init__(service_id or f"vKMS_{node_id}")
        self.node_id = node_id
        self.kind = NodeKind(kind)
        self.transport = transport
        self.kms_id = kms_id
        self.hosted_apps = set(hosted_apps)
        self.controller = controller
        self.randbytes = randbytes or os.urandom
        self.roles: dict[str, RoleAssignment] = {}
        self.keys: dict[str, SessionKeyRecord] = {}
        self._scratch: dict[str, _Scratch] = {}
        self._lock = threading.RLock()
        # test instrumentation: "capture"(session_id, name, KeyMaterial) and "l3.recovered_qkd"(KeyMaterial) -> KeyMaterial
        self.hooks: dict[str, Hook] = {}
        self.last_timings: dict[str, float] = {}
        self.routes.update(
            {
                "enc_keys": self._h_enc_keys,
                "dec_keys": self._h_dec_keys,
                "install_role": self._h_install_role,
                "uninstall_role": self._h_uninstall_role,
                "session/abort": self._h_uninstall_role,
                "session/l3/passive_keygen": self._h_l3_passive_keygen,
                "session/l3/receiver_encapsulate": self._h_l3_receiver_encapsulate,
                "session/l3/passive_decapsulate": self._h_l3_passive_decapsulate,
                "session/l3/relay_forward": self._h_l3_relay_forward,
                "session/l3/receiver_payload": self._h_l3_receiver_payload,
                "session/l4/keygen": self._h_l4_keygen,
                "session/l4/decapsulate": self._h_l4_decapsulate,
            }
        )

    # ------------------------------------------------------------ helpers

    def _new_id(self) -> str:
        return str(uuid.UUID(bytes=self.randbytes(16), version=4))

    def _send(self, dst: str, endpoint: str, body: Body) -> Body:
        if dst == self.service_id:
            return self.handle(endpoint, body)
        return self.transport.call(dst, endpoint, body, src=self.service_id)

    def _controller(self, endpoint: str, body: Body) -> Body:
        try:
            return self.transport.call(self.controller, endpoint, body, src=self.service_id)
        except Unreachable as exc:
            raise ControllerUnreachable(str(exc)) from None

    def _kms(self, endpoint: str, body: Body) -> Body:
        if self.kms_id is None:
            raise LocalKmsUnavailable(f"{self.node_id} has no KMS")
        try:
            return self.transport.call(self.kms_id, endpoint, body, src=self.service_id)
        except Unreachable as exc:
            raise LocalKmsUnavailable(str(exc)) from None

    def _kms_keys(self, endpoint: str, body: Body) -> list[tuple[str, KeyMaterial]]:
        return [(k["key_ID"], KeyMaterial.from_b64(k["key"])) for k in self._kms(endpoint, body)["keys"]]

    def _capture(self, session_id: str, name: str, value: KeyMaterial) -> None:
        hook = self.hooks.get("capture")
        if hook is not None:
            hook(session_id, name, value)

    def _role(self, session_id: str, *roles: Role) -> RoleAssignment:
        with self._lock:
            assignment = self.roles.get(session_id)
        if assignment is None or (roles and assignment.role not in roles):
            raise UnknownSession(f"{self.node_id}: no {'/'.join(r.value for r in roles) or 'role'} for session {session_id}")
        return assignment

    def _scratchpad(self, session_id: str) -> _Scratch:
        with self._lock:
            return self._scratch.setdefault(session_id, _Scratch())

    def _store_key(self, assignment: RoleAssignment, key: KeyMaterial, kms_key_id: str | None = None) -> SessionKeyRecord:
        record = SessionKeyRecord(assignment.session_id, assignment.policy.key_id, key, assignment.level,
                                  kms_key_id=kms_key_id)
        with self._lock:
            self.keys[record.key_id] = record
            scratch = self._scratch.pop(assignment.session_id, None)
        if scratch is not None:
            scratch.wipe()
        self._capture(assignment.session_id, "session_key", key)
        return record

    def _discard(self, session_id: str) -> None:
        with self._lock:
            self.roles.pop(session_id, None)
            scratch = self._scratch.pop(session_id, None)
            for key_id in [k for k, r in self.keys.items() if r.session_id == session_id]:
                del self.keys[key_id]
        if scratch is not None:
            scratch.wipe()

    # ------------------------------------------------------------ roles

    def install_role(self, assignment: RoleAssignment) -> dict[str, Any]:
        if assignment.role is Role.RECEIVER and self.kind is not NodeKind.CN:
            raise RoleKindMismatch(f"RECEIVER must run on a classical node, {self.node_id} is {self.kind.value}")
        if assignment.role in _QN_ONLY:
            if self.kind is not NodeKind.QN:
                raise RoleKindMismatch(f"{assignment.role.value} needs a QKD node, {self.node_id} is {self.kind.value}")
            self._kms("health", {})
        with self._lock:
            if assignment.session_id in self.roles:
                raise DuplicateSession(f"{self.node_id}: session {assignment.session_id} already has a role")
            self.roles[assignment.session_id] = assignment
        return {"ack": True, "node_id": self.node_id, "role": assignment.role.value, "session_id": assignment.session_id}

    # ------------------------------------------------------------ application API

    def app_get_key(self, initiator_app: str, target_app: str, size_bits: int = cc.DEFAULT_KEY_BITS) -> tuple[str, KeyMaterial]:
        """Initiator request: runs the whole establishment and returns ``(key_id, key)``.

        Phase timings (ms) of the call are left in ``last_timings``.
        """
        if initiator_app not in self.hosted_apps:
            raise UnknownApplication(f"{initiator_app} is not hosted on {self.node_id}")
        t0 = time.perf_counter()
        session_id, key_id = self._new_id(), self._new_id()
        level = SecurityLevel.parse(
            self._controller("security_level_request", {"src_app": initiator_app, "dst_app": target_app})["level"]
        )
        t1 = time.perf_counter()
        self._controller(
            "configuration_request",
            {"session_id": session_id, "key_id": key_id, "src_app": initiator_app, "dst_app": target_app,
             "level": level.name, "size": size_bits},
        )
        t2 = time.perf_counter()
        try:
            assignment = self._role(session_id)
            record = self._run(assignment)
            self._controller("session_update", {"session_id": session_id, "kms_key_id": record.kms_key_id})
        except QsafeError as exc:
            self._abort(session_id)
            if isinstance(exc, ControllerUnreachable):
                raise
            raise DerivationFailed(f"{level.name} derivation failed: {exc}", level=level.name,
                                   cause=type(exc).__name__) from exc
        t3 = time.perf_counter()
        with self._lock:
            record = self.keys.pop(key_id)
            self.roles.pop(session_id, None)
        record.delivered = True
        t4 = time.perf_counter()
        self.last_timings = _timings(level, t0, t1, t2, t3, t4)
        return record.key_id, record.key

    def app_get_key_with_id(self, target_app: str, key_id: str) -> KeyMaterial:
        if target_app not in self.hosted_apps:
            raise UnknownApplication(f"{target_app} is not hosted on {self.node_id}")
        t0 = time.perf_counter()
        info = self._controller("session_lookup", {"target_app": target_app, "key_id": key_id})
        level = SecurityLevel.parse(info["level"])
        session_id = info["session_id"]
        t1 = time.perf_counter()
        if level is SecurityLevel.L1:
            ((_, key),) = self._kms_keys("dec_keys", {"caller": target_app, "key_IDs": [{"key_ID": info["kms_key_id"]}]})
        elif level is SecurityLevel.L2:
            ((_, key),) = self._kms_keys("dec_keys", {"caller": target_app, "key_IDs": [{"key_ID": key_id}]})
        else:
            with self._lock:
                record = self.keys.pop(key_id, None)
            if record is None:
                raise UnknownSession(f"{self.node_id}: no derived key {key_id}")
            key = record.key
        t2 = time.perf_counter()
        with self._lock:
            self.roles.pop(session_id, None)
        t3 = time.perf_counter()
        self.last_timings = _timings(level, t0, t1, t1, t2, t3)
        return key

    def _abort(self, session_id: str) -> None:
        with self._lock:
            assignment = self.roles.get(session_id)
        self._discard(session_id)
        try:
            self._controller("session_abort", {"session_id": session_id})
            return
        except QsafeError:
            log.warning("controller abort of %s failed; notifying peers directly", session_id)
        if assignment is not None:
            for block in assignment.policy.participants:
                if block.vkms_endpoint != self.service_id:
                    try:
                        self._send(block.vkms_endpoint, "session/abort", {"session_id": session_id})
                    except QsafeError:
                        pass

    def _run(self, assignment: RoleAssignment) -> SessionKeyRecord:
        runner = {
            SecurityLevel.L1: self.run_level1,
            SecurityLevel.L2: self.run_level2,
            SecurityLevel.L3: self.run_level3,
            SecurityLevel.L4: self.run_level4,
        }[assignment.level]
        return runner(assignment)

    # ------------------------------------------------------------ level 1 / 2

    def run_level1(self, assignment: RoleAssignment) -> SessionKeyRecord:
        block = assignment.block
        ((kid, key),) = self._kms_keys(
            "enc_keys",
            {"caller": block.app, "peer": block.peer_kms_id, "number": 1, "size": assignment.policy.out_len_bits},
        )
        return self._store_key(assignment, key, kms_key_id=kid)

    def run_level2(self, assignment: RoleAssignment) -> SessionKeyRecord:
        """Take a QKD key from the first-hop link and relay it along the installed path."""
        block = assignment.block
        policy = assignment.policy
        ((_, key),) = self._kms_keys(
            "enc_keys", {"caller": block.app, "peer": block.peer_kms_id, "number": 1, "size": policy.out_len_bits}
        )
        self._kms(
            "relay_forward",
            {"session_id": policy.session_id, "key_id": policy.key_id, "payload_b64": key.b64(), "pad_key_id": None},
        )
        return self._store_key(assignment, key)

    # ------------------------------------------------------------ level 3

    def run_level3(self, assignment: RoleAssignment) -> SessionKeyRecord:
        """Drive the hybrid procedure from whichever endpoint (receiver or passive) initiated."""
        peers = assignment.block.peers
        sid = assignment.session_id
        passive, receiver = peers["passive"], peers["receiver"]
        pk = self._send(passive, "session/l3/passive_keygen", {"session_id": sid})
        enc = self._send(receiver, "session/l3/receiver_encapsulate", {"session_id": sid, **pk})
        self._send(passive, "session/l3/passive_decapsulate", {"session_id": sid, **enc})
        with self._lock:
            record = self.keys.get(assignment.policy.key_id)
        if record is None:
            raise KeyConfirmationFailed(f"{self.node_id}: no session key after level-3 exchange")
        return record

    def _l3_pad(self, assignment: RoleAssignment, aux: KeyMaterial, length_bits: int) -> KeyMaterial:
        if aux.length_bits == length_bits:
            return aux
        if not assignment.policy.pad_expansion:
            raise OtpLengthMismatch(f"auxiliary secret is {aux.length_bits} bits, QKD key is {length_bits} bits")
        # expanded pad: computational, not information-theoretic
        return cc.kdf_combine([SecretInput("aux", aux)], assignment.context("pad-expand", length_bits))

    def _l3_aead_key(self, assignment: RoleAssignment, aux: KeyMaterial) -> bytes:
        return cc.kdf_combine([SecretInput("aux", aux)], assignment.context("relay-aead", 256)).data

    def _l3_session_key(self, assignment: RoleAssignment, kem1: KeyMaterial, qkd: KeyMaterial) -> KeyMaterial:
        sources = {"kem1": kem1, "qkd": qkd}
        inputs = [SecretInput(label, sources[label]) for label in assignment.block.kdf_recipe]
        return cc.kdf_combine(inputs, assignment.context())

    def _h_l3_passive_keygen(self, body: Body) -> Body:
        a = self._role(body["session_id"], Role.PASSIVE)
        pk, sk = cc.kem_keygen(a.block.kem_suites[0], self.randbytes)
        self._scratchpad(a.session_id).secret_keys.append(sk)
        return {"kem_public_key": _b64(pk)}

    def _h_l3_receiver_encapsulate(self, body: Body) -> Body:
        a = self._role(body["session_id"], Role.RECEIVER)
        suite = a.block.kem_suites[0]
        try:
            ct, kem1 = cc.kem_encapsulate(suite, _unb64(body["kem_public_key"]), self.randbytes)
        except _KEM_ERRORS as exc:
            raise KemFailure(f"receiver encapsulation: {exc}") from exc
        receiver_pk, receiver_sk = cc.kem_keygen(suite, self.randbytes)
        scratch = self._scratchpad(a.session_id)
        scratch.kem1 = kem1
        scratch.receiver_sk = receiver_sk
        self._capture(a.session_id, "kem1", kem1)
        return {"kem_ciphertext": _b64(ct), "receiver_public_key": _b64(receiver_pk)}

    def _h_l3_passive_decapsulate(self, body: Body) -> Body:
        a = self._role(body["session_id"], Role.PASSIVE)
        scratch = self._scratchpad(a.session_id)
        if not scratch.secret_keys:
            raise UnknownSession(f"{self.node_id}: no KEM key pair for session {a.session_id}")
        sk = scratch.secret_keys.pop()
        try:
            kem1 = cc.kem_decapsulate(a.block.kem_suites[0], sk, _unb64(body["kem_ciphertext"]))
        except _KEM_ERRORS as exc:
            raise KemFailure(f"passive decapsulation: {exc}") from exc
        finally:
            cc.zeroize(sk)
        ((kid, qkd),) = self._kms_keys("enc_keys", {"caller": a.block.app, "peer": a.block.peer_kms_id, "number": 1})
        self._capture(a.session_id, "qkd", qkd)
        reply = self._send(
            a.block.peers["relay"],
            "session/l3/relay_forward",
            {"session_id": a.session_id, "key_id": kid, "receiver_public_key": body["receiver_public_key"]},
        )
        key = self._l3_session_key(a, kem1, qkd)
        tag = cc.key_confirmation_tag(key, a.session_id)
        if reply.get("confirm_tag") != tag:
            raise KeyConfirmationFailed(f"{self.node_id}: receiver derived a different session key")
        self._store_key(a, key)
        return {"confirm_tag": tag}

    def _h_l3_relay_forward(self, body: Body) -> Body:
        a = self._role(body["session_id"], Role.RELAY)
        ((kid, qkd),) = self._kms_keys("dec_keys", {"caller": self.service_id, "key_IDs": [{"key_ID": body["key_id"]}]})
        try:
            ct, aux = cc.kem_encapsulate(a.block.kem_suites[0], _unb64(body["receiver_public_key"]), self.randbytes)
        except _KEM_ERRORS as exc:
            raise KemFailure(f"relay encapsulation: {exc}") from exc
        masked = cc.otp_transform(qkd, self._l3_pad(a, aux, qkd.length_bits))
        nonce = self.randbytes(12)
        aad = f"{a.session_id}|{kid}".encode()
        sealed = nonce + AESGCM(self._l3_aead_key(a, aux)).encrypt(nonce, masked.data, aad)
        reply = self._send(
            a.block.peers["receiver"],
            "session/l3/receiver_payload",
            {"session_id": a.session_id, "key_id": kid, "ciphertext_b64": _b64(ct), "encrypted_key_b64": _b64(sealed)},
        )
        with self._lock:
            self.roles.pop(a.session_id, None)
        return {"confirm_tag": reply.get("confirm_tag")}

    def _h_l3_receiver_payload(self, body: Body) -> Body:
        a = self._role(body["session_id"], Role.RECEIVER)
        scratch = self._scratchpad(a.session_id)
        if scratch.receiver_sk is None or scratch.kem1 is None:
            raise UnknownSession(f"{self.node_id}: relayed payload before KEM exchange in {a.session_id}")
        try:
            aux = cc.kem_decapsulate(a.block.kem_suites[0], scratch.receiver_sk, _unb64(body["ciphertext_b64"]))
        except _KEM_ERRORS as exc:
            raise KemFailure(f"receiver decapsulation: {exc}") from exc
        finally:
            cc.zeroize(scratch.receiver_sk)
            scratch.receiver_sk = None
        sealed = _unb64(body["encrypted_key_b64"])
        aad = f"{a.session_id}|{body['key_id']}".encode()
        try:
            masked = KeyMaterial(AESGCM(self._l3_aead_key(a, aux)).decrypt(sealed[:12], sealed[12:], aad))
        except (InvalidTag, ValueError):
            raise IntegrityError(f"{self.node_id}: relayed key failed authentication") from None
        qkd = cc.otp_transform(masked, self._l3_pad(a, aux, masked.length_bits))
        fault = self.hooks.get("l3.recovered_qkd")
        if fault is not None:
            qkd = fault(qkd)
        self._capture(a.session_id, "qkd_recovered", qkd)
        key = self._l3_session_key(a, scratch.kem1, qkd)
        self._store_key(a, key)
        return {"confirm_tag": cc.key_confirmation_tag(key, a.session_id)}

    # ------------------------------------------------------------ level 4

    def run_level4(self, assignment: RoleAssignment) -> SessionKeyRecord:
        sid = assignment.session_id
        suites = assignment.block.kem_suites
        reply = self._send(assignment.block.peers["peer"], "session/l4/keygen", {"session_id": sid})
        secrets: list[KeyMaterial] = []
        cts: list[str] = []
        try:
            for suite, pk in zip(suites, reply["kem_public_keys"], strict=True):
                ct, ss = cc.kem_encapsulate(suite, _unb64(pk), self.randbytes)
                secrets.append(ss)
                cts.append(_b64(ct))
        except _KEM_ERRORS as exc:
            raise KemFailure(f"encapsulation: {exc}") from exc
        for i, ss in enumerate(secrets, 1):
            self._capture(sid, f"kem{i}", ss)
        key = self._l4_session_key(assignment, secrets)
        peer = self._send(assignment.block.peers["peer"], "session/l4/decapsulate",
                          {"session_id": sid, "kem_ciphertexts": cts})
        if peer.get("confirm_tag") != cc.key_confirmation_tag(key, sid):
            raise KeyConfirmationFailed(f"{self.node_id}: peer derived a different session key")
        return self._store_key(assignment, key)

    def _l4_session_key(self, assignment: RoleAssignment, secrets: list[KeyMaterial]) -> KeyMaterial:
        recipe = assignment.block.kdf_recipe
        if len(recipe) != len(secrets):
            raise KemFailure(f"policy recipe {list(recipe)} does not match {len(secrets)} KEM secrets")
        return cc.kdf_combine([SecretInput(label, ss) for label, ss in zip(recipe, secrets)], assignment.context())

    def _h_l4_keygen(self, body: Body) -> Body:
        a = self._role(body["session_id"], Role.ENDPOINT)
        scratch = self._scratchpad(a.session_id)
        pks = []
        for suite in a.block.kem_suites:
            pk, sk = cc.kem_keygen(suite, self.randbytes)
            scratch.secret_keys.append(sk)
            pks.append(_b64(pk))
        return {"kem_public_keys": pks}

    def _h_l4_decapsulate(self, body: Body) -> Body:
        a = self._role(body["session_id"], Role.ENDPOINT)
        scratch = self._scratchpad(a.session_id)
        cts = body["kem_ciphertexts"]
        if len(cts) != len(scratch.secret_keys):
            raise KemFailure(f"expected {len(scratch.secret_keys)} ciphertexts, got {len(cts)}")
        try:
            secrets = [cc.kem_decapsulate(suite, sk, _unb64(ct))
                       for suite, sk, ct in zip(a.block.kem_suites, scratch.secret_keys, cts)]
        except _KEM_ERRORS as exc:
            scratch.wipe()
            raise KemFailure(f"decapsulation: {exc}") from exc
        key = self._l4_session_key(a, secrets)
        self._store_key(a, key)
        with self._lock:
            self.roles.pop(a.session_id, None)
        return {"confirm_tag": cc.key_confirmation_tag(key, a.session_id)}

    # ------------------------------------------------------------ wire handlers

    def _h_enc_keys(self, body: Body) -> Body:
        key_id, key = self.app_get_key(body["master_app"], body["slave_app"], int(body.get("size", cc.DEFAULT_KEY_BITS)))
        return {"keys": [{"key_ID": key_id, "key": key.b64()}], "timings": self.last_timings}

    def _h_dec_keys(self, body: Body) -> Body:
        out = []
        for entry in body["key_IDs"]:
            key_id = entry["key_ID"] if isinstance(entry, dict) else entry
            out.append({"key_ID": key_id, "key": self.app_get_key_with_id(body["slave_app"], key_id).b64()})
        return {"keys": out, "timings": self.last_timings}

    def _h_install_role(self, body: Body) -> Body:
        policy = SessionPolicy.from_dict(body["policy"])
        block = policy.block_for(body.get("node_id", self.node_id))
        return self.install_role(RoleAssignment(policy.session_id, block.role, policy, block))

    def _h_uninstall_role(self, body: Body) -> Body:
        self._discard(body["session_id"])
        return {"ack": True}


def _timings(level: SecurityLevel, t0: float, t1: float, t2: float, t3: float, t4: float) -> dict[str, Any]:
    ms = 1000.0
    return {
        "level": level.name,
        "t_assignment": (t1 - t0) * ms,
        "t_configuration": (t2 - t1) * ms,
        "t_derivation": (t3 - t2) * ms,
        "t_delivery": (t4 - t3) * ms,
        "t_e2e": (t4 - t0) * ms,
    }
