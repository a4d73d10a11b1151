"""Two-party block coordinate descent over an authenticated channel.

Each party holds its own feature block and the shared target.  Only
length-N prediction vectors, convergence deltas, and a few control fields
cross the wire.

Session outline::

    initiator                                responder
    HELLO  ---------------------------------->
           <---------------------------------- HELLO_ACK
    PREDICTION(1)  -------------------------->
           <---------------------------------- PREDICTION(1)
    ...       (until both deltas < tolerance or an iteration cap)
    CONVERGED_FLAG ------------------------->
    PREDICTION (probe) <--------------------> PREDICTION (probe)   x floor
    DONE   ---------------------------------->
           <---------------------------------- DONE

After the descent has converged each party sends ``floor`` probe rounds:
predictions made with its converged coefficients plus a private random
perturbation.  They do not change anyone's estimates, but they make the
received predictions span the partner's column space, which standard-error
recovery needs.  The floor is the maximum of both parties' requests
(by default ``P_local + 5``), so it discloses an upper bound on ``P_local``.
"""
from __future__ import annotations

import enum
import hashlib
import logging
import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import exceptions as exc
from .attack import add_prediction_noise
from .glm import (
    BlockSolver,
    ConvergenceWarning,
    DesignBlock,
    FamilySpec,
    GAUSSIAN,
    TargetVector,
    block_update,
    get_family,
    update_working_set,
)
from .standard_errors import IterationTrace, recover_standard_errors
from .transport import INITIATOR, RESPONDER, Channel

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_FLOOR_MARGIN = 5

HEADER = struct.Struct("<BII")
HELLO = struct.Struct("<HBQdI32s")


class MessageKind(enum.IntEnum):
    HELLO = 1
    HELLO_ACK = 2
    PREDICTION = 3
    CONVERGED_FLAG = 4
    DONE = 5
    ABORT = 6


class PartyRole(str, enum.Enum):
    INITIATOR = INITIATOR
    RESPONDER = RESPONDER


@dataclass(frozen=True)
class SessionConfig:
    """Per-party session settings.

    ``min_iterations`` is the number of probe rounds this party requests
    (``None`` means ``P_local + 5``; ``0`` disables probes and with them
    standard-error recovery).  ``seed`` fixes the private randomness used
    for probes and prediction noise; leave it ``None`` in deployments.
    """

    family: FamilySpec = GAUSSIAN
    tolerance: float = 1e-8
    max_iterations: int = 10_000
    min_iterations: Optional[int] = None
    psk: bytes = b"\0" * 32
    noise_sd: float = 0.0
    session_id: Optional[bytes] = None
    seed: Optional[int] = None
    protocol_version: int = PROTOCOL_VERSION
    compute_standard_errors: bool = True

    def __post_init__(self):
        object.__setattr__(self, "family", get_family(self.family))
        if len(self.psk) != 32:
            raise ValueError("psk must be exactly 32 bytes")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.min_iterations is not None and self.min_iterations < 0:
            raise ValueError("min_iterations must be >= 0")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")


@dataclass(frozen=True)
class ProtocolMessage:
    kind: MessageKind
    iteration: int
    payload: object = None

    def encode(self) -> bytes:
        body = _encode_payload(self.kind, self.payload)
        return HEADER.pack(int(self.kind), self.iteration, len(body)) + body

    @classmethod
    def decode(cls, data: bytes, n=None) -> "ProtocolMessage":
        if len(data) < HEADER.size:
            raise exc.DecodeFailure("message shorter than header")
        kind, iteration, length = HEADER.unpack_from(data)
        body = data[HEADER.size:]
        if len(body) != length:
            raise exc.DecodeFailure("payload length does not match header")
        try:
            kind = MessageKind(kind)
        except ValueError:
            raise exc.DecodeFailure(f"unknown message kind {kind}") from None
        return cls(kind, iteration, _decode_payload(kind, body, n))


@dataclass(frozen=True)
class Hello:
    version: int
    family_tag: int
    n: int
    tolerance: float
    min_iterations: int
    digest: bytes


def _encode_payload(kind, payload) -> bytes:
    if kind in (MessageKind.HELLO, MessageKind.HELLO_ACK):
        p = payload
        return HELLO.pack(p.version, p.family_tag, p.n, p.tolerance, p.min_iterations, p.digest)
    if kind == MessageKind.PREDICTION:
        values, delta = payload
        return np.asarray(values, dtype="<f8").tobytes() + struct.pack("<d", delta)
    if kind == MessageKind.CONVERGED_FLAG:
        return struct.pack("<B", int(bool(payload)))
    if kind == MessageKind.ABORT:
        return str(payload or "").encode("utf-8")
    return b""


def _decode_payload(kind, body, n):
    if kind in (MessageKind.HELLO, MessageKind.HELLO_ACK):
        if len(body) != HELLO.size:
            raise exc.DecodeFailure("malformed HELLO payload")
        return Hello(*HELLO.unpack(body))
    if kind == MessageKind.PREDICTION:
        if len(body) % 8 or len(body) < 16:
            raise exc.DecodeFailure("malformed PREDICTION payload")
        arr = np.frombuffer(body, dtype="<f8")
        if n is not None and arr.size - 1 != n:
            raise exc.DecodeFailure(f"prediction of length {arr.size - 1}, expected {n}")
        return arr[:-1].astype(float), float(arr[-1])
    if kind == MessageKind.CONVERGED_FLAG:
        if len(body) != 1:
            raise exc.DecodeFailure("malformed CONVERGED_FLAG payload")
        return bool(body[0])
    if kind == MessageKind.ABORT:
        return body.decode("utf-8", errors="replace")
    if body:
        raise exc.DecodeFailure(f"{kind.name} carries no payload")
    return None


def target_digest(y: TargetVector) -> bytes:
    """SHA-256 over a canonical encoding of the (ordered) target."""
    h = hashlib.sha256(b"vertiglm-target/v1")
    h.update(y.family_tag.encode())
    h.update(struct.pack("<Q", len(y)))
    h.update(np.asarray(y.values, dtype="<f8").tobytes())
    return h.digest()


@dataclass(frozen=True)
class Agreement:
    n: int
    family: FamilySpec
    tolerance: float
    floor: int
    version: int


@dataclass
class FitResult:
    local_coefficients: np.ndarray
    local_standard_errors: np.ndarray
    iterations_used: int
    converged: bool
    final_partner_prediction: np.ndarray
    column_names: tuple = ()
    final_own_prediction: Optional[np.ndarray] = None
    delta_history: list = field(default_factory=list)
    probe_rounds: int = 0
    sigma2: float = float("nan")
    partner_rank: int = 0

    @property
    def final_eta(self) -> np.ndarray:
        return self.final_own_prediction + self.final_partner_prediction

    def active_iterations(self, tolerance) -> int:
        """Rounds in which either party's coefficients moved by >= tolerance."""
        return sum(1 for a, b in self.delta_history if max(a, b) >= tolerance)


class _Wire:
    """Message-level view of a channel with ordering and abort handling."""

    def __init__(self, channel: Channel):
        self.channel = channel
        self.n = None
        self.seq_out = 0
        self.seq_in = -1

    def send(self, kind, payload=None):
        msg = ProtocolMessage(kind, self.seq_out, payload)
        self.seq_out += 1
        self.channel.send(msg.encode())

    def receive(self, *kinds):
        msg = ProtocolMessage.decode(self.channel.receive(), self.n)
        if msg.kind == MessageKind.ABORT:
            raise _abort_error(msg.payload)
        if msg.iteration <= self.seq_in:
            raise exc.ProtocolError("message iteration numbers must increase")
        self.seq_in = msg.iteration
        if kinds and msg.kind not in kinds:
            raise exc.ProtocolError(
                f"expected {'/'.join(k.name for k in kinds)}, got {msg.kind.name}")
        return msg

    def abort(self, reason):
        try:
            self.send(MessageKind.ABORT, reason)
        except exc.VertiGLMError:
            pass


_HANDSHAKE_ERRORS = {e.__name__: e for e in (
    exc.DigestMismatch, exc.VersionMismatch, exc.ConfigMismatch, exc.AuthFailure)}


def _abort_error(reason: str):
    name, _, text = (reason or "").partition(": ")
    cls = _HANDSHAKE_ERRORS.get(name, exc.PeerAbort)
    err = cls(f"peer aborted: {text if cls is not exc.PeerAbort else reason}")
    err.from_peer = True
    return err


def _fail(wire, err):
    # tell the peer why, unless it told us or the channel is gone; an
    # authentication failure still gets a reply, which the peer cannot
    # authenticate either
    quiet = getattr(err, "from_peer", False) or (
        isinstance(err, exc.TransportFailure) and not isinstance(err, exc.AuthFailure))
    if not quiet:
        wire.abort(f"{type(err).__name__}: {err}")
    wire.channel.close()


def _hello(cfg, n, digest, floor):
    return Hello(cfg.protocol_version, cfg.family.tag, n, cfg.tolerance, floor, digest)


def _check_hello(mine: Hello, theirs: Hello):
    if theirs.version != mine.version:
        raise exc.VersionMismatch(f"protocol version {theirs.version} != {mine.version}")
    if theirs.family_tag != mine.family_tag:
        raise exc.ConfigMismatch(
            f"family {get_family(theirs.family_tag).family} != {get_family(mine.family_tag).family}")
    if theirs.n != mine.n:
        raise exc.ConfigMismatch(f"row count {theirs.n} != {mine.n}")
    if theirs.digest != mine.digest:
        raise exc.DigestMismatch("target digests differ: targets are not identical or not in the same order")


def handshake(cfg: SessionConfig, channel, role, y: TargetVector, requested_floor: int = 0,
              _wire=None) -> Agreement:
    """Agree on N, family, tolerance, probe floor and protocol version.

    The target digest confirms both parties hold the same, identically
    ordered target.  The initiator's tolerance is used by both sides.
    """
    wire = _wire or _Wire(channel)
    role = PartyRole(role)
    mine = _hello(cfg, len(y), target_digest(y), requested_floor)
    try:
        if role == PartyRole.INITIATOR:
            wire.send(MessageKind.HELLO, mine)
            theirs = wire.receive(MessageKind.HELLO_ACK).payload
            _check_hello(mine, theirs)
            tolerance = mine.tolerance
        else:
            theirs = wire.receive(MessageKind.HELLO).payload
            _check_hello(mine, theirs)
            wire.send(MessageKind.HELLO_ACK, mine)
            tolerance = theirs.tolerance
    except exc.VertiGLMError as err:
        _fail(wire, err)
        raise
    wire.n = len(y)
    return Agreement(len(y), cfg.family, tolerance,
                     max(mine.min_iterations, theirs.min_iterations), mine.version)


class _Party:
    def __init__(self, block, y, cfg, role, channel):
        self.block = block
        self.y = y
        self.cfg = cfg
        self.role = PartyRole(role)
        self.channel = channel
        self.wire = _Wire(channel)
        self.fam = cfg.family
        self.solver = BlockSolver(block, label=self.role.value)
        seed = cfg.seed
        seq = np.random.SeedSequence(seed)
        noise_seq, probe_seq = seq.spawn(2)
        self.noise_rng = np.random.default_rng(noise_seq)
        self.probe_rng = np.random.default_rng(probe_seq)
        n, p = block.n_rows, block.n_cols
        self.beta = np.zeros(p)
        self.own_pred = np.zeros(n)
        self.partner_pred = np.zeros(n)
        self.last_sent = np.zeros(n)
        self.sent, self.inputs, self.received, self.coefs = [], [], [], []
        self.deltas = []

    # -- helpers ---------------------------------------------------------
    def _partner_input(self):
        """Working residual the partner regresses after our latest send."""
        if self.fam.is_gaussian:
            return self.y.values - self.last_sent
        ws = update_working_set(self.fam, self.y, self.partner_pred + self.last_sent)
        return ws.working_response - self.last_sent

    def _send_prediction(self, values, delta):
        if self.cfg.noise_sd > 0:
            values = add_prediction_noise(values, self.cfg.noise_sd, self.noise_rng)
        self.last_sent = values
        self.sent.append(values)
        self.coefs.append(self.beta.copy())
        self.wire.send(MessageKind.PREDICTION, (values, delta))

    def _update(self):
        new, _ = block_update(self.solver, self.fam, self.y, self.partner_pred, self.own_pred)
        delta = float(np.max(np.abs(new - self.beta)))
        self.beta = new
        self.own_pred = self.block.values @ new
        return delta

    def _receive_prediction(self):
        msg = self.wire.receive(MessageKind.PREDICTION)
        values, delta = msg.payload
        if not np.all(np.isfinite(values)):
            raise exc.ProtocolError("received non-finite prediction")
        return values, delta

    # -- phases ----------------------------------------------------------
    def descend(self, agreement):
        tol = agreement.tolerance
        cap = self.cfg.max_iterations
        r = 0
        converged = False
        if self.role == PartyRole.INITIATOR:
            while True:
                r += 1
                d_self = self._update()
                self._send_prediction(self.own_pred, d_self)
                pending_input = self._partner_input()
                msg = self.wire.receive(MessageKind.PREDICTION, MessageKind.CONVERGED_FLAG)
                if msg.kind == MessageKind.CONVERGED_FLAG:
                    # responder hit its iteration cap before answering round r
                    self.sent.pop()
                    self.coefs.pop()
                    r -= 1
                    break
                values, d_partner = msg.payload
                self.inputs.append(pending_input)
                self.received.append(values)
                self.partner_pred = values
                self.deltas.append((d_self, d_partner))
                converged = d_self < tol and d_partner < tol
                if converged or r >= cap:
                    self.wire.send(MessageKind.CONVERGED_FLAG, converged)
                    break
        else:
            while True:
                msg = self.wire.receive(MessageKind.PREDICTION, MessageKind.CONVERGED_FLAG)
                if msg.kind == MessageKind.CONVERGED_FLAG:
                    if msg.payload != converged:
                        raise exc.ProtocolError("peer's convergence flag disagrees with the local view")
                    break
                if r >= cap:
                    self.wire.send(MessageKind.CONVERGED_FLAG, False)
                    break
                r += 1
                values, d_partner = msg.payload
                if not np.all(np.isfinite(values)):
                    raise exc.ProtocolError("received non-finite prediction")
                self.inputs.append(self._partner_input())
                self.received.append(values)
                self.partner_pred = values
                d_self = self._update()
                self._send_prediction(self.own_pred, d_self)
                self.deltas.append((d_partner, d_self))
                converged = d_self < tol and d_partner < tol
        return r, converged

    def probe(self, rounds):
        if rounds <= 0:
            return
        p = self.block.n_cols
        mixing = self.probe_rng.standard_normal((p, p))
        scale = max(1.0, float(np.max(np.abs(self.beta))))
        first = self.role == PartyRole.INITIATOR
        for _ in range(rounds):
            if first:
                self._send_probe(mixing, scale)
            pending_input = self._partner_input()
            values, _ = self._receive_prediction()
            self.inputs.append(pending_input)
            self.received.append(values)
            if not first:
                self._send_probe(mixing, scale)

    def _send_probe(self, mixing, scale):
        g = scale * (mixing @ self.probe_rng.standard_normal(mixing.shape[0]))
        values = self.block.values @ (self.beta + g)
        if self.cfg.noise_sd > 0:
            values = add_prediction_noise(values, self.cfg.noise_sd, self.noise_rng)
        self.sent.append(values)
        self.coefs.append(self.beta + g)
        self.wire.send(MessageKind.PREDICTION, (values, 0.0))

    def finish(self):
        if self.role == PartyRole.INITIATOR:
            self.wire.send(MessageKind.DONE)
            self.wire.receive(MessageKind.DONE)
        else:
            self.wire.receive(MessageKind.DONE)
            self.wire.send(MessageKind.DONE)
        self.channel.close()


def default_floor(block: DesignBlock) -> int:
    return block.n_cols + DEFAULT_FLOOR_MARGIN


def run_party(block: DesignBlock, y: TargetVector, cfg: SessionConfig, role, channel: Channel):
    """Run one party of a session to completion.

    Returns ``(FitResult, IterationTrace)``.  A session that hits its
    iteration cap still returns, with ``converged=False``.
    """
    if block.n_rows != len(y):
        raise exc.ShapeMismatch(f"block has {block.n_rows} rows, target has {len(y)}")
    if y.family_tag != cfg.family.family:
        raise exc.ConfigMismatch("target family differs from session family")
    requested = default_floor(block) if cfg.min_iterations is None else cfg.min_iterations
    party = _Party(block, y, cfg, role, channel)
    agreement = handshake(cfg, channel, role, y, requested, _wire=party.wire)
    try:
        iterations, converged = party.descend(agreement)
        final_own, final_partner = party.own_pred.copy(), party.partner_pred.copy()
        party.probe(agreement.floor)
        party.finish()
    except exc.VertiGLMError as err:
        _fail(party.wire, err)
        raise

    if not converged:
        warnings.warn(f"session stopped after {iterations} iterations without converging",
                      ConvergenceWarning)
    eta = final_own + final_partner
    n = block.n_rows
    trace = IterationTrace(
        sent_predictions=_stack(party.sent, n),
        received_residual_inputs=_stack(party.inputs, n),
        received_predictions=_stack(party.received, n),
        weights_final=update_working_set(cfg.family, y, eta).weights,
        descent_rounds=iterations,
        own_coefficients=np.column_stack(party.coefs) if party.coefs else np.zeros((block.n_cols, 0)),
    )
    result = FitResult(
        local_coefficients=party.beta.copy(),
        local_standard_errors=np.full(block.n_cols, np.nan),
        iterations_used=iterations,
        converged=converged,
        final_partner_prediction=final_partner,
        column_names=block.column_names,
        final_own_prediction=final_own,
        delta_history=party.deltas,
        probe_rounds=agreement.floor,
    )
    if cfg.compute_standard_errors:
        try:
            se, sigma2, sub = recover_standard_errors(block, trace, y, eta, cfg.family)
            result.local_standard_errors = se
            result.sigma2 = sigma2
            result.partner_rank = sub.estimated_partner_rank
        except (exc.RankAmbiguous, exc.RankDeficientTrace, exc.DfExhausted) as err:
            logger.warning("standard errors unavailable: %s", err)
    return result, trace


def _stack(cols, n):
    return np.column_stack(cols) if cols else np.zeros((n, 0))


def predict_joint(local: FitResult, block: DesignBlock, new_partner_prediction, fam) -> np.ndarray:
    """Mean prediction from the local share plus the partner's share."""
    fam = get_family(fam)
    partner = np.asarray(new_partner_prediction, dtype=float)
    if partner.shape != (block.n_rows,):
        raise exc.ShapeMismatch(f"partner prediction has shape {partner.shape}, expected ({block.n_rows},)")
    eta = block.values @ local.local_coefficients + partner
    return fam.mean_fn(eta)


def with_overrides(cfg: SessionConfig, **kw) -> SessionConfig:
    return replace(cfg, **kw)
