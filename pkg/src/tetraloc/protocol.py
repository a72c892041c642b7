"""Relative-position-ping (RPP) transaction protocol.

A transaction is: message init (+ ack), message phase (the host message
split into 120-byte frames), ranging phase (poll / response / final) and
bearing phase (one frame received on all four antennas, then the bearing
computation). Any failure terminates the transaction.

Frame layout, big-endian::

    type:1 | transaction id:2 | sequence:2 | payload:0..120 | crc16:2

The state machine is a pure function ``rpp_step(state, event, now, rng, cfg)``
returning the new state and a list of actions for the simulator to carry out.
"""

from __future__ import annotations

import binascii
import struct
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from typing import Any, NamedTuple, Optional, Sequence

import numpy as np

from .errors import CrcError, InvalidParameterError, MessageTooLongError, MissingFrameError

MAX_PAYLOAD = 120
HEADER = struct.Struct(">BHH")
CRC_SIZE = 2
MAX_FRAME = HEADER.size + MAX_PAYLOAD + CRC_SIZE  # 127
MAX_MESSAGE = (1 << 16) * MAX_PAYLOAD
INIT_PAYLOAD = struct.Struct(">HHH")  # source, destination, frame count


def crc16(data: bytes) -> int:
    "CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection, no xorout)."
    return binascii.crc_hqx(bytes(data), 0xFFFF)


class FrameType(IntEnum):
    INIT = 1
    INIT_ACK = 2
    DATA = 3
    POLL = 4
    RESP = 5
    FINAL = 6
    BEARING = 7


@dataclass(frozen=True)
class Frame:
    frame_type: int
    transaction_id: int
    sequence: int
    payload: bytes = b""
    crc: Optional[int] = None

    def __post_init__(self):
        if len(self.payload) > MAX_PAYLOAD:
            raise InvalidParameterError(f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}")
        if not (0 <= self.transaction_id < 1 << 16 and 0 <= self.sequence < 1 << 16):
            raise InvalidParameterError("transaction id and sequence are 16-bit")
        object.__setattr__(self, "payload", bytes(self.payload))
        if self.crc is None:
            object.__setattr__(self, "crc", crc16(self.header + self.payload))

    @property
    def header(self) -> bytes:
        return HEADER.pack(int(self.frame_type), self.transaction_id, self.sequence)

    @property
    def valid(self) -> bool:
        return self.crc == crc16(self.header + self.payload)

    def to_bytes(self) -> bytes:
        return self.header + self.payload + struct.pack(">H", self.crc)

    def hex(self) -> str:
        return self.to_bytes().hex()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Frame":
        "Parse a frame; raises CrcError when the checksum does not match."
        if len(data) < HEADER.size + CRC_SIZE or len(data) > MAX_FRAME:
            raise CrcError(f"bad frame length {len(data)}")
        (crc,) = struct.unpack(">H", data[-2:])
        if crc16(data[:-2]) != crc:
            raise CrcError("CRC mismatch")
        ftype, txid, seq = HEADER.unpack(data[: HEADER.size])
        return cls(ftype, txid, seq, data[HEADER.size : -2], crc)


def packetize(message: bytes, transaction_id: int = 0) -> list[Frame]:
    "Split ``message`` into DATA frames of at most 120 payload bytes."
    message = bytes(message)
    if len(message) > MAX_MESSAGE:
        raise MessageTooLongError(f"{len(message)} bytes exceeds {MAX_MESSAGE}")
    chunks = [message[k : k + MAX_PAYLOAD] for k in range(0, len(message), MAX_PAYLOAD)] or [b""]
    return [Frame(FrameType.DATA, transaction_id, seq, chunk) for seq, chunk in enumerate(chunks)]


def depacketize(frames: Sequence[Frame]) -> bytes:
    "Reassemble a message; frames must be CRC-valid, contiguous and of one transaction."
    if not frames:
        raise MissingFrameError("no frames")
    txid = frames[0].transaction_id
    out = []
    for expected, fr in enumerate(frames):
        if not fr.valid:
            raise CrcError(f"CRC mismatch in frame {fr.sequence}")
        if fr.transaction_id != txid:
            raise MissingFrameError("frames from different transactions")
        if fr.sequence != expected:
            raise MissingFrameError(f"expected sequence {expected}, got {fr.sequence}")
        out.append(fr.payload)
    return b"".join(out)


def frame_count(msg_len: int) -> int:
    return max(1, -(-msg_len // MAX_PAYLOAD))


@dataclass(frozen=True)
class NodeConfig:
    """Per-node protocol timing, in milliseconds.

    The five durations sum to the 46 ms minimal transaction: init+ack,
    one data frame, the three ranging frames, the bearing frame and the
    bearing computation. After a transaction ends, a node with queued
    messages waits ``turnaround`` plus a uniform draw from
    [0, contention_window] before sensing the channel again; the random
    part decides which contender goes next.
    """

    node_id: int = 0
    backoff_min: float = 5.0
    backoff_max: float = 25.0
    t_init: float = 4.0
    t_frame: float = 6.0
    t_ranging: float = 18.0
    t_bearing: float = 12.0
    t_compute: float = 6.0
    timeout: float = 30.0
    turnaround: float = 2.0
    contention_window: float = 4.0

    def __post_init__(self):
        if not 0 < self.backoff_min <= self.backoff_max:
            raise InvalidParameterError("need 0 < backoff_min <= backoff_max")
        for name in ("t_init", "t_frame", "t_ranging", "t_bearing", "t_compute", "timeout"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")
        if self.contention_window < 0 or self.turnaround < 0:
            raise InvalidParameterError("contention_window and turnaround must be >= 0")

    def airtime(self, frame_type: int) -> float:
        ft = FrameType(frame_type)
        if ft in (FrameType.INIT, FrameType.INIT_ACK):
            return self.t_init / 2
        if ft is FrameType.DATA:
            return self.t_frame
        if ft in (FrameType.POLL, FrameType.RESP, FrameType.FINAL):
            return self.t_ranging / 3
        return self.t_bearing


def rpp_duration(msg_len: int, cfg: NodeConfig = NodeConfig()) -> float:
    "Duration in ms of an uncontended transaction carrying ``msg_len`` bytes."
    if msg_len < 0:
        raise InvalidParameterError("msg_len must be >= 0")
    return cfg.t_init + frame_count(msg_len) * cfg.t_frame + cfg.t_ranging + cfg.t_bearing + cfg.t_compute


class Phase(str, Enum):
    IDLE = "idle"
    AWAIT_INIT_ACK = "await_init_ack"
    MESSAGE = "message"
    RANGING = "ranging"
    BEARING = "bearing"
    DONE = "done"
    FAILED = "failed"


class Role(str, Enum):
    INITIATOR = "initiator"
    RESPONDER = "responder"


class Failure(str, Enum):
    TIMEOUT = "timeout"
    CRC = "crc"
    INSUFFICIENT_ROWS = "insufficient_rows"
    RANK_DEFICIENT = "rank_deficient"
    BUSY = "busy"
    PROTOCOL = "protocol"
    RANGING = "ranging"


TERMINAL = (Phase.DONE, Phase.FAILED)


@dataclass(frozen=True)
class RppState:
    node_id: int = 0
    phase: Phase = Phase.IDLE
    role: Optional[Role] = None
    failure_cause: Optional[Failure] = None
    transaction_id: int = 0
    peer: Optional[int] = None
    addressed: bool = False
    outgoing: tuple[Frame, ...] = ()
    received: tuple[Frame, ...] = ()
    sent: int = 0
    n_frames: int = 0
    message: Optional[bytes] = None
    deadline: float = float("inf")
    history: tuple[Phase, ...] = ()

    @property
    def busy(self) -> bool:
        return self.phase is not Phase.IDLE


class EventKind(str, Enum):
    HOST_SEND = "host_send"
    FRAME_RX = "frame_rx"
    TX_DONE = "tx_done"
    TIMER = "timer"
    COMPUTE_DONE = "compute_done"
    RESET = "reset"


@dataclass(frozen=True)
class Event:
    kind: EventKind
    data: bytes = b""            # raw frame bytes for FRAME_RX, message for HOST_SEND
    dest: Optional[int] = None   # HOST_SEND destination
    frame_type: Optional[int] = None  # TX_DONE
    name: str = "timeout"        # TIMER: "timeout" or "settle"
    result: Any = None           # COMPUTE_DONE: estimate, None, or a Failure


class SendFrame(NamedTuple):
    frame: Frame


class SetTimer(NamedTuple):
    at: float
    name: str = "timeout"


class Backoff(NamedTuple):
    delay: float


class StartCompute(NamedTuple):
    peer: int
    addressed: bool


class Deliver(NamedTuple):
    message: bytes
    source: int
    estimate: Any


class Finished(NamedTuple):
    phase: Phase
    cause: Optional[Failure] = None


class CsmaDecision(NamedTuple):
    send_now: bool
    delay: float = 0.0


def csma_try_send(node: RppState, rng: np.random.Generator, cfg: NodeConfig = NodeConfig(),
                  channel_busy: bool = False) -> CsmaDecision:
    """Send immediately when the node is idle and no frame is on air,
    otherwise back off for a uniform random delay."""
    if node.phase is Phase.IDLE and not channel_busy:
        return CsmaDecision(True)
    return CsmaDecision(False, float(rng.uniform(cfg.backoff_min, cfg.backoff_max)))


def _enter(state: RppState, phase: Phase, now: float, cfg: NodeConfig, **changes) -> RppState:
    return replace(state, phase=phase, deadline=now + cfg.timeout, history=state.history + (phase,), **changes)


def _fail(state: RppState, cause: Failure) -> tuple[RppState, list]:
    new = replace(state, phase=Phase.FAILED, failure_cause=cause, history=state.history + (Phase.FAILED,))
    return new, [Finished(Phase.FAILED, cause)]


def _timer(state: RppState) -> SetTimer:
    return SetTimer(state.deadline)


def rpp_step(state: RppState, event: Event, now: float, rng: np.random.Generator,
             cfg: NodeConfig = NodeConfig()) -> tuple[RppState, list]:
    """Advance one node's transaction state machine by one event."""
    kind = event.kind
    if kind is EventKind.RESET:
        return RppState(node_id=state.node_id), []
    if state.phase in TERMINAL:
        return state, []
    if kind is EventKind.HOST_SEND:
        return _host_send(state, event, now, rng, cfg)
    if kind is EventKind.TIMER:
        if event.name == "settle" and state.phase is Phase.BEARING and state.role is Role.INITIATOR:
            new = replace(state, phase=Phase.DONE, history=state.history + (Phase.DONE,))
            return new, [Finished(Phase.DONE)]
        if event.name == "timeout" and state.busy and now >= state.deadline:
            return _fail(state, Failure.TIMEOUT)
        return state, []
    if state.phase is Phase.IDLE:
        if kind is EventKind.FRAME_RX:
            return _idle_rx(state, event, now, cfg)
        return _fail(state, Failure.PROTOCOL) if kind is EventKind.TX_DONE else (state, [])
    if kind is EventKind.FRAME_RX:
        try:
            frame = Frame.from_bytes(event.data)
        except CrcError:
            return _fail(state, Failure.CRC)
        if frame.transaction_id != state.transaction_id:
            return state, []  # another transaction; not ours to act on
        if state.role is Role.INITIATOR:
            return _initiator_rx(state, frame, now, cfg)
        return _responder_rx(state, frame, now, cfg)
    if kind is EventKind.TX_DONE:
        if state.role is Role.INITIATOR:
            return _initiator_tx_done(state, event.frame_type, now, cfg)
        if state.addressed and event.frame_type in (FrameType.INIT_ACK, FrameType.RESP):
            return state, []
        return _fail(state, Failure.PROTOCOL)
    if kind is EventKind.COMPUTE_DONE:
        if state.role is not Role.RESPONDER or state.phase is not Phase.BEARING:
            return _fail(state, Failure.PROTOCOL)
        if isinstance(event.result, Failure):
            return _fail(state, event.result)
        new = replace(state, phase=Phase.DONE, history=state.history + (Phase.DONE,))
        return new, [Deliver(state.message or b"", state.peer, event.result), Finished(Phase.DONE)]
    return _fail(state, Failure.PROTOCOL)


def _host_send(state, event, now, rng, cfg):
    decision = csma_try_send(state, rng, cfg)
    if not decision.send_now:
        return state, [Backoff(decision.delay)]
    txid = int(rng.integers(1 << 16))
    frames = tuple(packetize(event.data, txid))
    init = Frame(FrameType.INIT, txid, 0, INIT_PAYLOAD.pack(state.node_id, event.dest or 0, len(frames)))
    new = _enter(state, Phase.AWAIT_INIT_ACK, now, cfg, role=Role.INITIATOR, transaction_id=txid,
                 peer=event.dest, addressed=True, outgoing=frames, n_frames=len(frames),
                 message=bytes(event.data))
    return new, [SendFrame(init), _timer(new)]


def _idle_rx(state, event, now, cfg):
    try:
        frame = Frame.from_bytes(event.data)
    except CrcError:
        return state, []
    if frame.frame_type != FrameType.INIT or len(frame.payload) != INIT_PAYLOAD.size:
        return state, []
    src, dst, n = INIT_PAYLOAD.unpack(frame.payload)
    addressed = dst == state.node_id
    new = _enter(state, Phase.AWAIT_INIT_ACK, now, cfg, role=Role.RESPONDER,
                 transaction_id=frame.transaction_id, peer=src, addressed=addressed, n_frames=max(n, 1))
    actions = [SendFrame(Frame(FrameType.INIT_ACK, frame.transaction_id, 0))] if addressed else []
    return new, actions + [_timer(new)]


def _initiator_rx(state, frame, now, cfg):
    ft = frame.frame_type
    if state.phase is Phase.AWAIT_INIT_ACK and ft == FrameType.INIT_ACK:
        new = _enter(state, Phase.MESSAGE, now, cfg)
        return new, [SendFrame(state.outgoing[0]), _timer(new)]
    if state.phase is Phase.RANGING and ft == FrameType.RESP:
        new = replace(state, deadline=now + cfg.timeout)
        return new, [SendFrame(Frame(FrameType.FINAL, state.transaction_id, 0)), _timer(new)]
    return _fail(state, Failure.PROTOCOL)


def _initiator_tx_done(state, frame_type, now, cfg):
    if state.phase is Phase.AWAIT_INIT_ACK and frame_type == FrameType.INIT:
        return state, []
    if state.phase is Phase.MESSAGE and frame_type == FrameType.DATA:
        sent = state.sent + 1
        if sent < state.n_frames:
            new = replace(state, sent=sent, deadline=now + cfg.timeout)
            return new, [SendFrame(state.outgoing[sent]), _timer(new)]
        new = _enter(state, Phase.RANGING, now, cfg, sent=sent)
        return new, [SendFrame(Frame(FrameType.POLL, state.transaction_id, 0)), _timer(new)]
    if state.phase is Phase.RANGING and frame_type == FrameType.POLL:
        return state, []
    if state.phase is Phase.RANGING and frame_type == FrameType.FINAL:
        new = _enter(state, Phase.BEARING, now, cfg)
        return new, [SendFrame(Frame(FrameType.BEARING, state.transaction_id, 0)), _timer(new)]
    if state.phase is Phase.BEARING and frame_type == FrameType.BEARING:
        new = replace(state, deadline=now + cfg.timeout)
        return new, [SetTimer(now + cfg.t_compute, "settle"), _timer(new)]
    return _fail(state, Failure.PROTOCOL)


def _responder_rx(state, frame, now, cfg):
    ft = frame.frame_type
    if state.phase is Phase.AWAIT_INIT_ACK and ft == FrameType.INIT_ACK:
        return state, []  # listeners hear the addressed node's ack
    if state.phase in (Phase.AWAIT_INIT_ACK, Phase.MESSAGE) and ft == FrameType.DATA:
        if frame.sequence != len(state.received):
            return _fail(state, Failure.PROTOCOL)
        received = state.received + (frame,)
        if len(received) < state.n_frames:
            if state.phase is Phase.AWAIT_INIT_ACK:
                new = _enter(state, Phase.MESSAGE, now, cfg, received=received)
            else:
                new = replace(state, received=received, deadline=now + cfg.timeout)
            return new, [_timer(new)]
        message = depacketize(received)
        if state.phase is Phase.AWAIT_INIT_ACK:
            state = _enter(state, Phase.MESSAGE, now, cfg)
        new = _enter(state, Phase.RANGING, now, cfg, received=received, message=message)
        return new, [_timer(new)]
    if state.phase is Phase.RANGING and ft == FrameType.POLL:
        new = replace(state, deadline=now + cfg.timeout)
        actions = [SendFrame(Frame(FrameType.RESP, state.transaction_id, 0))] if state.addressed else []
        return new, actions + [_timer(new)]
    if state.phase is Phase.RANGING and ft == FrameType.RESP:
        return state, []  # passive listeners hear the addressed node's response
    if state.phase is Phase.RANGING and ft == FrameType.FINAL:
        new = _enter(state, Phase.BEARING, now, cfg)
        return new, [_timer(new)]
    if state.phase is Phase.BEARING and ft == FrameType.BEARING:
        new = replace(state, deadline=now + cfg.timeout)
        return new, [StartCompute(state.peer, state.addressed), _timer(new)]
    return _fail(state, Failure.PROTOCOL)
