"""
Deterministic in-process message bus with MQTT-style topics.

Stands in for the SDN control channel. Messages published while round r is
being delivered belong to round r + 1; delivery order is the total order
(round, sender, enqueue sequence), so a run's trace is a pure function of
its inputs. Subscriptions use MQTT wildcards (``+`` and ``#``) and are
matched with paho's own topic matcher, once per distinct topic.
"""
import heapq
import json
import logging
from collections.abc import Iterable
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional, TypeVar, Union

from paho.mqtt.client import topic_matches_sub

logger = logging.getLogger(__name__)

T = TypeVar("T")


class MessageKind(str, Enum):
    TRADE_REQUEST = "TradeRequest"
    TRADE_OFFER = "TradeOffer"
    TRADE_COMMIT = "TradeCommit"
    TRADE_ACK = "TradeAck"
    RELEASE_NOTICE = "ReleaseNotice"
    RECLAIM_NOTICE = "ReclaimNotice"
    BLOCK_ANNOUNCE = "BlockAnnounce"
    BLOCK_CONFIRM = "BlockConfirm"


TOPIC_ROOTS = {
    MessageKind.TRADE_REQUEST: "st/request",
    MessageKind.TRADE_OFFER: "st/offer",
    MessageKind.TRADE_COMMIT: "st/commit",
    MessageKind.TRADE_ACK: "st/ack",
    MessageKind.RELEASE_NOTICE: "st/release",
    MessageKind.RECLAIM_NOTICE: "st/reclaim",
    MessageKind.BLOCK_ANNOUNCE: "st/block/announce",
    MessageKind.BLOCK_CONFIRM: "st/block/confirm",
}


def topic_for(kind: MessageKind, sender: int, recipient: Optional[int] = None) -> str:
    """Unicast topics end in the recipient id, broadcasts in the sender id."""
    return f"{TOPIC_ROOTS[kind]}/{sender if recipient is None else recipient}"


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender: int
    recipient: Optional[int]
    topic: str
    payload: bytes
    round: int
    seq: int
    memo: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def decoded(self, key: str, build: Callable[[], T]) -> T:
        """Parse a payload field once, however many subscribers read it."""
        if key not in self.memo:
            self.memo[key] = build()
        return self.memo[key]

    def as_record(self) -> dict:
        return {
            "round": self.round,
            "seq": self.seq,
            "kind": self.kind.value,
            "sender": self.sender,
            "recipient": self.recipient,
            "topic": self.topic,
            "payload": json.loads(self.payload),
        }


Handler = Callable[[Message, dict], None]


class SimBus:
    def __init__(self):
        self._subscriptions: list[tuple[str, Handler]] = []
        self._routes: dict[str, list[Handler]] = {}
        self._queue: list[tuple[int, int, int, Message]] = []
        self._seq = 0
        self.round = 0
        self.trace: list[Message] = []

    def subscribe(self, pattern: str, handler: Handler) -> None:
        self._subscriptions.append((pattern, handler))
        self._routes.clear()

    def handlers_for(self, topic: str) -> list[Handler]:
        """Subscribers of ``topic`` in subscription order."""
        handlers = self._routes.get(topic)
        if handlers is None:
            handlers = [handler for pattern, handler in self._subscriptions if topic_matches_sub(pattern, topic)]
            self._routes[topic] = handlers
        return handlers

    def publish(
        self,
        kind: MessageKind,
        sender: int,
        payload: dict[str, Any],
        *,
        recipient: Optional[int] = None,
    ) -> Message:
        message = Message(
            kind=kind,
            sender=sender,
            recipient=recipient,
            topic=topic_for(kind, sender, recipient),
            payload=json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8"),
            round=self.round + 1,
            seq=self._seq,
        )
        self._seq += 1
        heapq.heappush(self._queue, (message.round, message.sender, message.seq, message))
        logger.debug("queued %s on %s (round %d)", kind.value, message.topic, message.round)
        return message

    def pending(self) -> int:
        return len(self._queue)

    def run(self) -> int:
        """Deliver until the queue is empty; returns the number of messages delivered."""
        delivered = 0
        while self._queue:
            _, _, _, message = heapq.heappop(self._queue)
            self.round = message.round
            self.trace.append(message)
            data = json.loads(message.payload)
            for handler in self.handlers_for(message.topic):
                handler(message, data)
            delivered += 1
        return delivered

    def trace_since(self, mark: int) -> list[Message]:
        return self.trace[mark:]

    def export_trace(self, path: Union[str, Path]) -> Path:
        return export_trace(self.trace, path)


def export_trace(messages: Iterable[Message], path: Union[str, Path]) -> Path:
    """Write messages as JSON lines, one message per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for message in messages:
            fh.write(json.dumps(message.as_record(), sort_keys=True) + "\n")
    return path
