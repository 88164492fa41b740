"""Agent execution engine and the simulated network world.

Agents register handlers (interval, message, query, lifecycle events) and
exchange signed envelopes through a World that owns the clock. Time is a
logical tick counter equal to the ledger block height: one tick is one
block. The world delivers envelopes with seeded random latency and drop
behavior, redirects traffic for offline agents to the mailbox when one is
attached, and appends one transcript line per delivery outcome. Identical
(config, seed) runs produce byte-identical transcripts.

Handlers inside one agent never overlap; the world may interleave agents
but each dispatch is serialized per agent (enforced with a reentrancy
flag, asserted in tests).
"""

from __future__ import annotations

import hashlib
import heapq
import random
import struct
from dataclasses import dataclass, field
from typing import Any, Callable

from .identity import AgentIdentity
from .ledger import Ledger
from .mailbox import MailboxStore, retrieval_auth_digest
from .registry import Registry
from .wire import (
    Envelope,
    Expired,
    ModelSchema,
    ProtocolSpec,
    Record,
    SchemaNotInProtocol,
    SignatureInvalid,
    UnknownSchema,
    open_envelope,
    seal_envelope,
)

DEFAULT_REPLY_TTL = 100  # blocks an emitted envelope stays valid


class RuntimeError_(Exception):
    """Base for runtime failures."""


class DuplicateHandler(RuntimeError_):
    """A handler is already registered for that schema or event."""


class AgentAlreadyStarted(RuntimeError_):
    """Registration attempted after the agent joined a world."""


class AgentNotStarted(RuntimeError_):
    """Dispatch attempted before the agent joined a world."""


class Timeout(RuntimeError_):
    """Query ran out of ticks without a reply."""


class HandlerOverlap(RuntimeError_):
    """Two handlers of one agent ran concurrently (must never happen)."""


# Handler kinds. register_handler takes one of these plus the callable.

@dataclass(frozen=True)
class Interval:
    period: int

    def __post_init__(self) -> None:
        if self.period < 1:
            raise RuntimeError_("interval period must be >= 1 tick")


@dataclass(frozen=True)
class Message:
    schema: ModelSchema


@dataclass(frozen=True)
class Query:
    schema: ModelSchema


@dataclass(frozen=True)
class Event:
    name: str

    def __post_init__(self) -> None:
        if self.name not in ("startup", "shutdown"):
            raise RuntimeError_(f"unknown event {self.name!r}")


HandlerKind = Interval | Message | Query | Event


class ContextStorage:
    """Per-agent key-value store; keys enumerate sorted."""

    def __init__(self) -> None:
        self._data: dict[str, Any] = {}

    def set(self, key: str, value: Any) -> None:
        self._data[key] = value

    def get(self, key: str, default: Any = None) -> Any:
        return self._data.get(key, default)

    def delete(self, key: str) -> None:
        self._data.pop(key, None)

    def keys(self) -> list[str]:
        return sorted(self._data)

    def __contains__(self, key: str) -> bool:
        return key in self._data


@dataclass
class TranscriptLine:
    """One observable event: tick, parties, message identity, outcome."""

    tick: int
    sender: str
    target: str
    schema_name: str
    digest_prefix: str
    outcome: str

    def to_line(self) -> str:
        return "|".join(
            [
                str(self.tick),
                self.sender,
                self.target,
                self.schema_name,
                self.digest_prefix,
                self.outcome,
            ]
        )


class Context:
    """What a handler sees: its agent, the clock, and an outbox."""

    def __init__(
        self,
        agent: "Agent",
        height: int,
        sender: str | None = None,
        session_id: bytes | None = None,
        schema_name: str | None = None,
        digest_prefix: str = "-",
    ) -> None:
        self.agent = agent
        self.height = height
        self.sender = sender
        self.session_id = session_id
        self.outbound: list[Envelope] = []
        self._schema_name = schema_name
        self._digest_prefix = digest_prefix

    @property
    def address(self) -> str:
        return self.agent.identity.address

    @property
    def name(self) -> str:
        return self.agent.name

    @property
    def storage(self) -> ContextStorage:
        return self.agent.storage

    def send(
        self,
        target: str,
        record: Record,
        session_id: bytes | None = None,
        expires_at: int | None = None,
    ) -> Envelope:
        """Seal and queue one envelope; the transport picks it up after
        the handler returns."""
        protocol = self.agent.protocol_for(record.schema)
        if session_id is None:
            session_id = self.agent.fresh_session_id()
        if expires_at is None:
            expires_at = self.height + DEFAULT_REPLY_TTL
        env = seal_envelope(
            self.agent.identity, target, protocol, record, session_id, expires_at
        )
        self.outbound.append(env)
        return env

    def reply(self, record: Record, expires_at: int | None = None) -> Envelope:
        """Send back to the incoming sender, reusing its session id."""
        if self.sender is None or self.session_id is None:
            raise RuntimeError_("reply() outside a message handler")
        return self.send(self.sender, record, self.session_id, expires_at)

    def diag(self, outcome: str) -> None:
        """Record a handler-level diagnostic in the world transcript."""
        self.agent.record_diag(
            TranscriptLine(
                self.height,
                self.sender or self.address,
                self.address,
                self._schema_name or "-",
                self._digest_prefix,
                outcome,
            )
        )


class Agent:
    """One agent: identity, protocols, handlers, private storage."""

    def __init__(self, name: str, identity: AgentIdentity) -> None:
        self.name = name
        self.identity = identity
        self.storage = ContextStorage()
        self.protocols: list[ProtocolSpec] = []
        self.message_handlers: dict[bytes, Callable] = {}
        self.query_handlers: dict[bytes, Callable] = {}
        self.interval_handlers: list[tuple[int, Callable]] = []
        self.event_handlers: dict[str, list[Callable]] = {"startup": [], "shutdown": []}
        self.started = False
        self.diagnostics: list[TranscriptLine] = []
        self.world: "World | None" = None
        self._in_handler = False
        self._session_counter = 0

    # -- setup (before start) ---------------------------------------------

    def include_protocol(self, spec: ProtocolSpec) -> None:
        if self.started:
            raise AgentAlreadyStarted(f"{self.name} already started")
        if any(p.digest() == spec.digest() for p in self.protocols):
            return
        self.protocols.append(spec)

    def register_handler(self, kind: HandlerKind, handler: Callable) -> None:
        if self.started:
            raise AgentAlreadyStarted(f"{self.name} already started")
        if isinstance(kind, Interval):
            self.interval_handlers.append((kind.period, handler))
        elif isinstance(kind, (Message, Query)):
            digest = kind.schema.digest()
            if not any(p.has_schema(kind.schema) for p in self.protocols):
                raise SchemaNotInProtocol(
                    f"{kind.schema.name} is in none of {self.name}'s protocols"
                )
            if digest in self.message_handlers or digest in self.query_handlers:
                raise DuplicateHandler(f"handler for {kind.schema.name} already registered")
            table = self.message_handlers if isinstance(kind, Message) else self.query_handlers
            table[digest] = handler
        elif isinstance(kind, Event):
            if handler in self.event_handlers[kind.name]:
                raise DuplicateHandler(f"{kind.name} handler registered twice")
            self.event_handlers[kind.name].append(handler)
        else:
            raise RuntimeError_(f"unknown handler kind {kind!r}")

    # decorator sugar, mirroring the usual event-driven agent style
    def on_interval(self, period: int) -> Callable:
        def wrap(fn: Callable) -> Callable:
            self.register_handler(Interval(period), fn)
            return fn
        return wrap

    def on_message(self, schema: ModelSchema) -> Callable:
        def wrap(fn: Callable) -> Callable:
            self.register_handler(Message(schema), fn)
            return fn
        return wrap

    def on_query(self, schema: ModelSchema) -> Callable:
        def wrap(fn: Callable) -> Callable:
            self.register_handler(Query(schema), fn)
            return fn
        return wrap

    def on_event(self, name: str) -> Callable:
        def wrap(fn: Callable) -> Callable:
            self.register_handler(Event(name), fn)
            return fn
        return wrap

    # -- runtime ------------------------------------------------------------

    def start(self) -> None:
        self.started = True

    def known_schemas(self) -> list[ModelSchema]:
        seen: dict[bytes, ModelSchema] = {}
        for proto in self.protocols:
            for model in proto.models:
                seen.setdefault(model.digest(), model)
        return list(seen.values())

    def protocol_for(self, schema: ModelSchema) -> ProtocolSpec:
        for proto in self.protocols:
            if proto.has_schema(schema):
                return proto
        raise SchemaNotInProtocol(f"{schema.name} is in none of {self.name}'s protocols")

    def fresh_session_id(self) -> bytes:
        """Deterministic 16-byte session id (no wall clock, no uuid)."""
        self._session_counter += 1
        return hashlib.sha256(
            b"session" + self.identity.verify_key + struct.pack(">Q", self._session_counter)
        ).digest()[:16]

    def record_diag(self, line: TranscriptLine) -> None:
        self.diagnostics.append(line)
        if self.world is not None:
            self.world.transcript.append(line)

    def _run_handler(self, handler: Callable, *args: Any) -> Any:
        if self._in_handler:
            raise HandlerOverlap(f"handler overlap inside {self.name}")
        self._in_handler = True
        try:
            return handler(*args)
        finally:
            self._in_handler = False

    def run_event(self, name: str, height: int) -> list[Envelope]:
        out: list[Envelope] = []
        for handler in self.event_handlers[name]:
            ctx = Context(self, height)
            self._run_handler(handler, ctx)
            out.extend(ctx.outbound)
        return out

    def run_intervals(self, height: int) -> list[Envelope]:
        out: list[Envelope] = []
        for period, handler in self.interval_handlers:
            if height % period == 0:
                ctx = Context(self, height)
                self._run_handler(handler, ctx)
                out.extend(ctx.outbound)
        return out

    def dispatch(self, env: Envelope, current_height: int) -> list[Envelope]:
        """Validate one envelope and run its handler.

        Fire-and-forget: validation failures drop the envelope and record a
        diagnostic; nothing flows back to the sender. Returns the envelopes
        the handler emitted, sealed and ready for transport.
        """
        if not self.started:
            raise AgentNotStarted(f"{self.name} has not joined a world")
        digest_prefix = hashlib.sha256(env.payload).hexdigest()[:8]

        def diag(outcome: str, schema_name: str) -> None:
            self.record_diag(
                TranscriptLine(
                    current_height, env.sender, env.target, schema_name,
                    digest_prefix, outcome,
                )
            )

        try:
            record, sender = open_envelope(env, self.known_schemas(), current_height)
        except SignatureInvalid:
            diag("signature_invalid", self._schema_name_of(env.schema_digest))
            return []
        except Expired:
            diag("expired", self._schema_name_of(env.schema_digest))
            return []
        except UnknownSchema:
            diag("unknown_schema", self._schema_name_of(env.schema_digest))
            return []
        schema_name = record.schema.name
        handler = self.message_handlers.get(env.schema_digest) or self.query_handlers.get(
            env.schema_digest
        )
        if handler is None:
            diag("no_handler", schema_name)
            return []
        ctx = Context(
            self,
            current_height,
            sender=sender,
            session_id=env.session_id,
            schema_name=schema_name,
            digest_prefix=digest_prefix,
        )
        result = self._run_handler(handler, ctx, sender, record)
        if isinstance(result, Record):
            ctx.reply(result)
        diag("handled", schema_name)
        return ctx.outbound

    def _schema_name_of(self, digest: bytes) -> str:
        for schema in self.known_schemas():
            if schema.digest() == digest:
                return schema.name
        return digest.hex()[:8]


def register_handler(agent: Agent, kind: HandlerKind, handler: Callable) -> None:
    agent.register_handler(kind, handler)


def include_protocol(agent: Agent, spec: ProtocolSpec) -> None:
    agent.include_protocol(spec)


def dispatch(agent: Agent, env: Envelope, current_height: int) -> list[Envelope]:
    return agent.dispatch(env, current_height)


@dataclass
class NetworkModel:
    """Latency range in ticks plus an independent drop probability.

    Latency is at least 1 tick so a handler's output can never re-enter the
    same tick's delivery loop.
    """

    latency_min: int = 1
    latency_max: int = 1
    drop_probability: float = 0.0

    def __post_init__(self) -> None:
        if self.latency_min < 1 or self.latency_max < self.latency_min:
            raise RuntimeError_("latency range must satisfy 1 <= min <= max")
        if not (0.0 <= self.drop_probability < 1.0):
            raise RuntimeError_("drop probability must be in [0, 1)")


class World:
    """Discrete-tick scheduler owning the clock, transport, and transcript."""

    def __init__(
        self,
        ledger: Ledger,
        registry: Registry | None = None,
        mailbox: MailboxStore | None = None,
        network: NetworkModel | None = None,
        seed: int = 0,
    ) -> None:
        self.ledger = ledger
        self.registry = registry if registry is not None else Registry()
        self.mailbox = mailbox
        self.network = network if network is not None else NetworkModel()
        self.rng = random.Random(seed)
        self.agents: dict[str, Agent] = {}
        self._agent_order: list[Agent] = []
        self.online: dict[str, bool] = {}
        self.transcript: list[TranscriptLine] = []
        self._in_flight: list[tuple[int, int, Envelope, bool]] = []
        self._send_seq = 0
        self._last_delivery: dict[tuple[str, str], int] = {}
        self._startup_done = False
        # session id -> (awaiting address, reply record once it lands)
        self._pending_queries: dict[bytes, tuple[str, Record | None]] = {}
        self._query_errors: dict[bytes, str] = {}
        self._status_changes: list[tuple[int, str, bool]] = []

    @property
    def height(self) -> int:
        return self.ledger.height

    # -- population --------------------------------------------------------

    def add_agent(self, agent: Agent) -> None:
        if agent.identity.address in self.agents:
            raise RuntimeError_(f"agent {agent.name} already in world")
        agent.world = self
        agent.start()
        self.agents[agent.identity.address] = agent
        self._agent_order.append(agent)
        self.online[agent.identity.address] = True

    def schema_name_of(self, digest: bytes) -> str:
        for agent in self._agent_order:
            for schema in agent.known_schemas():
                if schema.digest() == digest:
                    return schema.name
        return digest.hex()[:8]

    # -- presence ------------------------------------------------------------

    def set_online(self, address: str, online: bool) -> None:
        """Immediate status flip; coming back online drains the mailbox."""
        was = self.online.get(address, True)
        self.online[address] = online
        if online and not was:
            self._drain_mailbox(address)

    def schedule_presence(self, address: str, tick: int, online: bool) -> None:
        """Apply a status change at the start of the given tick."""
        self._status_changes.append((tick, address, online))
        self._status_changes.sort()

    def _drain_mailbox(self, address: str) -> None:
        if self.mailbox is None or not self.mailbox.has_account(address):
            return
        agent = self.agents.get(address)
        if agent is None:
            return
        nonce = self.mailbox.next_nonce(address)
        auth = agent.identity.sign_digest(retrieval_auth_digest(address, nonce))
        batch = self.mailbox.retrieve(address, nonce, auth)
        for env in batch:
            self.transcript.append(
                TranscriptLine(
                    self.height,
                    env.sender,
                    env.target,
                    self.schema_name_of(env.schema_digest),
                    hashlib.sha256(env.payload).hexdigest()[:8],
                    "retrieved",
                )
            )
            self._deliver(env)
        if self.mailbox.ack_mode and batch:
            self.mailbox.acknowledge(address)

    # -- transport ---------------------------------------------------------

    def send(self, env: Envelope) -> None:
        """Schedule one envelope; per (sender, target) pair FIFO holds."""
        latency = self.rng.randint(self.network.latency_min, self.network.latency_max)
        dropped = (
            self.network.drop_probability > 0.0
            and self.rng.random() < self.network.drop_probability
        )
        deliver_at = self.height + latency
        pair = (env.sender, env.target)
        deliver_at = max(deliver_at, self._last_delivery.get(pair, 0))
        self._last_delivery[pair] = deliver_at
        self._send_seq += 1
        # the drop decision rides along; offline redirection outranks it
        heapq.heappush(self._in_flight, (deliver_at, self._send_seq, env, dropped))

    def _deliver(self, env: Envelope) -> None:
        """Hand one envelope to its target agent right now."""
        pending = self._pending_queries.get(env.session_id)
        if pending is not None and pending[1] is None and env.target == pending[0]:
            # the reply a blocked query is waiting for: intercept it
            agent = self.agents[env.target]
            try:
                record, _ = open_envelope(env, agent.known_schemas(), self.height)
            except SignatureInvalid:
                self._query_errors[env.session_id] = "SignatureInvalid"
                return
            except (Expired, UnknownSchema) as exc:
                self._query_errors[env.session_id] = type(exc).__name__
                return
            self._pending_queries[env.session_id] = (pending[0], record)
            self.transcript.append(
                TranscriptLine(
                    self.height,
                    env.sender,
                    env.target,
                    record.schema.name,
                    hashlib.sha256(env.payload).hexdigest()[:8],
                    "reply_received",
                )
            )
            return
        agent = self.agents.get(env.target)
        if agent is None:
            self.transcript.append(
                TranscriptLine(
                    self.height,
                    env.sender,
                    env.target,
                    self.schema_name_of(env.schema_digest),
                    hashlib.sha256(env.payload).hexdigest()[:8],
                    "no_such_agent",
                )
            )
            return
        for out in agent.dispatch(env, self.height):
            self.send(out)

    def _deliver_or_divert(self, env: Envelope, dropped: bool) -> None:
        name = self.schema_name_of(env.schema_digest)
        prefix = hashlib.sha256(env.payload).hexdigest()[:8]
        if not self.online.get(env.target, True):
            if self.mailbox is not None and self.mailbox.has_account(env.target):
                result = self.mailbox.deposit(env, self.height)
                outcome = "mailboxed" if result.accepted else f"mailbox_{result.reason}"
            else:
                outcome = "offline_lost"
            self.transcript.append(
                TranscriptLine(self.height, env.sender, env.target, name, prefix, outcome)
            )
            return
        if dropped:
            self.transcript.append(
                TranscriptLine(self.height, env.sender, env.target, name, prefix, "dropped")
            )
            return
        self._deliver(env)

    # -- clock ---------------------------------------------------------------

    def tick(self, n: int = 1) -> None:
        """Advance n ticks: presence changes, startup (first tick only),
        due deliveries, then interval handlers; one block per tick."""
        for _ in range(n):
            self.ledger.advance_block(1)
            h = self.height
            while self._status_changes and self._status_changes[0][0] <= h:
                _, address, online = self._status_changes.pop(0)
                self.set_online(address, online)
            if not self._startup_done:
                self._startup_done = True
                for agent in self._agent_order:
                    for env in agent.run_event("startup", h):
                        self.send(env)
            while self._in_flight and self._in_flight[0][0] <= h:
                _, _, env, dropped = heapq.heappop(self._in_flight)
                self._deliver_or_divert(env, dropped)
            for agent in self._agent_order:
                if not self.online.get(agent.identity.address, True):
                    continue  # an offline agent's schedule is paused
                for env in agent.run_intervals(h):
                    self.send(env)

    def drain(self, max_ticks: int = 1000) -> int:
        """Tick until pending presence changes and in-flight traffic settle.

        Envelopes parked in an offline agent's mailbox do not count as in
        flight; they stay stored until the owner reconnects.
        """
        used = 0
        while used < max_ticks and (self._in_flight or self._status_changes):
            self.tick()
            used += 1
        return used

    def shutdown(self) -> None:
        for agent in self._agent_order:
            for env in agent.run_event("shutdown", self.height):
                self.send(env)

    # -- direct sends and queries (harness-level API) ------------------------

    def send_message(
        self,
        sender: Agent,
        target: str,
        record: Record,
        session_id: bytes | None = None,
        expires_at: int | None = None,
    ) -> Envelope:
        protocol = sender.protocol_for(record.schema)
        if session_id is None:
            session_id = sender.fresh_session_id()
        if expires_at is None:
            expires_at = self.height + DEFAULT_REPLY_TTL
        env = seal_envelope(sender.identity, target, protocol, record, session_id, expires_at)
        self.send(env)
        return env

    def send_query(
        self,
        sender: Agent,
        target: str,
        record: Record,
        expires_at: int | None = None,
    ) -> bytes:
        """Non-blocking query start; poll_reply() checks for the answer."""
        session_id = sender.fresh_session_id()
        self._pending_queries[session_id] = (sender.identity.address, None)
        self.send_message(sender, target, record, session_id, expires_at)
        return session_id

    def poll_reply(self, session_id: bytes) -> Record | None:
        if session_id in self._query_errors:
            raise SignatureInvalid(
                f"query reply failed validation: {self._query_errors[session_id]}"
            )
        pending = self._pending_queries.get(session_id)
        return None if pending is None else pending[1]

    def query(
        self,
        sender: Agent,
        target: str,
        record: Record,
        timeout_ticks: int,
    ) -> Record:
        """Blocking request-response: ticks the world until the session's
        reply lands or the timeout elapses. Never call from inside a
        handler; it drives the same scheduler."""
        session_id = self.send_query(sender, target, record)
        for _ in range(timeout_ticks):
            self.tick()
            reply = self.poll_reply(session_id)
            if reply is not None:
                del self._pending_queries[session_id]
                return reply
        del self._pending_queries[session_id]
        raise Timeout(f"no reply from {target} within {timeout_ticks} ticks")

    # -- transcript -----------------------------------------------------------

    def transcript_lines(self) -> list[str]:
        return [line.to_line() for line in self.transcript]

    def write_transcript(self, path: str) -> int:
        lines = self.transcript_lines()
        with open(path, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
        return len(lines)
