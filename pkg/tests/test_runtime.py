"""Agent handlers, dispatch validation, world scheduling, queries."""

from __future__ import annotations

import pytest

from agentmesh.identity import derive_identity
from agentmesh.ledger import Ledger
from agentmesh.mailbox import MailboxStore
from agentmesh.runtime import (
    Agent,
    AgentAlreadyStarted,
    AgentNotStarted,
    Context,
    DuplicateHandler,
    Event,
    HandlerOverlap,
    Interval,
    Message,
    NetworkModel,
    Query,
    Timeout,
    World,
    dispatch,
    include_protocol,
    register_handler,
)
from agentmesh.wire import (
    Envelope,
    ModelSchema,
    ProtocolSpec,
    Record,
    SchemaNotInProtocol,
    SemanticType,
    seal_envelope,
)

PING = ModelSchema.build("Ping", text=SemanticType.STRING)
PONG = ModelSchema.build("Pong", text=SemanticType.STRING)
ECHO = ProtocolSpec("Echo", "1.0", (PING, PONG))


def make_agent(phrase: str, name: str | None = None) -> Agent:
    agent = Agent(name or phrase, derive_identity(phrase))
    agent.include_protocol(ECHO)
    return agent


def echo_agent(phrase: str) -> Agent:
    agent = make_agent(phrase)

    @agent.on_message(PING)
    def handle(ctx, sender, record):
        return Record(PONG, {"text": record["text"]})

    return agent


def fresh_world(**kw) -> World:
    return World(Ledger(), **kw)


class TestRegistration:
    def test_duplicate_handler(self):
        agent = make_agent("dup")
        register_handler(agent, Message(PING), lambda ctx, s, r: None)
        with pytest.raises(DuplicateHandler):
            register_handler(agent, Message(PING), lambda ctx, s, r: None)
        with pytest.raises(DuplicateHandler):
            register_handler(agent, Query(PING), lambda ctx, s, r: None)

    def test_schema_not_in_protocol(self):
        agent = Agent("bare", derive_identity("bare"))
        with pytest.raises(SchemaNotInProtocol):
            register_handler(agent, Message(PING), lambda ctx, s, r: None)

    def test_register_after_start(self):
        agent = make_agent("late reg")
        world = fresh_world()
        world.add_agent(agent)
        with pytest.raises(AgentAlreadyStarted):
            register_handler(agent, Message(PING), lambda ctx, s, r: None)
        with pytest.raises(AgentAlreadyStarted):
            include_protocol(agent, ECHO)

    def test_include_idempotent(self):
        agent = make_agent("idem")
        include_protocol(agent, ECHO)
        assert len(agent.protocols) == 1

    def test_interval_period_validated(self):
        with pytest.raises(Exception):
            Interval(0)

    def test_event_name_validated(self):
        with pytest.raises(Exception):
            Event("reboot")


class TestDispatch:
    def ping_env(self, sender, target: Agent, text="hi", expires=1000, session=b"\x05" * 16):
        return seal_envelope(
            sender.identity if isinstance(sender, Agent) else sender,
            target.identity.address,
            ECHO,
            Record(PING, {"text": text}),
            session,
            expires,
        )

    def test_valid_message_invokes_handler_once(self):
        calls = []
        agent = make_agent("receiver")

        @agent.on_message(PING)
        def handle(ctx, sender, record):
            calls.append((sender, record["text"]))

        agent.start()
        sender = make_agent("sender")
        out = dispatch(agent, self.ping_env(sender, agent), 1)
        assert calls == [(sender.identity.address, "hi")]
        assert out == []

    def test_reply_reuses_session(self):
        agent = echo_agent("echoer")
        agent.start()
        sender = make_agent("asker")
        session = b"\x09" * 16
        out = dispatch(agent, self.ping_env(sender, agent, session=session), 1)
        assert len(out) == 1
        assert out[0].session_id == session
        assert out[0].target == sender.identity.address

    def test_dispatch_before_start(self):
        agent = echo_agent("not started")
        sender = make_agent("s")
        with pytest.raises(AgentNotStarted):
            dispatch(agent, self.ping_env(sender, agent), 1)

    def test_tampered_envelope_diagnostic(self):
        agent = echo_agent("tamper target")
        agent.start()
        sender = make_agent("tamper sender")
        env = self.ping_env(sender, agent)
        bad = Envelope(
            env.sender, env.target, env.protocol_digest, env.schema_digest,
            env.payload[:-1] + b"!", env.session_id, env.expires_at, env.signature,
        )
        assert dispatch(agent, bad, 1) == []
        assert [d.outcome for d in agent.diagnostics] == ["signature_invalid"]

    def test_no_handler_diagnostic(self):
        agent = make_agent("no handler")
        agent.start()
        sender = make_agent("nh sender")
        assert dispatch(agent, self.ping_env(sender, agent), 1) == []
        assert [d.outcome for d in agent.diagnostics] == ["no_handler"]

    def test_expired_diagnostic(self):
        agent = echo_agent("expired target")
        agent.start()
        sender = make_agent("expired sender")
        assert dispatch(agent, self.ping_env(sender, agent, expires=3), 10) == []
        assert [d.outcome for d in agent.diagnostics] == ["expired"]

    def test_unknown_schema_diagnostic(self):
        agent = echo_agent("unknown target")
        agent.start()
        stranger_schema = ModelSchema.build("Stranger", n=SemanticType.INT)
        stranger_proto = ProtocolSpec("Strange", "1.0", (stranger_schema,))
        sender = Agent("stranger", derive_identity("stranger"))
        sender.include_protocol(stranger_proto)
        env = seal_envelope(
            sender.identity, agent.identity.address, stranger_proto,
            Record(stranger_schema, {"n": 1}), b"\x00" * 16, 100,
        )
        assert dispatch(agent, env, 1) == []
        assert [d.outcome for d in agent.diagnostics] == ["unknown_schema"]

    def test_handler_overlap_detected(self):
        agent = make_agent("overlap")
        inner_error = []

        @agent.on_message(PING)
        def handle(ctx, sender, record):
            env = seal_envelope(
                agent.identity, agent.identity.address, ECHO,
                Record(PING, {"text": "again"}), b"\x01" * 16, 1000,
            )
            try:
                agent.dispatch(env, ctx.height)  # reentrant call must fail
            except HandlerOverlap as exc:
                inner_error.append(exc)

        agent.start()
        sender = make_agent("overlap sender")
        dispatch(agent, self.ping_env(sender, agent), 1)
        assert len(inner_error) == 1

    def test_context_storage(self):
        agent = make_agent("storage")

        @agent.on_message(PING)
        def handle(ctx, sender, record):
            ctx.storage.set("last", record["text"])

        agent.start()
        sender = make_agent("storage sender")
        dispatch(agent, self.ping_env(sender, agent, text="first"), 1)
        dispatch(agent, self.ping_env(sender, agent, text="second"), 2)
        assert agent.storage.get("last") == "second"
        agent.storage.set("alpha", 1)
        assert agent.storage.keys() == ["alpha", "last"]


class TestScheduling:
    def test_tick_zero_no_effect(self):
        world = fresh_world()
        agent = echo_agent("idle")
        world.add_agent(agent)
        world.tick(0)
        assert world.height == 0
        assert world.transcript == []

    def test_startup_fires_once_before_everything(self):
        order = []
        world = fresh_world()
        agent = make_agent("starter")

        @agent.on_event("startup")
        def boot(ctx):
            order.append("startup")

        @agent.on_interval(1)
        def every(ctx):
            order.append(f"interval@{ctx.height}")

        world.add_agent(agent)
        world.tick(3)
        assert order == ["startup", "interval@1", "interval@2", "interval@3"]

    def test_interval_period_five_in_twelve_ticks(self):
        fired = []
        world = fresh_world()
        agent = make_agent("five")

        @agent.on_interval(5)
        def every(ctx):
            fired.append(ctx.height)

        world.add_agent(agent)
        world.tick(12)
        assert fired == [5, 10]

    def test_latency_two_delivers_at_five(self):
        world = fresh_world(network=NetworkModel(latency_min=2, latency_max=2))
        receiver = echo_agent("latency receiver")
        sender = make_agent("latency sender")
        world.add_agent(receiver)
        world.add_agent(sender)
        world.tick(3)  # height now 3
        world.send_message(sender, receiver.identity.address, Record(PING, {"text": "t"}))
        world.tick(1)
        assert not any(line.outcome == "handled" for line in world.transcript)
        world.tick(1)  # height 5
        handled = [line for line in world.transcript if line.outcome == "handled"]
        assert len(handled) == 1
        assert handled[0].tick == 5

    def test_per_pair_fifo_with_jittery_latency(self):
        world = fresh_world(network=NetworkModel(latency_min=1, latency_max=5), seed=11)
        texts = []
        receiver = make_agent("fifo receiver")

        @receiver.on_message(PING)
        def handle(ctx, sender, record):
            texts.append(record["text"])

        sender = make_agent("fifo sender")
        world.add_agent(receiver)
        world.add_agent(sender)
        for i in range(10):
            world.send_message(sender, receiver.identity.address, Record(PING, {"text": str(i)}))
        world.tick(30)
        assert texts == [str(i) for i in range(10)]

    def test_shutdown_event(self):
        seen = []
        world = fresh_world()
        agent = make_agent("stopper")

        @agent.on_event("shutdown")
        def stop(ctx):
            seen.append(ctx.height)

        world.add_agent(agent)
        world.tick(4)
        world.shutdown()
        assert seen == [4]


class TestOfflineAndMailbox:
    def build(self):
        mailbox = MailboxStore()
        world = fresh_world(mailbox=mailbox)
        receiver = echo_agent("offline receiver")
        sender = make_agent("offline sender")
        world.add_agent(receiver)
        world.add_agent(sender)
        mailbox.create_account(receiver.identity.address)
        return world, mailbox, receiver, sender

    def test_offline_with_mailbox_deposits(self):
        world, mailbox, receiver, sender = self.build()
        world.set_online(receiver.identity.address, False)
        world.send_message(sender, receiver.identity.address, Record(PING, {"text": "stored"}))
        world.tick(2)
        assert mailbox.stats()[receiver.identity.address] == 1
        assert any(line.outcome == "mailboxed" for line in world.transcript)

    def test_reconnect_drains_and_dispatches(self):
        world, mailbox, receiver, sender = self.build()
        world.set_online(receiver.identity.address, False)
        world.send_message(sender, receiver.identity.address, Record(PING, {"text": "stored"}))
        world.tick(2)
        world.set_online(receiver.identity.address, True)
        assert mailbox.stats()[receiver.identity.address] == 0
        outcomes = [line.outcome for line in world.transcript]
        assert "retrieved" in outcomes and "handled" in outcomes

    def test_offline_without_mailbox_loses(self):
        world = fresh_world()  # no mailbox attached
        receiver = echo_agent("lost receiver")
        sender = make_agent("lost sender")
        world.add_agent(receiver)
        world.add_agent(sender)
        world.set_online(receiver.identity.address, False)
        world.send_message(sender, receiver.identity.address, Record(PING, {"text": "gone"}))
        world.tick(2)
        assert any(line.outcome == "offline_lost" for line in world.transcript)

    def test_scheduled_presence(self):
        world, mailbox, receiver, sender = self.build()
        world.schedule_presence(receiver.identity.address, 2, False)
        world.schedule_presence(receiver.identity.address, 6, True)
        world.tick(1)
        assert world.online[receiver.identity.address]
        world.tick(1)
        assert not world.online[receiver.identity.address]
        world.send_message(sender, receiver.identity.address, Record(PING, {"text": "wait"}))
        world.tick(3)
        assert mailbox.stats()[receiver.identity.address] == 1
        world.tick(1)  # tick 6: back online, drains
        assert mailbox.stats()[receiver.identity.address] == 0


class TestQuery:
    def test_echo_query(self):
        world = fresh_world()
        server = echo_agent("query server")
        client = make_agent("query client")
        world.add_agent(server)
        world.add_agent(client)
        reply = world.query(client, server.identity.address, Record(PING, {"text": "abc"}), 10)
        assert reply.schema.name == "Pong"
        assert reply["text"] == "abc"

    def test_query_offline_no_mailbox_times_out(self):
        world = fresh_world()
        server = echo_agent("silent server")
        client = make_agent("timeout client")
        world.add_agent(server)
        world.add_agent(client)
        world.set_online(server.identity.address, False)
        with pytest.raises(Timeout):
            world.query(client, server.identity.address, Record(PING, {"text": "x"}), 5)

    def test_interleaved_sessions_no_crosstalk(self):
        # exhaust both interleavings of two outstanding queries
        for first_to_answer in ("a", "b"):
            world = fresh_world(network=NetworkModel(latency_min=1, latency_max=1))
            stash = {}
            server = make_agent("interleave server")

            @server.on_message(PING)
            def handle(ctx, sender, record, _stash=stash):
                # answer out of order: hold the first, release on the second
                if not _stash:
                    _stash["held"] = (ctx.sender, ctx.session_id, record["text"])
                    return None
                held_sender, held_session, held_text = _stash.pop("held")
                order = (
                    [(held_sender, held_session, held_text),
                     (ctx.sender, ctx.session_id, record["text"])]
                    if first_to_answer == "a"
                    else [(ctx.sender, ctx.session_id, record["text"]),
                          (held_sender, held_session, held_text)]
                )
                for target, session, text in order:
                    ctx.send(target, Record(PONG, {"text": text}), session_id=session)
                return None

            client = make_agent("interleave client")
            world.add_agent(server)
            world.add_agent(client)
            session_a = world.send_query(client, server.identity.address, Record(PING, {"text": "A"}))
            session_b = world.send_query(client, server.identity.address, Record(PING, {"text": "B"}))
            world.tick(6)
            assert world.poll_reply(session_a)["text"] == "A"
            assert world.poll_reply(session_b)["text"] == "B"


class TestDeterminism:
    def run_once(self, seed: int) -> list[str]:
        world = fresh_world(
            network=NetworkModel(latency_min=1, latency_max=4, drop_probability=0.2),
            seed=seed,
        )
        agents = [echo_agent(f"det {i}") for i in range(4)]
        for agent in agents:
            world.add_agent(agent)
        sender = make_agent("det sender")
        world.add_agent(sender)
        for i, agent in enumerate(agents * 3):
            world.send_message(sender, agent.identity.address, Record(PING, {"text": str(i)}))
        world.tick(20)
        return world.transcript_lines()

    def test_same_seed_same_transcript(self):
        assert self.run_once(42) == self.run_once(42)

    def test_different_seed_different_transcript(self):
        assert self.run_once(42) != self.run_once(43)

    def test_drops_happen_and_are_logged(self):
        lines = self.run_once(42)
        assert any("|dropped" in line for line in lines)
