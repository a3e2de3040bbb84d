"""Deterministic discrete-event core: clock, topology, frame delivery, trace.

Everything that happens in a simulation is an event on a single heap ordered
by (tick, sequence number), so two runs with the same topology, scenario and
seed replay the exact same event order. Behaviors (switches, routers, SDN
switches, controllers, hosts) hang off nodes and only interact with the world
through their NodeCtx.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

# Frame kinds. DATA is payload traffic, everything else is a control PDU.
DATA = "DATA"
BPDU = "BPDU"
LACPDU = "LACPDU"
ARP = "ARP"
LSA = "LSA"
VRRP = "VRRP"
LLDP = "LLDP"
OFMSG = "OFMSG"
ELECTION = "ELECTION"
SYNC = "SYNC"
TRUNK_NEG = "TRUNK_NEG"

FRAME_KINDS = (DATA, BPDU, LACPDU, ARP, LSA, VRRP, LLDP, OFMSG, ELECTION, SYNC, TRUNK_NEG)
CONTROL_KINDS = frozenset(FRAME_KINDS) - {DATA}

BROADCAST = "ff:ff:ff:ff:ff:ff"
MCAST_STP = "01:80:c2:00:00:00"
MCAST_LACP = "01:80:c2:00:00:02"
MCAST_LLDP = "01:80:c2:00:00:0e"
MCAST_ELECT = "01:80:c2:00:00:10"
MCAST_VRRP = "01:00:5e:00:00:12"

UNI = "UNI"
NNI = "NNI"
CONTROLLER_PORT = "CONTROLLER"
PORT_ROLES = (UNI, NNI, CONTROLLER_PORT)


def is_multicast(mac: str) -> bool:
    return mac == BROADCAST or mac.startswith("01:")


def stable_hash(*parts) -> int:
    """Seed-independent 64-bit hash. Python's builtin hash() is salted per
    process, which would break replay determinism."""
    blob = "|".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "big")


def host_mac(node_id: str) -> str:
    return f"m:{node_id}"


def iface_mac(node_id: str, port: int) -> str:
    return f"m:{node_id}:{port}"


def virtual_mac(vip: str) -> str:
    return f"vmac:{vip}"


class SimError(Exception):
    """Base class for engine-level failures."""


class PastTick(SimError):
    """Raised when an event is scheduled before the current tick."""


@dataclass
class Frame:
    """One simulated packet/PDU. Copies made by flooding share frame_id."""

    src_mac: str
    dst_mac: str
    kind: str = DATA
    vlan_tags: tuple = ()
    ip_src: Optional[str] = None
    ip_dst: Optional[str] = None
    ttl: Optional[int] = None
    flow_label: int = 0
    payload: Any = None
    auth_token: Optional[tuple] = None
    frame_id: int = -1
    adversarial: bool = False
    probe: bool = False

    def copy(self, **overrides) -> "Frame":
        kw = dict(
            src_mac=self.src_mac, dst_mac=self.dst_mac, kind=self.kind,
            vlan_tags=self.vlan_tags, ip_src=self.ip_src, ip_dst=self.ip_dst,
            ttl=self.ttl, flow_label=self.flow_label, payload=self.payload,
            auth_token=self.auth_token, frame_id=self.frame_id,
            adversarial=self.adversarial, probe=self.probe,
        )
        kw.update(overrides)
        return Frame(**kw)


@dataclass
class Port:
    node: str
    port: int
    role: str = UNI
    link_id: Optional[str] = None
    policies: list = field(default_factory=list)
    # port-security runtime state: distinct source MACs seen on this port
    seen_macs: set = field(default_factory=set)


@dataclass
class Link:
    id: str
    a: tuple  # (node, port)
    b: tuple
    delay: int = 1
    cost: int = 1
    up: bool = True
    tx: int = 0
    drops: int = 0

    def other_end(self, node: str, port: int) -> tuple:
        if (node, port) == self.a:
            return self.b
        if (node, port) == self.b:
            return self.a
        raise SimError(f"({node},{port}) is not an endpoint of link {self.id}")


class Node:
    def __init__(self, node_id: str, kind: str, config: Optional[dict] = None):
        self.id = node_id
        self.kind = kind  # host | switch | router | sdn_switch | controller
        self.config = config or {}
        self.ports: dict[int, Port] = {}
        self.behavior = None
        self.alive = True
        self.policies: list = []  # node-level defense policies

    def port(self, port: int) -> Port:
        if port not in self.ports:
            self.ports[port] = Port(self.id, port)
        return self.ports[port]


class Topology:
    """Physical graph: nodes, ports and links. Built once per scenario."""

    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self.links: dict[str, Link] = {}

    def add_node(self, node_id: str, kind: str, config: Optional[dict] = None) -> Node:
        if node_id in self.nodes:
            raise SimError(f"duplicate node {node_id}")
        node = Node(node_id, kind, config)
        self.nodes[node_id] = node
        return node

    def add_link(self, a: tuple, b: tuple, delay: int = 1, cost: int = 1,
                 link_id: Optional[str] = None, role_a: Optional[str] = None,
                 role_b: Optional[str] = None) -> Link:
        if delay < 1:
            raise SimError("link delay must be >= 1")
        if cost < 1:
            raise SimError("link cost must be >= 1")
        for end in (a, b):
            if end[0] not in self.nodes:
                raise SimError(f"link endpoint references unknown node {end[0]}")
        lid = link_id or f"l{len(self.links)}"
        if lid in self.links:
            raise SimError(f"duplicate link id {lid}")
        link = Link(lid, tuple(a), tuple(b), delay=delay, cost=cost)
        self.links[lid] = link
        pa = self.nodes[a[0]].port(a[1])
        pb = self.nodes[b[0]].port(b[1])
        if pa.link_id or pb.link_id:
            raise SimError(f"port already wired on link {lid}")
        pa.link_id = lid
        pb.link_id = lid
        pa.role = role_a or self._default_role(b[0])
        pb.role = role_b or self._default_role(a[0])
        return link

    def _default_role(self, peer_id: str) -> str:
        # Role of the local port is determined by what sits on the far side.
        peer = self.nodes[peer_id].kind
        if peer == "controller":
            return CONTROLLER_PORT
        if peer == "host":
            return UNI
        return NNI

    def port(self, node: str, port: int) -> Port:
        return self.nodes[node].ports[port]

    def link_at(self, node: str, port: int) -> Optional[Link]:
        p = self.nodes[node].ports.get(port)
        if p is None or p.link_id is None:
            return None
        return self.links[p.link_id]

    def inter_switch_edges(self, kinds=("switch", "sdn_switch")) -> set:
        """Ground-truth edges between forwarding elements, as port pairs."""
        edges = set()
        for link in self.links.values():
            ka = self.nodes[link.a[0]].kind
            kb = self.nodes[link.b[0]].kind
            if ka in kinds and kb in kinds:
                edges.add(frozenset((link.a, link.b)))
        return edges


class Trace:
    """Append-only event record with a streaming digest for replay checks."""

    def __init__(self):
        self.events: list[dict] = []
        self._sha = hashlib.sha256()

    def emit(self, tick: int, ev: str, **fields):
        rec = {"t": tick, "ev": ev}
        rec.update(fields)
        self.events.append(rec)
        self._sha.update(json.dumps(rec, sort_keys=True, default=str).encode())
        self._sha.update(b"\n")

    def digest(self) -> str:
        return self._sha.hexdigest()

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.events:
                fh.write(json.dumps(rec, sort_keys=True, default=str) + "\n")

    def select(self, ev: str) -> list[dict]:
        return [r for r in self.events if r["ev"] == ev]


class Counters:
    """Whole-run accounting. Conservation: copies == arrivals + link_drops
    + in_flight once the run ends."""

    def __init__(self):
        self.injected = 0
        self.copies = 0
        self.arrivals = 0
        self.link_drops = 0
        self.in_flight = 0
        self.node_drops = Counter()      # reason -> count
        self.delivered = Counter()       # host node -> DATA frames consumed
        self.defense_blocks = Counter()  # "policy@node:port" -> count
        self.notify_source = 0
        self.packet_ins = 0
        self.flow_mod_rejects = 0
        self.stp_state_changes = 0
        self.lag_flaps = 0
        self.link_status_events = 0
        self.buffered_misses = 0
        self.buffer_overflows = 0
        self.per_link_tx = Counter()

    def to_dict(self) -> dict:
        return {
            "injected": self.injected,
            "copies": self.copies,
            "arrivals": self.arrivals,
            "link_drops": self.link_drops,
            "in_flight": self.in_flight,
            "node_drops": dict(sorted(self.node_drops.items())),
            "delivered": dict(sorted(self.delivered.items())),
            "defense_blocks": dict(sorted(self.defense_blocks.items())),
            "notify_source": self.notify_source,
            "packet_ins": self.packet_ins,
            "flow_mod_rejects": self.flow_mod_rejects,
            "stp_state_changes": self.stp_state_changes,
            "lag_flaps": self.lag_flaps,
            "link_status_events": self.link_status_events,
            "buffered_misses": self.buffered_misses,
            "buffer_overflows": self.buffer_overflows,
            "per_link_tx": dict(sorted(self.per_link_tx.items())),
        }


class Behavior:
    """Base node behavior; subclasses override the hooks they need."""

    def attach(self, ctx: "NodeCtx"):
        self.ctx = ctx

    def start(self):
        pass

    def on_frame(self, port: int, frame: Frame):
        pass

    def on_link_status(self, port: int, up: bool):
        pass


class Engine:
    def __init__(self, topo: Topology, seed: int = 0, horizon: int = 1000):
        self.topo = topo
        self.seed = seed
        self.horizon = horizon
        self.now = 0
        self._seq = 0
        self._heap: list = []
        self.rng = random.Random(f"cpsim:{seed}")
        self.trace = Trace()
        self.counters = Counters()
        self._frame_ids = 0
        self._finished = False

    # -- scheduling ---------------------------------------------------------

    def schedule(self, tick: int, fn: Callable, *args) -> int:
        if tick < self.now:
            raise PastTick(f"cannot schedule at {tick}, now is {self.now}")
        self._seq += 1
        heapq.heappush(self._heap, (tick, self._seq, fn, args))
        return self._seq

    def schedule_every(self, start: int, period: int, fn: Callable):
        def tick_fn():
            fn()
            nxt = self.now + period
            if nxt <= self.horizon:
                self.schedule(nxt, tick_fn)
        self.schedule(start, tick_fn)

    # -- frames -------------------------------------------------------------

    def new_frame(self, **kw) -> Frame:
        self._frame_ids += 1
        frame = Frame(frame_id=self._frame_ids, **kw)
        self.counters.injected += 1
        self.trace.emit(self.now, "inject", fid=frame.frame_id, kind=frame.kind,
                        src=frame.src_mac, dst=frame.dst_mac, ip_dst=frame.ip_dst,
                        adv=frame.adversarial, probe=frame.probe)
        return frame

    def transmit(self, node: str, port: int, frame: Frame):
        link = self.topo.link_at(node, port)
        if link is None:
            self.counters.link_drops += 1
            self.trace.emit(self.now, "drop", fid=frame.frame_id, node=node,
                            port=port, reason="no_link")
            return
        if not link.up:
            link.drops += 1
            self.counters.link_drops += 1
            self.trace.emit(self.now, "drop", fid=frame.frame_id, node=node,
                            port=port, reason="link_down")
            return
        link.tx += 1
        self.counters.copies += 1
        self.counters.per_link_tx[link.id] += 1
        far_node, far_port = link.other_end(node, port)
        self.schedule(self.now + link.delay, self._arrive, far_node, far_port, frame)

    def _arrive(self, node: str, port: int, frame: Frame):
        self.counters.arrivals += 1
        self.trace.emit(self.now, "hop", fid=frame.frame_id, node=node, port=port,
                        kind=frame.kind, src=frame.src_mac, dst=frame.dst_mac,
                        ip_dst=frame.ip_dst, adv=frame.adversarial)
        n = self.topo.nodes[node]
        if n.alive and n.behavior is not None:
            n.behavior.on_frame(port, frame)

    def deliver_direct(self, node: str, frame: Frame, delay: int = 1):
        """Out-of-band delivery used when a non-infrastructure node has been
        pulled into the control plane (e.g. a hijacked master election)."""
        self.counters.copies += 1
        self.schedule(self.now + delay, self._arrive, node, 0, frame)

    # -- topology dynamics ---------------------------------------------------

    def set_link_state(self, link_id: str, up: bool):
        link = self.topo.links[link_id]
        if link.up == up:
            return
        link.up = up
        self.counters.link_status_events += 1
        self.trace.emit(self.now, "link_status", link=link_id, up=up)
        for node, port in (link.a, link.b):
            n = self.topo.nodes[node]
            if n.alive and n.behavior is not None:
                n.behavior.on_link_status(port, up)

    def partition_link(self, link_id: str, at: int):
        if link_id not in self.topo.links:
            raise SimError(f"unknown link {link_id}")
        self.schedule(at, self.set_link_state, link_id, False)

    def heal_link(self, link_id: str, at: int):
        if link_id not in self.topo.links:
            raise SimError(f"unknown link {link_id}")
        self.schedule(at, self.set_link_state, link_id, True)

    def kill_node(self, node_id: str, at: int):
        def down():
            node = self.topo.nodes[node_id]
            node.alive = False
            self.trace.emit(self.now, "node_down", node=node_id)
            for port in list(node.ports.values()):
                if port.link_id and self.topo.links[port.link_id].up:
                    self.set_link_state(port.link_id, False)
        self.schedule(at, down)

    # -- run ----------------------------------------------------------------

    def run(self):
        while self._heap:
            tick, _seq, fn, args = self._heap[0]
            if tick > self.horizon:
                break
            heapq.heappop(self._heap)
            self.now = tick
            fn(*args)
        self.now = self.horizon
        self._finished = True
        arrive = self._arrive
        self.counters.in_flight = sum(
            1 for (_t, _s, fn, _a) in self._heap if fn == arrive)
        self.trace.emit(self.now, "end", in_flight=self.counters.in_flight)


class NodeCtx:
    """A behavior's handle on the engine, bound to its node."""

    def __init__(self, engine: Engine, node: Node):
        self.engine = engine
        self.node = node

    @property
    def now(self) -> int:
        return self.engine.now

    @property
    def node_id(self) -> str:
        return self.node.id

    def send(self, port: int, frame: Frame):
        if not self.node.alive:
            return
        self.engine.transmit(self.node.id, port, frame)

    def new_frame(self, **kw) -> Frame:
        return self.engine.new_frame(**kw)

    def data_ports(self) -> list[int]:
        return sorted(p for p, d in self.node.ports.items()
                      if d.role != CONTROLLER_PORT)

    def control_ports(self) -> list[int]:
        return sorted(p for p, d in self.node.ports.items()
                      if d.role == CONTROLLER_PORT)

    def port_role(self, port: int) -> str:
        return self.node.ports[port].role

    def port_up(self, port: int) -> bool:
        link = self.engine.topo.link_at(self.node.id, port)
        return bool(link and link.up)

    def peer_of(self, port: int) -> Optional[tuple]:
        link = self.engine.topo.link_at(self.node.id, port)
        return link.other_end(self.node.id, port) if link else None

    def schedule_in(self, dticks: int, fn: Callable, *args):
        self.engine.schedule(self.engine.now + dticks, fn, *args)

    def every(self, start: int, period: int, fn: Callable):
        def guarded():
            if self.node.alive:
                fn()
        self.engine.schedule_every(start, period, guarded)

    def emit(self, ev: str, **fields):
        self.engine.trace.emit(self.engine.now, ev, node=self.node.id, **fields)

    def drop(self, frame: Frame, reason: str, port: Optional[int] = None):
        self.engine.counters.node_drops[reason] += 1
        self.engine.trace.emit(self.engine.now, "drop", fid=frame.frame_id,
                               node=self.node.id, port=port, reason=reason)

    def delivered(self, frame: Frame):
        self.engine.counters.delivered[self.node.id] += 1
        self.engine.trace.emit(self.engine.now, "recv", fid=frame.frame_id,
                               node=self.node.id, kind=frame.kind,
                               src=frame.src_mac, dst=frame.dst_mac,
                               ip_dst=frame.ip_dst, adv=frame.adversarial)

    def defense_block(self, policy_kind: str, port: Optional[int], frame: Frame,
                      reason: str):
        where = f"{policy_kind}@{self.node.id}" + (f":{port}" if port is not None else "")
        self.engine.counters.defense_blocks[where] += 1
        self.engine.trace.emit(self.engine.now, "defense_block", fid=frame.frame_id,
                               node=self.node.id, port=port, policy=policy_kind,
                               reason=reason)
