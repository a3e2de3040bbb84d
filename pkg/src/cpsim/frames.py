"""Typed control payloads carried inside Frame.payload."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional


@dataclass
class Bpdu:
    claimed_root: tuple       # (priority, bridge mac/id), totally ordered
    sender_bridge: tuple
    cumulative_path_cost: int
    sender_port: int

    def __post_init__(self):
        if self.cumulative_path_cost < 0:
            raise ValueError("BPDU path cost must be non-negative")


@dataclass
class Lacpdu:
    actor: str                # system id of the sender
    group: int
    member_ref: Optional[int] = None  # receiver member port, when not point-to-point


@dataclass
class ArpMsg:
    op: str                   # "request" | "reply"
    sender_ip: str
    sender_mac: str
    target_ip: str
    target_mac: Optional[str] = None


@dataclass
class Lsa:
    origin: str
    links: tuple              # ((neighbor_id, cost), ...)
    seq: int
    prefixes: tuple = ()      # prefixes attached to the origin
    router_ip: Optional[str] = None  # where the origin can be reached on-link

    def __post_init__(self):
        if self.seq < 0:
            raise ValueError("LSA seq must be non-negative")


@dataclass
class VrrpAdvert:
    virtual_ip: str
    priority: int
    router_ip: str


@dataclass
class Lldp:
    chassis: str
    port: int
    nonce: str = ""


@dataclass
class ElectionMsg:
    scope: str                # "STACK" | "CTRL"
    group: str
    candidate: str
    priority: int
    hops: int = 0             # relay bound for stack gossip


@dataclass
class TrunkNeg:
    requester: str
    allowed: tuple


@dataclass
class FabricEncap:
    inner: Any
    ingress_edge: str
    egress_edge: Optional[str]  # None when flooded to all edges


@dataclass
class TunnelEncap:
    inner: Any
    ingress: str
    egress: str


# OpenFlow-style controller/switch messages -------------------------------

@dataclass
class PacketIn:
    switch: str
    in_port: int
    inner: Any


@dataclass
class PacketOut:
    switch: str
    out: tuple                # ("port", p) | ("ports", (p, ...)) | ("lldp_all",)
    inner: Any = None


@dataclass
class FlowRule:
    priority: int
    match: dict               # in_port / eth_src / eth_dst / vlan / ip_src / ip_dst
    action: tuple             # ("forward", port) | ("group", gid) | ("flood",)
                              # | ("to_controller",) | ("drop",)
                              # | ("push_tunnel", ingress, egress, port)
                              # | ("pop_tunnel",)


@dataclass
class FlowMod:
    switch: str
    rule: FlowRule


@dataclass
class GroupMod:
    switch: str
    group: int
    live_members: tuple


@dataclass
class PortStatus:
    switch: str
    port: int
    up: bool


@dataclass
class MasterAnnounce:
    master: str


@dataclass
class StoreSnapshot:
    origin: str
    version_vector: dict      # replica -> write counter
    entries: tuple            # ((key, value, stamp), ...); stamp = (tick, writer, seq)
