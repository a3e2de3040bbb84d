"""Conventional L2 switching: MAC learning/forwarding, spanning tree, link
aggregation, stack-master election, VLANs, and the abstract fabric overlay.

The spanning-tree logic lives in StpNode, a pure state machine, so tests can
drive it synchronously over thousands of graphs without the event engine.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Optional

from . import defenses, engine as eng
from .engine import Behavior, Frame
from .frames import Bpdu, ElectionMsg, FabricEncap, Lacpdu, TrunkNeg

ROOT = "ROOT"
DESIGNATED = "DESIGNATED"
BLOCKED = "BLOCKED"

BPDU_PERIOD = 10      # periodic BPDU refresh; changes also trigger emission
BPDU_MAX_AGE = 3 * BPDU_PERIOD  # stale port info expires so a dead root ages out
LACP_PERIOD = 5
LACP_DEAD = 3 * LACP_PERIOD
STACK_PERIOD = 5
STACK_DEAD = 3 * STACK_PERIOD
STACK_PAUSE = 5       # forwarding pause while the stack reconverges
CONVERGE_K = 5        # quiet ticks after which control state counts as converged
FABRIC_TTL = 8
FAB_BCAST = "01:fab:ff"


def fabric_mac(node_id: str) -> str:
    return f"fab:{node_id}"


class StpNode:
    """Spanning-tree state for one switch over its logical ports.

    Logical ports are ints; a LAG is represented by its lowest member port so
    member failures never change spanning-tree identity. Tie-breaking follows
    (path cost, neighbor bridge id, local port id).
    """

    def __init__(self, bridge_id: tuple, ports, costs: dict):
        self.bridge_id = bridge_id
        self.ports = sorted(ports)
        self.costs = dict(costs)
        self.port_best: dict[int, Bpdu] = {}
        self.root_id = bridge_id
        self.root_cost = 0
        self.root_port: Optional[int] = None
        self.roles = {p: DESIGNATED for p in self.ports}

    def receive(self, port: int, bpdu: Bpdu) -> bool:
        self.port_best[port] = bpdu
        return self.recompute()

    def clear_port(self, port: int) -> bool:
        self.port_best.pop(port, None)
        return self.recompute()

    def recompute(self) -> bool:
        old = (self.root_id, self.root_cost, self.root_port, self.roles)
        best_root = self.bridge_id
        for info in self.port_best.values():
            if info.claimed_root < best_root:
                best_root = info.claimed_root
        if best_root == self.bridge_id:
            self.root_id, self.root_cost, self.root_port = self.bridge_id, 0, None
        else:
            candidates = []
            for p in self.ports:
                info = self.port_best.get(p)
                if info is not None and info.claimed_root == best_root:
                    candidates.append(
                        (info.cumulative_path_cost + self.costs.get(p, 1),
                         info.sender_bridge, p))
            cost, _nbr, rp = min(candidates)
            self.root_id, self.root_cost, self.root_port = best_root, cost, rp
        my_vec = (self.root_id, self.root_cost, self.bridge_id)
        roles = {}
        for p in self.ports:
            if p == self.root_port:
                roles[p] = ROOT
                continue
            info = self.port_best.get(p)
            if info is None:
                roles[p] = DESIGNATED
            else:
                peer_vec = (info.claimed_root, info.cumulative_path_cost,
                            info.sender_bridge)
                roles[p] = DESIGNATED if my_vec < peer_vec else BLOCKED
        self.roles = roles
        return (self.root_id, self.root_cost, self.root_port, self.roles) != old

    def bpdus(self) -> dict:
        """BPDUs to emit: designated ports only, so blocked links carry
        control traffic one-way."""
        out = {}
        for p in self.ports:
            if self.roles.get(p) == DESIGNATED:
                out[p] = Bpdu(self.root_id, self.bridge_id, self.root_cost, p)
        return out

    def snapshot(self) -> tuple:
        return (self.root_id, self.root_cost, self.root_port,
                tuple(sorted(self.roles.items())))


def run_stp_exchange(nodes: dict, links: list, max_rounds: int = 64) -> dict:
    """Synchronously run StpNode instances to convergence.

    nodes: bridge_id -> StpNode; links: ((id_a, port_a), (id_b, port_b)).
    Deterministic: all emissions of a round are delivered before the next.
    Returns the nodes dict once no state changes for a full round.
    """
    index = {}
    for (a, pa), (b, pb) in links:
        index[(a, pa)] = (b, pb)
        index[(b, pb)] = (a, pa)
    for _ in range(max_rounds):
        inbox = []
        for nid in sorted(nodes):
            for port, bpdu in nodes[nid].bpdus().items():
                if (nid, port) in index:
                    dst, dport = index[(nid, port)]
                    inbox.append((dst, dport, bpdu))
        changed = False
        for dst, dport, bpdu in inbox:
            if nodes[dst].receive(dport, bpdu):
                changed = True
        if not changed:
            return nodes
    raise eng.SimError("spanning tree failed to converge")


def stp_tree_edges(nodes: dict, links: list) -> set:
    """Tree edge set implied by converged root ports."""
    port_link = {}
    for (a, pa), (b, pb) in links:
        port_link[(a, pa)] = frozenset(((a, pa), (b, pb)))
        port_link[(b, pb)] = frozenset(((a, pa), (b, pb)))
    edges = set()
    for nid, node in nodes.items():
        if node.root_port is not None:
            edges.add(port_link[(nid, node.root_port)])
    return edges


class SwitchBehavior(Behavior):
    def __init__(self, node):
        cfg = node.config
        self.node = node
        self.stp_enabled = cfg.get("stp", True)
        self.bridge_id = (cfg.get("stp_priority", 100), node.id)
        self.mac_capacity = cfg.get("mac_capacity", 1024)
        self.mac_table: "OrderedDict[str, tuple]" = OrderedDict()  # mac -> (lport, vlan, tick)
        self.vlan_cfg = {int(k): dict(v) for k, v in cfg.get("vlans", {}).items()}
        self.autoneg = cfg.get("vlan_autoneg", False)
        self.fabric_role = cfg.get("fabric", "none")
        self.lag_cfg = {int(g["id"]): g for g in cfg.get("lags", [])}
        self.stack_cfg = cfg.get("stack")
        self.stp: Optional[StpNode] = None
        self.lags: dict[int, dict] = {}
        self.port_canon: dict[int, int] = {}
        self.lp_members: dict[int, list] = {}
        self.fabric_ports: set = set()
        self.edge_map: dict[str, str] = {}  # remote end-host mac -> egress edge
        self.stack_candidates: dict[str, tuple] = {}
        self.stack_master: Optional[str] = None
        self.stack_pause_until = -1
        self.stp_rx_tick: dict[int, int] = {}

    # -- lifecycle -----------------------------------------------------------

    def start(self):
        ctx = self.ctx
        ports = ctx.data_ports()
        in_lag = set()
        for gid, g in self.lag_cfg.items():
            members = sorted(int(p) for p in g["ports"])
            canon = members[0]
            self.lags[gid] = {
                "members": members, "partner": g["partner"],
                "active": {p: False for p in members},
                "last_ok": {p: -10**9 for p in members},
            }
            for p in members:
                self.port_canon[p] = canon
                in_lag.add(p)
            self.lp_members[canon] = members
        for p in ports:
            if p not in in_lag:
                self.port_canon[p] = p
                self.lp_members[p] = [p]
        if self.fabric_role in ("edge", "core"):
            for p in ports:
                peer = ctx.peer_of(p)
                if peer is not None:
                    role = ctx.engine.topo.nodes[peer[0]].config.get("fabric", "none")
                    if role in ("edge", "core"):
                        self.fabric_ports.add(p)
        if self.stp_enabled:
            costs = {}
            for canon, members in self.lp_members.items():
                link = ctx.engine.topo.link_at(self.node.id, members[0])
                costs[canon] = link.cost if link else 1
            self.stp = StpNode(self.bridge_id, self.lp_members.keys(), costs)
            ctx.every(1, BPDU_PERIOD, self.emit_bpdus)
        if self.lags:
            ctx.every(1, LACP_PERIOD, self.lacp_tick)
        if self.stack_cfg:
            ctx.every(1, STACK_PERIOD, self.stack_tick)

    # -- frame entry ---------------------------------------------------------

    def on_frame(self, port: int, frame: Frame):
        pdesc = self.node.ports[port]
        if defenses.apply_ingress(self.ctx, pdesc, frame) is not None:
            return
        if frame.kind == eng.BPDU and self.stp_enabled:
            self.stp_receive(port, frame)
            return
        if frame.kind == eng.LACPDU and self.lags:
            self.lacp_receive(port, frame)
            return
        if (frame.kind == eng.ELECTION and self.stack_cfg
                and isinstance(frame.payload, ElectionMsg)
                and frame.payload.scope == "STACK"):
            self.stack_receive(port, frame)
            return
        if frame.kind == eng.TRUNK_NEG:
            self.trunk_negotiate(port, frame)
            return
        self.data_path(port, frame)

    def on_link_status(self, port: int, up: bool):
        canon = self.port_canon.get(port)
        if canon is None:
            return
        lag = self._lag_of_port(port)
        if lag is not None and not up:
            if lag["active"].get(port):
                lag["active"][port] = False
                self.ctx.emit("lag_member_down", port=port)
            return  # LAG identity survives single-member failure
        if self.stp is not None and not up:
            if self.stp.clear_port(canon):
                self._stp_changed()

    # -- spanning tree -------------------------------------------------------

    def stp_receive(self, port: int, frame: Frame):
        if not isinstance(frame.payload, Bpdu):
            self.ctx.drop(frame, "malformed_bpdu", port)
            return
        canon = self.port_canon.get(port, port)
        self.stp_rx_tick[canon] = self.ctx.now
        if self.stp.receive(canon, frame.payload):
            self._stp_changed()

    def _stp_changed(self):
        ctx = self.ctx
        ctx.engine.counters.stp_state_changes += 1
        root, cost, rp, roles = self.stp.snapshot()
        ctx.emit("stp_state", root=list(root), cost=cost, root_port=rp,
                 blocked=[p for p, r in roles if r == BLOCKED])
        if self.mac_table:
            # topology change: stale entries would blackhole re-routed flows
            self.mac_table.clear()
            ctx.emit("mac_flush")
        self.emit_bpdus()

    def emit_bpdus(self):
        if self.stp is None:
            return
        now = self.ctx.now
        expired = [lp for lp, t in self.stp_rx_tick.items()
                   if lp in self.stp.port_best and now - t > BPDU_MAX_AGE]
        for lp in expired:
            del self.stp_rx_tick[lp]
            if self.stp.clear_port(lp):
                self.ctx.engine.counters.stp_state_changes += 1
                root, cost, rp, roles = self.stp.snapshot()
                self.ctx.emit("stp_state", root=list(root), cost=cost,
                              root_port=rp,
                              blocked=[p for p, r in roles if r == BLOCKED])
        for canon, bpdu in self.stp.bpdus().items():
            frame = self.ctx.new_frame(
                src_mac=eng.iface_mac(self.node.id, canon), dst_mac=eng.MCAST_STP,
                kind=eng.BPDU, payload=bpdu)
            self._send_logical(canon, frame)

    def stp_state_hash(self) -> int:
        return eng.stable_hash(self.stp.snapshot()) if self.stp else 0

    # -- LACP ----------------------------------------------------------------

    def _lag_of_port(self, port: int) -> Optional[dict]:
        for lag in self.lags.values():
            if port in lag["members"]:
                return lag
        return None

    def lacp_tick(self):
        now = self.ctx.now
        for gid, lag in sorted(self.lags.items()):
            for p in lag["members"]:
                if lag["active"][p] and now - lag["last_ok"][p] > LACP_DEAD:
                    lag["active"][p] = False
                    self.ctx.emit("lag_member_down", port=p)
                frame = self.ctx.new_frame(
                    src_mac=eng.iface_mac(self.node.id, p), dst_mac=eng.MCAST_LACP,
                    kind=eng.LACPDU, payload=Lacpdu(self.node.id, gid))
                self.ctx.send(p, frame)

    def lacp_receive(self, port: int, frame: Frame):
        pdu = frame.payload
        if not isinstance(pdu, Lacpdu) or pdu.group not in self.lags:
            self.ctx.drop(frame, "malformed_lacpdu", port)
            return
        lag = self.lags[pdu.group]
        # LACP runs in the CPU, so a PDU arriving on any port can steer a
        # member's state unless it was filtered at ingress.
        member = port if port in lag["members"] else pdu.member_ref
        if member not in lag["members"]:
            self.ctx.drop(frame, "lacp_unknown_member", port)
            return
        if pdu.actor == lag["partner"]:
            if not lag["active"][member]:
                lag["active"][member] = True
                self.ctx.emit("lag_member_up", port=member)
            lag["last_ok"][member] = self.ctx.now
        else:
            if lag["active"][member]:
                lag["active"][member] = False
                self.ctx.engine.counters.lag_flaps += 1
                self.ctx.emit("lag_flap", port=member, reason="PartnerMismatch",
                              actor=pdu.actor)

    def lag_active_members(self, canon: int) -> list:
        members = self.lp_members[canon]
        if len(members) == 1:
            return members
        lag = self._lag_of_port(members[0])
        active = [p for p in members if lag["active"][p] and self.ctx.port_up(p)]
        if active:
            return active
        # Before the first LACPDU exchange completes fall back to whatever is
        # physically up rather than blackholing early traffic.
        return [p for p in members if self.ctx.port_up(p)]

    # -- stack election ------------------------------------------------------

    def stack_tick(self):
        cfg = self.stack_cfg
        now = self.ctx.now
        for cand in list(self.stack_candidates):
            if now - self.stack_candidates[cand][1] > STACK_DEAD:
                del self.stack_candidates[cand]
        self._stack_recompute()
        msg = ElectionMsg("STACK", cfg["group"], self.node.id,
                          cfg.get("priority", 100))
        for p in sorted(int(x) for x in cfg.get("ports", [])):
            frame = self.ctx.new_frame(
                src_mac=eng.iface_mac(self.node.id, p), dst_mac=eng.MCAST_ELECT,
                kind=eng.ELECTION, payload=msg)
            self.ctx.send(p, frame)

    def stack_receive(self, port: int, frame: Frame):
        msg = frame.payload
        if msg.group != self.stack_cfg["group"]:
            self.ctx.drop(frame, "stack_wrong_group", port)
            return
        if msg.candidate != self.node.id:
            self.stack_candidates[msg.candidate] = (msg.priority, self.ctx.now)
            self._stack_recompute()
        # Relay across the stack, hop-bounded, so every member hears every
        # candidacy even in chains and rings.
        if msg.hops < 8:
            relayed = frame.copy(payload=ElectionMsg(
                msg.scope, msg.group, msg.candidate, msg.priority, msg.hops + 1))
            for p in sorted(int(x) for x in self.stack_cfg.get("ports", [])):
                if p != port:
                    self.ctx.send(p, relayed)

    def _stack_recompute(self):
        # Lower (priority, bridge id) wins the stack election.
        best = (self.stack_cfg.get("priority", 100), self.node.id)
        for cand, (pri, _seen) in self.stack_candidates.items():
            best = min(best, (pri, cand))
        winner = best[1]
        if winner != self.stack_master:
            self.stack_master = winner
            self.stack_pause_until = self.ctx.now + STACK_PAUSE
            self.ctx.emit("elect", scope="stack", group=self.stack_cfg["group"],
                          master=winner)

    # -- VLAN classification ---------------------------------------------------

    def port_vlan(self, port: int) -> dict:
        return self.vlan_cfg.get(port, {"mode": "access", "vlan": 1})

    def vlan_ingress(self, port: int, frame: Frame):
        """Classify into a VLAN; returns (vlan, frame) or None if dropped."""
        cfg = self.port_vlan(port)
        tags = frame.vlan_tags
        if cfg["mode"] == "access":
            if not tags:
                return cfg["vlan"], frame
            pdesc = self.node.ports[port]
            if defenses.has_port_policy(pdesc, defenses.VLAN_TAG_FILTER):
                stripped = frame.copy(vlan_tags=())
                self.ctx.defense_block(defenses.VLAN_TAG_FILTER, port, frame,
                                       "StripTags")
                return cfg["vlan"], stripped
            if tags[0] != cfg["vlan"]:
                self.ctx.drop(frame, "DisallowedVlan", port)
                return None
            # Classify by the outer tag; inner tags ride along opaquely,
            # which is exactly what double encapsulation exploits.
            return tags[0], frame.copy(vlan_tags=tags[1:])
        allowed = cfg.get("allowed", [])
        if tags:
            if tags[0] not in allowed:
                self.ctx.drop(frame, "DisallowedVlan", port)
                return None
            return tags[0], frame.copy(vlan_tags=tags[1:])
        return cfg.get("native", 1), frame

    def _port_in_vlan(self, port: int, vlan: int) -> bool:
        cfg = self.port_vlan(port)
        if cfg["mode"] == "access":
            return cfg["vlan"] == vlan
        return vlan in cfg.get("allowed", [])

    def _egress(self, port: int, vlan: int, frame: Frame) -> Frame:
        cfg = self.port_vlan(port)
        if cfg["mode"] == "trunk" and vlan != cfg.get("native", 1):
            return frame.copy(vlan_tags=(vlan,) + frame.vlan_tags)
        return frame

    def trunk_negotiate(self, port: int, frame: Frame):
        if not self.autoneg:
            self.ctx.drop(frame, "trunk_neg_refused", port)
            return
        neg = frame.payload
        cfg = self.port_vlan(port)
        if cfg["mode"] == "access" and isinstance(neg, TrunkNeg):
            self.vlan_cfg[port] = {"mode": "trunk", "allowed": list(neg.allowed),
                                   "native": cfg["vlan"]}
            self.ctx.emit("port_mode_change", port=port, mode="trunk",
                          allowed=list(neg.allowed))

    # -- data plane ------------------------------------------------------------

    def data_path(self, port: int, frame: Frame):
        canon = self.port_canon.get(port, port)
        if self.stp is not None and self.stp.roles.get(canon) == BLOCKED:
            self.ctx.drop(frame, "stp_blocked", port)
            return
        if self.stack_cfg and (self.stack_master is None
                               or self.ctx.now < self.stack_pause_until):
            self.ctx.drop(frame, "stack_reconverging", port)
            return
        res = self.vlan_ingress(port, frame)
        if res is None:
            return
        vlan, frame = res
        if self.fabric_role == "edge":
            self.fabric_edge(port, vlan, frame)
            return
        if self.fabric_role == "core":
            self.fabric_core(port, vlan, frame)
            return
        self.mac_learn(frame.src_mac, canon, vlan)
        for out in self.forward_ports(frame.dst_mac, canon, vlan):
            self._send_logical(out, self._egress(self.lp_members[out][0], vlan, frame))

    def mac_learn(self, mac: str, lport: int, vlan: int):
        now = self.ctx.now
        if mac in self.mac_table:
            old = self.mac_table[mac]
            self.mac_table[mac] = (lport, vlan, now)
            self.mac_table.move_to_end(mac)
            if (old[0], old[1]) != (lport, vlan):
                self.ctx.emit("mac_move", mac=mac, port=lport, vlan=vlan)
            return
        if len(self.mac_table) >= self.mac_capacity:
            evicted, _ = self.mac_table.popitem(last=False)
            self.ctx.emit("mac_evict", mac=evicted)
        self.mac_table[mac] = (lport, vlan, now)
        self.ctx.emit("mac_learn", mac=mac, port=lport, vlan=vlan,
                      size=len(self.mac_table))

    def forward_ports(self, dst: str, in_lport: int, vlan: int) -> list:
        if not eng.is_multicast(dst):
            entry = self.mac_table.get(dst)
            if entry is not None and entry[1] == vlan:
                out = entry[0]
                if out == in_lport:
                    return []  # never hairpin out the receiving port
                if ((self.stp is None or self.stp.roles.get(out) != BLOCKED)
                        and self._port_in_vlan(self.lp_members[out][0], vlan)):
                    return [out]
        flood = []
        for lp in sorted(self.lp_members):
            if lp == in_lport:
                continue
            if self.stp is not None and self.stp.roles.get(lp) == BLOCKED:
                continue
            if not self._port_in_vlan(self.lp_members[lp][0], vlan):
                continue
            flood.append(lp)
        return flood

    def _send_logical(self, lport: int, frame: Frame):
        members = self.lag_active_members(lport)
        if not members:
            self.ctx.drop(frame, "lag_no_members", lport)
            return
        if len(members) == 1:
            self.ctx.send(members[0], frame)
            return
        pick = members[eng.stable_hash(frame.src_mac, frame.dst_mac,
                                       frame.flow_label) % len(members)]
        self.ctx.send(pick, frame)

    # -- fabric overlay ---------------------------------------------------------

    def fabric_edge(self, port: int, vlan: int, frame: Frame):
        ctx = self.ctx
        my_fab = fabric_mac(self.node.id)
        if port in self.fabric_ports:
            if not isinstance(frame.payload, FabricEncap):
                ctx.drop(frame, "fabric_unexpected", port)
                return
            if frame.dst_mac not in (my_fab, FAB_BCAST):
                # Transit encap frame passing through an edge: forward on the
                # outer header like a core would, without learning inner MACs.
                self.fabric_core(port, vlan, frame)
                return
            enc = frame.payload
            self.edge_map[enc.inner.src_mac] = enc.ingress_edge
            # Remember which uplink reaches the remote edge; inner end-host
            # MACs stay out of the table (only edge_map tracks them).
            self.mac_learn(frame.src_mac, self.port_canon.get(port, port), vlan)
            inner = enc.inner
            canon = self.port_canon.get(port, port)
            for out in self.forward_ports(inner.dst_mac, canon, vlan):
                if self.lp_members[out][0] in self.fabric_ports:
                    continue
                ctx.send(self.lp_members[out][0],
                         self._egress(self.lp_members[out][0], vlan, inner))
            return
        # Host-side ingress: learn locally, then either deliver locally or
        # encapsulate toward the egress edge.
        canon = self.port_canon.get(port, port)
        self.mac_learn(frame.src_mac, canon, vlan)
        entry = self.mac_table.get(frame.dst_mac)
        if (not eng.is_multicast(frame.dst_mac) and entry is not None
                and self.lp_members[entry[0]][0] not in self.fabric_ports):
            if entry[0] != canon:
                ctx.send(self.lp_members[entry[0]][0],
                         self._egress(self.lp_members[entry[0]][0], vlan, frame))
            return
        egress = self.edge_map.get(frame.dst_mac)
        outer_dst = fabric_mac(egress) if egress else FAB_BCAST
        ttl = self.node.config.get("fabric_ttl", FABRIC_TTL)
        enc = ctx.new_frame(src_mac=my_fab, dst_mac=outer_dst, kind=eng.DATA,
                            ttl=ttl,
                            payload=FabricEncap(frame, self.node.id, egress),
                            adversarial=frame.adversarial)
        uplinks = [p for p in sorted(self.fabric_ports)
                   if self.stp is None
                   or self.stp.roles.get(self.port_canon.get(p, p)) != BLOCKED]
        known = self.mac_table.get(outer_dst)
        if outer_dst != FAB_BCAST and known is not None \
                and self.lp_members[known[0]][0] in self.fabric_ports:
            uplinks = [self.lp_members[known[0]][0]]
        elif outer_dst != FAB_BCAST and uplinks:
            uplinks = uplinks[:1]
        for p in uplinks:
            ctx.send(p, enc)
        # local flood for unknown/broadcast destinations
        if egress is None:
            for lp in sorted(self.lp_members):
                p = self.lp_members[lp][0]
                if p in self.fabric_ports or lp == canon:
                    continue
                if self.stp is not None and self.stp.roles.get(lp) == BLOCKED:
                    continue
                if self._port_in_vlan(p, vlan):
                    ctx.send(p, self._egress(p, vlan, frame))

    def fabric_core(self, port: int, vlan: int, frame: Frame):
        # Core switches forward on the outer header only and never see
        # end-host addresses; the outer TTL bounds any transient loop.
        ctx = self.ctx
        if frame.ttl is not None:
            frame = frame.copy(ttl=frame.ttl - 1)
            if frame.ttl <= 0:
                ctx.drop(frame, "TtlExpired", port)
                return
        canon = self.port_canon.get(port, port)
        self.mac_learn(frame.src_mac, canon, vlan)
        for out in self.forward_ports(frame.dst_mac, canon, vlan):
            ctx.send(self.lp_members[out][0], frame)
