"""Pure SDN: flow-table switches speaking an OpenFlow-like message set, and
replicated controllers doing host learning, LLDP topology discovery, group
based link redundancy, master election, store sync, and tunnel fabrics.

The route computation path runs through a three-stage pipeline (collect and
validate, compute, install). With n_version >= 2 the compute stage runs
multiple instances whose outputs are cross-checked; any divergence vetoes
rule installation (fail closed).
"""
from __future__ import annotations

from typing import Optional

from . import defenses, engine as eng
from .engine import Behavior, Frame
from .frames import (ElectionMsg, FlowMod, FlowRule, GroupMod, Lldp,
                     MasterAnnounce, PacketIn, PacketOut, PortStatus,
                     StoreSnapshot, TunnelEncap)

ELECT_PERIOD = 5
ELECT_DEAD = 3 * ELECT_PERIOD
SYNC_PERIOD = 10
DISCOVERY_PERIOD = 20
PROBE_WAIT = 5
MISS_BUFFER = 64
TS_SKEW = 2  # max forward clock skew a sync stamp may carry


def tunnel_mac(edge: str) -> str:
    return f"tun:{edge}"


class SdnSwitchBehavior(Behavior):
    def __init__(self, node):
        self.node = node
        cfg = node.config
        self.capacity = cfg.get("flow_capacity", 1024)
        self.groups = {int(g): sorted(int(p) for p in ports)
                       for g, ports in cfg.get("groups", {}).items()}
        self.groups_live = {g: list(m) for g, m in self.groups.items()}
        self.rules: list[tuple] = []  # (-priority, seq, FlowRule)
        self._rule_seq = 0
        self.master: Optional[str] = None
        self.buffer: list[tuple] = []
        self.controller_ports: dict[str, int] = {}

    def start(self):
        for p in self.ctx.control_ports():
            peer = self.ctx.peer_of(p)
            if peer is not None:
                self.controller_ports[peer[0]] = p

    # -- flow table ----------------------------------------------------------

    def install(self, rule: FlowRule) -> bool:
        if rule.action and rule.action[0] == "delete_dst":
            mac = rule.action[1]
            self.rules = [r for r in self.rules if r[2].match.get("eth_dst") != mac]
            return True
        for i, (_p, _s, existing) in enumerate(self.rules):
            if existing.priority == rule.priority and existing.match == rule.match:
                self.rules[i] = (-rule.priority, self.rules[i][1], rule)
                self.rules.sort()
                return True
        if len(self.rules) >= self.capacity:
            self.ctx.engine.counters.flow_mod_rejects += 1
            self.ctx.emit("flow_mod_reject", size=len(self.rules))
            return False
        self._rule_seq += 1
        self.rules.append((-rule.priority, self._rule_seq, rule))
        self.rules.sort()
        return True

    def match(self, frame: Frame, in_port: int) -> Optional[FlowRule]:
        vlan = frame.vlan_tags[0] if frame.vlan_tags else None
        for _p, _s, rule in self.rules:
            m = rule.match
            if "in_port" in m and m["in_port"] != in_port:
                continue
            if "eth_src" in m and m["eth_src"] != frame.src_mac:
                continue
            if "eth_dst" in m and m["eth_dst"] != frame.dst_mac:
                continue
            if "vlan" in m and m["vlan"] != vlan:
                continue
            if "ip_src" in m and m["ip_src"] != frame.ip_src:
                continue
            if "ip_dst" in m and m["ip_dst"] != frame.ip_dst:
                continue
            return rule
        return None

    # -- frames ----------------------------------------------------------------

    def on_frame(self, port: int, frame: Frame):
        pdesc = self.node.ports[port]
        if pdesc.role == eng.CONTROLLER_PORT:
            if frame.kind == eng.OFMSG:
                self.from_controller(frame)
            return
        if defenses.apply_ingress(self.ctx, pdesc, frame) is not None:
            return
        if frame.kind == eng.LLDP:
            if isinstance(frame.payload, Lldp) and frame.payload.chassis == self.node.id:
                self.ctx.drop(frame, "lldp_self_claim", port)
                return
            self.packet_in(frame, port)
            return
        if frame.kind in (eng.OFMSG, eng.ELECTION, eng.SYNC):
            # Control PDUs arriving on data ports are punted to the control
            # channel (LACP-style CPU processing); UNI filters stop this.
            self.relay_control(frame)
            return
        self.pipeline(frame, port)

    def on_link_status(self, port: int, up: bool):
        status = PortStatus(self.node.id, port, up)
        frame = self.ctx.new_frame(
            src_mac=eng.iface_mac(self.node.id, port), dst_mac="controller",
            kind=eng.OFMSG, payload=status,
            auth_token=self.node.config.get("auth_token"))
        self._to_master(frame)

    def relay_control(self, frame: Frame):
        for ctl in sorted(self.controller_ports):
            self.ctx.send(self.controller_ports[ctl], frame)
        if self.master is not None and self.master not in self.controller_ports:
            self.ctx.engine.deliver_direct(self.master, frame)

    def _to_master(self, frame: Frame):
        if self.master is None:
            if len(self.buffer) >= MISS_BUFFER:
                self.ctx.engine.counters.buffer_overflows += 1
                self.ctx.drop(frame, "miss_buffer_overflow")
                return
            self.buffer.append(frame)
            self.ctx.engine.counters.buffered_misses += 1
            return
        port = self.controller_ports.get(self.master)
        if port is not None:
            self.ctx.send(port, frame)
        else:
            self.ctx.engine.deliver_direct(self.master, frame)

    def packet_in(self, frame: Frame, in_port: int):
        self.ctx.engine.counters.packet_ins += 1
        msg = self.ctx.new_frame(
            src_mac=eng.iface_mac(self.node.id, in_port), dst_mac="controller",
            kind=eng.OFMSG, payload=PacketIn(self.node.id, in_port, frame),
            auth_token=self.node.config.get("auth_token"),
            adversarial=frame.adversarial)
        self._to_master(msg)

    def from_controller(self, frame: Frame):
        payload = frame.payload
        if isinstance(payload, MasterAnnounce):
            if payload.master != self.master:
                self.master = payload.master
                self.ctx.emit("switch_master", master=payload.master)
                pending, self.buffer = self.buffer, []
                for f in pending:
                    self._to_master(f)
            return
        if isinstance(payload, FlowMod):
            ok = self.install(payload.rule)
            if ok:
                self.ctx.emit("flow_mod", match=payload.rule.match,
                              action=list(payload.rule.action),
                              priority=payload.rule.priority)
            return
        if isinstance(payload, GroupMod):
            self.groups_live[payload.group] = sorted(payload.live_members)
            self.ctx.emit("group_mod", group=payload.group,
                          live=sorted(payload.live_members))
            return
        if isinstance(payload, PacketOut):
            self.do_packet_out(payload)
            return

    def do_packet_out(self, po: PacketOut):
        if po.out[0] == "lldp_all":
            lldp_proto = po.inner
            for p in self.ctx.data_ports():
                payload = Lldp(self.node.id, p, lldp_proto.nonce)
                frame = self.ctx.new_frame(
                    src_mac=eng.iface_mac(self.node.id, p), dst_mac=eng.MCAST_LLDP,
                    kind=eng.LLDP, payload=payload)
                self.ctx.send(p, frame)
            return
        if po.out[0] == "port":
            self.ctx.send(po.out[1], po.inner)
            return
        if po.out[0] == "ports":
            for p in po.out[1]:
                self.ctx.send(p, po.inner)
            return

    # -- pipeline -----------------------------------------------------------------

    def pipeline(self, frame: Frame, in_port: int, reentry: bool = False):
        rule = self.match(frame, in_port)
        if rule is None:
            self.packet_in(frame, in_port)
            return
        act = rule.action
        if act[0] == "forward":
            self.ctx.send(act[1], frame)
        elif act[0] == "group":
            live = [p for p in self.groups_live.get(act[1], [])
                    if self.ctx.port_up(p)]
            if not live:
                self.ctx.drop(frame, "group_empty", in_port)
                return
            pick = live[eng.stable_hash(frame.src_mac, frame.dst_mac,
                                        frame.flow_label) % len(live)]
            self.ctx.send(pick, frame)
        elif act[0] == "flood":
            for p in self.ctx.data_ports():
                if p != in_port:
                    self.ctx.send(p, frame)
        elif act[0] == "to_controller":
            self.packet_in(frame, in_port)
        elif act[0] == "drop":
            self.ctx.drop(frame, "rule_drop", in_port)
        elif act[0] == "push_tunnel":
            _tag, ingress, egress, out_port = act
            enc = self.ctx.new_frame(
                src_mac=tunnel_mac(ingress), dst_mac=tunnel_mac(egress),
                kind=eng.DATA, payload=TunnelEncap(frame, ingress, egress),
                adversarial=frame.adversarial)
            self.ctx.send(out_port, enc)
        elif act[0] == "pop_tunnel":
            if isinstance(frame.payload, TunnelEncap) and not reentry:
                self.pipeline(frame.payload.inner, in_port, reentry=True)
            else:
                self.ctx.drop(frame, "bad_tunnel", in_port)


class ControllerBehavior(Behavior):
    def __init__(self, node):
        self.node = node
        cfg = node.config
        self.priority = cfg.get("priority", 100)
        self.sync_period = cfg.get("sync_period", SYNC_PERIOD)
        self.discovery_period = cfg.get("discovery_period", DISCOVERY_PERIOD)
        self.profile_capacity = cfg.get("profile_capacity", 4096)
        self.n_version = cfg.get("n_version", 1)
        self.fabric_roles = {k: v for k, v in cfg.get("fabric_roles", {}).items()}
        self.switch_groups = {s: {int(g): sorted(int(p) for p in m)
                                  for g, m in gs.items()}
                              for s, gs in cfg.get("switch_groups", {}).items()}
        self.nonce = cfg.get("nonce", "nonce:0")
        self.compromised_route = cfg.get("compromised_route")
        # election
        self.candidates: dict[str, tuple] = {}
        self.master_belief: Optional[str] = None
        # network state
        self.profiles: dict[tuple, dict] = {}   # (mac, vlan) -> profile
        self._prof_seq = 0
        self.obs: dict[tuple, tuple] = {}       # ((sw,p),(sw,p)) directed -> stamp
        self.port_live: dict[tuple, bool] = {}
        self.installed_pairs: set = set()
        self.pending_probes: dict[str, dict] = {}
        self.last_seen_at: dict[tuple, int] = {}
        self.vv: dict[str, int] = {}
        self._wseq = 0
        self.switch_ports: dict[str, int] = {}
        self.cluster_ports: dict[str, int] = {}
        self.core_rule_count = 0

    # -- lifecycle -------------------------------------------------------------

    def start(self):
        ctx = self.ctx
        for p in sorted(self.node.ports):
            peer = ctx.peer_of(p)
            if peer is None:
                continue
            kind = ctx.engine.topo.nodes[peer[0]].kind
            if kind == "sdn_switch":
                self.switch_ports[peer[0]] = p
            elif kind == "controller":
                self.cluster_ports[peer[0]] = p
        ctx.every(1, ELECT_PERIOD, self.election_tick)
        ctx.every(3, self.discovery_period, self.discovery_tick)
        ctx.every(4, self.sync_period, self.sync_tick)
        if self.fabric_roles:
            ctx.schedule_in(self.node.config.get("fabric_install_at", 45),
                            self.install_fabric)

    @property
    def is_master(self) -> bool:
        return self.master_belief == self.node.id

    def _stamp(self) -> tuple:
        self._wseq += 1
        self.vv[self.node.id] = self.vv.get(self.node.id, 0) + 1
        return (self.ctx.now, self.node.id, self._wseq)

    # -- election ----------------------------------------------------------------

    def election_tick(self):
        now = self.ctx.now
        for cand in list(self.candidates):
            if now - self.candidates[cand][1] > ELECT_DEAD:
                del self.candidates[cand]
        self._elect_recompute()
        msg = ElectionMsg("CTRL", "cluster", self.node.id, self.priority)
        for peer in sorted(self.cluster_ports):
            frame = self.ctx.new_frame(
                src_mac=eng.iface_mac(self.node.id, self.cluster_ports[peer]),
                dst_mac=eng.MCAST_ELECT, kind=eng.ELECTION, payload=msg,
                auth_token=self.node.config.get("auth_token"))
            self.ctx.send(self.cluster_ports[peer], frame)

    def _elect_recompute(self):
        best = (self.priority, self.node.id)
        for cand, (pri, _seen) in self.candidates.items():
            best = min(best, (pri, cand))
        winner = best[1]
        if winner != self.master_belief:
            self.master_belief = winner
            self.ctx.emit("elect", scope="ctrl", master=winner)
            for sw in sorted(self.switch_ports):
                frame = self.ctx.new_frame(
                    src_mac=eng.iface_mac(self.node.id, self.switch_ports[sw]),
                    dst_mac="switch", kind=eng.OFMSG,
                    payload=MasterAnnounce(winner))
                self.ctx.send(self.switch_ports[sw], frame)

    def on_election(self, frame: Frame):
        if not defenses.auth_gate(self.ctx, self.node, frame, (eng.ELECTION,)):
            return
        msg = frame.payload
        if msg.scope != "CTRL":
            return
        self.candidates[msg.candidate] = (msg.priority, self.ctx.now)
        self._elect_recompute()

    # -- discovery ----------------------------------------------------------------

    def discovery_tick(self):
        if not self.is_master:
            return
        for sw in sorted(self.switch_ports):
            po = PacketOut(sw, ("lldp_all",), Lldp("", 0, self.nonce))
            frame = self.ctx.new_frame(
                src_mac=eng.iface_mac(self.node.id, self.switch_ports[sw]),
                dst_mac="switch", kind=eng.OFMSG, payload=po)
            self.ctx.send(self.switch_ports[sw], frame)

    def on_lldp_report(self, pin: PacketIn, frame: Frame):
        lldp = pin.inner.payload
        if not isinstance(lldp, Lldp) or not lldp.chassis:
            self.ctx.drop(frame, "malformed_lldp")
            return
        pol = defenses.node_policy(self.node, defenses.LLDP_AUTH)
        if pol is not None and lldp.nonce != self.nonce:
            self.ctx.defense_block(defenses.LLDP_AUTH, None, frame, "BadNonce")
            return
        if lldp.chassis == pin.switch:
            self.ctx.drop(frame, "lldp_inconsistent")
            return
        src = (lldp.chassis, lldp.port)
        dst = (pin.switch, pin.in_port)
        if (src, dst) not in self.obs:
            self.obs[(src, dst)] = self._stamp()
            self.ctx.emit("topo_obs", src=list(src), dst=list(dst),
                          adv=frame.adversarial)

    def usable_links(self) -> set:
        """Inter-switch links the controller will route over. With the
        corroboration defense on, only bidirectionally observed links count."""
        corro = defenses.node_policy(self.node, defenses.CORROBORATION) is not None
        links = set()
        seen = {}
        for (src, dst) in self.obs:
            key = frozenset((src, dst))
            seen[key] = seen.get(key, 0) + 1
        for key, dirs in seen.items():
            ends = sorted(key)
            if any(self.port_live.get(end, True) is False for end in ends):
                continue
            if dirs >= 2 or not corro:
                links.add(key)
        return links

    def topology_divergence(self) -> int:
        truth = self.ctx.engine.topo.inter_switch_edges(kinds=("sdn_switch",))
        return len(self.usable_links() ^ truth)

    # -- host learning ---------------------------------------------------------------

    def on_packet_in(self, pin: PacketIn, frame: Frame):
        inner = pin.inner
        if inner.kind == eng.LLDP:
            self.on_lldp_report(pin, frame)
            return
        if not self.is_master:
            return
        if inner.src_mac.startswith("tun:"):
            return
        vlan = inner.vlan_tags[0] if inner.vlan_tags else 0
        key = (inner.src_mac, vlan)
        loc = (pin.switch, pin.in_port)
        self.last_seen_at[(inner.src_mac, pin.switch, pin.in_port)] = self.ctx.now
        prof = self.profiles.get(key)
        if prof is not None and (prof["switch"], prof["port"]) != loc:
            if not self._allow_move(key, prof, loc, inner):
                return
            prof.update(switch=loc[0], port=loc[1], tick=self.ctx.now,
                        stamp=self._stamp())
            self.ctx.emit("profile_move", mac=inner.src_mac, switch=loc[0],
                          port=loc[1], adv=frame.adversarial)
            self._reinstall_for(inner.src_mac)
        else:
            self._upsert_profile(key, inner, loc)
        self._respond(pin, inner, vlan)

    def _upsert_profile(self, key: tuple, inner: Frame, loc: tuple):
        prof = self.profiles.get(key)
        if prof is not None:
            prof["tick"] = self.ctx.now
            return
        if len(self.profiles) >= self.profile_capacity:
            oldest = min(self.profiles.items(),
                         key=lambda kv: (kv[1]["tick"], kv[1]["seq"]))[0]
            evicted = self.profiles.pop(oldest)
            self.ctx.emit("profile_evict", mac=oldest[0])
            self._gc_rules(oldest[0])
        self._prof_seq += 1
        self.profiles[key] = {
            "mac": inner.src_mac, "ip": inner.ip_src, "vlan": key[1],
            "switch": loc[0], "port": loc[1], "tick": self.ctx.now,
            "seq": self._prof_seq, "stamp": self._stamp(),
        }
        self.ctx.emit("profile_new", mac=inner.src_mac, switch=loc[0],
                      port=loc[1], size=len(self.profiles))

    def _allow_move(self, key: tuple, prof: dict, new_loc: tuple, inner: Frame) -> bool:
        if defenses.node_policy(self.node, defenses.LOCATION_VALIDATION) is None:
            return True
        mac = prof["mac"]
        old = (prof["switch"], prof["port"])
        if not self.ctx.engine.topo.links:  # degenerate topologies: allow
            return True
        old_link = self.ctx.engine.topo.link_at(*old)
        if old_link is not None and not old_link.up:
            return True  # old attachment is gone; accept the move
        pending = self.pending_probes.get(mac)
        if pending is None:
            self._probe(mac, old, new_loc)
            return False
        return False  # move stays held while a probe is outstanding

    def _probe(self, mac: str, old: tuple, new_loc: tuple):
        started = self.ctx.now
        probe = self.ctx.new_frame(
            src_mac=f"probe@{started}", dst_mac=mac, kind=eng.DATA, probe=True)
        po = PacketOut(old[0], ("port", old[1]), probe)
        frame = self.ctx.new_frame(
            src_mac=eng.iface_mac(self.node.id, self.switch_ports[old[0]]),
            dst_mac="switch", kind=eng.OFMSG, payload=po)
        self.ctx.send(self.switch_ports[old[0]], frame)
        self.pending_probes[mac] = {"old": old, "new": new_loc, "at": started}

        def conclude():
            pend = self.pending_probes.pop(mac, None)
            if pend is None:
                return
            alive = self.last_seen_at.get((mac,) + pend["old"], -1) > started
            if alive:
                self.ctx.defense_block(defenses.LOCATION_VALIDATION, None, probe,
                                       "OldLocationAlive")
            else:
                key = next((k for k in self.profiles if k[0] == mac), None)
                if key is not None:
                    self.profiles[key].update(
                        switch=pend["new"][0], port=pend["new"][1],
                        tick=self.ctx.now, stamp=self._stamp())
                    self.ctx.emit("profile_move", mac=mac, switch=pend["new"][0],
                                  port=pend["new"][1], adv=False)
                    self._reinstall_for(mac)
        self.ctx.schedule_in(PROBE_WAIT + 1, conclude)

    def _respond(self, pin: PacketIn, inner: Frame, vlan: int):
        if eng.is_multicast(inner.dst_mac):
            self._flood(pin, inner)
            return
        dst_key = (inner.dst_mac, vlan)
        dst = self.profiles.get(dst_key)
        if dst is None:
            self._flood(pin, inner)
            return
        src = self.profiles.get((inner.src_mac, vlan))
        if src is None:
            self._flood(pin, inner)
            return
        if not self.fabric_roles:
            ok = self._install_pair(src, dst)
            if not ok:
                self.ctx.drop(inner, "veto_hold")
                return
        first_hop = self._first_hop(src, dst)
        if first_hop is None:
            self.ctx.drop(inner, "UnreachablePair")
            return
        po = PacketOut(pin.switch, ("port", first_hop), inner)
        frame = self.ctx.new_frame(
            src_mac=eng.iface_mac(self.node.id, self.switch_ports[pin.switch]),
            dst_mac="switch", kind=eng.OFMSG, payload=po)
        self.ctx.send(self.switch_ports[pin.switch], frame)

    def _flood(self, pin: PacketIn, inner: Frame):
        inter_ports = set()
        for key in self.usable_links():
            for sw, p in key:
                inter_ports.add((sw, p))
        for sw in sorted(self.switch_ports):
            ports = []
            for p in self._switch_data_ports(sw):
                if (sw, p) in inter_ports:
                    continue
                if sw == pin.switch and p == pin.in_port:
                    continue
                ports.append(p)
            if not ports:
                continue
            po = PacketOut(sw, ("ports", tuple(ports)), inner)
            frame = self.ctx.new_frame(
                src_mac=eng.iface_mac(self.node.id, self.switch_ports[sw]),
                dst_mac="switch", kind=eng.OFMSG, payload=po)
            self.ctx.send(self.switch_ports[sw], frame)

    def _switch_data_ports(self, sw: str) -> list:
        node = self.ctx.engine.topo.nodes[sw]
        return sorted(p for p, d in node.ports.items()
                      if d.role != eng.CONTROLLER_PORT)

    # -- path computation (staged pipeline) ------------------------------------------

    def _graph(self) -> dict:
        adj: dict[str, list] = {}
        for key in sorted(self.usable_links(), key=sorted):
            (sa, pa), (sb, pb) = sorted(key)
            adj.setdefault(sa, []).append((sb, pa, pb))
            adj.setdefault(sb, []).append((sa, pb, pa))
        for sw in adj:
            adj[sw].sort()
        return adj

    def _shortest_path(self, adj: dict, src: str, dst: str) -> Optional[list]:
        """Hop-count shortest path, ties to the lexicographically lowest
        switch id. Returns [(switch, out_port), ...] ending at dst."""
        if src == dst:
            return []
        import heapq as hq
        best = {src: (0, None, None)}
        heap = [(0, src)]
        seen = set()
        while heap:
            d, u = hq.heappop(heap)
            if u in seen:
                continue
            seen.add(u)
            for v, out_p, _in_p in adj.get(u, []):
                nd = d + 1
                if v not in best or (nd, u) < (best[v][0], best[v][1]):
                    if v in seen:
                        continue
                    best[v] = (nd, u, out_p)
                    hq.heappush(heap, (nd, v))
        if dst not in best:
            return None
        path = []
        cur = dst
        while cur != src:
            _d, prev, out_p = best[cur]
            path.append((prev, out_p))
            cur = prev
        path.reverse()
        return path

    def _compute_rules(self, src: dict, dst: dict, tampered: bool) -> Optional[list]:
        """Compute stage: bidirectional path rules for a host pair."""
        adj = self._graph()
        mods = []
        for a, b in ((src, dst), (dst, src)):
            path = self._shortest_path(adj, a["switch"], b["switch"])
            if path is None:
                return None
            for sw, out_p in path:
                mods.append((sw, FlowRule(10, {"eth_dst": b["mac"]},
                                          ("forward", out_p))))
            mods.append((b["switch"], FlowRule(10, {"eth_dst": b["mac"]},
                                               ("forward", b["port"]))))
        if tampered:
            # A misbehaving compute instance steers the victim's traffic over
            # a route that only exists in its fabricated view.
            fake = self.compromised_route
            mods = [(sw, r) for sw, r in mods
                    if r.match.get("eth_dst") != fake["mac"]]
            mods.append((fake["switch"],
                         FlowRule(20, {"eth_dst": fake["mac"]},
                                  ("forward", fake["port"]))))
        return mods

    def _install_pair(self, src: dict, dst: dict) -> bool:
        pair = frozenset((src["mac"], dst["mac"]))
        outputs = []
        for i in range(max(1, self.n_version)):
            tampered = (self.compromised_route is not None
                        and self.compromised_route.get("mac") in pair
                        and i == 0)
            outputs.append(self._compute_rules(src, dst, tampered))
        try:
            mods = defenses.cross_check(outputs)
        except defenses.StageDivergence:
            self.ctx.emit("stage_divergence", pair=sorted(pair))
            self.ctx.engine.counters.node_drops["stage_divergence_veto"] += 1
            return False
        if mods is None:
            return False
        groups = self._group_substitution(mods)
        for sw, rule in groups:
            self._flow_mod(sw, rule)
        self.installed_pairs.add(pair)
        return True

    def _group_substitution(self, mods: list) -> list:
        out = []
        for sw, rule in mods:
            if rule.action[0] == "forward":
                for gid, members in self.switch_groups.get(sw, {}).items():
                    if rule.action[1] in members:
                        rule = FlowRule(rule.priority, rule.match, ("group", gid))
                        break
            out.append((sw, rule))
        return out

    def _first_hop(self, src: dict, dst: dict) -> Optional[int]:
        if src["switch"] == dst["switch"]:
            return dst["port"]
        path = self._shortest_path(self._graph(), src["switch"], dst["switch"])
        if path is None:
            return None
        return path[0][1]

    def _flow_mod(self, sw: str, rule: FlowRule):
        if sw not in self.switch_ports:
            return
        frame = self.ctx.new_frame(
            src_mac=eng.iface_mac(self.node.id, self.switch_ports[sw]),
            dst_mac="switch", kind=eng.OFMSG, payload=FlowMod(sw, rule))
        self.ctx.send(self.switch_ports[sw], frame)

    def _reinstall_for(self, mac: str):
        for pair in sorted(self.installed_pairs, key=sorted):
            if mac not in pair:
                continue
            profs = []
            for m in sorted(pair):
                p = next((v for k, v in self.profiles.items() if k[0] == m), None)
                if p is not None:
                    profs.append(p)
            if len(profs) == 2:
                self._install_pair(profs[0], profs[1])

    def _gc_rules(self, mac: str):
        self.installed_pairs = {p for p in self.installed_pairs if mac not in p}
        for sw in sorted(self.switch_ports):
            self._flow_mod(sw, FlowRule(0, {}, ("delete_dst", mac)))

    # -- groups ---------------------------------------------------------------------

    def on_port_status(self, status: PortStatus, frame: Frame):
        if not defenses.auth_gate(self.ctx, self.node, frame, (eng.OFMSG,)):
            return
        self.port_live[(status.switch, status.port)] = status.up
        self.ctx.emit("port_status", switch=status.switch, port=status.port,
                      up=status.up, adv=frame.adversarial)
        if not self.is_master:
            return
        for gid, members in sorted(self.switch_groups.get(status.switch, {}).items()):
            if status.port not in members:
                continue
            live = tuple(p for p in members
                         if self.port_live.get((status.switch, p), True))
            gm = GroupMod(status.switch, gid, live)
            frame_out = self.ctx.new_frame(
                src_mac=eng.iface_mac(self.node.id, self.switch_ports[status.switch]),
                dst_mac="switch", kind=eng.OFMSG, payload=gm)
            self.ctx.send(self.switch_ports[status.switch], frame_out)

    # -- replica sync ------------------------------------------------------------------

    def store_entries(self) -> list:
        entries = []
        for key in sorted(self.profiles):
            p = self.profiles[key]
            entries.append((("profile",) + key,
                            (p["switch"], p["port"], p["ip"]), p["stamp"]))
        for key in sorted(self.obs):
            entries.append((("obs",) + key, True, self.obs[key]))
        return entries

    def store_hash(self) -> str:
        import hashlib
        import json
        blob = json.dumps(self.store_entries(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def sync_tick(self):
        snap = StoreSnapshot(self.node.id, dict(self.vv),
                             tuple(self.store_entries()))
        for peer in sorted(self.cluster_ports):
            frame = self.ctx.new_frame(
                src_mac=eng.iface_mac(self.node.id, self.cluster_ports[peer]),
                dst_mac=eng.MCAST_ELECT, kind=eng.SYNC, payload=snap,
                auth_token=self.node.config.get("auth_token"))
            self.ctx.send(self.cluster_ports[peer], frame)
        self.ctx.emit("sync_round", store=self.store_hash())

    def on_sync(self, frame: Frame):
        if not defenses.auth_gate(self.ctx, self.node, frame, (eng.SYNC,)):
            return
        snap = frame.payload
        if not isinstance(snap, StoreSnapshot):
            self.ctx.drop(frame, "malformed_sync")
            return
        check_ts = defenses.node_policy(self.node, defenses.CHANNEL_AUTH) is not None
        for key, value, stamp in snap.entries:
            stamp = tuple(stamp)
            if check_ts and stamp[0] > self.ctx.now + TS_SKEW:
                self.ctx.defense_block(defenses.CHANNEL_AUTH, None, frame,
                                       "ForgedTimestamp")
                continue
            key = tuple(key)
            if key[0] == "profile":
                pkey = (key[1], key[2])
                cur = self.profiles.get(pkey)
                if cur is None or tuple(cur["stamp"]) < stamp:
                    self._prof_seq += 1
                    self.profiles[pkey] = {
                        "mac": key[1], "ip": value[2], "vlan": key[2],
                        "switch": value[0], "port": value[1],
                        "tick": stamp[0], "seq": self._prof_seq, "stamp": stamp,
                    }
            elif key[0] == "obs":
                okey = (tuple(key[1]), tuple(key[2]))
                if okey not in self.obs or tuple(self.obs[okey]) < stamp:
                    self.obs[okey] = stamp
        for rep, n in snap.version_vector.items():
            self.vv[rep] = max(self.vv.get(rep, 0), n)

    # -- tunnel fabric -----------------------------------------------------------------

    def install_fabric(self):
        if not self.is_master:
            self.ctx.schedule_in(self.discovery_period, self.install_fabric)
            return
        edges = sorted(s for s, r in self.fabric_roles.items() if r == "edge")
        cores = sorted(s for s, r in self.fabric_roles.items() if r == "core")
        adj = self._graph()
        port_to = {}
        for sw in adj:
            for peer, out_p, _in_p in adj[sw]:
                port_to.setdefault((sw, peer), out_p)
        self.core_rule_count = 0
        for i in edges:
            for e in edges:
                if i == e:
                    continue
                core = cores[eng.stable_hash(i, e) % len(cores)] if cores else None
                if core is None or (i, core) not in port_to or (core, e) not in port_to:
                    continue
                self._flow_mod(core, FlowRule(
                    20, {"eth_src": tunnel_mac(i), "eth_dst": tunnel_mac(e)},
                    ("forward", port_to[(core, e)])))
                self.core_rule_count += 1
        for e in edges:
            self._flow_mod(e, FlowRule(25, {"eth_dst": tunnel_mac(e)},
                                       ("pop_tunnel",)))
        self._refresh_fabric_host_rules()
        self.ctx.emit("fabric_install", core_rules=self.core_rule_count,
                      edges=len(edges))
        self.ctx.every(self.ctx.now + self.discovery_period, self.discovery_period,
                       self._refresh_fabric_host_rules)

    def _refresh_fabric_host_rules(self):
        if not self.is_master or not self.fabric_roles:
            return
        edges = sorted(s for s, r in self.fabric_roles.items() if r == "edge")
        cores = sorted(s for s, r in self.fabric_roles.items() if r == "core")
        adj = self._graph()
        port_to = {}
        for sw in adj:
            for peer, out_p, _in_p in adj[sw]:
                port_to.setdefault((sw, peer), out_p)
        for key in sorted(self.profiles):
            prof = self.profiles[key]
            home = prof["switch"]
            if home not in edges:
                continue
            self._flow_mod(home, FlowRule(30, {"eth_dst": prof["mac"]},
                                          ("forward", prof["port"])))
            for i in edges:
                if i == home:
                    continue
                core = cores[eng.stable_hash(i, home) % len(cores)] if cores else None
                if core is None or (i, core) not in port_to:
                    continue
                self._flow_mod(i, FlowRule(
                    20, {"eth_dst": prof["mac"]},
                    ("push_tunnel", i, home, port_to[(i, core)])))

    # -- frame entry -----------------------------------------------------------------

    def on_frame(self, port: int, frame: Frame):
        if frame.kind == eng.ELECTION and isinstance(frame.payload, ElectionMsg):
            self.on_election(frame)
            return
        if frame.kind == eng.SYNC:
            self.on_sync(frame)
            return
        if frame.kind != eng.OFMSG:
            return
        payload = frame.payload
        if isinstance(payload, PacketIn):
            if not defenses.auth_gate(self.ctx, self.node, frame, (eng.OFMSG,)):
                return
            self.on_packet_in(payload, frame)
        elif isinstance(payload, PortStatus):
            self.on_port_status(payload, frame)
