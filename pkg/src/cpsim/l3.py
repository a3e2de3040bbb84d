"""Conventional L3 routing: static routes + ARP, a minimal link-state
protocol (flood + sequence numbers + Dijkstra), ECMP next-hop selection,
and VRRP gateway redundancy."""
from __future__ import annotations

import heapq
import ipaddress
from typing import Optional

from . import defenses, engine as eng
from .engine import Behavior, Frame
from .frames import ArpMsg, Lsa, VrrpAdvert

LSA_PERIOD = 10
ARP_TIMEOUT = 10
VRRP_PERIOD = 5
VRRP_DEAD = 3 * VRRP_PERIOD

CONNECTED, STATIC, PROTOCOL = 0, 1, 2


def _ip_key(ip: str) -> int:
    try:
        return int(ipaddress.ip_address(ip))
    except ValueError:
        return 0


def dijkstra(adj: dict, src: str) -> dict:
    """Shortest distances over adjacency {node: [(nbr, cost), ...]}."""
    dist = {src: 0}
    heap = [(0, src)]
    done = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for v, w in sorted(adj.get(u, [])):
            nd = d + w
            if nd < dist.get(v, float("inf")):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


class Route:
    def __init__(self, prefix: str, nexthops: list, cost: int, origin: int):
        self.net = ipaddress.ip_network(prefix)
        self.nexthops = nexthops  # ("local", port) | ("adj", router) | ("ip", ip)
        self.cost = cost
        self.origin = origin

    def __repr__(self):
        return f"Route({self.net}, {self.nexthops}, cost={self.cost}, o={self.origin})"


class RouterBehavior(Behavior):
    def __init__(self, node):
        self.node = node
        cfg = node.config
        self.interfaces = {int(i["port"]): dict(i) for i in cfg.get("interfaces", [])}
        self.link_state = cfg.get("link_state", False)
        self.ecmp = cfg.get("ecmp", False)
        self.vrrp = cfg.get("vrrp")
        self.static_cfg = cfg.get("static_routes", [])
        self.arp: dict[str, tuple] = {}      # ip -> (mac, tick, static)
        self.pending: dict[str, list] = {}
        self.adjacency: dict[str, tuple] = {}  # router -> (port, mac, cost)
        self.lsdb: dict[str, Lsa] = {}
        self.my_seq = 0
        self.routes: list[Route] = []
        self.proto_routes: list[Route] = []
        self.lsa_cost_override: dict = {}    # insider-attack hook
        # VRRP
        self.vrrp_role = "BACKUP"
        self.vrrp_master: Optional[str] = None  # winning router_ip
        self.vrrp_pri: Optional[tuple] = None
        self.vrrp_last = -10**9

    # -- wiring -------------------------------------------------------------

    def start(self):
        ctx = self.ctx
        for ip, mac in self.node.config.get("static_arp", {}).items():
            self.arp[ip] = (mac, 0, True)
        for port in sorted(self.interfaces):
            peer = ctx.peer_of(port)
            if peer is None:
                continue
            peer_node = ctx.engine.topo.nodes[peer[0]]
            if peer_node.kind == "router":
                link = ctx.engine.topo.link_at(self.node.id, port)
                self.adjacency[peer[0]] = (port, eng.iface_mac(peer[0], peer[1]),
                                           link.cost)
        self._rebuild_static()
        if self.link_state:
            ctx.every(1, LSA_PERIOD, self.originate_lsa)
        if self.vrrp:
            self.vrrp_pri = (self.vrrp.get("priority", 100), _ip_key(self._vrrp_ip()))
            ctx.every(2, VRRP_PERIOD, self.vrrp_tick)

    def my_ips(self) -> set:
        return {i["ip"] for i in self.interfaces.values()}

    def my_macs(self) -> set:
        return {eng.iface_mac(self.node.id, p) for p in self.interfaces}

    def _vrrp_ip(self) -> str:
        return self.interfaces[int(self.vrrp["port"])]["ip"]

    def _vmac(self) -> str:
        return eng.virtual_mac(self.vrrp["vip"])

    def _iface_for_ip(self, ip: str) -> Optional[int]:
        addr = ipaddress.ip_address(ip)
        for port in sorted(self.interfaces):
            if addr in ipaddress.ip_network(self.interfaces[port]["prefix"]):
                return port
        return None

    def _rebuild_static(self):
        self.routes = []
        for port in sorted(self.interfaces):
            self.routes.append(Route(self.interfaces[port]["prefix"],
                                     [("local", port)], 0, CONNECTED))
        for r in self.static_cfg:
            nh = r["next_hop"]
            nexthop = ("local", int(nh["local"])) if isinstance(nh, dict) else ("ip", nh)
            self.routes.append(Route(r["prefix"], [nexthop], r.get("cost", 1), STATIC))

    # -- frame entry ----------------------------------------------------------

    def on_frame(self, port: int, frame: Frame):
        pdesc = self.node.ports.get(port)
        if pdesc is not None and defenses.apply_ingress(self.ctx, pdesc, frame) is not None:
            return
        if frame.kind == eng.ARP and isinstance(frame.payload, ArpMsg):
            self._handle_arp(port, frame)
            return
        if frame.kind == eng.LSA:
            self.ls_receive(port, frame)
            return
        if frame.kind == eng.VRRP:
            if (frame.ip_dst is not None and frame.ip_dst not in self.my_ips()
                    and frame.dst_mac in self.my_macs()):
                self.route_and_forward(port, frame)  # transit VRRP unicast
            else:
                self.vrrp_receive(port, frame)
            return
        if frame.kind != eng.DATA:
            return
        gateway_macs = self.my_macs()
        if self.vrrp and self.vrrp_role == "MASTER":
            gateway_macs = gateway_macs | {self._vmac()}
        if frame.dst_mac in gateway_macs:
            if self.vrrp and frame.dst_mac == self._vmac() and self.vrrp_role != "MASTER":
                self.ctx.drop(frame, "vrrp_backup_drop", port)
                return
            self.route_and_forward(port, frame)
        elif self.vrrp and frame.dst_mac == self._vmac():
            self.ctx.drop(frame, "vrrp_backup_drop", port)

    # -- forwarding -------------------------------------------------------------

    def lookup(self, ip: str) -> Optional[Route]:
        addr = ipaddress.ip_address(ip)
        best = None
        for route in self.routes + self.proto_routes:
            if addr not in route.net:
                continue
            key = (-route.net.prefixlen, route.origin, route.cost)
            if best is None or key < best[0]:
                best = (key, route)
        return best[1] if best else None

    def route_and_forward(self, in_port: int, frame: Frame):
        ctx = self.ctx
        if frame.ip_dst is None:
            ctx.drop(frame, "not_routable", in_port)
            return
        if frame.ip_dst in self.my_ips():
            ctx.emit("router_consume", fid=frame.frame_id)
            return
        ttl = (frame.ttl if frame.ttl is not None else 64) - 1
        if ttl <= 0:
            ctx.drop(frame, "TtlExpired", in_port)
            self._notify_source(frame)
            return
        route = self.lookup(frame.ip_dst)
        if route is None:
            ctx.drop(frame, "NoRoute", in_port)
            self._notify_source(frame)
            return
        resolved = self._resolve(route, frame)
        if resolved is None:
            ctx.drop(frame, "NoRoute", in_port)
            self._notify_source(frame)
            return
        out_port, target = resolved
        out = frame.copy(src_mac=eng.iface_mac(self.node.id, out_port), ttl=ttl)
        if isinstance(target, tuple):  # already a MAC from an adjacency
            ctx.send(out_port, out.copy(dst_mac=target[0]))
            return
        hit = self.arp.get(target)
        if hit is not None:
            ctx.send(out_port, out.copy(dst_mac=hit[0]))
            return
        self.pending.setdefault(target, []).append((out_port, out))
        self._arp_request(out_port, target)

    def _resolve(self, route: Route, frame: Frame, depth: int = 0):
        """Pick one next hop (flow-sticky for ECMP) and chase it down to a
        local interface. Returns (out_port, arp_target | (mac,))."""
        if depth > 8:
            return None
        nhs = sorted(route.nexthops)
        if len(nhs) > 1:
            nh = nhs[eng.stable_hash(frame.ip_src, frame.ip_dst, frame.flow_label)
                     % len(nhs)]
        else:
            nh = nhs[0]
        if nh[0] == "local":
            return (nh[1], frame.ip_dst)
        if nh[0] == "adj":
            port, mac, _cost = self.adjacency[nh[1]]
            return (port, (mac,))
        port = self._iface_for_ip(nh[1])
        if port is not None:
            return (port, nh[1])
        nested = self.lookup(nh[1])
        if nested is None or nested is route:
            return None
        return self._resolve(nested, frame, depth + 1)

    def _notify_source(self, frame: Frame):
        # ICMP stand-in: an accounting event, not a frame on the wire.
        self.ctx.engine.counters.notify_source += 1
        self.ctx.emit("notify_source", fid=frame.frame_id, to=frame.ip_src)

    # -- ARP ---------------------------------------------------------------------

    def _arp_request(self, port: int, target_ip: str):
        iface = self.interfaces[port]
        req = self.ctx.new_frame(
            src_mac=eng.iface_mac(self.node.id, port), dst_mac=eng.BROADCAST,
            kind=eng.ARP,
            payload=ArpMsg("request", iface["ip"], eng.iface_mac(self.node.id, port),
                           target_ip))
        self.ctx.send(port, req)

        def timeout():
            if target_ip in self.pending and target_ip not in self.arp:
                for _port, f in self.pending.pop(target_ip):
                    self.ctx.drop(f, "ArpTimeout")
        self.ctx.schedule_in(ARP_TIMEOUT, timeout)

    def _handle_arp(self, port: int, frame: Frame):
        msg = frame.payload
        iface = self.interfaces.get(port)
        if msg.op == "request":
            if iface is not None and msg.target_ip == iface["ip"]:
                reply = self.ctx.new_frame(
                    src_mac=eng.iface_mac(self.node.id, port), dst_mac=msg.sender_mac,
                    kind=eng.ARP,
                    payload=ArpMsg("reply", iface["ip"],
                                   eng.iface_mac(self.node.id, port),
                                   msg.sender_ip, msg.sender_mac))
                self.ctx.send(port, reply)
            elif (self.vrrp and self.vrrp_role == "MASTER"
                    and msg.target_ip == self.vrrp["vip"]):
                reply = self.ctx.new_frame(
                    src_mac=self._vmac(), dst_mac=msg.sender_mac, kind=eng.ARP,
                    payload=ArpMsg("reply", self.vrrp["vip"], self._vmac(),
                                   msg.sender_ip, msg.sender_mac))
                self.ctx.send(port, reply)
            self._arp_update(msg.sender_ip, msg.sender_mac, frame, solicited=False)
            return
        solicited = (msg.sender_ip in self.pending
                     or (iface is not None and msg.target_ip == iface["ip"]))
        self._arp_update(msg.sender_ip, msg.sender_mac, frame, solicited)

    def _arp_update(self, ip: str, mac: str, frame: Frame, solicited: bool):
        entry = self.arp.get(ip)
        if entry is not None and entry[2]:
            return
        if entry is None and not solicited:
            return
        pol = defenses.node_policy(self.node, defenses.DAI)
        if pol is not None:
            db = pol.params.get("bindings", {})
            if db.get(ip) != mac:
                self.ctx.defense_block(defenses.DAI, None, frame, "ArpBindingMismatch")
                return
        if entry is None or entry[0] != mac:
            self.ctx.emit("arp_bind", ip=ip, mac=mac)
        self.arp[ip] = (mac, self.ctx.now, False)
        for port, f in self.pending.pop(ip, []):
            self.ctx.send(port, f.copy(dst_mac=mac))

    # -- link-state protocol -------------------------------------------------------

    def originate_lsa(self):
        if not self.node.alive:
            return
        self.my_seq += 1
        links = []
        for nbr in sorted(self.adjacency):
            cost = self.adjacency[nbr][2]
            cost = self.lsa_cost_override.get(nbr, cost)
            links.append((nbr, cost))
        prefixes = tuple(sorted(self.interfaces[p]["prefix"]
                                for p in self.interfaces))
        router_ip = min(self.my_ips()) if self.interfaces else None
        lsa = Lsa(self.node.id, tuple(links), self.my_seq, prefixes, router_ip)
        self.lsdb[self.node.id] = lsa
        frame = self.ctx.new_frame(
            src_mac=eng.iface_mac(self.node.id, min(self.interfaces, default=0)),
            dst_mac=eng.BROADCAST, kind=eng.LSA, payload=lsa,
            auth_token=self.node.config.get("auth_token"),
            adversarial=bool(self.lsa_cost_override))
        for nbr in sorted(self.adjacency):
            self.ctx.send(self.adjacency[nbr][0], frame)
        self.spf_recompute()

    def ls_receive(self, port: int, frame: Frame):
        if not self.link_state:
            return
        lsa = frame.payload
        if not isinstance(lsa, Lsa):
            self.ctx.drop(frame, "malformed_lsa", port)
            return
        if not defenses.auth_gate(self.ctx, self.node, frame, (eng.LSA,)):
            return
        if lsa.origin == self.node.id:
            # Someone speaks in our name: out-advertise the impostor.
            if lsa.seq >= self.my_seq:
                self.my_seq = lsa.seq
                self.originate_lsa()
            return
        cur = self.lsdb.get(lsa.origin)
        if cur is not None and lsa.seq <= cur.seq:
            return
        self.lsdb[lsa.origin] = lsa
        self.ctx.emit("lsa_accept", origin=lsa.origin, seq=lsa.seq,
                      adv=frame.adversarial)
        for nbr in sorted(self.adjacency):
            if self.adjacency[nbr][0] != port:
                self.ctx.send(self.adjacency[nbr][0], frame)
        self.spf_recompute()

    def _claims(self) -> dict:
        claims = {}
        for origin, lsa in self.lsdb.items():
            claims[origin] = {n: c for n, c in lsa.links}
        claims.setdefault(self.node.id, {})
        for nbr in sorted(self.adjacency):
            claims[self.node.id][nbr] = self.lsa_cost_override.get(
                nbr, self.adjacency[nbr][2])
        return claims

    def spf_recompute(self):
        claims = self._claims()
        if defenses.node_policy(self.node, defenses.CORROBORATION) is not None:
            edges = defenses.corroborate_links(claims)
        else:
            edges = defenses.one_sided_links(claims)
        adj: dict[str, list] = {}
        for (a, b), cost in sorted(edges.items()):
            adj.setdefault(a, []).append((b, cost))
            adj.setdefault(b, []).append((a, cost))
        me = self.node.id
        dist_all = {n: dijkstra(adj, n) for n in sorted(adj)}
        dist = dist_all.get(me, {me: 0})
        by_prefix: dict = {}
        for origin in sorted(self.lsdb):
            if origin == me or origin not in dist:
                continue
            lsa = self.lsdb[origin]
            hops = [w for w, _c in sorted(adj.get(me, []))
                    if dist_all[w].get(origin, float("inf"))
                    + dict(adj[me])[w] == dist[origin]]
            nhs = []
            for fh in hops:
                if fh in self.adjacency:
                    nhs.append(("adj", fh))
                else:
                    fh_lsa = self.lsdb.get(fh)
                    rip = fh_lsa.router_ip if fh_lsa else None
                    if rip is not None and self._iface_for_ip(rip) is not None:
                        nhs.append(("ip", rip))
            if not nhs:
                continue
            if not self.ecmp:
                nhs = nhs[:1]
            for pfx in lsa.prefixes:
                cur = by_prefix.get(pfx)
                if cur is None or dist[origin] < cur[0]:
                    by_prefix[pfx] = (dist[origin], list(nhs))
                elif dist[origin] == cur[0] and self.ecmp:
                    merged = sorted(set(cur[1]) | set(nhs))
                    by_prefix[pfx] = (cur[0], merged)
        new_routes = [Route(pfx, nhs, cost, PROTOCOL)
                      for pfx, (cost, nhs) in sorted(by_prefix.items())]
        new_repr = [(str(r.net), r.nexthops, r.cost) for r in new_routes]
        old_repr = [(str(r.net), r.nexthops, r.cost) for r in self.proto_routes]
        if new_repr != old_repr:
            self.proto_routes = new_routes
            self.ctx.emit("spf", routes=len(new_routes))

    # -- VRRP ------------------------------------------------------------------------

    def vrrp_tick(self):
        if self.vrrp_role == "MASTER":
            self._send_advert()
            return
        if self.ctx.now - self.vrrp_last > VRRP_DEAD:
            self._become_master()

    def _become_master(self):
        self.vrrp_role = "MASTER"
        self.vrrp_master = self._vrrp_ip()
        self.ctx.emit("elect", scope="vrrp", vip=self.vrrp["vip"],
                      master=self.vrrp_master)
        self._send_advert()

    def _send_advert(self):
        advert = VrrpAdvert(self.vrrp["vip"], self.vrrp.get("priority", 100),
                            self._vrrp_ip())
        frame = self.ctx.new_frame(
            src_mac=self._vmac(), dst_mac=eng.MCAST_VRRP, kind=eng.VRRP,
            ttl=255, payload=advert)
        self.ctx.send(int(self.vrrp["port"]), frame)

    def vrrp_receive(self, port: int, frame: Frame):
        if not self.vrrp or not isinstance(frame.payload, VrrpAdvert):
            return
        advert = frame.payload
        if advert.virtual_ip != self.vrrp["vip"]:
            return
        pol = defenses.node_policy(self.node, defenses.VRRP_TTL_CHECK)
        if pol is not None and frame.ttl != 255:
            self.ctx.defense_block(defenses.VRRP_TTL_CHECK, port, frame,
                                   "TtlCheckFail")
            return
        theirs = (advert.priority, _ip_key(advert.router_ip))
        if advert.router_ip == self._vrrp_ip():
            return
        if theirs > self.vrrp_pri:
            if self.vrrp_role == "MASTER":
                self.ctx.emit("elect", scope="vrrp", vip=self.vrrp["vip"],
                              master=advert.router_ip)
            elif self.vrrp_master != advert.router_ip:
                self.ctx.emit("elect", scope="vrrp", vip=self.vrrp["vip"],
                              master=advert.router_ip)
            self.vrrp_role = "BACKUP"
            self.vrrp_master = advert.router_ip
            self.vrrp_last = self.ctx.now
        else:
            if self.vrrp_role == "BACKUP":
                self._become_master()
