"""End hosts: traffic endpoints with a small ARP/IP stack and first-contact
auto-replies so switches and controllers can learn both directions."""
from __future__ import annotations

import ipaddress
from typing import Optional

from . import defenses, engine as eng
from .engine import Behavior, Frame
from .frames import ArpMsg

ARP_TIMEOUT = 10
DEFAULT_TTL = 64


class HostBehavior(Behavior):
    def __init__(self, node):
        self.node = node
        cfg = node.config
        self.mac = cfg.get("mac", eng.host_mac(node.id))
        self.ip = cfg.get("ip")
        self.prefix = cfg.get("prefix")
        self.gateway = cfg.get("gateway")
        self.auto_reply = cfg.get("reply", True)
        self.arp: dict[str, tuple] = {}       # ip -> (mac, tick, static)
        self.pending: dict[str, list] = {}    # unresolved ip -> queued frames
        self.replied_to: set = set()
        self.impersonate: dict[str, str] = {}  # adversarial: ip -> claimed mac

    def _port(self) -> int:
        ports = self.ctx.data_ports()
        return ports[0] if ports else 0

    def on_subnet(self, ip: str) -> bool:
        if not self.prefix:
            return False
        return ipaddress.ip_address(ip) in ipaddress.ip_network(self.prefix)

    # -- sending ----------------------------------------------------------------

    def send_data(self, dst_mac: Optional[str] = None, dst_ip: Optional[str] = None,
                  flow_label: int = 0):
        if dst_ip is not None and self.ip is not None:
            frame = self.ctx.new_frame(
                src_mac=self.mac, dst_mac="", kind=eng.DATA, ip_src=self.ip,
                ip_dst=dst_ip, ttl=DEFAULT_TTL, flow_label=flow_label)
            self._route_out(frame)
            return
        frame = self.ctx.new_frame(src_mac=self.mac, dst_mac=dst_mac,
                                   kind=eng.DATA, flow_label=flow_label)
        self.ctx.send(self._port(), frame)

    def send_raw(self, frame: Frame, via_gateway: bool = False):
        """Emit a pre-built frame; attack injectors use this."""
        if via_gateway:
            self._route_out(frame)
        else:
            self.ctx.send(self._port(), frame)

    def _route_out(self, frame: Frame):
        target = frame.ip_dst if self.on_subnet(frame.ip_dst) else self.gateway
        if target is None:
            self.ctx.drop(frame, "no_gateway")
            return
        hit = self.arp.get(target)
        if hit is not None:
            self.ctx.send(self._port(), frame.copy(dst_mac=hit[0]))
            return
        self.pending.setdefault(target, []).append(frame)
        self._arp_request(target)

    def _arp_request(self, target_ip: str):
        req = self.ctx.new_frame(
            src_mac=self.mac, dst_mac=eng.BROADCAST, kind=eng.ARP,
            payload=ArpMsg("request", self.ip or "0.0.0.0", self.mac, target_ip))
        self.ctx.send(self._port(), req)

        def timeout():
            if target_ip in self.pending and target_ip not in self.arp:
                for f in self.pending.pop(target_ip):
                    self.ctx.drop(f, "ArpTimeout")
        self.ctx.schedule_in(ARP_TIMEOUT, timeout)

    # -- receiving ---------------------------------------------------------------

    def on_frame(self, port: int, frame: Frame):
        pdesc = self.node.ports.get(port)
        if pdesc is not None and defenses.apply_ingress(self.ctx, pdesc, frame) is not None:
            return
        if frame.kind == eng.ARP and isinstance(frame.payload, ArpMsg):
            self._handle_arp(frame)
            return
        if frame.kind != eng.DATA:
            return  # hosts ignore control PDUs
        if frame.dst_mac == self.mac or frame.dst_mac == eng.BROADCAST \
                or (frame.ip_dst is not None and frame.ip_dst == self.ip):
            self.ctx.delivered(frame)
            self._maybe_reply(frame)

    def _maybe_reply(self, frame: Frame):
        if not self.auto_reply or frame.src_mac == self.mac:
            return
        if frame.src_mac in self.replied_to:
            return
        self.replied_to.add(frame.src_mac)
        def reply():
            if frame.ip_src is not None and self.ip is not None:
                self.send_data(dst_ip=frame.ip_src, flow_label=frame.flow_label)
            else:
                self.send_data(dst_mac=frame.src_mac, flow_label=frame.flow_label)
        self.ctx.schedule_in(1, reply)

    def _handle_arp(self, frame: Frame):
        msg = frame.payload
        if msg.op == "request":
            if self.ip is not None and msg.target_ip == self.ip:
                reply = self.ctx.new_frame(
                    src_mac=self.mac, dst_mac=msg.sender_mac, kind=eng.ARP,
                    payload=ArpMsg("reply", self.ip, self.mac, msg.sender_ip,
                                   msg.sender_mac))
                self.ctx.send(self._port(), reply)
            elif msg.target_ip in self.impersonate:
                claimed = self.impersonate[msg.target_ip]
                reply = self.ctx.new_frame(
                    src_mac=claimed, dst_mac=msg.sender_mac, kind=eng.ARP,
                    payload=ArpMsg("reply", msg.target_ip, claimed,
                                   msg.sender_ip, msg.sender_mac),
                    adversarial=True)
                self.ctx.send(self._port(), reply)
            self._arp_update(msg.sender_ip, msg.sender_mac, frame, solicited=False)
            return
        solicited = msg.sender_ip in self.pending or msg.target_ip == self.ip
        self._arp_update(msg.sender_ip, msg.sender_mac, frame, solicited)

    def _arp_update(self, ip: str, mac: str, frame: Frame, solicited: bool):
        """Install or rebind an ip->mac mapping. Existing dynamic entries may
        be rebound by any ARP (the classic poisoning vector) unless DAI vetoes;
        unsolicited ARPs never create brand new entries."""
        entry = self.arp.get(ip)
        if entry is not None and entry[2]:
            return  # static entries are never overwritten dynamically
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
        for f in self.pending.pop(ip, []):
            self.ctx.send(self._port(), f.copy(dst_mac=mac))
