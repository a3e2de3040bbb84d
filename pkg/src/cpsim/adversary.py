"""Attack injection and outcome measurement.

Every attack kind maps to one injector. Placement is enforced against the
active threat model: END_HOST attackers may only emit through UNIs, while
NETWORK_ELEMENT / CONTROLLER placements require the ALL_ELEMENT model and
act through the compromised element itself (valid keys included, which is
exactly why origin auth alone cannot stop them).

Success predicates are fixed per kind and documented here; thresholds are
artifact choices recorded in the report.
"""
from __future__ import annotations

import random
from typing import Optional

from . import engine as eng
from .engine import Frame, SimError
from .frames import (ArpMsg, Bpdu, ElectionMsg, Lacpdu, Lldp, Lsa, PortStatus,
                     StoreSnapshot, TrunkNeg, VrrpAdvert)

MAC_SPOOF = "MAC_SPOOF"
MAC_FLOOD = "MAC_FLOOD"
BPDU_SPOOF = "BPDU_SPOOF"
BPDU_FLOOD = "BPDU_FLOOD"
LACPDU_SPOOF = "LACPDU_SPOOF"
STACK_ELECT_SPOOF = "STACK_ELECT_SPOOF"
VLAN_DOUBLE_TAG = "VLAN_DOUBLE_TAG"
ARP_POISON = "ARP_POISON"
LSA_FALSIFY = "LSA_FALSIFY"
VRRP_SPOOF = "VRRP_SPOOF"
HOST_PROFILE_POISON = "HOST_PROFILE_POISON"
PROFILE_FLOOD = "PROFILE_FLOOD"
LLDP_FABRICATE = "LLDP_FABRICATE"
PORT_STATUS_SPOOF = "PORT_STATUS_SPOOF"
CTRL_ELECT_SPOOF = "CTRL_ELECT_SPOOF"
SYNC_FORGE = "SYNC_FORGE"
SWITCH_IMPERSONATE = "SWITCH_IMPERSONATE"

ATTACK_KINDS = (
    MAC_SPOOF, MAC_FLOOD, BPDU_SPOOF, BPDU_FLOOD, LACPDU_SPOOF,
    STACK_ELECT_SPOOF, VLAN_DOUBLE_TAG, ARP_POISON, LSA_FALSIFY, VRRP_SPOOF,
    HOST_PROFILE_POISON, PROFILE_FLOOD, LLDP_FABRICATE, PORT_STATUS_SPOOF,
    CTRL_ELECT_SPOOF, SYNC_FORGE, SWITCH_IMPERSONATE,
)

END_HOST = "END_HOST"
NETWORK_ELEMENT = "NETWORK_ELEMENT"
CONTROLLER = "CONTROLLER"
PLACEMENTS = (END_HOST, NETWORK_ELEMENT, CONTROLLER)

ATTACK_SUCCEEDED = "ATTACK_SUCCEEDED"
ATTACK_BLOCKED = "ATTACK_BLOCKED"
INCONCLUSIVE = "INCONCLUSIVE"

INTERCEPTION_THRESHOLD = 0.5
BPDU_FLOOD_CHURN = 10


class PlacementViolation(SimError):
    """The scenario asks for an adversary the threat model does not admit."""


def check_placement(scenario: dict, attack: dict, topo) -> None:
    placement = attack.get("placement", END_HOST)
    model = scenario.get("threat_model", END_HOST)
    node_id = attack["node"]
    if node_id not in topo.nodes:
        raise PlacementViolation(f"attack node {node_id} does not exist")
    kind = topo.nodes[node_id].kind
    if placement == END_HOST:
        if kind != "host":
            raise PlacementViolation(
                f"END_HOST placement requires a host, got {kind} {node_id}")
        for port in topo.nodes[node_id].ports.values():
            if port.link_id is None:
                continue
            link = topo.links[port.link_id]
            far = link.other_end(node_id, port.port)
            far_role = topo.nodes[far[0]].ports[far[1]].role
            if far_role != eng.UNI:
                raise PlacementViolation(
                    f"END_HOST attacker {node_id} attaches via {far_role}, not a UNI")
    else:
        if model != "ALL_ELEMENT":
            raise PlacementViolation(
                f"{placement} placement requires the ALL_ELEMENT threat model")
        if placement == NETWORK_ELEMENT and kind not in ("switch", "router",
                                                         "sdn_switch"):
            raise PlacementViolation(
                f"NETWORK_ELEMENT placement requires a network device, got {kind}")
        if placement == CONTROLLER and kind != "controller":
            raise PlacementViolation(
                f"CONTROLLER placement requires a controller, got {kind}")


def _injection_ticks(attack: dict) -> list:
    start = attack["start"]
    period = attack.get("period", 1)
    duration = attack.get("duration", 1)
    return list(range(start, start + duration, period))


def _window(attacks: list) -> tuple:
    """Measurement window: the injection schedule by default, or an explicit
    override for attacks whose effect outlives the injections (a saturated
    table stays saturated)."""
    for a in attacks:
        if "window" in a:
            return tuple(a["window"])
    starts = [a["start"] for a in attacks]
    ends = [a["start"] + a.get("duration", 1) for a in attacks]
    return (min(starts), max(ends))


def schedule_attacks(engine, scenario: dict) -> None:
    for idx, attack in enumerate(scenario.get("attacks", [])):
        check_placement(scenario, attack, engine.topo)
        rng = random.Random(f"cpsim:{engine.seed}:attack:{idx}")
        _schedule_one(engine, scenario, attack, rng)


def _schedule_one(engine, scenario: dict, attack: dict, rng: random.Random):
    kind = attack["kind"]
    node = engine.topo.nodes[attack["node"]]
    placement = attack.get("placement", END_HOST)
    params = attack.get("params", {})
    target = attack.get("target", {})
    state = {"n": 0}

    # Compromised-element attacks act through the element's own logic.
    if kind == LSA_FALSIFY and placement == NETWORK_ELEMENT:
        def corrupt():
            node.behavior.lsa_cost_override = dict(params.get("cost_override", {}))
            node.behavior.originate_lsa()
        engine.schedule(attack["start"], corrupt)
        return
    if placement == CONTROLLER:
        def compromise():
            node.behavior.compromised_route = dict(params["route"])
            engine.trace.emit(engine.now, "compromise", node=node.id)
        engine.schedule(attack["start"], compromise)
        return
    if kind == LLDP_FABRICATE and placement == NETWORK_ELEMENT:
        def forge_report():
            ctl = next((b for n, b in sorted(engine.topo.nodes.items())
                        if n != node.id and b.kind == "controller"), None)
            nonce = ctl.behavior.nonce if ctl is not None else ""
            inner = Frame(src_mac=eng.iface_mac(node.id, 0), dst_mac=eng.MCAST_LLDP,
                          kind=eng.LLDP, adversarial=True,
                          payload=Lldp(params["chassis"], params["port"], nonce))
            node.behavior.packet_in(inner, params.get("in_port", 1))
        for t in _injection_ticks(attack):
            engine.schedule(t, forge_report)
        return

    def emit():
        frames = _build_frames(engine, scenario, attack, node, params, target,
                               rng, state)
        for frame, via_gateway in frames:
            node.behavior.send_raw(frame, via_gateway=via_gateway)

    per_tick = attack.get("per_tick", 1)
    for t in _injection_ticks(attack):
        for _ in range(per_tick):
            engine.schedule(t, emit)


def _victim(engine, target: dict) -> dict:
    out = {}
    node_id = target.get("node")
    if node_id and node_id in engine.topo.nodes:
        cfg = engine.topo.nodes[node_id].config
        out["node"] = node_id
        out["mac"] = cfg.get("mac", eng.host_mac(node_id))
        out["ip"] = cfg.get("ip")
    return out


def _build_frames(engine, scenario, attack, node, params, target, rng, state):
    """Craft the adversarial frames for one injection instant."""
    kind = attack["kind"]
    me = node.behavior
    my_mac = getattr(me, "mac", eng.host_mac(node.id))
    token = ("adv", "forged")  # an outsider can never mint a verifying token
    victim = _victim(engine, target)
    state["n"] += 1
    n = state["n"]
    f = engine.new_frame

    if kind == MAC_SPOOF:
        dst = target.get("dst_mac") or eng.BROADCAST
        return [(f(src_mac=victim["mac"], dst_mac=dst, kind=eng.DATA,
                   adversarial=True), False)]
    if kind in (MAC_FLOOD, PROFILE_FLOOD):
        # Garbage addresses live in their own namespace so they can never
        # collide with a real host (that would be MAC_SPOOF instead).
        g = rng.randrange(10**9)
        return [(f(src_mac=f"gm:{n}:{g}", dst_mac=f"gd:{n}:{g}", kind=eng.DATA,
                   adversarial=True), False)]
    if kind == BPDU_SPOOF:
        claimed = (params.get("priority", 0), params.get("bridge", "00:00:adv"))
        return [(f(src_mac=my_mac, dst_mac=eng.MCAST_STP, kind=eng.BPDU,
                   payload=Bpdu(tuple(claimed), tuple(claimed), 0, 1),
                   adversarial=True), False)]
    if kind == BPDU_FLOOD:
        claimed = (rng.randrange(1, 90), f"fl:{rng.randrange(10**6)}")
        return [(f(src_mac=my_mac, dst_mac=eng.MCAST_STP, kind=eng.BPDU,
                   payload=Bpdu(claimed, claimed, rng.randrange(4), 1),
                   adversarial=True), False)]
    if kind == LACPDU_SPOOF:
        return [(f(src_mac=my_mac, dst_mac=eng.MCAST_LACP, kind=eng.LACPDU,
                   payload=Lacpdu(params.get("actor", "adv-sys"),
                                  int(target["group"]),
                                  member_ref=int(target["port"])),
                   adversarial=True), False)]
    if kind == STACK_ELECT_SPOOF:
        return [(f(src_mac=my_mac, dst_mac=eng.MCAST_ELECT, kind=eng.ELECTION,
                   payload=ElectionMsg("STACK", target["group"], node.id,
                                       params.get("priority", 0)),
                   adversarial=True), False)]
    if kind == VLAN_DOUBLE_TAG:
        tags = (params.get("outer", 10), params.get("inner", 20))
        return [(f(src_mac=my_mac, dst_mac=victim["mac"], kind=eng.DATA,
                   vlan_tags=tags, adversarial=True), False)]
    if kind == ARP_POISON:
        msg = ArpMsg("reply", victim["ip"], my_mac, victim["ip"])
        return [(f(src_mac=my_mac, dst_mac=eng.BROADCAST, kind=eng.ARP,
                   payload=msg, adversarial=True), False)]
    if kind == LSA_FALSIFY:
        links = tuple((str(a), int(c)) for a, c in params.get("links", []))
        lsa = Lsa(params["origin"], links, params.get("seq", 10**6) + n,
                  tuple(params.get("prefixes", [])),
                  params.get("router_ip", getattr(me, "ip", None)))
        return [(f(src_mac=my_mac, dst_mac=eng.BROADCAST, kind=eng.LSA,
                   payload=lsa, auth_token=token, adversarial=True), False)]
    if kind == VRRP_SPOOF:
        advert = VrrpAdvert(target["vip"], params.get("priority", 255),
                            params.get("router_ip", getattr(me, "ip", None)
                                       or "203.0.113.99"))
        if params.get("remote"):
            targets = params.get("target_ips") or [params["target_ip"]]
            return [(f(src_mac=my_mac, dst_mac="", kind=eng.VRRP,
                       ip_src=me.ip, ip_dst=tip, ttl=255,
                       payload=advert, adversarial=True), True)
                    for tip in targets]
        # On-link spoof: sourcing from the virtual MAC pulls the gateway's
        # traffic to the attacker port as soon as switches re-learn, and
        # answering ARP for the vip completes the gateway impersonation.
        me.impersonate[target["vip"]] = eng.virtual_mac(target["vip"])
        return [(f(src_mac=eng.virtual_mac(target["vip"]), dst_mac=eng.MCAST_VRRP,
                   kind=eng.VRRP, ttl=255, payload=advert, adversarial=True),
                 False)]
    if kind == HOST_PROFILE_POISON:
        return [(f(src_mac=victim["mac"], dst_mac=f"gd:poison:{n}", kind=eng.DATA,
                   adversarial=True), False)]
    if kind == LLDP_FABRICATE:
        nonce = params.get("nonce", "")
        return [(f(src_mac=my_mac, dst_mac=eng.MCAST_LLDP, kind=eng.LLDP,
                   payload=Lldp(params["chassis"], int(params["port"]), nonce),
                   adversarial=True), False)]
    if kind == PORT_STATUS_SPOOF:
        return [(f(src_mac=my_mac, dst_mac="controller", kind=eng.OFMSG,
                   payload=PortStatus(target["switch"], int(target["port"]),
                                      params.get("up", False)),
                   auth_token=token, adversarial=True), False)]
    if kind == CTRL_ELECT_SPOOF:
        return [(f(src_mac=my_mac, dst_mac=eng.MCAST_ELECT, kind=eng.ELECTION,
                   payload=ElectionMsg("CTRL", "cluster", node.id,
                                       params.get("priority", 0)),
                   auth_token=token, adversarial=True), False)]
    if kind == SYNC_FORGE:
        entry = (("profile", victim["mac"], 0),
                 (params["to_switch"], int(params["to_port"]), None),
                 (engine.now + params.get("ts_offset", 10**6), node.id, 10**6 + n))
        snap = StoreSnapshot(node.id, {}, (entry,))
        return [(f(src_mac=my_mac, dst_mac=eng.MCAST_ELECT, kind=eng.SYNC,
                   payload=snap, auth_token=token, adversarial=True), False)]
    if kind == SWITCH_IMPERSONATE:
        frames = []
        if n == 1:
            frames.append((f(src_mac=my_mac, dst_mac=eng.BROADCAST,
                             kind=eng.TRUNK_NEG,
                             payload=TrunkNeg(node.id,
                                              tuple(params.get("allowed", (10, 20)))),
                             adversarial=True), False))
        else:
            frames.append((f(src_mac=my_mac, dst_mac=victim["mac"], kind=eng.DATA,
                             vlan_tags=(params.get("vlan", 20),),
                             adversarial=True), False))
        return frames
    raise SimError(f"unknown attack kind {kind}")


# -- measurement ---------------------------------------------------------------


def _adversary_nodes(scenario: dict) -> set:
    return {a["node"] for a in scenario.get("attacks", [])}


def _link_up_at(trace_events, link_id: str, tick: int, initially: bool = True) -> bool:
    up = initially
    for r in trace_events:
        if r["t"] > tick:
            break
        if r["ev"] == "link_status" and r["link"] == link_id:
            up = r["up"]
    return up


def measure(engine, scenario: dict) -> dict:
    """Attack-success metrics and the per-kind verdict, computed only from
    the recorded trace and counters."""
    attacks = scenario.get("attacks", [])
    observe = scenario.get("observe", {})
    events = engine.trace.events
    adversaries = _adversary_nodes(scenario)

    metrics = {
        "adversarial_frames": sum(1 for r in events
                                  if r["ev"] == "inject" and r.get("adv")),
        "defense_blocks": sum(engine.counters.defense_blocks.values()),
        "frames_delivered": dict(sorted(engine.counters.delivered.items())),
    }

    # Loop audit: a (node, frame) pair may be *accepted* into the data path
    # at most once. Arrivals killed at ingress (blocked port, VLAN filter,
    # defense drop) are the loop-prevention machinery doing its job and are
    # subtracted out.
    hops: dict[tuple, int] = {}
    killed: dict[tuple, int] = {}
    for r in events:
        if r["ev"] == "hop" and r.get("kind") == eng.DATA and not r.get("adv"):
            key = (r["node"], r["fid"])
            hops[key] = hops.get(key, 0) + 1
        elif r["ev"] in ("drop", "defense_block") and r.get("node") is not None:
            key = (r["node"], r.get("fid"))
            killed[key] = killed.get(key, 0) + 1
    revisits = 0
    for key, n in hops.items():
        accepted = n - killed.get(key, 0)
        if accepted > 1:
            revisits += accepted - 1
    metrics["loop_revisits"] = revisits
    metrics["forwarding_loop_detected"] = revisits > 0

    # controller topology divergence
    divergence = 0
    for nid in sorted(engine.topo.nodes):
        node = engine.topo.nodes[nid]
        if node.kind == "controller" and node.alive:
            divergence = max(divergence, node.behavior.topology_divergence())
    metrics["topology_divergence"] = divergence

    # elections, per observed scope; the verdict reads the winner as of the
    # end of the measurement window (attacks may be out-lived by recovery)
    if attacks:
        win_start, win_end = _window(attacks)
    else:
        win_start, win_end = 0, engine.horizon
    elected = _elected_at(engine, observe, win_end)
    metrics["elected_master"] = elected

    # delivery timeline for the observed flow (failover scenarios)
    flow = observe.get("flow")
    if flow:
        dst = flow[1]
        watch_from = observe.get("watch_from", 0)
        ticks = [r["t"] for r in events
                 if r["ev"] == "recv" and r["node"] == dst
                 and r.get("kind") == eng.DATA and not r.get("adv")
                 and r["t"] >= watch_from]
        gaps = [b - a for a, b in zip(ticks, ticks[1:])]
        metrics["delivery_max_gap"] = max(gaps) if gaps else None
        metrics["deliveries_observed"] = len(ticks)

    if not attacks:
        metrics["interception_ratio"] = 0.0
        metrics["frames_intercepted"] = 0
        metrics["verdict"] = ATTACK_BLOCKED  # vacuous: nothing was injected
        metrics["verdict_reason"] = "baseline run, no adversary configured"
        return metrics

    start, end = win_start, win_end
    primary = attacks[0]
    victim = _victim(engine, primary.get("target", {}))

    def victim_destined(r):
        if not victim:
            return False
        if victim.get("mac") and r.get("dst") == victim["mac"]:
            return True
        if victim.get("ip") and r.get("ip_dst") == victim["ip"]:
            return True
        return False

    sent_ids = {r["fid"] for r in events
                if r["ev"] == "inject" and not r.get("adv") and not r.get("probe")
                and r.get("kind") == eng.DATA and start <= r["t"] < end
                and victim_destined(r)}
    hops_at_adv = {r["fid"] for r in events
                   if r["ev"] in ("hop", "recv") and r["node"] in adversaries
                   and not r.get("adv") and r["fid"] in sent_ids}
    metrics["victim_frames_sent"] = len(sent_ids)
    metrics["frames_intercepted"] = len(hops_at_adv)
    metrics["interception_ratio"] = (
        len(hops_at_adv) / len(sent_ids) if sent_ids else 0.0)

    # blackhole: honest victim traffic that died on a nonexistent egress
    blackholed = sum(1 for r in events
                     if r["ev"] == "drop" and r["reason"] in ("no_link", "veto_hold")
                     and r["fid"] in sent_ids)
    metrics["blackholed"] = blackholed

    kind = primary["kind"]
    predicate = primary.get("predicate")
    ok = False
    if predicate == "blackhole":
        ok = blackholed > 0
    elif kind in (MAC_SPOOF, MAC_FLOOD, ARP_POISON, HOST_PROFILE_POISON,
                  PROFILE_FLOOD, LSA_FALSIFY):
        threshold = primary.get("threshold", INTERCEPTION_THRESHOLD)
        ok = metrics["interception_ratio"] > threshold
    elif kind in (VLAN_DOUBLE_TAG, SWITCH_IMPERSONATE):
        ok = any(r["ev"] == "recv" and r.get("adv") and r["node"] == victim.get("node")
                 for r in events)
    elif kind == BPDU_SPOOF:
        claimed = primary.get("params", {}).get("bridge", "00:00:adv")
        ok = elected == claimed
    elif kind == BPDU_FLOOD:
        churn = sum(1 for r in events
                    if r["ev"] == "stp_state" and start <= r["t"] < end)
        metrics["stp_churn"] = churn
        ok = churn >= primary.get("threshold", BPDU_FLOOD_CHURN)
    elif kind == LACPDU_SPOOF:
        flaps = sum(1 for r in events
                    if r["ev"] == "lag_flap" and start <= r["t"] < end + 10)
        metrics["lag_flaps"] = flaps
        ok = flaps > 0
    elif kind in (STACK_ELECT_SPOOF, CTRL_ELECT_SPOOF):
        ok = elected == primary["node"]
    elif kind == VRRP_SPOOF:
        claimed = primary.get("params", {}).get(
            "router_ip", engine.topo.nodes[primary["node"]].config.get("ip"))
        ok = elected == claimed
    elif kind == LLDP_FABRICATE:
        ok = divergence > 0
    elif kind == PORT_STATUS_SPOOF:
        wrong = 0
        for r in events:
            if r["ev"] != "group_mod" or not (start <= r["t"] < end + 10):
                continue
            sw = primary["target"]["switch"]
            members = scenario_switch_group(scenario, sw, r["group"])
            for p in members:
                if p in r["live"]:
                    continue
                link = engine.topo.link_at(sw, p)
                if link is not None and _link_up_at(events, link.id, r["t"]):
                    wrong += 1
        metrics["wrong_group_exclusions"] = wrong
        ok = wrong > 0
    elif kind == SYNC_FORGE:
        ok = _store_poisoned(engine, victim)
    metrics["predicate_holds"] = ok

    attack_active = metrics["adversarial_frames"] > 0 or any(
        a.get("placement") in (NETWORK_ELEMENT, CONTROLLER) for a in attacks)
    if ok:
        metrics["verdict"] = ATTACK_SUCCEEDED
    elif attack_active:
        metrics["verdict"] = ATTACK_BLOCKED
    else:
        metrics["verdict"] = INCONCLUSIVE
    metrics["verdict_reason"] = f"{kind} predicate={'holds' if ok else 'fails'}"
    metrics["attack_window"] = [start, end]
    return metrics


def _elected_at(engine, observe: dict, tick: int):
    """Winner of the observed election scope as of `tick`, reconstructed
    from trace events (falls back to live behavior state)."""
    scope = observe.get("election")
    if scope is None:
        return None
    events = engine.trace.events
    if scope == "stp":
        sw = observe.get("switch") or next(
            (n for n in sorted(engine.topo.nodes)
             if engine.topo.nodes[n].kind == "switch"), None)
        if sw is None:
            return None
        root = None
        for r in events:
            if r["t"] > tick:
                break
            if r["ev"] == "stp_state" and r["node"] == sw:
                root = r["root"][1]
        if root is None and engine.topo.nodes[sw].behavior.stp is not None:
            root = engine.topo.nodes[sw].behavior.stp.root_id[1]
        return root
    vip = observe.get("vip")
    want_scope = {"stack": "stack", "vrrp": "vrrp", "ctrl": "ctrl"}[scope]
    winner = None
    for r in events:
        if r["t"] > tick:
            break
        if r["ev"] != "elect" or r.get("scope") != want_scope:
            continue
        if want_scope == "vrrp" and vip is not None and r.get("vip") != vip:
            continue
        if want_scope == "stack" and observe.get("switch") \
                and r["node"] != observe["switch"]:
            continue
        winner = r["master"]
    return winner


def scenario_switch_group(scenario: dict, switch: str, group: int) -> list:
    for node in scenario["topology"]["nodes"]:
        if node["id"] == switch:
            groups = node.get("groups", {})
            return sorted(int(p) for p in groups.get(group, groups.get(str(group), [])))
    return []


def _store_poisoned(engine, victim: dict) -> bool:
    """True if any live replica holds a location for the victim that differs
    from where the victim is physically attached."""
    mac = victim.get("mac")
    vnode = victim.get("node")
    if mac is None or vnode is None:
        return False
    true_loc = None
    host = engine.topo.nodes[vnode]
    for port in host.ports.values():
        if port.link_id is not None:
            far = engine.topo.links[port.link_id].other_end(vnode, port.port)
            true_loc = far
    for nid in sorted(engine.topo.nodes):
        node = engine.topo.nodes[nid]
        if node.kind != "controller" or not node.alive:
            continue
        for key, prof in node.behavior.profiles.items():
            if key[0] == mac and (prof["switch"], prof["port"]) != true_loc:
                return True
    return False
