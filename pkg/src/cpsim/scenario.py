"""Scenario files: schema validation (unknown keys rejected, errors carry
field paths) and construction of a ready-to-run engine."""
from __future__ import annotations

from typing import Any, Optional

import yaml

from . import adversary, defenses, engine as eng
from .engine import Engine, SimError, Topology
from .hosts import HostBehavior
from .l2 import SwitchBehavior
from .l3 import RouterBehavior
from .sdn import ControllerBehavior, SdnSwitchBehavior

PARADIGMS = ("L2", "L3", "SDN")
THREAT_MODELS = ("END_HOST", "ALL_ELEMENT")
NODE_KINDS = ("host", "switch", "router", "sdn_switch", "controller")

BEHAVIORS = {
    "host": HostBehavior,
    "switch": SwitchBehavior,
    "router": RouterBehavior,
    "sdn_switch": SdnSwitchBehavior,
    "controller": ControllerBehavior,
}


class SchemaError(SimError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


_NODE_KEYS = {
    "host": {"mac", "ip", "prefix", "gateway", "reply"},
    "switch": {"stp", "stp_priority", "mac_capacity", "vlans", "vlan_autoneg",
               "lags", "stack", "fabric", "fabric_ttl"},
    "router": {"interfaces", "static_routes", "link_state", "ecmp", "vrrp",
               "static_arp"},
    "sdn_switch": {"flow_capacity", "groups"},
    "controller": {"priority", "sync_period", "discovery_period",
                   "profile_capacity", "n_version", "fabric_roles",
                   "fabric_install_at"},
}

_TOP_KEYS = {"version", "name", "paradigm", "threat_model", "seed", "horizon",
             "control", "topology", "traffic", "defenses", "failures",
             "attacks", "observe"}
_LINK_KEYS = {"a", "b", "delay", "cost", "id", "role_a", "role_b"}
_TRAFFIC_KEYS = {"src", "dst", "start", "period", "count", "flow_label",
                 "vary_flow"}
_ATTACK_KEYS = {"kind", "placement", "node", "start", "period", "per_tick",
                "duration", "target", "params", "predicate", "threshold",
                "window"}
_FAILURE_KEYS = {"kind", "link", "node", "at"}
_OBSERVE_KEYS = {"election", "switch", "vip", "flow", "watch_from",
                 "expect_loops"}
_DEFENSE_KEYS = {"uni_defaults", "port_policies", "node_policies", "bindings",
                 "n_version"}
_POLICY_KEYS = {"kind", "params"}


def _check_keys(obj: dict, allowed: set, path: str):
    for key in obj:
        if key not in allowed:
            raise SchemaError(f"{path}.{key}", "unknown key")


def _require(obj: dict, key: str, types, path: str):
    if key not in obj:
        raise SchemaError(f"{path}.{key}", "missing required field")
    if not isinstance(obj[key], types):
        raise SchemaError(f"{path}.{key}",
                          f"expected {types}, got {type(obj[key]).__name__}")
    return obj[key]


def validate(cfg: dict) -> dict:
    if not isinstance(cfg, dict):
        raise SchemaError("<root>", "scenario must be a mapping")
    _check_keys(cfg, _TOP_KEYS, "<root>")
    _require(cfg, "name", str, "<root>")
    if _require(cfg, "paradigm", str, "<root>") not in PARADIGMS:
        raise SchemaError("paradigm", f"must be one of {PARADIGMS}")
    if cfg.get("threat_model", "END_HOST") not in THREAT_MODELS:
        raise SchemaError("threat_model", f"must be one of {THREAT_MODELS}")
    horizon = _require(cfg, "horizon", int, "<root>")
    if horizon < 1:
        raise SchemaError("horizon", "must be >= 1")
    if not isinstance(cfg.get("seed", 0), int):
        raise SchemaError("seed", "must be an integer")

    topo = _require(cfg, "topology", dict, "<root>")
    _check_keys(topo, {"nodes", "links"}, "topology")
    ids = set()
    for i, node in enumerate(_require(topo, "nodes", list, "topology")):
        path = f"topology.nodes[{i}]"
        nid = _require(node, "id", str, path)
        kind = _require(node, "kind", str, path)
        if kind not in NODE_KINDS:
            raise SchemaError(f"{path}.kind", f"must be one of {NODE_KINDS}")
        if nid in ids:
            raise SchemaError(f"{path}.id", f"duplicate node id {nid}")
        ids.add(nid)
        _check_keys(node, _NODE_KEYS[kind] | {"id", "kind"}, path)
    for i, link in enumerate(topo.get("links", [])):
        path = f"topology.links[{i}]"
        _check_keys(link, _LINK_KEYS, path)
        for end in ("a", "b"):
            val = _require(link, end, (list, tuple), path)
            if len(val) != 2 or val[0] not in ids:
                raise SchemaError(f"{path}.{end}",
                                  "must be [existing-node-id, port]")
        if link.get("delay", 1) < 1:
            raise SchemaError(f"{path}.delay", "must be >= 1")
        if link.get("cost", 1) < 1:
            raise SchemaError(f"{path}.cost", "must be >= 1")

    for i, t in enumerate(cfg.get("traffic", [])):
        path = f"traffic[{i}]"
        _check_keys(t, _TRAFFIC_KEYS, path)
        for key in ("src", "dst"):
            if _require(t, key, str, path) not in ids:
                raise SchemaError(f"{path}.{key}", "unknown node")
        _require(t, "start", int, path)

    d = cfg.get("defenses", {})
    _check_keys(d, _DEFENSE_KEYS, "defenses")
    for where, entries in (("port_policies", d.get("port_policies", [])),
                           ("node_policies", d.get("node_policies", []))):
        for i, entry in enumerate(entries):
            path = f"defenses.{where}[{i}]"
            allowed = {"node", "policies"} | ({"ports"} if where == "port_policies"
                                              else set())
            _check_keys(entry, allowed, path)
            if _require(entry, "node", str, path) not in ids:
                raise SchemaError(f"{path}.node", "unknown node")
            for j, pol in enumerate(_require(entry, "policies", list, path)):
                _check_keys(pol, _POLICY_KEYS, f"{path}.policies[{j}]")
                if pol.get("kind") not in defenses.POLICY_KINDS:
                    raise SchemaError(f"{path}.policies[{j}].kind",
                                      f"must be one of {defenses.POLICY_KINDS}")
    for j, pol in enumerate(d.get("uni_defaults", [])):
        _check_keys(pol, _POLICY_KEYS, f"defenses.uni_defaults[{j}]")
        if pol.get("kind") not in defenses.POLICY_KINDS:
            raise SchemaError(f"defenses.uni_defaults[{j}].kind",
                              f"must be one of {defenses.POLICY_KINDS}")

    for i, a in enumerate(cfg.get("attacks", [])):
        path = f"attacks[{i}]"
        _check_keys(a, _ATTACK_KEYS, path)
        if _require(a, "kind", str, path) not in adversary.ATTACK_KINDS:
            raise SchemaError(f"{path}.kind",
                              f"must be one of {adversary.ATTACK_KINDS}")
        if a.get("placement", "END_HOST") not in adversary.PLACEMENTS:
            raise SchemaError(f"{path}.placement",
                              f"must be one of {adversary.PLACEMENTS}")
        if _require(a, "node", str, path) not in ids:
            raise SchemaError(f"{path}.node", "unknown node")
        _require(a, "start", int, path)

    for i, fail in enumerate(cfg.get("failures", [])):
        path = f"failures[{i}]"
        _check_keys(fail, _FAILURE_KEYS, path)
        if _require(fail, "kind", str, path) not in ("link_down", "link_up",
                                                     "node_down"):
            raise SchemaError(f"{path}.kind", "unknown failure kind")
        _require(fail, "at", int, path)
        if fail["kind"] == "node_down" and fail.get("node") not in ids:
            raise SchemaError(f"{path}.node", "unknown node")

    if "observe" in cfg:
        _check_keys(cfg["observe"], _OBSERVE_KEYS, "observe")
    if "control" in cfg:
        _check_keys(cfg["control"], {"mode"}, "control")
        if cfg["control"].get("mode", "dedicated") not in ("dedicated", "uni"):
            raise SchemaError("control.mode", "must be dedicated or uni")
    return cfg


def load_file(path: str) -> dict:
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    return validate(cfg)


# -- building ---------------------------------------------------------------------


def _auto_control_links(topo: Topology):
    """Case (1): dedicated control links between every SDN switch and every
    controller, plus a full mesh between controller replicas."""
    switches = sorted(n for n, d in topo.nodes.items() if d.kind == "sdn_switch")
    controllers = sorted(n for n, d in topo.nodes.items() if d.kind == "controller")
    existing = set()
    for link in topo.links.values():
        existing.add(frozenset((link.a[0], link.b[0])))
    for si, sw in enumerate(switches):
        for ci, ctl in enumerate(controllers):
            if frozenset((sw, ctl)) in existing:
                continue
            topo.add_link((sw, 100 + ci), (ctl, 200 + si),
                          link_id=f"ctl:{sw}:{ctl}")
    for i, ca in enumerate(controllers):
        for j, cb in enumerate(controllers):
            if i >= j or frozenset((ca, cb)) in existing:
                continue
            topo.add_link((ca, 300 + j), (cb, 300 + i), link_id=f"clu:{ca}:{cb}")


def _policy_from_cfg(pol: dict, keyring: dict, bindings: dict) -> defenses.DefensePolicy:
    params = dict(pol.get("params", {}))
    if pol["kind"] == defenses.CHANNEL_AUTH:
        params.setdefault("keyring", keyring)
    if pol["kind"] == defenses.DAI:
        params.setdefault("bindings", bindings)
    return defenses.DefensePolicy(pol["kind"], params)


def build_engine(cfg: dict) -> Engine:
    cfg = validate(cfg)
    topo = Topology()
    for node in cfg["topology"]["nodes"]:
        config = {k: v for k, v in node.items() if k not in ("id", "kind")}
        topo.add_node(node["id"], node["kind"], config)
    for i, link in enumerate(cfg["topology"].get("links", [])):
        topo.add_link(tuple(link["a"]), tuple(link["b"]),
                      delay=link.get("delay", 1), cost=link.get("cost", 1),
                      link_id=link.get("id", f"l{i}"),
                      role_a=link.get("role_a"), role_b=link.get("role_b"))
    if cfg["paradigm"] == "SDN":
        _auto_control_links(topo)
    # ports on controllers are control-channel ports regardless of peer kind
    for node in topo.nodes.values():
        if node.kind == "controller":
            for port in node.ports.values():
                port.role = eng.CONTROLLER_PORT

    engine = Engine(topo, seed=cfg.get("seed", 0), horizon=cfg["horizon"])
    engine.scenario_name = cfg.get("name", "unnamed")

    infra = sorted(n for n, d in topo.nodes.items()
                   if d.kind in ("switch", "router", "sdn_switch", "controller"))
    keyring = defenses.make_keyring(infra)
    nonce = f"nonce:{engine.seed}"
    bindings = dict(cfg.get("defenses", {}).get("bindings", {}))
    if not bindings:
        for node in topo.nodes.values():
            if node.kind == "host" and node.config.get("ip"):
                bindings[node.config["ip"]] = node.config.get(
                    "mac", eng.host_mac(node.id))

    for nid in infra:
        topo.nodes[nid].config["auth_token"] = defenses.sign(keyring, nid)
    d = cfg.get("defenses", {})
    for node in topo.nodes.values():
        if node.kind == "controller":
            node.config.setdefault("nonce", nonce)
            if "n_version" in d:
                node.config.setdefault("n_version", d["n_version"])

    skip_uni_filters = cfg.get("control", {}).get("mode") == "uni"

    def _attach_port(node, ports, pol_cfgs):
        for pol_cfg in pol_cfgs:
            if (skip_uni_filters
                    and pol_cfg["kind"] == defenses.UNI_CONTROL_FILTER):
                # With the controller attach point on a UNI, edge filtering of
                # control PDUs would cut off the controller itself.
                continue
            for p in ports:
                node.port(int(p)).policies.append(
                    _policy_from_cfg(pol_cfg, keyring, bindings))

    for entry in d.get("port_policies", []):
        node = topo.nodes[entry["node"]]
        ports = entry.get("ports", "uni")
        if ports == "uni":
            ports = [p for p, pd in node.ports.items() if pd.role == eng.UNI]
        _attach_port(node, ports, entry["policies"])
    if d.get("uni_defaults"):
        for node in topo.nodes.values():
            if node.kind == "host":
                continue
            uni_ports = [p for p, pd in node.ports.items() if pd.role == eng.UNI]
            if uni_ports:
                _attach_port(node, uni_ports, d["uni_defaults"])
    for entry in d.get("node_policies", []):
        node = topo.nodes[entry["node"]]
        for pol_cfg in entry["policies"]:
            node.policies.append(_policy_from_cfg(pol_cfg, keyring, bindings))

    # controllers need the group layout to manage redundancy
    switch_groups = {}
    for node in topo.nodes.values():
        if node.kind == "sdn_switch" and node.config.get("groups"):
            switch_groups[node.id] = node.config["groups"]
    for node in topo.nodes.values():
        if node.kind == "controller" and switch_groups:
            node.config.setdefault("switch_groups", switch_groups)

    for nid, node in topo.nodes.items():
        behavior = BEHAVIORS[node.kind](node)
        node.behavior = behavior
        behavior.attach(eng.NodeCtx(engine, node))
    for nid, node in topo.nodes.items():
        node.behavior.start()

    for t in cfg.get("traffic", []):
        src = topo.nodes[t["src"]].behavior
        dst_cfg = topo.nodes[t["dst"]].config
        dst_ip = dst_cfg.get("ip")
        use_ip = dst_ip is not None and src.ip is not None
        dst_mac = dst_cfg.get("mac", eng.host_mac(t["dst"]))
        period = t.get("period", 1)
        base_label = t.get("flow_label", 0)
        for k in range(t.get("count", 1)):
            label = base_label + (k if t.get("vary_flow") else 0)
            if use_ip:
                engine.schedule(t["start"] + k * period, src.send_data,
                                None, dst_ip, label)
            else:
                engine.schedule(t["start"] + k * period, src.send_data,
                                dst_mac, None, label)

    for fail in cfg.get("failures", []):
        if fail["kind"] == "link_down":
            engine.partition_link(fail["link"], fail["at"])
        elif fail["kind"] == "link_up":
            engine.heal_link(fail["link"], fail["at"])
        else:
            engine.kill_node(fail["node"], fail["at"])

    adversary.schedule_attacks(engine, cfg)
    return engine


def run(cfg: dict) -> tuple:
    """Build, run, and measure a scenario. Returns (engine, metrics)."""
    engine = build_engine(cfg)
    engine.run()
    metrics = adversary.measure(engine, cfg)
    return engine, metrics
