"""Composable defense policies: ingress filters, symbolic origin auth,
claim corroboration, and the staged controller pipeline with N-version
cross-checking.

Policies never forge traffic; they only pass, drop, or veto. Crypto is
symbolic: a token verifies iff (principal, key) is in the keyring, which
captures the trust argument without modeling real signatures.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import engine as eng
from .frames import Bpdu

PORT_SECURITY = "PORT_SECURITY"
BPDU_FILTER = "BPDU_FILTER"
ROOT_GUARD = "ROOT_GUARD"
UNI_CONTROL_FILTER = "UNI_CONTROL_FILTER"
VLAN_TAG_FILTER = "VLAN_TAG_FILTER"
DAI = "DAI"
VRRP_TTL_CHECK = "VRRP_TTL_CHECK"
CHANNEL_AUTH = "CHANNEL_AUTH"
LLDP_AUTH = "LLDP_AUTH"
CORROBORATION = "CORROBORATION"
LOCATION_VALIDATION = "LOCATION_VALIDATION"

PORT_POLICY_KINDS = (PORT_SECURITY, BPDU_FILTER, ROOT_GUARD, UNI_CONTROL_FILTER,
                     VLAN_TAG_FILTER)
NODE_POLICY_KINDS = (DAI, VRRP_TTL_CHECK, CHANNEL_AUTH, LLDP_AUTH, CORROBORATION,
                     LOCATION_VALIDATION)
POLICY_KINDS = PORT_POLICY_KINDS + NODE_POLICY_KINDS

# Control kinds a UNI filter drops when none are named explicitly. ARP is
# deliberately absent: hosts legitimately speak it.
DEFAULT_UNI_FILTERED = (eng.BPDU, eng.LACPDU, eng.LSA, eng.VRRP, eng.LLDP,
                        eng.OFMSG, eng.ELECTION, eng.SYNC)


@dataclass
class DefensePolicy:
    kind: str
    params: dict = field(default_factory=dict)
    enabled: bool = True

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown defense policy kind {self.kind}")


def node_policy(node, kind: str) -> Optional[DefensePolicy]:
    for pol in node.policies:
        if pol.kind == kind and pol.enabled:
            return pol
    return None


def apply_ingress(ctx, port_desc, frame) -> Optional[str]:
    """Run the port's filters in attachment order. Returns the drop reason of
    the first violated policy, or None to pass. Drops are counted per
    (policy, port)."""
    for pol in port_desc.policies:
        if not pol.enabled:
            continue
        reason = _check(pol, ctx, port_desc, frame)
        if reason is not None:
            ctx.defense_block(pol.kind, port_desc.port, frame, reason)
            return reason
    return None


def _check(pol, ctx, port_desc, frame) -> Optional[str]:
    if pol.kind == PORT_SECURITY:
        bindings = pol.params.get("bindings")
        if bindings is not None and frame.src_mac not in bindings:
            return "MacBindingViolation"
        limit = pol.params.get("mac_limit")
        if limit is not None:
            if frame.src_mac not in port_desc.seen_macs:
                if len(port_desc.seen_macs) >= limit:
                    return "MacLimit"
                port_desc.seen_macs.add(frame.src_mac)
        return None
    if pol.kind == BPDU_FILTER:
        if frame.kind == eng.BPDU:
            return "BpduOnUni"
        return None
    if pol.kind == ROOT_GUARD:
        if frame.kind == eng.BPDU and isinstance(frame.payload, Bpdu):
            stp = getattr(ctx.node.behavior, "stp", None)
            if stp is not None and frame.payload.claimed_root < stp.root_id:
                return "RootGuardSuperior"
        return None
    if pol.kind == UNI_CONTROL_FILTER:
        kinds = tuple(pol.params.get("kinds", DEFAULT_UNI_FILTERED))
        if frame.kind in kinds:
            return "ControlOnUni"
        return None
    if pol.kind == VLAN_TAG_FILTER:
        # The strip itself happens in VLAN classification; nothing to drop here.
        return None
    return None


def has_port_policy(port_desc, kind: str) -> bool:
    return any(p.kind == kind and p.enabled for p in port_desc.policies)


# -- symbolic origin authentication ----------------------------------------

def make_keyring(principals) -> dict:
    return {p: f"k:{p}" for p in sorted(principals)}


def sign(keyring: dict, principal: str) -> Optional[tuple]:
    key = keyring.get(principal)
    return (principal, key) if key else None


def verify_auth(frame, keyring: dict) -> bool:
    """PASS iff the frame's token matches the keyring. A compromised element
    holds its own valid key, so auth alone never stops insiders."""
    tok = frame.auth_token
    if not tok:
        return False
    principal, key = tok
    return keyring.get(principal) == key


def auth_gate(ctx, node, frame, kind_list) -> bool:
    """Apply CHANNEL_AUTH if configured for this frame kind. True = accept."""
    pol = node_policy(node, CHANNEL_AUTH)
    if pol is None:
        return True
    kinds = tuple(pol.params.get("kinds", (eng.LSA, eng.OFMSG, eng.ELECTION, eng.SYNC)))
    if frame.kind not in kinds or frame.kind not in kind_list:
        return True
    keyring = pol.params.get("keyring", {})
    if verify_auth(frame, keyring):
        return True
    ctx.defense_block(CHANNEL_AUTH, None, frame, "AuthFail")
    return False


# -- corroboration -----------------------------------------------------------

def corroborate_links(claims: dict) -> dict:
    """claims: origin -> {neighbor: cost}. A link is accepted iff both
    endpoints assert it; the corroborated cost is the max of the two claims,
    so an insider cannot under-bid a link it sits on."""
    accepted = {}
    for a in sorted(claims):
        for b, cost_ab in sorted(claims[a].items()):
            if b in claims and a in claims[b]:
                key = (min(a, b), max(a, b))
                accepted[key] = max(cost_ab, claims[b][a])
    return accepted


def one_sided_links(claims: dict) -> dict:
    """Every claimed link, corroborated or not, keyed like corroborate_links.
    Used when the corroboration defense is off."""
    links = {}
    for a in sorted(claims):
        for b, cost in sorted(claims[a].items()):
            key = (min(a, b), max(a, b))
            links[key] = min(cost, links.get(key, cost))
    return links


# -- staged controller pipeline ---------------------------------------------

class StageDivergence(Exception):
    def __init__(self, outputs):
        super().__init__("pipeline stage instances disagree")
        self.outputs = outputs


def cross_check(outputs: list) -> list:
    """N-version cross-check of stage outputs. All instances must agree or
    the result is vetoed (fail closed)."""
    first = outputs[0]
    for other in outputs[1:]:
        if other != first:
            raise StageDivergence(outputs)
    return first
