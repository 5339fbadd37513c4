"""Platform moderation service: the virtual user ``@moderation``.

Runs as an ordinary client under the reserved name, receiving escalated
reports in two-member groups. Each escalation becomes a docket case; the
embedded action messages are re-verified against the directory before any
decision is allowed. Decisions translate into authenticated admin calls
against the delivery service (ban) and the directory (revoke).

The service only ever stores what was explicitly escalated to it.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import crypto
from .canonical import canonical_bytes, to_hex
from .errors import ParseError, UnknownCaseError, UnverifiedCaseError
from .governance import DirectoryFn, Report, verify_report

MODERATION_USERNAME = "@moderation"

SECONDS_PER_DAY = 86400.0


@dataclass
class Case:
    case_id: str
    reporter: str
    report: dict  # wire-form Report
    verified: bool
    decision: Optional[dict] = None  # {"kind": "ban", "days": float} | {"kind": "revoke"}
    decided_at: Optional[float] = None

    def summary(self) -> dict:
        return {
            "case_id": self.case_id,
            "reporter": self.reporter,
            "reported": self.report.get("reported"),
            "reason": self.report.get("reason"),
            "verified": self.verified,
            "decision": self.decision,
            "decided_at": self.decided_at,
        }

    def to_wire(self) -> dict:
        return {
            "case_id": self.case_id,
            "reporter": self.reporter,
            "report": self.report,
            "verified": self.verified,
            "decision": self.decision,
            "decided_at": self.decided_at,
        }

    @staticmethod
    def from_wire(obj: dict) -> "Case":
        return Case(
            case_id=obj["case_id"],
            reporter=obj["reporter"],
            report=obj["report"],
            verified=obj["verified"],
            decision=obj.get("decision"),
            decided_at=obj.get("decided_at"),
        )


class ModerationService:
    """Docket of escalated reports plus the platform-level decision hooks.

    ``ban_fn(body, sig_hex)`` and ``revoke_fn(body, sig_hex)`` send the
    authenticated admin operations to the DS and AS respectively;
    ``directory`` resolves governance keys for report verification.
    """

    def __init__(
        self,
        admin_keypair: crypto.SigKeyPair,
        directory: DirectoryFn,
        ban_fn: Callable[[dict, str], dict],
        revoke_fn: Callable[[dict, str], dict],
        clock: Callable[[], float] = None,
    ):
        self.admin_keypair = admin_keypair
        self.directory = directory
        self.ban_fn = ban_fn
        self.revoke_fn = revoke_fn
        self.clock = clock or (lambda: 0.0)
        self._cases: dict = {}
        self._order: list = []
        self._lock = threading.RLock()

    # -- intake -----------------------------------------------------------------

    def receive_escalation(self, reporter: str, payload: dict) -> Case:
        """Turn one decrypted Escalate payload into a verified-or-not case."""
        try:
            report = Report.from_wire(payload["report"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed escalation payload: {exc}") from exc
        verified = verify_report(report, self.directory)
        case_id = crypto.sha256(canonical_bytes(report.to_wire()) + reporter.encode()).hex()[:16]
        with self._lock:
            existing = self._cases.get(case_id)
            if existing is not None:
                return existing
            case = Case(case_id=case_id, reporter=reporter, report=report.to_wire(), verified=verified)
            self._cases[case_id] = case
            self._order.append(case_id)
        return case

    # -- decisions -----------------------------------------------------------------

    def decide(self, case_id: str, decision: dict) -> Case:
        with self._lock:
            case = self._cases.get(case_id)
        if case is None:
            raise UnknownCaseError(case_id)
        if not case.verified:
            raise UnverifiedCaseError(case_id)
        kind = decision.get("kind")
        target = case.report["reported"]
        if kind == "ban":
            days = decision.get("days")
            until = None if days is None else self.clock() + float(days) * SECONDS_PER_DAY
            body = {"username": target, "until": until, "nonce": crypto.sha256(case_id.encode()).hex()[:16]}
            self.ban_fn(body, to_hex(crypto.sign(self.admin_keypair.secret, canonical_bytes(body))))
        elif kind == "revoke":
            body = {"username": target, "nonce": crypto.sha256(case_id.encode()).hex()[:16]}
            self.revoke_fn(body, to_hex(crypto.sign(self.admin_keypair.secret, canonical_bytes(body))))
        else:
            raise UnknownCaseError(f"unknown decision kind {kind!r}")
        with self._lock:
            case.decision = dict(decision)
            case.decided_at = self.clock()
        return case

    # -- docket -----------------------------------------------------------------------

    def list_cases(self, verified: Optional[bool] = None) -> list:
        with self._lock:
            cases = [self._cases[cid] for cid in self._order]
        if verified is not None:
            cases = [c for c in cases if c.verified == verified]
        return [c.summary() for c in cases]

    def get_case(self, case_id: str) -> Case:
        with self._lock:
            case = self._cases.get(case_id)
        if case is None:
            raise UnknownCaseError(case_id)
        return case

    # -- persistence ---------------------------------------------------------------------

    def to_dict(self) -> dict:
        with self._lock:
            return {"cases": [self._cases[cid].to_wire() for cid in self._order]}

    def restore(self, obj: dict) -> None:
        with self._lock:
            self._cases = {}
            self._order = []
            for wire in obj.get("cases", []):
                case = Case.from_wire(wire)
                self._cases[case.case_id] = case
                self._order.append(case.case_id)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
