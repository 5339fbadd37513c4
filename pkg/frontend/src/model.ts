// View-model for the governance console. Holds only data obtained from the
// control API (never key material) and applies pushed events incrementally,
// so the UI reflects peer activity without reloading.

export interface GroupSummary {
  group_id: string;
  name: string | null;
  epoch: number | null;
  awaiting_state: boolean;
}

export interface PendingPoll {
  proposal_id: string;
  proposer: string;
  action: { action_type: string; payload: Record<string, unknown> };
  votes: Record<string, string>;
  roster_snapshot: string[];
  created_at_epoch: number;
}

export interface AlertWire {
  kind: string;
  group_id: string;
  data: Record<string, unknown>;
}

export interface GroupState {
  group_id: string;
  epoch: number;
  roster: string[];
  frozen: boolean;
  awaiting_state: boolean;
  name: string | null;
  topic: string | null;
  kv: Record<string, unknown>;
  roles: Record<string, string[]>;
  user_roles: Record<string, string[]>;
  pending_polls: PendingPoll[];
  alerts: AlertWire[];
  gov_hash_hex: string | null;
}

export interface MessageWire {
  action: {
    header: { sender: string; action_id: string; group_id: string; community_id: string };
    action_type: string;
    payload: Record<string, unknown>;
  };
  flagged: boolean;
  removed: boolean;
  hidden: boolean;
}

export interface CaseSummary {
  case_id: string;
  reporter: string;
  reported: string;
  reason: string;
  verified: boolean;
  decision: Record<string, unknown> | null;
  decided_at: number | null;
}

export interface ConsoleEvent {
  id: number;
  kind: string;
  group_id: string;
  data: Record<string, unknown>;
}

// What the controller should refetch after applying an event.
export interface RefreshPlan {
  groups?: boolean;
  state?: string;
  messages?: string;
  cases?: boolean;
}

const BLOCKING_ALERTS = new Set(["ForkDetected", "RemovedFromGroup"]);

export class ConsoleModel {
  username = "";
  isModeration = false;
  groups: GroupSummary[] = [];
  states = new Map<string, GroupState>();
  messages = new Map<string, MessageWire[]>();
  cases: CaseSummary[] = [];
  alerts: AlertWire[] = [];
  activeGroup: string | null = null;
  lastEventId = 0;
  private voted = new Set<string>();
  private liveBallots = new Map<string, Set<string>>();

  setGroups(groups: GroupSummary[]): void {
    this.groups = groups;
    if (this.activeGroup === null && groups.length > 0) {
      this.activeGroup = groups[0].group_id;
    }
  }

  setGroupState(state: GroupState): void {
    this.states.set(state.group_id, state);
    // a resolved poll no longer needs its live tally
    const open = new Set(state.pending_polls.map((p) => p.proposal_id));
    for (const pid of [...this.liveBallots.keys()]) {
      if (!open.has(pid)) this.liveBallots.delete(pid);
    }
  }

  setMessages(groupId: string, msgs: MessageWire[]): void {
    this.messages.set(groupId, msgs);
  }

  setCases(cases: CaseSummary[]): void {
    this.cases = cases;
  }

  setAlerts(alerts: AlertWire[]): void {
    this.alerts = alerts;
  }

  // -- event application ----------------------------------------------------

  applyEvent(ev: ConsoleEvent): RefreshPlan {
    if (ev.id <= this.lastEventId) {
      return {}; // at-least-once delivery: drop duplicates by id
    }
    this.lastEventId = ev.id;
    switch (ev.kind) {
      case "group_created":
      case "group_joined":
        return { groups: true, state: ev.group_id };
      case "gov_changed":
      case "epoch_advanced":
      case "membership":
      case "poll_opened":
      case "poll_resolved":
      case "member_accepted":
      case "batch_committed":
        return { groups: true, state: ev.group_id };
      case "message":
      case "action":
      case "report_received":
        return { state: ev.group_id, messages: ev.group_id };
      case "ballot": {
        const pid = String(ev.data["proposal_id"] ?? "");
        const voter = String(ev.data["voter"] ?? "");
        if (pid) {
          const seen = this.liveBallots.get(pid) ?? new Set<string>();
          seen.add(voter);
          this.liveBallots.set(pid, seen);
          if (voter === this.username) this.voted.add(pid);
        }
        return {};
      }
      case "alert":
        return { state: ev.group_id, groups: true };
      case "rejected":
        return {};
      default:
        return { state: ev.group_id };
    }
  }

  // -- selectors the renderer uses -------------------------------------------

  state(groupId: string): GroupState | undefined {
    return this.states.get(groupId);
  }

  banner(groupId: string): string | null {
    const state = this.states.get(groupId);
    if (!state) return null;
    for (const alert of state.alerts) {
      if (alert.kind === "ForkDetected") {
        return "Fork detected: this group is frozen and can no longer be used.";
      }
      if (alert.kind === "InvalidInitialState") {
        return `Invalid initial state: ${alert.data["joiner"]} received doctored state from ${alert.data["inviter"]}.`;
      }
      if (alert.kind === "RemovedFromGroup") {
        return "You were removed from this group.";
      }
    }
    if (state.awaiting_state) return "Waiting for the group state announcement…";
    return null;
  }

  composerEnabled(groupId: string): boolean {
    const state = this.states.get(groupId);
    if (!state) return false;
    if (state.frozen || state.awaiting_state) return false;
    return !state.alerts.some((a) => BLOCKING_ALERTS.has(a.kind));
  }

  // merged votes from replicated state plus ballots observed live
  pollTally(poll: PendingPoll): { yes: number; no: number; total: number; live: number } {
    let yes = 0;
    let no = 0;
    for (const voter of Object.keys(poll.votes)) {
      if (poll.votes[voter] === "yes") yes += 1;
      else no += 1;
    }
    const live = this.liveBallots.get(poll.proposal_id)?.size ?? 0;
    return { yes, no, total: poll.roster_snapshot.length, live };
  }

  canVote(poll: PendingPoll): boolean {
    if (this.voted.has(poll.proposal_id)) return false;
    return poll.roster_snapshot.includes(this.username);
  }

  markVoted(proposalId: string): void {
    this.voted.add(proposalId);
  }

  canDecide(c: CaseSummary): boolean {
    return c.verified && c.decision === null;
  }
}
