// DOM rendering: straight innerHTML templates over the view-model.

import type { CaseSummary, ConsoleModel, GroupState, MessageWire, PendingPoll } from "./model.js";

export function escapeHtml(text: unknown): string {
  return String(text)
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}

export function renderGroupList(model: ConsoleModel): string {
  if (model.groups.length === 0) {
    return `<p class="empty">No groups yet. Create one to get started.</p>`;
  }
  return model.groups
    .map((g) => {
      const active = g.group_id === model.activeGroup ? "active" : "";
      const label = g.name && g.name !== g.group_id ? `${g.name} <small>(${g.group_id})</small>` : g.group_id;
      const badge = g.awaiting_state ? ` <span class="badge">joining…</span>` : "";
      return `<li class="${active}" data-group="${escapeHtml(g.group_id)}">${escapeHtml(label)}${badge}</li>`;
    })
    .join("");
}

export function renderDashboard(model: ConsoleModel, state: GroupState): string {
  const banner = model.banner(state.group_id);
  const bannerHtml = banner
    ? `<div class="banner danger" id="alert-banner">${escapeHtml(banner)}</div>`
    : "";
  const roster = state.roster
    .map((u) => {
      const roles = (state.user_roles[u] ?? []).join(", ");
      return `<tr><td>${escapeHtml(u)}</td><td>${escapeHtml(roles)}</td>
        <td><button class="kick" data-user="${escapeHtml(u)}">kick</button></td></tr>`;
    })
    .join("");
  return `${bannerHtml}
    <h2>${escapeHtml(state.name ?? state.group_id)}</h2>
    <p class="meta">epoch ${state.epoch} · topic: ${escapeHtml(state.topic || "—")}
      · state ${escapeHtml((state.gov_hash_hex ?? "").slice(0, 12))}</p>
    <table class="roster"><tr><th>member</th><th>roles</th><th></th></tr>${roster}</table>`;
}

export function renderMessages(model: ConsoleModel, groupId: string, msgs: MessageWire[]): string {
  const visible = msgs.filter((m) => m.action.action_type === "SendText");
  if (visible.length === 0) return `<p class="empty">No messages.</p>`;
  return visible
    .map((m) => {
      const id = m.action.header.action_id;
      if (m.hidden) {
        return `<div class="msg hidden" data-msg="${escapeHtml(id)}">
          <b>${escapeHtml(m.action.header.sender)}</b>: <i>hidden by the group filter or a moderator</i></div>`;
      }
      return `<div class="msg" data-msg="${escapeHtml(id)}">
        <b>${escapeHtml(m.action.header.sender)}</b>: ${escapeHtml(m.action.payload["text"])}
        <span class="msg-actions">
          <button class="report" data-msg="${escapeHtml(id)}">report</button>
          <button class="escalate" data-msg="${escapeHtml(id)}">escalate</button>
        </span></div>`;
    })
    .join("");
}

export function renderPolls(model: ConsoleModel, state: GroupState): string {
  if (state.pending_polls.length === 0) return `<p class="empty">No open polls.</p>`;
  return state.pending_polls
    .map((poll: PendingPoll) => {
      const tally = model.pollTally(poll);
      const target = `${poll.action.action_type} ${escapeHtml(JSON.stringify(poll.action.payload))}`;
      const voteButtons = model.canVote(poll)
        ? `<button class="vote-yes" data-poll="${escapeHtml(poll.proposal_id)}">yes</button>
           <button class="vote-no" data-poll="${escapeHtml(poll.proposal_id)}">no</button>`
        : `<span class="badge">vote recorded or read-only</span>`;
      return `<div class="poll" data-poll="${escapeHtml(poll.proposal_id)}">
        <div><b>${escapeHtml(poll.proposer)}</b> proposes ${target}</div>
        <div class="tally">confirmed: ${tally.yes} yes / ${tally.no} no of ${tally.total}
          · ballots seen live: ${tally.live}</div>
        ${voteButtons}</div>`;
    })
    .join("");
}

export function renderDocket(model: ConsoleModel, cases: CaseSummary[]): string {
  if (cases.length === 0) return `<p class="empty">The docket is empty.</p>`;
  return cases
    .map((c) => {
      const badge = c.verified
        ? `<span class="badge ok">verified</span>`
        : `<span class="badge danger">verification failed</span>`;
      const decision = c.decision
        ? `<span class="badge">decided: ${escapeHtml(JSON.stringify(c.decision))}</span>`
        : model.canDecide(c)
          ? `<button class="ban" data-case="${escapeHtml(c.case_id)}">ban 7d</button>
             <button class="ban-forever" data-case="${escapeHtml(c.case_id)}">ban forever</button>
             <button class="revoke" data-case="${escapeHtml(c.case_id)}">revoke keys</button>`
          : `<span class="badge">no action possible</span>`;
      return `<div class="case" data-case="${escapeHtml(c.case_id)}">
        <div><b>${escapeHtml(c.reporter)}</b> reported <b>${escapeHtml(c.reported)}</b>
          — ${escapeHtml(c.reason || "no reason")}</div>
        <div>${badge} ${decision}</div></div>`;
    })
    .join("");
}
