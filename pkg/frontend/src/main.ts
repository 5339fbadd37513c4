// Console bootstrap: wires the API, model, event stream and DOM together.

import { ConsoleApi, EventStream } from "./api.js";
import { ConsoleModel, RefreshPlan } from "./model.js";
import { renderDashboard, renderDocket, renderGroupList, renderMessages, renderPolls } from "./render.js";

function $(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el;
}

function tokenFromPage(): string {
  const params = new URLSearchParams(window.location.search);
  return params.get("token") ?? "local-dev-token";
}

const api = new ConsoleApi(window.location.origin, tokenFromPage());
const model = new ConsoleModel();

async function refresh(plan: RefreshPlan): Promise<void> {
  if (plan.groups) model.setGroups(await api.groups());
  const gid = plan.state ?? plan.messages;
  if (plan.state) model.setGroupState(await api.groupState(plan.state));
  if (plan.messages) model.setMessages(plan.messages, await api.messages(plan.messages));
  if (plan.cases && model.isModeration) model.setCases(await api.cases());
  if (plan.groups || gid === model.activeGroup || plan.cases) render();
}

async function refreshActive(): Promise<void> {
  const gid = model.activeGroup;
  const plan: RefreshPlan = { groups: true, cases: model.isModeration };
  if (gid) {
    plan.state = gid;
    plan.messages = gid;
  }
  await refresh(plan);
}

function render(): void {
  $("group-list").innerHTML = renderGroupList(model);
  const gid = model.activeGroup;
  const state = gid ? model.state(gid) : undefined;
  if (gid && state) {
    $("dashboard").innerHTML = renderDashboard(model, state);
    $("messages").innerHTML = renderMessages(model, gid, model.messages.get(gid) ?? []);
    $("polls").innerHTML = renderPolls(model, state);
    const composer = $("composer-input") as HTMLInputElement;
    const enabled = model.composerEnabled(gid);
    composer.disabled = !enabled;
    ($("composer-send") as HTMLButtonElement).disabled = !enabled;
  } else {
    $("dashboard").innerHTML = `<p class="empty">Select or create a group.</p>`;
    $("messages").innerHTML = "";
    $("polls").innerHTML = "";
  }
  $("docket-panel").style.display = model.isModeration ? "block" : "none";
  if (model.isModeration) $("docket").innerHTML = renderDocket(model, model.cases);
  $("whoami").textContent = `${model.username}${model.isModeration ? " (platform moderation)" : ""}`;
}

async function performAction(actionType: string, payload: Record<string, unknown>): Promise<void> {
  const gid = model.activeGroup;
  if (!gid) return;
  try {
    const verdict = await api.action(gid, actionType, payload);
    showStatus(`${actionType}: ${verdict.verdict}${verdict.reason ? ` (${verdict.reason})` : ""}`);
  } catch (err: unknown) {
    const detail = (err as { detail?: { verdict?: string; reason?: string; msg?: string } }).detail;
    showStatus(`${actionType} failed: ${detail?.reason ?? detail?.msg ?? "not permitted"}`, true);
  }
  await api.sync();
  await refreshActive();
}

function showStatus(text: string, isError = false): void {
  const el = $("statusline");
  el.textContent = text;
  el.className = isError ? "status error" : "status";
}

function wireHandlers(): void {
  $("group-list").addEventListener("click", async (ev) => {
    const target = (ev.target as HTMLElement).closest("[data-group]") as HTMLElement | null;
    if (!target) return;
    model.activeGroup = target.dataset["group"] ?? null;
    await refreshActive();
  });
  $("create-group").addEventListener("click", async () => {
    const gid = prompt("group id?");
    if (!gid) return;
    await api.createGroup(gid);
    model.activeGroup = gid;
    await refreshActive();
  });
  $("invite").addEventListener("click", async () => {
    const user = prompt("invite which username?");
    if (user) await performAction("InviteUser", { username: user });
  });
  $("rename").addEventListener("click", async () => {
    const name = prompt("new group name?");
    if (name) await performAction("ChangeName", { name });
  });
  $("start-poll").addEventListener("click", async () => {
    const name = prompt("propose a new group name (decided by majority vote)?");
    if (name) {
      await performAction("PollStart", { action_type: "ChangeName", payload: { name } });
    }
  });
  $("composer-send").addEventListener("click", async () => {
    const input = $("composer-input") as HTMLInputElement;
    if (!input.value) return;
    await performAction("SendText", { text: input.value });
    input.value = "";
  });
  $("sync-now").addEventListener("click", async () => {
    await api.sync();
    await refreshActive();
  });

  // delegated handlers for per-item buttons
  document.body.addEventListener("click", async (ev) => {
    const el = ev.target as HTMLElement;
    const gid = model.activeGroup;
    if (el.matches("button.vote-yes, button.vote-no")) {
      const pid = el.dataset["poll"]!;
      const choice = el.classList.contains("vote-yes") ? "yes" : "no";
      model.markVoted(pid); // disable immediately; server confirms via events
      await performAction("PollVote", { proposal_id: pid, choice });
    } else if (el.matches("button.kick")) {
      await performAction("KickUser", { username: el.dataset["user"]! });
    } else if (el.matches("button.report")) {
      const reason = prompt("reason for the report?") ?? "";
      await performAction("Report", { message_ids: [el.dataset["msg"]!], reason });
    } else if (el.matches("button.escalate")) {
      const reason = prompt("reason for escalating to the platform?") ?? "";
      await performAction("Escalate", { message_ids: [el.dataset["msg"]!], reason });
    } else if (el.matches("button.ban, button.ban-forever, button.revoke") && gid !== undefined) {
      const caseId = el.dataset["case"]!;
      const decision = el.classList.contains("revoke")
        ? { kind: "revoke" }
        : { kind: "ban", days: el.classList.contains("ban-forever") ? null : 7 };
      try {
        await api.decide(caseId, decision);
        showStatus(`decision recorded for case ${caseId}`);
      } catch {
        showStatus(`case ${caseId}: decision rejected (unverified?)`, true);
      }
      model.setCases(await api.cases());
      render();
    }
  });
}

async function boot(): Promise<void> {
  const who = await api.whoami();
  model.username = who.username;
  model.isModeration = who.moderation;
  await api.sync();
  await refreshActive();
  wireHandlers();

  const stream = new EventStream(
    (since) => api.eventsUrl(since),
    (url) => new WebSocket(url) as unknown as import("./api.js").SocketLike,
    (event) => {
      const plan = model.applyEvent(event);
      void refresh(plan);
    },
  );
  stream.start();
  showStatus("connected");
}

boot().catch((err) => {
  showStatus(`daemon unreachable: ${err}`, true);
});
