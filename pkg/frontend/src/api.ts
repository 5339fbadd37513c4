// Thin client for the daemon control API plus the /events push stream.
// Fetch and WebSocket implementations are injectable so the logic is
// testable without a browser.

import type { CaseSummary, ConsoleEvent, GroupState, GroupSummary, MessageWire } from "./model.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface SocketLike {
  onmessage: ((ev: { data: string }) => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

export class ApiError extends Error {
  constructor(public status: number, public detail: unknown) {
    super(`control api error ${status}`);
  }
}

export class ConsoleApi {
  constructor(
    private baseUrl: string,
    private token: string,
    private fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const resp = await this.fetchImpl(`${this.baseUrl}${path}`, {
      method,
      headers: {
        Authorization: `Bearer ${this.token}`,
        "Content-Type": "application/json",
      },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!resp.ok) {
      let detail: unknown = null;
      try {
        detail = await resp.json();
      } catch {
        detail = null;
      }
      throw new ApiError(resp.status, detail);
    }
    return (await resp.json()) as T;
  }

  whoami(): Promise<{ username: string; moderation: boolean }> {
    return this.request("GET", "/whoami");
  }

  groups(): Promise<GroupSummary[]> {
    return this.request("GET", "/groups");
  }

  createGroup(groupId: string): Promise<unknown> {
    return this.request("POST", "/groups", { group_id: groupId });
  }

  groupState(groupId: string): Promise<GroupState> {
    return this.request("GET", `/groups/${encodeURIComponent(groupId)}/state`);
  }

  messages(groupId: string): Promise<MessageWire[]> {
    return this.request("GET", `/groups/${encodeURIComponent(groupId)}/messages`);
  }

  action(groupId: string, actionType: string, payload: Record<string, unknown>): Promise<{ verdict: string; reason?: string; proposal_id?: string }> {
    return this.request("POST", `/groups/${encodeURIComponent(groupId)}/actions`, {
      action_type: actionType,
      payload,
    });
  }

  sync(): Promise<{ events: number }> {
    return this.request("POST", "/sync");
  }

  alerts(): Promise<unknown[]> {
    return this.request("GET", "/alerts");
  }

  cases(): Promise<CaseSummary[]> {
    return this.request("GET", "/ms/cases");
  }

  decide(caseId: string, decision: Record<string, unknown>): Promise<CaseSummary> {
    return this.request("POST", `/ms/cases/${encodeURIComponent(caseId)}/decision`, decision);
  }

  eventsUrl(since: number): string {
    const ws = this.baseUrl.replace(/^http/, "ws");
    return `${ws}/events?token=${encodeURIComponent(this.token)}&since=${since}`;
  }
}

// Live updates come exclusively from this stream (no polling). Reconnects
// resume from the last seen event id; duplicate delivery is handled by the
// model's id-based dedup.
export class EventStream {
  private socket: SocketLike | null = null;
  private stopped = false;
  lastId = 0;
  reconnects = 0;

  constructor(
    private urlFor: (since: number) => string,
    private socketFactory: SocketFactory,
    private onEvent: (ev: ConsoleEvent) => void,
    private reconnectDelayMs = 1000,
    private schedule: (fn: () => void, ms: number) => void = (fn, ms) => setTimeout(fn, ms),
  ) {}

  start(): void {
    this.stopped = false;
    this.connect();
  }

  stop(): void {
    this.stopped = true;
    this.socket?.close();
    this.socket = null;
  }

  private connect(): void {
    const socket = this.socketFactory(this.urlFor(this.lastId));
    this.socket = socket;
    socket.onmessage = (msg) => {
      const event = JSON.parse(msg.data) as ConsoleEvent;
      if (event.id > this.lastId) this.lastId = event.id;
      this.onEvent(event);
    };
    const retry = () => {
      if (this.stopped) return;
      this.reconnects += 1;
      this.schedule(() => this.connect(), this.reconnectDelayMs);
    };
    socket.onclose = retry;
    socket.onerror = () => socket.close();
  }
}
