// Fleet dashboard: metrics snapshot plus the escalation queue. Numbers are
// rendered straight from the metrics endpoint; the console never aggregates
// trace data on its own.

import { ApiError, FleetClient } from "./api.js";
import type { FleetMetrics, Ticket } from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function fmtRate(value: number | null): string {
  return value === null ? "n/a" : `${(value * 100).toFixed(1)}%`;
}

function fmtCount(value: number | null): string {
  return value === null ? "n/a" : String(value);
}

export function renderMetrics(metrics: FleetMetrics): HTMLElement {
  const grid = el("div", "stats");
  const cards: Array<[string, string, string]> = [
    ["endpoints", fmtCount(metrics.endpoints_reporting), "endpoints_reporting"],
    ["sessions", fmtCount(metrics.sessions_total), "sessions_total"],
    ["resolved", fmtCount(metrics.resolved), "resolved"],
    ["no issue", fmtCount(metrics.no_issue), "no_issue"],
    ["escalated", fmtCount(metrics.escalated), "escalated"],
    ["tool success", fmtRate(metrics.tool_success_rate), "tool_success_rate"],
    ["median cycles", fmtCount(metrics.median_cycles), "median_cycles"],
  ];
  for (const [label, value, field] of cards) {
    const card = el("div", "stat-card");
    card.append(el("div", "stat-label", label));
    const val = el("div", "stat-value", value);
    val.dataset.field = field;
    card.append(val);
    grid.append(card);
  }
  return grid;
}

export class TicketRow {
  readonly root: HTMLElement;
  private chip: HTMLElement;
  private ackBtn: HTMLButtonElement;
  private closeBtn: HTMLButtonElement;

  constructor(
    ticket: Ticket,
    private client: FleetClient,
    private onError: (err: unknown) => void,
  ) {
    this.root = el("li", "ticket-row");
    this.root.dataset.ticketId = ticket.ticket_id;

    const main = el("div", "ticket-main");
    main.append(el("div", "ticket-id", ticket.ticket_id));
    main.append(
      el("div", "ticket-meta", `${ticket.endpoint_id} / ${ticket.session_id}`),
    );
    const recommendations = ticket.package.recommendations;
    if (Array.isArray(recommendations) && recommendations.length) {
      main.append(el("div", "ticket-reco", String(recommendations[0])));
    }

    this.chip = el("span", `ticket-status status-${ticket.status}`, ticket.status);
    this.ackBtn = el("button", "btn", "Ack");
    this.closeBtn = el("button", "btn", "Close");
    this.ackBtn.addEventListener("click", () => void this.transition("ack"));
    this.closeBtn.addEventListener("click", () => void this.transition("close"));
    this.syncButtons(ticket.status);

    const side = el("div", "ticket-side");
    side.append(this.chip, this.ackBtn, this.closeBtn);
    this.root.append(main, side);
  }

  private async transition(action: "ack" | "close"): Promise<void> {
    const ticketId = this.root.dataset.ticketId ?? "";
    this.ackBtn.disabled = true;
    this.closeBtn.disabled = true;
    try {
      const updated =
        action === "ack"
          ? await this.client.acknowledge(ticketId)
          : await this.client.close(ticketId);
      this.setStatus(updated.status);
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        // raced another operator; refreshing the page shows the real state
        this.syncButtons(this.chip.textContent ?? "");
        return;
      }
      this.onError(err);
    }
  }

  private setStatus(status: string): void {
    this.chip.textContent = status;
    this.chip.className = `ticket-status status-${status}`;
    this.syncButtons(status);
  }

  private syncButtons(status: string): void {
    this.ackBtn.disabled = status !== "open";
    this.closeBtn.disabled = status === "closed";
  }
}

export class FleetView {
  readonly root: HTMLElement;
  private banner: HTMLElement;
  private metricsHost: HTMLElement;
  private ticketsHost: HTMLElement;

  constructor(private client: FleetClient) {
    this.root = el("section", "fleet-view");
    this.root.append(el("h2", undefined, "Fleet"));
    this.banner = el("div", "banner banner-hidden");
    this.metricsHost = el("div");
    this.ticketsHost = el("div");
    this.root.append(this.banner, this.metricsHost, this.ticketsHost);
  }

  async refresh(): Promise<void> {
    try {
      const [metrics, tickets] = await Promise.all([
        this.client.metrics(),
        this.client.tickets(),
      ]);
      this.banner.classList.add("banner-hidden");
      this.renderAll(metrics, tickets.tickets);
    } catch (err) {
      const reason = err instanceof Error ? err.message : String(err);
      this.banner.textContent = `Fleet service unreachable (${reason})`;
      this.banner.classList.remove("banner-hidden");
    }
  }

  private renderAll(metrics: FleetMetrics, tickets: Ticket[]): void {
    this.metricsHost.replaceChildren(renderMetrics(metrics));

    const section = el("div", "tickets-section");
    section.append(el("h3", undefined, "Escalations"));
    if (!tickets.length) {
      section.append(el("p", "zero-state", "No escalations. All quiet."));
    } else {
      const list = el("ul", "ticket-list");
      for (const ticket of tickets) {
        list.append(new TicketRow(ticket, this.client, (err) => this.onError(err)).root);
      }
      section.append(list);
    }
    this.ticketsHost.replaceChildren(section);
  }

  private onError(err: unknown): void {
    const reason = err instanceof Error ? err.message : String(err);
    this.banner.textContent = `Fleet action failed (${reason})`;
    this.banner.classList.remove("banner-hidden");
  }
}
