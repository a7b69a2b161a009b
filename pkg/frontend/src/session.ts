// Live session view: cursor-polled event timeline plus consent handling.
//
// The view performs no policy evaluation and builds no commands. It renders
// what the endpoint emits, forwards approve/deny clicks, and otherwise stays
// out of the loop. One fetch in flight at a time; the cursor only moves
// forward, so a row is appended exactly once.

import { ApiError, EndpointClient } from "./api.js";
import { ConsentCard, renderEventRow } from "./timeline.js";
import type { TraceEvent } from "./types.js";

export interface SessionViewOptions {
  pollMs?: number;
}

export class SessionView {
  readonly root: HTMLElement;
  private timeline: HTMLOListElement;
  private banner: HTMLElement;
  private phaseChip: HTMLElement;
  private summaryBox: HTMLElement;
  private cards = new Map<string, ConsentCard>();
  private cursor = 0;
  private timer: ReturnType<typeof setInterval> | null = null;
  private inFlight = false;
  private done = false;
  private readonly pollMs: number;

  constructor(
    private client: EndpointClient,
    readonly sessionId: string,
    options: SessionViewOptions = {},
  ) {
    this.pollMs = options.pollMs ?? 1000;
    this.root = document.createElement("section");
    this.root.className = "session-view";

    const header = document.createElement("div");
    header.className = "session-header";
    const title = document.createElement("h2");
    title.textContent = `Session ${sessionId}`;
    this.phaseChip = document.createElement("span");
    this.phaseChip.className = "phase-chip";
    this.phaseChip.textContent = "starting";
    header.append(title, this.phaseChip);

    this.banner = document.createElement("div");
    this.banner.className = "banner banner-hidden";
    this.banner.setAttribute("role", "alert");

    this.timeline = document.createElement("ol");
    this.timeline.className = "timeline";

    this.summaryBox = document.createElement("pre");
    this.summaryBox.className = "summary summary-hidden";

    this.root.append(header, this.banner, this.timeline, this.summaryBox);
  }

  start(): void {
    if (this.timer !== null) return;
    void this.tick();
    this.timer = setInterval(() => void this.tick(), this.pollMs);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  get ended(): boolean {
    return this.done;
  }

  /** One poll: fetch events past the cursor, render, finish when ended. */
  async tick(): Promise<void> {
    if (this.inFlight || this.done) return;
    this.inFlight = true;
    try {
      const page = await this.client.events(this.sessionId, this.cursor);
      this.clearBanner();
      for (const event of page.events) this.append(event);
      this.cursor = page.last_seq;
      this.phaseChip.textContent = page.phase;
      if (page.ended) {
        this.done = true;
        this.stop();
        await this.showSummary();
      }
    } catch (err) {
      this.showBanner(err);
    } finally {
      this.inFlight = false;
    }
  }

  private append(event: TraceEvent): void {
    if (event.kind === "consent_requested") {
      const card = new ConsentCard(event, (requestId, approved) =>
        this.sendDecision(requestId, approved),
      );
      this.cards.set(card.requestId, card);
      this.timeline.append(card.root);
      return;
    }
    if (event.kind === "consent_resolved") {
      const requestId = String(event.payload.request_id ?? "");
      this.cards.get(requestId)?.resolve(String(event.payload.status ?? ""));
    }
    this.timeline.append(renderEventRow(event));
  }

  private sendDecision(requestId: string, approved: boolean): void {
    // fire and confirm: the consent_resolved event is the source of truth,
    // so a 409 (resolved or expired first) needs no handling of its own
    this.client.resolveConsent(requestId, approved).catch((err) => {
      if (err instanceof ApiError && err.status === 409) return;
      this.showBanner(err);
    });
  }

  private async showSummary(): Promise<void> {
    try {
      const summary = await this.client.summary(this.sessionId);
      this.phaseChip.textContent = summary.phase;
      this.summaryBox.textContent = summary.summary;
      this.summaryBox.classList.remove("summary-hidden");
    } catch (err) {
      this.showBanner(err);
    }
  }

  pendingConsentIds(): string[] {
    return [...this.cards.values()].filter((c) => c.pending).map((c) => c.requestId);
  }

  private showBanner(err: unknown): void {
    const reason = err instanceof Error ? err.message : String(err);
    this.banner.textContent = `Endpoint unreachable (${reason}); retrying`;
    this.banner.classList.remove("banner-hidden");
  }

  private clearBanner(): void {
    this.banner.classList.add("banner-hidden");
  }
}
