import { describe, expect, it, vi } from "vitest";

import { ConsentCard, describeEvent, renderEventRow } from "../src/timeline.js";
import type { TraceEvent } from "../src/types.js";

function event(kind: string, payload: Record<string, unknown>, seq = 1): TraceEvent {
  return {
    event_id: "e".repeat(32),
    session_id: "s-test",
    seq,
    timestamp: 0,
    kind,
    payload,
  };
}

describe("describeEvent", () => {
  it("summarizes retrieval cycles by hit count", () => {
    const text = describeEvent(
      event("cycle", { number: 2, decision: "retrieve", query: "q", hits: [{}, {}] }),
    );
    expect(text).toBe("Retrieved 2 knowledge item(s)");
  });

  it("shows plan verdicts", () => {
    expect(
      describeEvent(event("plan_proposed", { steps: [{}, {}, {}], accepted: true })),
    ).toBe("Remediation plan with 3 step(s) [accepted]");
    expect(
      describeEvent(event("plan_proposed", { steps: [{}], accepted: false })),
    ).toBe("Remediation plan with 1 step(s) [rejected by policy]");
  });

  it("falls back to the kind for anything unknown", () => {
    expect(describeEvent(event("mystery_kind", {}))).toBe("mystery_kind");
  });
});

describe("renderEventRow", () => {
  it("tags rows with kind and seq for the timeline order", () => {
    const row = renderEventRow(event("step_executed", { command: "x", success: true }, 7));
    expect(row.dataset.kind).toBe("step_executed");
    expect(row.dataset.seq).toBe("7");
  });

  it("marks failed steps", () => {
    const row = renderEventRow(
      event("step_executed", { command: "x", success: false, error: "boom" }),
    );
    expect(row.querySelector(".event-failed")).not.toBeNull();
  });
});

describe("ConsentCard", () => {
  const payload = {
    request_id: "req-1",
    command: 'reg add "HKLM\\SYSTEM" /v X /d 0 /f',
    explanation: 'Disables fast startup. <b>not markup</b> & stays literal\n  with spacing.',
    step_index: 0,
    expires_at: 9999999999,
  };

  it("renders command and explanation exactly as received", () => {
    const card = new ConsentCard(event("consent_requested", payload), () => {});
    const explanation = card.root.querySelector(".consent-explanation")!;
    const command = card.root.querySelector(".consent-command")!;
    // byte-equal: no trimming, no HTML interpretation
    expect(explanation.textContent).toBe(payload.explanation);
    expect(command.textContent).toBe(payload.command);
    expect(explanation.innerHTML).toContain("&lt;b&gt;");
  });

  it("offers controls while pending and sends one decision", () => {
    const onDecision = vi.fn();
    const card = new ConsentCard(event("consent_requested", payload), onDecision);
    const buttons = card.root.querySelectorAll("button");
    expect(buttons).toHaveLength(2);
    expect(card.pending).toBe(true);

    (buttons[0] as HTMLButtonElement).click();
    expect(onDecision).toHaveBeenCalledWith("req-1", true);
    // pair disables on first click; a second click sends nothing
    (buttons[1] as HTMLButtonElement).click();
    expect(onDecision).toHaveBeenCalledTimes(1);
    // still pending until the consent_resolved event arrives
    expect(card.pending).toBe(true);
  });

  it("replaces controls with the resolution status", () => {
    const card = new ConsentCard(event("consent_requested", payload), () => {});
    card.resolve("expired");
    expect(card.pending).toBe(false);
    expect(card.root.querySelectorAll("button")).toHaveLength(0);
    expect(card.root.querySelector(".consent-status")!.textContent).toBe("expired");
  });
});
