// DOM builders for the live session timeline. Everything user-visible is set
// through textContent: event payloads are rendered verbatim, never parsed,
// never reformatted, and never interpreted as markup.

import type { TraceEvent } from "./types.js";

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

function str(value: unknown): string {
  return typeof value === "string" ? value : String(value ?? "");
}

/** One-line description for ordinary (non-consent) events. */
export function describeEvent(event: TraceEvent): string {
  const p = event.payload;
  switch (event.kind) {
    case "session_started":
      return `Issue reported: ${str(p.issue_text)}`;
    case "cycle":
      if (p.decision === "retrieve") {
        const hits = Array.isArray(p.hits) ? p.hits.length : 0;
        return `Retrieved ${hits} knowledge item(s)`;
      }
      return `Reasoning cycle ${str(p.number)}: ${str(p.decision)}`;
    case "tool_invoked":
      return `Diagnostic ${str(p.tool)} ${p.success ? "[ok]" : "[failed]"}`;
    case "plan_proposed": {
      const steps = Array.isArray(p.steps) ? p.steps.length : 0;
      const verdict = p.accepted ? "accepted" : "rejected by policy";
      return `Remediation plan with ${steps} step(s) [${verdict}]`;
    }
    case "policy_decision":
      return `Policy ${str(p.tier)}: ${str(p.command)}`;
    case "consent_resolved":
      return `Consent ${str(p.status)}`;
    case "step_executed":
      return `${p.success ? "Executed" : "Failed"}: ${str(p.command)}`;
    case "step_verified":
      return `Verification ${p.passed ? "passed" : "failed"} for step ${str(p.step_index)}`;
    case "rollback":
      return `Rollback ${str(p.status)}: ${str(p.command)}`;
    case "escalated":
      return `Escalated with ${Array.isArray(p.recommendations) ? p.recommendations.length : 0} recommendation(s)`;
    case "session_ended":
      return `Session ended: ${str(p.phase)}`;
    default:
      return event.kind;
  }
}

const KIND_CLASSES: Record<string, string> = {
  session_started: "chip-start",
  consent_requested: "chip-consent",
  consent_resolved: "chip-consent",
  step_executed: "chip-step",
  step_verified: "chip-verify",
  rollback: "chip-bad",
  escalated: "chip-bad",
  session_ended: "chip-end",
};

export function renderEventRow(event: TraceEvent): HTMLElement {
  const row = el("li", "event-row");
  row.dataset.kind = event.kind;
  row.dataset.seq = String(event.seq);
  const chip = el("span", `kind-chip ${KIND_CLASSES[event.kind] ?? "chip-info"}`, event.kind);
  const text = el("span", "event-text", describeEvent(event));
  if (event.kind === "step_executed" && !event.payload.success) {
    text.classList.add("event-failed");
  }
  row.append(chip, text);
  return row;
}

export type ConsentDecision = (requestId: string, approved: boolean) => void;

/**
 * Card for a consent_requested event. Starts with a live approve/deny pair;
 * `resolve` swaps the controls for a status chip. The pair disables itself on
 * first click so a decision is sent at most once from this card.
 */
export class ConsentCard {
  readonly root: HTMLElement;
  readonly requestId: string;
  private controls: HTMLElement;
  private resolved = false;

  constructor(event: TraceEvent, onDecision: ConsentDecision) {
    const p = event.payload;
    this.requestId = str(p.request_id);
    this.root = el("li", "event-row consent-card");
    this.root.dataset.kind = event.kind;
    this.root.dataset.seq = String(event.seq);
    this.root.dataset.requestId = this.requestId;

    this.root.append(el("div", "consent-title", "Approval required"));
    const command = el("code", "consent-command");
    command.textContent = str(p.command);
    this.root.append(command);
    // the policy engine's explanation, shown exactly as received
    const explanation = el("p", "consent-explanation");
    explanation.textContent = str(p.explanation);
    this.root.append(explanation);

    this.controls = el("div", "consent-controls");
    const approve = el("button", "btn btn-approve", "Approve");
    const deny = el("button", "btn btn-deny", "Deny");
    const send = (approved: boolean) => {
      approve.disabled = true;
      deny.disabled = true;
      onDecision(this.requestId, approved);
    };
    approve.addEventListener("click", () => send(true));
    deny.addEventListener("click", () => send(false));
    this.controls.append(approve, deny);
    this.root.append(this.controls);
  }

  get pending(): boolean {
    return !this.resolved;
  }

  /** Replace the button pair with the final status from consent_resolved. */
  resolve(status: string): void {
    if (this.resolved) return;
    this.resolved = true;
    const chip = el("span", `consent-status status-${status}`, status);
    this.controls.replaceWith(chip);
  }
}
