// End-to-end: the console DOM driven against a real endpoint process (and a
// real fleet coordinator) started from the repository root. Exercises the
// scripted remediation scenario over actual HTTP.

import { type ChildProcess, spawn } from "node:child_process";
import { mkdtempSync } from "node:fs";
import { createServer } from "node:net";
import { tmpdir } from "node:os";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { EndpointClient, FleetClient } from "../src/api.js";
import { FleetView } from "../src/fleet.js";
import { SessionView } from "../src/session.js";

const repoRoot = join(dirname(fileURLToPath(import.meta.url)), "..", "..");

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = createServer();
    srv.listen(0, "127.0.0.1", () => {
      const address = srv.address();
      if (address && typeof address === "object") {
        const port = address.port;
        srv.close(() => resolve(port));
      } else {
        srv.close(() => reject(new Error("no port")));
      }
    });
  });
}

async function waitFor<T>(
  probe: () => T | Promise<T>,
  timeoutMs: number,
  what: string,
): Promise<NonNullable<Awaited<T>>> {
  const deadline = Date.now() + timeoutMs;
  let lastErr: unknown = null;
  while (Date.now() < deadline) {
    try {
      const value = await probe();
      if (value) return value as NonNullable<Awaited<T>>;
    } catch (err) {
      lastErr = err;
    }
    await new Promise((r) => setTimeout(r, 100));
  }
  throw new Error(`timed out waiting for ${what}${lastErr ? `: ${lastErr}` : ""}`);
}

let endpoint: ChildProcess;
let fleet: ChildProcess;
let endpointUrl: string;
let fleetUrl: string;
let client: EndpointClient;

beforeAll(async () => {
  const endpointPort = await freePort();
  const fleetPort = await freePort();
  endpointUrl = `http://127.0.0.1:${endpointPort}`;
  fleetUrl = `http://127.0.0.1:${fleetPort}`;

  fleet = spawn(
    "python3",
    [
      "-m", "vigil", "fleet-serve",
      "--data-dir", mkdtempSync(join(tmpdir(), "fleet-")),
      "--port", String(fleetPort),
      "--log-level", "warning",
    ],
    { cwd: repoRoot, stdio: "inherit" },
  );
  endpoint = spawn(
    "python3",
    [
      "-m", "vigil", "serve",
      "--scenario", "scenarios/success.json",
      "--data-dir", mkdtempSync(join(tmpdir(), "endpoint-")),
      "--port", String(endpointPort),
      "--fleet-url", fleetUrl,
      "--sync-interval", "0.5",
      "--log-level", "warning",
    ],
    { cwd: repoRoot, stdio: "inherit" },
  );

  client = new EndpointClient(endpointUrl);
  await waitFor(
    async () => (await fetch(`${endpointUrl}/v1/sessions`)).ok,
    20000,
    "endpoint to come up",
  );
  await waitFor(
    async () => (await fetch(`${fleetUrl}/v1/fleet/metrics`)).ok,
    20000,
    "fleet to come up",
  );
});

afterAll(async () => {
  for (const proc of [endpoint, fleet]) {
    if (!proc || proc.exitCode !== null) continue;
    proc.kill("SIGINT");
    await new Promise((resolve) => {
      proc.once("exit", resolve);
      setTimeout(resolve, 5000);
    });
  }
});

describe("console against a live endpoint", () => {
  it(
    "renders consents verbatim, approval drives the session to resolution",
    { timeout: 90000 },
    async () => {
      const { session_id } = await client.startSession(
        "laptop will not wake from sleep",
      );
      const view = new SessionView(client, session_id, { pollMs: 150 });
      document.body.replaceChildren(view.root);
      view.start();

      // first consent card appears from polling alone
      await waitFor(
        () => view.root.querySelector(".consent-card"),
        20000,
        "first consent card",
      );

      // ground truth straight from the API, independent of the view's fetches
      const page = await client.events(session_id, 0);
      const consent = page.events.find((e) => e.kind === "consent_requested")!;
      const card = view.root.querySelector(
        `[data-request-id="${consent.payload.request_id}"]`,
      )!;
      expect(card.querySelector(".consent-explanation")!.textContent).toBe(
        consent.payload.explanation,
      );
      expect(card.querySelector(".consent-command")!.textContent).toBe(
        consent.payload.command,
      );

      // approve every consent as it shows up until the final summary renders
      const summary = view.root.querySelector(".summary")!;
      await waitFor(
        () => {
          for (const btn of view.root.querySelectorAll<HTMLButtonElement>(".btn-approve")) {
            if (!btn.disabled) btn.click();
          }
          return !summary.classList.contains("summary-hidden");
        },
        60000,
        "final summary to render",
      );

      expect(view.ended).toBe(true);
      expect(view.root.querySelector(".phase-chip")!.textContent).toBe("resolved");
      expect(summary.textContent).toContain("Total shell commands executed: 11.");
      expect(summary.textContent).toContain("90.9%");

      // every consent card ended with a status chip, none left pending
      expect(view.pendingConsentIds()).toEqual([]);
      const statuses = [...view.root.querySelectorAll(".consent-status")].map(
        (n) => n.textContent,
      );
      expect(statuses.length).toBeGreaterThan(0);
      expect(new Set(statuses)).toEqual(new Set(["approved"]));
    },
  );

  it(
    "denial produces a re-plan or escalation in the timeline",
    { timeout: 90000 },
    async () => {
      const { session_id } = await client.startSession("same laptop, second opinion");
      const view = new SessionView(client, session_id, { pollMs: 150 });
      document.body.replaceChildren(view.root);
      view.start();

      const denyBtn = await waitFor(
        () => view.root.querySelector<HTMLButtonElement>(".btn-deny:not(:disabled)"),
        20000,
        "a deniable consent",
      );
      denyBtn.click();

      await waitFor(
        () => view.root.querySelector(".consent-status")?.textContent === "denied",
        20000,
        "denial to land in the timeline",
      );

      // the engine must react with a new plan or an escalation
      await waitFor(
        () => {
          const rows = [...view.root.querySelectorAll<HTMLElement>(".event-row")];
          const deniedAt = rows.findIndex((r) => r.dataset.kind === "consent_resolved");
          return rows
            .slice(deniedAt + 1)
            .some((r) => r.dataset.kind === "plan_proposed" || r.dataset.kind === "escalated");
        },
        30000,
        "re-plan or escalation after denial",
      );

      // an operator who keeps refusing must still reach a terminal phase
      // (scripted finish or escalation), never a hang
      await waitFor(
        () => {
          for (const btn of view.root.querySelectorAll<HTMLButtonElement>(".btn-deny")) {
            if (!btn.disabled) btn.click();
          }
          return view.ended;
        },
        60000,
        "denied session to end",
      );
      expect(["resolved", "no_issue", "escalated"]).toContain(
        view.root.querySelector(".phase-chip")!.textContent,
      );
      // nothing the user refused was ever executed
      const refused = new Set<string>();
      const executed: string[] = [];
      const all = await client.events(session_id, 0);
      for (const e of all.events) {
        if (e.kind === "consent_resolved" && e.payload.status === "denied") {
          refused.add(String(e.payload.request_id));
        }
        if (e.kind === "step_executed" && e.payload.consent_id) {
          executed.push(String(e.payload.consent_id));
        }
      }
      expect(executed.filter((id) => refused.has(id))).toEqual([]);
    },
  );

  it(
    "fleet dashboard totals match the metrics endpoint",
    { timeout: 60000 },
    async () => {
      // sync pushes on a 0.5 s cadence; wait until the fleet has sessions
      const fleetClient = new FleetClient(fleetUrl);
      const metrics = await waitFor(
        async () => {
          const m = await fleetClient.metrics();
          return m.sessions_total >= 2 ? m : null;
        },
        30000,
        "fleet to ingest both sessions",
      );

      const fleetView = new FleetView(fleetClient);
      document.body.replaceChildren(fleetView.root);
      await fleetView.refresh();

      const rendered = (field: string) =>
        fleetView.root.querySelector<HTMLElement>(`[data-field="${field}"]`)!.textContent;
      const current = await fleetClient.metrics();
      expect(Number(rendered("sessions_total"))).toBe(current.sessions_total);
      expect(Number(rendered("endpoints_reporting"))).toBe(current.endpoints_reporting);
      expect(Number(rendered("resolved"))).toBe(current.resolved);
      expect(Number(rendered("escalated"))).toBe(current.escalated);
      expect(metrics.sessions_total).toBeGreaterThanOrEqual(2);
    },
  );
});
