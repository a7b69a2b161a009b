// Thin fetch wrappers over the two documented HTTP APIs. No retries here;
// callers decide what a failure means for their view.

import type { EventsPage, FleetMetrics, SessionRef, SessionSummary, Ticket } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const response = await fetch(url, init);
  if (!response.ok) {
    let detail = response.statusText;
    try {
      const body = await response.json();
      if (body && typeof body.detail === "string") detail = body.detail;
    } catch {
      // non-JSON error body; statusText is all we have
    }
    throw new ApiError(response.status, detail);
  }
  return (await response.json()) as T;
}

function postJson<T>(url: string, body: unknown): Promise<T> {
  return request<T>(url, {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify(body),
  });
}

export class EndpointClient {
  constructor(readonly base: string = "") {}

  startSession(issueText: string): Promise<{ session_id: string }> {
    return postJson(`${this.base}/v1/sessions`, { issue_text: issueText });
  }

  listSessions(): Promise<{ sessions: SessionRef[] }> {
    return request(`${this.base}/v1/sessions`);
  }

  events(sessionId: string, after: number): Promise<EventsPage> {
    const id = encodeURIComponent(sessionId);
    return request(`${this.base}/v1/sessions/${id}/events?after=${after}`);
  }

  resolveConsent(requestId: string, approved: boolean): Promise<{ status: string }> {
    const id = encodeURIComponent(requestId);
    return postJson(`${this.base}/v1/consents/${id}`, { approved });
  }

  summary(sessionId: string): Promise<SessionSummary> {
    const id = encodeURIComponent(sessionId);
    return request(`${this.base}/v1/sessions/${id}/summary`);
  }
}

export class FleetClient {
  constructor(readonly base: string) {}

  metrics(): Promise<FleetMetrics> {
    return request(`${this.base}/v1/fleet/metrics`);
  }

  tickets(status?: string): Promise<{ tickets: Ticket[] }> {
    const suffix = status ? `?status=${encodeURIComponent(status)}` : "";
    return request(`${this.base}/v1/escalations${suffix}`);
  }

  acknowledge(ticketId: string): Promise<Ticket> {
    return postJson(`${this.base}/v1/escalations/${encodeURIComponent(ticketId)}/ack`, {});
  }

  close(ticketId: string): Promise<Ticket> {
    return postJson(`${this.base}/v1/escalations/${encodeURIComponent(ticketId)}/close`, {});
  }
}
