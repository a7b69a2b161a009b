// Shapes mirrored from the endpoint and fleet HTTP APIs. The console never
// derives these values itself; everything below arrives over the wire.

export interface TraceEvent {
  event_id: string;
  session_id: string;
  seq: number;
  timestamp: number;
  kind: string;
  payload: Record<string, unknown>;
}

export interface EventsPage {
  session_id: string;
  events: TraceEvent[];
  last_seq: number;
  phase: string;
  ended: boolean;
}

export interface SessionSummary {
  session_id: string;
  phase: string;
  summary: string;
}

export interface SessionRef {
  session_id: string;
  phase: string;
  ended: boolean;
}

export interface FleetMetrics {
  endpoints_reporting: number;
  sessions_total: number;
  resolved: number;
  no_issue: number;
  escalated: number;
  tool_success_rate: number | null;
  median_cycles: number | null;
}

export interface Ticket {
  ticket_id: string;
  session_id: string;
  endpoint_id: string;
  package: Record<string, unknown>;
  status: "open" | "acknowledged" | "closed";
}
