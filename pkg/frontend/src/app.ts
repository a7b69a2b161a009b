// App shell: hash routing between the intake form, live session views, and
// the fleet dashboard. Served as static assets by the endpoint itself, so
// endpoint calls are same-origin; the fleet URL is configurable because the
// coordinator usually lives on another host.

import { EndpointClient, FleetClient } from "./api.js";
import { FleetView } from "./fleet.js";
import { SessionView } from "./session.js";

const FLEET_URL_KEY = "vigil.fleetUrl";
const DEFAULT_FLEET_URL = "http://127.0.0.1:8430";

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

export function renderIntake(client: EndpointClient, navigate: (hash: string) => void): HTMLElement {
  const view = el("section", "intake-view");
  view.append(el("h2", undefined, "Report an issue"));

  const form = el("form", "intake-form");
  const input = el("textarea", "intake-input") as HTMLTextAreaElement;
  input.placeholder = "Describe what's wrong, e.g. \"my headset mic is not working\"";
  input.rows = 3;
  const submit = el("button", "btn btn-primary", "Start diagnosis") as HTMLButtonElement;
  submit.type = "submit";
  submit.disabled = true;
  const errorLine = el("div", "banner banner-hidden");

  input.addEventListener("input", () => {
    submit.disabled = input.value.trim() === "";
  });
  form.addEventListener("submit", (e) => {
    e.preventDefault();
    const text = input.value.trim();
    if (!text) return;
    submit.disabled = true;
    client
      .startSession(text)
      .then(({ session_id }) => navigate(`#/session/${session_id}`))
      .catch((err) => {
        const reason = err instanceof Error ? err.message : String(err);
        errorLine.textContent = `Could not start session (${reason}); try again`;
        errorLine.classList.remove("banner-hidden");
        submit.disabled = input.value.trim() === "";
      });
  });

  form.append(input, submit);
  view.append(form, errorLine);

  const recent = el("div", "recent-sessions");
  client
    .listSessions()
    .then(({ sessions }) => {
      if (!sessions.length) return;
      recent.append(el("h3", undefined, "Recent sessions"));
      const list = el("ul");
      for (const s of sessions) {
        const item = el("li");
        const link = el("a", undefined, `${s.session_id} (${s.phase})`) as HTMLAnchorElement;
        link.href = `#/session/${s.session_id}`;
        item.append(link);
        list.append(item);
      }
      recent.append(list);
    })
    .catch(() => {
      // the intake form still works if the index call fails
    });
  view.append(recent);
  return view;
}

function renderFleetSettings(onChange: (url: string) => void): HTMLElement {
  const bar = el("div", "fleet-settings");
  const label = el("label", undefined, "Fleet URL ");
  const input = el("input") as HTMLInputElement;
  input.value = localStorage.getItem(FLEET_URL_KEY) ?? DEFAULT_FLEET_URL;
  const apply = el("button", "btn", "Connect");
  apply.addEventListener("click", () => {
    localStorage.setItem(FLEET_URL_KEY, input.value.trim());
    onChange(input.value.trim());
  });
  label.append(input);
  bar.append(label, apply);
  return bar;
}

export class App {
  private main: HTMLElement;
  private active: SessionView | null = null;

  constructor(
    root: HTMLElement,
    private client: EndpointClient = new EndpointClient(""),
    private pollMs = 1000,
  ) {
    const nav = el("nav", "topnav");
    const brand = el("span", "brand", "vigil console");
    const report = el("a", undefined, "Report issue") as HTMLAnchorElement;
    report.href = "#/";
    const fleet = el("a", undefined, "Fleet") as HTMLAnchorElement;
    fleet.href = "#/fleet";
    nav.append(brand, report, fleet);

    this.main = el("main", "content");
    root.append(nav, this.main);

    window.addEventListener("hashchange", () => this.route());
    this.route();
  }

  navigate(hash: string): void {
    if (window.location.hash === hash) {
      this.route();
    } else {
      window.location.hash = hash;
    }
  }

  route(): void {
    // leaving a live view stops its polling loop
    this.active?.stop();
    this.active = null;

    const hash = window.location.hash || "#/";
    const sessionMatch = /^#\/session\/(.+)$/.exec(hash);
    if (sessionMatch) {
      const view = new SessionView(this.client, decodeURIComponent(sessionMatch[1]), {
        pollMs: this.pollMs,
      });
      this.active = view;
      this.main.replaceChildren(view.root);
      view.start();
      return;
    }
    if (hash === "#/fleet") {
      const host = el("div");
      const mount = (url: string) => {
        const view = new FleetView(new FleetClient(url));
        host.replaceChildren(renderFleetSettings(mount), view.root);
        void view.refresh();
      };
      mount(localStorage.getItem(FLEET_URL_KEY) ?? DEFAULT_FLEET_URL);
      this.main.replaceChildren(host);
      return;
    }
    this.main.replaceChildren(renderIntake(this.client, (h) => this.navigate(h)));
  }
}

// browser entry point; tests construct App against their own DOM instead
if (typeof document !== "undefined" && document.getElementById("app")) {
  new App(document.getElementById("app") as HTMLElement);
}
