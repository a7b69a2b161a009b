import { afterEach, describe, expect, it, vi } from "vitest";

import { EndpointClient } from "../src/api.js";
import { renderIntake } from "../src/app.js";

afterEach(() => {
  vi.unstubAllGlobals();
});

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

function type(input: HTMLTextAreaElement, text: string): void {
  input.value = text;
  input.dispatchEvent(new Event("input", { bubbles: true }));
}

describe("intake form", () => {
  it("disables submit until the issue text is non-empty", () => {
    vi.stubGlobal("fetch", vi.fn(async () => jsonResponse({ sessions: [] })));
    const view = renderIntake(new EndpointClient("http://x"), () => {});
    const input = view.querySelector(".intake-input") as HTMLTextAreaElement;
    const submit = view.querySelector("button") as HTMLButtonElement;

    expect(submit.disabled).toBe(true);
    type(input, "   ");
    expect(submit.disabled).toBe(true);
    type(input, "my headset mic is not working");
    expect(submit.disabled).toBe(false);
  });

  it("starts a session and navigates to its live view", async () => {
    const fetchStub = vi.fn(async (input: RequestInfo | URL, init?: RequestInit) => {
      if (init?.method === "POST") {
        expect(JSON.parse(String(init.body))).toEqual({
          issue_text: "my headset mic is not working",
        });
        return jsonResponse({ session_id: "s-abc" });
      }
      return jsonResponse({ sessions: [] });
    });
    vi.stubGlobal("fetch", fetchStub);

    const navigate = vi.fn();
    const view = renderIntake(new EndpointClient("http://x"), navigate);
    const input = view.querySelector(".intake-input") as HTMLTextAreaElement;
    type(input, "my headset mic is not working");
    (view.querySelector("form") as HTMLFormElement).dispatchEvent(
      new Event("submit", { bubbles: true, cancelable: true }),
    );
    await new Promise((r) => setTimeout(r, 0));
    expect(navigate).toHaveBeenCalledWith("#/session/s-abc");
  });

  it("keeps the form usable when the endpoint is down", async () => {
    vi.stubGlobal("fetch", vi.fn(async () => {
      throw new TypeError("fetch failed");
    }));
    const view = renderIntake(new EndpointClient("http://x"), () => {});
    const input = view.querySelector(".intake-input") as HTMLTextAreaElement;
    type(input, "printer offline");
    (view.querySelector("form") as HTMLFormElement).dispatchEvent(
      new Event("submit", { bubbles: true, cancelable: true }),
    );
    await new Promise((r) => setTimeout(r, 0));

    const banner = view.querySelector(".banner")!;
    expect(banner.classList.contains("banner-hidden")).toBe(false);
    expect(banner.textContent).toContain("try again");
    const submit = view.querySelector("button") as HTMLButtonElement;
    expect(submit.disabled).toBe(false);
  });
});
