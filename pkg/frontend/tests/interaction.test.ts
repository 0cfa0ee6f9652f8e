import { describe, expect, it } from "vitest";
import { ApiClient } from "../src/api.js";
import { InteractionController } from "../src/interaction.js";
import { UISessionState } from "../src/state.js";
import { ViewTransform } from "../src/transform.js";

function makeHooks() {
  const calls: string[] = [];
  return {
    calls,
    hooks: {
      redraw: () => calls.push("redraw"),
      toast: (m: string) => calls.push(`toast:${m}`),
      setBanner: (m: string | null) => calls.push(`banner:${m}`),
    },
  };
}

/** fetch stub that records requests and replies like the service. */
function makeFetch(log: { method: string; path: string; body?: unknown }[],
                   fail: "none" | "http" | "network" = "none") {
  return async (input: string, init?: RequestInit): Promise<Response> => {
    const path = input.replace(/^https?:\/\/[^/]+/, "");
    const method = init?.method ?? "GET";
    const body = init?.body ? JSON.parse(init.body as string) : undefined;
    log.push({ method, path, body });
    if (fail === "network") throw new TypeError("fetch failed");
    if (fail === "http") {
      return new Response(JSON.stringify({ error: "invariant violation" }), { status: 400 });
    }
    if (path.endsWith("/deform")) {
      return new Response(JSON.stringify({
        instance: 0,
        polygons: [[[1, 1], [9, 1], [9, 9], [1, 9]]],
        chamfer_to_previous: [0.5],
      }), { status: 200 });
    }
    if (path.endsWith("/vertices")) {
      return new Response(JSON.stringify({
        instance: 0,
        polygons: [[[0, 0], [20, 0], [20, 20], [0, 20]]],
      }), { status: 200 });
    }
    if (path.endsWith("/instances")) {
      return new Response(JSON.stringify({
        instance: 1,
        polygons: [[[2, 2], [8, 2], [8, 8], [2, 8]]],
      }), { status: 201 });
    }
    return new Response("{}", { status: 200 });
  };
}

function setup(fail: "none" | "http" | "network" = "none") {
  const log: { method: string; path: string; body?: unknown }[] = [];
  const api = new ApiClient("http://service", makeFetch(log, fail));
  const state = new UISessionState();
  state.loadSession({
    id: "f00d",
    instances: [{ label: "x", score: 1, polygons: [[[0, 0], [20, 0], [20, 20], [0, 20]]] }],
  });
  const { hooks } = makeHooks();
  const controller = new InteractionController(state, api, new ViewTransform(2, 0, 0), hooks);
  return { log, state, controller };
}

describe("InteractionController", () => {
  it("drag updates the handle every frame and PATCHes on drag end", async () => {
    const { log, state, controller } = setup();
    // vertex (20, 20) in image coords sits at (40, 40) on screen (zoom 2)
    controller.onPointerDown({ x: 40, y: 40 });
    expect(state.selection).toEqual({ instance: 0, polygon: 0, vertex: 2 });
    for (let s = 1; s <= 10; s++) {
      controller.onPointerMove({ x: 40 + s, y: 40 });
      const view = state.viewPolygons(0)[0][2];
      expect(view[0]).toBeCloseTo(20 + s / 2, 9); // follows the cursor each frame
    }
    await controller.onPointerUp();
    expect(log).toHaveLength(1);
    expect(log[0].method).toBe("PATCH");
    expect(log[0].path).toBe("/sessions/f00d/instances/0/vertices");
    const ops = (log[0].body as { ops: { op: string }[] }).ops;
    expect(ops).toHaveLength(1); // drag coalesced into one move
    expect(state.hasPending(0)).toBe(false);
  });

  it("deform flushes pending edits first (PATCH strictly before POST)", async () => {
    const { log, state, controller } = setup();
    state.addLocalEdit(0, { op: "move", polygon: 0, vertex: 0, x: 3, y: 3 });
    const ok = await controller.deformInstance(0);
    expect(ok).toBe(true);
    expect(log.map((r) => r.method)).toEqual(["PATCH", "POST"]);
    expect(log[1].path).toBe("/sessions/f00d/instances/0/deform");
    expect(state.acknowledged[0].polygons[0][0]).toEqual([1, 1]);
  });

  it("server rejection rolls back and toasts", async () => {
    const { log, state, controller } = setup("http");
    state.addLocalEdit(0, { op: "delete", polygon: 0, vertex: 0 });
    const ok = await controller.flushEdits(0);
    expect(ok).toBe(false);
    expect(state.hasPending(0)).toBe(false); // rolled back to acknowledged
    expect(state.viewPolygons(0)[0]).toHaveLength(4);
    expect(log).toHaveLength(1);
  });

  it("network failure keeps edits queued and shows the banner", async () => {
    const { state, controller } = setup("network");
    state.addLocalEdit(0, { op: "move", polygon: 0, vertex: 1, x: 5, y: 5 });
    const ok = await controller.flushEdits(0);
    expect(ok).toBe(false);
    expect(state.offline).toBe(true);
    expect(state.hasPending(0)).toBe(true); // nothing lost
    expect(state.viewPolygons(0)[0][1]).toEqual([5, 5]);
  });

  it("at most one deform per instance is in flight", async () => {
    const { log, controller } = setup();
    const [a, b] = await Promise.all([
      controller.deformInstance(0),
      controller.deformInstance(0),
    ]);
    expect([a, b].filter(Boolean)).toHaveLength(1);
    expect(log.filter((r) => r.path.endsWith("/deform"))).toHaveLength(1);
  });

  it("box draw creates an instance through the API", async () => {
    const { log, state, controller } = setup();
    controller.boxMode = true;
    controller.onPointerDown({ x: 10, y: 10 });
    controller.onPointerMove({ x: 50, y: 30 });
    await controller.onPointerUp();
    const req = log.find((r) => r.path.endsWith("/instances"));
    expect(req).toBeDefined();
    expect((req!.body as { box: number[] }).box).toEqual([5, 5, 25, 15]);
    expect(state.instanceCount()).toBe(2);
  });

  it("edge click inserts a vertex and starts dragging it", async () => {
    const { log, state, controller } = setup();
    // midpoint of the top edge (10, 0) image = (20, 0) screen
    controller.onPointerDown({ x: 20, y: 0 });
    expect(state.viewPolygons(0)[0]).toHaveLength(5);
    controller.onPointerMove({ x: 20, y: 6 });
    await controller.onPointerUp();
    const ops = (log[0].body as { ops: { op: string }[] }).ops;
    expect(ops.map((o) => o.op)).toEqual(["insert", "move"]);
  });
});
