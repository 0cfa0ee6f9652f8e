import { ApiClient, ApiError } from "./api.js";
import { hitTestEdge, hitTestVertex, HoverInfo } from "./canvas.js";
import { UISessionState } from "./state.js";
import { ViewTransform } from "./transform.js";
import { EditOp, Point } from "./types.js";

export interface ControllerHooks {
  redraw(): void;
  toast(message: string): void;
  setBanner(message: string | null): void;
}

type DragState =
  | { kind: "vertex"; instance: number; polygon: number; vertex: number }
  | { kind: "box"; start: Point; current: Point }
  | { kind: "pan"; lastScreen: Point }
  | null;

/**
 * Event wiring between pointer/keyboard input, the local session state and
 * the service.  Ordering contract: any pending local edits are flushed with
 * PATCH before a deform request is sent, and at most one deform per
 * instance is in flight.
 */
export class InteractionController {
  state: UISessionState;
  api: ApiClient;
  view: ViewTransform;
  hooks: ControllerHooks;
  boxMode = false;
  hover: HoverInfo | null = null;
  private drag: DragState = null;
  private deformInFlight: Set<number> = new Set();

  constructor(state: UISessionState, api: ApiClient, view: ViewTransform,
              hooks: ControllerHooks) {
    this.state = state;
    this.api = api;
    this.view = view;
    this.hooks = hooks;
  }

  onPointerDown(screen: Point): void {
    if (this.boxMode) {
      const img = this.view.screenToImage(screen);
      this.drag = { kind: "box", start: img, current: img };
      return;
    }
    const vertexHit = hitTestVertex(this.state, this.view, screen);
    if (vertexHit !== null) {
      this.state.selection = vertexHit;
      this.drag = { kind: "vertex", ...vertexHit };
      this.hooks.redraw();
      return;
    }
    const edgeHit = hitTestEdge(this.state, this.view, screen);
    if (edgeHit !== null) {
      // click on an edge inserts a vertex right there
      this.state.selection = {
        instance: edgeHit.instance, polygon: edgeHit.polygon, vertex: edgeHit.edge + 1,
      };
      this.state.addLocalEdit(edgeHit.instance, {
        op: "insert", polygon: edgeHit.polygon, edge: edgeHit.edge,
        x: edgeHit.at.x, y: edgeHit.at.y,
      });
      this.drag = {
        kind: "vertex", instance: edgeHit.instance,
        polygon: edgeHit.polygon, vertex: edgeHit.edge + 1,
      };
      this.hooks.redraw();
      return;
    }
    this.drag = { kind: "pan", lastScreen: screen };
  }

  onPointerMove(screen: Point): void {
    if (this.drag === null) {
      const edgeHit = hitTestEdge(this.state, this.view, screen);
      const vertexHit = hitTestVertex(this.state, this.view, screen);
      this.hover = vertexHit === null ? edgeHit : null;
      this.hooks.redraw();
      return;
    }
    if (this.drag.kind === "vertex") {
      const img = this.view.screenToImage(screen);
      // the handle follows the cursor on every frame via the pending buffer
      this.state.addLocalEdit(this.drag.instance, {
        op: "move", polygon: this.drag.polygon, vertex: this.drag.vertex,
        x: img.x, y: img.y,
      });
      this.hooks.redraw();
    } else if (this.drag.kind === "box") {
      this.drag.current = this.view.screenToImage(screen);
      this.hooks.redraw();
    } else {
      this.view.panBy(screen.x - this.drag.lastScreen.x,
        screen.y - this.drag.lastScreen.y);
      this.drag.lastScreen = screen;
      this.hooks.redraw();
    }
  }

  async onPointerUp(): Promise<void> {
    const drag = this.drag;
    this.drag = null;
    if (drag === null) return;
    if (drag.kind === "vertex") {
      await this.flushEdits(drag.instance); // drag-end -> PATCH vertices
    } else if (drag.kind === "box") {
      const { start, current } = drag;
      const box = [
        Math.min(start.x, current.x), Math.min(start.y, current.y),
        Math.max(start.x, current.x), Math.max(start.y, current.y),
      ];
      if (box[2] - box[0] >= 4 && box[3] - box[1] >= 4) {
        await this.createInstanceFromBox(box);
      }
    }
  }

  onWheel(screen: Point, deltaY: number): void {
    this.view.zoomAt(screen, deltaY < 0 ? 1.2 : 1 / 1.2);
    this.hooks.redraw();
  }

  onKey(key: string): Promise<void> | void {
    const sel = this.state.selection;
    if (key === "z") {
      if (sel !== null) {
        this.state.undoLastLocalEdit(sel.instance);
        this.hooks.redraw();
      }
      return;
    }
    if (sel === null) return;
    if (key === "Delete" || key === "Backspace") {
      this.state.addLocalEdit(sel.instance, {
        op: "delete", polygon: sel.polygon, vertex: sel.vertex,
      });
      this.state.selection = null;
      this.hooks.redraw();
      return this.flushEdits(sel.instance).then(() => undefined);
    }
    if (key === "i") {
      this.state.addLocalEdit(sel.instance, {
        op: "insert", polygon: sel.polygon, edge: sel.vertex,
      });
      this.hooks.redraw();
      return this.flushEdits(sel.instance).then(() => undefined);
    }
  }

  /** Send the pending buffer for one instance; called before any deform. */
  async flushEdits(instance: number): Promise<boolean> {
    const ops = this.state.pendingOps(instance);
    if (ops.length === 0) return true;
    try {
      const res = await this.api.patchVertices(this.state.sessionId, instance,
        ops as EditOp[]);
      this.state.ackFlush(instance, res.polygons);
      this.hooks.setBanner(null);
      this.hooks.redraw();
      return true;
    } catch (err) {
      if (err instanceof ApiError) {
        // server rejected the edits: roll back to last acknowledged state
        this.state.rejectPending(instance, err.message);
        this.hooks.toast(`edit rejected: ${err.message}`);
      } else {
        // network trouble: keep edits queued locally and show the banner
        this.state.markOffline();
        this.hooks.setBanner("offline: edits queued locally");
      }
      this.hooks.redraw();
      return false;
    }
  }

  async flushAll(): Promise<boolean> {
    for (let i = 0; i < this.state.instanceCount(); i++) {
      if (this.state.hasPending(i) && !(await this.flushEdits(i))) return false;
    }
    return true;
  }

  /** "Deform" button: flush pending edits first, then request deformation. */
  async deformInstance(instance: number, mode = "annotation"): Promise<boolean> {
    if (this.deformInFlight.has(instance)) return false;
    this.deformInFlight.add(instance); // claim before the first await
    try {
      if (!(await this.flushEdits(instance))) return false;
      const res = await this.api.deform(this.state.sessionId, instance, mode);
      this.state.ackFlush(instance, res.polygons);
      this.hooks.redraw();
      return true;
    } catch (err) {
      const message = err instanceof ApiError ? err.message : String(err);
      this.hooks.toast(`deform failed: ${message}`);
      if (!(err instanceof ApiError)) this.state.markOffline();
      return false;
    } finally {
      this.deformInFlight.delete(instance);
    }
  }

  async createInstanceFromBox(box: number[], label = "object"): Promise<number | null> {
    try {
      const res = await this.api.addInstance(this.state.sessionId, { box, label });
      const idx = this.state.addInstance({ label, score: 1.0, polygons: res.polygons });
      this.hooks.redraw();
      return idx;
    } catch (err) {
      const message = err instanceof ApiError ? err.message : String(err);
      this.hooks.toast(`could not create instance: ${message}`);
      return null;
    }
  }
}
