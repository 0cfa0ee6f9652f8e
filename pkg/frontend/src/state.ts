import { EditOp, InstanceDoc, PolygonData, Selection, SessionDoc } from "./types.js";

/**
 * Client-side session state: the last server-acknowledged instances plus a
 * buffer of pending local edits.  Displayed polygons are always
 * acknowledged-state + pending edits, so no local mutation is ever lost:
 * it either reaches the server (flush) or stays visibly pending.
 */
export class UISessionState {
  sessionId = "";
  acknowledged: InstanceDoc[] = [];
  pending: Map<number, EditOp[]> = new Map(); // instance -> ordered edits
  selection: Selection | null = null;
  offline = false;
  lastError = "";

  loadSession(doc: SessionDoc): void {
    this.sessionId = doc.id;
    this.acknowledged = doc.instances.map(cloneInstance);
    this.pending.clear();
    this.selection = null;
  }

  instanceCount(): number {
    return this.acknowledged.length;
  }

  pendingOps(instance: number): EditOp[] {
    return this.pending.get(instance) ?? [];
  }

  hasPending(instance?: number): boolean {
    if (instance === undefined) {
      for (const ops of this.pending.values()) if (ops.length > 0) return true;
      return false;
    }
    return this.pendingOps(instance).length > 0;
  }

  /** Displayed polygons: acknowledged state with pending edits applied. */
  viewPolygons(instance: number): PolygonData[] {
    const base = this.acknowledged[instance];
    if (!base) return [];
    return applyEditOps(base.polygons, this.pendingOps(instance));
  }

  /** Buffer a local edit; coalesces consecutive moves of the same vertex. */
  addLocalEdit(instance: number, op: EditOp): void {
    const ops = this.pending.get(instance) ?? [];
    const last = ops[ops.length - 1];
    if (
      op.op === "move" &&
      last !== undefined &&
      last.op === "move" &&
      last.polygon === op.polygon &&
      last.vertex === op.vertex
    ) {
      ops[ops.length - 1] = op;
    } else {
      ops.push(op);
    }
    this.pending.set(instance, ops);
  }

  undoLastLocalEdit(instance: number): EditOp | undefined {
    const ops = this.pending.get(instance);
    const popped = ops?.pop();
    if (ops !== undefined && ops.length === 0) this.pending.delete(instance);
    return popped;
  }

  /** Server acknowledged the flush: adopt its polygons, clear the buffer. */
  ackFlush(instance: number, polygons: PolygonData[]): void {
    this.acknowledged[instance].polygons = polygons.map((p) => p.map((v) => [...v]));
    this.pending.delete(instance);
    this.offline = false;
  }

  /** Server rejected the edits: drop them (view rolls back to acknowledged). */
  rejectPending(instance: number, reason: string): void {
    this.pending.delete(instance);
    this.lastError = reason;
  }

  /** Network failure: edits stay queued and visible; banner goes up. */
  markOffline(): void {
    this.offline = true;
  }

  addInstance(doc: InstanceDoc): number {
    this.acknowledged.push(cloneInstance(doc));
    return this.acknowledged.length - 1;
  }
}

function cloneInstance(inst: InstanceDoc): InstanceDoc {
  return {
    label: inst.label,
    score: inst.score,
    accepted: inst.accepted ?? false,
    polygons: inst.polygons.map((p) => p.map((v) => [...v])),
  };
}

/** Pure client-side mirror of the server's edit semantics. */
export function applyEditOps(polygons: PolygonData[], ops: EditOp[]): PolygonData[] {
  const out = polygons.map((p) => p.map((v) => [...v]));
  for (const op of ops) {
    if (op.op === "accept") continue;
    const poly = out[op.polygon];
    if (!poly) throw new Error(`polygon ${op.polygon} does not exist`);
    if (op.op === "move") {
      if (op.vertex < 0 || op.vertex >= poly.length)
        throw new Error(`vertex ${op.vertex} does not exist`);
      poly[op.vertex] = [op.x, op.y];
    } else if (op.op === "insert") {
      const n = poly.length;
      if (op.edge < 0 || op.edge >= n) throw new Error(`edge ${op.edge} does not exist`);
      const a = poly[op.edge];
      const b = poly[(op.edge + 1) % n];
      const pt = op.x !== undefined && op.y !== undefined
        ? [op.x, op.y]
        : [(a[0] + b[0]) / 2, (a[1] + b[1]) / 2];
      poly.splice(op.edge + 1, 0, pt);
    } else if (op.op === "delete") {
      if (op.vertex < 0 || op.vertex >= poly.length)
        throw new Error(`vertex ${op.vertex} does not exist`);
      if (poly.length <= 3) throw new Error("polygons keep at least 3 vertices");
      poly.splice(op.vertex, 1);
    }
  }
  return out;
}
