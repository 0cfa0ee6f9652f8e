import { UISessionState } from "./state.js";
import { ViewTransform } from "./transform.js";
import { Point } from "./types.js";

export const HANDLE_RADIUS = 4;
export const HANDLE_HIT_RADIUS = 6; // screen px
export const EDGE_HIT_RADIUS = 6;

const INSTANCE_COLORS = [
  "#18a6f2", "#23d160", "#ffd24a", "#f25c54",
  "#b86ef2", "#2ad4c4", "#f28f3b", "#7a90ff",
];

export function instanceColor(index: number): string {
  return INSTANCE_COLORS[index % INSTANCE_COLORS.length];
}

export interface HoverInfo {
  instance: number;
  polygon: number;
  edge: number;
  at: Point; // image coords of the insert affordance
}

/**
 * Paint the viewport: image, per-instance polygons (one color per instance,
 * shared by all its parts), draggable vertex handles, and the hovered-edge
 * insert affordance.  The caller owns the view transform, so zoom/pan is
 * preserved across redraws.
 */
export function renderCanvas(
  ctx: CanvasRenderingContext2D,
  state: UISessionState,
  view: ViewTransform,
  image: CanvasImageSource | null,
  viewport: { width: number; height: number },
  hover: HoverInfo | null = null,
): void {
  ctx.clearRect(0, 0, viewport.width, viewport.height);
  if (image !== null) {
    ctx.save();
    ctx.imageSmoothingEnabled = view.zoom < 3;
    ctx.setTransform(view.zoom, 0, 0, view.zoom, view.panX, view.panY);
    ctx.drawImage(image, 0, 0);
    ctx.restore();
  }
  for (let i = 0; i < state.instanceCount(); i++) {
    const color = instanceColor(i);
    const selected = state.selection?.instance === i;
    for (const [p, poly] of state.viewPolygons(i).entries()) {
      ctx.strokeStyle = color;
      ctx.lineWidth = selected ? 2.5 : 1.5;
      ctx.beginPath();
      poly.forEach(([x, y], k) => {
        const s = view.imageToScreen({ x, y });
        if (k === 0) ctx.moveTo(s.x, s.y);
        else ctx.lineTo(s.x, s.y);
      });
      ctx.closePath();
      ctx.stroke();
      ctx.fillStyle = state.hasPending(i) ? "#ffffff" : color;
      for (const [x, y] of poly) {
        const s = view.imageToScreen({ x, y });
        ctx.fillRect(s.x - HANDLE_RADIUS, s.y - HANDLE_RADIUS,
          2 * HANDLE_RADIUS, 2 * HANDLE_RADIUS);
        ctx.strokeStyle = "#00000088";
        ctx.lineWidth = 1;
        ctx.strokeRect(s.x - HANDLE_RADIUS, s.y - HANDLE_RADIUS,
          2 * HANDLE_RADIUS, 2 * HANDLE_RADIUS);
      }
      void p;
    }
  }
  if (hover !== null) {
    const s = view.imageToScreen(hover.at);
    ctx.strokeStyle = "#ffffff";
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    ctx.arc(s.x, s.y, HANDLE_RADIUS + 2, 0, Math.PI * 2);
    ctx.stroke();
    ctx.beginPath();
    ctx.moveTo(s.x - 3, s.y);
    ctx.lineTo(s.x + 3, s.y);
    ctx.moveTo(s.x, s.y - 3);
    ctx.lineTo(s.x, s.y + 3);
    ctx.stroke();
  }
}

export function distancePointSegment(p: Point, a: Point, b: Point): number {
  const abx = b.x - a.x;
  const aby = b.y - a.y;
  const len2 = abx * abx + aby * aby;
  let t = 0;
  if (len2 > 0) t = Math.max(0, Math.min(1, ((p.x - a.x) * abx + (p.y - a.y) * aby) / len2));
  const dx = p.x - (a.x + t * abx);
  const dy = p.y - (a.y + t * aby);
  return Math.hypot(dx, dy);
}

export function hitTestVertex(
  state: UISessionState,
  view: ViewTransform,
  screen: Point,
): { instance: number; polygon: number; vertex: number } | null {
  let best: { instance: number; polygon: number; vertex: number } | null = null;
  let bestDist = HANDLE_HIT_RADIUS;
  for (let i = 0; i < state.instanceCount(); i++) {
    state.viewPolygons(i).forEach((poly, p) => {
      poly.forEach(([x, y], v) => {
        const s = view.imageToScreen({ x, y });
        const d = Math.hypot(s.x - screen.x, s.y - screen.y);
        if (d <= bestDist) {
          bestDist = d;
          best = { instance: i, polygon: p, vertex: v };
        }
      });
    });
  }
  return best;
}

export function hitTestEdge(
  state: UISessionState,
  view: ViewTransform,
  screen: Point,
): HoverInfo | null {
  const img = view.screenToImage(screen);
  let best: HoverInfo | null = null;
  let bestDist = EDGE_HIT_RADIUS / view.zoom;
  for (let i = 0; i < state.instanceCount(); i++) {
    state.viewPolygons(i).forEach((poly, p) => {
      for (let e = 0; e < poly.length; e++) {
        const a = { x: poly[e][0], y: poly[e][1] };
        const b = { x: poly[(e + 1) % poly.length][0], y: poly[(e + 1) % poly.length][1] };
        const d = distancePointSegment(img, a, b);
        if (d <= bestDist) {
          bestDist = d;
          best = { instance: i, polygon: p, edge: e, at: img };
        }
      }
    });
  }
  return best;
}
