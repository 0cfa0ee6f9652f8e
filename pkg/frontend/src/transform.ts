import { Point } from "./types.js";

/**
 * Zoom/pan mapping between image coordinates and screen (canvas) pixels.
 * screen = image * zoom + pan; kept as a plain affine so the round trip
 * screen -> image -> screen is identity to floating-point precision.
 */
export class ViewTransform {
  zoom: number;
  panX: number;
  panY: number;

  constructor(zoom = 1, panX = 0, panY = 0) {
    this.zoom = zoom;
    this.panX = panX;
    this.panY = panY;
  }

  imageToScreen(p: Point): Point {
    return { x: p.x * this.zoom + this.panX, y: p.y * this.zoom + this.panY };
  }

  screenToImage(p: Point): Point {
    return { x: (p.x - this.panX) / this.zoom, y: (p.y - this.panY) / this.zoom };
  }

  /** Zoom by `factor` keeping the given screen point fixed. */
  zoomAt(screen: Point, factor: number): void {
    const anchor = this.screenToImage(screen);
    this.zoom *= factor;
    this.panX = screen.x - anchor.x * this.zoom;
    this.panY = screen.y - anchor.y * this.zoom;
  }

  panBy(dx: number, dy: number): void {
    this.panX += dx;
    this.panY += dy;
  }

  /** Initial fit of an image into a viewport, centered. */
  fit(imageW: number, imageH: number, viewW: number, viewH: number): void {
    this.zoom = Math.min(viewW / imageW, viewH / imageH);
    this.panX = (viewW - imageW * this.zoom) / 2;
    this.panY = (viewH - imageH * this.zoom) / 2;
  }
}
