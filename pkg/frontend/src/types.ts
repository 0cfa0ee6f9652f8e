export interface Point {
  x: number;
  y: number;
}

/** Polygon as served: [[x, y], ...] in image coordinates. */
export type PolygonData = number[][];

export interface InstanceDoc {
  label: string;
  score: number;
  polygons: PolygonData[];
  accepted?: boolean;
}

export interface SessionDoc {
  id: string;
  instances: InstanceDoc[];
  image_png?: string;
  image_size?: [number, number];
  model_snapshot?: string;
  history_length?: number;
}

export type EditOp =
  | { op: "move"; polygon: number; vertex: number; x: number; y: number }
  | { op: "insert"; polygon: number; edge: number; x?: number; y?: number }
  | { op: "delete"; polygon: number; vertex: number }
  | { op: "accept" };

export interface DeformResponse {
  instance: number;
  polygons: PolygonData[];
  chamfer_to_previous: number[];
}

export interface Selection {
  instance: number;
  polygon: number;
  vertex: number;
}

export interface ExportDoc {
  instances: InstanceDoc[];
}
