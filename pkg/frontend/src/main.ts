import { ApiClient } from "./api.js";
import { renderCanvas } from "./canvas.js";
import { InteractionController } from "./interaction.js";
import { UISessionState } from "./state.js";
import { ViewTransform } from "./transform.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

async function fileToBase64(file: File): Promise<string> {
  const buf = new Uint8Array(await file.arrayBuffer());
  let s = "";
  for (const b of buf) s += String.fromCharCode(b);
  return btoa(s);
}

function pngDataUrl(b64: string): string {
  return `data:image/png;base64,${b64}`;
}

async function boot(): Promise<void> {
  const canvas = el<HTMLCanvasElement>("viewport");
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("canvas 2d context unavailable");
  const toastBox = el<HTMLDivElement>("toast");
  const banner = el<HTMLDivElement>("banner");
  const status = el<HTMLDivElement>("status");

  const api = new ApiClient("");
  const state = new UISessionState();
  const view = new ViewTransform();
  let image: HTMLImageElement | null = null;

  const hooks = {
    redraw(): void {
      renderCanvas(ctx!, state, view, image, canvas, controller.hover);
      status.textContent = state.sessionId
        ? `session ${state.sessionId.slice(0, 8)} | ${state.instanceCount()} instances`
          + (state.hasPending() ? " | pending edits" : "")
        : "no session";
    },
    toast(message: string): void {
      toastBox.textContent = message;
      toastBox.classList.add("visible");
      setTimeout(() => toastBox.classList.remove("visible"), 4000);
    },
    setBanner(message: string | null): void {
      banner.textContent = message ?? "";
      banner.classList.toggle("visible", message !== null);
    },
  };
  const controller = new InteractionController(state, api, view, hooks);

  function resize(): void {
    canvas.width = canvas.clientWidth;
    canvas.height = canvas.clientHeight;
    hooks.redraw();
  }
  window.addEventListener("resize", resize);

  async function loadImage(b64: string): Promise<void> {
    image = new Image();
    await new Promise<void>((resolve, reject) => {
      image!.onload = () => resolve();
      image!.onerror = () => reject(new Error("image failed to decode"));
      image!.src = pngDataUrl(b64);
    });
    view.fit(image.width, image.height, canvas.width, canvas.height);
  }

  async function openSession(id: string): Promise<void> {
    const doc = await api.getSession(id);
    state.loadSession(doc);
    if (doc.image_png) await loadImage(doc.image_png);
    const url = new URL(window.location.href);
    url.searchParams.set("session", id);
    window.history.replaceState(null, "", url.toString());
    hooks.redraw();
  }

  el<HTMLButtonElement>("create").addEventListener("click", async () => {
    const imgFile = el<HTMLInputElement>("image-file").files?.[0];
    if (!imgFile) {
      hooks.toast("choose an image PNG first");
      return;
    }
    const body: { image_png: string; masks_png?: string[] } = {
      image_png: await fileToBase64(imgFile),
    };
    const maskFiles = el<HTMLInputElement>("mask-files").files;
    if (maskFiles && maskFiles.length > 0) {
      body.masks_png = await Promise.all(Array.from(maskFiles).map(fileToBase64));
    }
    try {
      const doc = await api.createSession(body);
      await openSession(doc.id);
    } catch (err) {
      hooks.toast(String(err));
    }
  });

  el<HTMLButtonElement>("deform").addEventListener("click", async () => {
    const instance = state.selection?.instance ?? 0;
    if (state.instanceCount() === 0) {
      hooks.toast("no instances to deform");
      return;
    }
    await controller.deformInstance(instance);
  });

  el<HTMLButtonElement>("export").addEventListener("click", async () => {
    if (!state.sessionId) return;
    if (!(await controller.flushAll())) return;
    const raw = await api.exportRaw(state.sessionId);
    const blob = new Blob([raw], { type: "application/json" });
    const a = document.createElement("a");
    a.href = URL.createObjectURL(blob);
    a.download = `session_${state.sessionId.slice(0, 8)}.json`;
    a.click();
    URL.revokeObjectURL(a.href);
  });

  const boxToggle = el<HTMLInputElement>("box-mode");
  boxToggle.addEventListener("change", () => {
    controller.boxMode = boxToggle.checked;
  });

  canvas.addEventListener("pointerdown", (e) => {
    canvas.setPointerCapture(e.pointerId);
    controller.onPointerDown({ x: e.offsetX, y: e.offsetY });
  });
  canvas.addEventListener("pointermove", (e) =>
    controller.onPointerMove({ x: e.offsetX, y: e.offsetY }));
  canvas.addEventListener("pointerup", () => void controller.onPointerUp());
  canvas.addEventListener("wheel", (e) => {
    e.preventDefault();
    controller.onWheel({ x: e.offsetX, y: e.offsetY }, e.deltaY);
  }, { passive: false });
  window.addEventListener("keydown", (e) => {
    if (["Delete", "Backspace", "i", "z"].includes(e.key)) {
      e.preventDefault();
      void controller.onKey(e.key);
    }
  });

  resize();
  const sessionId = new URL(window.location.href).searchParams.get("session");
  if (sessionId) {
    try {
      await openSession(sessionId);
    } catch (err) {
      hooks.toast(String(err));
    }
  }
}

void boot();
