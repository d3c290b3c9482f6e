/** App bootstrap: wires the controller, renderer and toolbar together.
 * The service base URL comes from ?service=... or defaults to same-origin
 * port 8765. */

import { ApiClient, Box } from "./api.js";
import { MapRenderer } from "./render.js";
import { SessionController } from "./state.js";

function serviceBaseUrl(): string {
  const params = new URLSearchParams(window.location.search);
  return params.get("service") ?? `${window.location.protocol}//${window.location.hostname}:8765`;
}

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

async function bootstrap() {
  const api = new ApiClient(serviceBaseUrl());
  const controller = new SessionController(api);
  const canvas = el<HTMLCanvasElement>("map");
  const renderer = new MapRenderer(canvas, api);
  const status = el<HTMLDivElement>("status");
  const noticesBox = el<HTMLDivElement>("notices");
  const zSlider = el<HTMLInputElement>("z-layer");
  const preview = el<HTMLImageElement>("preview");
  const acceptBtn = el<HTMLButtonElement>("accept");
  const regenBtn = el<HTMLButtonElement>("regenerate");
  const inpaintBtn = el<HTMLButtonElement>("inpaint");
  const exportLink = el<HTMLAnchorElement>("export");

  let activeProposal: string | null = null;
  let drawStart: [number, number] | null = null;

  const palette = await api.getPalette();
  renderer.tileDims = palette.tile_dims;
  renderer.drawLegend(el("legend"), palette);
  zSlider.max = String(palette.tile_dims[2] - 1);
  zSlider.value = zSlider.max;

  function redraw() {
    renderer.draw(controller.state);
    status.textContent = controller.state.sessionId
      ? `session ${controller.state.sessionId} — revision ${controller.state.revision}`
      : "no session";
    noticesBox.innerHTML = "";
    for (const notice of controller.state.notices.slice(-4)) {
      const div = document.createElement("div");
      div.className = `notice notice-${notice.kind}`;
      div.textContent = notice.message;
      noticesBox.appendChild(div);
    }
    const pending = controller.state.proposals.filter(
      (p) => p.status === "running" || p.status === "done",
    );
    acceptBtn.disabled = !activeProposal;
    regenBtn.disabled = !activeProposal;
    inpaintBtn.disabled = controller.state.drawBoxes.length === 0;
    const active = pending.find((p) => p.proposal_id === activeProposal);
    if (active && active.status === "done" && controller.state.sessionId) {
      preview.src = api.proposalViewUrl(controller.state.sessionId, active.proposal_id);
      preview.style.display = "block";
    } else {
      preview.style.display = "none";
    }
  }

  async function track(proposalId: string | null) {
    activeProposal = proposalId;
    redraw();
    if (!proposalId) return;
    const final = await controller.waitForProposal(proposalId);
    if (final !== "done") {
      activeProposal = null;
    }
    redraw();
  }

  canvas.addEventListener("click", async (event) => {
    const rect = canvas.getBoundingClientRect();
    const cell = renderer.tileAt(controller.state, event.clientX - rect.x, event.clientY - rect.y);
    if (!cell) return;
    if (cell.status === "frontier") {
      controller.select([cell.i, cell.j]);
      redraw();
      await track(await controller.requestOutpaint([cell.i, cell.j]));
    } else if (cell.status === "committed") {
      controller.select([cell.i, cell.j]);
      redraw();
    }
  });

  // box drawing on the selected committed tile: drag corner to corner
  canvas.addEventListener("mousedown", (event) => {
    if (!controller.state.selected) return;
    const rect = canvas.getBoundingClientRect();
    drawStart = [event.clientX - rect.x, event.clientY - rect.y];
  });
  canvas.addEventListener("mouseup", (event) => {
    if (!drawStart || !controller.state.selected) return;
    const rect = canvas.getBoundingClientRect();
    const [i, j] = controller.state.selected;
    const tile = renderer.tileRect(controller.state, i, j);
    const [dimX, dimY, dimZ] = renderer.tileDims;
    const toVoxel = (px: number, py: number): [number, number] => [
      Math.max(0, Math.min(dimX, Math.round(((px - tile.x) / tile.w) * dimX))),
      Math.max(0, Math.min(dimY, Math.round(((py - tile.y) / tile.h) * dimY))),
    ];
    const [x0, y0] = toVoxel(drawStart[0], drawStart[1]);
    const [x1, y1] = toVoxel(event.clientX - rect.x, event.clientY - rect.y);
    drawStart = null;
    if (Math.abs(x1 - x0) >= 1 && Math.abs(y1 - y0) >= 1) {
      const box: Box = [
        Math.min(x0, x1), Math.max(x0, x1),
        Math.min(y0, y1), Math.max(y0, y1),
        0, dimZ,
      ];
      controller.addBox(box);
      redraw();
    }
  });

  inpaintBtn.addEventListener("click", async () => {
    if (!controller.state.selected || controller.state.drawBoxes.length === 0) return;
    await track(
      await controller.requestInpaint(controller.state.selected, controller.state.drawBoxes),
    );
  });

  acceptBtn.addEventListener("click", async () => {
    if (!activeProposal) return;
    if (await controller.accept(activeProposal)) {
      activeProposal = null;
      renderer.invalidate();
    }
    redraw();
  });

  regenBtn.addEventListener("click", async () => {
    if (!activeProposal) return;
    await track(await controller.regenerate(activeProposal));
  });

  zSlider.addEventListener("change", () => {
    const top = Number(zSlider.max);
    const value = Number(zSlider.value);
    controller.setZLayer(value >= top ? null : value);
    renderer.invalidate();
    redraw();
  });

  exportLink.addEventListener("click", () => {
    if (controller.state.sessionId) {
      exportLink.href = `${serviceBaseUrl()}/sessions/${controller.state.sessionId}/export`;
    }
  });

  const sessionSeed = Number(new URLSearchParams(window.location.search).get("seed") ?? "0");
  await controller.createSession(sessionSeed);
  redraw();

  // 1s polling keeps tile statuses mirroring the server revision
  setInterval(async () => {
    const before = controller.state.revision;
    await controller.refresh();
    if (controller.state.revision !== before) {
      renderer.invalidate();
    }
    redraw();
  }, 1000);
}

bootstrap().catch((err) => {
  const status = document.getElementById("status");
  if (status) status.textContent = `failed to start: ${err}`;
  console.error(err);
});
