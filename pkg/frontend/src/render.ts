/** Top-down map rendering onto a 2D canvas: committed tiles show their decoded
 * view images, frontier tiles draw as actionable outlines, pending tiles as
 * hatched placeholders. The z slider re-requests layer-filtered views. */

import { ApiClient, PaletteInfo } from "./api.js";
import { CanvasViewState, TileCell, tileKey } from "./state.js";

const TILE_PX = 128;
const GAP_PX = 6;

export class MapRenderer {
  private images = new Map<string, HTMLImageElement>();
  tileDims: [number, number, number] = [32, 32, 8];

  constructor(
    private readonly canvas: HTMLCanvasElement,
    private readonly api: ApiClient,
  ) {}

  private bounds(state: CanvasViewState) {
    let i0 = 0, i1 = 0, j0 = 0, j1 = 0;
    for (const cell of state.tiles.values()) {
      i0 = Math.min(i0, cell.i);
      i1 = Math.max(i1, cell.i);
      j0 = Math.min(j0, cell.j);
      j1 = Math.max(j1, cell.j);
    }
    return { i0, i1, j0, j1 };
  }

  /** Canvas pixel rect for a tile; x axis grows right, y axis grows down. */
  tileRect(state: CanvasViewState, i: number, j: number) {
    const { i0, j1 } = this.bounds(state);
    return {
      x: (i - i0) * (TILE_PX + GAP_PX),
      y: (j1 - j) * (TILE_PX + GAP_PX),
      w: TILE_PX,
      h: TILE_PX,
    };
  }

  tileAt(state: CanvasViewState, px: number, py: number): TileCell | null {
    for (const cell of state.tiles.values()) {
      const r = this.tileRect(state, cell.i, cell.j);
      if (px >= r.x && px < r.x + r.w && py >= r.y && py < r.y + r.h) {
        return cell;
      }
    }
    return null;
  }

  private imageFor(state: CanvasViewState, cell: TileCell, onload: () => void) {
    const z = state.zLayer === null ? undefined : state.zLayer;
    const url = this.api.tileViewUrl(state.sessionId!, [cell.i, cell.j], z);
    let img = this.images.get(url);
    if (!img) {
      img = new Image();
      img.onload = onload;
      img.src = url;
      this.images.set(url, img);
    }
    return img;
  }

  /** Drop cached tile images; call after accepts or z-layer changes. */
  invalidate() {
    this.images.clear();
  }

  draw(state: CanvasViewState) {
    if (!state.sessionId) return;
    const { i0, i1, j0, j1 } = this.bounds(state);
    this.canvas.width = (i1 - i0 + 1) * (TILE_PX + GAP_PX);
    this.canvas.height = (j1 - j0 + 1) * (TILE_PX + GAP_PX);
    const ctx = this.canvas.getContext("2d")!;
    ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);

    for (const cell of state.tiles.values()) {
      const r = this.tileRect(state, cell.i, cell.j);
      if (cell.status === "committed") {
        const img = this.imageFor(state, cell, () => this.draw(state));
        if (img.complete && img.naturalWidth > 0) {
          ctx.drawImage(img, r.x, r.y, r.w, r.h);
        } else {
          ctx.fillStyle = "#222";
          ctx.fillRect(r.x, r.y, r.w, r.h);
        }
      } else if (cell.status === "pending") {
        ctx.fillStyle = "#2a2a40";
        ctx.fillRect(r.x, r.y, r.w, r.h);
        ctx.strokeStyle = "#8888ff";
        ctx.setLineDash([6, 4]);
        ctx.strokeRect(r.x + 1, r.y + 1, r.w - 2, r.h - 2);
        ctx.setLineDash([]);
      } else {
        ctx.strokeStyle = "#555";
        ctx.setLineDash([4, 4]);
        ctx.strokeRect(r.x + 1, r.y + 1, r.w - 2, r.h - 2);
        ctx.setLineDash([]);
      }
      if (
        state.selected &&
        state.selected[0] === cell.i &&
        state.selected[1] === cell.j
      ) {
        ctx.strokeStyle = "#ffcc00";
        ctx.lineWidth = 2;
        ctx.strokeRect(r.x, r.y, r.w, r.h);
        ctx.lineWidth = 1;
      }
    }

    // draw-mode boxes on the selected tile (voxel coords scaled to pixels)
    if (state.selected) {
      const r = this.tileRect(state, state.selected[0], state.selected[1]);
      const key = tileKey(state.selected[0], state.selected[1]);
      const cell = state.tiles.get(key);
      if (cell && cell.status === "committed") {
        const [dimX, dimY] = this.tileDims;
        ctx.strokeStyle = "#ff4444";
        for (const [x0, x1, y0, y1] of state.drawBoxes) {
          ctx.strokeRect(
            r.x + (x0 / dimX) * r.w,
            r.y + (y0 / dimY) * r.h,
            ((x1 - x0) / dimX) * r.w,
            ((y1 - y0) / dimY) * r.h,
          );
        }
      }
    }
  }

  drawLegend(container: HTMLElement, palette: PaletteInfo) {
    container.innerHTML = "";
    palette.class_names.forEach((name, idx) => {
      const [r, g, b] = palette.palette[idx];
      const row = document.createElement("div");
      row.className = "legend-row";
      const swatch = document.createElement("span");
      swatch.className = "legend-swatch";
      swatch.style.backgroundColor = `rgb(${r},${g},${b})`;
      const label = document.createElement("span");
      label.textContent = name;
      row.append(swatch, label);
      container.appendChild(row);
    });
  }
}
