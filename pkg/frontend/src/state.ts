/** Session view state and the controller that keeps it in sync with the
 * service. All scene mutations go through the documented API; the state only
 * changes after a confirmed response (no optimistic updates). */

import { ApiClient, ApiError, Box, ProposalSummary, SessionSummary } from "./api.js";

export type TileStatus = "committed" | "pending" | "frontier";

export interface TileCell {
  i: number;
  j: number;
  status: TileStatus;
}

export interface Notice {
  kind: "info" | "conflict" | "error";
  message: string;
}

export interface CanvasViewState {
  sessionId: string | null;
  revision: number;
  tiles: Map<string, TileCell>;
  proposals: ProposalSummary[];
  selected: [number, number] | null;
  drawBoxes: Box[];
  zLayer: number | null; // null = full height
  notices: Notice[];
}

export const tileKey = (i: number, j: number) => `${i},${j}`;

export function emptyState(): CanvasViewState {
  return {
    sessionId: null,
    revision: 0,
    tiles: new Map(),
    proposals: [],
    selected: null,
    drawBoxes: [],
    zLayer: null,
    notices: [],
  };
}

/** Derive the per-tile status map from a server summary. */
export function deriveTiles(summary: SessionSummary): Map<string, TileCell> {
  const tiles = new Map<string, TileCell>();
  for (const t of summary.tiles) {
    tiles.set(tileKey(t.i, t.j), { i: t.i, j: t.j, status: "committed" });
  }
  for (const [i, j] of summary.frontier) {
    tiles.set(tileKey(i, j), { i, j, status: "frontier" });
  }
  for (const p of summary.proposals) {
    if (p.status === "running" || p.status === "done") {
      const [i, j] = p.tile;
      const existing = tiles.get(tileKey(i, j));
      // a committed tile with an inpaint proposal stays committed on the map;
      // pending only marks not-yet-committed outpaint targets
      if (!existing || existing.status === "frontier") {
        tiles.set(tileKey(i, j), { i, j, status: "pending" });
      }
    }
  }
  return tiles;
}

export interface ControllerOptions {
  pollIntervalMs?: number;
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

export class SessionController {
  readonly state: CanvasViewState = emptyState();
  private readonly pollIntervalMs: number;
  private readonly sleep: (ms: number) => Promise<void>;

  constructor(
    private readonly api: ApiClient,
    options: ControllerOptions = {},
  ) {
    this.pollIntervalMs = options.pollIntervalMs ?? 1000;
    this.sleep = options.sleep ?? defaultSleep;
  }

  private notice(kind: Notice["kind"], message: string) {
    this.state.notices.push({ kind, message });
  }

  async createSession(seed: number): Promise<string> {
    const created = await this.api.createSession(seed);
    this.state.sessionId = created.session_id;
    await this.refresh();
    return created.session_id;
  }

  /** Pull the latest summary; the server revision is authoritative and any
   * change replaces local state wholesale (stale views never linger). */
  async refresh(): Promise<void> {
    if (!this.state.sessionId) return;
    const summary = await this.api.getSession(this.state.sessionId);
    this.state.revision = summary.revision;
    this.state.tiles = deriveTiles(summary);
    this.state.proposals = summary.proposals;
  }

  select(tile: [number, number] | null) {
    this.state.selected = tile;
    this.state.drawBoxes = [];
  }

  addBox(box: Box) {
    this.state.drawBoxes.push(box);
  }

  setZLayer(z: number | null) {
    this.state.zLayer = z;
  }

  private async guarded<T>(op: () => Promise<T>): Promise<T | null> {
    try {
      return await op();
    } catch (err) {
      if (err instanceof ApiError) {
        const kind = err.status === 409 ? "conflict" : "error";
        this.notice(kind, `${err.code}: ${err.message}`);
        await this.refresh();
        return null;
      }
      throw err;
    }
  }

  async requestOutpaint(tile: [number, number], seed?: number): Promise<string | null> {
    if (!this.state.sessionId) throw new Error("no session");
    const result = await this.guarded(() =>
      this.api.requestOutpaint(this.state.sessionId!, tile, seed),
    );
    if (!result) return null;
    await this.refresh();
    return result.proposal_id;
  }

  async requestInpaint(
    tile: [number, number],
    boxes: Box[],
    seed?: number,
  ): Promise<string | null> {
    if (!this.state.sessionId) throw new Error("no session");
    const result = await this.guarded(() =>
      this.api.requestInpaint(this.state.sessionId!, tile, boxes, seed),
    );
    if (!result) return null;
    this.state.drawBoxes = [];
    await this.refresh();
    return result.proposal_id;
  }

  /** Poll until the proposal leaves "running"; resolves to its final status. */
  async waitForProposal(proposalId: string, timeoutMs = 300_000): Promise<string> {
    if (!this.state.sessionId) throw new Error("no session");
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const proposal = await this.api.getProposal(this.state.sessionId, proposalId);
      if (proposal.status !== "running") {
        await this.refresh();
        return proposal.status;
      }
      if (Date.now() > deadline) {
        throw new Error(`proposal ${proposalId} timed out`);
      }
      await this.sleep(this.pollIntervalMs);
    }
  }

  async accept(proposalId: string): Promise<boolean> {
    if (!this.state.sessionId) throw new Error("no session");
    const result = await this.guarded(() =>
      this.api.accept(this.state.sessionId!, proposalId),
    );
    if (!result) return false;
    await this.refresh();
    return true;
  }

  /** Discard the proposal and request a fresh one for the same tile with a
   * new server-chosen seed. */
  async regenerate(proposalId: string): Promise<string | null> {
    if (!this.state.sessionId) throw new Error("no session");
    const proposal = await this.api.getProposal(this.state.sessionId, proposalId);
    const discarded = await this.guarded(() =>
      this.api.discard(this.state.sessionId!, proposalId),
    );
    if (!discarded) return null;
    if (proposal.kind === "outpaint") {
      return this.requestOutpaint(proposal.tile);
    }
    this.notice("info", "discarded inpaint proposal; draw boxes to request a new one");
    await this.refresh();
    return null;
  }

  async exportScene(): Promise<Uint8Array> {
    if (!this.state.sessionId) throw new Error("no session");
    return this.api.exportScene(this.state.sessionId);
  }
}
