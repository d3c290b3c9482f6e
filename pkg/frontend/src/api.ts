/** Typed client for the session service HTTP API. */

export interface TileRef {
  i: number;
  j: number;
  order?: number;
}

export interface ProposalSummary {
  proposal_id: string;
  kind: "outpaint" | "inpaint";
  tile: [number, number];
  seed: number;
  status: "running" | "done" | "failed" | "accepted" | "stale";
  error?: string;
}

export interface SessionSummary {
  session_id: string;
  revision: number;
  seed: number;
  checkpoint: string;
  tile_dims: [number, number, number];
  tiles: TileRef[];
  frontier: [number, number][];
  proposals: ProposalSummary[];
}

export interface PaletteInfo {
  class_names: string[];
  palette: [number, number, number][];
  tile_dims: [number, number, number];
}

export type Box = [number, number, number, number, number, number];

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

async function parseError(response: Response): Promise<ApiError> {
  let code = "unknown";
  let message = response.statusText;
  try {
    const body = await response.json();
    if (body && typeof body === "object") {
      code = body.code ?? code;
      message = body.message ?? message;
    }
  } catch {
    // non-JSON error body; keep the status text
  }
  return new ApiError(response.status, code, message);
}

export class ApiClient {
  constructor(readonly baseUrl: string) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      throw await parseError(response);
    }
    return (await response.json()) as T;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  createSession(seed: number, checkpoint = "diffusion") {
    return this.post<{ session_id: string; revision: number; root_tile: [number, number] }>(
      "/sessions",
      { seed, checkpoint },
    );
  }

  getSession(sessionId: string) {
    return this.request<SessionSummary>(`/sessions/${sessionId}`);
  }

  requestOutpaint(sessionId: string, tile: [number, number], seed?: number) {
    const body: Record<string, unknown> = { tile };
    if (seed !== undefined) body.seed = seed;
    return this.post<{ proposal_id: string; status: string; revision: number }>(
      `/sessions/${sessionId}/outpaint`,
      body,
    );
  }

  requestInpaint(sessionId: string, tile: [number, number], boxes: Box[], seed?: number) {
    const body: Record<string, unknown> = { tile, boxes };
    if (seed !== undefined) body.seed = seed;
    return this.post<{ proposal_id: string; status: string; revision: number }>(
      `/sessions/${sessionId}/inpaint`,
      body,
    );
  }

  getProposal(sessionId: string, proposalId: string) {
    return this.request<ProposalSummary & { revision: number }>(
      `/sessions/${sessionId}/proposals/${proposalId}`,
    );
  }

  accept(sessionId: string, proposalId: string) {
    return this.post<{ status: string; tile: [number, number]; revision: number }>(
      `/sessions/${sessionId}/proposals/${proposalId}/accept`,
      {},
    );
  }

  discard(sessionId: string, proposalId: string) {
    return this.request<{ status: string; revision: number }>(
      `/sessions/${sessionId}/proposals/${proposalId}`,
      { method: "DELETE" },
    );
  }

  getPalette() {
    return this.request<PaletteInfo>("/palette");
  }

  async exportScene(sessionId: string): Promise<Uint8Array> {
    const response = await fetch(`${this.baseUrl}/sessions/${sessionId}/export`);
    if (!response.ok) {
      throw await parseError(response);
    }
    return new Uint8Array(await response.arrayBuffer());
  }

  tileViewUrl(sessionId: string, tile: [number, number], zmax?: number): string {
    const suffix = zmax === undefined ? "" : `?zmax=${zmax}`;
    return `${this.baseUrl}/sessions/${sessionId}/tiles/${tile[0]}/${tile[1]}/view${suffix}`;
  }

  proposalViewUrl(sessionId: string, proposalId: string, zmax?: number): string {
    const suffix = zmax === undefined ? "" : `?zmax=${zmax}`;
    return `${this.baseUrl}/sessions/${sessionId}/proposals/${proposalId}/view${suffix}`;
  }
}
