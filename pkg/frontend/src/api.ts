/** Typed client for the annotation service. All state flows through here;
 * the UI never touches files directly. */

export type Provenance = "auto" | "human";

export interface BoxAnnotation {
  index: number;
  bbox: [number, number, number, number];
  provenance: Provenance;
  score?: number;
}

export interface LabelEntry {
  length_mm: number | null;
  maturity: string | null;
  provenance?: Provenance;
}

export interface AnnotationDoc {
  board: string;
  revision: number;
  pair: string | null;
  boxes: BoxAnnotation[];
  labels: Record<string, LabelEntry>;
}

export interface BoardInfo {
  board: string;
  revision: number;
  pair: string | null;
  n_boxes: number;
  width: number;
  height: number;
  view: string;
}

export interface TaxonomyDoc {
  included: string[];
  excluded: string[];
  min_class_count: number;
}

export interface ExportReport {
  exported: number;
  flagged: { board: string; index?: number; reason: string }[];
}

/** Save rejected because the server has a newer revision. */
export class ConflictError extends Error {
  constructor(public current: AnnotationDoc) {
    super(`stale revision; server is at ${current.revision}`);
    this.name = "ConflictError";
  }
}

export class ApiClient {
  constructor(private base: string = "", private token?: string) {}

  private headers(json = false): Record<string, string> {
    const h: Record<string, string> = {};
    if (json) h["Content-Type"] = "application/json";
    if (this.token) h["X-Auth-Token"] = this.token;
    return h;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await fetch(this.base + path, init);
    if (resp.status === 409) {
      const body = await resp.json();
      throw new ConflictError(body.detail.current as AnnotationDoc);
    }
    if (!resp.ok) {
      const text = await resp.text();
      throw new Error(`${init?.method ?? "GET"} ${path} -> ${resp.status}: ${text}`);
    }
    return (await resp.json()) as T;
  }

  listBoards(): Promise<BoardInfo[]> {
    return this.request("/boards", { headers: this.headers() });
  }

  taxonomy(): Promise<TaxonomyDoc> {
    return this.request("/taxonomy", { headers: this.headers() });
  }

  annotations(board: string): Promise<AnnotationDoc> {
    return this.request(`/boards/${encodeURIComponent(board)}/annotations`, {
      headers: this.headers(),
    });
  }

  /** Persist staged edits. The update must carry the revision it was read
   * at; a stale revision raises ConflictError with the current document. */
  save(
    board: string,
    update: {
      revision: number;
      boxes: BoxAnnotation[];
      labels: Record<string, LabelEntry>;
      pair?: string | null;
    },
  ): Promise<AnnotationDoc> {
    return this.request(`/boards/${encodeURIComponent(board)}/annotations`, {
      method: "PUT",
      headers: this.headers(true),
      body: JSON.stringify(update),
    });
  }

  detect(board: string, threshold = 0.5): Promise<AnnotationDoc> {
    return this.request(
      `/boards/${encodeURIComponent(board)}/detect?threshold=${threshold}`,
      { method: "POST", headers: this.headers() },
    );
  }

  pair(a: string, b: string): Promise<{ a: AnnotationDoc; b: AnnotationDoc }> {
    return this.request("/pairs", {
      method: "PUT",
      headers: this.headers(true),
      body: JSON.stringify({ a, b }),
    });
  }

  async exportCsv(): Promise<string> {
    const resp = await fetch(this.base + "/export", { headers: this.headers() });
    if (!resp.ok) throw new Error(`export failed: ${resp.status}`);
    return await resp.text();
  }

  exportReport(): Promise<ExportReport> {
    return this.request("/export/report", { headers: this.headers() });
  }

  imageUrl(board: string, scale = 1.0): string {
    return `${this.base}/boards/${encodeURIComponent(board)}/image?scale=${scale}`;
  }

  cropUrl(board: string, x: number, y: number, w: number, h: number): string {
    return `${this.base}/boards/${encodeURIComponent(board)}/crop?x=${x}&y=${y}&w=${w}&h=${h}`;
  }
}
