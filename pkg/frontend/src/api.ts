// Typed client for the review service endpoints. The fetch implementation
// is injectable so tests can run without a server.

export type Label = "Tumor" | "Normal";

export interface SlideSummary {
  slide_id: string;
  n_sections: number;
  n_corrected: number;
}

export interface SectionRecord {
  id: string;
  slide_id: string;
  section_id: string;
  bbox: number[];
  predicted_label: Label | null;
  corrected_label: Label | null;
  effective_label: Label | null;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function asJson<T>(res: Response): Promise<T> {
  if (!res.ok) {
    throw new ApiError(res.status, `${res.status} ${res.statusText}`);
  }
  return (await res.json()) as T;
}

export class ApiClient {
  private fetchFn: FetchLike;
  readonly base: string;

  constructor(fetchFn?: FetchLike, base = "") {
    this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
    this.base = base;
  }

  listSlides(): Promise<SlideSummary[]> {
    return this.fetchFn(`${this.base}/api/slides`).then((r) => asJson(r));
  }

  listSections(slideId: string): Promise<SectionRecord[]> {
    return this.fetchFn(
      `${this.base}/api/slides/${encodeURIComponent(slideId)}/sections`,
    ).then((r) => asJson(r));
  }

  setLabel(id: string, label: Label, reviewer = ""): Promise<SectionRecord> {
    return this.fetchFn(`${this.base}/api/sections/${encodeURIComponent(id)}/label`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ label, reviewer }),
    }).then((r) => asJson(r));
  }

  sectionImageUrl(id: string): string {
    return `${this.base}/api/sections/${encodeURIComponent(id)}/image.png`;
  }

  heatmapUrl(id: string): string {
    return `${this.base}/api/sections/${encodeURIComponent(id)}/heatmap.png`;
  }

  exportUrl(): string {
    return `${this.base}/api/export.csv`;
  }
}
