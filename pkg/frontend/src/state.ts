// View model for the correction loop. Label changes are optimistic: the
// UI flips immediately, and on a server failure the previous
// server-acknowledged record is restored.

import { ApiClient, Label, SectionRecord, SlideSummary } from "./api.js";

export function effectiveLabel(rec: SectionRecord): Label | null {
  return rec.corrected_label ?? rec.predicted_label;
}

export function isCorrected(rec: SectionRecord): boolean {
  return rec.corrected_label !== null;
}

export class ReviewViewModel {
  slides: SlideSummary[] = [];
  slideId: string | null = null;
  sections: SectionRecord[] = [];
  current = 0;
  opacity = 0.5;
  pendingSection: string | null = null; // at most one in-flight mutation
  error: string | null = null;
  heatmapFailed = new Set<string>();

  private listeners: Array<() => void> = [];

  constructor(private api: ApiClient) {}

  subscribe(fn: () => void): void {
    this.listeners.push(fn);
  }

  private notify(): void {
    for (const fn of this.listeners) fn();
  }

  get currentSection(): SectionRecord | null {
    return this.sections[this.current] ?? null;
  }

  async loadSlides(): Promise<void> {
    this.slides = await this.api.listSlides();
    this.notify();
    if (this.slideId === null && this.slides.length > 0) {
      await this.openSlide(this.slides[0].slide_id);
    }
  }

  async openSlide(slideId: string): Promise<void> {
    this.sections = await this.api.listSections(slideId);
    this.slideId = slideId;
    this.current = 0;
    this.error = null;
    this.notify();
  }

  next(): void {
    if (this.current < this.sections.length - 1) {
      this.current += 1;
      this.notify();
    }
  }

  prev(): void {
    if (this.current > 0) {
      this.current -= 1;
      this.notify();
    }
  }

  setOpacity(value: number): void {
    this.opacity = Math.min(1, Math.max(0, value));
    this.notify();
  }

  nudgeOpacity(delta: number): void {
    this.setOpacity(this.opacity + delta);
  }

  markHeatmapFailed(id: string): void {
    this.heatmapFailed.add(id);
    this.notify();
  }

  progress(): { corrected: number; total: number } {
    return {
      corrected: this.sections.filter(isCorrected).length,
      total: this.sections.length,
    };
  }

  /** Optimistic label update with rollback; resolves true on success. */
  async correctLabel(label: Label): Promise<boolean> {
    const rec = this.currentSection;
    if (rec === null || this.pendingSection === rec.id) return false;
    const idx = this.current;
    const prior = { ...rec };
    this.pendingSection = rec.id;
    this.error = null;
    this.sections[idx] = { ...rec, corrected_label: label, effective_label: label };
    this.notify();
    try {
      const updated = await this.api.setLabel(rec.id, label);
      this.sections[idx] = updated;
      return true;
    } catch (err) {
      this.sections[idx] = prior; // roll back to the acknowledged state
      this.error = `label update failed: ${String(err)} (press again to retry)`;
      return false;
    } finally {
      this.pendingSection = null;
      this.notify();
    }
  }

  /** Keyboard flow: label the current section, then move to the next one. */
  async labelAndAdvance(label: Label): Promise<void> {
    const ok = await this.correctLabel(label);
    if (ok) this.next();
  }
}
