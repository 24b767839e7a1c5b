// DOM rendering: section crop with the heatmap stacked on top (CSS alpha
// compositing, opacity from the slider), label badge, slide/section
// navigation, export link.

import { ApiClient } from "./api.js";
import { effectiveLabel, isCorrected, ReviewViewModel } from "./state.js";

export function badgeText(rec: { predicted_label: string | null } | null,
                          effective: string | null,
                          corrected: boolean): string {
  if (effective === null) return "unlabeled";
  return corrected ? `${effective} (corrected)` : effective;
}

export class ReviewView {
  private root: HTMLElement;
  private slideSelect: HTMLSelectElement;
  private image: HTMLImageElement;
  private heatmap: HTMLImageElement;
  private badge: HTMLElement;
  private status: HTMLElement;
  private errorBox: HTMLElement;
  private opacitySlider: HTMLInputElement;
  private heatmapNote: HTMLElement;

  constructor(root: HTMLElement, private vm: ReviewViewModel, private api: ApiClient) {
    this.root = root;
    root.innerHTML = `
      <header>
        <select id="slide-select"></select>
        <span id="status"></span>
        <a id="export" href="${api.exportUrl()}" download="labels.csv">export CSV</a>
      </header>
      <div id="error" class="error" hidden></div>
      <div id="stage">
        <img id="section-image" alt="section" />
        <img id="section-heatmap" alt="" />
        <div id="heatmap-note" class="note" hidden>no heatmap</div>
      </div>
      <footer>
        <button id="prev">&larr; prev</button>
        <span id="badge" class="badge"></span>
        <button id="next">next &rarr;</button>
        <label>overlay
          <input id="opacity" type="range" min="0" max="1" step="0.05" />
        </label>
        <button id="mark-tumor">Tumor (T)</button>
        <button id="mark-normal">Normal (N)</button>
      </footer>`;
    this.slideSelect = root.querySelector("#slide-select")!;
    this.image = root.querySelector("#section-image")!;
    this.heatmap = root.querySelector("#section-heatmap")!;
    this.badge = root.querySelector("#badge")!;
    this.status = root.querySelector("#status")!;
    this.errorBox = root.querySelector("#error")!;
    this.opacitySlider = root.querySelector("#opacity")!;
    this.heatmapNote = root.querySelector("#heatmap-note")!;

    this.slideSelect.addEventListener("change", () => {
      void vm.openSlide(this.slideSelect.value);
    });
    root.querySelector("#prev")!.addEventListener("click", () => vm.prev());
    root.querySelector("#next")!.addEventListener("click", () => vm.next());
    root.querySelector("#mark-tumor")!.addEventListener("click", () => {
      void vm.labelAndAdvance("Tumor");
    });
    root.querySelector("#mark-normal")!.addEventListener("click", () => {
      void vm.labelAndAdvance("Normal");
    });
    this.opacitySlider.addEventListener("input", () => {
      vm.setOpacity(Number(this.opacitySlider.value));
    });
    this.heatmap.addEventListener("error", () => {
      const rec = vm.currentSection;
      if (rec !== null) vm.markHeatmapFailed(rec.id);
    });
    vm.subscribe(() => this.render());
  }

  render(): void {
    const vm = this.vm;
    this.slideSelect.innerHTML = vm.slides
      .map((s) => `<option value="${s.slide_id}">${s.slide_id} ` +
                  `(${s.n_corrected}/${s.n_sections} corrected)</option>`)
      .join("");
    if (vm.slideId !== null) this.slideSelect.value = vm.slideId;

    const rec = vm.currentSection;
    if (rec === null) {
      this.status.textContent = "no sections";
      this.image.removeAttribute("src");
      this.heatmap.removeAttribute("src");
      return;
    }
    const progress = vm.progress();
    this.status.textContent =
      `${rec.section_id} (${vm.current + 1}/${vm.sections.length}, ` +
      `${progress.corrected} corrected)`;

    const imageUrl = this.api.sectionImageUrl(rec.id);
    if (this.image.getAttribute("src") !== imageUrl) this.image.src = imageUrl;

    const failed = vm.heatmapFailed.has(rec.id);
    this.heatmapNote.hidden = !failed;
    if (failed) {
      this.heatmap.removeAttribute("src");
      this.heatmap.style.display = "none";
    } else {
      const heatUrl = this.api.heatmapUrl(rec.id);
      this.heatmap.style.display = "";
      if (this.heatmap.getAttribute("src") !== heatUrl) this.heatmap.src = heatUrl;
      this.heatmap.style.opacity = String(vm.opacity);
    }
    this.opacitySlider.value = String(vm.opacity);

    this.badge.textContent = badgeText(rec, effectiveLabel(rec), isCorrected(rec));
    this.badge.className = "badge " + (effectiveLabel(rec) ?? "none").toLowerCase();

    this.errorBox.hidden = vm.error === null;
    this.errorBox.textContent = vm.error ?? "";
  }
}
