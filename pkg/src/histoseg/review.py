"""Review service for the blind-study label-correction workflow.

Serves slides, section crops, heatmap overlays, and labels over HTTP;
accepts corrections and persists them to an append-only journal that is
replayed on startup (the original bundle files are never rewritten).
"""

import csv
import io
import json
import threading
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .slide import SECTION_LABELS, load_slide_bundle

JOURNAL_NAME = "label_journal.jsonl"


class UnknownSectionError(KeyError):
    pass


class ReviewStore:
    """In-memory review state over a directory of slide bundles.

    Section keys are globally unique ("<slide_id>__<section_id>").  Label
    changes append journal events; replaying the journal reconstructs the
    state exactly.  Writes are serialized by a lock, so concurrent handler
    threads stay consistent (last writer wins per section).
    """

    def __init__(self, data_root):
        self.root = Path(data_root)
        self.journal_path = self.root / JOURNAL_NAME
        self.heatmap_root = self.root
        self._lock = threading.Lock()
        self.bundles = {}
        self.records = {}  # key -> (slide_id, SectionRecord)
        self._load_bundles()
        self._replay_journal()

    @staticmethod
    def section_key(slide_id, section_id):
        return f"{slide_id}__{section_id}"

    def _load_bundles(self):
        for meta in sorted(self.root.glob("*/meta.json")):
            bundle = load_slide_bundle(meta.parent)
            self.bundles[bundle.slide_id] = bundle
            for section in bundle.sections:
                key = self.section_key(bundle.slide_id, section.section_id)
                if key in self.records:
                    raise ValueError(f"duplicate section key {key!r}")
                self.records[key] = (bundle.slide_id, section)

    def _replay_journal(self):
        if not self.journal_path.exists():
            return
        for line in self.journal_path.read_text().splitlines():
            if not line.strip():
                continue
            event = json.loads(line)
            entry = self.records.get(event["key"])
            if entry is not None:
                entry[1].corrected_label = event["label"]

    # -- queries ------------------------------------------------------------

    def list_slides(self):
        out = []
        for slide_id in sorted(self.bundles):
            sections = self.bundles[slide_id].sections
            out.append({
                "slide_id": slide_id,
                "n_sections": len(sections),
                "n_corrected": sum(s.corrected_label is not None for s in sections),
            })
        return out

    def list_sections(self, slide_id):
        bundle = self.bundles.get(slide_id)
        if bundle is None:
            raise UnknownSectionError(f"unknown slide {slide_id!r}")
        return [self._record_json(slide_id, s) for s in bundle.sections]

    def _record_json(self, slide_id, section):
        return {
            "id": self.section_key(slide_id, section.section_id),
            "slide_id": slide_id,
            "section_id": section.section_id,
            "bbox": list(section.bbox),
            "predicted_label": section.predicted_label,
            "corrected_label": section.corrected_label,
            "effective_label": section.effective_label,
        }

    def get_record(self, key):
        entry = self.records.get(key)
        if entry is None:
            raise UnknownSectionError(f"unknown section {key!r}")
        return entry

    def section_image_png(self, key):
        slide_id, section = self.get_record(key)
        x0, y0, x1, y1 = section.bbox
        crop = self.bundles[slide_id].image[y0:y1, x0:x1]
        buf = io.BytesIO()
        Image.fromarray(crop, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()

    def heatmap_png_path(self, key):
        slide_id, section = self.get_record(key)
        return self.heatmap_root / slide_id / f"heatmap_{section.section_id}.png"

    # -- mutations ----------------------------------------------------------

    def set_label(self, key, label, reviewer=""):
        """Set the corrected label; idempotent (re-setting the same value
        appends no new journal event)."""
        if label not in SECTION_LABELS:
            raise ValueError(f"invalid label {label!r}, expected one of {SECTION_LABELS}")
        with self._lock:
            slide_id, section = self.get_record(key)
            if section.corrected_label != label:
                section.corrected_label = label
                event = {"ts": time.time(), "key": key, "label": label,
                         "reviewer": reviewer}
                with open(self.journal_path, "a") as f:
                    f.write(json.dumps(event) + "\n")
            return self._record_json(slide_id, section)

    # -- export -------------------------------------------------------------

    def export_rows(self):
        rows = []
        for slide_id in sorted(self.bundles):
            for section in self.bundles[slide_id].sections:
                effective = section.effective_label
                changed = (section.corrected_label is not None
                           and section.corrected_label != section.predicted_label)
                rows.append({
                    "slide_id": slide_id,
                    "section_id": section.section_id,
                    "predicted": section.predicted_label or "",
                    "effective": effective or "",
                    "changed": changed,
                })
        return rows

    def export_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["slide_id", "section_id", "predicted", "effective", "changed"])
        for row in self.export_rows():
            writer.writerow([row["slide_id"], row["section_id"], row["predicted"],
                             row["effective"], str(row["changed"]).lower()])
        return buf.getvalue()


def create_app(data_root, live_model_path=None, frontend_dir=None):
    """FastAPI application over a ReviewStore.

    live_model_path: optional checkpoint; when set, missing heatmaps are
    computed on demand instead of returning 404.
    """
    from fastapi import Body, FastAPI, HTTPException, Response
    from fastapi.responses import PlainTextResponse

    store = ReviewStore(data_root)
    live_model = None
    if live_model_path is not None:
        from .model import load_model
        live_model = load_model(live_model_path)

    app = FastAPI(title="histoseg review service")
    app.state.store = store

    @app.get("/api/slides")
    def slides():
        return store.list_slides()

    @app.get("/api/slides/{slide_id}/sections")
    def sections(slide_id: str):
        try:
            return store.list_sections(slide_id)
        except UnknownSectionError as e:
            raise HTTPException(status_code=404, detail=str(e))

    @app.get("/api/sections/{key}/image.png")
    def section_image(key: str):
        try:
            data = store.section_image_png(key)
        except UnknownSectionError as e:
            raise HTTPException(status_code=404, detail=str(e))
        return Response(content=data, media_type="image/png")

    @app.get("/api/sections/{key}/heatmap.png")
    def section_heatmap(key: str):
        try:
            path = store.heatmap_png_path(key)
        except UnknownSectionError as e:
            raise HTTPException(status_code=404, detail=str(e))
        if path.exists():
            return Response(content=path.read_bytes(), media_type="image/png")
        if live_model is not None:
            from .inference import predict_heatmap
            slide_id, section = store.get_record(key)
            hm = predict_heatmap(live_model, store.bundles[slide_id], section,
                                 mag_divisor=1)
            png = np.rint(np.clip(hm.probs, 0, 1) * 255).astype(np.uint8)
            buf = io.BytesIO()
            Image.fromarray(png, mode="L").save(buf, format="PNG")
            return Response(content=buf.getvalue(), media_type="image/png")
        raise HTTPException(status_code=404, detail=f"no heatmap for {key}")

    @app.post("/api/sections/{key}/label")
    def set_label(key: str, payload: dict = Body(...)):
        label = payload.get("label")
        reviewer = payload.get("reviewer", "")
        try:
            return store.set_label(key, label, reviewer)
        except UnknownSectionError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))

    @app.get("/api/export.csv", response_class=PlainTextResponse)
    def export_csv():
        return PlainTextResponse(store.export_csv(), media_type="text/csv")

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="ui")

    return app


def serve(data_root, port=8000, host="127.0.0.1", live_model_path=None,
          frontend_dir=None):
    import uvicorn

    app = create_app(data_root, live_model_path=live_model_path,
                     frontend_dir=frontend_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
