#!/usr/bin/env python3
"""
Sample sheets: original | ciGAN input | synthetic, one example per row

- PNG grid (Pillow)
- PDF sheet (reportlab), row labels give the label flip
"""

import math
import os
from pathlib import Path

import numpy as np
from PIL import Image
from reportlab.lib.pagesizes import A4
from reportlab.lib.units import mm
from reportlab.lib.utils import ImageReader
from reportlab.pdfgen import canvas

import runlog
from errors import InvalidInputError
from patch_pipeline import MALIGNANT, NON_MALIGNANT

COLUMNS = ("Original", "ciGAN input", "Synthetic")
ROWS_PER_PAGE = 4
GAP = 4


def pick_examples(examples, per_direction=2):
    """First `per_direction` lesion removals, then as many lesion insertions."""
    removals = [e for e in examples if e.source.label == MALIGNANT][:per_direction]
    insertions = [e for e in examples if e.source.label == NON_MALIGNANT][:per_direction]
    return removals + insertions


def sample_rows(examples):
    """(original, input, synthetic) 8-bit arrays plus a caption per example."""
    rows = []
    for e in examples:
        cells = (e.source.image.pixels, e.conditioned.channels[0], e.synthetic.image.pixels)
        rows.append((tuple(_to_uint8(c) for c in cells), f"{e.source.label} → {e.synthetic.label}"))
    return rows


def _to_uint8(pixels):
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def sample_grid_image(rows, gap=GAP):
    """One grayscale image with three columns per row, white gutters."""
    if not rows:
        raise InvalidInputError("no rows to draw")
    h, w = rows[0][0][0].shape
    canvas_img = Image.new("L", (3 * w + 4 * gap, len(rows) * (h + gap) + gap), color=255)
    for r, (cells, _) in enumerate(rows):
        for c, cell in enumerate(cells):
            canvas_img.paste(Image.fromarray(cell, mode="L"), (gap + c * (w + gap), gap + r * (h + gap)))
    return canvas_img


def save_sample_grid(rows, path):
    os.makedirs(Path(path).parent, exist_ok=True)
    sample_grid_image(rows).save(path)
    runlog.log(f"sample grid {path}", "🖼")
    return path


def save_sample_sheet(rows, path, title="ciGAN samples"):
    """A4 sheet, ROWS_PER_PAGE examples per page, a caption column on the left."""
    os.makedirs(Path(path).parent, exist_ok=True)
    c = canvas.Canvas(str(path), pagesize=A4)
    page_w, page_h = A4

    margin_left = 15 * mm
    margin_top = 22 * mm
    margin_bottom = 12 * mm
    caption_col_w = 35 * mm
    header_h = 8 * mm
    padding_cell = 3 * mm

    available_w = page_w - 2 * margin_left - caption_col_w
    available_h = page_h - margin_top - margin_bottom - header_h
    row_h = available_h / ROWS_PER_PAGE
    cell_w = available_w / len(COLUMNS)
    img_size = min(cell_w, row_h) - 2 * padding_cell

    pages = max(1, math.ceil(len(rows) / ROWS_PER_PAGE))
    for page in range(pages):
        c.setFont("Helvetica-Bold", 14)
        c.drawCentredString(page_w / 2, page_h - margin_top / 2, f"{title} (Page {page + 1}/{pages})")
        header_y = page_h - margin_top - header_h
        c.setFont("Helvetica-Bold", 9)
        for col, name in enumerate(COLUMNS):
            cell_x = margin_left + caption_col_w + col * cell_w
            c.drawCentredString(cell_x + cell_w / 2, header_y + 2 * mm, name)

        for r, (cells, caption) in enumerate(rows[page * ROWS_PER_PAGE:(page + 1) * ROWS_PER_PAGE]):
            cell_bottom = header_y - (r + 1) * row_h
            c.setFont("Helvetica", 8)
            c.drawCentredString(margin_left + caption_col_w / 2, cell_bottom + row_h / 2, caption)
            for col, cell in enumerate(cells):
                cell_x = margin_left + caption_col_w + col * cell_w
                c.rect(cell_x, cell_bottom, cell_w, row_h, stroke=1, fill=0)
                c.drawImage(ImageReader(Image.fromarray(cell, mode="L")),
                            cell_x + (cell_w - img_size) / 2, cell_bottom + (row_h - img_size) / 2,
                            width=img_size, height=img_size)
        c.showPage()

    c.save()
    runlog.log(f"sample sheet {path}", "📄")
    return path
