"""Synthetic pages, hOCR files and FUNSD-style annotations for tests and smoke runs.

Every word in the synthetic vocabulary has a fixed home box on the page, so
tokens and positions predict each other.
"""
import json
from html import escape
from pathlib import Path

import numpy as np

from posmask.corpus import SPECIAL_TOKENS, PageDocument, Vocab

LABELS = ("header", "question", "answer", "other")


def synthetic_vocab(n_words=40):
    return Vocab(list(SPECIAL_TOKENS) + [f"w{i:03d}" for i in range(n_words)])


def word_ids(vocab):
    return [i for i, t in enumerate(vocab.tokens) if t not in SPECIAL_TOKENS]


def home_box(rank, n_words, m, columns=4):
    """Grid-space box assigned to the ``rank``-th vocabulary word."""
    rows = -(-n_words // columns)
    col, row = rank % columns, rank // columns
    cell_w, cell_h = m / columns, m / max(rows, 1)
    x1 = int(col * cell_w + 0.05 * cell_w)
    x2 = int(x1 + (0.35 + 0.4 * ((rank * 37) % 11) / 10) * cell_w)
    y1 = int(row * cell_h + 0.2 * cell_h)
    y2 = int(y1 + 0.5 * cell_h)
    return (x1, y1, min(x2, m), min(y2, m))


def layout_corpus(n_pages, vocab, *, m=1000, tokens_per_page=24, jitter=0, seed=0):
    """Pages of distinct words placed at their home boxes, in reading order."""
    rng = np.random.default_rng(seed)
    ids = word_ids(vocab)
    homes = {tid: home_box(r, len(ids), m) for r, tid in enumerate(ids)}
    pages = []
    k = min(tokens_per_page, len(ids))
    for p in range(n_pages):
        chosen = rng.choice(ids, size=k, replace=False)
        boxes = []
        for tid in chosen:
            b = np.array(homes[int(tid)])
            if jitter:
                b = np.clip(b + rng.integers(-jitter, jitter + 1, size=4), 0, m)
                b[2], b[3] = max(b[0], b[2]), max(b[1], b[3])
            boxes.append(b)
        order = sorted(range(k), key=lambda i: (boxes[i][1], boxes[i][0]))
        token_ids = [vocab.cls_id] + [int(chosen[i]) for i in order] + [vocab.sep_id]
        all_boxes = [(0, 0, 0, 0)] + [tuple(boxes[i]) for i in order] + [(m, m, m, m)]
        pages.append(PageDocument(f"synth{p:04d}", m, m, np.array(token_ids, dtype=np.int64),
                                  np.array(all_boxes, dtype=np.int64), 0))
    return pages


# ------------------------------------------------------------------ hOCR fixtures


def hocr_document(words, width, height, title="synthetic"):
    """Render ``[(text, (l, t, r, b)), ...]`` as a single-page hOCR document."""
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        '<!DOCTYPE html PUBLIC "-//W3C//DTD XHTML 1.0 Transitional//EN"',
        '    "http://www.w3.org/TR/xhtml1/DTD/xhtml1-transitional.dtd">',
        '<html xmlns="http://www.w3.org/1999/xhtml" xml:lang="en" lang="en">',
        " <head>",
        f"  <title>{escape(title)}</title>",
        '  <meta http-equiv="Content-Type" content="text/html;charset=utf-8"/>',
        "  <meta name='ocr-system' content='tesseract 4.1.1'/>",
        "  <meta name='ocr-capabilities' content='ocr_page ocr_carea ocr_par ocr_line ocrx_word'/>",
        " </head>",
        " <body>",
        f"  <div class='ocr_page' id='page_1' title='image \"{escape(title)}.png\"; bbox 0 0 {width} {height}; ppageno 0'>",
    ]
    for i, (text, (l, t, r, b)) in enumerate(words, start=1):
        lines.append(
            f"   <span class='ocr_line' id='line_1_{i}' title=\"bbox {l} {t} {r} {b}; baseline 0 0\">"
            f"<span class='ocrx_word' id='word_1_{i}' title='bbox {l} {t} {r} {b}; x_wconf 95'>"
            f"{escape(text)}</span></span>"
        )
    lines += ["  </div>", " </body>", "</html>", ""]
    return "\n".join(lines)


def write_hocr_fixtures(directory, vocab, n_pages=20, n_blank=2, *, width=2000, height=2500,
                        words_per_page=24, seed=0):
    """Write ``n_pages`` .hocr files, the last ``n_blank`` of them whitespace-only."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    m = 1000
    pages = layout_corpus(n_pages - n_blank, vocab, m=m, tokens_per_page=words_per_page, seed=seed)
    names = []
    for p, page in enumerate(pages):
        words = []
        for tid, (x1, y1, x2, y2) in zip(page.token_ids[1:-1], page.boxes[1:-1]):
            px = (x1 * width // m, y1 * height // m, x2 * width // m, y2 * height // m)
            words.append((vocab.tokens[int(tid)], px))
        name = f"doc{p:03d}.hocr"
        (directory / name).write_text(hocr_document(words, width, height, f"doc{p:03d}"), encoding="utf-8")
        names.append(name)
    for b in range(n_blank):
        name = f"blank{b:03d}.hocr"
        doc = (f"<html><body><div class='ocr_page' title='bbox 0 0 {width} {height}'>"
               f"<span class='ocrx_word' title='bbox 1 1 2 2'> </span></div></body></html>\n")
        (directory / name).write_text(doc, encoding="utf-8")
        names.append(name)
    return names


# ------------------------------------------------------------------ FUNSD-style pages


def region_label(x_center, y_center, m=1000):
    """Entity label as a pure function of where the entity sits on the page."""
    if y_center < 0.15 * m:
        return "header"
    if y_center > 0.85 * m:
        return "other"
    return "question" if x_center < 0.5 * m else "answer"


def funsd_page(vocab, rng, *, width=1000, height=1000, n_entities=8, max_words=3):
    """One FUNSD-format annotation dict whose labels follow :func:`region_label`."""
    ids = word_ids(vocab)
    form = []
    rows = np.linspace(0.05, 0.92, n_entities)
    for e in range(n_entities):
        n_words = int(rng.integers(1, max_words + 1))
        left = rng.uniform(0.05, 0.6) if e % 2 == 0 else rng.uniform(0.52, 0.7)
        y1 = rows[e] * height
        x = left * width
        words = []
        for _ in range(n_words):
            w = rng.uniform(0.04, 0.08) * width
            tok = vocab.tokens[int(rng.choice(ids))]
            words.append({"box": [int(x), int(y1), int(x + w), int(y1 + 0.03 * height)], "text": tok})
            x += w + 0.01 * width
        box = [words[0]["box"][0], words[0]["box"][1], words[-1]["box"][2], words[-1]["box"][3]]
        cx = (box[0] + box[2]) / 2 * 1000 / width
        cy = (box[1] + box[3]) / 2 * 1000 / height
        form.append({
            "id": e, "box": box, "text": " ".join(w["text"] for w in words),
            "label": region_label(cx, cy), "words": words, "linking": [],
        })
    return {"form": form, "page_size": [width, height]}


def write_funsd_fixtures(directory, vocab, n_pages=5, seed=0, **kwargs):
    directory = Path(directory)
    ann = directory / "annotations"
    ann.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for p in range(n_pages):
        page = funsd_page(vocab, rng, **kwargs)
        (ann / f"form{p:03d}.json").write_text(json.dumps(page, indent=1), encoding="utf-8")
    return directory
