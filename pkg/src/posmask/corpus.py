"""OCR ingestion: hOCR parsing, size filtering, box normalization, tokenization.

Pages are stored as token-id and box arrays with the special tokens already in
place (``[CLS]`` first, ``[SEP]`` last).
"""
import json
import logging
import re
from dataclasses import dataclass, field
from html.parser import HTMLParser
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_GRID = 1000
DEFAULT_MIN_BYTES = 1800
DEFAULT_MAX_LEN = 512

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)

_BBOX_RE = re.compile(r"(?:^|;)\s*bbox\s+(-?\d+)\s+(-?\d+)\s+(-?\d+)\s+(-?\d+)\s*(?:;|$)")
_VOID_TAGS = {"area", "base", "br", "col", "embed", "hr", "img", "input", "link", "meta",
              "param", "source", "track", "wbr"}


@dataclass(frozen=True)
class RawWord:
    text: str
    box: tuple  # (left, top, right, bottom) in page pixels


@dataclass
class HocrPage:
    words: list
    width: int
    height: int
    skipped: int = 0


@dataclass(frozen=True)
class BoundingBox:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if not (0 <= self.x1 <= self.x2 and 0 <= self.y1 <= self.y2):
            raise ValueError(f"invalid box {self.as_tuple()}")

    @property
    def w(self):
        return self.x2 - self.x1

    @property
    def h(self):
        return self.y2 - self.y1

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class LayoutToken:
    token_id: int
    position: int
    segment: int
    box: BoundingBox


@dataclass
class PageDocument:
    source_id: str
    page_width: int
    page_height: int
    token_ids: np.ndarray  # (n,) int64, includes [CLS]/[SEP]
    boxes: np.ndarray  # (n, 4) int64 on the [0, m] grid
    page_number: int = 0

    def __len__(self):
        return len(self.token_ids)

    @property
    def tokens(self):
        return [
            LayoutToken(int(t), i, 0, BoundingBox(*map(int, b)))
            for i, (t, b) in enumerate(zip(self.token_ids, self.boxes))
        ]

    def to_record(self):
        return {
            "source_id": self.source_id,
            "page": self.page_number,
            "width": self.page_width,
            "height": self.page_height,
            "tokens": [int(t) for t in self.token_ids],
            "boxes": [[int(v) for v in b] for b in self.boxes],
        }

    @classmethod
    def from_record(cls, rec):
        boxes = np.asarray(rec["boxes"], dtype=np.int64).reshape(-1, 4)
        return cls(
            source_id=rec["source_id"],
            page_width=int(rec["width"]),
            page_height=int(rec["height"]),
            token_ids=np.asarray(rec["tokens"], dtype=np.int64),
            boxes=boxes,
            page_number=int(rec.get("page", 0)),
        )


# ------------------------------------------------------------------ hOCR


def _parse_bbox(title):
    if title is None:
        return None
    m = _BBOX_RE.search(title)
    if m is None:
        return None
    return tuple(int(v) for v in m.groups())


class _HocrParser(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.pages = []
        self._stack = []  # (tag, role)
        self._word_text = None
        self._word_box = None
        self._word_bad = False

    def _classes(self, attrs):
        return set((attrs.get("class") or "").split())

    def handle_starttag(self, tag, attrs):
        attrs = dict(attrs)
        classes = self._classes(attrs)
        role = None
        if "ocr_page" in classes:
            box = _parse_bbox(attrs.get("title"))
            width, height = (box[2], box[3]) if box else (0, 0)
            self.pages.append(HocrPage([], width, height))
            role = "page"
        elif "ocrx_word" in classes and self.pages:
            role = "word"
            self._word_text = []
            box = _parse_bbox(attrs.get("title"))
            self._word_bad = box is None or box[0] > box[2] or box[1] > box[3]
            self._word_box = box
        if tag not in _VOID_TAGS:
            self._stack.append((tag, role))

    def handle_startendtag(self, tag, attrs):
        pass

    def handle_endtag(self, tag):
        while self._stack:
            open_tag, role = self._stack.pop()
            if role == "word":
                self._finish_word()
            if open_tag == tag:
                break

    def handle_data(self, data):
        if self._word_text is not None:
            self._word_text.append(data)

    def _finish_word(self):
        text = "".join(self._word_text).strip()
        page = self.pages[-1]
        if self._word_bad:
            page.skipped += 1
        elif text:
            page.words.append(RawWord(text, self._word_box))
        self._word_text = None

    def close(self):
        super().close()
        while self._stack:
            _, role = self._stack.pop()
            if role == "word":
                self._finish_word()


def parse_hocr(data):
    """Parse hOCR bytes/text into one :class:`HocrPage` per ``ocr_page`` element.

    Words whose ``bbox`` is missing or inverted are skipped and counted in
    ``HocrPage.skipped``; whitespace-only words are dropped silently.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    parser = _HocrParser()
    parser.feed(data)
    parser.close()
    for page in parser.pages:
        if page.skipped:
            log.warning("skipped %d word(s) with malformed bbox", page.skipped)
    return parser.pages


def filter_small_pages(page_files, min_bytes=DEFAULT_MIN_BYTES):
    """Keep ``(name, size)`` entries whose size is at least ``min_bytes``."""
    return [(name, size) for name, size in page_files if size >= min_bytes]


def normalize_box(pixel_box, page_width, page_height, m=DEFAULT_GRID):
    if page_width <= 0 or page_height <= 0:
        raise ValueError(f"page dimensions must be positive, got {page_width}x{page_height}")
    left, top, right, bottom = pixel_box

    def scale(v, extent):
        return min(max((int(v) * m) // extent, 0), m)

    x1, x2 = scale(left, page_width), scale(right, page_width)
    y1, y2 = scale(top, page_height), scale(bottom, page_height)
    return BoundingBox(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))


# ------------------------------------------------------------------ vocabulary / tokenizers


class Vocab:
    def __init__(self, tokens):
        tokens = list(tokens)
        missing = [t for t in SPECIAL_TOKENS if t not in tokens]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("vocabulary has duplicate entries")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def id(self, tok):
        return self.index.get(tok, self.unk_id)

    @property
    def pad_id(self):
        return self.index[PAD]

    @property
    def unk_id(self):
        return self.index[UNK]

    @property
    def cls_id(self):
        return self.index[CLS]

    @property
    def sep_id(self):
        return self.index[SEP]

    @property
    def mask_id(self):
        return self.index[MASK]

    @property
    def special_ids(self):
        return {self.index[t] for t in SPECIAL_TOKENS}

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line.rstrip("\r") for line in lines if line.strip())

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


class WhitespaceTokenizer:
    """One token per word: exact vocabulary lookup or ``[UNK]``."""

    name = "whitespace"

    def __init__(self, vocab, lowercase=False):
        self.vocab = vocab
        self.lowercase = lowercase

    def tokenize_word(self, word):
        if self.lowercase:
            word = word.lower()
        return [self.vocab.id(word)]


class WordPieceTokenizer:
    """Greedy longest-match-first word pieces; continuations carry a ``##`` prefix."""

    name = "wordpiece"

    def __init__(self, vocab, lowercase=True, max_chars=100):
        self.vocab = vocab
        self.lowercase = lowercase
        self.max_chars = max_chars

    def pieces(self, word):
        if self.lowercase:
            word = word.lower()
        if len(word) > self.max_chars:
            return None
        out, start = [], 0
        while start < len(word):
            end = len(word)
            piece = None
            while start < end:
                cand = word[start:end] if start == 0 else "##" + word[start:end]
                if cand in self.vocab:
                    piece = cand
                    break
                end -= 1
            if piece is None:
                return None
            out.append(piece)
            start = end
        return out

    def tokenize_word(self, word):
        ids = []
        for chunk in _split_punct(word):
            pieces = self.pieces(chunk)
            if pieces is None:
                ids.append(self.vocab.unk_id)
            else:
                ids.extend(self.vocab.index[p] for p in pieces)
        return ids


def _split_punct(word):
    return [c for c in re.findall(r"\w+|[^\w\s]", word)] or [word]


def make_tokenizer(name, vocab, lowercase=True):
    if name == "wordpiece":
        return WordPieceTokenizer(vocab, lowercase=lowercase)
    if name == "whitespace":
        return WhitespaceTokenizer(vocab, lowercase=lowercase)
    raise ValueError(f"unknown tokenizer {name!r}")


def tokenize_words(words, tokenizer, page_width, page_height, m=DEFAULT_GRID):
    """Token ids, boxes and the owning word index per sub-token (no specials)."""
    ids, boxes, owner = [], [], []
    for w_idx, word in enumerate(words):
        box = normalize_box(word.box, page_width, page_height, m).as_tuple()
        for tid in tokenizer.tokenize_word(word.text):
            ids.append(tid)
            boxes.append(box)
            owner.append(w_idx)
    return ids, boxes, owner


def tokenize_page(words, tokenizer, page_width, page_height, *, m=DEFAULT_GRID,
                  max_len=DEFAULT_MAX_LEN, source_id="", page_number=0):
    """Build a :class:`PageDocument` with ``[CLS]`` / ``[SEP]`` and truncation to ``max_len``."""
    if max_len < 2:
        raise ValueError("max_len must leave room for [CLS] and [SEP]")
    vocab = tokenizer.vocab
    ids, boxes, _ = tokenize_words(words, tokenizer, page_width, page_height, m)
    ids, boxes = ids[: max_len - 2], boxes[: max_len - 2]
    token_ids = np.array([vocab.cls_id] + ids + [vocab.sep_id], dtype=np.int64)
    all_boxes = np.array([(0, 0, 0, 0)] + boxes + [(m, m, m, m)], dtype=np.int64).reshape(-1, 4)
    return PageDocument(source_id, page_width, page_height, token_ids, all_boxes, page_number)


# ------------------------------------------------------------------ manifest / corpus files


@dataclass(frozen=True)
class ManifestRow:
    source_id: str
    page_number: int
    byte_size: int
    kept: bool

    def line(self):
        status = "kept" if self.kept else "dropped"
        return f"{self.source_id}\t{self.page_number}\t{self.byte_size}\t{status}"


MANIFEST_HEADER = "#source_id\tpage\tbytes\tstatus"


def build_manifest(rows):
    """Render manifest rows as sorted, tab-separated text."""
    ordered = sorted(rows, key=lambda r: (r.source_id, r.page_number))
    return "\n".join([MANIFEST_HEADER] + [r.line() for r in ordered]) + "\n"


def read_manifest(text):
    rows = []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        source_id, page, size, status = line.split("\t")
        if status not in ("kept", "dropped"):
            raise ValueError(f"bad manifest status {status!r}")
        rows.append(ManifestRow(source_id, int(page), int(size), status == "kept"))
    return rows


def kept_set(rows):
    return {(r.source_id, r.page_number) for r in rows if r.kept}


def write_corpus(pages, path):
    with open(path, "w", encoding="utf-8") as fh:
        for page in pages:
            fh.write(json.dumps(page.to_record(), separators=(",", ":")) + "\n")


def read_corpus(path):
    with open(path, encoding="utf-8") as fh:
        return [PageDocument.from_record(json.loads(line)) for line in fh if line.strip()]


@dataclass
class IngestResult:
    pages: list = field(default_factory=list)
    manifest: list = field(default_factory=list)
    skipped_words: int = 0


HOCR_SUFFIXES = (".hocr", ".html", ".htm", ".xhtml")


def _ingest_file(args):
    path, tokenizer, min_bytes, m, max_len = args
    data = Path(path).read_bytes()
    source_id = Path(path).stem
    size = len(data)
    if size < min_bytes:
        return [ManifestRow(source_id, 0, size, False)], [], 0
    rows, pages, skipped = [], [], 0
    for number, hp in enumerate(parse_hocr(data)):
        skipped += hp.skipped
        rows.append(ManifestRow(source_id, number, size, True))
        pages.append(tokenize_page(hp.words, tokenizer, hp.width, hp.height, m=m,
                                   max_len=max_len, source_id=source_id, page_number=number))
    if not rows:
        rows.append(ManifestRow(source_id, 0, size, False))
    return rows, pages, skipped


def ingest_directory(input_dir, tokenizer, *, min_bytes=DEFAULT_MIN_BYTES, m=DEFAULT_GRID,
                     max_len=DEFAULT_MAX_LEN, workers=1):
    """Ingest every hOCR file under ``input_dir`` in sorted filename order."""
    files = sorted(p for p in Path(input_dir).iterdir()
                   if p.is_file() and p.suffix.lower() in HOCR_SUFFIXES)
    jobs = [(p, tokenizer, min_bytes, m, max_len) for p in files]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_ingest_file, jobs))
    else:
        results = [_ingest_file(j) for j in jobs]
    out = IngestResult()
    for rows, pages, skipped in results:
        out.manifest.extend(rows)
        out.pages.extend(pages)
        out.skipped_words += skipped
    out.pages.sort(key=lambda p: (p.source_id, p.page_number))
    return out
