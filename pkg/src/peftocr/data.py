"""Synthetic mixed-style text-line corpus.

Lines are rendered from the 5x7 bitmap font in three styles (``printed``,
``handwritten``, ``scene``), split into train/val at 9:1 with balanced styles,
and accompanied by a disjoint test partition drawn from its own seed stream.

On disk a corpus directory holds::

    manifest.tsv   path<TAB>transcript<TAB>style<TAB>split, one record per line
    vocab.json     ordered character list (ids follow the specials)
    corpus.json    generation spec, seed and statistics
    images/*.pgm   binary 8-bit graymaps (P5)

All pixel math is integer-only and every random draw comes from
:class:`~peftocr.rng.SplitMix64`, so a (spec, seed) pair reproduces the same
bytes on any platform.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, GenerationError, ManifestError, VocabularyError
from .glyphs import CELL_H, CELL_W, CHARSET, glyph
from .rng import SplitMix64, derive_seed

STYLES = ("handwritten", "printed", "scene")
SPLITS = ("train", "val", "test")

IMAGE_HEIGHT = 32
PIXEL_SCALE = 4
ADVANCE = (CELL_W + 1) * PIXEL_SCALE  # 24 px per character slot
MARGIN_X = 4
MARGIN_Y = (IMAGE_HEIGHT - CELL_H * PIXEL_SCALE) // 2

# Handwritten jitter bounds in pixels, inclusive.  The shear bound is the
# horizontal offset of the top glyph row relative to the centre row.
JITTER_SHIFT = 1
JITTER_SHEAR = 1
# Scene perturbation bounds.
SCENE_NOISE = 32
SCENE_BACKGROUND = (0, 80)
SCENE_CONTRAST = (160, 256)  # multiplier numerator over 256
SCENE_STROKES = (1, 2)

UNK_PLACEHOLDER = "�"

_STREAM_MAIN, _STREAM_TEST, _STREAM_SPLIT = 0, 1, 2
_SPACE_ODDS = 6  # one position in six is a space where a space is allowed


# --------------------------------------------------------------------------- vocab


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)


class Vocabulary:
    PAD, BOS, EOS, UNK = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

    def __init__(self, chars: Sequence[str] = CHARSET):
        chars = list(chars)
        if len(set(chars)) != len(chars) or any(len(c) != 1 for c in chars):
            raise VocabularyError("vocabulary characters must be unique single characters")
        self.chars = chars
        self._index = {c: i + len(self.SPECIALS) for i, c in enumerate(chars)}

    def __len__(self) -> int:
        return len(self.chars) + len(self.SPECIALS)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.chars == other.chars

    def __hash__(self) -> int:
        return hash(tuple(self.chars))

    def id_of(self, ch: str) -> int:
        return self._index.get(ch, self.UNK)

    def to_json(self) -> str:
        return json.dumps({"specials": list(self.SPECIALS), "chars": self.chars}, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        payload = json.loads(text)
        if payload.get("specials") != list(cls.SPECIALS):
            raise VocabularyError("unexpected special-token layout in vocabulary file")
        return cls(payload["chars"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    return TokenSequence((vocab.BOS, *(vocab.id_of(c) for c in text), vocab.EOS))


def detokenize(tokens: TokenSequence | Iterable[int], vocab: Vocabulary) -> str:
    """Drop PAD/BOS/EOS, map UNK to U+FFFD."""
    ids = tokens.ids if isinstance(tokens, TokenSequence) else tokens
    offset = len(vocab.SPECIALS)
    out = []
    for t in ids:
        t = int(t)
        if t == vocab.UNK:
            out.append(UNK_PLACEHOLDER)
        elif t >= offset:
            if t - offset >= len(vocab.chars):
                raise VocabularyError(f"token id {t} outside vocabulary of size {len(vocab)}")
            out.append(vocab.chars[t - offset])
    return "".join(out)


# ------------------------------------------------------------------------ render


def image_width(max_chars: int) -> int:
    return 2 * MARGIN_X + max_chars * ADVANCE


def _stamp(img: np.ndarray, bitmap: np.ndarray, x0: int, y0: int, value: int, shear: int = 0) -> None:
    h, w = img.shape
    rows, cols = np.nonzero(bitmap)
    for r, c in zip(rows.tolist(), cols.tolist()):
        y = y0 + r * PIXEL_SCALE
        x = x0 + c * PIXEL_SCALE + (shear * (CELL_H // 2 - r)) // (CELL_H // 2)
        ya, yb = max(y, 0), min(y + PIXEL_SCALE, h)
        xa, xb = max(x, 0), min(x + PIXEL_SCALE, w)
        if ya < yb and xa < xb:
            img[ya:yb, xa:xb] = value


def _line(img: np.ndarray, x0: int, y0: int, x1: int, y1: int, value: int) -> None:
    """Integer Bresenham segment."""
    h, w = img.shape
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        if 0 <= x0 < w and 0 <= y0 < h:
            img[y0, x0] = value
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def render_line(text: str, style: str, seed: int, max_chars: int = 8) -> np.ndarray:
    """Render ``text`` as a ``32 x image_width(max_chars)`` uint8 image.

    Ink is bright on a dark background.  ``printed`` stamps each glyph at
    full intensity.  ``handwritten`` shifts every character by up to
    ``JITTER_SHIFT`` pixels in x and y, shears it so the top and bottom rows
    move up to ``JITTER_SHEAR`` pixels opposite ways, and varies its intensity in
    [170, 255].  ``scene`` starts from a printed line on a raised background,
    applies a contrast multiplier, adds uniform per-pixel noise in
    [-SCENE_NOISE, SCENE_NOISE] and draws one or two occluding strokes.
    """
    if style not in STYLES:
        raise GenerationError(f"unknown style {style!r}")
    if len(text) > max_chars:
        raise GenerationError(f"text of length {len(text)} exceeds max_chars={max_chars}")
    rng = SplitMix64(seed)
    width = image_width(max_chars)
    img = np.zeros((IMAGE_HEIGHT, width), dtype=np.int64)

    if style == "printed":
        for i, ch in enumerate(text):
            _stamp(img, glyph(ch), MARGIN_X + i * ADVANCE, MARGIN_Y, 255)
    elif style == "handwritten":
        for i, ch in enumerate(text):
            dx = rng.integers(-JITTER_SHIFT, JITTER_SHIFT)
            dy = rng.integers(-JITTER_SHIFT, JITTER_SHIFT)
            shear = rng.integers(-JITTER_SHEAR, JITTER_SHEAR)
            value = rng.integers(170, 255)
            _stamp(img, glyph(ch), MARGIN_X + i * ADVANCE + dx, MARGIN_Y + dy, value, shear)
    else:
        background = rng.integers(*SCENE_BACKGROUND)
        ink = rng.integers(150, 255)
        img[:] = background
        for i, ch in enumerate(text):
            _stamp(img, glyph(ch), MARGIN_X + i * ADVANCE, MARGIN_Y, ink)
        contrast = rng.integers(*SCENE_CONTRAST)
        img = 128 + ((img - 128) * contrast) // 256
        img += rng.integer_array(-SCENE_NOISE, SCENE_NOISE, img.size).reshape(img.shape)
        for _ in range(rng.integers(*SCENE_STROKES)):
            x0, x1 = rng.integers(0, width - 1), rng.integers(0, width - 1)
            y0, y1 = rng.integers(0, IMAGE_HEIGHT - 1), rng.integers(0, IMAGE_HEIGHT - 1)
            _line(img, x0, y0, x1, y1, rng.integers(0, 255))
    return np.clip(img, 0, 255).astype(np.uint8)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("expected a 2-D uint8 image")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5" or fields[3] != b"255":
        raise ManifestError(f"{path}: not an 8-bit binary graymap")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    return data.reshape(h, w).copy()


# ------------------------------------------------------------------------ corpus


@dataclass(frozen=True)
class CorpusSpec:
    line_count: int
    min_len: int = 3
    max_len: int = 8
    styles: tuple[str, ...] = STYLES
    seed: int = 0
    test_count: int | None = None  # defaults to the validation size

    def validate(self, *, require_all_styles: bool = True) -> None:
        if self.line_count < 10:
            raise ConfigurationError(f"line_count must be >= 10, got {self.line_count}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigurationError(f"bad length range [{self.min_len}, {self.max_len}]")
        unknown = set(self.styles) - set(STYLES)
        if unknown:
            raise ConfigurationError(f"unknown styles: {sorted(unknown)}")
        if require_all_styles and set(self.styles) != set(STYLES):
            raise ConfigurationError(f"style mix {list(self.styles)} must cover all of {list(STYLES)}")
        if not self.styles:
            raise ConfigurationError("style mix is empty")


@dataclass
class Record:
    record_id: str
    path: str
    transcript: str
    style: str
    split: str
    image: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass
class DatasetManifest:
    records: list[Record]
    seed: int
    spec: dict
    vocab: Vocabulary = field(default_factory=Vocabulary)
    root: Path | None = None

    def split(self, name: str) -> list[Record]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    @property
    def max_chars(self) -> int:
        return int(self.spec["max_len"])

    def statistics(self) -> dict:
        stats: dict = {}
        for split in SPLITS:
            rows = self.split(split)
            stats[split] = {
                "count": len(rows),
                "styles": {s: sum(r.style == s for r in rows) for s in STYLES},
                "characters": sum(len(r.transcript) for r in rows),
            }
        return stats

    def image(self, record: Record) -> np.ndarray:
        if record.image is not None:
            return record.image
        if self.root is None:
            raise ManifestError(f"record {record.record_id} has no image and no corpus root")
        record.image = read_pgm(self.root / record.path)
        return record.image

    def to_tsv(self) -> str:
        return "".join(f"{r.path}\t{r.transcript}\t{r.style}\t{r.split}\n" for r in self.records)

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        for r in self.records:
            write_pgm(out / r.path, self.image(r))
        (out / "manifest.tsv").write_text(self.to_tsv(), encoding="utf-8")
        self.vocab.save(out / "vocab.json")
        meta = {"seed": self.seed, "spec": self.spec, "statistics": self.statistics()}
        (out / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.root = out
        return out / "manifest.tsv"


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load a corpus from its directory or its ``manifest.tsv``."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    manifest_path = root / "manifest.tsv" if path.is_dir() else path
    if not manifest_path.exists():
        raise ManifestError(f"no manifest at {manifest_path}")
    meta_path = root / "corpus.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    vocab_path = root / "vocab.json"
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else Vocabulary()
    records = []
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{manifest_path}:{lineno}: expected 4 tab-separated fields")
        rel, transcript, style, split = parts
        if style not in STYLES:
            raise ManifestError(f"{manifest_path}:{lineno}: unknown style {style!r}")
        if split not in SPLITS:
            raise ManifestError(f"{manifest_path}:{lineno}: unknown split {split!r}")
        records.append(Record(Path(rel).stem, rel, transcript, style, split))
    spec = meta.get("spec") or {"max_len": max(len(r.transcript) for r in records)}
    return DatasetManifest(records, int(meta.get("seed", 0)), spec, vocab, root)


def _draw_transcript(rng: SplitMix64, min_len: int, max_len: int) -> str:
    letters = CHARSET.replace(" ", "")
    length = rng.integers(min_len, max_len)
    chars: list[str] = []
    for i in range(length):
        space_ok = 0 < i < length - 1 and chars[-1] != " "
        if space_ok and rng.below(_SPACE_ODDS) == 0:
            chars.append(" ")
        else:
            chars.append(letters[rng.below(len(letters))])
    return "".join(chars)


def _val_quota(style_counts: list[int], n_val: int) -> list[int]:
    """Spread validation slots so train counts stay within one of each other."""
    quota = [0] * len(style_counts)
    for _ in range(n_val):
        k = max(range(len(style_counts)), key=lambda s: (style_counts[s] - quota[s], -s))
        quota[k] += 1
    return quota


def _make_records(
    spec: CorpusSpec, count: int, stream: int, prefix: str, split: str | None, avoid: set[str]
) -> list[Record]:
    records = []
    for i in range(count):
        rng = SplitMix64(derive_seed(spec.seed, stream, i))
        text = _draw_transcript(rng, spec.min_len, spec.max_len)
        while text in avoid:
            text = _draw_transcript(rng, spec.min_len, spec.max_len)
        style = spec.styles[i % len(spec.styles)]
        rid = f"{prefix}{i:06d}"
        img = render_line(text, style, rng.next(), spec.max_len)
        records.append(Record(rid, f"images/{rid}.pgm", text, style, split or "", img))
    return records


def _build(spec: CorpusSpec) -> DatasetManifest:
    main = _make_records(spec, spec.line_count, _STREAM_MAIN, "r", None, set())
    n_val = round(spec.line_count / 10)
    by_style = {s: [r for r in main if r.style == s] for s in spec.styles}
    quota = _val_quota([len(v) for v in by_style.values()], n_val)
    split_rng = SplitMix64(derive_seed(spec.seed, _STREAM_SPLIT))
    for (style, rows), q in zip(by_style.items(), quota):
        order = split_rng.permutation(len(rows))
        val_ids = {rows[k].record_id for k in order[:q]}
        for r in rows:
            r.split = "val" if r.record_id in val_ids else "train"

    n_test = n_val if spec.test_count is None else spec.test_count
    seen = {r.transcript for r in main}
    test = _make_records(spec, n_test, _STREAM_TEST, "t", "test", seen)
    return DatasetManifest(main + test, spec.seed, asdict(spec) | {"styles": list(spec.styles)})


def build_corpus(spec: CorpusSpec, out_dir: str | Path | None = None) -> DatasetManifest:
    """Generate a balanced three-style corpus (and write it if ``out_dir`` is given)."""
    spec.validate(require_all_styles=True)
    manifest = _build(spec)
    if out_dir is not None:
        manifest.save(out_dir)
    return manifest


def build_pretrain_corpus(spec: CorpusSpec, out_dir: str | Path | None = None) -> DatasetManifest:
    """Printed-only corpus used to create the shared base checkpoint."""
    spec = CorpusSpec(**(asdict(spec) | {"styles": ("printed",)}))
    spec.validate(require_all_styles=False)
    manifest = _build(spec)
    if out_dir is not None:
        manifest.save(out_dir)
    return manifest
