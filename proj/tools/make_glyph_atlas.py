#!/usr/bin/env python3
"""Rasterize characters into a GLY1 glyph atlas (24x24 grayscale, 0 = ink).

Atlas layout (little-endian):
    b"GLY1" | u32 count | count * (u32 code point | 576 bytes row-major pixels)

Real atlases need a CJK font (a Fang-Song face such as simfang.ttf):

    python3 tools/make_glyph_atlas.py --font /path/to/simfang.ttf \
        --chars data/pinyin.tsv --out data/glyphs.gly

--synthetic draws deterministic stroke patterns per code point instead of
rendering a font. Those bitmaps carry character identity only; use them for
fixtures and smoke runs on machines without a CJK font.
"""
import argparse
import random
import struct
import sys

from PIL import Image, ImageDraw, ImageFont

SIZE = 24


def read_chars(paths):
    chars = set()
    for path in paths:
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if "\t" in line:
                    line = line.split("\t", 1)[0]
                chars.update(ch for ch in line if not ch.isspace())
    return sorted(chars)


def render_font(font, ch):
    img = Image.new("L", (SIZE, SIZE), 255)
    draw = ImageDraw.Draw(img)
    left, top, right, bottom = draw.textbbox((0, 0), ch, font=font)
    x = (SIZE - (right - left)) / 2 - left
    y = (SIZE - (bottom - top)) / 2 - top
    draw.text((x, y), ch, fill=0, font=font)
    return img.tobytes()


def render_synthetic(ch):
    rng = random.Random(ord(ch))
    img = Image.new("L", (SIZE, SIZE), 255)
    draw = ImageDraw.Draw(img)
    for _ in range(rng.randint(3, 7)):
        kind = rng.randrange(3)
        a, b = rng.randint(3, 20), rng.randint(3, 20)
        lo, hi = sorted((rng.randint(2, 21), rng.randint(2, 21)))
        if kind == 0:
            draw.line([(lo, a), (hi, a)], fill=rng.randint(0, 60), width=2)
        elif kind == 1:
            draw.line([(a, lo), (a, hi)], fill=rng.randint(0, 60), width=2)
        else:
            draw.line([(lo, a), (hi, b)], fill=rng.randint(0, 90), width=1)
    return img.tobytes()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--chars", nargs="+", required=True,
                    help="text/TSV files whose characters (first column) are rendered")
    ap.add_argument("--out", required=True)
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--font")
    src.add_argument("--synthetic", action="store_true")
    ap.add_argument("--font-size", type=int, default=22)
    args = ap.parse_args()

    chars = read_chars(args.chars)
    font = None if args.synthetic else ImageFont.truetype(args.font, args.font_size)
    with open(args.out, "wb") as f:
        f.write(b"GLY1")
        f.write(struct.pack("<I", len(chars)))
        blank = 0
        for ch in chars:
            pixels = render_synthetic(ch) if font is None else render_font(font, ch)
            assert len(pixels) == SIZE * SIZE
            if min(pixels) == 255:
                blank += 1
            f.write(struct.pack("<I", ord(ch)))
            f.write(pixels)
    print(f"wrote {len(chars)} glyphs to {args.out} ({blank} blank)", file=sys.stderr)


if __name__ == "__main__":
    main()
