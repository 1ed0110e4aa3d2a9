#!/usr/bin/env python3
"""Build the pinyin and POS lexicon files shipped under data/.

Per-character lookups are derived offline from pypinyin (most common reading,
TONE3 style with 5 for the neutral tone) and from the single-character entries
of jieba's dictionary (most frequent tag, collapsed onto a 28-tag set).

    python3 tools/make_lexicons.py --out data
"""
import argparse
import collections
import os
import re

import jieba
from pypinyin import Style, pinyin

TAGSET = [
    "a", "ad", "an", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l",
    "m", "n", "nr", "ns", "nt", "nz", "o", "p", "q", "r", "s", "t", "u", "v",
]

# Fine-grained jieba tags folded onto TAGSET; anything unlisted maps to itself
# when present in TAGSET and is dropped otherwise (UNK at lookup time).
FOLD = {
    "ag": "a", "z": "a", "zg": "a",
    "df": "d", "dg": "d",
    "mg": "m", "mq": "m",
    "ng": "n",
    "nrfg": "nr", "nrt": "nr",
    "rg": "r", "rr": "r", "rz": "r",
    "tg": "t",
    "ud": "u", "ug": "u", "uj": "u", "ul": "u", "uv": "u", "uz": "u", "y": "u",
    "vd": "v", "vg": "v", "vi": "v", "vn": "v", "vq": "v",
}

SYLLABLE = re.compile(r"^[a-z]+[1-5]$")


def single_char_tags():
    path = os.path.join(os.path.dirname(jieba.__file__), "dict.txt")
    best = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            word, freq, tag = line.split()
            if len(word) != 1:
                continue
            tag = FOLD.get(tag, tag)
            if tag not in TAGSET:
                continue
            freq = int(freq)
            if word not in best or freq > best[word][0]:
                best[word] = (freq, tag)
    return {ch: tag for ch, (_, tag) in best.items()}


def is_han(ch):
    cp = ord(ch)
    return 0x4E00 <= cp <= 0x9FFF or 0x3400 <= cp <= 0x4DBF


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data")
    args = ap.parse_args()

    tags = single_char_tags()
    chars = sorted(ch for ch in tags if is_han(ch))

    readings = {}
    for ch in chars:
        syl = pinyin(ch, style=Style.TONE3, neutral_tone_with_five=True)[0][0]
        syl = syl.replace("ü", "v")
        if SYLLABLE.match(syl):
            readings[ch] = syl

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "pinyin.tsv"), "w", encoding="utf-8", newline="\n") as f:
        for ch in chars:
            if ch in readings:
                f.write(f"{ch}\t{readings[ch]}\n")
    with open(os.path.join(args.out, "pos.tsv"), "w", encoding="utf-8", newline="\n") as f:
        for ch in chars:
            f.write(f"{ch}\t{tags[ch]}\n")
    with open(os.path.join(args.out, "tagset.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(TAGSET) + "\n")

    syllables = collections.Counter(readings.values())
    print(f"{len(chars)} characters, {len(readings)} with pinyin, "
          f"{len(syllables)} distinct syllables, {len(TAGSET)} tags")


if __name__ == "__main__":
    main()
