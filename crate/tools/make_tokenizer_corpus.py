"""Build the tokenizer parity corpus and its reference ids.

Writes assets/tokenizer-parity/corpus.jsonl with one {"text", "ids"} object
per line. Ids come from the Hugging Face `tokenizers` byte-level BPE loaded
from the bundled GPT-2 vocab.json / merges.txt, and are cross-checked against
a straight port of the original GPT-2 encoder (python `regex` pre-tokenizer).

Usage: python3 tools/make_tokenizer_corpus.py
"""

import inspect
import json
import pathlib
import random

import regex
from tokenizers import Tokenizer, decoders, models, pre_tokenizers

ROOT = pathlib.Path(__file__).resolve().parent.parent
TOK_DIR = ROOT / "assets" / "gpt2-tokenizer"
OUT = ROOT / "assets" / "tokenizer-parity" / "corpus.jsonl"
N_LINES = 1000


def bytes_to_unicode():
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("¡"), ord("¬") + 1))
        + list(range(ord("®"), ord("ÿ") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


class OriginalEncoder:
    """Port of the published GPT-2 encoder.py (no cache)."""

    def __init__(self, encoder, merges):
        self.encoder = encoder
        self.byte_encoder = bytes_to_unicode()
        self.ranks = {tuple(m.split()): i for i, m in enumerate(merges)}
        self.pat = regex.compile(
            r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
        )

    def bpe(self, token):
        word = tuple(token)
        if len(word) < 2:
            return list(word)
        while True:
            pairs = {(word[i], word[i + 1]) for i in range(len(word) - 1)}
            best = min(pairs, key=lambda p: self.ranks.get(p, float("inf")))
            if best not in self.ranks:
                break
            first, second = best
            new_word = []
            i = 0
            while i < len(word):
                try:
                    j = word.index(first, i)
                except ValueError:
                    new_word.extend(word[i:])
                    break
                new_word.extend(word[i:j])
                i = j
                if word[i] == first and i < len(word) - 1 and word[i + 1] == second:
                    new_word.append(first + second)
                    i += 2
                else:
                    new_word.append(word[i])
                    i += 1
            word = tuple(new_word)
            if len(word) == 1:
                break
        return list(word)

    def encode(self, text):
        ids = []
        for token in regex.findall(self.pat, text):
            token = "".join(self.byte_encoder[b] for b in token.encode("utf-8"))
            ids.extend(self.encoder[t] for t in self.bpe(token))
        return ids


def natural_lines(rng):
    """Docstring lines from the Python standard library."""
    import collections
    import csv
    import fractions
    import functools
    import itertools
    import json as json_mod
    import pathlib as pathlib_mod
    import statistics
    import string
    import textwrap

    lines = []
    for mod in [
        collections,
        csv,
        fractions,
        functools,
        itertools,
        json_mod,
        pathlib_mod,
        statistics,
        string,
        textwrap,
        random,
        inspect,
    ]:
        for _, obj in inspect.getmembers(mod):
            doc = inspect.getdoc(obj)
            if not doc:
                continue
            for line in doc.splitlines():
                line = line.rstrip()
                if len(line) > 8:
                    lines.append(line)
    lines = sorted(set(lines))
    rng.shuffle(lines)
    return lines


EXOTIC = [
    "The Eiffel Tower is located in the city of",
    "Hello world",
    "  leading spaces and trailing   ",
    "tabs\tand\tmore\t\ttabs",
    "multi\nline\n\ntext with \n  indented continuation",
    "windows\r\nline endings\r\n",
    "I'm sure they'll say we've done it, isn't it? You'd think so.",
    "UPPER'S CASE'LL 'RE",
    "Numbers 12345 and 3.14159 and 1,000,000 and ½ ¾ ²",
    "Ünïcödé façade naïve café résumé",
    "日本語のテキストと中文字符",
    "Emoji 😀🎉👍🏽 and flags 🇫🇷",
    "Greek αβγ Δ Cyrillic Москва Arabic مرحبا",
    "non breaking em　ideographic spaces",
    "zero​width joiner‍ and combining é",
    "code: fn main() { println!(\"{}\", x + 1); }",
    "path/to/file.rs:42:7 -> error[E0599]",
    "email@example.com https://example.org/a?b=c&d=e#frag",
    "    ",
    " ",
    "x",
    "'s",
    "!!!???...;;;",
    "The American crow is a large passerine bird of the family",
    "The first bronchi to branch from the trachea are the right and left main",
]


def random_unicode_line(rng):
    pools = [
        "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ",
        "0123456789",
        " \t  \n",
        "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~",
        "éèêëàâäôöûüçñßøåæœ",
        "αβγδεζηθλμπσφψω",
        "中文日本語한국어",
        "😀🎉👍🔥🚀",
        "  　​́",
    ]
    n = rng.randint(1, 60)
    return "".join(rng.choice(rng.choice(pools)) for _ in range(n))


def main():
    rng = random.Random(20240611)
    vocab = TOK_DIR / "vocab.json"
    merges = TOK_DIR / "merges.txt"
    tok = Tokenizer(models.BPE.from_file(str(vocab), str(merges)))
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()

    encoder = json.loads(vocab.read_text(encoding="utf-8"))
    merge_lines = [
        m for m in merges.read_text(encoding="utf-8").split("\n")[1:] if m.strip()
    ]
    original = OriginalEncoder(encoder, merge_lines)

    lines = list(EXOTIC)
    natural = natural_lines(rng)
    n_random = 150
    lines.extend(natural[: N_LINES - len(lines) - n_random])
    while len(lines) < N_LINES:
        lines.append(random_unicode_line(rng))

    OUT.parent.mkdir(parents=True, exist_ok=True)
    disagreements = 0
    with OUT.open("w", encoding="utf-8") as f:
        for text in lines:
            ids = tok.encode(text).ids
            if ids != original.encode(text):
                disagreements += 1
                continue
            f.write(json.dumps({"text": text, "ids": ids}, ensure_ascii=False) + "\n")
    print(f"wrote {len(lines) - disagreements} lines, {disagreements} reference disagreements dropped")


if __name__ == "__main__":
    main()
