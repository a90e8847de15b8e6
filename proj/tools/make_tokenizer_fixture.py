#!/usr/bin/env python3
"""Writes tests/fixtures/tokenizer_reference.json.

Runs the Hugging Face slow GPT-2 tokenizer (pure Python reference BPE) on
the toy vocabulary and records the id sequences for a fixed set of
strings, plus per-document token counts for the toy corpus after a
minimal independent re-implementation of the cleaning rules.
"""

import json
import pathlib
import re

from transformers import GPT2Tokenizer

ROOT = pathlib.Path(__file__).resolve().parent.parent
VOCAB = ROOT / "data/toy/vocab"

CASES = [
    "",
    "The girl",
    "His wife",
    "Pride and Prejudice",
    "It is a truth universally acknowledged, that a single man in possession of a good fortune, must be in want of a wife.",
    "\"I cannot think of marriage,\" said Elinor, \"while my mother is so unwell.\"",
    "She's here; they're gone, we'll see. I'd've thought you'd know!",
    "  leading spaces and   inner runs\n\nof whitespace  \n",
    "Numbers 1817, 10000 pounds and 3.5 per cent",
    "Café naïve élève — résumé",
    "中文字符 and 日本語",
    "emoji \U0001F600 and symbols §¶†",
    "tab\tseparated\tvalues",
    "MIXED case WORDS and CamelCase",
    "'quoted' and 'S 'T apostrophes",
    "end with space ",
    "١٢٣ arabic digits ½",
]

START = re.compile(r"^\*\*\* ?START OF", re.I)
END = re.compile(r"^\*\*\* ?END OF", re.I)
PARATEXT = re.compile(r"\[(Illustration|Footnote)[^\]]*\]")


def clean(raw: str) -> str:
    text = raw.replace("\r\n", "\n").replace("\r", "\n")
    lines = text.split("\n")
    start = next(i for i, l in enumerate(lines) if START.match(l))
    end = next(i for i, l in enumerate(lines) if END.match(l))
    body = "\n".join(lines[start + 1:end])
    body = PARATEXT.sub("", body)
    out = []
    blank = False
    for line in body.split("\n"):
        line = line.rstrip(" \t")
        if line == "":
            blank = True
            continue
        if blank and out:
            out.append("")
        blank = False
        out.append(line)
    return "\n".join(out) + "\n"


def main():
    tok = GPT2Tokenizer(str(VOCAB / "vocab.json"), str(VOCAB / "merges.txt"))
    cases = [{"text": t, "ids": tok.encode(t)} for t in CASES]
    for c in cases:
        assert tok.decode(c["ids"]) == c["text"], c["text"]
    manifest = json.loads((ROOT / "data/toy/corpus/manifest.json").read_text())
    counts = {}
    for doc in manifest:
        raw = (ROOT / "data/toy/corpus" / doc["filename"]).read_text(encoding="utf-8")
        counts[doc["id"]] = len(tok.encode(clean(raw)))
    out = {"vocab_size": len(tok), "eot_id": tok.convert_tokens_to_ids("<|endoftext|>"),
           "cases": cases, "corpus_token_counts": counts}
    path = ROOT / "tests/fixtures/tokenizer_reference.json"
    path.write_text(json.dumps(out, indent=1, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main()
