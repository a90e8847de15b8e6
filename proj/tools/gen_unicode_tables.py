#!/usr/bin/env python3
"""Generates src/tokenizer/unicode_tables.inc.

Emits sorted [first, last] code point ranges for the three character
classes the GPT-2 pre-tokenizer pattern uses (\\p{L}, \\p{N}, \\s), as
classified by the same `regex` module the reference tokenizer uses.
"""

import pathlib
import sys

import regex


def ranges(pattern):
    rx = regex.compile(pattern)
    out = []
    start = None
    for cp in range(0x110000):
        if 0xD800 <= cp <= 0xDFFF:
            hit = False
        else:
            hit = rx.match(chr(cp)) is not None
        if hit and start is None:
            start = cp
        elif not hit and start is not None:
            out.append((start, cp - 1))
            start = None
    if start is not None:
        out.append((start, 0x10FFFF))
    return out


def emit(name, rs):
    lines = [f"inline constexpr CodepointRange {name}[] = {{"]
    for a, b in rs:
        lines.append(f"    {{0x{a:X}, 0x{b:X}}},")
    lines.append("};")
    return "\n".join(lines)


def main():
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1
                       else "src/tokenizer/unicode_tables.inc")
    parts = [
        "// Generated by tools/gen_unicode_tables.py. Do not edit.",
        f"// regex module {regex.__version__}",
        "",
        emit("kLetterRanges", ranges(r"\p{L}")),
        "",
        emit("kNumberRanges", ranges(r"\p{N}")),
        "",
        emit("kSpaceRanges", ranges(r"\s")),
        "",
    ]
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(parts))


if __name__ == "__main__":
    main()
