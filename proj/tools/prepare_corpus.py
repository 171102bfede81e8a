#!/usr/bin/env python3
"""Build the desk corpus from the public-domain State of the Union addresses.

Input is the data/ directory of the @stdlib/datasets-sotu npm package (one
address per ``<year>_<name>_<party>.txt`` file). Output is one document per
blank-line-separated block: lowercased, punctuation split into separate
tokens, sentences grouped into documents of varying length so that the
short-text filter has something to remove.
"""

import argparse
import pathlib
import re

TARGET_WORDS = [24, 48, 96, 80, 140, 72, 110, 40, 160, 90]
PUNCT = re.compile(r"([.,;:!?()\[\]])")
SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def normalize(text):
    text = text.lower().replace("’", "'").replace("“", " ").replace("”", " ")
    text = text.replace('"', " ").replace("--", " ")
    text = PUNCT.sub(r" \1 ", text)
    return " ".join(text.split())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("sotu_dir")
    ap.add_argument("out")
    ap.add_argument("--first-year", type=int, default=1790)
    ap.add_argument("--last-year", type=int, default=1829)
    args = ap.parse_args()

    docs = []
    turn = 0
    for path in sorted(pathlib.Path(args.sotu_dir).glob("*.txt")):
        year = int(path.name[:4])
        if not args.first_year <= year <= args.last_year:
            continue
        sentences = SENTENCE_END.split(path.read_text(encoding="utf-8").strip())
        current = []
        for sentence in sentences:
            current.extend(normalize(sentence).split())
            if len(current) >= TARGET_WORDS[turn % len(TARGET_WORDS)]:
                docs.append(" ".join(current))
                current = []
                turn += 1
        if current:
            docs.append(" ".join(current))
            turn += 1

    pathlib.Path(args.out).write_text("\n\n".join(docs) + "\n", encoding="utf-8")
    print(f"{len(docs)} documents, {sum(len(d.split()) for d in docs)} tokens")


if __name__ == "__main__":
    main()
