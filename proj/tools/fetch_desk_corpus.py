#!/usr/bin/env python3
"""Fetch a public-domain text slice (the Gutenberg Shakespeare and Milton texts
bundled with the `shakespeare` sdist on PyPI) and write it as JSONL documents.

Each play is split on blank lines and paragraphs are grouped into documents of
roughly --doc-chars characters so the hash-based train/val/test split has
enough documents to work with.

    python3 tools/fetch_desk_corpus.py --out data/desk/corpus.jsonl
"""

import argparse
import io
import json
import pathlib
import tarfile
import urllib.request

SDIST = ("https://files.pythonhosted.org/packages/a4/45/"
         "699c3869c2590579d0ef89df3cbd28b17eb77a14dd9f1841c51cd7d4dc1c/"
         "shakespeare-0.6.tar.gz")


def documents(text, doc_chars):
    paragraphs = [p.strip() for p in text.replace("\r\n", "\n").split("\n\n")]
    current = []
    size = 0
    for p in paragraphs:
        if not p:
            continue
        current.append(p)
        size += len(p)
        if size >= doc_chars:
            yield "\n\n".join(current)
            current, size = [], 0
    if current:
        yield "\n\n".join(current)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/desk/corpus.jsonl")
    ap.add_argument("--sdist", default=None, help="local copy of the sdist")
    ap.add_argument("--doc-chars", type=int, default=2000)
    args = ap.parse_args()

    if args.sdist:
        blob = pathlib.Path(args.sdist).read_bytes()
    else:
        with urllib.request.urlopen(SDIST, timeout=120) as r:
            blob = r.read()

    out = pathlib.Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n_docs = 0
    n_chars = 0
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar, \
            out.open("w", encoding="utf-8") as f:
        members = sorted(
            (m for m in tar.getmembers()
             if "data/texts/" in m.name and m.name.endswith("_gut.txt")),
            key=lambda m: m.name)
        for m in members:
            text = tar.extractfile(m).read().decode("utf-8", errors="replace")
            for doc in documents(text, args.doc_chars):
                f.write(json.dumps({"text": doc}) + "\n")
                n_docs += 1
                n_chars += len(doc)
    print(f"wrote {n_docs} documents, {n_chars} characters to {out}")


if __name__ == "__main__":
    main()
