#!/usr/bin/env python3
"""Assemble an English prose corpus from locally installed Python docstrings.

Each source module with enough docstring prose becomes one .txt document.
Output is deterministic for a given set of installed packages.

usage: build_desk_corpus.py OUT_DIR [--target-mb 12] [ROOT ...]
"""
import argparse
import ast
import hashlib
import os
import re
import sys

DEFAULT_ROOTS = ["/usr/local/lib/python3.10/dist-packages", "/usr/lib/python3.10"]
WORD = re.compile(r"[A-Za-z]{2,}")


def prose_ratio(text):
    letters = sum(len(w) for w in WORD.findall(text))
    return letters / max(1, len(text))


def docstrings(path):
    try:
        with open(path, "rb") as f:
            tree = ast.parse(f.read())
    except (SyntaxError, ValueError, UnicodeDecodeError, RecursionError):
        return []
    out = []
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
            doc = ast.get_docstring(node, clean=True)
            if doc and len(doc) >= 80 and prose_ratio(doc) > 0.6:
                out.append(doc.strip())
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("roots", nargs="*", default=DEFAULT_ROOTS)
    ap.add_argument("--target-mb", type=float, default=12.0)
    ap.add_argument("--min-doc", type=int, default=500)
    args = ap.parse_args()

    files = []
    for root in args.roots:
        for d, subdirs, names in os.walk(root):
            subdirs.sort()
            files.extend(os.path.join(d, n) for n in sorted(names) if n.endswith(".py"))
    seen = set()
    os.makedirs(args.out, exist_ok=True)
    total, count = 0, 0
    target = int(args.target_mb * 1e6)
    for path in files:
        parts = []
        for doc in docstrings(path):
            h = hashlib.sha1(doc.encode()).digest()
            if h not in seen:
                seen.add(h)
                parts.append(doc)
        text = "\n\n".join(parts)
        if len(text.encode()) < args.min_doc:
            continue
        count += 1
        with open(os.path.join(args.out, f"doc-{count:06d}.txt"), "w", encoding="utf-8") as f:
            f.write(text + "\n")
        total += len(text.encode()) + 1
        if total >= target:
            break
    print(f"{count} documents, {total} bytes from {len(files)} files", file=sys.stderr)


if __name__ == "__main__":
    main()
