#!/usr/bin/env python3
"""Export the NLTK reuters corpus in the TSV format `pairrec prepare` reads.

Each line is `id<TAB>label,label,...<TAB>token token ...`. Documents keep all
their category labels; label filtering (for example to the 20 most frequent
categories) is done later by `pairrec prepare --top-labels`.

Requires the `nltk` package and, on first use, network access to fetch the
corpus. The document ids are the collection's own numeric ids, so the output
is stable across runs and machines.
"""

import argparse
import sys


def load_reuters(download_dir):
    try:
        import nltk
    except ImportError:
        sys.exit("nltk is not installed; run: pip install nltk")
    if download_dir:
        nltk.data.path.insert(0, download_dir)
    try:
        nltk.data.find("corpora/reuters.zip")
    except LookupError:
        if not nltk.download("reuters", download_dir=download_dir, quiet=True):
            sys.exit(
                "could not download the reuters corpus; check network access "
                "or pass --nltk-data pointing at an existing nltk_data tree"
            )
    from nltk.corpus import reuters

    return reuters


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--output", required=True, help="TSV file to write")
    parser.add_argument(
        "--nltk-data", default=None, help="directory to download/find nltk data in"
    )
    args = parser.parse_args()

    reuters = load_reuters(args.nltk_data)

    rows = []
    for fileid in reuters.fileids():
        doc_id = int(fileid.split("/")[1])
        labels = sorted(set(reuters.categories(fileid)))
        tokens = [w.lower() for w in reuters.words(fileid) if w.isalpha()]
        if not labels or not tokens:
            continue
        rows.append((doc_id, labels, tokens))
    rows.sort()

    with open(args.output, "w", encoding="utf-8") as out:
        for doc_id, labels, tokens in rows:
            out.write(f"{doc_id}\t{','.join(labels)}\t{' '.join(tokens)}\n")
    print(f"wrote {len(rows)} documents to {args.output}")


if __name__ == "__main__":
    main()
