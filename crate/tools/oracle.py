#!/usr/bin/env python3
"""Reference implementation of the hashing embedder and brute-force retrieval.

Used to freeze golden vectors and to cross-check recall figures for the
fixture corpus. Kept independent of the Rust code paths.
"""
import json
import math
import sys
from pathlib import Path

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK
    return h


def tokens(text: str):
    out, cur = [], []
    for ch in text.lower():
        if ch.isalnum():
            cur.append(ch)
        elif cur:
            out.append("".join(cur))
            cur = []
    if cur:
        out.append("".join(cur))
    return out


def features(tok: str):
    yield tok
    padded = "#" + tok + "#"
    for i in range(len(padded) - 2):
        yield padded[i : i + 3]


def embed(text: str, d: int = 256):
    v = [0.0] * d
    for tok in tokens(text):
        for f in features(tok):
            h = fnv1a64(f.encode("utf-8"))
            sign = -1.0 if (h >> 63) & 1 else 1.0
            v[h % d] += sign
    s = 0.0
    for x in v:
        s += x * x
    if s == 0.0:
        return v
    n = math.sqrt(s)
    return [x / n for x in v]


def cos(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    return max(-1.0, min(1.0, sum(x * y for x, y in zip(a, b)) / (na * nb)))


def rank(entries, q):
    scored = [(cos(vec, q), eid) for eid, vec in entries]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return scored


def load(corpus: Path):
    apis = [json.loads(l) for l in (corpus / "apis.jsonl").read_text().splitlines() if l.strip()]
    hb = [json.loads(l) for l in (corpus / "handbook.jsonl").read_text().splitlines() if l.strip()]
    api_entries = [(a["name"], embed(a["usage"])) for a in apis]
    hb_entries = [
        (p["task_id"], embed(" ".join(p["trigger_examples"] + [p["title"]]))) for p in hb
    ]
    return api_entries, hb_entries


def main():
    args = [a for a in sys.argv[1:] if not a.startswith("--")]
    corpus = Path(args[0] if args else "fixtures/corpus")
    api_entries, hb_entries = load(corpus)
    queries = [json.loads(l) for l in (corpus / "queries.jsonl").read_text().splitlines() if l.strip()]
    for target, entries in (("api", api_entries), ("handbook", hb_entries)):
        cases = [q for q in queries if q["target"] == target]
        row = []
        for k in (1, 3, 10):
            hits = 0
            for c in cases:
                top = [eid for _, eid in rank(entries, embed(c["query"]))[:k]]
                hits += any(r in top for r in c["relevant_ids"])
            row.append(hits / len(cases))
        print(target, len(cases), row)
    for q in ("scan the patient's thyroid",):
        print(q, rank(api_entries, embed(q))[:5])
    for q in ("please perform a liver ultrasound",):
        print(q, rank(hb_entries, embed(q))[:3])
    if "--golden" in sys.argv:
        print(json.dumps({"text": "thyroid", "dimension": 256, "values": embed("thyroid")}))


if __name__ == "__main__":
    main()


def check_triggers(corpus="fixtures/corpus"):
    _, hb_entries = load(Path(corpus))
    hb = [json.loads(l) for l in (Path(corpus) / "handbook.jsonl").read_text().splitlines() if l.strip()]
    for p in hb:
        for t in p["trigger_examples"]:
            top = rank(hb_entries, embed(t))[0][1]
            if top != p["task_id"]:
                print("trigger mismatch:", t, "->", top)
