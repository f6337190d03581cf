#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Independent re-implementation of the offline pipeline (mock LLM, mock encoder,
co-occurrence CF, adaptive fusion, metrics) used to freeze the golden report.

    golden_pipeline.py write  <data_dir>     # (re)generate golden_report.json
    golden_pipeline.py check  <data_dir>     # recompute and compare with the frozen file

Everything is plain sequential Python; float32 storage is emulated with struct.
"""
import json
import math
import struct
import sys
from pathlib import Path

SEED = 42
DIM = 64
REVIEW_CAP = 10
HISTORY_MAX = 8
N_QUERIES = 10
KS = [5, 10]
HIT_DEPTH = 10
MASK64 = (1 << 64) - 1


# --- primitives -------------------------------------------------------------

def fnv1a64(data: bytes, basis=0xCBF29CE484222325):
    h = basis
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & MASK64
    return h


class SplitMix64:
    def __init__(self, seed):
        self.state = seed & MASK64

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def f32(x):
    return struct.unpack("<f", struct.pack("<f", x))[0]


def flat(s):
    return s.replace("\n", " ").replace("\r", " ")


# --- data -------------------------------------------------------------------

def read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def strings_of(v):
    if isinstance(v, str):
        return [v]
    if isinstance(v, list):
        out = []
        for e in v:
            out += strings_of(e)
        return out
    return []


def load_catalog(path):
    cat = {}
    for r in read_jsonl(path):
        brand = r.get("brand")
        cat[r["item_id"]] = {
            "title": r["title"],
            "brand": brand if isinstance(brand, str) and brand else "Unknown",
            "categories": strings_of(r.get("categories", [])),
            "description": " ".join(strings_of(r.get("description", ""))),
        }
    return cat


def split_users(rows):
    seqs = {}
    for r in rows:
        seqs.setdefault(r["user_id"], []).append(r)
    users = {}
    for u in sorted(seqs):
        seq = sorted(seqs[u], key=lambda r: r["timestamp"])  # stable
        if len(seq) < 3:
            users[u] = {"train": seq, "valid": None, "test": None}
        else:
            users[u] = {"train": seq[:-2], "valid": seq[-2], "test": seq[-1]}
    return users


def history(s, view):
    return s["train"] + ([s["valid"]] if view == "test" else [])


# --- prompts ----------------------------------------------------------------

ITEM_SYSTEM = (
    "You are an intelligent assistant designed to create detailed and precise search queries "
    "for items based on their descriptions and aggregated user reviews.\n"
    "Your task is to generate 10 distinct and comprehensive search queries that effectively "
    "help users find the specified item.\n"
    "Focus on incorporating key features, standout aspects, brand, and practical benefits into "
    "each query to enhance search accuracy.\n"
    "Emphasize the unique attributes that differentiate the item from similar products.\n"
    "Each query should be concise, factual, and separated by line breaks.")

USER_SYSTEM = (
    "You are an intelligent assistant designed to analyze a user's purchase history and "
    "behavior to generate **10 effective search queries** for predicting the **next items** "
    "they are most likely to purchase.\n"
    "Your task is to evaluate past purchase patterns, item metadata, and related search queries "
    "to construct concise and accurate search queries that can be used to find the next "
    "recommended items.\n"
    "Focus on identifying recurring patterns, shifts in preferences, and evolving interests to "
    "enhance the relevance of the search queries.\n"
    "For the most recent item, make sure to include **related queries** that were associated "
    "with it to improve search accuracy.\n"
    "Ensure each query highlights the **unique characteristics of items** and reflects the "
    "**user's preferences and interests** for more personalized recommendations.\n"
    "Ensure each query is clear, specific, and optimized for retrieving relevant items.")


def item_prompt(m, reviews):
    reviews = reviews[-REVIEW_CAP:]
    lines = [
        "### Task:",
        "Analyze the provided item metadata and user reviews to generate 10 detailed and "
        "objective search queries for the item.",
        "Your goal is to create queries that highlight the item's key features, benefits, and "
        "unique aspects based on its description and user feedback.",
        "",
        "### Input:",
        "- **Item Title**: " + flat(m["title"]),
        "- **Brand**: " + flat(m["brand"]),
        "- **Categories**: " + flat(", ".join(m["categories"])),
        "- **Description**: " + flat(m["description"]),
        "- **User Reviews**:",
    ]
    lines += [f"{i + 1}. {flat(r)}" for i, r in enumerate(reviews)]
    lines += [
        "", "",
        "### Requirements:",
        "- Generate exactly 10 distinct search queries, each on a **separate line**.",
        "- Incorporate key metadata and review insights to create effective, descriptive queries.",
        "- Highlight the item's purpose, standout features, brand, and practical benefits in each query.",
        "- Emphasize the **unique attributes that differentiate the item from other similar products**.",
        "- Avoid redundant details and ensure each query is unique and precise.",
        "",
        "### Response:",
        "",
    ]
    return ITEM_SYSTEM, "\n".join(lines)


def entry_block(m, review):
    return (f"**Title:** `{flat(m['title'])}`\n"
            f"**Brand:** {flat(m['brand'])}\n"
            f"**Categories:** {flat(', '.join(m['categories']))}\n"
            f"**User Review:**\n{flat(review)}\n\n")


def user_prompt(entries, last_queries):
    entries = entries[-HISTORY_MAX:]
    hist = "".join(entry_block(m, r) for m, r in entries[:-1])
    hist += "This is the most recently purchased product:\n"
    hist += entry_block(*entries[-1])
    related = ""
    if last_queries:
        related = "**Related Queries:**\n" + "".join(f"{i + 1}. {flat(q)}\n" for i, q in enumerate(last_queries))
    text = (
        "### Task:\n"
        "You are an intelligent assistant tasked with generating **10 optimized search queries** "
        "to predict the **next items** a user is likely to purchase based on their chronological "
        "purchase history, item metadata, and related search queries.\n\n"
        "**Purchase History:** A chronological list of items the user has purchased, including "
        "item brands, categories, descriptions, associated metadata, and related search queries. "
        "For the **most recent item**, related queries are also provided to enhance search "
        "relevance.\n\n\n"
        "### Output Format:\n"
        "Your response should follow this exact format, ensuring:\n"
        "1. Each search query is presented on a **separate line**.\n"
        "2. **No newlines or additional formatting** within each query.\n"
        "3. The queries should be concise, specific, and optimized for accurate item retrieval.\n\n\n"
        "### Requirements:\n"
        "- Generate **10 precise search queries** based on the user's purchase history, item "
        "metadata, and related search queries.\n"
        "- For the **most recent item**, ensure that **related queries** are incorporated to "
        "improve relevance.\n"
        "- Ensure each query captures key patterns, preferences, and interests derived from the "
        "provided data.\n"
        "- **Highlight the unique characteristics of items** (e.g., special features, distinctive "
        "attributes) and reflect the **user's preferences and behavioral trends** in the "
        "queries.\n"
        "- Do **not** include explanations, introductions, or follow-up comments.\n"
        "- Keep each query **clear, concise, and limited to a single line**.\n\n\n"
        "### Input:\n" + hist + related + "\n### Output:\n")
    return USER_SYSTEM, text


# --- mock LLM and parsing -----------------------------------------------------

TEMPLATES = ["best", "affordable", "durable", "top rated", "gift idea", "premium", "compact",
             "popular", "reliable", "everyday"]


def tokens(title):
    out, cur = [], ""
    for ch in title:
        c = ch.lower() if "A" <= ch <= "Z" else ch
        if "a" <= c <= "z" or "0" <= c <= "9":
            cur += c
        elif cur:
            out.append(cur)
            cur = ""
    if cur:
        out.append(cur)
    return out


def add_unique(pool, toks):
    for t in toks:
        if t not in pool:
            pool.append(t)


def mock_complete(system, user):
    titles = []
    for line in user.split("\n"):
        if line.startswith("- **Item Title**: "):
            titles.append(line[len("- **Item Title**: "):])
        elif line.startswith("**Title:** `") and len(line) > len("**Title:** `") and line.endswith("`"):
            titles.append(line[len("**Title:** `"):-1])
    all_pool, last_pool = [], []
    for t in titles:
        add_unique(all_pool, tokens(t))
    if titles:
        add_unique(last_pool, tokens(titles[-1]))
    if not all_pool or not last_pool:
        return "### I could not find an item to write queries for."
    rng = SplitMix64(fnv1a64((str(SEED) + "\x1f" + system + "\x1e" + user).encode("utf-8")))
    lines = []
    for j in range(N_QUERIES):
        tmpl = TEMPLATES[rng.next() % len(TEMPLATES)]
        a = last_pool[rng.next() % len(last_pool)]
        b = last_pool[rng.next() % len(last_pool)]
        c = all_pool[rng.next() % len(all_pool)]
        d = all_pool[rng.next() % len(all_pool)]
        lines.append(f"{j + 1}. **{tmpl} {a} {b} {c} {d}**")
    return "\n".join(lines)


def parse_queries(raw):
    out = []
    for line in raw.split("\n"):
        line = line.strip(" \t\r\n")
        if not line or line.startswith("#"):
            continue
        i = 0
        while i < len(line) and line[i].isdigit():
            i += 1
        if 0 < i < len(line) and line[i] in ".)":
            line = line[i + 1:]
        elif len(line) >= 2 and line[0] in "-*" and line[1] == " ":
            line = line[2:]
        line = line.strip(" \t\r\n")
        changed = True
        while changed:
            changed = False
            if len(line) >= 4 and line.startswith("**") and line.endswith("**"):
                line = line[2:-2].strip(" \t\r\n")
                changed = True
            if len(line) >= 2 and line[0] == '"' and line[-1] == '"':
                line = line[1:-1].strip(" \t\r\n")
                changed = True
        if line.strip('*_`"'):
            out.append(line)
        if len(out) == N_QUERIES:
            break
    assert out, raw
    return out


def meta_block(m):
    return (f"Title: {flat(m['title'])}\nBrand: {flat(m['brand'])}\n"
            f"Categories: {flat(', '.join(m['categories']))}\nDescription: {flat(m['description'])}")


def document(m, queries):
    return "\n".join([meta_block(m)] + [flat(q) for q in queries])


# --- encoder and retrieval --------------------------------------------------

def embed(text):
    basis = fnv1a64(("querec-embed:" + str(SEED)).encode())
    data = text.encode("utf-8").lower()  # ASCII-only lowering
    grams = [data[i:i + 3] for i in range(len(data) - 2)] if len(data) >= 3 else [data]
    acc = [0.0] * DIM
    for g in grams:
        h = fnv1a64(g, basis)
        acc[h % DIM] += -1.0 if (h >> 32) & 1 else 1.0
    norm = math.sqrt(sum(a * a for a in acc))
    return [f32(a / norm) for a in acc]


def renormalize(v):
    norm = math.sqrt(sum(x * x for x in v))
    return [f32(x / norm) for x in v]


def cosine_row(item_vec, user_vec):
    un = math.sqrt(sum(x * x for x in user_vec))
    return f32(sum(a * b for a, b in zip(item_vec, user_vec)) / un)


def topk(scores, ids, k, excluded):
    order = [i for i in range(len(ids)) if ids[i] not in excluded]
    order.sort(key=lambda i: (-scores[i], ids[i]))
    return [ids[i] for i in order[:k]]


def minmax(xs):
    lo, hi = min(xs), max(xs)
    if not hi > lo:
        return [0.5] * len(xs)
    return [(x - lo) / (hi - lo) for x in xs]


# --- metrics ----------------------------------------------------------------

def metrics(runs, targets, freqs, items):
    rep = {}
    users = [u for u in sorted(runs) if u in targets]
    for k in KS:
        hr = nd = 0.0
        for u in users:
            lst = runs[u]
            if targets[u] in lst[:k]:
                r = lst.index(targets[u]) + 1
                hr += 1.0
                nd += 1.0 / math.log2(r + 1)
        rep[f"hr_{k}"] = hr / len(users)
        rep[f"ndcg_{k}"] = nd / len(users)
    total = sum(freqs.values())
    nov = 0.0
    n = 0
    for u in sorted(runs):
        lst = runs[u][:10]
        if not lst:
            continue
        s = 0.0
        for i in lst:
            s += -math.log((freqs.get(i, 0) or 1) / total)
        nov += s / len(lst)
        n += 1
    rep["mean_novelty_10"] = nov / n
    counts = {}
    for u in sorted(runs):
        for i in runs[u][:10]:
            counts[i] = counts.get(i, 0) + 1
    xs = [float(counts.get(i, 0)) for i in items]
    mean = sum(xs) / len(xs)
    m2 = sum((x - mean) ** 2 for x in xs) / len(xs)
    m3 = sum((x - mean) ** 3 for x in xs) / len(xs)
    rep["skewness"] = m3 / m2 ** 1.5 if m2 > 0 else 0.0
    rep["n_users"] = len(users)
    return rep


# --- pipeline ---------------------------------------------------------------

def compute(data_dir):
    catalog = load_catalog(data_dir / "metadata.jsonl")
    rows = [r for r in read_jsonl(data_dir / "interactions.jsonl") if r["item_id"] in catalog]
    users = split_users(rows)
    evaluated = [u for u in users if users[u]["test"] is not None]
    items = sorted(catalog)

    # item queries: training reviews, oldest first
    reviews = {i: [] for i in items}
    for u in users:
        for r in users[u]["train"]:
            if r.get("review"):
                reviews[r["item_id"]].append(r)
    item_queries = {}
    for i in items:
        revs = [r["review"] for r in sorted(reviews[i], key=lambda r: r["timestamp"])]
        item_queries[i] = parse_queries(mock_complete(*item_prompt(catalog[i], revs)))

    index = [renormalize(embed(document(catalog[i], item_queries[i]))) for i in items]

    def scores_for(view):
        llm, cf_rows = {}, {}
        co = {}
        for u in users:
            distinct = sorted(set(r["item_id"] for r in users[u]["train"]))
            for a in distinct:
                for b in distinct:
                    if a != b:
                        co[(a, b)] = co.get((a, b), 0) + 1
        for u in evaluated:
            h = history(users[u], view)
            last = h[-1]["item_id"]
            q = parse_queries(mock_complete(*user_prompt(
                [(catalog[r["item_id"]], r.get("review", "")) for r in h], item_queries[last])))
            uvec = embed(document(catalog[last], q))
            llm[u] = [cosine_row(row, uvec) for row in index]
            hist = set(r["item_id"] for r in h)
            cf_rows[u] = [f32(float(sum(co.get((j, i), 0) for j in hist if j != i))) for i in items]
        return llm, cf_rows

    llm_v, cf_v = scores_for("valid")
    llm_t, cf_t = scores_for("test")

    excl = {v: {u: set(r["item_id"] for r in history(users[u], v)) for u in evaluated} for v in ("valid", "test")}
    t_valid = {u: users[u]["valid"]["item_id"] for u in evaluated}
    t_test = {u: users[u]["test"]["item_id"] for u in evaluated}

    def hits(scores, view, targets):
        return {u for u in evaluated if targets[u] in topk(scores[u], items, HIT_DEPTH, excl[view][u])}

    h_llm = hits(llm_v, "valid", t_valid)
    h_cf = hits(cf_v, "valid", t_valid)
    hr_llm = len(h_llm) / len(evaluated)
    hr_cf = len(h_cf) / len(evaluated)
    lam_init = hr_llm / (hr_llm + hr_cf) if hr_llm + hr_cf > 0 else 0.5
    union = h_llm | h_cf
    omega = len(h_llm & h_cf) / len(union) if union else 0.0
    lam = omega * lam_init + (1.0 - omega) * 0.5

    fused = {}
    for u in evaluated:
        a, b = minmax(llm_t[u]), minmax(cf_t[u])
        fused[u] = topk([lam * x + (1.0 - lam) * y for x, y in zip(a, b)], items, 10, excl["test"][u])
    llm_runs = {u: topk(llm_t[u], items, 10, excl["test"][u]) for u in evaluated}
    cf_runs = {u: topk(cf_t[u], items, 10, excl["test"][u]) for u in evaluated}

    freqs = {}
    for u in users:
        for r in users[u]["train"]:
            freqs[r["item_id"]] = freqs.get(r["item_id"], 0) + 1

    return {
        "config": {"seed": SEED, "dimension": DIM, "fusion": "adaptive", "cf": "cooccurrence"},
        "diagnostics": {"lambda_init": lam_init, "omega": omega, "lambda": lam,
                        "hit10_llm": hr_llm, "hit10_cf": hr_cf},
        "metrics": metrics(fused, t_test, freqs, items),
        "methods": {
            "llm": metrics(llm_runs, t_test, freqs, items),
            "cf": metrics(cf_runs, t_test, freqs, items),
            "fused": metrics(fused, t_test, freqs, items),
        },
    }


def close(a, b, tol=1e-12):
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(close(a[k], b[k], tol) for k in a)
    if isinstance(a, (int, float)) and not isinstance(a, bool):
        return abs(a - b) <= tol
    return a == b


def main(argv):
    if len(argv) != 3 or argv[1] not in ("write", "check"):
        print(__doc__)
        return 1
    data_dir = Path(argv[2])
    report = compute(data_dir)
    golden = data_dir / "golden_report.json"
    if argv[1] == "write":
        golden.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        return 0
    frozen = json.loads(golden.read_text())
    if not close(report, frozen):
        print("oracle no longer reproduces", golden)
        return 1
    print("oracle reproduces", golden)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
