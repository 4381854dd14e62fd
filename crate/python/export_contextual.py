"""Fill the contextual embedding cache read by the `contextual` backend.

For every distinct query and response in the given pair files, runs the
transformer and stores the final-layer token vectors (special tokens
dropped) under

    <cache-dir>/contextual-<model>-<dim>/<sha256(text)>.vec

as little-endian u32 token count, u32 dim, then count*dim f32 values.

    python python/export_contextual.py --model bert-base-uncased \
        --cache-dir cache data/pairs.train.jsonl data/pairs.test.jsonl
"""

import argparse
import hashlib
import json
import os
import re
import struct
import sys
import tempfile

import numpy as np
import torch
from transformers import AutoModel, AutoTokenizer


def backend_id(model, dim):
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", model)
    return f"contextual-{safe}-{dim}"


def read_texts(paths):
    texts = set()
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                pair = json.loads(line)
                for key in ("query", "response"):
                    text = pair[key].strip()
                    if text:
                        texts.add(text)
    return sorted(texts)


def write_entry(path, vectors):
    count, dim = vectors.shape
    payload = struct.pack("<II", count, dim) + vectors.astype("<f4").tobytes()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("pairs", nargs="+", help="pair files (JSON lines)")
    ap.add_argument("--model", default="bert-base-uncased")
    ap.add_argument("--cache-dir", required=True)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--max-length", type=int, default=128)
    ap.add_argument("--device", default="cpu")
    args = ap.parse_args(argv)

    tok = AutoTokenizer.from_pretrained(args.model)
    model = AutoModel.from_pretrained(args.model).to(args.device).eval()
    dim = model.config.hidden_size
    out_dir = os.path.join(args.cache_dir, backend_id(args.model, dim))
    os.makedirs(out_dir, exist_ok=True)

    texts = read_texts(args.pairs)
    todo = []
    for t in texts:
        path = os.path.join(out_dir, hashlib.sha256(t.encode("utf-8")).hexdigest() + ".vec")
        if not os.path.exists(path):
            todo.append((t, path))
    print(f"{len(texts)} texts, {len(texts) - len(todo)} cached, {len(todo)} to embed", file=sys.stderr)

    with torch.no_grad():
        for start in range(0, len(todo), args.batch_size):
            batch = todo[start : start + args.batch_size]
            enc = tok(
                [t for t, _ in batch],
                padding=True,
                truncation=True,
                max_length=args.max_length,
                return_tensors="pt",
                return_special_tokens_mask=True,
            )
            special = enc.pop("special_tokens_mask")
            hidden = model(**{k: v.to(args.device) for k, v in enc.items()}).last_hidden_state.cpu().numpy()
            keep = (enc["attention_mask"] == 1) & (special == 0)
            for i, (_, path) in enumerate(batch):
                vecs = hidden[i][keep[i].numpy()]
                if len(vecs) == 0:
                    vecs = np.zeros((0, dim), dtype=np.float32)
                write_entry(path, vecs)
    print(f"wrote {len(todo)} entries to {out_dir}", file=sys.stderr)


if __name__ == "__main__":
    main()
