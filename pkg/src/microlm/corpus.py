"""Corpus handling: vocabulary, token streams, windows, and disk layout.

Token ids are 1-based and frequency-ordered: id 1 is the most frequent
token, ties broken lexicographically.  Streams are serialized as
little-endian uint32, one id per token, next to a JSON manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InputError

EOL = "<eol>"
UNK = "<unk>"

MANIFEST_NAME = "manifest.json"
VOCAB_NAME = "vocab.txt"


class Vocabulary:
    """Frequency-ordered token table; rank order defines the id order."""

    def __init__(self, tokens, counts=None):
        self.tokens = list(tokens)
        self.counts = list(counts) if counts is not None else [0] * len(self.tokens)
        self._ids = {tok: i + 1 for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise InputError("duplicate tokens in vocabulary")
        if UNK not in self._ids:
            raise InputError("vocabulary must contain the unknown token")

    @property
    def size(self):
        return len(self.tokens)

    @property
    def unk_id(self):
        return self._ids[UNK]

    def id_of(self, token):
        return self._ids.get(token, self._ids[UNK])

    def token_of(self, token_id):
        return self.tokens[token_id - 1]


def line_tokens(text):
    """Whitespace tokens with an end-of-line marker closing each line."""
    out = []
    for line in text.split("\n"):
        out.extend(line.split())
        out.append(EOL)
    # text.split leaves a phantom empty line after a trailing newline
    if text.endswith("\n"):
        out.pop()
    return out


def build_vocab(tokens):
    """Count tokens and order by (-count, token).

    The unknown token is appended with count 0 when absent so eval-time
    OOV tokens map inside the rarest frequency bin.
    """
    counts = {}
    for t in tokens:
        counts[t] = counts.get(t, 0) + 1
    counts.setdefault(UNK, 0)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([t for t, _ in ordered], [c for _, c in ordered])


def encode(tokens, vocab):
    """Token list -> 1-based id stream (uint32)."""
    return np.asarray([vocab.id_of(t) for t in tokens], dtype=np.uint32)


def decode(stream, vocab):
    return [vocab.token_of(int(i)) for i in stream]


def sample_training_windows(stream, extended_context, batch, rng,
                            return_starts=False):
    """Uniformly positioned windows of extended_context + 1 ids each."""
    n = len(stream)
    if n <= extended_context:
        raise InputError(
            f"stream of {n} tokens too short for extended context {extended_context}")
    starts = rng.integers(0, n - extended_context, size=batch)
    out = np.empty((batch, extended_context + 1), dtype=np.int64)
    for b, s in enumerate(starts):
        out[b] = stream[s:s + extended_context + 1]
    if return_starts:
        return out, starts
    return out


def sequential_eval_iter(stream, extended_context):
    """Non-overlapping evaluation windows tiling the stream.

    Yields (inputs, targets) with equal lengths; the h produced after
    reading inputs[j] is scored against targets[j].  Every target token
    in the stream appears exactly once across windows.
    """
    n = len(stream)
    if n < 2:
        raise InputError("evaluation stream needs at least 2 tokens")
    for s in range(0, n - 1, extended_context):
        stop = min(s + extended_context, n - 1)
        inputs = np.asarray(stream[s:stop], dtype=np.int64)
        targets = np.asarray(stream[s + 1:stop + 1], dtype=np.int64)
        yield inputs, targets


# --------------------------------------------------------------- disk IO


def save_corpus(out_dir, vocab, streams, extra=None):
    """Write vocab, per-split uint32 streams, and the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, VOCAB_NAME), "w", encoding="utf-8") as fh:
        for tok, cnt in zip(vocab.tokens, vocab.counts):
            fh.write(f"{tok}\t{cnt}\n")
    manifest = {
        "format": "microlm-corpus-v1",
        "vocab_file": VOCAB_NAME,
        "vocab_size": vocab.size,
        "splits": {},
    }
    if extra:
        manifest.update(extra)
    for split, ids in streams.items():
        fname = f"{split}.bin"
        arr = np.asarray(ids, dtype="<u4")
        arr.tofile(os.path.join(out_dir, fname))
        manifest["splits"][split] = {"file": fname, "tokens": int(arr.size)}
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_corpus(corpus_dir):
    """Read a corpus directory back into (vocab, streams, manifest)."""
    mpath = os.path.join(corpus_dir, MANIFEST_NAME)
    if not os.path.exists(mpath):
        raise InputError(f"no corpus manifest at {mpath}")
    with open(mpath, encoding="utf-8") as fh:
        manifest = json.load(fh)
    tokens, counts = [], []
    with open(os.path.join(corpus_dir, manifest["vocab_file"]), encoding="utf-8") as fh:
        for line in fh:
            tok, _, cnt = line.rstrip("\n").partition("\t")
            tokens.append(tok)
            counts.append(int(cnt) if cnt else 0)
    vocab = Vocabulary(tokens, counts)
    if vocab.size != manifest["vocab_size"]:
        raise InputError("vocab size disagrees with manifest")
    streams = {}
    for split, info in manifest["splits"].items():
        path = os.path.join(corpus_dir, info["file"])
        ids = np.fromfile(path, dtype="<u4")
        if ids.size != info["tokens"]:
            raise InputError(f"stream {split} truncated: {ids.size} != {info['tokens']}")
        if ids.size and (ids.min() < 1 or ids.max() > vocab.size):
            raise InputError(f"stream {split} contains ids outside [1, {vocab.size}]")
        streams[split] = ids
    return vocab, streams, manifest


# ------------------------------------------------------ synthetic corpus


@dataclass
class SyntheticSpec:
    """Zipf-with-recency text generator settings.

    The recency overlay re-emits a recently seen token with probability
    recency_p, which gives a neural cache something real to exploit.
    """
    tokens: int = 2_000_000
    vocab: int = 30_000
    zipf_s: float = 1.1
    recency_p: float = 0.35
    recency_window: int = 400
    line_words: int = 18
    seed: int = 1234


def synthetic_text(spec):
    """Deterministic synthetic corpus text for desk-scale runs."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    ranks = np.arange(1, spec.vocab + 1, dtype=np.float64)
    probs = ranks ** -spec.zipf_s
    probs /= probs.sum()
    base = rng.choice(spec.vocab, size=spec.tokens, p=probs).astype(np.int64)
    use_prev = rng.random(spec.tokens) < spec.recency_p
    gap = rng.integers(1, spec.recency_window + 1, size=spec.tokens)
    ids = kernels.recency_fill(base, use_prev, gap)
    width = len(str(spec.vocab))
    words = [f"w{r:0{width}d}" for r in range(spec.vocab)]
    lines = []
    for i in range(0, spec.tokens, spec.line_words):
        lines.append(" ".join(words[r] for r in ids[i:i + spec.line_words]))
    return "\n".join(lines) + "\n"


def prepare_splits(text, fractions=(0.9, 0.05, 0.05)):
    """Tokenize raw text and cut contiguous train/valid/test streams."""
    tokens = line_tokens(text)
    if len(tokens) < 10:
        raise InputError("corpus too small to split")
    n = len(tokens)
    n_train = int(n * fractions[0])
    n_valid = int(n * fractions[1])
    train = tokens[:n_train]
    valid = tokens[n_train:n_train + n_valid]
    test = tokens[n_train + n_valid:]
    vocab = build_vocab(train)
    streams = {
        "train": encode(train, vocab),
        "valid": encode(valid, vocab),
        "test": encode(test, vocab),
    }
    return vocab, streams
