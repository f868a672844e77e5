"""Byte-level corpus pipeline.

Vocabulary is the 256 byte values plus BOS/EOS/PAD (259 total). Documents
are blank-line-separated chunks of the input files (or single lines with
doc_sep="line"); each becomes [BOS, *bytes, EOS] and is routed to train or
validation by a seeded, content-keyed hash, so the split is deterministic
and leak-free at document granularity. Within each split the document
order is a seeded permutation: without it, clusters of atypical documents
(alphabetical file order puts all the codec tables of a source tree side
by side, say) recur at fixed epoch positions and make the validation curve
depend on where in the epoch a run happens to stop.

Batches are sequential windows over the token stream with epoch
wrap-around: window w covers tokens [w*T, w*T + T + 1) (inputs plus the
shifted-by-one targets), and batch k takes windows k*B .. k*B + B - 1.
Batch k is a pure function of (stream, spec, k) — resumable runs recompute
their position instead of replaying.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from incgpt.errors import DataError

VOCAB_SIZE = 259
BOS, EOS, PAD = 256, 257, 258

TOKEN_DTYPE = np.dtype("<u2")


@dataclass
class TokenStream:
    tokens: np.ndarray
    source_digest: str
    split: str
    n_docs: int

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int
    seq_len: int

    def __post_init__(self):
        if self.batch_size < 1 or self.seq_len < 1:
            raise DataError("batch_size and seq_len must be positive")

    @property
    def tokens_per_step(self):
        return self.batch_size * self.seq_len


def _split_documents(raw, doc_sep):
    """Chunks of a file's bytes, empties dropped.

    doc_sep "blank": documents are blank-line-separated (prose, source
    files); "line": every line is its own document (newline-delimited
    corpora).
    """
    sep = b"\n\n" if doc_sep == "blank" else b"\n"
    docs = []
    for chunk in raw.split(sep):
        chunk = chunk.strip(b"\n")
        if chunk:
            docs.append(chunk)
    return docs


def encode_document(doc):
    """[BOS, *bytes, EOS] as a token array."""
    out = np.empty(len(doc) + 2, dtype=TOKEN_DTYPE)
    out[0] = BOS
    out[1:-1] = np.frombuffer(doc, dtype=np.uint8)
    out[-1] = EOS
    return out


def _doc_goes_to_val(doc, seed, val_fraction):
    if val_fraction <= 0:
        return False
    h = hashlib.blake2b(doc, digest_size=8, salt=seed.to_bytes(8, "little"))
    u = int.from_bytes(h.digest(), "little") / 2.0**64
    return u < val_fraction


def _digest(tokens):
    return hashlib.sha256(tokens.astype(TOKEN_DTYPE).tobytes()).hexdigest()


def ingest(paths, val_fraction=0.1, seed=0, doc_sep="blank"):
    """Tokenize files into deterministic train/validation streams."""
    if not 0 <= val_fraction < 1:
        raise DataError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    if doc_sep not in ("blank", "line"):
        raise DataError(f"doc_sep must be 'blank' or 'line', got {doc_sep!r}")
    train_parts, val_parts = [], []
    n_train = n_val = 0
    for path in paths:
        raw = Path(path).read_bytes()
        for doc in _split_documents(raw, doc_sep):
            toks = encode_document(doc)
            if _doc_goes_to_val(doc, seed, val_fraction):
                val_parts.append(toks)
                n_val += 1
            else:
                train_parts.append(toks)
                n_train += 1
    if not train_parts:
        raise DataError("empty corpus: no non-empty documents found")
    rng = np.random.default_rng(seed)
    train_parts = [train_parts[i] for i in rng.permutation(len(train_parts))]
    if val_parts:
        val_parts = [val_parts[i] for i in rng.permutation(len(val_parts))]
    train_tokens = np.concatenate(train_parts)
    val_tokens = (np.concatenate(val_parts) if val_parts
                  else np.empty(0, dtype=TOKEN_DTYPE))
    return (
        TokenStream(train_tokens, _digest(train_tokens), "train", n_train),
        TokenStream(val_tokens, _digest(val_tokens), "val", n_val),
    )


class BatchCursor:
    """Random-access view of the stream as fixed-size (inputs, targets)
    batches; targets are inputs shifted by one position."""

    def __init__(self, stream, spec, seed=0):
        # seed is accepted for interface stability; batch order is the
        # deterministic sequential wrap-around described in the module doc
        if len(stream) < spec.tokens_per_step + 1:
            raise DataError(
                f"stream of {len(stream)} tokens too short for "
                f"{spec.tokens_per_step}-token batches"
            )
        self.stream = stream
        self.spec = spec
        self.windows_per_epoch = (len(stream) - 1) // spec.seq_len

    def epochs_completed(self, k):
        """Whole epochs consumed before batch k starts."""
        return (k * self.spec.batch_size) // self.windows_per_epoch

    def batch_at(self, k):
        B, T = self.spec.batch_size, self.spec.seq_len
        toks = self.stream.tokens
        inputs = np.empty((B, T), dtype=np.int64)
        targets = np.empty((B, T), dtype=np.int64)
        for r in range(B):
            pos = ((k * B + r) % self.windows_per_epoch) * T
            inputs[r] = toks[pos:pos + T]
            targets[r] = toks[pos + 1:pos + T + 1]
        return inputs, targets

    def iter_batches(self, start=0):
        k = start
        while True:
            yield self.batch_at(k)
            k += 1


def batches(stream, spec, seed=0):
    """Infinite iterator of (inputs, targets) batches from the start."""
    return BatchCursor(stream, spec, seed).iter_batches()


def save_cache(stream, stem):
    """Write <stem>.bin (little-endian u16 ids) and <stem>.json sidecar."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".bin").write_bytes(
        stream.tokens.astype(TOKEN_DTYPE).tobytes()
    )
    sidecar = {
        "digest": stream.source_digest,
        "vocab_size": VOCAB_SIZE,
        "split": stream.split,
        "n_docs": stream.n_docs,
        "dtype": TOKEN_DTYPE.str,
    }
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_cache(stem):
    """Load a cached stream, verifying the sidecar digest."""
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    tokens = np.frombuffer(stem.with_suffix(".bin").read_bytes(),
                           dtype=np.dtype(meta["dtype"])).copy()
    stream = TokenStream(tokens, meta["digest"], meta["split"], meta["n_docs"])
    if _digest(tokens) != meta["digest"]:
        raise DataError(f"token cache {stem} does not match its digest")
    return stream


def ingest_to_dir(paths, out_dir, val_fraction=0.1, seed=0, doc_sep="blank"):
    """Ingest and cache both splits under out_dir; returns the streams."""
    train, val = ingest(paths, val_fraction, seed, doc_sep)
    out = Path(out_dir)
    save_cache(train, out / "train")
    save_cache(val, out / "val")
    return train, val
