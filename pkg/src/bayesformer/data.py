"""Synthetic sequence generators (M1/M2), MNIST IDX ingestion, CoNLL-U
parsing for POS tags, batching, and the binary cache for generated data."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError

SEED_LEN = 5
PRED_LEN = 24
PAD_ID = 0
UNK_ID = 1


class FormatError(ValueError):
    """A binary or text input file violates its format."""


class ParseError(FormatError):
    pass


# -- synthetic generators --------------------------------------------------------

M1_NOISE_VAR = 0.5
M2_NOISE_VAR = 0.1


def m1_conditional_mean(x):
    """sum_{i=0..4} 0.2 cos(0.4 pi i x + 1/(i+1)); the i=0 term is constant."""
    x = np.asarray(x, dtype=np.float64)
    total = np.zeros_like(x)
    for i in range(5):
        total = total + 0.2 * np.cos(0.4 * np.pi * i * x + 1.0 / (i + 1))
    return total


def m2_conditional_mean(history):
    """sum_{i=0..4} sum_{j=0..4} 0.5 cos(0.8 pi j X_{t-i}) over the last five
    values; `history` has shape (..., 5), most recent value last."""
    h = np.asarray(history, dtype=np.float64)
    if h.shape[-1] != 5:
        raise ContractError("M2 needs a 5-value history")
    total = np.zeros(h.shape[:-1])
    for j in range(5):
        total = total + 0.5 * np.cos(0.8 * np.pi * j * h).sum(axis=-1)
    return total


@dataclass
class ToyData:
    """Sequences as rows: 5 i.i.d. N(0,1) seed values then `pred_len` generated
    steps. True conditional means/variances are retained for the metrics."""

    generator: str                  # "m1" | "m2"
    values: np.ndarray              # (n, SEED_LEN + pred_len)
    cond_mean: np.ndarray           # (n, pred_len) mean of values[:, SEED_LEN + k]
    cond_var: float
    seed: int

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def pred_len(self) -> int:
        return self.values.shape[1] - SEED_LEN

    def subset(self, sl) -> "ToyData":
        return ToyData(self.generator, self.values[sl], self.cond_mean[sl],
                       self.cond_var, self.seed)

    def as_batches(self) -> dict:
        return {"values": self.values}


def _generate_toy(generator: str, n_sequences: int, seq_len: int, seed: int) -> ToyData:
    if seq_len < 1:
        raise ContractError("seq_len must be >= 1")
    rng = np.random.default_rng(seed)
    total = SEED_LEN + seq_len
    values = np.empty((n_sequences, total))
    cond_mean = np.empty((n_sequences, seq_len))
    values[:, :SEED_LEN] = rng.standard_normal((n_sequences, SEED_LEN))
    if generator == "m1":
        noise_sd = np.sqrt(M1_NOISE_VAR)
        for t in range(SEED_LEN, total):
            m = m1_conditional_mean(values[:, t - 1])
            cond_mean[:, t - SEED_LEN] = m
            values[:, t] = m + noise_sd * rng.standard_normal(n_sequences)
        var = M1_NOISE_VAR
    else:
        noise_sd = np.sqrt(M2_NOISE_VAR)
        for t in range(SEED_LEN, total):
            m = m2_conditional_mean(values[:, t - 5:t])
            cond_mean[:, t - SEED_LEN] = m
            values[:, t] = m + noise_sd * rng.standard_normal(n_sequences)
        var = M2_NOISE_VAR
    return ToyData(generator, values, cond_mean, var, seed)


def generate_m1(n_sequences: int, seq_len: int = PRED_LEN, seed: int = 0) -> ToyData:
    return _generate_toy("m1", n_sequences, seq_len, seed)


def generate_m2(n_sequences: int, seq_len: int = PRED_LEN, seed: int = 0) -> ToyData:
    return _generate_toy("m2", n_sequences, seq_len, seed)


def recompute_conditionals(generator: str, values: np.ndarray) -> np.ndarray:
    """Conditional means of values[:, SEED_LEN:] implied by the recurrence."""
    n, total = values.shape
    out = np.empty((n, total - SEED_LEN))
    for t in range(SEED_LEN, total):
        if generator == "m1":
            out[:, t - SEED_LEN] = m1_conditional_mean(values[:, t - 1])
        else:
            out[:, t - SEED_LEN] = m2_conditional_mean(values[:, t - 5:t])
    return out


# -- toy binary cache -------------------------------------------------------------

_TOY_MAGIC = b"BFTD"
_GEN_IDS = {"m1": 1, "m2": 2}
_GEN_NAMES = {v: k for k, v in _GEN_IDS.items()}


def save_toy_cache(path, data: ToyData) -> None:
    """Header (magic, generator id, n, total len, seed), then row-major
    little-endian float64 values."""
    with open(path, "wb") as f:
        f.write(_TOY_MAGIC)
        f.write(struct.pack("<BIIQ", _GEN_IDS[data.generator], data.n,
                            data.values.shape[1], data.seed))
        f.write(data.values.astype("<f8").tobytes())


def load_toy_cache(path) -> ToyData:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _TOY_MAGIC:
            raise FormatError(f"bad toy cache magic {magic!r} at offset 0")
        gen_id, n, total, seed = struct.unpack("<BIIQ", f.read(17))
        if gen_id not in _GEN_NAMES:
            raise FormatError(f"unknown generator id {gen_id} at offset 4")
        raw = f.read(n * total * 8)
        if len(raw) != n * total * 8:
            raise FormatError(f"truncated toy cache: expected {n * total * 8} bytes at offset 21")
    values = np.frombuffer(raw, dtype="<f8").reshape(n, total).astype(np.float64)
    gen = _GEN_NAMES[gen_id]
    cond = recompute_conditionals(gen, values)
    var = M1_NOISE_VAR if gen == "m1" else M2_NOISE_VAR
    return ToyData(gen, values, cond, var, int(seed))


def toy_split(data: ToyData, n_train: int = 800, n_val: int = 80,
              n_test: int = 80) -> tuple[ToyData, ToyData, ToyData]:
    if data.n < n_train + n_val + n_test:
        raise ContractError("not enough sequences for the requested split")
    return (data.subset(slice(0, n_train)),
            data.subset(slice(n_train, n_train + n_val)),
            data.subset(slice(n_train + n_val, n_train + n_val + n_test)))


# -- MNIST IDX --------------------------------------------------------------------

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def load_mnist_idx(images_path, labels_path):
    """Big-endian IDX pair -> (images in [0,1] with shape (n, 28, 28), labels)."""
    with open(images_path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise FormatError(f"truncated IDX image header in {images_path} at offset {len(head)}")
        magic, count, rows, cols = struct.unpack(">IIII", head)
        if magic != _IDX_IMAGE_MAGIC:
            raise FormatError(f"bad image magic 0x{magic:08x} at offset 0 (want 0x{_IDX_IMAGE_MAGIC:08x})")
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise FormatError(f"truncated IDX image data at offset {16 + len(raw)}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)

    with open(labels_path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise FormatError(f"truncated IDX label header in {labels_path} at offset {len(head)}")
        magic, lcount = struct.unpack(">II", head)
        if magic != _IDX_LABEL_MAGIC:
            raise FormatError(f"bad label magic 0x{magic:08x} at offset 0 (want 0x{_IDX_LABEL_MAGIC:08x})")
        raw = f.read(lcount)
        if len(raw) != lcount:
            raise FormatError(f"truncated IDX label data at offset {8 + len(raw)}")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if count != lcount:
        raise FormatError(f"image/label count mismatch: {count} vs {lcount}")
    if not np.all(labels < 10):
        raise FormatError("labels out of range 0-9")
    return images.astype(np.float64) / 255.0, labels


def mnist_split(train_images, train_labels, test_images, test_labels,
                n_train: int = 48000, n_val: int = 12000, n_test: int = 9984):
    """The fixed split: 48k/12k from the 60k file, first 9984 of the test file."""
    if len(train_images) < n_train + n_val:
        raise FormatError("training file too small for the 48000/12000 split")
    if len(test_images) < n_test:
        raise FormatError("test file too small for the 9984-item test set")
    tr = {"images": train_images[:n_train], "labels": train_labels[:n_train]}
    va = {"images": train_images[n_train:n_train + n_val],
          "labels": train_labels[n_train:n_train + n_val]}
    te = {"images": test_images[:n_test], "labels": test_labels[:n_test]}
    return tr, va, te


def generate_synthetic_images(n: int, seed: int = 0, side: int = 28):
    """10-class stand-in when the MNIST files are absent: each class lights a
    distinct pair of bands, plus pixel noise."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    images = rng.uniform(0.0, 0.25, size=(n, side, side))
    band = side // 7
    for c in range(10):
        rows = slice((c % 5) * band, (c % 5) * band + band)
        cols = slice((c // 5) * (side // 2), (c // 5) * (side // 2) + side // 2)
        sel = labels == c
        images[sel, rows, :] += 0.5
        images[sel, :, cols] += 0.25
    return np.clip(images, 0.0, 1.0), labels


# -- CoNLL-U ----------------------------------------------------------------------

UPOS_TAGS = ["ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
             "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X"]


def parse_conllu(path) -> list[list[tuple[str, str]]]:
    """Sentences as (form, UPOS) pairs. Comments and multiword/empty-node ids
    are skipped; everything else must have the 10 tab-separated columns."""
    sentences: list[list[tuple[str, str]]] = []
    current: list[tuple[str, str]] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                if current:
                    sentences.append(current)
                    current = []
                continue
            if line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 10:
                raise ParseError(f"line {lineno}: expected 10 columns, got {len(cols)}")
            if "-" in cols[0] or "." in cols[0]:
                continue
            current.append((cols[1], cols[3]))
    if current:
        sentences.append(current)
    return sentences


def write_conllu(sentences, path) -> None:
    """Minimal writer used for round-trip checks: only form and UPOS carry
    content, the other columns hold underscores."""
    with open(path, "w", encoding="utf-8") as f:
        for sent in sentences:
            for i, (form, upos) in enumerate(sent, start=1):
                cols = [str(i), form, "_", upos, "_", "_", "0", "_", "_", "_"]
                f.write("\t".join(cols) + "\n")
            f.write("\n")


def chunk_sentences(sentences, max_len: int = 40):
    """Split sentences longer than max_len into consecutive chunks."""
    out = []
    for sent in sentences:
        for i in range(0, len(sent), max_len):
            out.append(sent[i:i + max_len])
    return out


@dataclass
class PosVocab:
    tokens: dict[str, int]   # includes PAD=0, UNK=1
    tags: dict[str, int]

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def n_tags(self) -> int:
        return len(self.tags)


def build_pos_vocab(train_sentences) -> PosVocab:
    tokens = {"<pad>": PAD_ID, "<unk>": UNK_ID}
    tags: dict[str, int] = {}
    for sent in train_sentences:
        for form, upos in sent:
            if form not in tokens:
                tokens[form] = len(tokens)
            if upos not in tags:
                tags[upos] = len(tags)
    return PosVocab(tokens, tags)


def encode_pos(sentences, vocab: PosVocab, max_len: int = 40) -> dict:
    """Chunk, pad, and encode sentences into id/tag/mask arrays."""
    chunks = chunk_sentences(sentences, max_len)
    n = len(chunks)
    ids = np.full((n, max_len), PAD_ID, dtype=np.int64)
    tags = np.zeros((n, max_len), dtype=np.int64)
    mask = np.zeros((n, max_len), dtype=bool)
    for i, sent in enumerate(chunks):
        for j, (form, upos) in enumerate(sent):
            ids[i, j] = vocab.tokens.get(form, UNK_ID)
            if upos not in vocab.tags:
                raise ParseError(f"tag {upos!r} not present in training tagset")
            tags[i, j] = vocab.tags[upos]
            mask[i, j] = True
    return {"ids": ids, "tags": tags, "mask": mask}


# -- batching ---------------------------------------------------------------------


def batch_iter(n_items: int, batch_size: int, shuffle_seed=None):
    """Yield index arrays covering 0..n-1 exactly once; the final partial
    batch is emitted. A seed gives a deterministic shuffle, None keeps order."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if n_items < 1:
        raise ContractError("empty dataset")
    idx = np.arange(n_items)
    if shuffle_seed is not None:
        np.random.default_rng(int(shuffle_seed)).shuffle(idx)
    for start in range(0, n_items, batch_size):
        yield idx[start:start + batch_size]
