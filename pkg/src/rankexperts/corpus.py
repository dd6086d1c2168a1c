"""Deterministic synthetic byte corpora from four distinguishable domains.

``markov_text`` plays the role of natural prose, ``arithmetic`` and
``keyvalue`` are narrow specialised formats, and ``uniform`` is iid noise.
Every stream is a pure function of ``(kind, seed, size)``.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

KINDS = ("markov_text", "arithmetic", "keyvalue", "uniform")

# Public-domain prose (Lewis Carroll, 1865; Jane Austen, 1813).
SEED_TEXT = """\
Alice was beginning to get very tired of sitting by her sister on the bank, and of having \
nothing to do: once or twice she had peeped into the book her sister was reading, but it had \
no pictures or conversations in it, and what is the use of a book, thought Alice, without \
pictures or conversations? So she was considering in her own mind, as well as she could, for \
the hot day made her feel very sleepy and stupid, whether the pleasure of making a daisy-chain \
would be worth the trouble of getting up and picking the daisies, when suddenly a White Rabbit \
with pink eyes ran close by her. There was nothing so very remarkable in that; nor did Alice \
think it so very much out of the way to hear the Rabbit say to itself, Oh dear! Oh dear! I shall \
be late! But when the Rabbit actually took a watch out of its waistcoat-pocket, and looked at it, \
and then hurried on, Alice started to her feet, for it flashed across her mind that she had never \
before seen a rabbit with either a waistcoat-pocket, or a watch to take out of it, and burning \
with curiosity, she ran across the field after it, and fortunately was just in time to see it \
pop down a large rabbit-hole under the hedge. In another moment down went Alice after it, never \
once considering how in the world she was to get out again. The rabbit-hole went straight on \
like a tunnel for some way, and then dipped suddenly down, so suddenly that Alice had not a \
moment to think about stopping herself before she found herself falling down a very deep well. \
Either the well was very deep, or she fell very slowly, for she had plenty of time as she went \
down to look about her and to wonder what was going to happen next. First, she tried to look \
down and make out what she was coming to, but it was too dark to see anything; then she looked \
at the sides of the well, and noticed that they were filled with cupboards and book-shelves; \
here and there she saw maps and pictures hung upon pegs. It is a truth universally acknowledged, \
that a single man in possession of a good fortune, must be in want of a wife. However little \
known the feelings or views of such a man may be on his first entering a neighbourhood, this \
truth is so well fixed in the minds of the surrounding families, that he is considered the \
rightful property of some one or other of their daughters. My dear Mr. Bennet, said his lady to \
him one day, have you heard that Netherfield Park is let at last? Mr. Bennet replied that he had \
not. But it is, returned she; for Mrs. Long has just been here, and she told me all about it. \
Mr. Bennet made no answer. Do you not want to know who has taken it? cried his wife impatiently. \
You want to tell me, and I have no objection to hearing it. This was invitation enough. Why, my \
dear, you must know, Mrs. Long says that Netherfield is taken by a young man of large fortune \
from the north of England; that he came down on Monday in a chaise and four to see the place, \
and was so much delighted with it, that he agreed with Mr. Morris immediately; that he is to \
take possession before Michaelmas, and some of his servants are to be in the house by the end \
of next week.
"""

_KV_PREFIX = ("DB", "HTTP", "CACHE", "LOG", "AUTH", "QUEUE", "WORKER", "API", "TLS", "METRICS")
_KV_FIELD = ("HOST", "PORT", "TIMEOUT", "RETRIES", "ENABLED", "LEVEL", "POOL_SIZE", "TOKEN_ID",
             "MAX_CONN", "REGION")


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    seed: int = 0
    size: int = 65536

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}; expected one of {KINDS}")
        if self.size < 1:
            raise ValueError("size must be >= 1")


def _rng(kind: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([KINDS.index(kind), int(seed)])


@lru_cache(maxsize=1)
def _markov_table():
    text = SEED_TEXT.replace("\n", " ").encode("ascii")
    followers = defaultdict(list)
    for i in range(len(text) - 2):
        followers[text[i:i + 2]].append(text[i + 2])
    # sorted keys keep the table independent of dict insertion details
    return text, {k: np.array(v, dtype=np.uint8) for k, v in sorted(followers.items())}


def _markov_text(rng, size):
    text, table = _markov_table()
    start = int(rng.integers(0, len(text) - 2))
    out = bytearray(text[start:start + 2])
    while len(out) < size:
        nxt = table.get(bytes(out[-2:]))
        if nxt is None:
            start = int(rng.integers(0, len(text) - 2))
            out += text[start:start + 2]
            continue
        out.append(int(nxt[rng.integers(0, len(nxt))]))
    return bytes(out[:size])


def _arithmetic(rng, size):
    out = bytearray()
    while len(out) < size:
        op = "+-*"[int(rng.integers(0, 3))]
        hi = 100 if op == "*" else 1000
        a, b = int(rng.integers(0, hi)), int(rng.integers(0, hi))
        res = a + b if op == "+" else a - b if op == "-" else a * b
        out += f"{a} {op} {b} = {res}\n".encode("ascii")
    return bytes(out[:size])


def _keyvalue(rng, size):
    out = bytearray()
    while len(out) < size:
        key = f"{_KV_PREFIX[rng.integers(0, len(_KV_PREFIX))]}_{_KV_FIELD[rng.integers(0, len(_KV_FIELD))]}"
        style = int(rng.integers(0, 4))
        if style == 0:
            val = str(int(rng.integers(1, 65536)))
        elif style == 1:
            val = ("true", "false")[int(rng.integers(0, 2))]
        elif style == 2:
            val = "0x" + "".join("0123456789ABCDEF"[d] for d in rng.integers(0, 16, 8))
        else:
            val = f"node{int(rng.integers(0, 64))}.zone{int(rng.integers(0, 8))}"
        out += f"{key}={val}\n".encode("ascii")
    return bytes(out[:size])


def generate(spec: DomainSpec) -> np.ndarray:
    """Byte stream (uint8 array) of exactly ``spec.size`` tokens."""
    rng = _rng(spec.kind, spec.seed)
    if spec.kind == "uniform":
        return rng.integers(0, 256, spec.size, dtype=np.uint8)
    maker = {"markov_text": _markov_text, "arithmetic": _arithmetic, "keyvalue": _keyvalue}[spec.kind]
    return np.frombuffer(maker(rng, spec.size), dtype=np.uint8).copy()


def split_point(size: int, holdout: float) -> int:
    """Index separating the calibration/training region from the held-out tail."""
    return int(round(size * (1.0 - holdout)))


def _draw_windows(tokens, n_sequences, seq_len, seed):
    slots = len(tokens) // seq_len
    if n_sequences > slots:
        raise ValueError(f"need {n_sequences} windows of {seq_len} but only {slots} fit")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(slots, size=n_sequences, replace=False))
    return [tokens[p * seq_len:(p + 1) * seq_len].copy() for p in picks]


def sample_calibration(spec: DomainSpec, n_sequences: int, seq_len: int, seed: int,
                       holdout: float = 0.2) -> list[np.ndarray]:
    """Non-overlapping windows drawn from the leading ``1 - holdout`` of the stream."""
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    stream = generate(spec)
    return _draw_windows(stream[:split_point(spec.size, holdout)], n_sequences, seq_len, seed)


def sample_heldout(spec: DomainSpec, n_sequences: int, seq_len: int, seed: int,
                   holdout: float = 0.2) -> list[np.ndarray]:
    """Windows from the held-out tail; never overlaps :func:`sample_calibration`."""
    stream = generate(spec)
    return _draw_windows(stream[split_point(spec.size, holdout):], n_sequences, seq_len, seed)


def unigram(tokens) -> np.ndarray:
    counts = np.bincount(np.asarray(tokens, dtype=np.int64), minlength=256).astype(np.float64)
    return counts / counts.sum()


def tv_distance(a, b) -> float:
    return 0.5 * float(np.abs(unigram(a) - unigram(b)).sum())


def export(spec: DomainSpec, path) -> Path:
    path = Path(path)
    path.write_bytes(generate(spec).tobytes())
    return path


def encode(text: str | bytes) -> np.ndarray:
    """Byte-level tokenizer; a bijection between byte strings and token arrays."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(text, dtype=np.uint8).astype(np.int64)


def decode(tokens) -> bytes:
    return bytes(np.asarray(tokens, dtype=np.uint8).tolist())
