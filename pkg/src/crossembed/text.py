"""Title normalization and unigram-LM subword tokenization.

Titles are normalized (:func:`preprocess`), split into *chunks* (a word with
its optional leading space), and segmented by Viterbi decoding against a
:class:`Vocabulary` of pieces with log-probabilities. Training
(:func:`train_vocab`) seeds candidate pieces from frequent substrings, runs EM
with forward-backward over chunk lattices, and prunes the pieces whose removal
costs the least likelihood.

Multi-character pieces never contain a space except as their first
character, so a title's likelihood factorizes over its chunks.
"""

from __future__ import annotations

import math
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from crossembed.errors import ConfigError, DataError

PAD, UNK, BOS = 0, 1, 2
SPECIAL_TOKENS = ("<pad>", "<unk>", "<bos>")
ALLOWED_PUNCT = frozenset(" -.,/&%'")
MAX_LEN = 32

_CHUNK_RE = re.compile(r" ?[^ ]+| ")
_WS_RE = re.compile(r"\s+")


def preprocess(raw_title: str, typos: Optional[Mapping[str, str]] = None) -> str:
    """Normalize a raw title to lowercase ASCII.

    NFKC first (fullwidth forms, ligatures), then canonical decomposition with
    combining marks stripped so accented letters keep their base letter.
    Anything outside ``[a-z0-9]`` and ``ALLOWED_PUNCT`` is dropped and runs
    of whitespace collapse to one space. ``typos`` maps whole words to their
    corrections and is applied last.
    """
    text = unicodedata.normalize("NFKC", raw_title)
    text = "".join(c for c in unicodedata.normalize("NFKD", text) if not unicodedata.combining(c))
    text = _WS_RE.sub(" ", text).lower()
    text = "".join(c for c in text if (c.isascii() and c.isalnum()) or c in ALLOWED_PUNCT)
    text = _WS_RE.sub(" ", text).strip()
    if typos:
        text = " ".join(typos.get(w, w) for w in text.split(" "))
    return text


def chunks(text: str) -> list[str]:
    """Split into words with their leading space; ``"".join`` restores the input."""
    return _CHUNK_RE.findall(text)


def with_prefix(text: str) -> str:
    """Prepend one space so the first word segments exactly like any other word."""
    return " " + text if text else text


@dataclass
class Vocabulary:
    """Ranked pieces with log-probabilities. Ids 0..2 are PAD, UNK, BOS."""

    pieces: list[tuple[str, float]]
    special: tuple[str, ...] = SPECIAL_TOKENS
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.pieces = [(p, float(lp)) for p, lp in self.pieces]
        self._index = {}
        for i, (p, _) in enumerate(self.pieces):
            if p in self._index or p in self.special:
                raise DataError(f"duplicate vocabulary piece {p!r}")
            self._index[p] = i + len(self.special)
        self.logp = {p: lp for p, lp in self.pieces}
        self.max_piece_len = max((len(p) for p, _ in self.pieces), default=1)
        self.unk_logp = min((lp for _, lp in self.pieces), default=0.0) - 10.0
        self.chunk_safe = all(" " not in p[1:] for p, _ in self.pieces)
        self._segment_chunk = lru_cache(maxsize=1 << 16)(self._viterbi)

    @property
    def size(self) -> int:
        return len(self.special) + len(self.pieces)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, piece: str) -> bool:
        return piece in self._index

    def piece_to_id(self, piece: str) -> int:
        return self._index.get(piece, UNK)

    def id_to_piece(self, i: int) -> str:
        if i < len(self.special):
            return self.special[i]
        return self.pieces[i - len(self.special)][0]

    def _viterbi(self, text: str) -> tuple[str, ...]:
        return tuple(viterbi(text, self.logp, self.max_piece_len, self.unk_logp))

    def save(self, path) -> None:
        """Write one ``token<TAB>log_prob`` line per id, specials first."""
        lines = [f"{s}\t0.0" for s in self.special]
        lines += [f"{p}\t{lp!r}" for p, lp in self.pieces]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        rows = Path(path).read_text(encoding="utf-8").split("\n")
        if rows and rows[-1] == "":
            rows.pop()
        if len(rows) < len(SPECIAL_TOKENS):
            raise DataError(f"{path}: vocabulary file lacks the special-token header")
        parsed = []
        for lineno, row in enumerate(rows, 1):
            tok, sep, lp = row.rpartition("\t")
            if not sep:
                raise DataError(f"{path}:{lineno}: expected 'token<TAB>log_prob'")
            try:
                parsed.append((tok, float(lp)))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad log-probability {lp!r}") from None
        special = tuple(t for t, _ in parsed[: len(SPECIAL_TOKENS)])
        return cls(parsed[len(SPECIAL_TOKENS):], special=special)


# ---------------------------------------------------------------------------
# segmentation


def viterbi(text: str, logp: Mapping[str, float], max_piece_len: int,
            unk_logp: float = -1e9) -> list[str]:
    """Highest-scoring segmentation of ``text``.

    Ties prefer fewer pieces, then the lexicographically smallest token list.
    Characters with no piece are emitted as themselves at score ``unk_logp``.
    """
    n = len(text)
    if n == 0:
        return []
    # best[e] = (score, count, start)
    best: list = [None] * (n + 1)
    best[0] = (0.0, 0, -1)

    def tokens_to(e):
        out = []
        while e > 0:
            s = best[e][2]
            out.append(text[s:e])
            e = s
        return out[::-1]

    for e in range(1, n + 1):
        for s in range(max(0, e - max_piece_len), e):
            if best[s] is None:
                continue
            piece = text[s:e]
            lp = logp.get(piece)
            if lp is None:
                if e - s != 1:
                    continue
                lp = unk_logp
            score = best[s][0] + lp
            count = best[s][1] + 1
            cur = best[e]
            if cur is None or score > cur[0] or (score == cur[0] and count < cur[1]):
                best[e] = (score, count, s)
            elif score == cur[0] and count == cur[1]:
                if tokens_to(s) + [piece] < tokens_to(cur[2]) + [text[cur[2]:e]]:
                    best[e] = (score, count, s)
    return tokens_to(n)


def segment(text: str, vocab: Vocabulary) -> list[str]:
    """Viterbi segmentation of preprocessed ``text`` into piece strings.

    Unknown characters come back as themselves; :func:`encode` maps them to UNK.
    """
    text = with_prefix(text)
    if not vocab.chunk_safe:
        return viterbi(text, vocab.logp, vocab.max_piece_len, vocab.unk_logp)
    out: list[str] = []
    for c in chunks(text):
        out.extend(vocab._segment_chunk(c))
    return out


@dataclass
class TokenSequence:
    ids: np.ndarray
    length: int
    max_len: int = MAX_LEN


def encode(title: str, vocab: Vocabulary, max_len: int = MAX_LEN,
           typos: Optional[Mapping[str, str]] = None) -> TokenSequence:
    """preprocess -> segment -> ids, truncated to ``max_len`` and PAD-filled."""
    pieces = segment(preprocess(title, typos), vocab)[:max_len]
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[: len(pieces)] = [vocab.piece_to_id(p) for p in pieces]
    return TokenSequence(ids=ids, length=len(pieces), max_len=max_len)


def encode_batch(titles: Iterable[str], vocab: Vocabulary, max_len: int = MAX_LEN,
                 typos: Optional[Mapping[str, str]] = None) -> tuple[np.ndarray, np.ndarray]:
    """Encode many titles into an ``(N, max_len)`` id matrix and a length vector."""
    seqs = [encode(t, vocab, max_len, typos) for t in titles]
    ids = np.stack([s.ids for s in seqs]) if seqs else np.zeros((0, max_len), np.int64)
    lengths = np.array([s.length for s in seqs], dtype=np.int64)
    return ids, lengths


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Concatenate pieces, skipping PAD and BOS, and drop the word-boundary prefix."""
    text = "".join(vocab.id_to_piece(int(i)) for i in ids if int(i) not in (PAD, BOS))
    return text[1:] if text.startswith(" ") else text


# ---------------------------------------------------------------------------
# unigram EM training


def _logsumexp(values: list[float]) -> float:
    m = max(values)
    if m == -math.inf:
        return m
    return m + math.log(sum(math.exp(v - m) for v in values))


def _lattice(chunk: str, index: Mapping[str, int], max_len: int) -> list[list[tuple[int, int]]]:
    """``edges[e]`` lists ``(start, piece_index)`` for every piece ending at ``e``."""
    n = len(chunk)
    edges: list[list[tuple[int, int]]] = [[] for _ in range(n + 1)]
    for e in range(1, n + 1):
        for s in range(max(0, e - max_len), e):
            j = index.get(chunk[s:e])
            if j is not None:
                edges[e].append((s, j))
    return edges


def em_step(chunk_counts: Mapping[str, float], pieces: Sequence[str],
            logprobs: Sequence[float], max_piece_len: Optional[int] = None
            ) -> tuple[list[float], float]:
    """One EM iteration over a fixed piece inventory.

    E-step: forward-backward over every chunk's lattice for expected piece
    counts. M-step: maximum-likelihood renormalization.

    Returns ``(new_logprobs, loglik)`` where ``loglik`` is the corpus
    log-likelihood under the *input* ``logprobs``. Pieces with zero expected
    count get ``-inf``.
    """
    index = {p: i for i, p in enumerate(pieces)}
    max_len = max_piece_len or max(len(p) for p in pieces)
    lp = list(logprobs)
    counts = [0.0] * len(pieces)
    loglik = 0.0
    for chunk, weight in chunk_counts.items():
        edges = _lattice(chunk, index, max_len)
        n = len(chunk)
        alpha = [-math.inf] * (n + 1)
        alpha[0] = 0.0
        for e in range(1, n + 1):
            if edges[e]:
                alpha[e] = _logsumexp([alpha[s] + lp[j] for s, j in edges[e]])
        z = alpha[n]
        if z == -math.inf:
            raise DataError(f"chunk {chunk!r} cannot be segmented by the piece inventory")
        beta = [-math.inf] * (n + 1)
        beta[n] = 0.0
        for e in range(n, 0, -1):
            if beta[e] == -math.inf:
                continue
            for s, j in edges[e]:
                v = beta[e] + lp[j]
                beta[s] = v if beta[s] == -math.inf else _logsumexp([beta[s], v])
        for e in range(1, n + 1):
            for s, j in edges[e]:
                post = alpha[s] + lp[j] + beta[e] - z
                if post > -700:
                    counts[j] += weight * math.exp(post)
        loglik += weight * z
    total = sum(counts)
    new = [math.log(c / total) if c > 0 else -math.inf for c in counts]
    return new, loglik


def _candidates(chunk_counts: Mapping[str, float], max_piece_len: int, seed_size: int,
                min_count: float = 2) -> tuple[Counter, Counter]:
    chars: Counter = Counter()
    subs: Counter = Counter()
    for chunk, w in chunk_counts.items():
        n = len(chunk)
        for i in range(n):
            chars[chunk[i]] += w
            for j in range(i + 2, min(n, i + max_piece_len) + 1):
                subs[chunk[i:j]] += w
    frequent = [(p, c) for p, c in subs.items() if c >= min_count]
    frequent.sort(key=lambda pc: (-pc[1], pc[0]))
    return chars, Counter(dict(frequent[:seed_size]))


def _pruning_loss(chunk_counts: Mapping[str, float], logp: dict[str, float],
                  max_len: int) -> dict[str, float]:
    """Approximate likelihood loss of deleting each multi-character piece.

    Loss = Viterbi frequency of the piece times the log-probability gap to the
    best re-segmentation of that piece without itself.
    """
    freq: Counter = Counter()
    for chunk, w in chunk_counts.items():
        for tok in viterbi(chunk, logp, max_len):
            freq[tok] += w
    loss = {}
    for piece, lp in list(logp.items()):
        if len(piece) == 1:
            continue
        f = freq.get(piece, 0.0)
        if f == 0:
            loss[piece] = 0.0
            continue
        del logp[piece]
        alt = viterbi(piece, logp, max_len)
        loss[piece] = f * (lp - sum(logp[t] for t in alt))
        logp[piece] = lp
    return loss


def corpus_chunk_counts(corpus: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for title in corpus:
        for c in chunks(with_prefix(title)):
            counts[c] += 1
    return counts


def train_vocab(corpus: Sequence[str], target_size: int = 4000, seed_size: int = 100_000,
                prune_fraction: float = 0.25, max_piece_len: int = 8, em_iters: int = 2,
                history: Optional[list] = None) -> Vocabulary:
    """Train a unigram-LM vocabulary of at most ``target_size`` ids (specials included).

    ``corpus`` holds already-preprocessed titles. Single characters are never
    pruned. When ``history`` is given, the corpus log-likelihood of every EM
    iteration is appended to it.
    """
    corpus = list(corpus)
    if not corpus or not any(corpus):
        raise ConfigError("cannot train a vocabulary on an empty corpus")
    if not 0 < prune_fraction < 1:
        raise ConfigError(f"prune_fraction must lie in (0, 1), got {prune_fraction}")
    for t in corpus:
        if "\t" in t or "\n" in t:
            raise DataError("titles must be preprocessed (tab or newline found)")
    counts = corpus_chunk_counts(corpus)
    chars, subs = _candidates(counts, max_piece_len, seed_size)
    target_pieces = target_size - len(SPECIAL_TOKENS)
    if target_pieces < len(chars):
        raise ConfigError(
            f"target_size {target_size} cannot hold the {len(chars)}-symbol alphabet "
            f"plus {len(SPECIAL_TOKENS)} special tokens"
        )
    pieces = sorted(chars, key=lambda p: (-chars[p], p)) + list(subs)
    freqs = [chars[p] for p in pieces if len(p) == 1] + [subs[p] for p in subs]
    total = float(sum(freqs))
    logprobs = [math.log(f / total) for f in freqs]

    def run_em(pieces, logprobs, iters):
        for _ in range(iters):
            logprobs, ll = em_step(counts, pieces, logprobs, max_piece_len)
            if history is not None:
                history.append(ll)
            # a char with no remaining mass would make its chunks unsegmentable
            logprobs = [lp if lp > -math.inf or len(p) > 1 else -700.0
                        for p, lp in zip(pieces, logprobs)]
            keep = [i for i, lp in enumerate(logprobs) if lp > -math.inf]
            pieces = [pieces[i] for i in keep]
            logprobs = [logprobs[i] for i in keep]
        return pieces, logprobs

    pieces, logprobs = run_em(pieces, logprobs, em_iters)
    while len(pieces) > target_pieces:
        logp = dict(zip(pieces, logprobs))
        loss = _pruning_loss(counts, logp, max_piece_len)
        multi = sorted(loss, key=lambda p: (-loss[p], p))
        n_single = len(pieces) - len(multi)
        keep_multi = max(target_pieces - n_single, int(len(multi) * (1 - prune_fraction)))
        keep_multi = min(keep_multi, len(multi) - 1)
        kept = set(multi[:keep_multi])
        idx = [i for i, p in enumerate(pieces) if len(p) == 1 or p in kept]
        pieces = [pieces[i] for i in idx]
        z = _logsumexp([logprobs[i] for i in idx])
        logprobs = [logprobs[i] - z for i in idx]
        pieces, logprobs = run_em(pieces, logprobs, em_iters)
    ranked = sorted(zip(pieces, logprobs), key=lambda pl: (-pl[1], pl[0]))
    return Vocabulary(ranked)
