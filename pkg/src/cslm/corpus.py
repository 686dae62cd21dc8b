"""Corpus handling: parallel word/POS files, bilingual tags, vocabularies,
contiguous truncated-BPTT batching, and switch statistics.

File format: a words file and a tags file with one utterance per line,
tokens space-separated, line k of one file parallel to line k of the other.
Tags are `BASE_lang` with lang in {en, zh}, e.g. NN_en or VV_zh.
"""

import math
from dataclasses import dataclass

import numpy as np

EOS_ID = 0
UNK_ID = 1
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"

LANGS = ("en", "zh")

# Penn Treebank subset used for English (31 tags) and the CTB tagset plus
# NOI used for Chinese (34 tags). These bound what a tags file may contain.
EN_TAG_BASES = frozenset(
    """CC CD DT EX FW IN JJ JJR JJS MD NN NNS NNP NNPS PDT POS PRP PRP$
       RB RBR RBS RP TO UH VB VBD VBG VBN VBP VBZ WDT""".split()
)
ZH_TAG_BASES = frozenset(
    """AD AS BA CC CD CS DEC DEG DER DEV DT ETC FW IJ JJ LB LC M MSP NN
       NR NT OD ON P PN PU SB SP VA VC VE VV NOI""".split()
)
TAG_BASES = {"en": EN_TAG_BASES, "zh": ZH_TAG_BASES}


class CorpusFormatError(ValueError):
    """Input files violate the words/tags format contract."""


class CorpusSizeError(ValueError):
    """Corpus too small for the requested batch geometry."""


@dataclass(frozen=True)
class BilingualTag:
    """A POS tag base plus the language of the word it labels."""

    base: str
    lang: str

    def surface(self) -> str:
        return f"{self.base}_{self.lang}"

    @classmethod
    def parse(cls, text: str) -> "BilingualTag":
        base, sep, lang = text.rpartition("_")
        if not sep or lang not in LANGS:
            raise CorpusFormatError(
                f"malformed tag {text!r}: expected BASE_lang with lang in {LANGS}"
            )
        if base not in TAG_BASES[lang]:
            raise CorpusFormatError(
                f"malformed tag {text!r}: base {base!r} not in the {lang} inventory"
            )
        return cls(base, lang)


@dataclass(frozen=True)
class TaggedUtterance:
    """Parallel word and bilingual-tag sequences for one sentence."""

    words: tuple
    tags: tuple

    def __post_init__(self):
        if len(self.words) != len(self.tags):
            raise CorpusFormatError(
                f"utterance has {len(self.words)} words but {len(self.tags)} tags"
            )
        if not self.words:
            raise CorpusFormatError("utterance is empty")

    @property
    def langs(self):
        return tuple(t.lang for t in self.tags)

    def __len__(self):
        return len(self.words)


class Vocab:
    """Bidirectional token/id map with reserved EOS=0 and UNK=1.

    Instances are frozen from birth: encode never assigns new ids, unknown
    tokens map to UNK.
    """

    def __init__(self, tokens):
        """tokens: ids 2.. in order; must exclude the reserved surface forms."""
        self.id_to_token = [EOS_TOKEN, UNK_TOKEN]
        for t in tokens:
            if t in (EOS_TOKEN, UNK_TOKEN):
                raise ValueError(f"token {t!r} collides with a reserved entry")
            self.id_to_token.append(t)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")
        self.frozen = True

    def encode(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def decode(self, idx: int) -> str:
        return self.id_to_token[idx]

    def encode_all(self, tokens):
        return [self.encode(t) for t in tokens]

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.id_to_token == other.id_to_token


def load_tagged_corpus(words_path, tags_path):
    """Parse parallel words/tags files into TaggedUtterance objects.

    Raises CorpusFormatError citing the 1-based line (and token, for tag
    syntax) on any mismatch.
    """
    with open(words_path, encoding="utf-8") as f:
        word_lines = f.read().splitlines()
    with open(tags_path, encoding="utf-8") as f:
        tag_lines = f.read().splitlines()
    if len(word_lines) != len(tag_lines):
        raise CorpusFormatError(
            f"{words_path} has {len(word_lines)} lines but {tags_path} has {len(tag_lines)}"
        )
    corpus = []
    for k, (wl, tl) in enumerate(zip(word_lines, tag_lines), start=1):
        words = wl.split()
        tag_tokens = tl.split()
        if len(words) != len(tag_tokens):
            raise CorpusFormatError(
                f"line {k}: {len(words)} words but {len(tag_tokens)} tags"
            )
        if not words:
            raise CorpusFormatError(f"line {k}: empty utterance")
        try:
            tags = tuple(BilingualTag.parse(t) for t in tag_tokens)
        except CorpusFormatError as e:
            raise CorpusFormatError(f"line {k}: {e}") from None
        corpus.append(TaggedUtterance(tuple(words), tags))
    return corpus


def save_tagged_corpus(corpus, words_path, tags_path):
    """Inverse of load_tagged_corpus (UTF-8, one utterance per line)."""
    with open(words_path, "w", encoding="utf-8") as f:
        for u in corpus:
            f.write(" ".join(u.words) + "\n")
    with open(tags_path, "w", encoding="utf-8") as f:
        for u in corpus:
            f.write(" ".join(t.surface() for t in u.tags) + "\n")


def build_vocab(utterances, min_count=1, stream="words"):
    """Frequency-ranked vocabulary over a corpus stream ("words" or "tags").

    Ids from 2 upward by descending count, ties broken lexicographically;
    tokens under min_count are left out (they encode to UNK).
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts = {}
    for u in utterances:
        tokens = u.words if stream == "words" else (t.surface() for t in u.tags)
        for t in tokens:
            counts[t] = counts.get(t, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([t for t, c in ranked if c >= min_count])


class BatchPlan:
    """Corpus folded into B contiguous lanes for truncated BPTT.

    The word and tag streams are the utterances joined with one EOS after
    every sentence. The stream's first B*L tokens (L = total // B) fill the
    (B, L) id matrices lane by lane; window w covers input columns
    [w*unroll, (w+1)*unroll) with targets shifted one column right. Trailing
    tokens that don't fill a full window are dropped. Arrays are frozen.
    """

    def __init__(self, word_ids, tag_ids, unroll):
        self.word_ids = word_ids
        self.tag_ids = tag_ids
        self.unroll = int(unroll)
        for a in (self.word_ids, self.tag_ids):
            a.setflags(write=False)

    @property
    def batch_size(self):
        return self.word_ids.shape[0]

    @property
    def lane_length(self):
        return self.word_ids.shape[1]

    @property
    def n_windows(self):
        return (self.lane_length - 1) // self.unroll

    @property
    def n_target_tokens(self):
        return self.n_windows * self.unroll * self.batch_size

    def windows(self):
        """Yield (word_x, tag_x, word_y, tag_y) views per BPTT window."""
        u = self.unroll
        for w in range(self.n_windows):
            s = w * u
            yield (
                self.word_ids[:, s : s + u],
                self.tag_ids[:, s : s + u],
                self.word_ids[:, s + 1 : s + u + 1],
                self.tag_ids[:, s + 1 : s + u + 1],
            )


def make_batches(utterances, vocab_w, vocab_p, batch_size, unroll) -> BatchPlan:
    """Encode a corpus into a BatchPlan (see BatchPlan for the layout)."""
    if batch_size < 1 or unroll < 1:
        raise ValueError(
            f"batch_size and unroll must be >= 1, got {batch_size}, {unroll}"
        )
    stream_w = []
    stream_p = []
    for u in utterances:
        stream_w.extend(vocab_w.encode(w) for w in u.words)
        stream_w.append(EOS_ID)
        stream_p.extend(vocab_p.encode(t.surface()) for t in u.tags)
        stream_p.append(EOS_ID)
    total = len(stream_w)
    minimum = batch_size * (unroll + 1)
    if total < minimum:
        raise CorpusSizeError(
            f"corpus stream has {total} tokens; batch_size={batch_size} with "
            f"unroll={unroll} needs at least {minimum}"
        )
    lane = total // batch_size
    word_ids = np.asarray(stream_w[: batch_size * lane], dtype=np.int64).reshape(
        batch_size, lane
    )
    tag_ids = np.asarray(stream_p[: batch_size * lane], dtype=np.int64).reshape(
        batch_size, lane
    )
    return BatchPlan(word_ids, tag_ids, unroll)


# --------------------------------------------------------------------------
# Switch statistics.


@dataclass(frozen=True)
class CorpusStats:
    n_utterances: int
    n_tokens: int
    avg_segment_length: float
    avg_switches: float

    def to_dict(self):
        return {
            "n_utterances": self.n_utterances,
            "n_tokens": self.n_tokens,
            "avg_segment_length": self.avg_segment_length,
            "avg_switches": self.avg_switches,
        }


def count_switches(u: TaggedUtterance) -> int:
    """Adjacent token pairs whose languages differ (tag suffix is the oracle)."""
    langs = u.langs
    return sum(1 for a, b in zip(langs, langs[1:]) if a != b)


def segment_lengths(u: TaggedUtterance):
    """Lengths of maximal monolingual runs, in utterance order."""
    out = []
    run = 1
    langs = u.langs
    for a, b in zip(langs, langs[1:]):
        if a == b:
            run += 1
        else:
            out.append(run)
            run = 1
    out.append(run)
    return out


def compute_stats(corpus) -> CorpusStats:
    """Per-utterance means of switch counts and monolingual-run lengths.

    Cross-utterance means use math.fsum (exactly rounded), so the result is
    independent of summation order and reproducible by any enumeration.
    """
    if not corpus:
        return CorpusStats(0, 0, 0.0, 0.0)
    n_tokens = sum(len(u) for u in corpus)
    seg_means = [sum(runs) / len(runs) for runs in map(segment_lengths, corpus)]
    switches = [count_switches(u) for u in corpus]
    return CorpusStats(
        n_utterances=len(corpus),
        n_tokens=n_tokens,
        avg_segment_length=math.fsum(seg_means) / len(corpus),
        avg_switches=math.fsum(switches) / len(corpus),
    )
