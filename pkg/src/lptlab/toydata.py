"""Synthetic corpus and built-in benchmark tasks over a 512-word vocabulary.

A seeded templated grammar produces short review-style sentences whose
polarity is carried by marker adjectives. The pretraining corpus mixes
plain statements, "it was X ." echoes, and question/answer pairs, so a
masked-language model trained on it learns that the mask slots in the
downstream templates co-vary with sentence polarity. Two tasks ship
in-repo on top of the same grammar: single-sentence sentiment and a
sentence-pair polarity-agreement task.
"""

from __future__ import annotations

import numpy as np

from .tasks import SPECIALS, Example, TaskSpec, Vocab

PUNCT = [".", ",", "?", ":", "!"]
FUNCTION = ["it", "was", "is", "the", "a", "and", "but", "very", "quite",
            "really", "so", "they", "are", "this", "that", "watch"]
ANSWERS = ["yes", "no"]
POS_MARKERS = ["great", "good", "fun", "lovely", "amazing", "brilliant",
               "charming", "delightful", "superb", "wonderful", "excellent",
               "fantastic"]
NEG_MARKERS = ["terrible", "bad", "boring", "awful", "dreadful", "horrible",
               "dull", "lousy", "miserable", "tedious", "bleak", "clumsy"]
NOUNS = ["movie", "film", "book", "story", "plot", "acting", "script",
         "music", "show", "scene", "cast", "ending", "dialogue", "style",
         "pace", "journey"]
VOCAB_SIZE = 512

# task inputs avoid the literal label words; the verbalizer owns those
TASK_POS = [w for w in POS_MARKERS if w != "great"]
TASK_NEG = [w for w in NEG_MARKERS if w != "terrible"]

_DEGREE = ["very", "quite", "really"]


def _fillers() -> list[str]:
    count = VOCAB_SIZE - len(SPECIALS) - len(PUNCT) - len(FUNCTION) \
        - len(ANSWERS) - len(POS_MARKERS) - len(NEG_MARKERS) - len(NOUNS)
    return [f"w{i:03d}" for i in range(count)]


def build_toy_vocab() -> Vocab:
    tokens = SPECIALS + PUNCT + FUNCTION + ANSWERS + POS_MARKERS + NEG_MARKERS \
        + NOUNS + _fillers()
    assert len(tokens) == VOCAB_SIZE
    return Vocab(tokens)


def _pick(rng, items):
    return items[rng.integers(len(items))]


def _clause(rng, marker: str, degree_prob: float = 0.15) -> str:
    noun = _pick(rng, NOUNS)
    det = _pick(rng, ["the", "a", "this", "that"])
    verb = "is" if det in ("this", "that") else "was"
    words = [det, noun, verb]
    if rng.random() < degree_prob:
        words.append(_pick(rng, _DEGREE))
    words.append(marker)
    return " ".join(words)


def _next_marker(rng, markers: list[str], current: str, repeat_prob: float = 0.5) -> str:
    # same-polarity marker; repeating the exact word half the time rewards
    # attention that retrieves marker identity from context
    if rng.random() < repeat_prob:
        return current
    return _pick(rng, markers)


def _echo_marker(rng, markers: list[str], current: str) -> str:
    # echo slots lean on the polarity's head word ("great"/"terrible"), the
    # way a real corpus overuses a few sentiment words; the rest copies or
    # resamples within the polarity
    r = rng.random()
    if r < 0.4:
        return markers[0]
    if r < 0.7:
        return current
    return _pick(rng, markers)


def _statement(rng, markers: list[str], fillers: list[str],
               max_clauses: int = 2, neutral_prob: float = 0.15) -> tuple[str, str]:
    """A 1..max_clauses polarity statement; returns (text, dominant marker)."""
    marker = _pick(rng, markers)
    clauses = [_clause(rng, marker)]
    n = 1 + int(rng.random() < 0.5 and max_clauses > 1)
    for _ in range(n - 1):
        if rng.random() < neutral_prob:
            clauses.append(_clause(rng, _pick(rng, fillers)))
        else:
            clauses.append(_clause(rng, _next_marker(rng, markers, marker)))
    return " and ".join(clauses), marker


def generate_corpus(n_sentences: int, seed: int) -> list[str]:
    """Seeded corpus text for toy MLM pretraining.

    Sentences start after 0..6 random filler words, so absolute position
    identifies nothing and the masked-token objective has to rely on
    content co-occurrence.
    """
    rng = np.random.default_rng(seed)
    fillers = _fillers()
    sentences = []
    for _ in range(n_sentences):
        pos = rng.random() < 0.5
        markers = POS_MARKERS if pos else NEG_MARKERS
        r = rng.random()
        if r < 0.15:
            text, _ = _statement(rng, markers, fillers)
            s = text + " ."
        elif r < 0.40:
            # conjunction run: same-polarity markers at adjacent offsets,
            # the cheapest co-occurrence signal for clustering polarity
            n_run = 2 + int(rng.integers(3))
            s = " and ".join(_pick(rng, markers) for _ in range(n_run)) + " ."
        elif r < 0.75:
            # echo, in both the period-separated and the bare downstream-
            # template shape
            text, marker = _statement(rng, markers, fillers)
            sep = " . " if rng.random() < 0.5 else " "
            s = text + sep + "it was " + _echo_marker(rng, markers, marker) + " ."
        elif r < 0.95:
            agree = rng.random() < 0.5
            other = markers if agree else (NEG_MARKERS if pos else POS_MARKERS)
            a, marker = _statement(rng, markers, fillers, max_clauses=1)
            if agree:
                b = _clause(rng, _next_marker(rng, markers, marker))
            else:
                b, _ = _statement(rng, other, fillers, max_clauses=1)
            s = a + " ? " + ("yes" if agree else "no") + " , " + b + " ."
        else:
            s = _clause(rng, _pick(rng, fillers)) + " ."
        sentences.append(s)
    return sentences


def corpus_token_ids(vocab: Vocab, sentences: list[str], max_len: int) -> list[np.ndarray]:
    """Frame each sentence as [CLS] ... [SEP], clipped to max_len."""
    out = []
    for s in sentences:
        body = vocab.tokenize(s)[: max_len - 2]
        out.append(np.asarray([vocab.cls_id] + body + [vocab.sep_id], dtype=np.int64))
    return out


def make_sentiment_examples(n: int, seed: int) -> list[Example]:
    rng = np.random.default_rng(seed)
    fillers = _fillers()
    examples = []
    for _ in range(n):
        pos = rng.random() < 0.5
        markers = TASK_POS if pos else TASK_NEG
        text, _ = _statement(rng, markers, fillers)
        examples.append(Example(text_a=text, label="positive" if pos else "negative"))
    return examples


def make_entailment_examples(n: int, seed: int) -> list[Example]:
    rng = np.random.default_rng(seed)
    fillers = _fillers()
    examples = []
    for _ in range(n):
        p1 = rng.random() < 0.5
        agree = rng.random() < 0.5
        p2 = p1 if agree else not p1
        a, _ = _statement(rng, TASK_POS if p1 else TASK_NEG, fillers, max_clauses=1)
        b, _ = _statement(rng, TASK_POS if p2 else TASK_NEG, fillers, max_clauses=1)
        examples.append(Example(
            text_a=a, text_b=b,
            label="entailment" if agree else "not_entailment",
        ))
    return examples


SENTIMENT_SPEC = TaskSpec(
    name="toy_sentiment",
    is_pair=False,
    template="<S1> It was [MASK] .",
    verbalizer={"positive": "great", "negative": "terrible"},
    metric="acc",
)

ENTAILMENT_SPEC = TaskSpec(
    name="toy_entailment",
    is_pair=True,
    template="<S1> ? [MASK] , <S2>",
    verbalizer={"entailment": "yes", "not_entailment": "no"},
    metric="acc_and_f1",
)

_TRAIN_SIZE = 6000
_TEST_SIZE = 1000


def builtin_task(name: str) -> tuple[TaskSpec, list[Example], list[Example]]:
    """Return (spec, train, test) for an in-repo task."""
    if name == "toy_sentiment":
        return (SENTIMENT_SPEC,
                make_sentiment_examples(_TRAIN_SIZE, seed=101),
                make_sentiment_examples(_TEST_SIZE, seed=202))
    if name == "toy_entailment":
        return (ENTAILMENT_SPEC,
                make_entailment_examples(_TRAIN_SIZE, seed=303),
                make_entailment_examples(_TEST_SIZE, seed=404))
    raise KeyError(f"unknown built-in task {name!r}; have toy_sentiment, toy_entailment")
