"""Bundled gloss table, tokenizer and closed vocabulary."""

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from ..errors import DataError

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text):
    """Lowercase, split on whitespace and punctuation (underscores included)."""
    return _TOKEN.findall(text.lower())


def load_gloss_table(path=None):
    """name -> gloss sentence, from a ``name<TAB>gloss`` file (bundled one by default)."""
    if path is None:
        text = resources.files("mmloc.data").joinpath("gloss.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    table = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        name, sep, gloss = line.partition("\t")
        if not sep or not gloss.strip():
            raise DataError(f"gloss table line {lineno}: expected 'name<TAB>gloss'")
        table[name.strip()] = gloss.strip()
    return table


def write_gloss_table(table, path):
    Path(path).write_text("".join(f"{k}\t{v}\n" for k, v in table.items()), encoding="utf-8")


class Vocabulary:
    """Closed word list; an unknown word is an error, never mapped to a fallback."""

    def __init__(self, words):
        self.words = sorted(set(words))
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def from_table(cls, table):
        words = set()
        for name, gloss in table.items():
            words.update(tokenize(name))
            words.update(tokenize(gloss))
        return cls(words)

    def __len__(self):
        return len(self.words)

    def encode(self, words):
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise DataError(f"word {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids):
        return [self.words[i] for i in ids]


@dataclass
class GlossTokens:
    tokens: list
    category: str

    def __post_init__(self):
        if not self.tokens:
            raise DataError(f"empty gloss for {self.category!r}")


_DEFAULT = {}


def default_table():
    if "table" not in _DEFAULT:
        _DEFAULT["table"] = load_gloss_table()
        _DEFAULT["vocab"] = Vocabulary.from_table(_DEFAULT["table"])
    return _DEFAULT["table"]


def default_vocab():
    default_table()
    return _DEFAULT["vocab"]


def gloss_words(name, table=None):
    table = default_table() if table is None else table
    if name not in table:
        raise DataError(f"no gloss for category {name!r}")
    return tokenize(table[name])


def gloss_lookup(name, table=None, vocab=None):
    """Tokenised gloss of a category as vocabulary ids."""
    vocab = default_vocab() if vocab is None else vocab
    return GlossTokens(vocab.encode(gloss_words(name, table)), name)


def class_tokens(name, vocab=None):
    """Tokenised category name, the third query modality."""
    vocab = default_vocab() if vocab is None else vocab
    return GlossTokens(vocab.encode(tokenize(name)), name)
