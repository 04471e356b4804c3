"""Toy token vocabulary.

Content tokens are uppercase consonant-vowel syllables ("BA", "HU", ...),
one whole word each, so detokenization is a plain space join. BOS/EOS are
reserved ids that render as the empty string.
"""

from dataclasses import dataclass, field

from echotrap.errors import ConfigurationError

BOS_ID = 0
EOS_ID = 1

_CONSONANTS = "BDFGHJKLMNPRSTVZ"
_VOWELS = "AEIOU"


@dataclass(frozen=True)
class TokenVocab:
    """Dense id -> surface mapping with reserved BOS (0) and EOS (1)."""

    surfaces: tuple[str, ...]
    _surface_to_id: dict = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(
            self,
            "_surface_to_id",
            {s: i for i, s in enumerate(self.surfaces) if s},
        )

    @property
    def size(self) -> int:
        return len(self.surfaces)

    @property
    def bos_id(self) -> int:
        return BOS_ID

    @property
    def eos_id(self) -> int:
        return EOS_ID

    @property
    def content_ids(self) -> range:
        return range(2, self.size)

    def surface(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise ValueError(f"unknown token id {token_id}")
        return self.surfaces[token_id]

    def token_id(self, surface: str) -> int:
        try:
            return self._surface_to_id[surface]
        except KeyError:
            raise ValueError(f"unknown surface {surface!r}") from None

    def tokenize(self, text: str) -> list[int]:
        return [self.token_id(w) for w in text.split()]

    def detokenize(self, tokens) -> str:
        words = []
        for t in tokens:
            s = self.surface(int(t))
            if s:
                words.append(s)
        return " ".join(words)


def build_vocab(size: int = 32) -> TokenVocab:
    """Deterministic vocabulary of `size` ids (2 reserved + content syllables)."""
    if size < 3:
        raise ConfigurationError(f"vocab size must be at least 3, got {size}")
    n_content = size - 2
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    if n_content > len(syllables):
        raise ConfigurationError(
            f"vocab size {size} exceeds the {len(syllables) + 2} supported ids"
        )
    return TokenVocab(tuple(["", ""] + syllables[:n_content]))
