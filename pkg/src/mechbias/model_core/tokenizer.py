"""Fixed-vocabulary tokenizer: greedy longest match with UTF-8 byte fallback."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from ..errors import MechBiasError, SchemaError

BOS = "<s>"
EOS = "</s>"
PAD = "<pad>"
UNK = "<unk>"
SPECIAL_TOKENS = (BOS, EOS, PAD)
BYTE_TOKENS = tuple(f"<0x{b:02X}>" for b in range(256))

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


def escape_token(token: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in token)


def unescape_token(text: str) -> str:
    out = []
    chars = iter(text)
    for ch in chars:
        if ch == "\\":
            nxt = next(chars, "")
            if nxt not in _UNESCAPES:
                raise ValueError(f"bad escape sequence \\{nxt}")
            out.append(_UNESCAPES[nxt])
        else:
            out.append(ch)
    return "".join(out)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    source_text: str = ""

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Vocab:
    """Dense id -> token table.

    Specials (``<s>``, ``</s>``, ``<pad>``, ``<unk>``) and the 256 byte tokens
    ``<0x00>``..``<0xFF>`` are recognised by their spelling and are never
    matched against input text.
    """

    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)
    _words: dict[str, int] = field(init=False, repr=False, compare=False)
    _max_len: int = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.tokens) < 2:
            raise SchemaError("vocab needs at least 2 tokens", subject="vocab")
        index: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok == "":
                raise SchemaError(f"empty token string at id {i}", subject="vocab")
            if tok in index:
                raise SchemaError(f"duplicate token {tok!r} at ids {index[tok]} and {i}", subject="vocab")
            index[tok] = i
        reserved = set(SPECIAL_TOKENS) | {UNK} | set(BYTE_TOKENS)
        words = {t: i for t, i in index.items() if t not in reserved}
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_words", words)
        object.__setattr__(self, "_max_len", max((len(w) for w in words), default=0))

    @classmethod
    def build(cls, words, *, byte_fallback: bool = True) -> Vocab:
        """Specials, then byte tokens, then ``words`` in order (duplicates dropped)."""
        tokens = list(SPECIAL_TOKENS)
        if byte_fallback:
            tokens.extend(BYTE_TOKENS)
        seen = set(tokens)
        for w in words:
            if w not in seen:
                tokens.append(w)
                seen.add(w)
        return cls(tuple(tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index[token]

    def get(self, token: str) -> int | None:
        return self._index.get(token)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def bos_id(self) -> int | None:
        return self._index.get(BOS)

    @property
    def eos_id(self) -> int | None:
        return self._index.get(EOS)

    @property
    def pad_id(self) -> int | None:
        return self._index.get(PAD)

    @property
    def unk_id(self) -> int | None:
        return self._index.get(UNK)

    def byte_id(self, value: int) -> int | None:
        return self._index.get(BYTE_TOKENS[value])

    def is_special(self, token_id: int) -> bool:
        return self.tokens[token_id] in SPECIAL_TOKENS or self.tokens[token_id] == UNK

    def byte_value(self, token_id: int) -> int | None:
        tok = self.tokens[token_id]
        if len(tok) == 6 and tok.startswith("<0x") and tok.endswith(">") and tok in self._index:
            try:
                return int(tok[3:5], 16)
            except ValueError:
                return None
        return None

    # file format: one "id<TAB>token" line per entry, token backslash-escaped
    def save(self, path: str | Path) -> None:
        lines = [f"{i}\t{escape_token(t)}\n" for i, t in enumerate(self.tokens)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        path = Path(path)
        if not path.exists():
            raise SchemaError(f"vocab file {path} does not exist", subject=str(path))
        entries: dict[int, str] = {}
        with path.open("r", encoding="utf-8", newline="\n") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                id_text, sep, token = line.partition("\t")
                if not sep:
                    raise SchemaError("expected 'id<TAB>token'", row=lineno, subject=str(path))
                try:
                    token_id = int(id_text)
                    token = unescape_token(token)
                except ValueError as exc:
                    raise SchemaError(str(exc), row=lineno, subject=str(path)) from exc
                if token_id in entries:
                    raise SchemaError(f"id {token_id} listed twice", row=lineno, subject=str(path))
                entries[token_id] = token
        if sorted(entries) != list(range(len(entries))):
            raise SchemaError("ids are not dense in [0, vocab_size)", subject=str(path))
        return cls(tuple(entries[i] for i in range(len(entries))))


def tokenize(text: str, vocab: Vocab) -> TokenSequence:
    """Greedy longest match over word tokens; unmatched characters become byte tokens.

    Totality needs the vocab to carry all 256 byte tokens (or ``<unk>``); a vocab
    with neither raises for text it cannot cover.
    """
    ids: list[int] = []
    words = vocab._words
    max_len = vocab._max_len
    i, n = 0, len(text)
    while i < n:
        for length in range(min(max_len, n - i), 0, -1):
            tok_id = words.get(text[i : i + length])
            if tok_id is not None:
                ids.append(tok_id)
                i += length
                break
        else:
            for byte in text[i].encode("utf-8", errors="surrogatepass"):
                byte_id = vocab.byte_id(byte)
                if byte_id is None:
                    byte_id = vocab.unk_id
                if byte_id is None:
                    raise MechBiasError(
                        f"vocab has no byte fallback for 0x{byte:02X} (char {text[i]!r})",
                        subject="tokenizer",
                    )
                ids.append(byte_id)
            i += 1
    return TokenSequence(tuple(ids), text)


def detokenize(ids, vocab: Vocab) -> str:
    """Concatenate token strings; runs of byte tokens are decoded as UTF-8.

    Specials render as the empty string.
    """
    parts: list[str] = []
    pending = bytearray()
    for token_id in ids:
        token_id = int(token_id)
        value = vocab.byte_value(token_id)
        if value is not None:
            pending.append(value)
            continue
        if pending:
            parts.append(pending.decode("utf-8", errors="replace"))
            pending.clear()
        if not vocab.is_special(token_id):
            parts.append(vocab.tokens[token_id])
    if pending:
        parts.append(pending.decode("utf-8", errors="replace"))
    return "".join(parts)
