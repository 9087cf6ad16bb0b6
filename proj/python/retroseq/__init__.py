from retroseq._core import (
    DataError,
    Datastore,
    Generator,
    LexError,
    cli,
    code_tokens,
    corpus_bleu,
    denormalize,
    intent_tokens,
    normalize_intent,
    normalize_pair,
    normalize_snippet,
    read_jsonl,
    synth_corpus,
    write_jsonl,
)

__all__ = [
    "DataError",
    "Datastore",
    "Generator",
    "LexError",
    "cli",
    "code_tokens",
    "corpus_bleu",
    "denormalize",
    "intent_tokens",
    "normalize_intent",
    "normalize_pair",
    "normalize_snippet",
    "read_jsonl",
    "synth_corpus",
    "write_jsonl",
]
