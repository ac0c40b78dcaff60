"""Prompt/response records, chat formatting, byte tokenization and batching."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError, InputError
from .tensor import Rng

USER_OPEN = "<|im_start|>user\n"
TURN_CLOSE = "<|im_end|>"
ASSISTANT_OPEN = "<|im_start|>assistant\n"
PAD_ID = 0


@dataclass(frozen=True)
class DatasetRecord:
    prompt: str
    response: str

    def __post_init__(self):
        if not isinstance(self.prompt, str) or not isinstance(self.response, str):
            raise InputError("prompt and response must be strings")
        if not self.prompt.strip():
            raise InputError("empty prompt")
        if not self.response.strip():
            raise InputError("empty response")


@dataclass(frozen=True)
class FormattedExample:
    text: str
    response_start: int  # byte offsets into encode(text)
    response_end: int


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(ids) -> str:
    return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


def format_prompt(record: DatasetRecord) -> FormattedExample:
    """Wrap the prompt in chat delimiters, open the assistant turn, append the response.

    ``response_start``/``response_end`` delimit exactly the response bytes.
    """
    head = USER_OPEN + record.prompt + TURN_CLOSE + "\n" + ASSISTANT_OPEN
    start = len(head.encode("utf-8"))
    end = start + len(record.response.encode("utf-8"))
    return FormattedExample(head + record.response + TURN_CLOSE, start, end)


def prompt_text(prompt: str) -> str:
    return USER_OPEN + prompt + TURN_CLOSE + "\n" + ASSISTANT_OPEN


def load_dataset(path) -> list[DatasetRecord]:
    """Read newline-delimited JSON objects with ``prompt`` and ``response`` fields."""
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise DatasetError("expected a JSON object", lineno)
            for key in ("prompt", "response"):
                if key not in obj:
                    raise DatasetError(f"missing field {key!r}", lineno)
            try:
                records.append(DatasetRecord(obj["prompt"], obj["response"]))
            except InputError as exc:
                raise DatasetError(str(exc), lineno) from None
    if not records:
        raise DatasetError(f"{path}: no records")
    return records


def save_dataset(records, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, "".join(json.dumps({"prompt": r.prompt, "response": r.response}) + "\n"
                                    for r in records))


def make_copy_task(n_train: int = 832, n_test: int = 208, length: int = 5, seed: int = 0,
                   alphabet: str = string.ascii_lowercase) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Deterministic toy copy task: prompt ``copy: xxxxx`` -> response ``xxxxx``.

    Train and test strings are disjoint.
    """
    rng = Rng(seed).child("copy-task")
    letters = np.array(list(alphabet))
    seen: set[str] = set()
    out = []
    i = 0
    while len(out) < n_train + n_test:
        s = "".join(letters[rng.child(i).generator.integers(0, len(letters), length)])
        i += 1
        if s in seen:
            continue
        seen.add(s)
        out.append(DatasetRecord(f"copy: {s}", s))
    return out[:n_train], out[n_train:]


@dataclass
class Batch:
    inputs: np.ndarray  # B x L token ids
    targets: np.ndarray  # B x L next-token ids
    mask: np.ndarray  # B x L, 1 where the target is supervised


def encode_example(record: DatasetRecord, include_close: bool = True) -> tuple[list[int], int, int]:
    ex = format_prompt(record)
    ids = encode(ex.text)
    end = ex.response_end + (len(TURN_CLOSE.encode()) if include_close else 0)
    return ids, ex.response_start, end


def collate(records, max_seq_len: int, include_close: bool = True) -> Batch:
    """Right-pad, shift by one, and mask everything but the response span."""
    rows = [encode_example(r, include_close) for r in records]
    L = max(len(ids) for ids, _, _ in rows) - 1
    if L > max_seq_len:
        raise InputError(f"example of {L + 1} tokens does not fit max_seq_len {max_seq_len}")
    B = len(rows)
    inputs = np.full((B, L), PAD_ID, dtype=np.int64)
    targets = np.full((B, L), PAD_ID, dtype=np.int64)
    mask = np.zeros((B, L))
    for b, (ids, start, end) in enumerate(rows):
        n = len(ids) - 1
        inputs[b, :n] = ids[:-1]
        targets[b, :n] = ids[1:]
        # target at position j is token j + 1
        mask[b, max(start - 1, 0):end - 1] = 1.0
    return Batch(inputs, targets, mask)


def epoch_batches(records, batch_size: int, seed: int, epoch: int, max_seq_len: int) -> list[Batch]:
    order = Rng(seed).child("shuffle", epoch).permutation(len(records))
    return [collate([records[i] for i in order[s:s + batch_size]], max_seq_len)
            for s in range(0, len(records), batch_size)]
