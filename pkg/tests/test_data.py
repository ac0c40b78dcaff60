import json
import os
import threading

import numpy as np
import pytest

from noisefit.data import (DatasetRecord, TURN_CLOSE, collate, decode, encode, epoch_batches, format_prompt,
                           load_dataset, make_copy_task, save_dataset)
from noisefit.errors import DatasetError, InputError, UsageError
from noisefit.io import RunDirLock, append_line, atomic_write_text


def write_lines(path, lines):
    path.write_text("".join(l + "\n" for l in lines))
    return path


def test_two_line_file(tmp_path):
    p = write_lines(tmp_path / "d.jsonl", [json.dumps({"prompt": "a", "response": "b"}),
                                           json.dumps({"prompt": "c", "response": "d"})])
    assert load_dataset(p) == [DatasetRecord("a", "b"), DatasetRecord("c", "d")]


def test_missing_field_names_line(tmp_path):
    p = write_lines(tmp_path / "d.jsonl", [json.dumps({"prompt": "a", "response": "b"}), json.dumps({"prompt": "x"})])
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset(p)


def test_bad_json_and_empty_file(tmp_path):
    with pytest.raises(DatasetError, match="line 1"):
        load_dataset(write_lines(tmp_path / "a.jsonl", ["{nope"]))
    (tmp_path / "e.jsonl").write_text("")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "e.jsonl")


def test_blank_response_rejected():
    with pytest.raises(InputError):
        DatasetRecord("q", "   ")


def test_full_size_round_trip(tmp_path):
    train, test = make_copy_task()
    assert len(train) == 832 and len(test) == 208
    assert not {r.response for r in train} & {r.response for r in test}
    save_dataset(train, tmp_path / "t.jsonl")
    assert load_dataset(tmp_path / "t.jsonl") == train


def test_format_prompt_delimiters_and_span():
    rec = DatasetRecord("What is 2+2?", "Four. ünïcode")
    ex = format_prompt(rec)
    assert ex.text.startswith("<|im_start|>user\nWhat is 2+2?<|im_end|>\n<|im_start|>assistant\n")
    assert ex.text.endswith(TURN_CLOSE)
    raw = encode(ex.text)
    assert decode(raw[ex.response_start:ex.response_end]) == rec.response


def test_collate_mask_covers_response_and_close():
    rec = DatasetRecord("p", "xyz")
    b = collate([rec, DatasetRecord("longer prompt", "q")], 128)
    ex = format_prompt(rec)
    picked = b.targets[0][b.mask[0] > 0]
    assert decode(picked) == "xyz" + TURN_CLOSE
    b2 = collate([rec], 128, include_close=False)
    assert decode(b2.targets[0][b2.mask[0] > 0]) == "xyz"
    assert b.inputs.shape == b.targets.shape == b.mask.shape


def test_collate_rejects_overlong():
    with pytest.raises(InputError):
        collate([DatasetRecord("p" * 200, "r")], 128)


def test_epoch_order_is_seeded():
    train, _ = make_copy_task(20, 0)
    a = epoch_batches(train, 4, 3, 0, 128)
    b = epoch_batches(train, 4, 3, 0, 128)
    c = epoch_batches(train, 4, 3, 1, 128)
    assert all(np.array_equal(x.inputs, y.inputs) for x, y in zip(a, b))
    assert not all(np.array_equal(x.inputs, y.inputs) for x, y in zip(a, c))


def test_atomic_write_replaces(tmp_path):
    p = tmp_path / "f.txt"
    atomic_write_text(p, "one")
    atomic_write_text(p, "two")
    assert p.read_text() == "two"
    assert [f.name for f in tmp_path.iterdir()] == ["f.txt"]


def test_append_line_is_whole_lines(tmp_path):
    p = tmp_path / "m.jsonl"
    threads = [threading.Thread(target=lambda i=i: [append_line(p, json.dumps({"i": i, "k": k})) for k in range(50)])
               for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    rows = [json.loads(l) for l in p.read_text().splitlines()]
    assert len(rows) == 200


def test_run_dir_lock(tmp_path):
    with RunDirLock(tmp_path / "r"):
        with pytest.raises(UsageError):
            with RunDirLock(tmp_path / "r"):
                pass
    with RunDirLock(tmp_path / "r"):
        pass
