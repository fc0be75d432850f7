import json
from pathlib import Path

import pytest

from mgtkit.corpus import Corpus, Record

REPO = Path(__file__).resolve().parent.parent
DESCRIPTORS = REPO / "descriptors"
CONFIGS = REPO / "configs"


def write_jsonl(path: Path, rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")
    return path


def make_row(i: int, label: int = 0, **overrides) -> dict:
    row = {
        "id": f"r{i}",
        "text": f"sample text number {i} with a few words",
        "label": label,
        "model": "human" if label == 0 else "toygen",
        "source": "hc3",
        "lang": "en",
    }
    row.update(overrides)
    return row


def corpus_from_records(records, split="train") -> Corpus:
    return Corpus(records=tuple(records), path=f"memory://{split}", digest="0" * 64)


def make_record(i: int, label: int = 0, **overrides) -> Record:
    fields = dict(
        id=f"m{i}",
        text=f"in-memory record {i}",
        label=label,
        source="hc3",
        generator="human" if label == 0 else "toygen",
        language="en",
        split="train",
    )
    fields.update(overrides)
    return Record(**fields)


@pytest.fixture()
def tiny_corpus_file(tmp_path):
    rows = [make_row(0, 0), make_row(1, 1), make_row(2, 0)]
    return write_jsonl(tmp_path / "tiny.jsonl", rows)
