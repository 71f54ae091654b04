import csv
from pathlib import Path

import numpy as np
import pytest

from latefuse.data import ModalityTable, MultiModalDataset


def write_csv(path: Path, header: list, rows: list) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def make_table(name="M", values=None, sample_ids=None, feature_names=None) -> ModalityTable:
    values = np.asarray(values, dtype=np.float64)
    n, f = values.shape
    return ModalityTable(
        modality_name=name,
        sample_ids=sample_ids or [f"s{i}" for i in range(n)],
        feature_names=feature_names or [f"{name.lower()}_f{j}" for j in range(f)],
        values=values,
    )


def make_dataset(tables, labels, class_names=None) -> MultiModalDataset:
    labels = np.asarray(labels, dtype=np.intp)
    if class_names is None:
        class_names = [f"C{k}" for k in range(int(labels.max()) + 1)]
    return MultiModalDataset(
        modalities=list(tables),
        labels=labels,
        class_names=class_names,
        sample_ids=list(tables[0].sample_ids),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
