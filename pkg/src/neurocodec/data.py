"""Dataset directories and model-ready sample items."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .eegio import PatchGrid, PreprocessConfig, patchify, preprocess, read_recording, segment, write_recording
from .errors import DataError
from .spectrum import SpectrumTarget, target_from_patches
from .synth import plan_batches

LABELS_FILE = "labels.csv"


@dataclass
class Item:
    grid: PatchGrid
    label: float | int | None
    rec_id: str
    target: SpectrumTarget | None = None


def write_dataset(directory, labeled) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    with open(directory / LABELS_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "label"])
        for rec, label in labeled:
            name = f"{rec.id or f'rec{len(paths):05d}'}.eegr"
            write_recording(directory / name, rec)
            w.writerow([name, ";".join(map(str, label)) if isinstance(label, (tuple, list)) else label])
            paths.append(directory / name)
    return paths


def read_dataset(directory):
    """[(recording, label)] in labels.csv order.

    Labels parse as int when possible, else float; ``a;b;c`` gives a
    tuple of regression targets.
    """
    directory = Path(directory)
    lf = directory / LABELS_FILE
    if not lf.exists():
        raise DataError(f"{lf} not found")
    out = []
    with open(lf, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = read_recording(directory / row["filename"])
            rec.meta.setdefault("id", Path(row["filename"]).stem)
            out.append((rec, _parse_label(row["label"], lf)))
    return out


def _parse_label(raw: str, where):
    try:
        if ";" in raw:
            return tuple(float(x) for x in raw.split(";"))
        try:
            return int(raw)
        except ValueError:
            return float(raw)
    except ValueError:
        raise DataError(f"{where}: unparseable label {raw!r}") from None


def build_items(labeled, window: int, stride: int, patch_w: int,
                pre: PreprocessConfig | None = PreprocessConfig(), targets: bool = False) -> list[Item]:
    items = []
    for rec, label in labeled:
        if pre is not None:
            rec = preprocess(rec, pre)
        for sample in segment(rec, window, stride):
            grid = patchify(sample, patch_w)
            tgt = target_from_patches(grid.patches) if targets else None
            items.append(Item(grid, label, rec.id, tgt))
    return items


def collate(items, dtype=torch.float32) -> dict:
    keys = {it.grid.shape_key for it in items}
    if len(keys) != 1:
        raise DataError(f"batch mixes shapes {sorted(keys)}")
    batch = {
        "x": torch.from_numpy(np.stack([it.grid.patches for it in items])).to(dtype),
        "chan": torch.from_numpy(np.stack([it.grid.chan_idx for it in items])),
        "time": torch.from_numpy(np.stack([it.grid.time_idx for it in items])),
    }
    if items[0].target is not None:
        batch["amp"] = torch.from_numpy(np.stack([it.target.amplitude for it in items])).to(dtype)
        batch["phase"] = torch.from_numpy(np.stack([it.target.phase for it in items])).to(dtype)
    if items[0].label is not None:
        batch["label"] = torch.tensor([it.label for it in items])
    return batch


def batches(items, batch_size: int, seed: int, dtype=torch.float32):
    plan = plan_batches([it.grid.shape_key for it in items], batch_size, seed)
    for idx in plan:
        yield collate([items[i] for i in idx], dtype)


def eval_batches(items, batch_size: int, dtype=torch.float32) -> list[dict]:
    """Deterministic batches (fixed plan seed) for evaluation passes."""
    return list(batches(items, batch_size, seed=0, dtype=dtype))
