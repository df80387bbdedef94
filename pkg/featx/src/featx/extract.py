"""Encode collected images into the core's containers.

Embeddings: one row per fetched manifest record, in manifest order, at
256x256 decode resolution. Undecodable or missing images are skipped and
logged so the core can exclude them. Confidences: a linear head is trained
on the frozen backbone features for at most two passes (early stop on a
held-out slice), exploiting the fact that models fit clean data before
memorizing noisy labels, then softmax rows are written for every encoded
sample.

Everything is seeded and single-threaded, so re-extraction with the same
job produces byte-identical files.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbones import build_backbone
from .formats import read_manifest, write_embeddings, write_probabilities

log = logging.getLogger(__name__)

IMAGE_SIZE = 256


@dataclass
class ExtractionJob:
    manifest_path: Path
    image_root: Path
    output_path: Path
    backbone: str = "resnet50"
    batch_size: int = 32
    seed: int = 0
    head_lr: float = 0.5
    head_batch_size: int = 8
    val_fraction: float = 0.1
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.manifest_path = Path(self.manifest_path)
        self.image_root = Path(self.image_root)
        self.output_path = Path(self.output_path)


def _image_path(job: ExtractionJob, row) -> Path | None:
    # content-store layout first, then the record URI as a direct file path
    if row.content_hash:
        candidate = job.image_root / row.content_hash[:2] / f"{row.content_hash}.bin"
        if candidate.exists():
            return candidate
    uri = Path(row.uri)
    if uri.exists():
        return uri
    return None


def _decode(path: Path) -> torch.Tensor | None:
    try:
        with Image.open(io.BytesIO(path.read_bytes())) as img:
            rgb = img.convert("RGB").resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
    except Exception:  # noqa: BLE001 - any decode failure means skip
        return None
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def _encode_fetched(job: ExtractionJob) -> tuple[np.ndarray, list[str], list[int]]:
    torch.set_num_threads(1)
    torch.manual_seed(job.seed)
    model, dim = build_backbone(job.backbone, seed=job.seed)
    rows = [r for r in read_manifest(job.manifest_path) if r.fetch_status == "fetched"]
    features: list[np.ndarray] = []
    ids: list[str] = []
    labels: list[int] = []
    batch: list[torch.Tensor] = []

    def flush():
        if not batch:
            return
        with torch.no_grad():
            out = model(torch.stack(batch)).to(torch.float32).numpy()
        features.extend(out)
        batch.clear()

    job.skipped.clear()
    for row in rows:
        path = _image_path(job, row)
        tensor = _decode(path) if path is not None else None
        if tensor is None:
            job.skipped.append(row.sample_id)
            log.warning("skipping %s: missing or undecodable image", row.sample_id)
            continue
        batch.append(tensor)
        ids.append(row.sample_id)
        labels.append(row.webly_label)
        if len(batch) == job.batch_size:
            flush()
    flush()
    if not ids:
        raise RuntimeError("no decodable images in the manifest")
    matrix = np.stack(features).astype(np.float32)
    if not np.isfinite(matrix).all():
        raise RuntimeError("backbone produced non-finite features")
    return matrix, ids, labels


def extract_embeddings(job: ExtractionJob) -> list[str]:
    """Write the embedding container; returns the ids encoded, in order."""
    matrix, ids, _ = _encode_fetched(job)
    write_embeddings(matrix, ids, job.output_path)
    if job.skipped:
        skip_path = Path(str(job.output_path) + ".skipped")
        skip_path.write_text("".join(f"{sid}\n" for sid in job.skipped), encoding="utf-8")
        log.warning("%d samples skipped; ids listed in %s", len(job.skipped), skip_path)
    return ids


def extract_confidences(job: ExtractionJob, epochs: int = 2) -> list[str]:
    """Early-stopped linear-head confidences, written as an ADCP container."""
    if not 1 <= epochs <= 2:
        raise ValueError("epochs must be 1 or 2")
    matrix, ids, labels = _encode_fetched(job)
    torch.manual_seed(job.seed + 1)
    feats = torch.from_numpy(matrix)
    # standardize so the head's optimization is scale-free
    feats = (feats - feats.mean(dim=0)) / feats.std(dim=0).clamp_min(1e-6)
    targets = torch.tensor(labels, dtype=torch.long)
    n, dim = feats.shape
    n_classes = int(targets.max().item()) + 1
    head = torch.nn.Linear(dim, n_classes)
    opt = torch.optim.Adam(head.parameters(), lr=job.head_lr)
    loss_fn = torch.nn.CrossEntropyLoss()

    generator = torch.Generator().manual_seed(job.seed + 2)
    order = torch.randperm(n, generator=generator)
    n_val = max(1, int(n * job.val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.numel() == 0:
        train_idx = val_idx

    def val_loss() -> float:
        with torch.no_grad():
            return float(loss_fn(head(feats[val_idx]), targets[val_idx]))

    best = val_loss()
    best_state = {k: v.clone() for k, v in head.state_dict().items()}
    for epoch in range(epochs):
        perm = train_idx[torch.randperm(train_idx.numel(), generator=generator)]
        for start in range(0, perm.numel(), job.head_batch_size):
            idx = perm[start : start + job.head_batch_size]
            opt.zero_grad()
            loss = loss_fn(head(feats[idx]), targets[idx])
            if not torch.isfinite(loss):
                raise RuntimeError(f"training diverged at epoch {epoch}")
            loss.backward()
            opt.step()
        current = val_loss()
        if current < best:
            best = current
            best_state = {k: v.clone() for k, v in head.state_dict().items()}
        else:
            log.info("early stop after epoch %d (val loss %.4f >= %.4f)", epoch + 1, current, best)
            break
    head.load_state_dict(best_state)
    with torch.no_grad():
        probs = torch.softmax(head(feats).to(torch.float64), dim=1)
        probs = probs / probs.sum(dim=1, keepdim=True)
    write_probabilities(probs.numpy().astype(np.float32), ids, job.output_path)
    return ids
