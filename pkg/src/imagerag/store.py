"""Text-keyed vector databases (labeled + captioned) for the slow path.

Each database is a directory holding an append-only log of length-prefixed
item entries, a human-readable key manifest, and a version file. Records are
materialized in memory at open: one ConceptRecord per key text, with the
key's sentence embedding and every image embedding ingested under it.

Ingestion deduplicates items by 64-bit difference hash (exact match),
applies the zoom-out crop around object boxes, and converts segmentation
polygons to tight boxes first. Lookup is an exact L2 scan over key
embeddings with a strict distance threshold.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .embeddings import unit_normalize
from .errors import DataError, DegenerateProxyError
from .imaging import Box

logger = logging.getLogger(__name__)

_LOG_NAME = "records.log"
_MANIFEST_NAME = "keys.manifest"
_VERSION_NAME = "version"
_VERSION = 1

DB_LRSD = "LRSD"
DB_CRSD = "CRSD"


class ProxyMethod(str, Enum):
    PROTOTYPE = "prototype"
    CLUSTERING = "clustering"
    RERANKING = "reranking"


@dataclass
class ConceptRecord:
    """One database entry: a text key plus the image embeddings filed under it."""

    key_text: str
    key_embedding: np.ndarray
    image_embeddings: list[np.ndarray] = field(default_factory=list)
    source_db: str = DB_LRSD
    provenance: list[tuple[str, str]] = field(default_factory=list)  # (dataset, id)

    @property
    def count(self) -> int:
        return len(self.image_embeddings)

    def matrix(self) -> np.ndarray:
        return np.stack(self.image_embeddings)


@dataclass(frozen=True)
class ProxyEmbedding:
    label: str
    vector: np.ndarray
    method: ProxyMethod
    support_count: int

    def __post_init__(self):
        if self.support_count < 1:
            raise DataError("proxy support_count must be >= 1")


@dataclass(frozen=True)
class IngestItem:
    """One corpus object: an image (or region of one) plus its key text."""

    image_path: str
    key_text: str
    dataset: str
    box: Box | None = None
    polygon: tuple[tuple[float, float], ...] | None = None
    item_id: str = ""


@dataclass
class IngestReport:
    db: str
    per_dataset: dict[str, int] = field(default_factory=dict)
    duplicates_removed: int = 0
    skipped_unreadable: int = 0
    new_keys: int = 0
    new_embeddings: int = 0

    def as_dict(self) -> dict:
        return {
            "db": self.db,
            "per_dataset": dict(sorted(self.per_dataset.items())),
            "duplicates_removed": self.duplicates_removed,
            "skipped_unreadable": self.skipped_unreadable,
            "new_keys": self.new_keys,
            "new_embeddings": self.new_embeddings,
        }


@dataclass(frozen=True)
class LookupHit:
    record: ConceptRecord
    distance: float
    phrase: str


# ---------------------------------------------------------------------------
# Geometry helpers for ingestion
# ---------------------------------------------------------------------------


def polygon_to_box(polygon: Iterable[tuple[float, float]]) -> Box:
    """Tight bounding box of a segmentation polygon."""
    xs, ys = zip(*polygon)
    x1, y1 = int(math.floor(min(xs))), int(math.floor(min(ys)))
    x2, y2 = int(math.ceil(max(xs))), int(math.ceil(max(ys)))
    return Box(max(0, x1), max(0, y1), max(x2, x1 + 1), max(y2, y1 + 1))


def zoom_out_box(box: Box, ratio: float, width: int, height: int) -> Box:
    """Scale a box about its center by ``ratio`` and clamp to image bounds."""
    if ratio < 1.0:
        raise DataError("zoom-out ratio must be >= 1")
    cx = (box.x1 + box.x2) / 2.0
    cy = (box.y1 + box.y2) / 2.0
    nw = box.width * ratio
    nh = box.height * ratio
    x1 = int(round(cx - nw / 2.0))
    y1 = int(round(cy - nh / 2.0))
    x2 = x1 + int(round(nw))
    y2 = y1 + int(round(nh))
    x1, y1 = max(0, x1), max(0, y1)
    x2, y2 = min(width, x2), min(height, y2)
    return Box(x1, y1, max(x2, x1 + 1), max(y2, y1 + 1))


def dhash64(pixels: np.ndarray) -> int:
    """64-bit difference hash: 9x8 grayscale resize, compare adjacent columns."""
    img = Image.fromarray(pixels).convert("L").resize(
        (9, 8), resample=Image.Resampling.LANCZOS
    )
    arr = np.asarray(img, dtype=np.int16)
    bits = (arr[:, 1:] > arr[:, :-1]).flatten()
    value = 0
    for bit in bits:
        value = (value << 1) | int(bit)
    return value


# ---------------------------------------------------------------------------
# Proxy selection functions
# ---------------------------------------------------------------------------


def proxy_prototype(record: ConceptRecord) -> ProxyEmbedding:
    """Unit-normalized mean of all image embeddings under the key."""
    if record.count < 1:
        raise DataError(f"record {record.key_text!r} has no image embeddings")
    mean = record.matrix().mean(axis=0)
    if float(np.linalg.norm(mean)) < 1e-9:
        raise DegenerateProxyError(
            f"embeddings for {record.key_text!r} cancel to a zero mean"
        )
    return ProxyEmbedding(
        label=record.key_text,
        vector=unit_normalize(mean),
        method=ProxyMethod.PROTOTYPE,
        support_count=record.count,
    )


def proxy_clustering(
    record: ConceptRecord, eps: float = 0.3, min_samples: int = 5
) -> ProxyEmbedding:
    """Normalized mean of the largest density cluster (DBSCAN, L2 metric).

    All-noise inputs fall back to the prototype with a warning. Requires at
    least ``min_samples`` embeddings.
    """
    if record.count < min_samples:
        raise DataError(
            f"record {record.key_text!r} has {record.count} embeddings, "
            f"needs >= {min_samples} for clustering"
        )
    from sklearn.cluster import DBSCAN

    matrix = record.matrix()
    labels = DBSCAN(eps=eps, min_samples=min_samples, metric="euclidean").fit(
        matrix
    ).labels_
    cluster_ids = [lbl for lbl in set(labels) if lbl != -1]
    if not cluster_ids:
        logger.warning(
            "no density cluster for %r (all noise); falling back to prototype",
            record.key_text,
        )
        return proxy_prototype(record)
    sizes = {lbl: int((labels == lbl).sum()) for lbl in cluster_ids}
    best = min(cluster_ids, key=lambda lbl: (-sizes[lbl], lbl))
    members = matrix[labels == best]
    mean = members.mean(axis=0)
    if float(np.linalg.norm(mean)) < 1e-9:
        raise DegenerateProxyError(
            f"largest cluster for {record.key_text!r} cancels to a zero mean"
        )
    return ProxyEmbedding(
        label=record.key_text,
        vector=unit_normalize(mean),
        method=ProxyMethod.CLUSTERING,
        support_count=int(sizes[best]),
    )


def proxy_reranking(record: ConceptRecord, phrase_vec: np.ndarray) -> ProxyEmbedding:
    """Normalized mean of the top-3 embeddings by cosine against the phrase's
    fast-path text feature; ties keep earlier ingestion order."""
    if record.count < 1:
        raise DataError(f"record {record.key_text!r} has no image embeddings")
    matrix = record.matrix()
    sims = matrix @ np.asarray(phrase_vec, dtype=np.float32)
    order = sorted(range(record.count), key=lambda i: (-float(sims[i]), i))
    top = order[: min(3, record.count)]
    mean = matrix[top].mean(axis=0)
    if float(np.linalg.norm(mean)) < 1e-9:
        raise DegenerateProxyError(
            f"top embeddings for {record.key_text!r} cancel to a zero mean"
        )
    return ProxyEmbedding(
        label=record.key_text,
        vector=unit_normalize(mean),
        method=ProxyMethod.RERANKING,
        support_count=len(top),
    )


# ---------------------------------------------------------------------------
# The on-disk store
# ---------------------------------------------------------------------------


def _write_entry(fh, kind: bytes, meta: dict, payload: np.ndarray) -> None:
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    vec_raw = np.ascontiguousarray(payload, dtype=np.float32).tobytes()
    body = kind + struct.pack("<I", len(meta_raw)) + meta_raw + vec_raw
    fh.write(struct.pack("<I", len(body)))
    fh.write(body)


def _iter_entries(path: Path):
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                return
            (length,) = struct.unpack("<I", head)
            body = fh.read(length)
            if len(body) != length:
                raise DataError(f"{path}: truncated log entry")
            kind = body[:1]
            (meta_len,) = struct.unpack_from("<I", body, 1)
            meta = json.loads(body[5 : 5 + meta_len].decode("utf-8"))
            vec = np.frombuffer(body[5 + meta_len :], dtype=np.float32).copy()
            yield kind, meta, vec


class VectorStore:
    """One database directory (LRSD or CRSD).

    Readers iterate an immutable snapshot; ingest is single-writer and swaps
    the snapshot in only after the log write succeeded, so concurrent lookups
    see the pre-ingest state.
    """

    def __init__(self, root: str | Path, db: str):
        if db not in (DB_LRSD, DB_CRSD):
            raise DataError(f"unknown database name {db!r}")
        self.db = db
        self.root = Path(root) / db
        self.root.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()
        self._records: dict[str, ConceptRecord] = {}
        self._hashes: set[int] = set()
        self._snapshot: tuple[ConceptRecord, ...] = ()
        self._load()

    # -- persistence ---------------------------------------------------------

    def _load(self) -> None:
        version_file = self.root / _VERSION_NAME
        log_file = self.root / _LOG_NAME
        if version_file.exists():
            version = int(version_file.read_text().strip())
            if version != _VERSION:
                raise DataError(f"{self.root}: unsupported store version {version}")
        else:
            version_file.write_text(f"{_VERSION}\n")
        if log_file.exists():
            try:
                for kind, meta, vec in _iter_entries(log_file):
                    self._apply_entry(kind, meta, vec)
            except (json.JSONDecodeError, struct.error) as exc:
                raise DataError(f"{log_file}: corrupt record log: {exc}")
        self._snapshot = tuple(self._records.values())

    def _apply_entry(self, kind: bytes, meta: dict, vec: np.ndarray) -> None:
        if kind == b"K":
            if meta["key"] not in self._records:
                self._records[meta["key"]] = ConceptRecord(
                    key_text=meta["key"],
                    key_embedding=vec,
                    source_db=self.db,
                )
        elif kind == b"I":
            record = self._records.get(meta["key"])
            if record is None:
                raise DataError(f"image entry for unknown key {meta['key']!r}")
            record.image_embeddings.append(vec)
            record.provenance.append((meta.get("dataset", ""), meta.get("id", "")))
            self._hashes.add(int(meta["dhash"]))
        else:
            raise DataError(f"unknown log entry kind {kind!r}")

    def _write_manifest(self) -> None:
        lines = []
        for record in self._records.values():
            datasets = sorted({d for d, _ in record.provenance})
            lines.append(
                f"{record.key_text}\t{len(record.key_embedding)}\t{','.join(datasets)}\n"
            )
        (self.root / _MANIFEST_NAME).write_text("".join(lines), encoding="utf-8")

    # -- accessors -------------------------------------------------------------

    @property
    def records(self) -> tuple[ConceptRecord, ...]:
        return self._snapshot

    def __len__(self) -> int:
        return len(self._snapshot)

    def get(self, key_text: str) -> ConceptRecord | None:
        for record in self._snapshot:
            if record.key_text == key_text:
                return record
        return None

    # -- ingestion ---------------------------------------------------------------

    def ingest(
        self,
        items: Iterable[IngestItem],
        image_embed,
        sentence_embed,
        zoom_out_ratio: float = 1.3,
        dedup_radius: int = 0,
        max_per_key: int | None = None,
    ) -> IngestReport:
        """Embed and file every non-duplicate item under its key text.

        ``image_embed(pixels, key)`` and ``sentence_embed(text)`` are
        callables returning unit vectors (wire the gateway's methods in).
        Dedup is exact 64-bit hash match by default; ``dedup_radius`` > 0
        also drops items within that Hamming distance of a seen hash.
        ``max_per_key`` caps how many embeddings a key accumulates.
        """
        report = IngestReport(db=self.db)
        with self._write_lock:
            log_file = self.root / _LOG_NAME
            with open(log_file, "ab") as fh:
                for item in items:
                    try:
                        pixels = self._load_region(item, zoom_out_ratio)
                    except DataError as exc:
                        logger.warning("skipping unreadable item %s: %s", item.item_id, exc)
                        report.skipped_unreadable += 1
                        continue
                    fingerprint = dhash64(pixels)
                    if self._is_duplicate(fingerprint, dedup_radius):
                        report.duplicates_removed += 1
                        continue
                    existing = self._records.get(item.key_text)
                    if (
                        max_per_key is not None
                        and existing is not None
                        and existing.count >= max_per_key
                    ):
                        logger.debug(
                            "key %r reached the per-key cap (%d); item dropped",
                            item.key_text, max_per_key,
                        )
                        continue
                    vec = image_embed(pixels, item.item_id or None)
                    record = self._records.get(item.key_text)
                    if record is None:
                        key_vec = unit_normalize(sentence_embed(item.key_text))
                        _write_entry(fh, b"K", {"key": item.key_text}, key_vec)
                        record = ConceptRecord(
                            key_text=item.key_text,
                            key_embedding=key_vec,
                            source_db=self.db,
                        )
                        self._records[item.key_text] = record
                        report.new_keys += 1
                    _write_entry(
                        fh,
                        b"I",
                        {
                            "key": item.key_text,
                            "dataset": item.dataset,
                            "id": item.item_id,
                            "dhash": fingerprint,
                        },
                        vec,
                    )
                    record.image_embeddings.append(vec)
                    record.provenance.append((item.dataset, item.item_id))
                    self._hashes.add(fingerprint)
                    report.per_dataset[item.dataset] = (
                        report.per_dataset.get(item.dataset, 0) + 1
                    )
                    report.new_embeddings += 1
            self._write_manifest()
            self._snapshot = tuple(self._records.values())
        if len(self._snapshot) == 0:
            logger.warning("database %s is empty after ingestion", self.db)
        return report

    def _is_duplicate(self, fingerprint: int, radius: int) -> bool:
        if fingerprint in self._hashes:
            return True
        if radius > 0:
            for seen in self._hashes:
                if bin(fingerprint ^ seen).count("1") <= radius:
                    return True
        return False

    def _load_region(self, item: IngestItem, zoom_out_ratio: float) -> np.ndarray:
        try:
            with Image.open(item.image_path) as img:
                rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
        except Exception as exc:
            raise DataError(f"cannot read {item.image_path}: {exc}")
        height, width = rgb.shape[:2]
        box = item.box
        if box is None and item.polygon is not None:
            box = polygon_to_box(item.polygon)
        if box is None:
            return rgb  # classification source: whole image
        box = Box(
            min(box.x1, width - 1),
            min(box.y1, height - 1),
            min(box.x2, width),
            min(box.y2, height),
        )
        zoomed = zoom_out_box(box, zoom_out_ratio, width, height)
        return np.array(rgb[zoomed.y1 : zoomed.y2, zoomed.x1 : zoomed.x2], copy=True)

    # -- lookup --------------------------------------------------------------------

    def lookup(self, phrases: Iterable[str], sentence_embed, delta: float) -> list[LookupHit]:
        """Keys whose sentence embedding lies strictly within L2 ``delta`` of
        any phrase embedding; deduplicated, ordered by ascending distance."""
        if delta <= 0:
            raise DataError("delta must be positive")
        snapshot = self._snapshot
        if not snapshot:
            return []
        best: dict[str, LookupHit] = {}
        order: dict[str, int] = {}
        for phrase in phrases:
            qvec = unit_normalize(sentence_embed(phrase))
            for idx, record in enumerate(snapshot):
                dist = float(np.linalg.norm(record.key_embedding - qvec))
                if dist < delta:
                    prev = best.get(record.key_text)
                    if prev is None or dist < prev.distance:
                        best[record.key_text] = LookupHit(record, dist, phrase)
                        order.setdefault(record.key_text, idx)
        hits = list(best.values())
        hits.sort(key=lambda h: (h.distance, order[h.record.key_text]))
        return hits


def read_ingest_manifest(path: str | Path) -> list[IngestItem]:
    """Parse the tab-delimited ingestion manifest:
    image_path, label-or-caption, dataset, [x1 y1 x2 y2]."""
    items = []
    base = Path(path).parent
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise DataError(
                    f"{path}:{lineno}: expected 3 or 4 tab-separated fields"
                )
            image_path, key_text, dataset = parts[:3]
            box = None
            if len(parts) == 4 and parts[3].strip():
                coords = [int(v) for v in parts[3].split()]
                if len(coords) != 4:
                    raise DataError(f"{path}:{lineno}: box needs 4 integers")
                box = Box(*coords)
            resolved = Path(image_path)
            if not resolved.is_absolute():
                resolved = base / resolved
            items.append(
                IngestItem(
                    image_path=str(resolved),
                    key_text=key_text,
                    dataset=dataset,
                    box=box,
                    item_id=f"{dataset}:{lineno}",
                )
            )
    return items
