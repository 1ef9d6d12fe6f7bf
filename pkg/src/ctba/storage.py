"""Out-of-core scan access and file formats.

A dataset directory looks like::

    root/manifest.json
    root/scan_<idx>.ctba
    root/cache/<param-hash>/scan_<idx>.ctba   # preprocessed (normals, subsampled)

Scans are read through :class:`ScanStore`, which keeps at most ``capacity``
scans in memory and evicts the least recently used one on a miss.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Generic, Hashable, Iterable, Iterator, Optional, Sequence, TypeVar

import numpy as np

from .geometry import Trajectory
from .pointcloud import Scan

log = logging.getLogger(__name__)

MAGIC = b"CTBA"
VERSION = 1
_HEADER = struct.Struct("<4sIQddI")
FLAG_NORMALS = 1


class FormatError(ValueError):
    """Malformed scan, manifest or pose file."""


# --------------------------------------------------------------------------
# scan files
# --------------------------------------------------------------------------


def write_scan(path, scan: Scan) -> None:
    path = Path(path)
    flags = FLAG_NORMALS if scan.normals is not None else 0
    body = np.empty((len(scan), 4), dtype="<f8")
    body[:, :3] = scan.points
    body[:, 3] = scan.times
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(scan), scan.t_b, scan.t_e, flags))
        f.write(body.tobytes())
        if scan.normals is not None:
            f.write(np.ascontiguousarray(scan.normals, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_scan(path, index: Optional[int] = None) -> Scan:
    """Read a ``.ctba`` scan; ``index`` defaults to the number in the file name."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at byte {len(data)}, expected {_HEADER.size} bytes")
    magic, version, count, t_b, t_e, flags = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    per_point = 4 + (3 if flags & FLAG_NORMALS else 0)
    expected = _HEADER.size + 8 * per_point * count
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)} (body starts at byte {_HEADER.size})")
    off = _HEADER.size
    body = np.frombuffer(data, dtype="<f8", count=4 * count, offset=off).reshape(count, 4)
    normals = None
    if flags & FLAG_NORMALS:
        normals = np.frombuffer(data, dtype="<f8", count=3 * count, offset=off + 32 * count).reshape(count, 3)
    if index is None:
        stem = path.stem
        index = int(stem.split("_")[-1]) if stem.startswith("scan_") else -1
    return Scan(index, body[:, :3], body[:, 3], t_b, t_e, normals)


def scan_filename(index: int) -> str:
    return f"scan_{index}.ctba"


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanEntry:
    index: int
    file: str
    point_count: int
    t_b: float
    t_e: float
    session_id: int = 0


def write_manifest(root, entries: Sequence[ScanEntry]) -> None:
    root = Path(root)
    doc = {
        "version": VERSION,
        "sessions": sorted({e.session_id for e in entries}),
        "scans": [asdict(e) for e in entries],
    }
    (root / "manifest.json").write_text(json.dumps(doc, indent=1))


def read_manifest(root) -> list[ScanEntry]:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
        entries = [ScanEntry(**e) for e in doc["scans"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if [e.index for e in entries] != list(range(len(entries))):
        raise FormatError(f"{path}: scan indices must be 0..N-1 in order")
    return entries


def write_dataset(root, scans: Sequence[Scan], session_ids: Optional[Sequence[int]] = None) -> list[ScanEntry]:
    """Write scans plus manifest into ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if session_ids is None:
        session_ids = [0] * len(scans)
    entries = []
    for scan, sid in zip(scans, session_ids):
        name = scan_filename(scan.index)
        write_scan(root / name, scan)
        entries.append(ScanEntry(scan.index, name, len(scan), scan.t_b, scan.t_e, int(sid)))
    write_manifest(root, entries)
    return entries


# --------------------------------------------------------------------------
# pose files
# --------------------------------------------------------------------------


def _fmt_time(t: float) -> str:
    for digits in range(9, 30):
        s = f"{t:.{digits}f}"
        if float(s) == t:
            return s
    return repr(t)


def write_pose_file(path, traj: Trajectory) -> None:
    """One knot per line: ``timestamp tx ty tz qx qy qz qw session_id``."""
    lines = ["# timestamp tx ty tz qx qy qz qw session_id"]
    for q, t, ts, sid in zip(traj.quats, traj.translations, traj.timestamps, traj.session_ids):
        vals = [t[0], t[1], t[2], q[1], q[2], q[3], q[0]]
        lines.append(" ".join([_fmt_time(float(ts))] + [repr(float(v)) for v in vals] + [str(int(sid))]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_pose_file(path) -> Trajectory:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"pose file not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 9:
            raise FormatError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
        try:
            vals = [float(x) for x in parts[:8]]
            sid = int(parts[8])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        rows.append((vals, sid))
    if not rows:
        raise FormatError(f"{path}: no poses")
    ts = [r[0][0] for r in rows]
    trans = [r[0][1:4] for r in rows]
    quats = [[r[0][7], r[0][4], r[0][5], r[0][6]] for r in rows]
    try:
        return Trajectory(quats, trans, ts, [r[1] for r in rows])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def check_trajectory(traj: Trajectory, entries: Sequence[ScanEntry], tol: float = 1e-6) -> None:
    """Verify that scans and trajectory agree on count, sessions and timing."""
    if traj.n_scans != len(entries):
        raise FormatError(f"trajectory describes {traj.n_scans} scans, manifest lists {len(entries)}")
    for e in entries:
        t_b, t_e = traj.scan_window(e.index)
        if int(traj.scan_session[e.index]) != e.session_id:
            raise FormatError(f"scan {e.index}: session {e.session_id} in manifest, {traj.scan_session[e.index]} in poses")
        if abs(t_b - e.t_b) > tol or abs(t_e - e.t_e) > tol:
            raise FormatError(f"scan {e.index}: window [{e.t_b}, {e.t_e}] does not match knots [{t_b}, {t_e}]")


# --------------------------------------------------------------------------
# LRU buffer
# --------------------------------------------------------------------------

K = TypeVar("K", bound=Hashable)
V = TypeVar("V")


class LRUBuffer(Generic[K, V]):
    """Fixed-capacity cache with least-recently-used eviction and pinning.

    ``capacity=None`` means unbounded. Pinned entries count against the
    capacity but are never evicted.
    """

    def __init__(self, capacity: Optional[int] = None):
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._data: OrderedDict[K, V] = OrderedDict()
        self._pins: dict[K, int] = {}
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        # largest number of resident entries ever observed
        self.peak = 0

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, key) -> bool:
        return key in self._data

    def keys(self) -> list[K]:
        """Resident keys, least recently used first."""
        return list(self._data)

    def get(self, key: K, load: Callable[[K], V]) -> V:
        if key in self._data:
            self.hits += 1
            self._data.move_to_end(key)
            return self._data[key]
        self.misses += 1
        value = load(key)
        if self.capacity is not None and len(self._data) >= self.capacity:
            self._evict_one()
        self._data[key] = value
        assert self.capacity is None or len(self._data) <= self.capacity
        self.peak = max(self.peak, len(self._data))
        return value

    def _evict_one(self) -> None:
        for key in self._data:
            if not self._pins.get(key):
                del self._data[key]
                self.evictions += 1
                return
        raise BufferError(f"all {len(self._data)} buffered entries are pinned")

    @contextmanager
    def pinned(self, key: K, load: Callable[[K], V]) -> Iterator[V]:
        value = self.get(key, load)
        self._pins[key] = self._pins.get(key, 0) + 1
        try:
            yield value
        finally:
            self._pins[key] -= 1
            if not self._pins[key]:
                del self._pins[key]

    def clear(self) -> None:
        if self._pins:
            raise BufferError("cannot clear while entries are pinned")
        self._data.clear()


# --------------------------------------------------------------------------
# scan store
# --------------------------------------------------------------------------


def param_hash(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:16]


class ScanStore:
    """Disk-backed scan source with an LRU buffer of ``capacity`` scans.

    If ``preprocess`` is given, scans are returned preprocessed; the result
    is cached on disk under ``cache/<hash of preprocess_params>/`` so that
    later runs skip the work.
    """

    def __init__(
        self,
        root,
        capacity: Optional[int] = 1000,
        preprocess: Optional[Callable[[Scan], Scan]] = None,
        preprocess_params: Optional[dict] = None,
    ):
        self.root = Path(root)
        self.entries = read_manifest(self.root)
        self.buffer: LRUBuffer[int, Scan] = LRUBuffer(capacity)
        self.preprocess = preprocess
        self.cache_dir = None
        if preprocess is not None:
            self.cache_dir = self.root / "cache" / param_hash(preprocess_params or {})

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def capacity(self) -> Optional[int]:
        return self.buffer.capacity

    @property
    def hits(self) -> int:
        return self.buffer.hits

    @property
    def misses(self) -> int:
        return self.buffer.misses

    @property
    def evictions(self) -> int:
        return self.buffer.evictions

    @property
    def session_ids(self) -> list[int]:
        return [e.session_id for e in self.entries]

    def _entry(self, index: int) -> ScanEntry:
        if not 0 <= index < len(self.entries):
            raise IndexError(f"scan index {index} out of range (dataset has {len(self.entries)} scans)")
        return self.entries[index]

    def read_raw(self, index: int) -> Scan:
        entry = self._entry(index)
        path = self.root / entry.file
        try:
            scan = read_scan(path, index)
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"scan {index}: missing file {path}") from exc
        except (FormatError, ValueError) as exc:
            raise FormatError(f"scan {index}: {exc}") from exc
        if len(scan) != entry.point_count:
            raise FormatError(f"scan {index}: manifest lists {entry.point_count} points, file has {len(scan)}")
        return scan

    def _load(self, index: int) -> Scan:
        if self.preprocess is None:
            return self.read_raw(index)
        cached = self.cache_dir / scan_filename(index)
        if cached.exists():
            return read_scan(cached, index)
        scan = self.preprocess(self.read_raw(index))
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        write_scan(cached, scan)
        # return exactly what later cache hits will return
        return read_scan(cached, index)

    def get(self, index: int) -> Scan:
        self._entry(index)
        return self.buffer.get(index, self._load)

    @contextmanager
    def pinned(self, index: int) -> Iterator[Scan]:
        self._entry(index)
        with self.buffer.pinned(index, self._load) as scan:
            yield scan

    def resident(self) -> list[int]:
        return self.buffer.keys()


class MemoryScans:
    """In-memory scan source with the same ``get``/``pinned`` surface."""

    def __init__(self, scans: Iterable[Scan]):
        self.scans = list(scans)

    def __len__(self) -> int:
        return len(self.scans)

    def get(self, index: int) -> Scan:
        if not 0 <= index < len(self.scans):
            raise IndexError(f"scan index {index} out of range")
        return self.scans[index]

    @contextmanager
    def pinned(self, index: int) -> Iterator[Scan]:
        yield self.get(index)


def iteration_order(iteration: int, n_scans: int) -> list[int]:
    """Ascending on even iterations, descending on odd ones."""
    order = list(range(n_scans))
    return order[::-1] if iteration % 2 else order
