"""File-backed, versioned map repository with optimistic concurrency.

Layout: ``<root>/<region>/v<k>.json`` snapshots and ``<root>/<region>/HEAD``
holding the head version. A snapshot is claimed with an exclusive hard
link, so of two writers racing on the same version exactly one wins.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

from crowdmap.map_model import VectorMap


class StoreError(RuntimeError):
    pass


class VersionConflict(StoreError):
    """The commit was based on a stale head; re-fuse against the new head."""


class MapRepository:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _region(self, region_id: str) -> Path:
        if not region_id or "/" in region_id or region_id.startswith("."):
            raise StoreError(f"invalid region id {region_id!r}")
        return self.root / region_id

    def head(self, region_id: str) -> int:
        """Head version of a region, 0 when nothing was committed yet."""
        head = self._region(region_id) / "HEAD"
        try:
            return int(head.read_text().strip())
        except FileNotFoundError:
            return 0

    def versions(self, region_id: str) -> list[int]:
        d = self._region(region_id)
        if not d.is_dir():
            return []
        out = []
        for p in d.glob("v*.json"):
            try:
                out.append(int(p.stem[1:]))
            except ValueError:
                continue
        return sorted(out)

    def regions(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if (p / "HEAD").exists())

    def snapshot_path(self, region_id: str, version: int) -> Path:
        return self._region(region_id) / f"v{version}.json"

    def commit(self, region_id: str, vmap: VectorMap) -> int:
        """Persist ``vmap`` as the next version of the region.

        Raises:
            VersionConflict: ``vmap.version`` is not ``head + 1`` or another
                writer claimed that version first.
        """
        d = self._region(region_id)
        d.mkdir(parents=True, exist_ok=True)
        head = self.head(region_id)
        if vmap.version != head + 1:
            raise VersionConflict(f"region {region_id!r}: head is v{head}, got map v{vmap.version}")
        target = self.snapshot_path(region_id, vmap.version)
        tmp = _write_temp(d, vmap.dumps())
        try:
            os.link(tmp, target)
        except FileExistsError:
            raise VersionConflict(f"region {region_id!r}: v{vmap.version} already committed") from None
        finally:
            os.unlink(tmp)
        head_tmp = _write_temp(d, f"{vmap.version}\n")
        os.replace(head_tmp, d / "HEAD")
        return vmap.version

    def load(self, region_id: str, version: int | None = None) -> VectorMap:
        d = self._region(region_id)
        if not d.is_dir():
            raise StoreError(f"unknown region {region_id!r}")
        if version is None:
            version = self.head(region_id)
        path = self.snapshot_path(region_id, version)
        if not path.exists():
            raise StoreError(f"region {region_id!r} has no version {version}")
        return VectorMap.load(path)


def _write_temp(directory: Path, text: str) -> str:
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    return tmp
