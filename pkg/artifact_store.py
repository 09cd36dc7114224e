# ==================================================
# File: artifact_store.py
# Output directory manager: atomic writes, prerequisites, inventory
# ==================================================

import logging
import os
import tempfile
import time
from pathlib import Path
from typing import Dict, List, Union

from errors import DrslError, MissingArtifactError
from pipeline_config import Config

logger = logging.getLogger(__name__)


def atomic_write_bytes(path: Union[str, Path], data: bytes):
    """Write through a temporary file in the same directory, then rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.debug("artifact_written path=%s bytes=%d", path, len(data))


def atomic_write_text(path: Union[str, Path], text: str):
    atomic_write_bytes(path, text.encode('utf-8'))


class ArtifactStore:
    """Knows where every artifact of a run lives and who produces it"""

    def __init__(self, output_dir: Union[str, Path]):
        self.output_dir = Path(output_dir)

    def path(self, name: str) -> Path:
        if name not in Config.ARTIFACTS:
            raise DrslError(f"unknown artifact {name!r}")
        return self.output_dir / Config.ARTIFACTS[name]

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def require(self, *names: str) -> Dict[str, Path]:
        """Paths of the named artifacts; the first missing one raises"""
        found = {}
        for name in names:
            path = self.path(name)
            if not path.exists():
                raise MissingArtifactError(path, Config.PRODUCERS.get(name, 'prepare'))
            found[name] = path
        return found

    def write_text(self, name: str, text: str) -> Path:
        path = self.path(name)
        atomic_write_text(path, text)
        return path

    def get_inventory(self) -> Dict:
        inventory = {
            'output_dir': str(self.output_dir),
            'total_files': 0,
            'total_size_mb': 0.0,
            'files': []
        }

        if not self.output_dir.exists():
            return inventory

        known = {filename: name for name, filename in Config.ARTIFACTS.items()}
        files: List[Path] = sorted(p for p in self.output_dir.iterdir() if p.is_file())
        inventory['total_files'] = len(files)

        if files:
            total_size = sum(f.stat().st_size for f in files)
            inventory['total_size_mb'] = round(total_size / (1024 * 1024), 2)

            for artifact in files:
                stat = artifact.stat()
                age_hours = (time.time() - stat.st_mtime) / 3600
                inventory['files'].append({
                    'name': artifact.name,
                    'artifact': known.get(artifact.name),
                    'size_kb': round(stat.st_size / 1024, 2),
                    'age_hours': round(age_hours, 2),
                })

        return inventory

    def missing(self) -> List[str]:
        return [name for name in Config.ARTIFACTS if not self.exists(name)]
