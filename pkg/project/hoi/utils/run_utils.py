"""
Reproducibility records written next to every command's outputs.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Optional, Union

logger = logging.getLogger(__name__)

CONFIG_ECHO = 'config.json'
RUN_MANIFEST = 'run.json'

ARTIFACT_VERSIONS = {
    'sequence': 'hoiseq v1',
    'params': 'params v1',
    'codebook': 'cbk v1',
    'objects': 'obj v1',
    'streams': 'tokens v1',
}


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def checksum_tree(directory: Union[str, Path]) -> Dict[str, str]:
    """sha256 of every file under directory except the manifest itself, keyed by POSIX relative path."""
    directory = Path(directory)
    sums = {}
    for path in sorted(p for p in directory.rglob('*') if p.is_file()):
        relative = path.relative_to(directory).as_posix()
        if relative == RUN_MANIFEST:
            continue
        sums[relative] = sha256_file(path)
    return sums


def write_config_echo(directory: Union[str, Path], config) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CONFIG_ECHO
    path.write_text(config.to_json(), encoding='utf-8')
    return path


def write_run_manifest(directory: Union[str, Path], command: str, seed: int,
                       inputs: Optional[Dict[str, str]] = None) -> Path:
    """
    run.json: command, seed, artifact versions, input paths and output checksums.
    Holds no timestamps, so identical reruns produce identical manifests.
    """
    directory = Path(directory)
    manifest = {
        'command': command,
        'seed': seed,
        'versions': ARTIFACT_VERSIONS,
        'inputs': inputs or {},
        'checksums': checksum_tree(directory),
    }
    path = directory / RUN_MANIFEST
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + '\n', encoding='utf-8')
    logger.info(f"Wrote {path} covering {len(manifest['checksums'])} files")
    return path
