"""Run manifests: content hashes and provenance for pipeline artifacts.

Every artifact-producing command writes `<artifact>.manifest.json` next to its
output, recording the command, the fully resolved configuration, the hashes of
everything consumed and produced, the seed, and timestamps.  Downstream
commands re-hash their inputs and refuse to run when a recorded hash no longer
matches the bytes on disk, so a silently edited or truncated artifact fails
loudly instead of skewing results.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field


class ArtifactMismatchError(ValueError):
    """An artifact's bytes no longer match the hash recorded at creation."""


def sha256_file(path: str) -> str:
    """Hex digest of a file's bytes, streamed in 1 MiB chunks."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            chunk = f.read(1 << 20)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


def manifest_path(artifact_path: str) -> str:
    return artifact_path + ".manifest.json"


@dataclass
class RunManifest:
    """Provenance record written next to every produced artifact."""

    command: str
    config: dict
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)    # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)   # path -> sha256
    started_at: float = field(default_factory=time.time)
    finished_at: float | None = None

    def add_input(self, path: str, verify: bool = True) -> str:
        """Record a consumed artifact, checking its own manifest if present.

        Args:
            path: Artifact file to record.
            verify: When True and `<path>.manifest.json` exists, compare the
                file's current hash against the hash recorded there.

        Returns:
            The artifact's hex digest.

        Raises:
            ArtifactMismatchError: Recorded and current hashes differ.
        """
        digest = sha256_file(path)
        if verify:
            recorded = recorded_hash(path)
            if recorded is not None and recorded != digest:
                raise ArtifactMismatchError(
                    f"{path}: content hash {digest[:12]}... does not match "
                    f"{recorded[:12]}... recorded in its manifest"
                )
        self.inputs[path] = digest
        return digest

    def add_output(self, path: str) -> str:
        digest = sha256_file(path)
        self.outputs[path] = digest
        return digest

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    def write(self, artifact_path: str) -> str:
        """Atomically write the manifest next to ``artifact_path``.

        The artifact itself must already exist; its hash is recorded under
        outputs before writing.  Returns the manifest path.
        """
        self.add_output(artifact_path)
        if self.finished_at is None:
            self.finished_at = time.time()
        dest = manifest_path(artifact_path)
        blob = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        tmp = dest + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            f.write(blob + "\n")
        os.replace(tmp, dest)
        return dest


def recorded_hash(artifact_path: str) -> str | None:
    """The hash recorded for an artifact by its own manifest, if any.

    Looks up ``<artifact>.manifest.json`` and returns the digest stored for
    the artifact under outputs.  Returns None when no manifest exists or the
    manifest does not mention the artifact.
    """
    mpath = manifest_path(artifact_path)
    if not os.path.exists(mpath):
        return None
    try:
        with open(mpath, encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError):
        return None
    outputs = data.get("outputs", {})
    if artifact_path in outputs:
        return outputs[artifact_path]
    # Manifests may record paths relative to a different working directory;
    # fall back to basename matching.
    base = os.path.basename(artifact_path)
    for path, digest in outputs.items():
        if os.path.basename(path) == base:
            return digest
    return None


def verify_artifact(path: str) -> str:
    """Re-hash an artifact and check it against its recorded manifest hash.

    Returns:
        The current hex digest.

    Raises:
        FileNotFoundError: Artifact missing.
        ArtifactMismatchError: Hash recorded at creation no longer matches.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    digest = sha256_file(path)
    recorded = recorded_hash(path)
    if recorded is not None and recorded != digest:
        raise ArtifactMismatchError(
            f"{path}: content hash {digest[:12]}... does not match "
            f"{recorded[:12]}... recorded in its manifest"
        )
    return digest
