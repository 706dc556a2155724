"""On-disk dataset directories and run manifests.

A dataset directory holds ``images/``, optionally ``labels/`` and
``brains/``, one file (or rawpair) per case named ``<case id><ext>``, plus
``manifest.json``. The manifest lists every other file the run wrote with
its SHA-256, so a replay can be checked byte for byte.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from . import __version__
from .io import extension, infer_format, load_mask, load_volume, write_volume
from .volume import BinaryMask, Volume

MANIFEST = "manifest.json"
MANIFEST_SCHEMA = 1


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def timestamp() -> str:
    """UTC creation time; honours SOURCE_DATE_EPOCH for reproducible builds."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = (
        _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc)
        if epoch
        else _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0)
    )
    return t.isoformat()


class RunWriter:
    """Tracks every file written under ``root`` for the manifest."""

    def __init__(self, root, fmt: str = "nifti1"):
        self.root = Path(root)
        self.fmt = fmt
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def path(self, rel) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def volume(self, kind: str, case_id: str, v) -> Path:
        p = self.path(Path(kind) / f"{case_id}{extension(self.fmt)}")
        self.files.extend(write_volume(v, p, self.fmt))
        return p

    def text(self, rel, content: str) -> Path:
        p = self.path(rel)
        p.write_text(content)
        self.files.append(p)
        return p

    def json(self, rel, obj) -> Path:
        return self.text(rel, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def add(self, p) -> Path:
        p = Path(p)
        self.files.append(p)
        return p

    def rel(self, p) -> str:
        return Path(p).relative_to(self.root).as_posix()

    def finalize(self, command: str, seed: int, config: dict, invocation: dict, **extra: Any) -> Path:
        entries = [
            {"path": self.rel(p), "sha256": sha256(p), "bytes": p.stat().st_size}
            for p in sorted(set(self.files))
        ]
        manifest = {
            "schema_version": MANIFEST_SCHEMA,
            "tool": "promptseg",
            "version": __version__,
            "command": command,
            "master_seed": seed,
            "config": config,
            "invocation": invocation,
            "created": timestamp(),
            **extra,
            "files": entries,
        }
        p = self.root / MANIFEST
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return p


def load_manifest(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST
    m = json.loads(p.read_text())
    if m.get("schema_version") != MANIFEST_SCHEMA:
        raise ValueError(f"{p}: unsupported manifest schema {m.get('schema_version')!r}")
    return m


def verify_manifest(root) -> list[str]:
    """Problems found: listed files missing or altered, unlisted files present."""
    root = Path(root)
    m = load_manifest(root)
    listed = {e["path"]: e for e in m["files"]}
    problems = []
    for rel, e in listed.items():
        p = root / rel
        if not p.exists():
            problems.append(f"missing: {rel}")
        elif sha256(p) != e["sha256"]:
            problems.append(f"changed: {rel}")
    for p in root.rglob("*"):
        rel = p.relative_to(root).as_posix()
        if p.is_file() and rel != MANIFEST and rel not in listed:
            problems.append(f"unlisted: {rel}")
    return sorted(problems)


# --------------------------------------------------------------------------
# reading


@dataclass(frozen=True, eq=False)
class Case:
    case_id: str
    image: Volume | None
    label: BinaryMask | None
    brain: BinaryMask | None


def _index(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    out = {}
    for p in sorted(directory.iterdir()):
        if p.suffix in (".nii", ".raw"):
            out[p.stem] = p
    return out


def case_ids(root, kind: str = "images") -> list[str]:
    return sorted(_index(Path(root) / kind))


def read_cases(root, need: tuple[str, ...] = ("images",)) -> list[Case]:
    """Load every case under ``root``; ``need`` lists required sub-directories."""
    root = Path(root)
    idx = {kind: _index(root / kind) for kind in ("images", "labels", "brains")}
    primary = next((k for k in need if idx[k]), None)
    if primary is None:
        raise FileNotFoundError(f"{root}: no cases under {'/'.join(need)}")
    cases = []
    for cid in sorted(idx[primary]):
        missing = [k for k in need if cid not in idx[k]]
        if missing:
            raise FileNotFoundError(f"{root}: case {cid} lacks {missing}")

        def get(kind, loader):
            p = idx[kind].get(cid)
            return loader(p, infer_format(p)) if p is not None else None

        cases.append(Case(cid, get("images", load_volume), get("labels", load_mask), get("brains", load_mask)))
    return cases


def brain_or_nonzero(case: Case) -> BinaryMask:
    if case.brain is not None:
        return case.brain
    return BinaryMask(case.image.data != 0, case.image.spacing)

