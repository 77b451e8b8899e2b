"""Dataset manifest ingestion.

A manifest is a UTF-8 CSV with header
``image_id,camera_id,person_id,pose_label,path``; paths are relative to
the manifest file.  The closed-set single-shot protocol requires every
person to appear exactly once in each of cameras A and B.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .config import PipelineConfig
from .errors import DuplicateId, MissingFile, ParseError
from .evaluation import IdentityRecord
from .features import decode_image

_REQUIRED = ("image_id", "camera_id", "person_id", "path")


@dataclass
class ManifestRow:
    image_id: str
    camera_id: str
    person_id: str
    pose_label: str
    path: str


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path

    def by_person(self) -> dict[str, dict[str, ManifestRow]]:
        out: dict[str, dict[str, ManifestRow]] = {}
        for row in self.rows:
            out.setdefault(row.person_id, {})[row.camera_id] = row
        return out


def parse_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"manifest {path} does not exist")
    rows: list[ManifestRow] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(
            c not in reader.fieldnames for c in _REQUIRED
        ):
            raise ParseError(
                f"{path}: header must contain {', '.join(_REQUIRED)}"
            )
        for lineno, rec in enumerate(reader, start=2):
            missing = [c for c in _REQUIRED if not (rec.get(c) or "").strip()]
            if missing:
                raise ParseError(f"{path}:{lineno}: empty field(s) {missing}")
            image_id = rec["image_id"].strip()
            camera = rec["camera_id"].strip()
            if camera not in ("A", "B"):
                raise ParseError(
                    f"{path}:{lineno}: camera_id must be A or B, got {camera!r}"
                )
            if image_id in seen:
                raise DuplicateId(f"duplicate image_id {image_id!r}")
            seen.add(image_id)
            rows.append(ManifestRow(
                image_id=image_id,
                camera_id=camera,
                person_id=rec["person_id"].strip(),
                pose_label=(rec.get("pose_label") or "").strip(),
                path=rec["path"].strip(),
            ))
    manifest = Manifest(rows=rows, root=path.parent)
    _validate_closed_set(manifest)
    for row in manifest.rows:
        if not (manifest.root / row.path).exists():
            raise MissingFile(f"{row.image_id}: file {row.path} not found")
    return manifest


def _validate_closed_set(manifest: Manifest) -> None:
    counts: dict[str, dict[str, int]] = {}
    for row in manifest.rows:
        counts.setdefault(row.person_id, {"A": 0, "B": 0})[row.camera_id] += 1
    bad = [p for p, c in counts.items() if c["A"] != 1 or c["B"] != 1]
    if bad:
        raise ParseError(
            "persons must appear exactly once per camera; offending: "
            + ", ".join(sorted(bad)[:10])
        )


def load_identity_records(manifest: Manifest, cfg: PipelineConfig) -> list[IdentityRecord]:
    """Decode all images into per-identity records, sorted by person id."""
    records = []
    for person, cams in sorted(manifest.by_person().items()):
        row_a, row_b = cams["A"], cams["B"]
        records.append(IdentityRecord(
            person_id=person,
            probe_id=row_a.image_id,
            gallery_id=row_b.image_id,
            probe_pixels=decode_image(manifest.root / row_a.path, cfg.probe_grid),
            gallery_pixels=decode_image(manifest.root / row_b.path, cfg.gallery_grid),
            pose_label=row_a.pose_label or row_b.pose_label,
        ))
    return records
