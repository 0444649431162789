"""On-disk formats and their domain types.

Binary layouts (all integers little-endian uint32, all floats little-endian
float32):

    image file          magic ``CPIM`` | version | H | W | C |
                        H*W*C floats row-major (H, W, C fastest) |
                        C kind bytes (0 = fluorescent, 1 = brightfield)

    embedding table     magic ``CPEM`` | version | n_rows | dim | level code
                        (0 = site, 1 = well) | n_rows*dim floats row-major;
                        keys live in a JSON-lines sidecar ``<path>.keys.jsonl``,
                        one key object per row, in row order.

Manifests are JSON-lines files with one site record per line.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ManifestError, ValidationError

IMAGE_MAGIC = b"CPIM"
EMBED_MAGIC = b"CPEM"
FORMAT_VERSION = 1

FLUORESCENT = "fluorescent"
BRIGHTFIELD = "brightfield"
KIND_TO_CODE = {FLUORESCENT: 0, BRIGHTFIELD: 1}
CODE_TO_KIND = {0: FLUORESCENT, 1: BRIGHTFIELD}

CHANNEL_SETS = (FLUORESCENT, BRIGHTFIELD, "all")
VALID_SITE_COUNTS = (9, 16)
LEVEL_TO_CODE = {"site": 0, "well": 1}
CODE_TO_LEVEL = {0: "site", 1: "well"}

MANIFEST_FIELDS = (
    "plate_id",
    "well_position",
    "site_index",
    "cell_line",
    "perturbation",
    "image_path",
    "channel_set",
)


@dataclass(frozen=True, eq=False)
class CellImage:
    """One multi-channel site image with intensities in [0, 1].

    ``pixels`` is (H, W, C) float32; ``channel_kinds`` tags each channel as
    fluorescent or brightfield. Pipeline images carry 5 fluorescent, 3
    brightfield, or 5 fluorescent followed by 3 brightfield channels; the
    file format itself accepts any channel count (see ``validate``).
    """

    pixels: np.ndarray
    channel_kinds: tuple[str, ...]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def n_channels(self) -> int:
        return self.pixels.shape[2]

    def validate(self) -> None:
        px = self.pixels
        if px.ndim != 3:
            raise ValidationError(f"pixels must be (H, W, C), got shape {px.shape}")
        if px.dtype != np.float32:
            raise ValidationError(f"pixels must be float32, got {px.dtype}")
        if len(self.channel_kinds) != px.shape[2]:
            raise ValidationError(
                f"{len(self.channel_kinds)} kind tags for {px.shape[2]} channels"
            )
        for kind in self.channel_kinds:
            if kind not in KIND_TO_CODE:
                raise ValidationError(f"unknown channel kind {kind!r}")
        if not np.isfinite(px).all():
            raise ValidationError("pixels contain non-finite values")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValidationError("pixels outside [0, 1]")

    def validate_channel_set(self) -> None:
        """Additionally enforce the pipeline channel layouts (C in {5, 3, 8})."""
        self.validate()
        kinds = self.channel_kinds
        c = len(kinds)
        if c == 5:
            ok = all(k == FLUORESCENT for k in kinds)
        elif c == 3:
            ok = all(k == BRIGHTFIELD for k in kinds)
        elif c == 8:
            ok = all(k == FLUORESCENT for k in kinds[:5]) and all(
                k == BRIGHTFIELD for k in kinds[5:]
            )
        else:
            ok = False
        if not ok:
            raise ValidationError(
                f"expected 5 fluorescent, 3 brightfield, or 5+3 channels, got {kinds}"
            )


def write_image(image: CellImage, path: str | Path) -> None:
    """Serialise a :class:`CellImage`; exact inverse of :func:`read_image`."""
    image.validate()
    h, w, c = image.pixels.shape
    header = IMAGE_MAGIC + struct.pack("<IIII", FORMAT_VERSION, h, w, c)
    payload = np.ascontiguousarray(image.pixels, dtype="<f4").tobytes()
    kinds = bytes(KIND_TO_CODE[k] for k in image.channel_kinds)
    Path(path).write_bytes(header + payload + kinds)


def read_image(path: str | Path) -> CellImage:
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise FormatError(f"{path}: file shorter than the image header")
    if raw[:4] != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, h, w, c = struct.unpack("<IIII", raw[4:20])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    n_payload = h * w * c * 4
    if len(raw) < 20 + n_payload + c:
        raise FormatError(f"{path}: truncated payload")
    if len(raw) > 20 + n_payload + c:
        raise FormatError(f"{path}: trailing bytes after payload")
    pixels = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=20)
    pixels = pixels.reshape(h, w, c).copy()
    kinds = []
    for code in raw[20 + n_payload :]:
        if code not in CODE_TO_KIND:
            raise FormatError(f"{path}: unknown channel kind byte {code}")
        kinds.append(CODE_TO_KIND[code])
    image = CellImage(pixels=pixels, channel_kinds=tuple(kinds))
    image.validate()
    return image


@dataclass(frozen=True)
class SiteRecord:
    """Metadata for one imaged site of one well."""

    plate_id: str
    well_position: str
    site_index: int
    cell_line: str
    perturbation: str
    image_path: str
    channel_set: str

    def key(self) -> tuple[str, str, int, str]:
        return (self.plate_id, self.well_position, self.site_index, self.channel_set)

    def well_key(self) -> tuple[str, str]:
        return (self.plate_id, self.well_position)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in MANIFEST_FIELDS}


@dataclass
class DatasetManifest:
    records: list[SiteRecord]
    root: Path
    metadata: dict = field(default_factory=dict)


def validate_manifest(records: list[SiteRecord]) -> list[str]:
    """Return the list of invariant violations (empty when valid)."""
    violations: list[str] = []
    seen: set[tuple] = set()
    wells: dict[tuple, list[int]] = {}
    pert_by_position: dict[str, tuple[str, str]] = {}
    pert_by_plate_pos: dict[tuple[str, str], str] = {}

    for rec in records:
        if rec.channel_set not in CHANNEL_SETS:
            violations.append(f"{rec.key()}: unknown channel_set {rec.channel_set!r}")
        key = rec.key()
        if key in seen:
            violations.append(f"{key}: duplicate site key")
        seen.add(key)
        wells.setdefault(
            (rec.plate_id, rec.well_position, rec.channel_set), []
        ).append(rec.site_index)

        plate_pos = (rec.plate_id, rec.well_position)
        prev = pert_by_plate_pos.get(plate_pos)
        if prev is None:
            pert_by_plate_pos[plate_pos] = rec.perturbation
        elif prev != rec.perturbation:
            violations.append(
                f"{plate_pos}: maps to both perturbations {prev!r} and {rec.perturbation!r}"
            )

    for (plate, pos), pert in sorted(pert_by_plate_pos.items()):
        prev = pert_by_position.get(pos)
        if prev is None:
            pert_by_position[pos] = (plate, pert)
        elif prev[1] != pert:
            violations.append(
                f"position {pos}: perturbation {prev[1]!r} on plate {prev[0]} "
                f"but {pert!r} on plate {plate}"
            )

    for well, sites in sorted(wells.items()):
        if len(sites) not in VALID_SITE_COUNTS:
            violations.append(f"{well}: has {len(sites)} sites, expected 9 or 16")
        elif sorted(sites) != list(range(len(sites))):
            violations.append(f"{well}: site indices not 0..{len(sites) - 1}")

    return violations


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a JSON-lines manifest."""
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        missing = [f for f in MANIFEST_FIELDS if f not in obj]
        extra = [k for k in obj if k not in MANIFEST_FIELDS]
        if missing or extra:
            raise FormatError(
                f"{path}:{lineno}: missing fields {missing}, unexpected fields {extra}"
            )
        records.append(SiteRecord(**{f: obj[f] for f in MANIFEST_FIELDS}))

    violations = validate_manifest(records)
    if violations:
        raise ManifestError(violations)
    return DatasetManifest(records=records, root=path.parent)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = [json.dumps(rec.to_dict(), sort_keys=True) for rec in manifest.records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


@dataclass(eq=False)
class EmbeddingTable:
    """Fixed-dimension vectors keyed by site or well.

    Keys are ``(plate_id, well_position)`` tuples at well level and
    ``(plate_id, well_position, site_index)`` at site level. ``meta`` holds
    in-memory provenance flags only; it is not serialised.
    """

    keys: list[tuple]
    vectors: np.ndarray
    level: str
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.level not in LEVEL_TO_CODE:
            raise ValidationError(f"unknown level {self.level!r}")
        vec = self.vectors
        if vec.ndim != 2:
            raise ValidationError(f"vectors must be 2-D, got shape {vec.shape}")
        if len(self.keys) != vec.shape[0]:
            raise ValidationError(
                f"{len(self.keys)} keys for {vec.shape[0]} vector rows"
            )
        arity = 2 if self.level == "well" else 3
        for key in self.keys:
            if len(key) != arity:
                raise ValidationError(f"key {key} has arity {len(key)}, want {arity}")
        if len(set(self.keys)) != len(self.keys):
            raise ValidationError("duplicate keys in embedding table")

    def row_index(self) -> dict[tuple, int]:
        return {key: i for i, key in enumerate(self.keys)}


def _sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".keys.jsonl")


def _key_to_obj(key: tuple, level: str) -> dict:
    obj = {"plate_id": key[0], "well_position": key[1]}
    if level == "site":
        obj["site_index"] = key[2]
    return obj


def write_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    table.validate()
    n, dim = table.vectors.shape
    header = EMBED_MAGIC + struct.pack(
        "<IIII", FORMAT_VERSION, n, dim, LEVEL_TO_CODE[table.level]
    )
    payload = np.ascontiguousarray(table.vectors, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)
    lines = [
        json.dumps(_key_to_obj(key, table.level), sort_keys=True) for key in table.keys
    ]
    _sidecar_path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_embeddings(path: str | Path) -> EmbeddingTable:
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise FormatError(f"{path}: file shorter than the table header")
    if raw[:4] != EMBED_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, n, dim, level_code = struct.unpack("<IIII", raw[4:20])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if level_code not in CODE_TO_LEVEL:
        raise FormatError(f"{path}: unknown level code {level_code}")
    level = CODE_TO_LEVEL[level_code]
    if len(raw) != 20 + n * dim * 4:
        raise FormatError(f"{path}: payload size mismatch")
    vectors = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=20)
    vectors = vectors.reshape(n, dim).copy()

    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise FormatError(f"{path}: missing key sidecar {sidecar}")
    keys = []
    for lineno, line in enumerate(sidecar.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        key = (obj["plate_id"], obj["well_position"])
        if level == "site":
            key = key + (obj["site_index"],)
        keys.append(key)
    if len(keys) != n:
        raise FormatError(
            f"{path}: {n} vector rows but {len(keys)} sidecar keys"
        )
    table = EmbeddingTable(keys=keys, vectors=vectors, level=level)
    table.validate()
    return table


def group_sites(
    manifest: DatasetManifest, channel_set: str
) -> dict[tuple[str, str], list[SiteRecord]]:
    """Map (plate, well_position) to its site records, sorted by site index."""
    wells: dict[tuple[str, str], list[SiteRecord]] = {}
    for rec in manifest.records:
        if rec.channel_set == channel_set:
            wells.setdefault(rec.well_key(), []).append(rec)
    for recs in wells.values():
        recs.sort(key=lambda r: r.site_index)
    return wells


def well_perturbations(manifest: DatasetManifest) -> dict[tuple[str, str], str]:
    return {rec.well_key(): rec.perturbation for rec in manifest.records}


def plate_cell_lines(manifest: DatasetManifest) -> dict[str, str]:
    return {rec.plate_id: rec.cell_line for rec in manifest.records}
