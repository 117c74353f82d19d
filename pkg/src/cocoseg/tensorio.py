"""Binary tensor container and dataset manifest I/O.

Every array that crosses a process or tool boundary in this project is stored
in a small self-describing binary container so that golden files stay
byte-reproducible on any host.  The layout is fixed and little-endian:

    offset  size        field
    0       4           magic ``MCST``
    4       1           format version, currently 1
    5       1           dtype code: 0 = float32, 1 = uint8, 2 = int64
    6       1           ndim (>= 1)
    7       4 * ndim    dims, unsigned 32-bit little-endian
    ...     prod(dims) * itemsize   payload, row-major little-endian

Manifests describe a dataset as cases -> slices -> tensor files, plus the
assignment of whole cases to the four splits ``labeled_train``,
``unlabeled_train``, ``val`` and ``test``.  All validation is eager: a
manifest that loads is usable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MCST"
VERSION = 1

DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("u1"),
    2: np.dtype("<i8"),
}
_CODE_FOR_KIND = {"f": 0, "u": 1, "i": 2}

SPLIT_NAMES = ("labeled_train", "unlabeled_train", "val", "test")


class TensorIOError(Exception):
    """Base class for tensor container failures."""


class BadMagicError(TensorIOError):
    """File does not start with the ``MCST`` magic."""


class UnsupportedVersionError(TensorIOError):
    """File declares a format version this reader does not understand."""


class TruncatedFileError(TensorIOError):
    """File ends before the declared payload (or header) is complete."""


class ManifestError(Exception):
    """Manifest failed JSON parsing or eager validation."""


def dtype_code_for(array: np.ndarray) -> int:
    """Return the container dtype code for ``array``'s dtype kind."""
    code = _CODE_FOR_KIND.get(array.dtype.kind)
    if code is None:
        raise TensorIOError(f"unsupported array dtype {array.dtype!r}")
    return code


def write_tensor(path: str | Path, array: np.ndarray, dtype_code: int | None = None) -> None:
    """Write ``array`` to ``path`` in the container layout.

    ``dtype_code`` defaults to the code matching the array's dtype kind.
    Narrowing conversions are checked: values outside the target range or
    non-finite floats raise instead of being truncated silently.
    """
    array = np.asarray(array)
    if array.ndim < 1:
        array = array.reshape(1)
    if dtype_code is None:
        dtype_code = dtype_code_for(array)
    if dtype_code not in DTYPE_CODES:
        raise TensorIOError(f"unknown dtype code {dtype_code}")
    target = DTYPE_CODES[dtype_code]

    if array.dtype.kind == "f" and not np.all(np.isfinite(array)):
        raise TensorIOError("refusing to write non-finite values")
    if target.kind in "ui":
        if array.dtype.kind == "f":
            raise TensorIOError("refusing lossy float -> integer conversion")
        info = np.iinfo(target)
        if array.size and (array.min() < info.min or array.max() > info.max):
            raise TensorIOError(
                f"value range [{array.min()}, {array.max()}] does not fit dtype code {dtype_code}"
            )
    if array.ndim > 255:
        raise TensorIOError("ndim exceeds container limit of 255")

    data = np.ascontiguousarray(array.astype(target, copy=False))
    header = MAGIC + struct.pack("<BBB", VERSION, dtype_code, data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a container file back into an array with its declared dims/dtype."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 7:
        raise TruncatedFileError(f"{path}: header cut short")
    version, dtype_code, ndim = struct.unpack_from("<BBB", blob, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}, expected {VERSION}")
    if dtype_code not in DTYPE_CODES:
        raise TensorIOError(f"{path}: unknown dtype code {dtype_code}")
    if ndim < 1:
        raise TensorIOError(f"{path}: ndim must be >= 1")
    dims_end = 7 + 4 * ndim
    if len(blob) < dims_end:
        raise TruncatedFileError(f"{path}: dims cut short")
    dims = struct.unpack_from(f"<{ndim}I", blob, 7)
    dtype = DTYPE_CODES[dtype_code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = blob[dims_end:]
    if len(payload) < nbytes:
        raise TruncatedFileError(
            f"{path}: payload has {len(payload)} bytes, expected {nbytes}"
        )
    if len(payload) > nbytes:
        raise TensorIOError(f"{path}: {len(payload) - nbytes} trailing bytes")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


@dataclass(frozen=True)
class SliceRecord:
    slice_index: int
    image: str
    label: str | None


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    slices: tuple[SliceRecord, ...]


@dataclass
class DatasetManifest:
    """Validated view of a dataset manifest.

    ``split_of`` maps every case id to its split name; ``root`` is the
    directory the relative tensor paths resolve against.
    """

    cases: tuple[CaseRecord, ...]
    split_of: dict[str, str]
    num_classes: int
    image_size: tuple[int, int]
    root: Path

    def cases_in(self, split: str) -> list[CaseRecord]:
        if split not in SPLIT_NAMES:
            raise ManifestError(f"unknown split {split!r}")
        return [c for c in self.cases if self.split_of[c.case_id] == split]

    def resolve(self, relpath: str) -> Path:
        return self.root / relpath


def _as_manifest_dict(manifest: DatasetManifest) -> dict:
    splits: dict[str, list[str]] = {name: [] for name in SPLIT_NAMES}
    for case in manifest.cases:
        splits[manifest.split_of[case.case_id]].append(case.case_id)
    return {
        "num_classes": manifest.num_classes,
        "image_size": list(manifest.image_size),
        "cases": [
            {
                "case_id": c.case_id,
                "slices": [
                    {"slice_index": s.slice_index, "image": s.image, "label": s.label}
                    for s in c.slices
                ],
            }
            for c in manifest.cases
        ],
        "splits": splits,
    }


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(_as_manifest_dict(manifest), indent=2) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and eagerly validate a manifest JSON file.

    Raises :class:`ManifestError` on malformed JSON, missing tensor files,
    overlapping or incomplete split assignments, and labeled/val/test slices
    without a label path.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: {exc}") from exc

    root = path.parent
    try:
        num_classes = int(raw["num_classes"])
        image_size = tuple(int(v) for v in raw["image_size"])
        raw_cases = raw["cases"]
        raw_splits = raw["splits"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: malformed manifest: {exc}") from exc
    if len(image_size) != 2:
        raise ManifestError(f"{path}: image_size must be (H, W)")

    cases = []
    for rc in raw_cases:
        slices = tuple(
            SliceRecord(int(rs["slice_index"]), rs["image"], rs.get("label"))
            for rs in rc["slices"]
        )
        cases.append(CaseRecord(str(rc["case_id"]), slices))

    split_of: dict[str, str] = {}
    for split, ids in raw_splits.items():
        if split not in SPLIT_NAMES:
            raise ManifestError(f"{path}: unknown split {split!r}")
        for case_id in ids:
            if case_id in split_of:
                raise ManifestError(
                    f"{path}: case {case_id!r} assigned to both "
                    f"{split_of[case_id]!r} and {split!r}"
                )
            split_of[case_id] = split

    case_ids = {c.case_id for c in cases}
    if len(case_ids) != len(cases):
        raise ManifestError(f"{path}: duplicate case ids")
    unassigned = case_ids - set(split_of)
    if unassigned:
        raise ManifestError(f"{path}: cases without split: {sorted(unassigned)}")
    unknown = set(split_of) - case_ids
    if unknown:
        raise ManifestError(f"{path}: splits reference unknown cases: {sorted(unknown)}")

    needs_label = {"labeled_train", "val", "test"}
    for case in cases:
        split = split_of[case.case_id]
        for rec in case.slices:
            if rec.label is None and split in needs_label:
                raise ManifestError(
                    f"{path}: {split} slice {case.case_id}:{rec.slice_index} has no label"
                )
            for rel in (rec.image, rec.label):
                if rel is not None and not (root / rel).is_file():
                    raise ManifestError(f"{path}: missing file {rel!r}")

    return DatasetManifest(
        cases=tuple(cases),
        split_of=split_of,
        num_classes=num_classes,
        image_size=(image_size[0], image_size[1]),
        root=root,
    )
