"""Bit-exact file formats: minimal NIfTI-1, checkpoints, manifests, tables.

Only single-frame little-endian NIfTI-1 is supported (datatype 16 for
intensity volumes, 4 for label maps). The checkpoint container is a small
self-describing binary with a content hash over the weight payload; the
hash doubles as the identity used to pin upstream dependencies between
pipeline stages.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .core import Covariates, Diagnosis, LabelMap, Volume
from .errors import ConfigError, DependencyError, FormatError

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
NIFTI_MAGIC = b"n+1\x00"
NIFTI_DETACHED_MAGIC = b"ni1\x00"
DTYPE_FLOAT32 = 16
DTYPE_INT16 = 4

CHECKPOINT_MAGIC = b"BPCKPT01"
CHECKPOINT_VERSION = 1

MANIFEST_VERSION_LINE = "# brainprog-manifest v1"


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

def _pack_header(shape: tuple[int, int, int], spacing: tuple[float, float, float],
                 datatype: int, bitpix: int) -> bytes:
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    dim = (3, shape[0], shape[1], shape[2], 1, 1, 1, 1)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    pixdim = (1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(NIFTI_VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<4s", hdr, 344, NIFTI_MAGIC)
    return bytes(hdr)


def write_nifti(vol: Volume | LabelMap, path: str | Path) -> None:
    """Write a volume or label map as single-file little-endian NIfTI-1.

    Payload starts at byte 352 (348-byte header + 4-byte extension pad) in
    Fortran voxel order, so round trips are bit-exact.
    """
    path = Path(path)
    if isinstance(vol, LabelMap):
        data = np.asarray(vol.data, dtype="<i2")
        datatype, bitpix = DTYPE_INT16, 16
    elif isinstance(vol, Volume):
        data = np.asarray(vol.data, dtype="<f4")
        datatype, bitpix = DTYPE_FLOAT32, 32
    else:
        raise ConfigError(f"cannot write object of type {type(vol).__name__}")
    hdr = _pack_header(vol.shape, vol.spacing, datatype, bitpix)
    with open(path, "wb") as fh:
        fh.write(hdr)
        fh.write(b"\x00\x00\x00\x00")  # extension indicator: none
        fh.write(data.tobytes(order="F"))


def read_nifti(path: str | Path) -> Volume | LabelMap:
    """Read a single-frame little-endian NIfTI-1 file.

    datatype 16 maps to an intensity Volume (scl_slope/scl_inter applied
    when set), datatype 4 to a LabelMap. Distinct FormatError codes flag
    each unsupported corner.
    """
    raw = Path(path).read_bytes()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise FormatError("truncated-header", f"file shorter than {NIFTI_HEADER_SIZE} bytes")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        (swapped,) = struct.unpack_from(">i", raw, 0)
        if swapped == NIFTI_HEADER_SIZE:
            raise FormatError("big-endian-unsupported", "big-endian NIfTI rejected (desk scope)")
        raise FormatError("bad-sizeof", f"sizeof_hdr = {sizeof_hdr}, expected 348")
    magic = raw[344:348]
    if magic == NIFTI_DETACHED_MAGIC:
        raise FormatError("detached-header-unsupported", "detached .hdr/.img pairs not supported")
    if magic != NIFTI_MAGIC:
        raise FormatError("bad-magic", f"magic {magic!r} is not 'n+1\\0'")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise FormatError("bad-dim", f"dim[0] = {dim[0]}, only 3D volumes supported")
    shape = (dim[1], dim[2], dim[3])
    (datatype,) = struct.unpack_from("<h", raw, 70)
    (bitpix,) = struct.unpack_from("<h", raw, 72)
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = (pixdim[1], pixdim[2], pixdim[3])
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    (scl_slope,) = struct.unpack_from("<f", raw, 112)
    (scl_inter,) = struct.unpack_from("<f", raw, 116)

    if datatype == DTYPE_FLOAT32:
        np_dtype, expect_bitpix = np.dtype("<f4"), 32
    elif datatype == DTYPE_INT16:
        np_dtype, expect_bitpix = np.dtype("<i2"), 16
    else:
        raise FormatError("unsupported-datatype", f"datatype {datatype} not in (4, 16)")
    if bitpix != expect_bitpix:
        raise FormatError("bitpix-mismatch", f"bitpix {bitpix} inconsistent with datatype {datatype}")

    offset = int(vox_offset)
    n_vox = shape[0] * shape[1] * shape[2]
    nbytes = n_vox * np_dtype.itemsize
    if len(raw) < offset + nbytes:
        raise FormatError("truncated-payload", f"expected {offset + nbytes} bytes, file has {len(raw)}")
    flat = np.frombuffer(raw, dtype=np_dtype, count=n_vox, offset=offset)
    data = np.reshape(flat, shape, order="F")

    scaled = scl_slope != 0.0 and (scl_slope != 1.0 or scl_inter != 0.0)
    if datatype == DTYPE_INT16:
        if scaled:
            raise FormatError("scaled-labels-unsupported", "scl on integer label maps not supported")
        return LabelMap(data=np.ascontiguousarray(data), spacing=spacing)
    if scaled:
        data = data * scl_slope + scl_inter
    return Volume(data=np.ascontiguousarray(data, dtype=np.float32), spacing=spacing)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Checkpoint:
    """A loaded checkpoint: weight arrays plus provenance metadata."""

    module: str
    config: dict
    upstream: dict[str, str]
    arrays: dict[str, np.ndarray]
    content_hash: str


def _array_payload(arrays: Mapping[str, np.ndarray]) -> tuple[bytes, list[dict]]:
    blobs = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        buf = arr.tobytes()
        blobs.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(buf),
            }
        )
        chunks.append(buf)
        offset += len(buf)
    return b"".join(chunks), blobs


def save_checkpoint(
    path: str | Path,
    module: str,
    arrays: Mapping[str, np.ndarray],
    config: dict | None = None,
    upstream: Mapping[str, str] | None = None,
) -> str:
    """Serialize weight arrays with config snapshot and upstream hashes.

    Returns the payload content hash, which identifies this checkpoint in
    downstream ``upstream`` maps. Byte output is deterministic, so
    save -> load -> save reproduces the file exactly.
    """
    payload, blobs = _array_payload(arrays)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "module": module,
        "config": config or {},
        "upstream": dict(upstream or {}),
        "blobs": blobs,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
    return header["payload_sha256"]


def load_checkpoint(path: str | Path, expect_module: str | None = None) -> Checkpoint:
    """Load and verify a checkpoint; hash or version mismatches raise."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError("bad-magic", f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12 : 12 + hlen].decode())
    if header["format_version"] != CHECKPOINT_VERSION:
        raise DependencyError(
            f"{path}: checkpoint format v{header['format_version']}, expected v{CHECKPOINT_VERSION}"
        )
    payload = raw[12 + hlen :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise DependencyError(f"{path}: payload hash mismatch (corrupted or tampered)")
    if expect_module is not None and header["module"] != expect_module:
        raise DependencyError(f"{path}: module {header['module']!r}, expected {expect_module!r}")
    arrays = {}
    for blob in header["blobs"]:
        start, n = blob["offset"], blob["nbytes"]
        arr = np.frombuffer(payload[start : start + n], dtype=np.dtype(blob["dtype"]))
        arrays[blob["name"]] = arr.reshape(blob["shape"]).copy()
    return Checkpoint(
        module=header["module"],
        config=header["config"],
        upstream=header["upstream"],
        arrays=arrays,
        content_hash=digest,
    )


def require_upstream(ckpt: Checkpoint, name: str, actual_hash: str) -> None:
    """Refuse to pair a checkpoint with a mismatched upstream artifact."""
    recorded = ckpt.upstream.get(name)
    if recorded is None:
        raise DependencyError(f"checkpoint for {ckpt.module!r} records no upstream {name!r}")
    if recorded != actual_hash:
        raise DependencyError(
            f"checkpoint for {ckpt.module!r} was trained against {name} {recorded[:12]}..., "
            f"got {actual_hash[:12]}..."
        )


def fingerprint_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    """Order-sensitive SHA-256 over named arrays; used for frozen-weight checks."""
    h = hashlib.sha256()
    for name, arr in arrays.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def net_fingerprint(net) -> str:
    """Fingerprint a torch module's state dict (parameters and buffers)."""
    return fingerprint_arrays({k: v.detach().cpu().numpy() for k, v in net.state_dict().items()})


def state_dict_arrays(net) -> dict[str, np.ndarray]:
    """Torch state dict as plain numpy arrays for checkpointing."""
    return {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}


def load_state_arrays(net, arrays: Mapping[str, np.ndarray]) -> None:
    """Load checkpoint arrays back into a torch module."""
    import torch

    net.load_state_dict({k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()})


# ---------------------------------------------------------------------------
# Cohort manifests and metric tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairRecord:
    """One manifest row: file paths plus covariates for a scan pair."""

    subject_id: str
    split: str
    baseline_path: str
    followup_path: str
    baseline_labels_path: str
    followup_labels_path: str
    covariates: Covariates


_MANIFEST_COLS = [
    "subject_id", "split", "baseline_path", "followup_path",
    "baseline_labels_path", "followup_labels_path",
    "age_baseline", "age_followup", "sex", "dx_baseline", "dx_followup",
]


def write_manifest(records: Iterable[PairRecord], path: str | Path) -> None:
    lines = [MANIFEST_VERSION_LINE, "\t".join(_MANIFEST_COLS)]
    for r in records:
        c = r.covariates
        lines.append(
            "\t".join(
                [
                    r.subject_id, r.split, r.baseline_path, r.followup_path,
                    r.baseline_labels_path, r.followup_labels_path,
                    f"{c.age_baseline:.6g}", f"{c.age_followup:.6g}",
                    str(c.sex), c.dx_baseline.value, c.dx_followup.value,
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> list[PairRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MANIFEST_VERSION_LINE:
        raise FormatError("bad-manifest-version", f"{path}: missing '{MANIFEST_VERSION_LINE}'")
    if lines[1].split("\t") != _MANIFEST_COLS:
        raise FormatError("bad-manifest-columns", f"{path}: unexpected column header")
    records = []
    for line in lines[2:]:
        if not line.strip():
            continue
        vals = line.split("\t")
        cov = Covariates(
            age_baseline=float(vals[6]),
            age_followup=float(vals[7]),
            sex=int(vals[8]),
            dx_baseline=Diagnosis(vals[9]),
            dx_followup=Diagnosis(vals[10]),
        )
        records.append(PairRecord(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], cov))
    return records


def write_table(path: str | Path, columns: list[str], rows: list[list], name: str = "metrics") -> None:
    """Line-oriented TSV with a schema-version comment; float cells use %.6g."""
    lines = [f"# brainprog-{name} v1", "\t".join(columns)]
    for row in rows:
        cells = [f"{v:.6g}" if isinstance(v, float) else str(v) for v in row]
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")
