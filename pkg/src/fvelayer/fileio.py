"""Binary feature and model snapshot files.

Both formats are little-endian, float64 payloads, and round-trip
bit-exactly. Labels live in sidecar CSVs; feature files are pure
geometry containers.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import FeatureBatch
from .gmm import DiagGmm
from .streaming import EmaState

FEATURE_MAGIC = b"FVEF"
GMM_MAGIC = b"FVEG"
FORMAT_VERSION = 1

_FLAG_HAS_PART_IDS = 1
_GMM_FLAG_HAS_ACCUMULATORS = 1


class FileFormatError(ValueError):
    pass


class BadMagicError(FileFormatError):
    pass


class UnsupportedVersionError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class CorruptIndexError(FileFormatError):
    pass


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"unexpected end of file while reading {what}")
    return buf


def write_feature_file(path: str | Path, batch: FeatureBatch) -> None:
    """Header, per-group index (id, row offset, row count), then the
    row-major float64 payload. Groups are stored contiguously in
    first-appearance order."""
    gids = batch.group_ids()
    order = np.concatenate([np.flatnonzero(batch.groups == g) for g in gids])
    data = np.ascontiguousarray(batch.data[order], dtype="<f8")
    part_ids = None if batch.part_ids is None else batch.part_ids[order]
    flags = _FLAG_HAS_PART_IDS if part_ids is not None else 0
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<HQIQI", FORMAT_VERSION, batch.n, batch.dim, len(gids), flags))
        offset = 0
        for g in gids:
            count = int(np.count_nonzero(batch.groups == g))
            f.write(struct.pack("<QQI", int(g), offset, count))
            offset += count
        f.write(data.tobytes())
        if part_ids is not None:
            f.write(np.ascontiguousarray(part_ids, dtype="<i8").tobytes())


def read_feature_file(path: str | Path) -> FeatureBatch:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != FEATURE_MAGIC:
            raise BadMagicError(f"not a feature file (magic {magic!r})")
        version, n, d, n_groups, flags = struct.unpack("<HQIQI", _read_exact(f, 26, "header"))
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"unsupported feature file version {version}")
        index = []
        for _ in range(n_groups):
            index.append(struct.unpack("<QQI", _read_exact(f, 20, "group index")))
        prev_end = 0
        for gid, offset, count in index:
            if offset != prev_end:
                raise CorruptIndexError("group offsets must be contiguous and increasing")
            prev_end = offset + count
        if prev_end != n:
            raise CorruptIndexError(f"group index covers {prev_end} rows, header says {n}")
        data = np.frombuffer(_read_exact(f, 8 * n * d, "payload"), dtype="<f8").reshape(n, d)
        groups = np.empty(n, dtype=np.int64)
        for gid, offset, count in index:
            groups[offset:offset + count] = gid
        part_ids = None
        if flags & _FLAG_HAS_PART_IDS:
            part_ids = np.frombuffer(_read_exact(f, 8 * n, "part ids"), dtype="<i8").copy()
    return FeatureBatch(data.copy(), groups, part_ids)


def write_gmm_file(path: str | Path, gmm: DiagGmm, lam: float = 0.0, t: int = 0,
                   state: EmaState | None = None) -> None:
    """Snapshot of a (bias-corrected) model, optionally with the raw EMA
    accumulators so training can resume."""
    if state is not None:
        lam, t = state.lam, state.t
    flags = _GMM_FLAG_HAS_ACCUMULATORS if (state is not None and state.t > 0) else 0
    with open(path, "wb") as f:
        f.write(GMM_MAGIC)
        f.write(struct.pack("<HIIdQI", FORMAT_VERSION, gmm.k, gmm.dim, lam, t, flags))
        for arr in (gmm.weights, gmm.means, gmm.variances):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if flags & _GMM_FLAG_HAS_ACCUMULATORS:
            for arr in (state.acc_weights, state.acc_means, state.acc_variances):
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_gmm_file(path: str | Path) -> tuple[DiagGmm, dict]:
    """Returns the model plus a meta dict with lambda, t and, when
    present, the raw accumulators."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != GMM_MAGIC:
            raise BadMagicError(f"not a GMM snapshot file (magic {magic!r})")
        version, k, d, lam, t, flags = struct.unpack("<HIIdQI", _read_exact(f, 30, "header"))
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"unsupported snapshot version {version}")

        def block(rows, cols, what):
            raw = _read_exact(f, 8 * rows * cols, what)
            arr = np.frombuffer(raw, dtype="<f8").copy()
            return arr if cols == 1 else arr.reshape(rows, cols)

        weights = block(k, 1, "weights")
        means = block(k, d, "means")
        variances = block(k, d, "variances")
        meta = {"lambda": lam, "t": t}
        if flags & _GMM_FLAG_HAS_ACCUMULATORS:
            meta["acc_weights"] = block(k, 1, "accumulator weights")
            meta["acc_means"] = block(k, d, "accumulator means")
            meta["acc_variances"] = block(k, d, "accumulator variances")
    return DiagGmm(weights, means, variances), meta


def write_labels_csv(path: str | Path, ids: np.ndarray, labels: np.ndarray,
                     id_column: str = "group") -> None:
    with open(path, "w") as f:
        f.write(f"{id_column},label\n")
        for i, lab in zip(ids, labels):
            f.write(f"{int(i)},{int(lab)}\n")
