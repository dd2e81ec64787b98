"""File formats: binary PGM (2D), a minimal NIfTI-1 subset (volumes), and a
little-endian container for displacement fields.

The NIfTI-1 support reads and writes uncompressed single-file volumes with
data types uint8, int16 and float32.  Orientation and affine header fields
are carried through verbatim on round trip but never interpreted.  Data in
the file is Fortran-ordered (first axis fastest); grid axes are reversed on
read so that the in-memory layout follows the package-wide C-order
convention.
"""

from __future__ import annotations

import struct

import numpy as np

from .grid import DisplacementField, GridGeometry, GridImage


class FormatError(ValueError):
    """Malformed or unsupported file content; carries a byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


def _need(blob: bytes, end: int, what: str) -> None:
    if len(blob) < end:
        raise FormatError(f"truncated file: {what} needs {end} bytes, have {len(blob)}", len(blob))


# ---------------------------------------------------------------------------
# PGM (P5, 8/16-bit), intensities rescaled to [0, 1]

def read_pgm(path) -> GridImage:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def token():
        nonlocal pos
        while True:
            while pos < len(blob) and blob[pos : pos + 1].isspace():
                pos += 1
            if pos < len(blob) and blob[pos : pos + 1] == b"#":
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
                continue
            break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", start)
        return blob[start:pos]

    if token() != b"P5":
        raise FormatError("not a binary PGM (magic must be P5)", 0)
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError:
        raise FormatError("non-numeric PGM header field", pos) from None
    if width < 2 or height < 2:
        raise FormatError(f"PGM extents {width}x{height} too small", pos)
    if not 0 < maxval < 65536:
        raise FormatError(f"PGM maxval {maxval} out of range", pos)
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    _need(blob, pos + count * dtype.itemsize, "pixel data")
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    values = raw.reshape(height, width).astype(np.float64) / maxval
    return GridImage(GridGeometry((height, width)), values)


def write_pgm(path, image: GridImage, maxval: int = 255) -> None:
    """Quantize intensities (clipped to [0, 1]) onto [0, maxval]."""
    if image.geom.ndim != 2:
        raise ValueError("PGM output is 2D only")
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval {maxval} out of range")
    height, width = image.geom.dims
    quant = np.rint(np.clip(image.values, 0.0, 1.0) * maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n{maxval}\n".encode())
        fh.write(quant.astype(dtype).tobytes())


# ---------------------------------------------------------------------------
# NIfTI-1 subset

_NIFTI_HEADER_SIZE = 348
_NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_NIFTI_CODES = {np.dtype("u1"): 2, np.dtype("<i2"): 4, np.dtype("<f4"): 16}


class NiftiVolume:
    """A decoded volume plus its verbatim 348-byte header."""

    def __init__(self, image: GridImage, header: bytes):
        self.image = image
        self.header = header


def read_nifti(path) -> NiftiVolume:
    with open(path, "rb") as fh:
        blob = fh.read()
    _need(blob, _NIFTI_HEADER_SIZE, "NIfTI-1 header")
    header = blob[:_NIFTI_HEADER_SIZE]
    (sizeof_hdr,) = struct.unpack_from("<i", header, 0)
    if sizeof_hdr != 348:
        raise FormatError(f"bad sizeof_hdr {sizeof_hdr}, expected 348", 0)
    magic = header[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"bad NIfTI magic {magic!r}", 344)
    if magic == b"ni1\x00":
        raise FormatError("two-file NIfTI (.hdr/.img) is not supported", 344)
    dim = struct.unpack_from("<8h", header, 40)
    ndim = dim[0]
    if ndim not in (2, 3):
        raise FormatError(f"unsupported dimensionality {ndim}", 40)
    extents = dim[1 : 1 + ndim]
    if any(e < 2 for e in extents):
        raise FormatError(f"extents {extents} too small", 40)
    (datatype,) = struct.unpack_from("<h", header, 70)
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"unsupported datatype code {datatype}", 70)
    dtype = _NIFTI_DTYPES[datatype]
    (vox_offset,) = struct.unpack_from("<f", header, 108)
    offset = int(vox_offset)
    if offset < _NIFTI_HEADER_SIZE:
        raise FormatError(f"vox_offset {offset} overlaps the header", 108)
    count = int(np.prod(extents))
    _need(blob, offset + count * dtype.itemsize, "voxel data")
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    # file order: first axis fastest -> reverse axes for C-order storage
    values = raw.reshape(tuple(reversed(extents))).astype(np.float64)
    return NiftiVolume(GridImage(GridGeometry(tuple(reversed(extents))), values), header)


def write_nifti(path, image: GridImage, dtype: str = "float32", header: bytes | None = None) -> None:
    """Write a single-file uncompressed volume.

    ``header`` (from a prior read) is reused verbatim apart from the fields
    this writer owns: dim, datatype, bitpix and vox_offset.
    """
    np_dtype = {"uint8": np.dtype("u1"), "int16": np.dtype("<i2"), "float32": np.dtype("<f4")}.get(dtype)
    if np_dtype is None:
        raise ValueError(f"unsupported dtype {dtype!r}")
    dims = image.geom.dims
    hdr = bytearray(header if header is not None else bytes(_NIFTI_HEADER_SIZE))
    if len(hdr) != _NIFTI_HEADER_SIZE:
        raise ValueError("template header must be 348 bytes")
    struct.pack_into("<i", hdr, 0, 348)
    file_dims = tuple(reversed(dims))  # first axis fastest in the file
    struct.pack_into("<8h", hdr, 40, len(dims), *file_dims, *([1] * (7 - len(dims))))
    struct.pack_into("<h", hdr, 70, _NIFTI_CODES[np_dtype])
    struct.pack_into("<h", hdr, 72, np_dtype.itemsize * 8)
    struct.pack_into("<f", hdr, 108, 352.0)
    if header is None:
        # pixdim must be positive for well-formedness; spacing is not interpreted
        struct.pack_into("<8f", hdr, 76, 1.0, *([1.0] * 7))
    hdr[344:348] = b"n+1\x00"
    data = image.values
    if np_dtype.kind in "iu":
        info = np.iinfo(np_dtype)
        data = np.rint(np.clip(data, info.min, info.max))
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(bytes(4))  # pad to vox_offset 352
        fh.write(np.ascontiguousarray(data, dtype=np_dtype).tobytes())


# ---------------------------------------------------------------------------
# displacement-field container

_FIELD_MAGIC = b"DFLD"
_FIELD_VERSION = 1


def write_field(path, field: DisplacementField) -> None:
    n = field.geom.ndim
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC)
        fh.write(struct.pack("<BB", _FIELD_VERSION, n))
        fh.write(struct.pack(f"<{n}I", *field.geom.dims))
        fh.write(np.ascontiguousarray(field.vectors, dtype="<f4").tobytes())


def read_field(path) -> DisplacementField:
    with open(path, "rb") as fh:
        blob = fh.read()
    _need(blob, 6, "field header")
    if blob[:4] != _FIELD_MAGIC:
        raise FormatError(f"bad field magic {blob[:4]!r}", 0)
    version, n = struct.unpack_from("<BB", blob, 4)
    if version != _FIELD_VERSION:
        raise FormatError(f"unsupported field container version {version}", 4)
    if n not in (2, 3):
        raise FormatError(f"unsupported dimensionality {n} (2D/3D only)", 5)
    _need(blob, 6 + 4 * n, "field dims")
    dims = struct.unpack_from(f"<{n}I", blob, 6)
    geom = GridGeometry(dims)
    offset = 6 + 4 * n
    count = geom.voxel_count * n
    expected = offset + 4 * count
    if len(blob) != expected:
        raise FormatError(
            f"payload length {len(blob) - offset} does not match dims {dims}", offset
        )
    vecs = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return DisplacementField(geom, vecs.reshape(geom.dims + (n,)).astype(np.float64))


def read_image(path) -> GridImage:
    """Dispatch on extension: .pgm or NIfTI (.nii)."""
    name = str(path).lower()
    if name.endswith(".pgm"):
        return read_pgm(path)
    return read_nifti(path).image


def write_image(path, image: GridImage, maxval: int = 255) -> None:
    name = str(path).lower()
    if name.endswith(".pgm"):
        write_pgm(path, image, maxval)
    else:
        write_nifti(path, image)


# ---------------------------------------------------------------------------
# dataset directory layout

def save_pair(directory, name: str, pair) -> None:
    """Write one registration pair as NIfTI volumes plus the truth field."""
    import os

    write_nifti(os.path.join(directory, f"{name}.fixed.nii"), pair.fixed)
    write_nifti(os.path.join(directory, f"{name}.moving.nii"), pair.moving)
    if pair.fixed_seg is not None:
        write_nifti(os.path.join(directory, f"{name}.fixed_seg.nii"), pair.fixed_seg, dtype="uint8")
    if pair.moving_seg is not None:
        write_nifti(os.path.join(directory, f"{name}.moving_seg.nii"), pair.moving_seg, dtype="uint8")
    if pair.true_field is not None:
        write_field(os.path.join(directory, f"{name}.true_field.dfld"), pair.true_field)


def load_pairs(directory) -> list:
    """Load every pair saved by :func:`save_pair`, sorted by name."""
    import os

    from .grid import RegistrationPair

    names = sorted(
        f[: -len(".fixed.nii")]
        for f in os.listdir(directory)
        if f.endswith(".fixed.nii")
    )
    if not names:
        raise FormatError(f"no registration pairs found in {directory}")
    pairs = []
    for name in names:
        def path(suffix):
            return os.path.join(directory, f"{name}.{suffix}")

        fixed = read_nifti(path("fixed.nii")).image
        moving = read_nifti(path("moving.nii")).image
        fixed_seg = read_nifti(path("fixed_seg.nii")).image if os.path.exists(path("fixed_seg.nii")) else None
        moving_seg = read_nifti(path("moving_seg.nii")).image if os.path.exists(path("moving_seg.nii")) else None
        true_field = read_field(path("true_field.dfld")) if os.path.exists(path("true_field.dfld")) else None
        pairs.append(RegistrationPair(fixed, moving, fixed_seg, moving_seg, true_field))
    return pairs
