"""Reading and writing checkpoints and density maps.

Checkpoint layout (little-endian)::

    magic       8 bytes   b"DCNTCKPT"
    version     uint32
    manifest    32 bytes  SHA-256 of the architecture manifest
    n_arrays    uint32
    per array:  name length (uint32), UTF-8 name, ndim (uint32),
                ndim x uint32 extents, float64 values
    checksum    32 bytes  SHA-256 of everything above

Density grids are text: a ``DMAP <width> <height>`` header line followed by
one line of ``repr``-formatted values per row, so they round-trip exactly.
"""
import hashlib
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CheckpointError, LoadError
from .model import Architecture, Layer, ModelParams

__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "write_density",
    "read_density",
    "density_to_image",
    "export_density_image",
    "atomic_write",
]

MAGIC = b"DCNTCKPT"
FORMAT_VERSION = 1
_DIGEST_SIZE = 32
_DENSITY_HEADER = "DMAP"


@contextmanager
def atomic_write(path, mode="w", **kwargs):
    """Open a temporary file next to ``path`` and move it into place on success.

    Nothing is left behind when the body raises.
    """
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **kwargs) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _encode_params(params):
    chunks = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        params.manifest_hash,
        struct.pack("<I", len(params.arrays())),
    ]
    for name, arr in zip(params.array_names(), params.arrays()):
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(params, path):
    """Write ``params`` to ``path`` atomically.

    Examples
    --------
    >>> import tempfile, os
    >>> from densecount.model import init_params
    >>> params = init_params(0)
    >>> path = os.path.join(tempfile.mkdtemp(), "model.ckpt")
    >>> save_checkpoint(params, path)
    >>> load_checkpoint(path).param_count
    60545
    """
    with atomic_write(path, "wb") as f:
        f.write(_encode_params(params))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, size, field):
        if self.offset + size > len(self.data):
            raise CheckpointError(f"checkpoint is truncated while reading {field}", field)
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def uint32(self, field):
        return struct.unpack("<I", self.take(4, field))[0]


def load_checkpoint(path, architecture=None):
    """Read a checkpoint written by ``save_checkpoint``.

    Parameters
    ----------
    path : str or Path
    architecture : Architecture, optional
        The architecture the loader is built for; the checkpoint must match its
        manifest hash.

    Returns
    -------
    ModelParams

    Raises
    ------
    CheckpointError
        When the file is truncated, corrupt, of another format version or for
        another architecture. ``CheckpointError.field`` names the failing field.
    """
    architecture = architecture or Architecture()
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint '{path}' not found", "path") from None
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"'{path}' is not a checkpoint file", "magic")
    if len(data) < len(MAGIC) + _DIGEST_SIZE:
        raise CheckpointError("checkpoint is truncated", "checksum")
    body, checksum = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != checksum:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupt)", "checksum")

    reader = _Reader(body)
    reader.take(len(MAGIC), "magic")
    version = reader.uint32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", "version")
    if reader.take(_DIGEST_SIZE, "manifest") != architecture.manifest_hash():
        raise CheckpointError(
            "checkpoint was written for a different architecture", "manifest"
        )
    n_arrays = reader.uint32("n_arrays")
    arrays = {}
    for _ in range(n_arrays):
        name = reader.take(reader.uint32("name"), "name").decode("utf-8")
        ndim = reader.uint32(f"{name}.ndim")
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim, f"{name}.shape"))
        count = int(np.prod(shape))
        values = np.frombuffer(reader.take(8 * count, f"{name}.values"), dtype="<f8")
        arrays[name] = values.astype(np.float64).reshape(shape)
    if reader.offset != len(body):
        raise CheckpointError("unexpected trailing data in checkpoint", "n_arrays")

    layers = []
    for name, _, spec in architecture.layer_specs():
        try:
            weight, bias = arrays[f"{name}.weight"], arrays[f"{name}.bias"]
        except KeyError as exc:
            raise CheckpointError(f"checkpoint lacks array {exc}", "name") from None
        layers.append(Layer(name, weight, bias, spec))
    return ModelParams(layers, architecture)


def write_density(density, path):
    """Write a 2-D density map as a text grid, atomically."""
    density = np.asarray(density, dtype=np.float64)
    if density.ndim != 2:
        raise ValueError(f"density map must be 2-D, got shape {density.shape}")
    h, w = density.shape
    with atomic_write(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{_DENSITY_HEADER} {w} {h}\n")
        for row in density:
            f.write(" ".join(repr(float(v)) for v in row))
            f.write("\n")


def read_density(path):
    """Read a density grid written by ``write_density``."""
    try:
        with open(path, encoding="utf-8") as f:
            header = f.readline().split()
            if len(header) != 3 or header[0] != _DENSITY_HEADER:
                raise LoadError("missing 'DMAP <width> <height>' header", path=path, line=1)
            w, h = int(header[1]), int(header[2])
            rows = []
            for lineno, line in enumerate(f, start=2):
                if not line.strip():
                    continue
                try:
                    row = [float(v) for v in line.split()]
                except ValueError:
                    raise LoadError("non-numeric value", path=path, line=lineno) from None
                if len(row) != w:
                    raise LoadError(
                        f"expected {w} values, got {len(row)}", path=path, line=lineno
                    )
                rows.append(row)
    except FileNotFoundError:
        raise LoadError("density map not found", path=path) from None
    if len(rows) != h:
        raise LoadError(f"expected {h} rows, got {len(rows)}", path=path)
    return np.array(rows, dtype=np.float64).reshape(h, w)


def density_to_image(density):
    """Max-normalize a density map to 8-bit gray levels.

    Negative values map to black; an all-zero (or all-negative) map is black.
    """
    density = np.clip(np.asarray(density, dtype=np.float64), 0.0, None)
    peak = density.max() if density.size else 0.0
    if peak <= 0:
        return np.zeros(density.shape, dtype=np.uint8)
    return np.rint(density / peak * 255.0).astype(np.uint8)


def export_density_image(density, path):
    """Write a grayscale visualization of a density map; format from the suffix."""
    path = Path(path)
    fmt = Image.registered_extensions().get(path.suffix.lower())
    with atomic_write(path, "wb") as f:
        Image.fromarray(density_to_image(density)).save(f, format=fmt)
