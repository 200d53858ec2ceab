"""Matrix container helpers, seeded synthetic generators and the ``.stt`` tensor file format.

A Matrix is a read-only, C-contiguous ``float32`` numpy array of rank 2. Files are a raw little-endian
``f32`` payload (``name.stt``) plus a JSON sidecar (``name.stt.json``) describing dtype, shape,
layout and byte order.
"""
import json
import math
import os
from pathlib import Path
from typing import List, Literal, NamedTuple, Tuple, Union

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, ValidationError

from core.errors import (
    CorruptFileError,
    InvalidDimensionError,
    NonFiniteError,
    TensorIOError,
    UnsupportedFormatError,
)
from core.log import get_logger

logger = get_logger(__name__)

Matrix = npt.NDArray[np.float32]
PathLike = Union[str, os.PathLike]

PAYLOAD_SUFFIX = ".stt"
SIDECAR_SUFFIX = ".json"


class QKV(NamedTuple):
    q: Matrix
    k: Matrix
    v: Matrix


class OutlierQKV(NamedTuple):
    q: Matrix
    k: Matrix
    v: Matrix
    outlier_rows: Tuple[int, ...]


class TensorHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dtype: Literal["f32"] = "f32"
    shape: Tuple[int, int]
    layout: Literal["row-major"] = "row-major"
    endian: Literal["little"] = "little"


def as_matrix(data, name: str = "matrix", check_finite: bool = True) -> Matrix:
    arr = np.array(data, dtype=np.float32, order="C", copy=True)
    if arr.ndim != 2:
        raise InvalidDimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if check_finite and not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    arr.setflags(write=False)
    return arr


def _check_dims(n: int, d: int):
    if int(n) < 1 or int(d) < 1:
        raise InvalidDimensionError(f"n and d must be >= 1, got n={n}, d={d}")


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def box_muller(rng: np.random.Generator, count: int) -> np.ndarray:
    """Standard normal float64 samples, two per uniform pair, cosine branch first."""
    pairs = (count + 1) // 2
    u1 = rng.random(pairs)
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = radius * np.cos(theta)
    out[1::2] = radius * np.sin(theta)
    return out[:count]


def gaussian_matrix(rng: np.random.Generator, rows: int, cols: int, std: float = 1.0) -> Matrix:
    return as_matrix(box_muller(rng, rows * cols).reshape(rows, cols) * std)


def gen_gaussian_qkv(n: int, d: int, seed: int, scale: float = 1.0, stream: int = 0) -> QKV:
    _check_dims(n, d)
    if not math.isfinite(scale) or scale < 0:
        raise InvalidDimensionError(f"scale must be a finite value >= 0, got {scale}")
    rng = philox(seed, 2 * stream)
    draws = box_muller(rng, 3 * n * d).reshape(3, n, d) * scale
    return QKV(as_matrix(draws[0], "Q"), as_matrix(draws[1], "K"), as_matrix(draws[2], "V"))


def gen_outlier_qkv(
    n: int,
    d: int,
    seed: int,
    outlier_frac: float,
    outlier_gain: float,
    stream: int = 0,
) -> OutlierQKV:
    """Unit-scale Gaussian Q/K/V where ``ceil(frac*n)`` value rows are amplified by ``gain``.

    Q/K/V use the same stream as :func:`gen_gaussian_qkv`, so ``frac=0`` or ``gain=1`` reproduce it.
    """
    if not 0.0 <= outlier_frac <= 1.0:
        raise InvalidDimensionError(f"outlier_frac must lie in [0, 1], got {outlier_frac}")
    if not outlier_gain >= 1.0:
        raise InvalidDimensionError(f"outlier_gain must be >= 1, got {outlier_gain}")
    q, k, v = gen_gaussian_qkv(n, d, seed, 1.0, stream)

    count = math.ceil(outlier_frac * n - 1e-9)
    rows: List[int] = []
    if count > 0:
        picker = philox(seed, 2 * stream + 1)
        rows = sorted(int(r) for r in picker.choice(n, size=count, replace=False))
        v = np.array(v)
        v[rows] *= np.float32(outlier_gain)
        v = as_matrix(v, "V")
    logger.debug("outlier rows %s (gain %.3g)", rows, outlier_gain)
    return OutlierQKV(q, k, v, tuple(rows))


def sidecar_path(path: PathLike) -> Path:
    p = Path(path)
    return p.with_name(p.name + SIDECAR_SUFFIX)


def save_tensor(m: Matrix, path: PathLike):
    m = as_matrix(m)
    header = TensorHeader(shape=(m.shape[0], m.shape[1]))
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    target = Path(path)
    try:
        target.write_bytes(payload)
        sidecar_path(target).write_text(header.model_dump_json(), encoding="utf-8")
    except OSError as e:
        raise TensorIOError(f"cannot write tensor to '{target}': {e.strerror or e}") from e


def load_tensor(path: PathLike) -> Matrix:
    target = Path(path)
    try:
        raw_header = sidecar_path(target).read_text(encoding="utf-8")
        payload = target.read_bytes()
    except OSError as e:
        raise TensorIOError(f"cannot read tensor '{target}': {e.strerror or e}") from e

    try:
        fields = json.loads(raw_header)
    except json.JSONDecodeError as e:
        raise CorruptFileError(f"{target}: sidecar is not valid JSON ({e.msg})") from e
    if not isinstance(fields, dict):
        raise CorruptFileError(f"{target}: sidecar must be a JSON object")

    for key, supported in (("dtype", "f32"), ("layout", "row-major"), ("endian", "little")):
        if key in fields and fields[key] != supported:
            raise UnsupportedFormatError(f"{target}: unsupported {key} '{fields[key]}' (only '{supported}')")
    try:
        header = TensorHeader.model_validate(fields)
    except ValidationError as e:
        raise CorruptFileError(f"{target}: invalid header: {e.errors()[0]['msg']}") from e

    rows, cols = header.shape
    if rows < 0 or cols < 0:
        raise CorruptFileError(f"{target}: negative shape {header.shape}")
    expected = 4 * rows * cols
    if len(payload) != expected:
        raise CorruptFileError(f"{target}: payload has {len(payload)} bytes, header shape {header.shape} needs {expected}")

    data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    try:
        return as_matrix(data, str(target))
    except NonFiniteError as e:
        raise CorruptFileError(str(e)) from e
