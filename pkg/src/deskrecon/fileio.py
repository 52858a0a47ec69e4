"""Small readers and writers: binary PPM (P6), ascii PLY for Gaussian clouds, CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import ParseError
from .splat import GaussianCloud

PLY_FIELDS = (
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity", "red", "green", "blue",
)


def fmt(x) -> str:
    """Shortest round-trip text for a number; empty for None."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- PPM -----------------------------------------------------------------------


def to_bytes(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image):
    """Write an ``(H, W, 3)`` float image in [0, 1] as 8-bit P6."""
    data = to_bytes(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {data.shape}")
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _ppm_tokens(buf: bytes, count: int, path):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(path, 1, "truncated header")
        tokens.append(buf[start:pos].decode("ascii", "replace"))
    return tokens, pos + 1  # a single whitespace byte ends the header


def read_ppm(path) -> np.ndarray:
    """Read an 8-bit P6 file as float ``(H, W, 3)`` in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, offset = _ppm_tokens(buf, 4, path)
    if tokens[0] != "P6":
        raise ParseError(path, 1, f"unsupported magic {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(path, 1, "non-integer header field") from None
    if maxval != 255:
        raise ParseError(path, 1, f"unsupported maxval {maxval}")
    data = np.frombuffer(buf[offset:offset + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ParseError(path, 1, f"expected {w * h * 3} bytes of pixel data, got {data.size}")
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


# -- PLY -----------------------------------------------------------------------


def write_ply(path, cloud: GaussianCloud):
    """Ascii PLY with position, log-scale, unit quaternion, opacity logit and RGB."""
    cols = np.column_stack([cloud.means, cloud.log_scales, cloud.quats, cloud.opacity_logits, cloud.colors])
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        for name in PLY_FIELDS:
            fh.write(f"property float {name}\n")
        fh.write("end_header\n")
        for row in cols:
            fh.write(" ".join(fmt(v) for v in row) + "\n")


def read_ply(path) -> GaussianCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise ParseError(path, 1, "missing 'ply' magic")
    n, props, end = None, [], None
    for i, line in enumerate(lines[1:], 2):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:1] == ["property"]:
            props.append(parts[-1])
        elif line.strip() == "end_header":
            end = i
            break
    if end is None or n is None:
        raise ParseError(path, len(lines), "incomplete header")
    if tuple(props) != PLY_FIELDS:
        raise ParseError(path, end, "unexpected vertex properties")
    body = lines[end:end + n]
    if len(body) != n:
        raise ParseError(path, end + len(body), f"expected {n} vertices, found {len(body)}")
    try:
        arr = np.array([[float(v) for v in row.split()] for row in body], dtype=np.float64).reshape(n, len(PLY_FIELDS))
    except ValueError as exc:
        raise ParseError(path, end, f"bad vertex row: {exc}") from None
    return GaussianCloud(arr[:, 0:3], arr[:, 3:6], arr[:, 6:10], arr[:, 10], arr[:, 11:14])
