"""Plain-text and image writers shared by the command-line tools."""
from __future__ import annotations

import csv

import numpy as np


def fmt(x):
    """Round-trip float formatting; ints and strings pass through."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return "" if x is None else str(x)


def write_csv(path, columns, rows):
    """``rows`` are dicts keyed by ``columns``; missing keys become empty cells."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_grid_csv(path, coords, values):
    """Columns x (, y, z) then one column per field.  ``values`` is (fields, points)."""
    coords = np.asarray(coords, dtype=float)
    values = np.atleast_2d(np.asarray(values, dtype=float))
    names = ["x", "y", "z"][:coords.shape[1]]
    if len(values) == 1:
        names += ["value"]
    else:
        names += [f"r{i}" for i in range(len(values))]
    data = np.column_stack([coords, values.T])
    np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt="%.17g")


def write_pgm(path, array, vmin=None, vmax=None):
    """8-bit binary greymap (P5); the value range is kept in a header comment.

    Rows of the image run along the second array axis, so ``array[ix, iy]``
    appears with x to the right and y upwards.
    """
    a = np.asarray(array, dtype=float)
    if a.ndim != 2:
        raise ValueError("heatmaps need a 2-d array")
    lo = float(np.min(a)) if vmin is None else float(vmin)
    hi = float(np.max(a)) if vmax is None else float(vmax)
    span = hi - lo if hi > lo else 1.0
    img = np.clip(np.rint((a - lo) / span * 255.0), 0, 255).astype(np.uint8)
    img = img.T[::-1]
    head = f"P5\n# vmin={lo!r} vmax={hi!r}\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(head + img.tobytes())


def read_pgm(path):
    """Return (uint8 image as stored, vmin, vmax)."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, comments, pos = [], {}, 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            for kv in data[pos + 1:end].decode().split():
                k, _, v = kv.partition("=")
                comments[k] = float(v)
            pos = end + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode())
        pos = end
    pos += 1
    if tokens[0] != "P5":
        raise ValueError("not a binary greymap")
    w, h = int(tokens[1]), int(tokens[2])
    img = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return img, comments.get("vmin"), comments.get("vmax")


def write_manifest(path, items):
    with open(path, "w") as fh:
        for k, v in items.items():
            if isinstance(v, (list, tuple)):
                v = ",".join(fmt(x) for x in v)
            fh.write(f"{k}: {fmt(v)}\n")


def read_manifest(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            k, sep, v = line.rstrip("\n").partition(": ")
            if sep:
                out[k] = v
    return out
