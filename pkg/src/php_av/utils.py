"""
Small helpers used across packages: JSON encoding, seeding, hashing, rounding
"""

import hashlib
import json
import os
import shutil
from decimal import Decimal, ROUND_HALF_UP
from pathlib import Path

import numpy as np


class NumpyEncoder(json.JSONEncoder):
    """JSON encoder that understands numpy scalars and arrays"""

    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, np.bool_):
            return bool(obj)
        elif isinstance(obj, Path):
            return str(obj)
        return super(NumpyEncoder, self).default(obj)


def dump_json(obj, path):
    """Write `obj` as stable, sorted, indented JSON"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(obj, f, indent=2, sort_keys=True, cls=NumpyEncoder)
        f.write("\n")


def load_json(path):
    with open(path, 'r') as f:
        return json.load(f)


def derive_seed(base_seed, *labels):
    """Stable 63-bit seed from a base seed and any number of string/int labels"""
    h = hashlib.sha256(str(int(base_seed)).encode())
    for label in labels:
        h.update(b"\x00")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") & ((1 << 63) - 1)


def fingerprint_arrays(named_arrays):
    """sha256 hex digest over (name, shape, dtype, little-endian bytes), sorted by name"""
    h = hashlib.sha256()
    for name in sorted(named_arrays):
        arr = np.asarray(named_arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder('<'), copy=False)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.dtype.str.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def round_half_up(value, places=2):
    """Round half-up on the decimal representation (2.345 -> 2.35)"""
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP))


def replace_dir_atomically(tmp_dir, final_dir):
    """
    Move a fully written temp directory into place

    An existing directory is renamed to `<name>.old` and deleted only after the
    swap; if the swap fails it is renamed back.
    """
    tmp_dir, final_dir = Path(tmp_dir), Path(final_dir)
    aside = final_dir.with_name(final_dir.name + ".old")
    if aside.exists():
        shutil.rmtree(aside)
    if not final_dir.exists():
        os.replace(tmp_dir, final_dir)
        return
    os.replace(final_dir, aside)
    try:
        os.replace(tmp_dir, final_dir)
    except OSError:
        os.replace(aside, final_dir)
        raise
    shutil.rmtree(aside)
