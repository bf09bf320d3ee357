"""Malformed archive files; each one must be rejected with ``FormatError``."""

import json
import struct


def _raw(header: dict | bytes, data: bytes = b"") -> bytes:
    h = header if isinstance(header, bytes) else json.dumps(header).encode()
    return struct.pack("<Q", len(h)) + h + data


MALFORMED = {
    "not_json": _raw(b"{not json", b""),
    "not_object": _raw([1, 2, 3]),
    "bad_dtype": _raw({"w": {"dtype": "I8", "shape": [1], "data_offsets": [0, 1]}}, b"\0"),
    "negative_shape": _raw({"w": {"dtype": "F32", "shape": [-1], "data_offsets": [0, 4]}}, b"\0" * 4),
    "length_mismatch": _raw({"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}}, b"\0" * 4),
    "overlap": _raw(
        {
            "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
            "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
        },
        b"\0" * 12,
    ),
    "beyond_eof": _raw({"w": {"dtype": "F64", "shape": [4], "data_offsets": [0, 32]}}, b"\0" * 8),
    "gap": _raw({"w": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}}, b"\0" * 8),
    "missing_offsets": _raw({"w": {"dtype": "F32", "shape": [1]}}, b"\0" * 4),
    "bad_metadata": _raw({"__metadata__": {"k": 1}}),
    "duplicate_key": _raw(
        b'{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}',
        b"\0" * 4,
    ),
    "not_utf8": _raw(b"\xff\xfe\x00", b""),
    "huge_header_length": struct.pack("<Q", 2**62) + b"{}",
}
