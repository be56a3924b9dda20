"""Regenerate labels_3x3x3.nii byte by byte, without going through atlascrop."""

import struct
from pathlib import Path

hdr = bytearray(348)
struct.pack_into("<i", hdr, 0, 348)
struct.pack_into("<8h", hdr, 40, 3, 3, 3, 3, 1, 1, 1, 1)
struct.pack_into("<hh", hdr, 70, 2, 8)  # uint8
struct.pack_into("<8f", hdr, 76, 1.0, 2.0, 2.5, 4.0, 0, 0, 0, 0)
struct.pack_into("<f", hdr, 108, 352.0)
struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
struct.pack_into("<hh", hdr, 252, 0, 1)
struct.pack_into("<4f", hdr, 280, 2.0, 0, 0, -10.0)
struct.pack_into("<4f", hdr, 296, 0, 2.5, 0, 5.0)
struct.pack_into("<4f", hdr, 312, 0, 0, 4.0, 20.0)
hdr[344:348] = b"n+1\x00"
# voxel (i, j, k) holds (i + 3j + 9k) % 4, x fastest
payload = bytes((n % 4) for n in range(27))
Path(__file__).with_name("labels_3x3x3.nii").write_bytes(bytes(hdr) + b"\x00" * 4 + payload)
